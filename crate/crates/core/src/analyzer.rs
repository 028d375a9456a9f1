//! Surface-level discourse-marker detection over utterances.
//!
//! Three independent categories: deixis and anaphora fire on any whole
//! token in their word lists; logical consequence fires when the utterance
//! opens with a cue phrase.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{ConversationFragment, Vocabulary, MAX_UTTERANCE_LEN};
use crate::error::{Error, Result};
use crate::eval::respond;
use crate::model::ModelParameters;

pub const DEFAULT_DEIXIS: [&str; 7] = ["here", "there", "then", "now", "later", "this", "that"];
pub const DEFAULT_ANAPHORA: [&str; 10] = ["she", "her", "hers", "he", "him", "his", "they", "them", "their", "theirs"];
pub const DEFAULT_CUE_PHRASES: [&str; 13] = [
    "so",
    "after all",
    "in addition",
    "furthermore",
    "therefore",
    "thus",
    "also",
    "but",
    "however",
    "otherwise",
    "although",
    "if",
    "then",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Deixis,
    Anaphora,
    LogicalConsequence,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Deixis, Category::Anaphora, Category::LogicalConsequence];

    pub fn name(self) -> &'static str {
        match self {
            Category::Deixis => "deixis",
            Category::Anaphora => "anaphora",
            Category::LogicalConsequence => "logical_consequence",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lowercased word lists. Cue phrases are token sequences, kept longest
/// first so the first match is the longest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerLexicon {
    deixis: BTreeSet<String>,
    anaphora: BTreeSet<String>,
    cue_phrases: Vec<Vec<String>>,
}

impl Default for MarkerLexicon {
    fn default() -> Self {
        MarkerLexicon::new(DEFAULT_DEIXIS, DEFAULT_ANAPHORA, DEFAULT_CUE_PHRASES)
    }
}

impl MarkerLexicon {
    pub fn new<A, B, C>(deixis: A, anaphora: B, cue_phrases: C) -> Self
    where
        A: IntoIterator,
        A::Item: AsRef<str>,
        B: IntoIterator,
        B::Item: AsRef<str>,
        C: IntoIterator,
        C::Item: AsRef<str>,
    {
        let words = |it: &mut dyn Iterator<Item = String>| it.map(|w| w.trim().to_lowercase()).filter(|w| !w.is_empty()).collect();
        let mut cues: Vec<Vec<String>> = cue_phrases
            .into_iter()
            .map(|p| p.as_ref().split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .filter(|p| !p.is_empty())
            .collect();
        cues.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        cues.dedup();
        MarkerLexicon {
            deixis: words(&mut deixis.into_iter().map(|w| w.as_ref().to_owned())),
            anaphora: words(&mut anaphora.into_iter().map(|w| w.as_ref().to_owned())),
            cue_phrases: cues,
        }
    }

    pub fn deixis(&self) -> impl Iterator<Item = &str> {
        self.deixis.iter().map(String::as_str)
    }

    pub fn anaphora(&self) -> impl Iterator<Item = &str> {
        self.anaphora.iter().map(String::as_str)
    }

    pub fn cue_phrases(&self) -> impl Iterator<Item = String> + '_ {
        self.cue_phrases.iter().map(|p| p.join(" "))
    }

    /// Longest cue phrase the tokens open with.
    pub fn leading_cue<S: AsRef<str>>(&self, tokens: &[S]) -> Option<String> {
        self.cue_phrases
            .iter()
            .find(|p| {
                p.len() <= tokens.len() && p.iter().zip(tokens).all(|(w, t)| t.as_ref().to_lowercase() == *w)
            })
            .map(|p| p.join(" "))
    }

    /// Reads `[deixis]`, `[anaphora]` and `[logical_consequence]` sections
    /// with one entry per line. Blank lines and `#` comments are ignored;
    /// every section must be present.
    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut sections: [Option<Vec<String>>; 3] = [None, None, None];
        let mut current: Option<usize> = None;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let cat = Category::ALL
                    .into_iter()
                    .find(|c| c.name() == name.trim())
                    .ok_or_else(|| Error::Format(format!("line {}: unknown section [{name}]", lineno + 1)))?;
                if sections[cat.index()].is_some() {
                    return Err(Error::Format(format!("line {}: section [{name}] repeated", lineno + 1)));
                }
                sections[cat.index()] = Some(Vec::new());
                current = Some(cat.index());
                continue;
            }
            let idx = current.ok_or_else(|| Error::Format(format!("line {}: entry before any section", lineno + 1)))?;
            sections[idx].as_mut().expect("section opened").push(line.to_owned());
        }
        let [d, a, c] = sections;
        let missing = |c: Category| Error::Format(format!("lexicon file lacks a [{c}] section"));
        Ok(MarkerLexicon::new(
            d.ok_or_else(|| missing(Category::Deixis))?,
            a.ok_or_else(|| missing(Category::Anaphora))?,
            c.ok_or_else(|| missing(Category::LogicalConsequence))?,
        ))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "[{}]", Category::Deixis)?;
        for w in self.deixis() {
            writeln!(out, "{w}")?;
        }
        writeln!(out, "\n[{}]", Category::Anaphora)?;
        for w in self.anaphora() {
            writeln!(out, "{w}")?;
        }
        writeln!(out, "\n[{}]", Category::LogicalConsequence)?;
        for p in self.cue_phrases() {
            writeln!(out, "{p}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerFlags {
    pub deixis: bool,
    pub anaphora: bool,
    pub logical_consequence: bool,
}

impl MarkerFlags {
    pub fn get(&self, category: Category) -> bool {
        match category {
            Category::Deixis => self.deixis,
            Category::Anaphora => self.anaphora,
            Category::LogicalConsequence => self.logical_consequence,
        }
    }

    pub fn any(&self) -> bool {
        self.deixis || self.anaphora || self.logical_consequence
    }
}

/// Whole-token, case-insensitive marker flags for one tokenized utterance.
pub fn detect<S: AsRef<str>>(tokens: &[S], lexicon: &MarkerLexicon) -> MarkerFlags {
    let lower: Vec<String> = tokens.iter().map(|t| t.as_ref().to_lowercase()).collect();
    MarkerFlags {
        deixis: lower.iter().any(|t| lexicon.deixis.contains(t)),
        anaphora: lower.iter().any(|t| lexicon.anaphora.contains(t)),
        logical_consequence: lexicon.leading_cue(&lower).is_some(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerReport {
    /// Context turns behind the analyzed outputs.
    pub n: usize,
    pub sample: usize,
    /// Utterances flagged per category, in [`Category::ALL`] order.
    pub counts: [usize; 3],
}

impl MarkerReport {
    pub fn count(&self, category: Category) -> usize {
        self.counts[category.index()]
    }

    /// `100 · count / sample`.
    pub fn percentage(&self, category: Category) -> f64 {
        100.0 * self.count(category) as f64 / self.sample as f64
    }

    /// Tab-separated table under a `# N=<n>` line.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# N={}", self.n)?;
        writeln!(out, "category\tcount\tsample\tpercentage")?;
        for c in Category::ALL {
            writeln!(out, "{c}\t{}\t{}\t{}", self.count(c), self.sample, self.percentage(c))?;
        }
        Ok(())
    }
}

/// Share of utterances carrying each marker; categories are counted
/// independently.
pub fn report<I, U, S>(utterances: I, lexicon: &MarkerLexicon, n: usize) -> Result<MarkerReport>
where
    I: IntoIterator<Item = U>,
    U: AsRef<[S]>,
    S: AsRef<str>,
{
    let mut counts = [0usize; 3];
    let mut sample = 0;
    for u in utterances {
        let flags = detect(u.as_ref(), lexicon);
        for c in Category::ALL {
            counts[c.index()] += usize::from(flags.get(c));
        }
        sample += 1;
    }
    if sample == 0 {
        return Err(Error::Domain("cannot report on an empty utterance stream".into()));
    }
    Ok(MarkerReport { n, sample, counts })
}

/// Greedy responses to the first `sample_size` fragments, cut to their last
/// `n` turns, and the marker report over them.
pub fn analyze_model(
    params: &ModelParameters,
    vocab: &Vocabulary,
    fragments: &[ConversationFragment],
    n: usize,
    sample_size: usize,
    lexicon: &MarkerLexicon,
) -> Result<(MarkerReport, Vec<Vec<String>>)> {
    let mut outputs = Vec::with_capacity(sample_size.min(fragments.len()));
    for (i, f) in fragments.iter().take(sample_size).enumerate() {
        let f = f.last_turns(n).ok_or_else(|| {
            Error::Domain(format!("fragment {i} has {} context turns, {n} requested", f.context.len()))
        })?;
        let response = respond(params, vocab, &f.context, MAX_UTTERANCE_LEN)?;
        outputs.push(response.words(vocab));
    }
    let rep = report(&outputs, lexicon, n)?;
    Ok((rep, outputs))
}

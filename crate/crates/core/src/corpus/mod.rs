//! Dialog text ingestion: normalization, vocabularies, conversation
//! fragments, per-architecture encoding and mini-batching.
//!
//! Corpus files are UTF-8, one utterance per line, with blank lines
//! separating conversations.

mod batch;
mod vocab;

use std::fmt;
use std::io::{BufRead, Write};

pub use batch::{make_batches, Batch};
pub use vocab::{Vocabulary, EOS, GO, PAD, RESERVED, UNK};

use crate::error::{Error, Result};
use crate::Architecture;

/// Default cap on tokens kept per utterance.
pub const MAX_UTTERANCE_LEN: usize = 50;

/// Default cap on context turns per fragment.
pub const MAX_CONTEXT: usize = 10;

/// One conversational turn; never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Utterance(Vec<String>);

impl Utterance {
    pub fn new(tokens: Vec<String>) -> Option<Self> {
        (!tokens.is_empty()).then_some(Utterance(tokens))
    }

    /// Splits on whitespace without normalizing.
    pub fn from_tokens(text: &str) -> Option<Self> {
        Self::new(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

/// Context turns (oldest first) and the turn that follows them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationFragment {
    pub context: Vec<Utterance>,
    pub target: Utterance,
}

impl ConversationFragment {
    /// The same fragment restricted to its last `n` context turns, or `None`
    /// when fewer than `n` are available.
    pub fn last_turns(&self, n: usize) -> Option<ConversationFragment> {
        if n == 0 || self.context.len() < n {
            return None;
        }
        Some(ConversationFragment {
            context: self.context[self.context.len() - n..].to_vec(),
            target: self.target.clone(),
        })
    }
}

/// Lowercases, splits punctuation (apostrophes included) into standalone
/// tokens and masks every digit as `0`. Returns `None` for an empty line.
pub fn normalize(raw_line: &str) -> Option<Utterance> {
    let lower = raw_line.to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in lower.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_ascii_digit() {
            current.push('0');
        } else if c.is_alphanumeric() {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    Utterance::new(tokens)
}

/// Splits corpus text into conversations of normalized utterances.
pub fn read_dialogs<R: BufRead>(input: R) -> Result<Vec<Vec<Utterance>>> {
    let mut dialogs = Vec::new();
    let mut current = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            if !current.is_empty() {
                dialogs.push(std::mem::take(&mut current));
            }
        } else if let Some(u) = normalize(&line) {
            current.push(u);
        }
    }
    if !current.is_empty() {
        dialogs.push(current);
    }
    Ok(dialogs)
}

pub fn parse_dialogs(text: &str) -> Vec<Vec<Utterance>> {
    read_dialogs(text.as_bytes()).expect("reading from memory cannot fail")
}

/// Every window of `context_turns` consecutive utterances followed by a
/// target inside one conversation. Windows never cross a boundary.
pub fn extract_fragments(
    dialogs: &[Vec<Utterance>],
    context_turns: usize,
    max_context: usize,
) -> Result<Vec<ConversationFragment>> {
    if context_turns == 0 || context_turns > max_context {
        return Err(Error::Domain(format!(
            "context turns must be in 1..={max_context}, got {context_turns}"
        )));
    }
    let mut out = Vec::new();
    for dialog in dialogs {
        for t in context_turns..dialog.len() {
            out.push(ConversationFragment {
                context: dialog[t - context_turns..t].to_vec(),
                target: dialog[t].clone(),
            });
        }
    }
    Ok(out)
}

/// Fragment cache line: utterances joined by tabs, target last.
pub fn write_fragments<W: Write>(fragments: &[ConversationFragment], mut out: W) -> Result<()> {
    for f in fragments {
        for u in &f.context {
            write!(out, "{u}\t")?;
        }
        writeln!(out, "{}", f.target)?;
    }
    Ok(())
}

pub fn read_fragments<R: BufRead>(input: R) -> Result<Vec<ConversationFragment>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut utts = line
            .split('\t')
            .map(|part| {
                Utterance::from_tokens(part).ok_or_else(|| {
                    Error::Format(format!("fragment line {} has an empty utterance", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if utts.len() < 2 {
            return Err(Error::Format(format!(
                "fragment line {} needs at least one context turn and a target",
                lineno + 1
            )));
        }
        let target = utts.pop().expect("length checked");
        out.push(ConversationFragment { context: utts, target });
    }
    Ok(out)
}

/// Source side of an encoded fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodedSource {
    /// One sequence: reversed utterances joined and terminated by EOS.
    Flat(Vec<usize>),
    /// One reversed, EOS-terminated sequence per utterance.
    Hierarchical(Vec<Vec<usize>>),
}

impl EncodedSource {
    pub fn architecture(&self) -> Architecture {
        match self {
            EncodedSource::Flat(_) => Architecture::Flat,
            EncodedSource::Hierarchical(_) => Architecture::Hierarchical,
        }
    }

    pub fn token_count(&self) -> usize {
        match self {
            EncodedSource::Flat(s) => s.len(),
            EncodedSource::Hierarchical(s) => s.iter().map(Vec::len).sum(),
        }
    }
}

/// A fragment ready for the network. The decoder reads `target_input`
/// (GO + target) and is scored against `target_labels` (target + EOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFragment {
    pub source: EncodedSource,
    pub target_input: Vec<usize>,
    pub target_labels: Vec<usize>,
}

impl EncodedFragment {
    /// Number of non-PAD labels the loss is taken over.
    pub fn label_count(&self) -> usize {
        self.target_labels.iter().filter(|&&l| l != PAD).count()
    }
}

/// Reversed ids of one utterance, keeping its last `max_len` tokens.
fn reversed_ids(utt: &Utterance, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let toks = utt.tokens();
    let start = toks.len().saturating_sub(max_len);
    toks[start..].iter().rev().map(|t| vocab.id(t)).collect()
}

/// Joins reversed utterances with EOS between them and after the last.
pub fn encode_flat(context: &[Utterance], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for u in context {
        out.extend(reversed_ids(u, vocab, max_len));
        out.push(EOS);
    }
    out
}

pub fn encode_hierarchical(context: &[Utterance], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
    context
        .iter()
        .map(|u| {
            let mut ids = reversed_ids(u, vocab, max_len);
            ids.push(EOS);
            ids
        })
        .collect()
}

/// Teacher-forcing pair for a target utterance: `(GO + ids, ids + EOS)`.
pub fn encode_target(target: &Utterance, vocab: &Vocabulary, max_len: usize) -> (Vec<usize>, Vec<usize>) {
    let ids: Vec<usize> = target.tokens().iter().take(max_len).map(|t| vocab.id(t)).collect();
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(GO);
    input.extend_from_slice(&ids);
    let mut labels = ids;
    labels.push(EOS);
    (input, labels)
}

pub fn encode_source(
    context: &[Utterance],
    arch: Architecture,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedSource> {
    if context.is_empty() {
        return Err(Error::Domain("fragment has no context turns".into()));
    }
    Ok(match arch {
        Architecture::Flat => EncodedSource::Flat(encode_flat(context, vocab, max_len)),
        Architecture::Hierarchical => EncodedSource::Hierarchical(encode_hierarchical(context, vocab, max_len)),
    })
}

pub fn encode_fragment(
    fragment: &ConversationFragment,
    arch: Architecture,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedFragment> {
    let source = encode_source(&fragment.context, arch, vocab, max_len)?;
    let (target_input, target_labels) = encode_target(&fragment.target, vocab, max_len);
    Ok(EncodedFragment {
        source,
        target_input,
        target_labels,
    })
}

/// Inverse of [`encode_flat`] for in-vocabulary tokens.
pub fn decode_flat(ids: &[usize], vocab: &Vocabulary) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for &id in ids {
        if id == EOS {
            current.reverse();
            out.push(std::mem::take(&mut current));
        } else {
            current.push(vocab.token(id).unwrap_or(RESERVED[UNK]).to_owned());
        }
    }
    if !current.is_empty() {
        current.reverse();
        out.push(current);
    }
    out
}

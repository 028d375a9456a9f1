use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::Utterance;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const GO: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["PAD", "GO", "EOS", "UNK"];

/// Bidirectional token/id map with the four reserved ids in front.
///
/// Non-reserved tokens are ordered by descending corpus frequency, ties
/// broken lexicographically, so a corpus always yields the same ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `max_size - 4` most frequent tokens of `utterances`.
    pub fn build<'a, I>(utterances: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Utterance>,
    {
        if max_size <= RESERVED.len() {
            return Err(Error::Domain(format!(
                "vocabulary max_size must exceed {}, got {max_size}",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_any = false;
        for utt in utterances {
            seen_any = true;
            for tok in utt.tokens() {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        if !seen_any {
            return Err(Error::Domain("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_ordered(tokens))
    }

    fn from_ordered(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, falling back to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self, utterance: &Utterance) -> Vec<usize> {
        utterance.tokens().iter().map(|t| self.id(t)).collect()
    }

    /// Writes one token per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Format(format!(
                    "vocabulary line {} is not a single token: {line:?}",
                    tokens.len() + 1
                )));
            }
            tokens.push(line);
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format(format!(
                "vocabulary must start with {}",
                RESERVED.join(", ")
            )));
        }
        let vocab = Self::from_ordered(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Format("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

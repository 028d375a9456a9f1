//! Attentional RNN encoder-decoders for multi-turn conversation modeling.
//!
//! Two architectures share one differentiation engine:
//!
//! - [`Architecture::Flat`]: context turns, each reversed, are joined with EOS
//!   into one encoder sequence and the decoder attends over word states.
//! - [`Architecture::Hierarchical`]: each turn is encoded separately, a
//!   discourse GRU runs over the per-turn summaries and the decoder attends
//!   over the discourse states.
//!
//! Around the models sit corpus ingestion ([`corpus`]), SGD training
//! ([`trainer`]), perplexity and greedy generation ([`eval`]) and a
//! surface-level discourse-marker analyzer ([`analyzer`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod analyzer;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{ComputationTape, Gradients, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// seq2seq+A: word-level attention over one concatenated sequence.
    Flat,
    /// Nseq2seq+A: utterance-level attention over discourse states.
    Hierarchical,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::Flat, Architecture::Hierarchical];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Flat => "flat",
            Architecture::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" | "seq2seq" => Ok(Architecture::Flat),
            "hierarchical" | "nseq2seq" => Ok(Architecture::Hierarchical),
            other => Err(Error::Domain(format!("unknown architecture {other:?}"))),
        }
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EncodedFragment, PAD};
use crate::error::{Error, Result};

/// Up to `batch_size` encoded fragments with decoder sequences padded to
/// the batch maximum.
///
/// Source sequences are kept unpadded in `examples`: the encoder runs over
/// every position it is given, so padding there would change its states.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<EncodedFragment>,
    pub source_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
    pub target_inputs: Vec<Vec<usize>>,
    pub target_labels: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(examples: Vec<EncodedFragment>) -> Self {
        let width = examples.iter().map(|e| e.target_labels.len()).max().unwrap_or(0);
        let pad = |seq: &[usize]| {
            let mut row = seq.to_vec();
            row.resize(width, PAD);
            row
        };
        Batch {
            source_lengths: examples.iter().map(|e| e.source.token_count()).collect(),
            target_lengths: examples.iter().map(|e| e.target_labels.len()).collect(),
            target_inputs: examples.iter().map(|e| pad(&e.target_input)).collect(),
            target_labels: examples.iter().map(|e| pad(&e.target_labels)).collect(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Non-PAD labels across the batch.
    pub fn label_count(&self) -> usize {
        self.target_labels.iter().flatten().filter(|&&l| l != PAD).count()
    }
}

/// Shuffles with `seed`, then groups into batches of `batch_size`; the last
/// batch holds the remainder.
pub fn make_batches(fragments: &[EncodedFragment], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..fragments.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|idx| Batch::new(idx.iter().map(|&i| fragments[i].clone()).collect()))
        .collect())
}

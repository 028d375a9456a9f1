//! Generated conversation tasks with known information-theoretic floors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ConversationFragment, Utterance};

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

/// Letter-only token names so the corpus normalizer leaves them untouched.
fn names(prefix: &str, count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            let mut s = prefix.to_owned();
            let mut k = i;
            loop {
                s.push(LETTERS[k % 26] as char);
                k /= 26;
                if k == 0 {
                    break;
                }
            }
            s
        })
        .collect()
}

fn utterance(tokens: Vec<String>) -> Utterance {
    Utterance::new(tokens).expect("generated utterances are non-empty")
}

fn random_utterance(rng: &mut ChaCha8Rng, words: &[String], min_len: usize, max_len: usize) -> Utterance {
    let len = rng.gen_range(min_len..=max_len);
    utterance((0..len).map(|_| words.choose(rng).expect("non-empty").clone()).collect())
}

/// Fragments whose target is fully determined by the context turn `lag`
/// positions back.
///
/// Every context turn opens with one of `keys` key words followed by filler
/// words; the keys are drawn independently per turn. The target is the
/// answer word matching the key of the decisive turn, so the other keys are
/// distractors carrying no information. With the decisive turn visible the
/// floor perplexity is 1. Without it the two scored labels (answer, EOS) are
/// uniform over `keys` and certain respectively, giving `√keys`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagTask {
    pub keys: usize,
    pub lag: usize,
    /// Context turns per fragment; at least `lag`.
    pub context_turns: usize,
    pub filler_words: usize,
    /// Inclusive range of filler words after each key.
    pub filler_len: (usize, usize),
}

impl Default for LagTask {
    fn default() -> Self {
        LagTask {
            keys: 4,
            lag: 3,
            context_turns: 3,
            filler_words: 12,
            filler_len: (4, 8),
        }
    }
}

impl LagTask {
    pub fn key_words(&self) -> Vec<String> {
        names("key", self.keys)
    }

    pub fn answer_words(&self) -> Vec<String> {
        names("ans", self.keys)
    }

    pub fn filler(&self) -> Vec<String> {
        names("w", self.filler_words)
    }

    /// `count` fragments; the decisive key cycles through all keys so every
    /// answer is equally frequent.
    pub fn generate(&self, count: usize, seed: u64) -> Vec<ConversationFragment> {
        assert!(self.lag >= 1 && self.context_turns >= self.lag, "decisive turn must lie inside the context");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (keys, answers, filler) = (self.key_words(), self.answer_words(), self.filler());
        let key_pos = self.context_turns - self.lag;
        (0..count)
            .map(|i| {
                let decisive = i % self.keys;
                let context = (0..self.context_turns)
                    .map(|t| {
                        let k = if t == key_pos { decisive } else { rng.gen_range(0..self.keys) };
                        let len = rng.gen_range(self.filler_len.0..=self.filler_len.1);
                        let mut tokens = vec![keys[k].clone()];
                        tokens.extend((0..len).map(|_| filler.choose(&mut rng).expect("non-empty").clone()));
                        utterance(tokens)
                    })
                    .collect();
                ConversationFragment {
                    context,
                    target: utterance(vec![answers[decisive].clone()]),
                }
            })
            .collect()
    }

    /// Lowest achievable held-out perplexity with `n` context turns.
    pub fn floor_perplexity(&self, n: usize) -> f64 {
        if n >= self.lag {
            1.0
        } else {
            (self.keys as f64).sqrt()
        }
    }
}

/// Fragments whose target repeats the last context turn verbatim.
pub fn copy_last_task(count: usize, context_turns: usize, words: usize, seed: u64) -> Vec<ConversationFragment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = names("c", words);
    (0..count)
        .map(|_| {
            let context: Vec<Utterance> = (0..context_turns).map(|_| random_utterance(&mut rng, &vocab, 1, 3)).collect();
            let target = context.last().expect("at least one turn").clone();
            ConversationFragment { context, target }
        })
        .collect()
}

/// Small corpus for memorization runs: `count` fragments of two context
/// turns over `words` distinct words, each target unique.
pub fn memorization_corpus(count: usize, words: usize, seed: u64) -> Vec<ConversationFragment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = names("m", words);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let context = vec![
            random_utterance(&mut rng, &vocab, 1, 3),
            random_utterance(&mut rng, &vocab, 1, 3),
        ];
        let target = random_utterance(&mut rng, &vocab, 2, 4);
        if seen.insert(target.clone()) {
            out.push(ConversationFragment { context, target });
        }
    }
    out.shuffle(&mut rng);
    out
}

//! Perplexity evaluation, greedy generation and the context-size sweep.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    encode_fragment, encode_source, ConversationFragment, EncodedFragment, EncodedSource, Utterance, Vocabulary, EOS, GO,
    MAX_UTTERANCE_LEN, PAD,
};
use crate::error::{Error, Result};
use crate::model::{decoder_step, fragment_loss, prepare_source, Init, ModelConfig, ModelParameters};
use crate::model::network::source_states;
use crate::tape::ComputationTape;
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig};
use crate::Architecture;

/// Token-level loss over a fragment set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLoss {
    pub total: f64,
    pub tokens: usize,
    /// Mean per-token loss of each fragment, in input order.
    pub fragment_means: Vec<f64>,
}

impl DatasetLoss {
    pub fn mean(&self) -> f64 {
        self.total / self.tokens as f64
    }
}

/// Summed cross-entropy of every fragment, accumulated in input order.
pub fn dataset_loss(params: &ModelParameters, fragments: &[EncodedFragment]) -> Result<DatasetLoss> {
    if fragments.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty fragment set".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    let mut fragment_means = Vec::with_capacity(fragments.len());
    for f in fragments {
        let loss = fragment_loss(params, f)?;
        if loss.tokens == 0 {
            return Err(Error::Domain("fragment has no target tokens".into()));
        }
        total += loss.total;
        tokens += loss.tokens;
        fragment_means.push(loss.mean());
    }
    Ok(DatasetLoss {
        total,
        tokens,
        fragment_means,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    /// Context turns fed to the encoder.
    pub n: usize,
    pub fragments: usize,
    pub tokens: usize,
    /// Total loss over total non-PAD target tokens.
    pub mean_loss: f64,
    /// `exp(mean_loss)`.
    pub perplexity: f64,
    /// Standard error of the per-fragment mean losses.
    pub loss_stderr: f64,
    /// `loss_stderr` carried to perplexity scale by the delta method.
    pub perplexity_stderr: f64,
}

impl EvalReport {
    pub fn from_loss(dataset: &str, n: usize, loss: &DatasetLoss) -> Self {
        let mean_loss = loss.mean();
        let perplexity = mean_loss.exp();
        let loss_stderr = standard_error(&loss.fragment_means);
        EvalReport {
            dataset: dataset.to_owned(),
            n,
            fragments: loss.fragment_means.len(),
            tokens: loss.tokens,
            mean_loss,
            perplexity,
            loss_stderr,
            perplexity_stderr: perplexity * loss_stderr,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} N={}: perplexity {:.4} ± {:.4} (loss {:.6}, {} fragments, {} tokens)",
            self.dataset, self.n, self.perplexity, self.perplexity_stderr, self.mean_loss, self.fragments, self.tokens
        )
    }
}

/// Sample standard deviation over `√n`; zero for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Restricts every fragment to its last `n` context turns and encodes it.
pub fn encode_with_context(
    fragments: &[ConversationFragment],
    n: usize,
    arch: Architecture,
    vocab: &Vocabulary,
) -> Result<Vec<EncodedFragment>> {
    fragments
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let f = f.last_turns(n).ok_or_else(|| {
                Error::Domain(format!(
                    "fragment {i} has {} context turns, {n} requested",
                    f.context.len()
                ))
            })?;
            encode_fragment(&f, arch, vocab, MAX_UTTERANCE_LEN)
        })
        .collect()
}

/// Held-out perplexity with `n` context turns per fragment.
pub fn perplexity(
    params: &ModelParameters,
    vocab: &Vocabulary,
    fragments: &[ConversationFragment],
    n: usize,
    dataset: &str,
) -> Result<EvalReport> {
    check_vocab(params, vocab)?;
    let encoded = encode_with_context(fragments, n, params.architecture(), vocab)?;
    let loss = dataset_loss(params, &encoded)?;
    Ok(EvalReport::from_loss(dataset, n, &loss))
}

fn check_vocab(params: &ModelParameters, vocab: &Vocabulary) -> Result<()> {
    if params.config.vocab_size != vocab.len() {
        return Err(Error::Contract(format!(
            "model vocabulary has {} entries, vocabulary file has {}",
            params.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedResponse {
    pub source: EncodedSource,
    /// Emitted ids; ends with EOS unless the length cap was hit.
    pub tokens: Vec<usize>,
    /// Attention distribution over source states at each step.
    pub attention: Vec<Vec<f64>>,
}

impl GeneratedResponse {
    /// Emitted words without the closing EOS.
    pub fn words(&self, vocab: &Vocabulary) -> Vec<String> {
        self.tokens
            .iter()
            .filter(|&&id| id != EOS)
            .map(|&id| vocab.token(id).unwrap_or("UNK").to_owned())
            .collect()
    }
}

/// Highest-scoring id other than PAD and GO; ties go to the lowest id.
pub fn argmax_token(logits: &[f64]) -> usize {
    let mut best = None::<(usize, f64)>;
    for (id, &score) in logits.iter().enumerate() {
        if id == PAD || id == GO {
            continue;
        }
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((id, score));
        }
    }
    best.map_or(EOS, |(id, _)| id)
}

/// Greedy decoding from GO until EOS or `max_len` emitted tokens.
pub fn generate_greedy(params: &ModelParameters, source: &EncodedSource, max_len: usize) -> Result<GeneratedResponse> {
    if max_len == 0 {
        return Err(Error::Domain("max_len must be at least 1".into()));
    }
    let mut tape = ComputationTape::new();
    let bound = params.bind(&mut tape);
    let states = source_states(&mut tape, &bound, source)?;
    let prepared = prepare_source(&mut tape, &bound.attention, &states)?;
    let mut d = *states.last().expect("source states are non-empty");
    let mut c = tape.constant(Tensor::zeros(&[params.config.hidden_dim]));
    let mut input = GO;
    let mut tokens = Vec::new();
    let mut attention = Vec::new();
    while tokens.len() < max_len {
        let step = decoder_step(&mut tape, &bound, &prepared, d, c, input)?;
        d = step.state;
        c = step.attention.context;
        attention.push(tape.value(step.attention.weights).data().to_vec());
        input = argmax_token(tape.value(step.logits).data());
        tokens.push(input);
        if input == EOS {
            break;
        }
    }
    Ok(GeneratedResponse {
        source: source.clone(),
        tokens,
        attention,
    })
}

/// Greedy response to raw context turns.
pub fn respond(
    params: &ModelParameters,
    vocab: &Vocabulary,
    context: &[Utterance],
    max_len: usize,
) -> Result<GeneratedResponse> {
    check_vocab(params, vocab)?;
    let source = encode_source(context, params.architecture(), vocab, MAX_UTTERANCE_LEN)?;
    generate_greedy(params, &source, max_len)
}

/// Model shape and training schedule shared by every sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepOutcome {
    Evaluated(EvalReport),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub architecture: Architecture,
    pub n: usize,
    pub outcome: SweepOutcome,
}

impl SweepCell {
    pub fn report(&self) -> Option<&EvalReport> {
        match &self.outcome {
            SweepOutcome::Evaluated(r) => Some(r),
            SweepOutcome::Skipped(_) => None,
        }
    }
}

/// Fragment sets for one sweep. `validation` drives learning-rate decay and
/// best-model selection and may be empty.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    pub train: &'a [ConversationFragment],
    pub validation: &'a [ConversationFragment],
    pub test: &'a [ConversationFragment],
}

fn shallow_count(fragments: &[ConversationFragment], n: usize) -> usize {
    fragments.iter().filter(|f| f.context.len() < n).count()
}

/// Trains a fresh model for every `(architecture, n)` pair with the same
/// configuration and seed, then evaluates test perplexity.
///
/// Every fragment is cut to its last `n` turns, so all cells score the same
/// targets. A cell whose sets lack `n` turns anywhere is skipped.
pub fn sensitivity_sweep(
    data: SweepData<'_>,
    vocab: &Vocabulary,
    architectures: &[Architecture],
    ns: &[usize],
    config: &SweepConfig,
) -> Result<Vec<SweepCell>> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Domain("sweep needs non-empty training and test sets".into()));
    }
    let mut cells = Vec::new();
    for &architecture in architectures {
        for &n in ns {
            let short: usize = [data.train, data.validation, data.test]
                .iter()
                .map(|set| shallow_count(set, n))
                .sum();
            let outcome = if n == 0 {
                SweepOutcome::Skipped("N must be at least 1".into())
            } else if short > 0 {
                SweepOutcome::Skipped(format!("{short} fragments have fewer than {n} context turns"))
            } else {
                SweepOutcome::Evaluated(run_cell(data, vocab, architecture, n, config)?)
            };
            if let SweepOutcome::Skipped(reason) = &outcome {
                log::warn!("skipping {architecture} N={n}: {reason}");
            }
            cells.push(SweepCell {
                architecture,
                n,
                outcome,
            });
        }
    }
    Ok(cells)
}

fn run_cell(
    data: SweepData<'_>,
    vocab: &Vocabulary,
    architecture: Architecture,
    n: usize,
    config: &SweepConfig,
) -> Result<EvalReport> {
    let model = ModelConfig {
        architecture,
        vocab_size: vocab.len(),
        emb_dim: config.emb_dim,
        hidden_dim: config.hidden_dim,
        attn_dim: config.attn_dim,
    };
    let params = ModelParameters::init(model, Init::Uniform { seed: config.train.seed })?;
    let train_set = encode_with_context(data.train, n, architecture, vocab)?;
    let valid_set = encode_with_context(data.validation, n, architecture, vocab)?;
    let outcome = train(&config.train, params, &train_set, &valid_set)?;
    log::info!(
        "{architecture} N={n}: trained {} steps, final lr {}",
        outcome.state.step,
        outcome.state.lr
    );
    perplexity(&outcome.best_params, vocab, data.test, n, "test")
}

pub const SWEEP_HEADER: &str = "architecture\tN\tperplexity\tstderr";

/// Tab-separated sweep table; skipped cells read `NA`.
pub fn write_sweep_table<W: Write>(cells: &[SweepCell], mut out: W) -> Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for c in cells {
        match c.report() {
            Some(r) => writeln!(out, "{}\t{}\t{}\t{}", c.architecture, c.n, r.perplexity, r.perplexity_stderr)?,
            None => writeln!(out, "{}\t{}\tNA\tNA", c.architecture, c.n)?,
        }
    }
    Ok(())
}

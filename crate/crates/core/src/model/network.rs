//! Encoder, discourse and decoder passes for both architectures.

use super::attention::{attend_prepared, prepare_source, AttentionNodes, AttentionSource};
use super::gru::gru_step;
use super::{BoundGru, BoundParams, ModelParameters};
use crate::corpus::{EncodedFragment, EncodedSource, PAD};
use crate::error::{Error, Result};
use crate::tape::{ComputationTape, Var};
use crate::tensor::Tensor;
use crate::Architecture;

fn zero_state(tape: &mut ComputationTape<'_>, dim: usize) -> Var {
    tape.constant(Tensor::zeros(&[dim]))
}

/// Runs `cell` over embedded `ids` from a zero state; returns every state.
fn run_encoder(tape: &mut ComputationTape<'_>, embedding: Var, cell: &BoundGru, ids: &[usize]) -> Result<Vec<Var>> {
    if ids.is_empty() {
        return Err(Error::Domain("encoder input sequence is empty".into()));
    }
    let mut h = zero_state(tape, cell.hidden);
    let mut states = Vec::with_capacity(ids.len());
    for &id in ids {
        let x = tape.row(embedding, id)?;
        h = gru_step(tape, cell, x, h)?;
        states.push(h);
    }
    Ok(states)
}

/// Encoder states `h_1..h_T` over one flat id sequence.
pub fn encode_flat_sequence(tape: &mut ComputationTape<'_>, params: &BoundParams, ids: &[usize]) -> Result<Vec<Var>> {
    run_encoder(tape, params.encoder_embedding, &params.encoder, ids)
}

#[derive(Debug, Clone)]
pub struct HierarchicalStates {
    /// Final encoder state of each utterance, `e_1..e_N`.
    pub utterance_states: Vec<Var>,
    /// Discourse GRU states over `e_1..e_N`; these are what attention sees.
    pub discourse_states: Vec<Var>,
}

/// Encodes each utterance from a fresh zero state, then runs the discourse
/// GRU over the per-utterance summaries.
pub fn encode_hierarchical(
    tape: &mut ComputationTape<'_>,
    params: &BoundParams,
    utterances: &[Vec<usize>],
) -> Result<HierarchicalStates> {
    let discourse = params
        .discourse
        .as_ref()
        .ok_or_else(|| Error::Contract("flat model has no discourse RNN".into()))?;
    if utterances.is_empty() {
        return Err(Error::Domain("hierarchical source has no utterances".into()));
    }
    let mut utterance_states = Vec::with_capacity(utterances.len());
    for ids in utterances {
        let states = run_encoder(tape, params.encoder_embedding, &params.encoder, ids)?;
        utterance_states.push(*states.last().expect("non-empty"));
    }
    let mut h = zero_state(tape, discourse.hidden);
    let mut discourse_states = Vec::with_capacity(utterances.len());
    for &e in &utterance_states {
        h = gru_step(tape, discourse, e, h)?;
        discourse_states.push(h);
    }
    Ok(HierarchicalStates {
        utterance_states,
        discourse_states,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderStep {
    pub state: Var,
    pub attention: AttentionNodes,
    pub logits: Var,
}

/// One decoder step: the GRU reads `concat(embed(input), c_prev)`, attends
/// with its new state and projects `concat(d, c)` to vocabulary logits.
pub fn decoder_step(
    tape: &mut ComputationTape<'_>,
    params: &BoundParams,
    source: &AttentionSource,
    state: Var,
    prev_context: Var,
    input_id: usize,
) -> Result<DecoderStep> {
    let emb = tape.row(params.decoder_embedding, input_id)?;
    let x = tape.concat(emb, prev_context)?;
    let d = gru_step(tape, &params.decoder, x, state)?;
    let attention = attend_prepared(tape, &params.attention, source, d)?;
    let features = tape.concat(d, attention.context)?;
    let projected = tape.matmul(params.w_out, features)?;
    let logits = tape.add(projected, params.b_out)?;
    Ok(DecoderStep {
        state: d,
        attention,
        logits,
    })
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Scalar sum of cross-entropy over non-PAD labels.
    pub total: Var,
    /// Loss of each non-PAD label, in order.
    pub token_losses: Vec<f64>,
    pub attention: Vec<AttentionNodes>,
}

/// Teacher-forced decoding from `initial_state` with `c⁰ = 0`.
///
/// Steps after the last non-PAD label are skipped; they cannot affect the
/// loss.
pub fn decode_train(
    tape: &mut ComputationTape<'_>,
    params: &BoundParams,
    source: &AttentionSource,
    initial_state: Var,
    target_input: &[usize],
    target_labels: &[usize],
) -> Result<DecodeOutput> {
    if target_input.is_empty() {
        return Err(Error::Domain("decoder target is empty".into()));
    }
    if target_input.len() != target_labels.len() {
        return Err(Error::Contract(format!(
            "decoder inputs ({}) and labels ({}) are misaligned",
            target_input.len(),
            target_labels.len()
        )));
    }
    let steps = target_labels.iter().rposition(|&l| l != PAD).map_or(0, |p| p + 1);

    let mut d = initial_state;
    let mut c = zero_state(tape, params.hidden);
    let mut total: Option<Var> = None;
    let mut token_losses = Vec::with_capacity(steps);
    let mut attention = Vec::with_capacity(steps);
    for t in 0..steps {
        let step = decoder_step(tape, params, source, d, c, target_input[t])?;
        d = step.state;
        c = step.attention.context;
        attention.push(step.attention);
        let label = target_labels[t];
        if label == PAD {
            continue;
        }
        let ce = tape.cross_entropy(step.logits, label)?;
        token_losses.push(tape.value(ce).data()[0]);
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(DecodeOutput {
        total,
        token_losses,
        attention,
    })
}

/// Attention source states for either architecture: encoder word states
/// (flat) or discourse states (hierarchical).
pub(crate) fn source_states(tape: &mut ComputationTape<'_>, params: &BoundParams, source: &EncodedSource) -> Result<Vec<Var>> {
    match (params.architecture, source) {
        (Architecture::Flat, EncodedSource::Flat(ids)) => encode_flat_sequence(tape, params, ids),
        (Architecture::Hierarchical, EncodedSource::Hierarchical(utts)) => {
            Ok(encode_hierarchical(tape, params, utts)?.discourse_states)
        }
        (arch, src) => Err(Error::Contract(format!(
            "{arch} model given a {} encoding",
            src.architecture()
        ))),
    }
}

/// Full pipeline: encode, initialize the decoder with the last source
/// state, decode with teacher forcing.
pub fn forward_loss(
    tape: &mut ComputationTape<'_>,
    params: &BoundParams,
    source: &EncodedSource,
    target_input: &[usize],
    target_labels: &[usize],
) -> Result<DecodeOutput> {
    let hs = source_states(tape, params, source)?;
    let prepared = prepare_source(tape, &params.attention, &hs)?;
    let initial = *hs.last().expect("source states are non-empty");
    decode_train(tape, params, &prepared, initial, target_input, target_labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSummary {
    /// Summed cross-entropy over non-PAD labels.
    pub total: f64,
    pub tokens: usize,
    pub token_losses: Vec<f64>,
}

impl LossSummary {
    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.total / self.tokens as f64
        }
    }
}

pub fn fragment_loss(params: &ModelParameters, fragment: &EncodedFragment) -> Result<LossSummary> {
    let mut tape = ComputationTape::new();
    let bound = params.bind(&mut tape);
    let out = forward_loss(&mut tape, &bound, &fragment.source, &fragment.target_input, &fragment.target_labels)?;
    Ok(LossSummary {
        total: tape.value(out.total).data()[0],
        tokens: out.token_losses.len(),
        token_losses: out.token_losses,
    })
}

/// Summed loss and its gradient for every parameter tensor, in canonical
/// order.
pub fn loss_and_gradients(
    params: &ModelParameters,
    source: &EncodedSource,
    target_input: &[usize],
    target_labels: &[usize],
) -> Result<(LossSummary, Vec<Tensor>)> {
    let mut tape = ComputationTape::new();
    let bound = params.bind(&mut tape);
    let out = forward_loss(&mut tape, &bound, source, target_input, target_labels)?;
    let grads = tape.backward(out.total)?;
    let summary = LossSummary {
        total: tape.value(out.total).data()[0],
        tokens: out.token_losses.len(),
        token_losses: out.token_losses,
    };
    Ok((summary, bound.vars().into_iter().map(|v| grads.wrt(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EOS, GO};
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::model::{oracle, Init, ModelConfig};

    fn model(arch: Architecture, vocab: usize, dim: usize, seed: u64) -> ModelParameters {
        ModelParameters::init(ModelConfig::small(arch, vocab, dim), Init::Uniform { seed }).unwrap()
    }

    /// Init scaled up so the oracle comparisons exercise non-trivial values.
    fn wide_model(arch: Architecture, vocab: usize, dim: usize, seed: u64) -> ModelParameters {
        ModelParameters::uniform(ModelConfig::small(arch, vocab, dim), seed, 0.64).unwrap()
    }

    fn fragment(source: EncodedSource, target: &[usize]) -> EncodedFragment {
        let mut input = vec![GO];
        input.extend_from_slice(target);
        let mut labels = target.to_vec();
        labels.push(EOS);
        EncodedFragment {
            source,
            target_input: input,
            target_labels: labels,
        }
    }

    fn values(tape: &ComputationTape<'_>, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter().map(|&v| tape.value(v).data().to_vec()).collect()
    }

    #[test]
    fn flat_encoder_base_case_and_chain() {
        let p = wide_model(Architecture::Flat, 8, 2, 1);
        let mut tape = ComputationTape::new();
        let b = p.bind(&mut tape);
        let states = encode_flat_sequence(&mut tape, &b, &[5]).unwrap();
        let x = p.encoder_embedding.row(5).unwrap();
        let expected = oracle::gru(&p.encoder, x.data(), &[0.0, 0.0]);
        assert_eq!(values(&tape, &states), vec![expected]);

        let ids = [4, 7, 2];
        let states = encode_flat_sequence(&mut tape, &b, &ids).unwrap();
        let expected = oracle::encoder_states(&p, &ids);
        for (got, want) in values(&tape, &states).iter().zip(&expected) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn all_pad_input_still_evolves() {
        let p = wide_model(Architecture::Flat, 8, 3, 2);
        let mut tape = ComputationTape::new();
        let b = p.bind(&mut tape);
        let states = encode_flat_sequence(&mut tape, &b, &[PAD, PAD]).unwrap();
        assert_eq!(states.len(), 2);
        assert_ne!(tape.value(states[0]), tape.value(states[1]));
    }

    #[test]
    fn out_of_vocabulary_id_is_a_domain_error() {
        let p = model(Architecture::Flat, 8, 2, 1);
        let mut tape = ComputationTape::new();
        let b = p.bind(&mut tape);
        assert!(matches!(encode_flat_sequence(&mut tape, &b, &[8]), Err(Error::Domain(_))));
        assert!(matches!(encode_flat_sequence(&mut tape, &b, &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn hierarchical_base_case_and_chain() {
        let p = wide_model(Architecture::Hierarchical, 9, 2, 3);
        let mut tape = ComputationTape::new();
        let b = p.bind(&mut tape);
        let s = encode_hierarchical(&mut tape, &b, &[vec![4, EOS]]).unwrap();
        let e1 = tape.value(s.utterance_states[0]).data().to_vec();
        let expected = oracle::gru(p.discourse.as_ref().unwrap(), &e1, &[0.0, 0.0]);
        assert_eq!(values(&tape, &s.discourse_states), vec![expected]);

        let utts = vec![vec![5, 6, EOS], vec![7, EOS]];
        let s = encode_hierarchical(&mut tape, &b, &utts).unwrap();
        let expected = oracle::discourse_states(&p, &utts);
        for (got, want) in values(&tape, &s.discourse_states).iter().zip(&expected) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn utterance_states_are_independent() {
        let p = model(Architecture::Hierarchical, 12, 4, 5);
        let mut tape = ComputationTape::new();
        let b = p.bind(&mut tape);
        let a = encode_hierarchical(&mut tape, &b, &[vec![4, 5, EOS], vec![6, 7, 8, EOS]]).unwrap();
        let c = encode_hierarchical(&mut tape, &b, &[vec![4, 5, EOS], vec![8, 6, 7, EOS]]).unwrap();
        assert_eq!(tape.value(a.utterance_states[0]), tape.value(c.utterance_states[0]));
        assert_ne!(tape.value(a.utterance_states[1]), tape.value(c.utterance_states[1]));
    }

    #[test]
    fn discourse_rnn_is_order_aware() {
        for seed in 0..5 {
            let p = model(Architecture::Hierarchical, 12, 4, seed);
            let mut tape = ComputationTape::new();
            let b = p.bind(&mut tape);
            let fwd = encode_hierarchical(&mut tape, &b, &[vec![4, 5, EOS], vec![9, EOS]]).unwrap();
            let rev = encode_hierarchical(&mut tape, &b, &[vec![9, EOS], vec![4, 5, EOS]]).unwrap();
            let last = |s: &HierarchicalStates| tape.value(*s.discourse_states.last().unwrap()).clone();
            assert_ne!(last(&fwd), last(&rev));
        }
    }

    #[test]
    fn flat_model_rejects_hierarchical_encoding() {
        let p = model(Architecture::Flat, 8, 2, 1);
        let f = fragment(EncodedSource::Hierarchical(vec![vec![4, EOS]]), &[5]);
        assert!(matches!(fragment_loss(&p, &f), Err(Error::Contract(_))));
        let p = model(Architecture::Hierarchical, 8, 2, 1);
        let f = fragment(EncodedSource::Flat(vec![4, EOS]), &[5]);
        assert!(matches!(fragment_loss(&p, &f), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_model_predicts_uniformly() {
        for arch in Architecture::ALL {
            let p = ModelParameters::zeros(ModelConfig::small(arch, 13, 3)).unwrap();
            let source = match arch {
                Architecture::Flat => EncodedSource::Flat(vec![4, 5, EOS, 6, EOS]),
                Architecture::Hierarchical => EncodedSource::Hierarchical(vec![vec![4, 5, EOS], vec![6, EOS]]),
            };
            let f = fragment(source, &[7, 8, 9]);
            let loss = fragment_loss(&p, &f).unwrap();
            assert_eq!(loss.tokens, 4);
            for l in &loss.token_losses {
                assert!((l - 13f64.ln()).abs() < 1e-12);
            }
            assert!((loss.total - 4.0 * 13f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_target_is_one_term() {
        let p = model(Architecture::Flat, 10, 3, 7);
        let f = EncodedFragment {
            source: EncodedSource::Flat(vec![4, EOS]),
            target_input: vec![GO],
            target_labels: vec![EOS],
        };
        let loss = fragment_loss(&p, &f).unwrap();
        assert_eq!(loss.token_losses.len(), 1);
        assert_eq!(loss.total, loss.token_losses[0]);
    }

    #[test]
    fn trailing_pad_contributes_nothing() {
        let p = model(Architecture::Hierarchical, 10, 3, 7);
        let f = fragment(EncodedSource::Hierarchical(vec![vec![4, EOS]]), &[5, 6]);
        let base = fragment_loss(&p, &f).unwrap();
        let mut padded = f.clone();
        padded.target_input.extend([PAD, PAD]);
        padded.target_labels.extend([PAD, PAD]);
        assert_eq!(fragment_loss(&p, &padded).unwrap(), base);
    }

    #[test]
    fn empty_target_is_a_domain_error() {
        let p = model(Architecture::Flat, 10, 3, 7);
        let f = EncodedFragment {
            source: EncodedSource::Flat(vec![4, EOS]),
            target_input: vec![],
            target_labels: vec![],
        };
        assert!(matches!(fragment_loss(&p, &f), Err(Error::Domain(_))));
    }

    #[test]
    fn end_to_end_loss_matches_composed_oracle() {
        for arch in Architecture::ALL {
            for seed in 0..3 {
                let p = wide_model(arch, 9, 2, seed);
                let utts = vec![vec![5, 4, EOS], vec![6, EOS]];
                let source = match arch {
                    Architecture::Flat => EncodedSource::Flat(utts.concat()),
                    Architecture::Hierarchical => EncodedSource::Hierarchical(utts.clone()),
                };
                let f = fragment(source, &[7]);
                let got = fragment_loss(&p, &f).unwrap();
                let want = oracle::fragment_loss(&p, &f);
                assert_eq!(got.token_losses.len(), want.len());
                for (a, b) in got.token_losses.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{arch} seed {seed}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_during_decoding() {
        let p = model(Architecture::Flat, 10, 4, 9);
        let mut tape = ComputationTape::new();
        let b = p.bind(&mut tape);
        let out = forward_loss(&mut tape, &b, &EncodedSource::Flat(vec![4, 5, 6, EOS]), &[GO, 7, 8], &[7, 8, EOS])
            .unwrap();
        assert_eq!(out.attention.len(), 3);
        for a in &out.attention {
            let w = tape.value(a.weights);
            assert!((w.sum() - 1.0).abs() <= 1e-12);
            assert!(w.data().iter().all(|&x| x > 0.0 && x <= 1.0));
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // At the small default init the attention scores are nearly linear
        // in W₂d, which shifts all of them equally, so that gradient sits
        // below finite-difference noise. A wider draw gives a generic point.
        for arch in Architecture::ALL {
            let p = ModelParameters::uniform(ModelConfig::small(arch, 20, 8), 17, 0.5).unwrap();
            let utts = vec![vec![5, 9, 4, EOS], vec![11, 6, EOS]];
            let source = match arch {
                Architecture::Flat => EncodedSource::Flat(utts.concat()),
                Architecture::Hierarchical => EncodedSource::Hierarchical(utts),
            };
            let f = fragment(source, &[12, 7, 19]);
            let eval = |ts: &[Tensor]| {
                let mut q = p.clone();
                q.set_tensors(ts.to_vec()).unwrap();
                fragment_loss(&q, &f).unwrap().total
            };
            let grad = |ts: &[Tensor]| {
                let mut q = p.clone();
                q.set_tensors(ts.to_vec()).unwrap();
                loss_and_gradients(&q, &f.source, &f.target_input, &f.target_labels).unwrap().1
            };
            let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
            let report = grad_check(eval, grad, &params, GradCheckConfig { step: 1e-4, tolerance: 1e-4 }).unwrap();
            assert!(report.passed, "{arch}: {report:?} at {}", p.names()[report.worst.0]);
        }
    }
}

//! Additive attention: `u_i = vᵀ tanh(W₁ h_i + W₂ d)`, `a = softmax(u)`,
//! `c = Σ a_i h_i`.

use super::BoundAttention;
use crate::error::{Error, Result};
use crate::tape::{ComputationTape, Var};
use crate::tensor::Tensor;

/// Source states stacked once per sequence so every decoder step reuses
/// `W₁ h_i`.
#[derive(Debug, Clone)]
pub struct AttentionSource {
    /// `[T × hidden]`
    pub states: Var,
    /// `[hidden × T]`
    pub states_t: Var,
    /// `[T × attn]`, row `i` is `W₁ h_i`.
    pub keys: Var,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub scores: Var,
    pub weights: Var,
    pub context: Var,
}

/// Plain values of one attention step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub scores: Tensor,
    pub weights: Tensor,
    pub context: Tensor,
}

impl AttentionNodes {
    pub fn state(&self, tape: &ComputationTape<'_>) -> AttentionState {
        AttentionState {
            scores: tape.value(self.scores).clone(),
            weights: tape.value(self.weights).clone(),
            context: tape.value(self.context).clone(),
        }
    }
}

pub fn prepare_source(tape: &mut ComputationTape<'_>, params: &BoundAttention, hs: &[Var]) -> Result<AttentionSource> {
    if hs.is_empty() {
        return Err(Error::Domain("attention needs at least one source state".into()));
    }
    let states = tape.stack(hs)?;
    let states_t = tape.transpose(states);
    let w1_t = tape.transpose(params.w1);
    let keys = tape.matmul(states, w1_t)?;
    Ok(AttentionSource {
        states,
        states_t,
        keys,
        len: hs.len(),
    })
}

pub fn attend_prepared(
    tape: &mut ComputationTape<'_>,
    params: &BoundAttention,
    source: &AttentionSource,
    query: Var,
) -> Result<AttentionNodes> {
    let q = tape.matmul(params.w2, query)?;
    let pre = tape.add_row(source.keys, q)?;
    let act = tape.tanh(pre);
    let scores = tape.matmul(act, params.v)?;
    let weights = tape.softmax(scores)?;
    let context = tape.matmul(source.states_t, weights)?;
    Ok(AttentionNodes {
        scores,
        weights,
        context,
    })
}

/// Attention of decoder state `query` over source states `hs`.
pub fn attend(tape: &mut ComputationTape<'_>, params: &BoundAttention, hs: &[Var], query: Var) -> Result<AttentionNodes> {
    let source = prepare_source(tape, params, hs)?;
    attend_prepared(tape, params, &source, query)
}

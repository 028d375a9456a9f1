//! GRU cells, attention and the two encoder-decoder forward passes.
//!
//! Parameters live in [`ModelParameters`]; a forward pass borrows them onto a
//! [`ComputationTape`] through [`ModelParameters::bind`], and gradients come
//! back as tensors in the same canonical order as
//! [`ModelParameters::tensors`].

mod attention;
pub(crate) mod checkpoint;
mod gru;
pub(crate) mod network;
#[cfg(test)]
mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{attend, attend_prepared, prepare_source, AttentionNodes, AttentionSource, AttentionState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use gru::gru_step;
pub use network::{
    decode_train, decoder_step, encode_flat_sequence, encode_hierarchical, forward_loss, fragment_loss,
    loss_and_gradients, DecodeOutput, DecoderStep, HierarchicalStates, LossSummary,
};

use crate::error::{Error, Result};
use crate::tape::{ComputationTape, Var};
use crate::tensor::Tensor;
use crate::Architecture;

/// Half-width of the uniform initialization range.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
}

impl ModelConfig {
    /// Layer sizes used for the full-scale models: 512-wide GRUs and
    /// embeddings over a 40,000-token vocabulary.
    pub fn full_scale(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            vocab_size: 40_000,
            emb_dim: 512,
            hidden_dim: 512,
            attn_dim: 512,
        }
    }

    pub fn small(architecture: Architecture, vocab_size: usize, dim: usize) -> Self {
        ModelConfig {
            architecture,
            vocab_size,
            emb_dim: dim,
            hidden_dim: dim,
            attn_dim: dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return Err(Error::Domain(format!(
                "vocab_size must exceed the reserved tokens, got {}",
                self.vocab_size
            )));
        }
        if self.emb_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Domain(format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

const GRU_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl GruCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[hidden, input]);
        let u = Tensor::zeros(&[hidden, hidden]);
        let b = Tensor::zeros(&[hidden]);
        GruCellParams {
            w_z: w.clone(),
            w_r: w.clone(),
            w_h: w,
            u_z: u.clone(),
            u_r: u.clone(),
            u_h: u,
            b_z: b.clone(),
            b_r: b.clone(),
            b_h: b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows()
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [&self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    pub fn bind<'p>(&'p self, tape: &mut ComputationTape<'p>) -> BoundGru {
        let [w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h] = self.tensors().map(|t| tape.param(t));
        BoundGru {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
            hidden: self.hidden_dim(),
            input: self.input_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub v: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl AttentionParams {
    pub fn zeros(source_dim: usize, query_dim: usize, attn: usize) -> Self {
        AttentionParams {
            v: Tensor::zeros(&[attn]),
            w1: Tensor::zeros(&[attn, source_dim]),
            w2: Tensor::zeros(&[attn, query_dim]),
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut ComputationTape<'p>) -> BoundAttention {
        BoundAttention {
            v: tape.param(&self.v),
            w1: tape.param(&self.w1),
            w2: tape.param(&self.w2),
        }
    }
}

/// GRU parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
    pub hidden: usize,
    pub input: usize,
}

impl BoundGru {
    fn vars(&self) -> [Var; 9] {
        [self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub v: Var,
    pub w1: Var,
    pub w2: Var,
}

/// Every learnable tensor of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub encoder_embedding: Tensor,
    pub decoder_embedding: Tensor,
    pub encoder: GruCellParams,
    /// Present iff the architecture is hierarchical.
    pub discourse: Option<GruCellParams>,
    pub decoder: GruCellParams,
    pub attention: AttentionParams,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Every parameter zero: the model predicts a uniform distribution.
    Zeros,
    /// Independent draws from `[-INIT_SCALE, INIT_SCALE]`.
    Uniform { seed: u64 },
}

impl ModelParameters {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            architecture,
            vocab_size: v,
            emb_dim: e,
            hidden_dim: h,
            attn_dim: a,
        } = config;
        Ok(ModelParameters {
            config,
            encoder_embedding: Tensor::zeros(&[v, e]),
            decoder_embedding: Tensor::zeros(&[v, e]),
            encoder: GruCellParams::zeros(e, h),
            discourse: (architecture == Architecture::Hierarchical).then(|| GruCellParams::zeros(h, h)),
            decoder: GruCellParams::zeros(e + h, h),
            attention: AttentionParams::zeros(h, h, a),
            w_out: Tensor::zeros(&[v, 2 * h]),
            b_out: Tensor::zeros(&[v]),
        })
    }

    pub fn init(config: ModelConfig, init: Init) -> Result<Self> {
        match init {
            Init::Zeros => Self::zeros(config),
            Init::Uniform { seed } => Self::uniform(config, seed, INIT_SCALE),
        }
    }

    /// Every parameter drawn from `[-half_width, half_width]`.
    pub fn uniform(config: ModelConfig, seed: u64, half_width: f64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in params.tensors_mut() {
            for x in t.data_mut() {
                *x = rng.gen_range(-half_width..=half_width);
            }
        }
        Ok(params)
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// Canonical tensor order shared by gradients, checkpoints and updates.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.encoder_embedding, &self.decoder_embedding];
        out.extend(self.encoder.tensors());
        if let Some(d) = &self.discourse {
            out.extend(d.tensors());
        }
        out.extend(self.decoder.tensors());
        out.extend([&self.attention.v, &self.attention.w1, &self.attention.w2]);
        out.extend([&self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.encoder_embedding, &mut self.decoder_embedding];
        out.extend(self.encoder.tensors_mut());
        if let Some(d) = &mut self.discourse {
            out.extend(d.tensors_mut());
        }
        out.extend(self.decoder.tensors_mut());
        out.extend([&mut self.attention.v, &mut self.attention.w1, &mut self.attention.w2]);
        out.extend([&mut self.w_out, &mut self.b_out]);
        out
    }

    /// Names in canonical order, e.g. `encoder.w_z`, `attention.v`.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["encoder_embedding".to_string(), "decoder_embedding".to_string()];
        let mut cell = |prefix: &str| {
            for n in GRU_NAMES {
                out.push(format!("{prefix}.{n}"));
            }
        };
        cell("encoder");
        if self.discourse.is_some() {
            cell("discourse");
        }
        cell("decoder");
        out.extend(["attention.v", "attention.w1", "attention.w2", "output.w", "output.b"].map(String::from));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Replaces every tensor, in canonical order.
    pub fn set_tensors(&mut self, values: Vec<Tensor>) -> Result<()> {
        let slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "set_tensors",
                    left: slot.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            *slot = v;
        }
        Ok(())
    }

    pub fn bind<'p>(&'p self, tape: &mut ComputationTape<'p>) -> BoundParams {
        BoundParams {
            encoder_embedding: tape.param(&self.encoder_embedding),
            decoder_embedding: tape.param(&self.decoder_embedding),
            encoder: self.encoder.bind(tape),
            discourse: self.discourse.as_ref().map(|d| d.bind(tape)),
            decoder: self.decoder.bind(tape),
            attention: self.attention.bind(tape),
            w_out: tape.param(&self.w_out),
            b_out: tape.param(&self.b_out),
            architecture: self.config.architecture,
            hidden: self.config.hidden_dim,
        }
    }
}

/// [`ModelParameters`] registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub encoder_embedding: Var,
    pub decoder_embedding: Var,
    pub encoder: BoundGru,
    pub discourse: Option<BoundGru>,
    pub decoder: BoundGru,
    pub attention: BoundAttention,
    pub w_out: Var,
    pub b_out: Var,
    pub architecture: Architecture,
    pub hidden: usize,
}

impl BoundParams {
    /// Vars in the canonical order of [`ModelParameters::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.encoder_embedding, self.decoder_embedding];
        out.extend(self.encoder.vars());
        if let Some(d) = &self.discourse {
            out.extend(d.vars());
        }
        out.extend(self.decoder.vars());
        out.extend([self.attention.v, self.attention.w1, self.attention.w2]);
        out.extend([self.w_out, self.b_out]);
        out
    }
}

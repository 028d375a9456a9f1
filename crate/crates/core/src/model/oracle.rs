//! Scalar re-evaluation of the network equations, written straight from the
//! formulas with explicit loops and no tape. Test-only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttentionParams, GruCellParams, ModelParameters};
use crate::corpus::{EncodedFragment, EncodedSource, PAD};
use crate::tensor::Tensor;

pub fn random_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(1));
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), random_vec(seed, shape.iter().product())).unwrap()
}

pub fn random_cell(seed: u64, input: usize, hidden: usize) -> GruCellParams {
    let s = seed * 100;
    GruCellParams {
        w_z: random_tensor(s + 1, &[hidden, input]),
        w_r: random_tensor(s + 2, &[hidden, input]),
        w_h: random_tensor(s + 3, &[hidden, input]),
        u_z: random_tensor(s + 4, &[hidden, hidden]),
        u_r: random_tensor(s + 5, &[hidden, hidden]),
        u_h: random_tensor(s + 6, &[hidden, hidden]),
        b_z: random_tensor(s + 7, &[hidden]),
        b_r: random_tensor(s + 8, &[hidden]),
        b_h: random_tensor(s + 9, &[hidden]),
    }
}

pub fn random_attention(seed: u64, hidden: usize, attn: usize) -> AttentionParams {
    let s = seed * 100 + 50;
    AttentionParams {
        v: random_tensor(s + 1, &[attn]),
        w1: random_tensor(s + 2, &[attn, hidden]),
        w2: random_tensor(s + 3, &[attn, hidden]),
    }
}

fn at(t: &Tensor, i: usize, j: usize) -> f64 {
    t.data()[i * t.cols() + j]
}

fn mv(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        for (j, xj) in x.iter().enumerate() {
            *o += at(m, i, j) * xj;
        }
    }
    out
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gru(c: &GruCellParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = h.len();
    let (wz, uz) = (mv(&c.w_z, x), mv(&c.u_z, h));
    let (wr, ur) = (mv(&c.w_r, x), mv(&c.u_r, h));
    let z: Vec<f64> = (0..n).map(|i| sigma(wz[i] + uz[i] + c.b_z.data()[i])).collect();
    let r: Vec<f64> = (0..n).map(|i| sigma(wr[i] + ur[i] + c.b_r.data()[i])).collect();
    let rh: Vec<f64> = (0..n).map(|i| r[i] * h[i]).collect();
    let (wh, uh) = (mv(&c.w_h, x), mv(&c.u_h, &rh));
    let cand: Vec<f64> = (0..n).map(|i| (wh[i] + uh[i] + c.b_h.data()[i]).tanh()).collect();
    (0..n).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect()
}

/// `(scores, weights, context)`
pub fn attention(p: &AttentionParams, hs: &[Vec<f64>], d: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let w2d = mv(&p.w2, d);
    let scores: Vec<f64> = hs
        .iter()
        .map(|h| {
            let w1h = mv(&p.w1, h);
            (0..p.v.len()).map(|k| p.v.data()[k] * (w1h[k] + w2d[k]).tanh()).sum()
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut context = vec![0.0; hs[0].len()];
    for (h, a) in hs.iter().zip(&weights) {
        for (c, x) in context.iter_mut().zip(h) {
            *c += a * x;
        }
    }
    (scores, weights, context)
}

fn embed(t: &Tensor, id: usize) -> Vec<f64> {
    (0..t.cols()).map(|j| at(t, id, j)).collect()
}

pub fn encoder_states(p: &ModelParameters, ids: &[usize]) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; p.config.hidden_dim];
    ids.iter()
        .map(|&id| {
            h = gru(&p.encoder, &embed(&p.encoder_embedding, id), &h);
            h.clone()
        })
        .collect()
}

pub fn discourse_states(p: &ModelParameters, utts: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let cell = p.discourse.as_ref().unwrap();
    let mut h = vec![0.0; p.config.hidden_dim];
    utts.iter()
        .map(|u| {
            let e = encoder_states(p, u).pop().unwrap();
            h = gru(cell, &e, &h);
            h.clone()
        })
        .collect()
}

/// Per-token cross-entropy of the full forward pass.
pub fn fragment_loss(p: &ModelParameters, f: &EncodedFragment) -> Vec<f64> {
    let hs = match &f.source {
        EncodedSource::Flat(ids) => encoder_states(p, ids),
        EncodedSource::Hierarchical(utts) => discourse_states(p, utts),
    };
    let mut d = hs.last().unwrap().clone();
    let mut c = vec![0.0; p.config.hidden_dim];
    let mut losses = Vec::new();
    for (&inp, &label) in f.target_input.iter().zip(&f.target_labels) {
        let mut x = embed(&p.decoder_embedding, inp);
        x.extend(&c);
        d = gru(&p.decoder, &x, &d);
        c = attention(&p.attention, &hs, &d).2;
        let mut feat = d.clone();
        feat.extend(&c);
        let logits: Vec<f64> = mv(&p.w_out, &feat)
            .iter()
            .zip(p.b_out.data())
            .map(|(a, b)| a + b)
            .collect();
        if label != PAD {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            losses.push(lse - logits[label]);
        }
    }
    losses
}

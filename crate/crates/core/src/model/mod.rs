//! A small pre-norm causal transformer with an untied output head.
//!
//! The final-layer hidden state (after the last layer norm, before the head)
//! is both the input to the head and the sentence embedding read at `[RQ]` /
//! `[RD]` positions.

mod checkpoint;
mod decode;
mod forward;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use checkpoint::{load_checkpoint, load_checkpoint_for_vocab, save_checkpoint};
pub use decode::{decode_step, DecodeState};
pub use forward::{backward, forward_hidden, forward_logits, forward_trace, HiddenStates, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            max_seq_len: 512,
            vocab_size,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v < 1 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be >= 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model not divisible by n_heads ({} % {} != 0)",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl LayerParams {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        Self {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w1: Mat::zeros(d, c.d_ff),
            b1: vec![0.0; c.d_ff],
            w2: Mat::zeros(c.d_ff, d),
            b2: vec![0.0; d],
        }
    }
}

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// All trainable tensors. Also used as the gradient container.
///
/// `stamp` identifies a parameter version for decode caches; it is refreshed
/// whenever the optimizer mutates the weights and is ignored by equality.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embeddings: Mat,
    pub positional_embeddings: Mat,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    /// Output head, one row per vocabulary entry.
    pub head: Mat,
    stamp: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors() == other.tensors()
    }
}

impl ModelParams {
    /// Same shapes as `config`, every entry zero.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config: *config,
            token_embeddings: Mat::zeros(config.vocab_size, d),
            positional_embeddings: Mat::zeros(config.max_seq_len, d),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(config)).collect(),
            lnf_gain: vec![0.0; d],
            lnf_bias: vec![0.0; d],
            head: Mat::zeros(config.vocab_size, d),
            stamp: next_stamp(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.token_embeddings.data, &self.positional_embeddings.data];
        for l in &self.layers {
            v.extend_from_slice(&[
                &l.ln1_gain[..],
                &l.ln1_bias[..],
                &l.wq.data[..],
                &l.wk.data[..],
                &l.wv.data[..],
                &l.wo.data[..],
                &l.ln2_gain[..],
                &l.ln2_bias[..],
                &l.w1.data[..],
                &l.b1[..],
                &l.w2.data[..],
                &l.b2[..],
            ]);
        }
        v.extend_from_slice(&[&self.lnf_gain[..], &self.lnf_bias[..], &self.head.data[..]]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            &mut self.token_embeddings.data,
            &mut self.positional_embeddings.data,
        ];
        for l in &mut self.layers {
            v.push(&mut l.ln1_gain);
            v.push(&mut l.ln1_bias);
            v.push(&mut l.wq.data);
            v.push(&mut l.wk.data);
            v.push(&mut l.wv.data);
            v.push(&mut l.wo.data);
            v.push(&mut l.ln2_gain);
            v.push(&mut l.ln2_bias);
            v.push(&mut l.w1.data);
            v.push(&mut l.b1);
            v.push(&mut l.w2.data);
            v.push(&mut l.b2);
        }
        v.push(&mut self.lnf_gain);
        v.push(&mut self.lnf_bias);
        v.push(&mut self.head.data);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Marks the weights as changed, invalidating open decode caches.
    pub fn restamp(&mut self) {
        self.stamp = next_stamp();
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::tensor::axpy(alpha, src, dst);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn fingerprint(&self) -> String {
        checkpoint::fingerprint(self)
    }
}

/// Uniform `±1/√d_model` for every matrix; layer-norm gains one, biases zero.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut p = ModelParams::zeros(config);
    let bound = 1.0 / (config.d_model as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fill = |m: &mut Mat| {
        for v in &mut m.data {
            *v = rng.gen_range(-bound..bound);
        }
    };
    fill(&mut p.token_embeddings);
    fill(&mut p.positional_embeddings);
    for l in &mut p.layers {
        fill(&mut l.wq);
        fill(&mut l.wk);
        fill(&mut l.wv);
        fill(&mut l.wo);
        fill(&mut l.w1);
        fill(&mut l.w2);
        l.ln1_gain.fill(1.0);
        l.ln2_gain.fill(1.0);
    }
    fill(&mut p.head);
    p.lnf_gain.fill(1.0);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            vocab_size: 13,
            seed: 7,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_params(&tiny()).unwrap();
        let b = init_params(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = init_params(&ModelConfig { seed: 8, ..tiny() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_bound() {
        let p = init_params(&tiny()).unwrap();
        let bound = 1.0 / 8f64.sqrt();
        assert!(p.head.data.iter().all(|v| v.abs() <= bound));
        assert!(p.layers[0].ln1_gain.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let c = ModelConfig {
            d_model: 6,
            n_heads: 4,
            ..tiny()
        };
        let err = init_params(&c).unwrap_err();
        assert!(err.to_string().contains("d_model not divisible"), "{err}");
    }

    #[test]
    fn short_context_rejected() {
        let c = ModelConfig {
            max_seq_len: 1,
            ..tiny()
        };
        assert!(matches!(init_params(&c), Err(Error::InvalidConfig(_))));
    }
}

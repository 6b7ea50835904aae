use crate::error::{Error, Result};
use crate::tensor::{axpy, layer_norm_row};

use super::forward::{layer_row, logits_row, Scratch};
use super::ModelParams;

/// Key/value cache for one decode session, plus the forward-token counter.
pub struct DecodeState {
    stamp: u64,
    d_model: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    forward_tokens: usize,
    scratch: Scratch,
}

impl DecodeState {
    pub fn new(params: &ModelParams) -> Self {
        let c = &params.config;
        Self {
            stamp: params.stamp(),
            d_model: c.d_model,
            keys: vec![Vec::new(); c.n_layers],
            values: vec![Vec::new(); c.n_layers],
            tokens: Vec::new(),
            forward_tokens: 0,
            scratch: Scratch::new(c),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens fed so far.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Number of single-token forward computations performed.
    pub fn forward_tokens(&self) -> usize {
        self.forward_tokens
    }

    pub(super) fn step_hidden(&mut self, params: &ModelParams, token: usize) -> Result<Vec<f64>> {
        let c = &params.config;
        if params.stamp() != self.stamp || c.d_model != self.d_model || c.n_layers != self.keys.len()
        {
            return Err(Error::CacheMismatch(
                "decode state was built for different parameters".into(),
            ));
        }
        let t = self.tokens.len();
        if self.keys.iter().any(|k| k.len() != t * c.d_model) {
            return Err(Error::CacheMismatch("cache length disagrees with prefix".into()));
        }
        if t + 1 > c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: t + 1,
                max: c.max_seq_len,
            });
        }
        if token >= c.vocab_size {
            return Err(Error::InvalidTokenId(token, c.vocab_size));
        }
        let mut x = params.token_embeddings.row(token).to_vec();
        axpy(1.0, params.positional_embeddings.row(t), &mut x);
        for (l, lp) in params.layers.iter().enumerate() {
            layer_row(c, lp, &x, &mut self.keys[l], &mut self.values[l], &mut self.scratch);
            x.copy_from_slice(&self.scratch.out);
        }
        let mut xhat = vec![0.0; c.d_model];
        let mut hidden = vec![0.0; c.d_model];
        layer_norm_row(&x, &params.lnf_gain, &params.lnf_bias, &mut xhat, &mut hidden);
        self.tokens.push(token);
        self.forward_tokens += 1;
        Ok(hidden)
    }
}

/// Feeds one token through the cached prefix. Returns the new position's
/// hidden row and logit row.
pub fn decode_step(
    params: &ModelParams,
    state: &mut DecodeState,
    next_token: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hidden = state.step_hidden(params, next_token)?;
    let mut logits = vec![0.0; params.config.vocab_size];
    logits_row(params, &hidden, &mut logits);
    Ok((hidden, logits))
}

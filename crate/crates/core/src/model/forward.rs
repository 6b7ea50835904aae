use crate::error::{Error, Result};
use crate::tensor::{
    axpy, dot, gelu, gelu_grad, layer_norm_row, layer_norm_row_backward, outer_acc, vec_mat,
    vec_mat_t_acc, Mat,
};

use super::{DecodeState, LayerParams, ModelConfig, ModelParams};

/// Final-layer activations, one row per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(pub Mat);

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.0.rows
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows == 0
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }
}

/// Per-row working buffers for one transformer layer.
pub(super) struct Scratch {
    pub xhat1: Vec<f64>,
    pub rstd1: f64,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub probs: Vec<f64>,
    pub o: Vec<f64>,
    pub attn: Vec<f64>,
    pub x1: Vec<f64>,
    pub xhat2: Vec<f64>,
    pub rstd2: f64,
    pub c: Vec<f64>,
    pub u: Vec<f64>,
    pub g: Vec<f64>,
    pub f: Vec<f64>,
    pub out: Vec<f64>,
}

impl Scratch {
    pub fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        Self {
            xhat1: vec![0.0; d],
            rstd1: 0.0,
            a: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            probs: Vec::new(),
            o: vec![0.0; d],
            attn: vec![0.0; d],
            x1: vec![0.0; d],
            xhat2: vec![0.0; d],
            rstd2: 0.0,
            c: vec![0.0; d],
            u: vec![0.0; c.d_ff],
            g: vec![0.0; c.d_ff],
            f: vec![0.0; d],
            out: vec![0.0; d],
        }
    }
}

/// Runs one layer for the row at position `keys.len() / d`, appending its
/// key/value rows to the caches. Shared by the full and incremental paths so
/// both produce identical floats.
pub(super) fn layer_row(
    cfg: &ModelConfig,
    lp: &LayerParams,
    x: &[f64],
    keys: &mut Vec<f64>,
    values: &mut Vec<f64>,
    s: &mut Scratch,
) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    s.rstd1 = layer_norm_row(x, &lp.ln1_gain, &lp.ln1_bias, &mut s.xhat1, &mut s.a);
    vec_mat(&s.a, &lp.wq, &mut s.q);
    vec_mat(&s.a, &lp.wk, &mut s.k);
    vec_mat(&s.a, &lp.wv, &mut s.v);
    keys.extend_from_slice(&s.k);
    values.extend_from_slice(&s.v);
    let n = keys.len() / d;

    s.probs.clear();
    s.probs.resize(cfg.n_heads * n, 0.0);
    s.o.fill(0.0);
    for h in 0..cfg.n_heads {
        let hs = h * dh..(h + 1) * dh;
        let p = &mut s.probs[h * n..(h + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(&s.q[hs.clone()], &keys[j * d + hs.start..j * d + hs.end]) * scale;
            max = max.max(*pj);
        }
        let mut sum = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= sum;
        }
        for (j, &pj) in p.iter().enumerate() {
            axpy(pj, &values[j * d + hs.start..j * d + hs.end], &mut s.o[hs.clone()]);
        }
    }
    vec_mat(&s.o, &lp.wo, &mut s.attn);
    for i in 0..d {
        s.x1[i] = x[i] + s.attn[i];
    }

    s.rstd2 = layer_norm_row(&s.x1, &lp.ln2_gain, &lp.ln2_bias, &mut s.xhat2, &mut s.c);
    vec_mat(&s.c, &lp.w1, &mut s.u);
    for (ui, bi) in s.u.iter_mut().zip(&lp.b1) {
        *ui += bi;
    }
    for (gi, &ui) in s.g.iter_mut().zip(&s.u) {
        *gi = gelu(ui);
    }
    vec_mat(&s.g, &lp.w2, &mut s.f);
    for i in 0..d {
        s.out[i] = s.x1[i] + s.f[i] + lp.b2[i];
    }
}

pub(super) fn check_tokens(params: &ModelParams, tokens: &[usize]) -> Result<()> {
    let c = &params.config;
    if tokens.len() > c.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: c.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::InvalidTokenId(bad, c.vocab_size));
    }
    Ok(())
}

/// Hidden states for every position; row `t` depends only on `tokens[..=t]`.
pub fn forward_hidden(params: &ModelParams, tokens: &[usize]) -> Result<HiddenStates> {
    check_tokens(params, tokens)?;
    let mut state = DecodeState::new(params);
    let mut out = Mat::zeros(tokens.len(), params.config.d_model);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = state.step_hidden(params, tok)?;
        out.row_mut(t).copy_from_slice(&row);
    }
    Ok(HiddenStates(out))
}

/// `logits[t] = hidden[t] · headᵀ`; no bias.
pub fn forward_logits(params: &ModelParams, hidden: &HiddenStates) -> Result<Mat> {
    let c = &params.config;
    if hidden.0.cols != c.d_model {
        return Err(Error::ShapeMismatch(format!(
            "hidden width {} != d_model {}",
            hidden.0.cols, c.d_model
        )));
    }
    let mut out = Mat::zeros(hidden.len(), c.vocab_size);
    for t in 0..hidden.len() {
        logits_row(params, hidden.row(t), out.row_mut(t));
    }
    Ok(out)
}

pub(crate) fn logits_row(params: &ModelParams, h: &[f64], out: &mut [f64]) {
    for (n, o) in out.iter_mut().enumerate() {
        *o = dot(params.head.row(n), h);
    }
}

struct LayerTrace {
    x_in: Mat,
    xhat1: Mat,
    rstd1: Vec<f64>,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Row t holds `n_heads * (t + 1)` probabilities starting at
    /// `n_heads * t * (t + 1) / 2`.
    probs: Vec<f64>,
    o: Mat,
    xhat2: Mat,
    rstd2: Vec<f64>,
    c: Mat,
    u: Mat,
    g: Mat,
}

/// Activations recorded by a training forward pass.
pub struct Trace {
    tokens: Vec<usize>,
    layers: Vec<LayerTrace>,
    xhat_f: Mat,
    rstd_f: Vec<f64>,
    pub hidden: HiddenStates,
}

impl Trace {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

pub fn forward_trace(params: &ModelParams, tokens: &[usize]) -> Result<Trace> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let (t_len, d) = (tokens.len(), cfg.d_model);
    let mut x = Mat::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        row.copy_from_slice(params.token_embeddings.row(tok));
        axpy(1.0, params.positional_embeddings.row(t), row);
    }
    let mut s = Scratch::new(cfg);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let mut lt = LayerTrace {
            x_in: x.clone(),
            xhat1: Mat::zeros(t_len, d),
            rstd1: vec![0.0; t_len],
            a: Mat::zeros(t_len, d),
            q: Mat::zeros(t_len, d),
            k: Mat::zeros(t_len, d),
            v: Mat::zeros(t_len, d),
            probs: Vec::with_capacity(cfg.n_heads * t_len * (t_len + 1) / 2),
            o: Mat::zeros(t_len, d),
            xhat2: Mat::zeros(t_len, d),
            rstd2: vec![0.0; t_len],
            c: Mat::zeros(t_len, d),
            u: Mat::zeros(t_len, cfg.d_ff),
            g: Mat::zeros(t_len, cfg.d_ff),
        };
        let mut keys = Vec::with_capacity(t_len * d);
        let mut values = Vec::with_capacity(t_len * d);
        for t in 0..t_len {
            layer_row(cfg, lp, x.row(t), &mut keys, &mut values, &mut s);
            lt.xhat1.row_mut(t).copy_from_slice(&s.xhat1);
            lt.rstd1[t] = s.rstd1;
            lt.a.row_mut(t).copy_from_slice(&s.a);
            lt.q.row_mut(t).copy_from_slice(&s.q);
            lt.probs.extend_from_slice(&s.probs);
            lt.o.row_mut(t).copy_from_slice(&s.o);
            lt.xhat2.row_mut(t).copy_from_slice(&s.xhat2);
            lt.rstd2[t] = s.rstd2;
            lt.c.row_mut(t).copy_from_slice(&s.c);
            lt.u.row_mut(t).copy_from_slice(&s.u);
            lt.g.row_mut(t).copy_from_slice(&s.g);
            x.row_mut(t).copy_from_slice(&s.out);
        }
        lt.k = Mat::from_vec(t_len, d, keys);
        lt.v = Mat::from_vec(t_len, d, values);
        layers.push(lt);
    }
    let mut xhat_f = Mat::zeros(t_len, d);
    let mut rstd_f = vec![0.0; t_len];
    let mut hidden = Mat::zeros(t_len, d);
    for t in 0..t_len {
        rstd_f[t] = layer_norm_row(
            x.row(t),
            &params.lnf_gain,
            &params.lnf_bias,
            xhat_f.row_mut(t),
            hidden.row_mut(t),
        );
    }
    Ok(Trace {
        tokens: tokens.to_vec(),
        layers,
        xhat_f,
        rstd_f,
        hidden: HiddenStates(hidden),
    })
}

/// Reverse-mode pass: accumulates into `grads` the gradient of a scalar loss
/// whose derivative with respect to the hidden states is `d_hidden`.
/// Head gradients are the caller's business (the head does not feed the
/// hidden states).
pub fn backward(params: &ModelParams, trace: &Trace, d_hidden: &Mat, grads: &mut ModelParams) -> Result<()> {
    let cfg = &params.config;
    let (t_len, d) = (trace.tokens.len(), cfg.d_model);
    if d_hidden.rows != t_len || d_hidden.cols != d {
        return Err(Error::ShapeMismatch(format!(
            "d_hidden is {}x{}, trace is {t_len}x{d}",
            d_hidden.rows, d_hidden.cols
        )));
    }
    if d_hidden.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hidden-state gradient".into()));
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let nh = cfg.n_heads;

    let mut dx = Mat::zeros(t_len, d);
    for t in 0..t_len {
        layer_norm_row_backward(
            d_hidden.row(t),
            trace.xhat_f.row(t),
            trace.rstd_f[t],
            &params.lnf_gain,
            dx.row_mut(t),
            &mut grads.lnf_gain,
            &mut grads.lnf_bias,
        );
    }

    let mut dg = vec![0.0; cfg.d_ff];
    let mut du = vec![0.0; cfg.d_ff];
    let mut dc = vec![0.0; d];
    let mut da = vec![0.0; d];
    for (li, lt) in trace.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let gl = &mut grads.layers[li];

        // Feed-forward sublayer: out = x1 + ffn(ln2(x1)).
        let mut dx1 = dx.clone();
        for t in 0..t_len {
            let df = dx.row(t);
            outer_acc(lt.g.row(t), df, &mut gl.w2);
            axpy(1.0, df, &mut gl.b2);
            dg.fill(0.0);
            vec_mat_t_acc(df, &lp.w2, &mut dg);
            for ((dui, &dgi), &ui) in du.iter_mut().zip(&dg).zip(lt.u.row(t)) {
                *dui = dgi * gelu_grad(ui);
            }
            outer_acc(lt.c.row(t), &du, &mut gl.w1);
            axpy(1.0, &du, &mut gl.b1);
            dc.fill(0.0);
            vec_mat_t_acc(&du, &lp.w1, &mut dc);
            layer_norm_row_backward(
                &dc,
                lt.xhat2.row(t),
                lt.rstd2[t],
                &lp.ln2_gain,
                dx1.row_mut(t),
                &mut gl.ln2_gain,
                &mut gl.ln2_bias,
            );
        }

        // Attention sublayer: x1 = x + attn(ln1(x)) · Wo.
        let mut dx0 = dx1.clone();
        let mut d_o = Mat::zeros(t_len, d);
        for t in 0..t_len {
            outer_acc(lt.o.row(t), dx1.row(t), &mut gl.wo);
            vec_mat_t_acc(dx1.row(t), &lp.wo, d_o.row_mut(t));
        }
        let mut dq = Mat::zeros(t_len, d);
        let mut dk = Mat::zeros(t_len, d);
        let mut dv = Mat::zeros(t_len, d);
        let mut dp = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let n = t + 1;
            let base = nh * t * (t + 1) / 2;
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                let p = &lt.probs[base + h * n..base + (h + 1) * n];
                let do_h = &d_o.row(t)[hs.clone()];
                dp.clear();
                for (s, &ps) in p.iter().enumerate() {
                    dp.push(dot(do_h, &lt.v.row(s)[hs.clone()]));
                    axpy(ps, do_h, &mut dv.row_mut(s)[hs.clone()]);
                }
                let mix: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (s, &ps) in p.iter().enumerate() {
                    let ds = ps * (dp[s] - mix) * scale;
                    axpy(ds, &lt.k.row(s)[hs.clone()], &mut dq.row_mut(t)[hs.clone()]);
                    axpy(ds, &lt.q.row(t)[hs.clone()], &mut dk.row_mut(s)[hs.clone()]);
                }
            }
        }
        for t in 0..t_len {
            let a = lt.a.row(t);
            outer_acc(a, dq.row(t), &mut gl.wq);
            outer_acc(a, dk.row(t), &mut gl.wk);
            outer_acc(a, dv.row(t), &mut gl.wv);
            da.fill(0.0);
            vec_mat_t_acc(dq.row(t), &lp.wq, &mut da);
            vec_mat_t_acc(dk.row(t), &lp.wk, &mut da);
            vec_mat_t_acc(dv.row(t), &lp.wv, &mut da);
            layer_norm_row_backward(
                &da,
                lt.xhat1.row(t),
                lt.rstd1[t],
                &lp.ln1_gain,
                dx0.row_mut(t),
                &mut gl.ln1_gain,
                &mut gl.ln1_bias,
            );
        }
        debug_assert_eq!(lt.x_in.rows, t_len);
        dx = dx0;
    }

    for (t, &tok) in trace.tokens.iter().enumerate() {
        axpy(1.0, dx.row(t), grads.token_embeddings.row_mut(tok));
        axpy(1.0, dx.row(t), grads.positional_embeddings.row_mut(t));
    }
    Ok(())
}

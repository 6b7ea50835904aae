//! Training objectives: masked next-token cross-entropy for GEN targets,
//! pairwise (BPR) and softmax (InfoNCE) contrastive losses for RET anchors,
//! and their weighted combination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HiddenStates;
use crate::tensor::{axpy, dot, l2_norm, log_sum_exp, Mat};
use crate::vocab::TaggedToken;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda_g: f64,
    pub lambda_r: f64,
    pub temperature: f64,
    /// Negatives sampled per selected anchor before batch sharing.
    pub negatives_per_positive: usize,
    pub learning_rate: f64,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_g: 1.0,
            lambda_r: 1.0,
            temperature: 0.1,
            negatives_per_positive: 2,
            learning_rate: 1e-3,
            grad_accum_steps: 1,
            batch_size: 4,
            epochs: 10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidHyper(m.into()));
        if !(self.lambda_g >= 0.0 && self.lambda_g.is_finite()) {
            return bad("lambda_g must be >= 0");
        }
        if !(self.lambda_r >= 0.0 && self.lambda_r.is_finite()) {
            return bad("lambda_r must be >= 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if self.negatives_per_positive < 1 {
            return bad("negatives_per_positive must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.grad_accum_steps < 1 || self.batch_size < 1 {
            return bad("grad_accum_steps and batch_size must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Bpr,
    InfoNce,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpr" => Ok(LossVariant::Bpr),
            "infonce" => Ok(LossVariant::InfoNce),
            _ => Err(Error::InvalidHyper(format!("unknown loss variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTriple {
    pub query: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// Sum and count of cross-entropy over positions carrying an `lm_target`.
pub fn lm_loss_sum(logits: &Mat, tagged: &[TaggedToken]) -> Result<(f64, usize)> {
    if logits.rows != tagged.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} tokens",
            logits.rows,
            tagged.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (t, tok) in tagged.iter().enumerate() {
        if let Some(target) = tok.lm_target {
            let row = logits.row(t);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("logits at position {t}")));
            }
            sum += log_sum_exp(row) - row[target];
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Mean cross-entropy over counted positions; `(0, 0)` when none qualify.
pub fn lm_loss(logits: &Mat, tagged: &[TaggedToken]) -> Result<(f64, usize)> {
    let (sum, count) = lm_loss_sum(logits, tagged)?;
    Ok((if count == 0 { 0.0 } else { sum / count as f64 }, count))
}

/// Cross-entropy sum over counted positions, with `scale · ∂sum` accumulated
/// into `d_hidden` and `d_head`. Logits are computed only where needed.
pub fn lm_loss_grad(
    head: &Mat,
    hidden: &HiddenStates,
    tagged: &[TaggedToken],
    scale: f64,
    d_hidden: &mut Mat,
    d_head: &mut Mat,
) -> Result<(f64, usize)> {
    if hidden.len() != tagged.len() {
        return Err(Error::ShapeMismatch("hidden rows vs tagged tokens".into()));
    }
    let mut logits = vec![0.0; head.rows];
    let mut sum = 0.0;
    let mut count = 0;
    for (t, tok) in tagged.iter().enumerate() {
        let Some(target) = tok.lm_target else { continue };
        let h = hidden.row(t);
        for (n, l) in logits.iter_mut().enumerate() {
            *l = dot(head.row(n), h);
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits at position {t}")));
        }
        let lse = log_sum_exp(&logits);
        sum += lse - logits[target];
        count += 1;
        if scale != 0.0 {
            let dh = d_hidden.row_mut(t);
            for (n, &l) in logits.iter().enumerate() {
                let g = scale * ((l - lse).exp() - if n == target { 1.0 } else { 0.0 });
                axpy(g, head.row(n), dh);
                axpy(g, h, d_head.row_mut(n));
            }
        }
    }
    Ok((sum, count))
}

fn normalized(v: &[f64], what: &'static str) -> Result<(Vec<f64>, f64)> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    let n = l2_norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm(what));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Pulls a gradient on the unit vector back to the raw vector.
fn unnormalize_grad(unit: &[f64], norm: f64, d_unit: &[f64]) -> Vec<f64> {
    let proj = dot(unit, d_unit);
    unit.iter()
        .zip(d_unit)
        .map(|(u, d)| (d - u * proj) / norm)
        .collect()
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(q̂·p̂ − q̂·n̂)` on L2-normalized inputs.
pub fn bpr_pair_loss(q: &[f64], d_pos: &[f64], d_neg: &[f64]) -> Result<f64> {
    Ok(bpr_pair_grad(q, d_pos, d_neg)?.0)
}

/// BPR loss with gradients with respect to the raw (unnormalized) inputs.
pub fn bpr_pair_grad(
    q: &[f64],
    d_pos: &[f64],
    d_neg: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    if q.len() != d_pos.len() || q.len() != d_neg.len() {
        return Err(Error::ShapeMismatch("bpr vectors differ in length".into()));
    }
    let (qh, qn) = normalized(q, "query")?;
    let (ph, pn) = normalized(d_pos, "positive")?;
    let (nh, nn) = normalized(d_neg, "negative")?;
    let s = dot(&qh, &ph) - dot(&qh, &nh);
    let loss = softplus(-s);
    let dl_ds = -sigmoid(-s);
    let dq: Vec<f64> = ph.iter().zip(&nh).map(|(p, n)| dl_ds * (p - n)).collect();
    let dp: Vec<f64> = qh.iter().map(|x| dl_ds * x).collect();
    let dn: Vec<f64> = qh.iter().map(|x| -dl_ds * x).collect();
    Ok((
        loss,
        unnormalize_grad(&qh, qn, &dq),
        unnormalize_grad(&ph, pn, &dp),
        unnormalize_grad(&nh, nn, &dn),
    ))
}

/// InfoNCE over one positive and any number of negatives.
pub fn infonce_loss(triple: &ContrastiveTriple, temperature: f64) -> Result<f64> {
    if triple.positives.len() != 1 {
        return Err(Error::InvalidInput(format!(
            "InfoNCE takes exactly one positive, got {}",
            triple.positives.len()
        )));
    }
    let negs: Vec<&[f64]> = triple.negatives.iter().map(Vec::as_slice).collect();
    Ok(infonce_grad(&triple.query, &triple.positives[0], &negs, temperature)?.0)
}

pub type InfoNceGrad = (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

/// InfoNCE loss with gradients for query, positive and each negative.
pub fn infonce_grad(
    q: &[f64],
    d_pos: &[f64],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<InfoNceGrad> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidHyper("temperature must be > 0".into()));
    }
    if negatives.is_empty() {
        return Err(Error::EmptySampleSet("negative"));
    }
    let (qh, qn) = normalized(q, "query")?;
    let (ph, pn) = normalized(d_pos, "positive")?;
    let mut units = vec![ph];
    let mut norms = vec![pn];
    for n in negatives {
        if n.len() != q.len() {
            return Err(Error::ShapeMismatch("infonce vectors differ in length".into()));
        }
        let (u, nn) = normalized(n, "negative")?;
        units.push(u);
        norms.push(nn);
    }
    let z: Vec<f64> = units.iter().map(|u| dot(&qh, u) / temperature).collect();
    let lse = log_sum_exp(&z);
    let loss = lse - z[0];
    let dz: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, &zi)| (zi - lse).exp() - if i == 0 { 1.0 } else { 0.0 })
        .collect();
    let mut dq = vec![0.0; q.len()];
    for (u, &g) in units.iter().zip(&dz) {
        axpy(g / temperature, u, &mut dq);
    }
    let mut grads = units
        .iter()
        .zip(&norms)
        .zip(&dz)
        .map(|((u, &n), &g)| {
            let du: Vec<f64> = qh.iter().map(|x| g / temperature * x).collect();
            unnormalize_grad(u, n, &du)
        })
        .collect::<Vec<_>>();
    let dp = grads.remove(0);
    Ok((loss.max(0.0), unnormalize_grad(&qh, qn, &dq), dp, grads))
}

/// Mean contrastive loss over a batch of triples, with the count. BPR draws
/// one positive and one negative per triple from `rng`; InfoNCE uses all
/// negatives and one (drawn) positive.
pub fn retrieval_loss<R: Rng>(
    triples: &[ContrastiveTriple],
    variant: LossVariant,
    hyper: &HyperParams,
    rng: &mut R,
) -> Result<(f64, usize)> {
    if triples.is_empty() {
        return Ok((0.0, 0));
    }
    let mut sum = 0.0;
    for t in triples {
        if t.positives.is_empty() {
            return Err(Error::EmptySampleSet("positive"));
        }
        if t.negatives.is_empty() {
            return Err(Error::EmptySampleSet("negative"));
        }
        let p = &t.positives[rng.gen_range(0..t.positives.len())];
        sum += match variant {
            LossVariant::Bpr => {
                let n = &t.negatives[rng.gen_range(0..t.negatives.len())];
                bpr_pair_loss(&t.query, p, n)?
            }
            LossVariant::InfoNce => {
                let negs: Vec<&[f64]> = t.negatives.iter().map(Vec::as_slice).collect();
                infonce_grad(&t.query, p, &negs, hyper.temperature)?.0
            }
        };
    }
    Ok((sum / triples.len() as f64, triples.len()))
}

/// `λ_g · L_g + λ_r · L_r`. A zero weight drops its term exactly.
pub fn combined_loss(l_g: f64, l_r: f64, hyper: &HyperParams) -> Result<f64> {
    if !l_g.is_finite() || !l_r.is_finite() {
        return Err(Error::NonFinite("combined loss inputs".into()));
    }
    let g = if hyper.lambda_g == 0.0 { 0.0 } else { hyper.lambda_g * l_g };
    let r = if hyper.lambda_r == 0.0 { 0.0 } else { hyper.lambda_r * l_r };
    Ok(g + r)
}

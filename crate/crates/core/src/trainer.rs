//! Batch assembly and joint optimization of the generative and retrieval
//! losses with Adam.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, forward_trace, init_params, save_checkpoint, ModelConfig, ModelParams, Trace};
use crate::objectives::{bpr_pair_grad, infonce_grad, lm_loss_grad, HyperParams, LossVariant};
use crate::reconstruct::{Dataset, DocRef, Document};
use crate::tensor::{axpy, Mat};
use crate::util::keyed_rng;
use crate::vocab::BOS;

/// Token sequence used to embed a document: `<s>` followed by its tokens.
pub fn document_input(doc: &Document) -> Vec<usize> {
    let mut t = Vec::with_capacity(doc.tokens.len() + 1);
    t.push(BOS);
    t.extend_from_slice(&doc.tokens);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub hyper: HyperParams,
    pub variant: LossVariant,
    pub seed: u64,
    /// Save a checkpoint every this many optimizer steps (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, hyper: HyperParams) -> Self {
        Self {
            model,
            hyper,
            variant: LossVariant::Bpr,
            seed: 42,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_g: f64,
    pub l_r: f64,
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub hyper: HyperParams,
    pub seed: u64,
    pub loss_history: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainRun {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,l_g,l_r,l\n");
        for r in &self.loss_history {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.l_g, r.l_r, r.l);
        }
        s
    }
}

/// Which examples go into a batch and how their anchors are sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    pub examples: Vec<usize>,
    pub epoch: usize,
    pub negatives_per_anchor: usize,
    pub seed: u64,
}

/// One selected anchor with its sampled documents.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleSpec {
    pub example: usize,
    pub anchor: usize,
    pub positive: DocRef,
    /// Own sampled negatives first, then negatives shared from the batch.
    pub negatives: Vec<DocRef>,
    /// Index into `negatives` used by the pairwise loss.
    pub pair_negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<usize>,
    pub triples: Vec<TripleSpec>,
}

impl Batch {
    /// Splits into `m` consecutive micro-batches, keeping every sampled
    /// triple as it is.
    pub fn split(&self, m: usize) -> Vec<Batch> {
        let size = self.examples.len().div_ceil(m.max(1)).max(1);
        self.examples
            .chunks(size)
            .map(|chunk| Batch {
                examples: chunk.to_vec(),
                triples: self
                    .triples
                    .iter()
                    .filter(|t| chunk.contains(&t.example))
                    .cloned()
                    .collect(),
            })
            .collect()
    }
}

pub fn make_batch(dataset: &Dataset, spec: &BatchSpec) -> Batch {
    struct Pending {
        example: usize,
        anchor: usize,
        positive: DocRef,
        own: Vec<DocRef>,
        rng: rand_chacha::ChaCha8Rng,
    }
    let mut pending = Vec::new();
    for &e in &spec.examples {
        let ex = &dataset.examples[e];
        let trainable: Vec<usize> = (0..ex.anchors.len()).filter(|&i| ex.anchors[i].trainable).collect();
        if trainable.is_empty() {
            continue;
        }
        let offset = keyed_rng(spec.seed, &format!("anchor/{}", ex.source_id)).gen_range(0..trainable.len());
        let anchor = trainable[(offset + spec.epoch) % trainable.len()];
        let a = &ex.anchors[anchor];
        let mut rng = keyed_rng(spec.seed, &format!("batch/{}/{}", ex.source_id, spec.epoch));
        let positive = a.positive_doc_refs.choose(&mut rng).unwrap().clone();
        let k = spec.negatives_per_anchor.min(a.negative_doc_refs.len());
        let own: Vec<DocRef> = a.negative_doc_refs.choose_multiple(&mut rng, k).cloned().collect();
        pending.push(Pending {
            example: e,
            anchor,
            positive,
            own,
            rng,
        });
    }
    let mut shared: Vec<DocRef> = Vec::new();
    for p in &pending {
        for n in &p.own {
            if !shared.contains(n) {
                shared.push(n.clone());
            }
        }
    }
    let triples = pending
        .into_iter()
        .map(|mut p| {
            let positives = &dataset.examples[p.example].anchors[p.anchor].positive_doc_refs;
            let mut negatives = p.own.clone();
            for n in &shared {
                if !negatives.contains(n) && !positives.contains(n) {
                    negatives.push(n.clone());
                }
            }
            let pair_negative = p.rng.gen_range(0..negatives.len());
            TripleSpec {
                example: p.example,
                anchor: p.anchor,
                positive: p.positive,
                negatives,
                pair_negative,
            }
        })
        .collect();
    Batch {
        examples: spec.examples.clone(),
        triples,
    }
}

/// Mean losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub l_g: f64,
    pub l_r: f64,
    pub l: f64,
    pub lm_count: usize,
    pub triple_count: usize,
}

/// Computes the batch losses and, if `grads` is given, accumulates
/// `scale · ∂L/∂θ` into it.
pub fn batch_loss(
    params: &ModelParams,
    dataset: &Dataset,
    batch: &Batch,
    hyper: &HyperParams,
    variant: LossVariant,
    mut grads: Option<(&mut ModelParams, f64)>,
) -> Result<BatchLoss> {
    let doc_index = dataset.doc_index();
    let lm_count: usize = batch.examples.iter().map(|&e| dataset.examples[e].target_count()).sum();
    let d = params.config.d_model;

    let mut traces: Vec<Trace> = Vec::with_capacity(batch.examples.len());
    let mut d_hidden: Vec<Mat> = Vec::with_capacity(batch.examples.len());
    let mut slot = HashMap::new();
    let mut lm_sum = 0.0;
    let g_scale = match &grads {
        Some((_, s)) if hyper.lambda_g != 0.0 && lm_count > 0 => s * hyper.lambda_g / lm_count as f64,
        _ => 0.0,
    };
    let mut d_head = Mat::zeros(params.head.rows, params.head.cols);
    for (i, &e) in batch.examples.iter().enumerate() {
        let ex = &dataset.examples[e];
        let trace = forward_trace(params, &ex.token_ids())?;
        let mut dh = Mat::zeros(ex.tokens.len(), d);
        let (s, _) = lm_loss_grad(&params.head, &trace.hidden, &ex.tokens, g_scale, &mut dh, &mut d_head)?;
        lm_sum += s;
        traces.push(trace);
        d_hidden.push(dh);
        slot.insert(e, i);
    }

    // Documents referenced by the sampled triples, each forwarded once.
    let mut doc_slot: HashMap<&str, usize> = HashMap::new();
    let mut doc_traces: Vec<(usize, Trace)> = Vec::new();
    for t in &batch.triples {
        for r in std::iter::once(&t.positive).chain(&t.negatives) {
            if !doc_slot.contains_key(r.doc_id.as_str()) {
                let di = *doc_index
                    .get(r.doc_id.as_str())
                    .ok_or_else(|| Error::UnknownDocument(r.doc_id.clone()))?;
                let tr = forward_trace(params, &document_input(&dataset.corpus[di]))?;
                doc_slot.insert(&dataset.corpus[di].doc_id, doc_traces.len());
                doc_traces.push((di, tr));
            }
        }
    }
    let mut d_doc: Vec<Mat> = doc_traces
        .iter()
        .map(|(_, tr)| Mat::zeros(tr.hidden.len(), d))
        .collect();
    let locate = |r: &DocRef| -> Result<(usize, usize)> {
        let s = doc_slot[r.doc_id.as_str()];
        let doc = &dataset.corpus[doc_traces[s].0];
        let pos = doc
            .rd_positions
            .get(r.rd_index)
            .ok_or_else(|| Error::InvalidInput(format!("unresolved ref {r}")))?;
        Ok((s, pos + 1))
    };

    let r_scale = match &grads {
        Some((_, s)) if hyper.lambda_r != 0.0 && !batch.triples.is_empty() => {
            s * hyper.lambda_r / batch.triples.len() as f64
        }
        _ => 0.0,
    };
    let mut lr_sum = 0.0;
    for t in &batch.triples {
        let ei = slot[&t.example];
        let qpos = dataset.examples[t.example].anchors[t.anchor].position;
        let q = traces[ei].hidden.row(qpos).to_vec();
        let (ps, pp) = locate(&t.positive)?;
        let pvec = doc_traces[ps].1.hidden.row(pp).to_vec();
        let neg_locs: Vec<(usize, usize)> = t.negatives.iter().map(&locate).collect::<Result<_>>()?;
        match variant {
            LossVariant::Bpr => {
                let (ns, np) = neg_locs[t.pair_negative];
                let (loss, dq, dp, dn) = bpr_pair_grad(&q, &pvec, doc_traces[ns].1.hidden.row(np))?;
                lr_sum += loss;
                if r_scale != 0.0 {
                    axpy(r_scale, &dq, d_hidden[ei].row_mut(qpos));
                    axpy(r_scale, &dp, d_doc[ps].row_mut(pp));
                    axpy(r_scale, &dn, d_doc[ns].row_mut(np));
                }
            }
            LossVariant::InfoNce => {
                let negs: Vec<&[f64]> = neg_locs
                    .iter()
                    .map(|&(s, p)| doc_traces[s].1.hidden.row(p))
                    .collect();
                let (loss, dq, dp, dns) = infonce_grad(&q, &pvec, &negs, hyper.temperature)?;
                lr_sum += loss;
                if r_scale != 0.0 {
                    axpy(r_scale, &dq, d_hidden[ei].row_mut(qpos));
                    axpy(r_scale, &dp, d_doc[ps].row_mut(pp));
                    for (&(s, p), dn) in neg_locs.iter().zip(&dns) {
                        axpy(r_scale, dn, d_doc[s].row_mut(p));
                    }
                }
            }
        }
    }

    if let Some((g, _)) = grads.as_mut() {
        axpy(1.0, &d_head.data, &mut g.head.data);
        for (tr, dh) in traces.iter().zip(&d_hidden) {
            if dh.data.iter().any(|&v| v != 0.0) {
                backward(params, tr, dh, g)?;
            }
        }
        for ((_, tr), dh) in doc_traces.iter().zip(&d_doc) {
            if dh.data.iter().any(|&v| v != 0.0) {
                backward(params, tr, dh, g)?;
            }
        }
    }

    let l_g = if lm_count == 0 { 0.0 } else { lm_sum / lm_count as f64 };
    let triple_count = batch.triples.len();
    let l_r = if triple_count == 0 { 0.0 } else { lr_sum / triple_count as f64 };
    let g = if hyper.lambda_g == 0.0 { 0.0 } else { hyper.lambda_g * l_g };
    let r = if hyper.lambda_r == 0.0 { 0.0 } else { hyper.lambda_r * l_r };
    Ok(BatchLoss {
        l_g,
        l_r,
        l: g + r,
        lm_count,
        triple_count,
    })
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        params.restamp();
    }
}

/// Averages the gradients of `micro` batches into `grads` and returns the
/// mean losses.
pub fn accumulate(
    params: &ModelParams,
    dataset: &Dataset,
    micro: &[Batch],
    hyper: &HyperParams,
    variant: LossVariant,
    grads: &mut ModelParams,
) -> Result<(f64, f64, f64)> {
    let scale = 1.0 / micro.len() as f64;
    let (mut lg, mut lr, mut l) = (0.0, 0.0, 0.0);
    for b in micro {
        let out = batch_loss(params, dataset, b, hyper, variant, Some((grads, scale)))?;
        lg += out.l_g * scale;
        lr += out.l_r * scale;
        l += out.l * scale;
    }
    Ok((lg, lr, l))
}

fn check_fits(dataset: &Dataset, config: &ModelConfig) -> Result<()> {
    for ex in &dataset.examples {
        if ex.tokens.len() > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ex.tokens.len(),
                max: config.max_seq_len,
            });
        }
    }
    for d in &dataset.corpus {
        if d.tokens.len() + 1 > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: d.tokens.len() + 1,
                max: config.max_seq_len,
            });
        }
    }
    Ok(())
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainRun)> {
    let hyper = &config.hyper;
    hyper.validate()?;
    config.model.validate()?;
    if config.model.vocab_size != dataset.vocab.len() {
        return Err(Error::VocabSizeMismatch {
            found: config.model.vocab_size,
            expected: dataset.vocab.len(),
        });
    }
    let violations = dataset.validate();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    check_fits(dataset, &config.model)?;
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut params = init_params(&config.model)?;
    let mut adam = Adam::new(&params, hyper.learning_rate);
    let mut run = TrainRun {
        hyper: *hyper,
        seed: config.seed,
        loss_history: Vec::new(),
        checkpoints: Vec::new(),
    };
    let n = dataset.examples.len();
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut keyed_rng(config.seed, &format!("shuffle/{epoch}")));
        let chunks: Vec<&[usize]> = order.chunks(hyper.batch_size).collect();
        for group in chunks.chunks(hyper.grad_accum_steps) {
            let micro: Vec<Batch> = group
                .iter()
                .map(|c| {
                    make_batch(
                        dataset,
                        &BatchSpec {
                            examples: c.to_vec(),
                            epoch,
                            negatives_per_anchor: hyper.negatives_per_positive,
                            seed: config.seed,
                        },
                    )
                })
                .collect();
            let mut grads = params.zeros_like();
            let (l_g, l_r, l) = accumulate(&params, dataset, &micro, hyper, config.variant, &mut grads)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFiniteLoss { batch: step },
                    e => e,
                })?;
            if !(l_g.is_finite() && l_r.is_finite() && l.is_finite()) || !grads.all_finite() {
                return Err(Error::NonFiniteLoss { batch: step });
            }
            adam.step(&mut params, &grads);
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss { batch: step });
            }
            run.loss_history.push(LossRecord { step, l_g, l_r, l });
            step += 1;
            if let Some(dir) = &config.checkpoint_dir {
                if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                    let p = checkpoint_path(dir, step);
                    save_checkpoint(&params, &p)?;
                    run.checkpoints.push(p);
                }
            }
        }
    }
    Ok((params, run))
}

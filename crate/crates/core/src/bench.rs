//! Evaluation metrics and forward-token accounting for one-pass retrieval
//! versus query re-encoding architectures.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{embed_documents, RetrievalIndex};
use crate::inference::{Origin, RetrievalEvent, SpliceAction, Termination, Transcript, TranscriptToken, Mode};
use crate::model::{decode_step, forward_hidden, init_params, DecodeState, ModelConfig, ModelParams};
use crate::reconstruct::{Dataset, DocRef};
use crate::util::{keyed_rng, sha256_hex};
use crate::vocab::{Role, RQ};

// ---------------------------------------------------------------- metrics

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> Result<f64> {
    if gold.trim().is_empty() {
        return Err(Error::InvalidInput("empty gold answer".into()));
    }
    Ok(if normalize(prediction) == normalize(gold) { 1.0 } else { 0.0 })
}

pub fn token_f1(prediction: &str, gold: &str) -> Result<f64> {
    if gold.trim().is_empty() {
        return Err(Error::InvalidInput("empty gold answer".into()));
    }
    let p = normalize(prediction);
    let g = normalize(gold);
    let pt: Vec<&str> = p.split(' ').filter(|s| !s.is_empty()).collect();
    let gt: Vec<&str> = g.split(' ').collect();
    let mut remaining = gt.clone();
    let mut common = 0usize;
    for t in &pt {
        if let Some(i) = remaining.iter().position(|g| g == t) {
            remaining.swap_remove(i);
            common += 1;
        }
    }
    if common == 0 {
        return Ok(0.0);
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Fraction of events whose top-`k` ranked refs contain one of the gold refs.
pub fn recall_at_k(ranked: &[Vec<DocRef>], gold: &[Vec<DocRef>], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if ranked.len() != gold.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} retrieval events for {} gold entries",
            ranked.len(),
            gold.len()
        )));
    }
    if gold.is_empty() || gold.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("empty gold set".into()));
    }
    let hits = ranked
        .iter()
        .zip(gold)
        .filter(|(r, g)| r.iter().take(k).any(|x| g.contains(x)))
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::ShapeMismatch("predictions vs gold".into()));
    }
    if golds.is_empty() {
        return Err(Error::InvalidInput("empty gold set".into()));
    }
    Ok(preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / golds.len() as f64)
}

/// Text between `<FINAL-ANSWER>` and `</FINAL-ANSWER>`, if both are present.
pub fn final_answer(text: &str) -> Option<String> {
    let start = text.find("<FINAL-ANSWER>")? + "<FINAL-ANSWER>".len();
    let end = start + text[start..].find("</FINAL-ANSWER>")?;
    Some(text[start..end].trim().to_string())
}

/// Like [`recall_at_k`] but tolerant of missing or extra events: gold entry
/// `i` is scored against event `i` when it exists, and counts as a miss
/// otherwise.
pub fn aligned_recall_at_k(ranked: &[Vec<DocRef>], gold: &[Vec<DocRef>], k: usize) -> Result<f64> {
    let mut padded: Vec<Vec<DocRef>> = ranked.iter().take(gold.len()).cloned().collect();
    padded.resize(gold.len(), Vec::new());
    recall_at_k(&padded, gold, k)
}

/// Ranked refs of each retrieval event in a transcript.
pub fn event_rankings(events: &[RetrievalEvent]) -> Vec<Vec<DocRef>> {
    events
        .iter()
        .map(|e| e.hits.iter().map(|h| h.doc_ref.clone()).collect())
        .collect()
}

/// Teacher-forced Recall@k over every trainable anchor: the query is the
/// hidden state at the anchor's `[RQ]` in the gold sequence.
pub fn anchor_recall(params: &ModelParams, dataset: &Dataset, k: usize) -> Result<f64> {
    let index = embed_documents(params, &dataset.corpus)?;
    let mut ranked = Vec::new();
    let mut gold = Vec::new();
    for ex in &dataset.examples {
        if ex.trainable_anchors().next().is_none() {
            continue;
        }
        let hidden = forward_hidden(params, &ex.token_ids())?;
        for a in ex.trainable_anchors() {
            let r = index.query(hidden.row(a.position), k)?;
            ranked.push(r.hits.into_iter().map(|h| h.doc_ref).collect());
            gold.push(a.positive_doc_refs.clone());
        }
    }
    recall_at_k(&ranked, &gold, k)
}

// ------------------------------------------------------------- accounting

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub rounds: usize,
    pub query_len: usize,
    pub doc_len: usize,
    pub output_len: usize,
    pub retrievals_per_round: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::InvalidInput("rounds must be >= 1".into()));
        }
        Ok(())
    }

    fn retrievals(&self) -> usize {
        self.rounds * self.retrievals_per_round
    }

    /// Prefill, spliced and generated tokens shared by every method.
    pub fn base_tokens(&self) -> usize {
        self.rounds * (self.query_len + self.retrievals_per_round * self.doc_len + self.output_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    OnePass,
    Pipeline,
    TwoPass,
    LowerBound,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::OnePass, Method::Pipeline, Method::TwoPass, Method::LowerBound];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::OnePass => "ONE_PASS",
            Method::Pipeline => "PIPELINE",
            Method::TwoPass => "TWO_PASS",
            Method::LowerBound => "LOWER_BOUND",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub main_model_forward_tokens: usize,
    /// Tokens spent producing query embeddings, on whichever model.
    pub extra_query_forward_tokens: usize,
    pub secondary_model_forward_tokens: usize,
    pub wall_clock_seconds: Option<f64>,
}

pub const COST_CSV_HEADER: &str =
    "method,main_model_forward_tokens,extra_query_forward_tokens,secondary_model_forward_tokens,wall_clock_seconds";

impl CostReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method.as_str(),
            self.main_model_forward_tokens,
            self.extra_query_forward_tokens,
            self.secondary_model_forward_tokens,
            self.wall_clock_seconds.map(|s| s.to_string()).unwrap_or_default()
        )
    }
}

pub fn costs_csv(reports: &[CostReport]) -> String {
    let mut s = format!("{COST_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Closed-form token counts.
pub fn count_costs(s: &Scenario, method: Method) -> CostReport {
    let base = s.base_tokens();
    let r = s.retrievals();
    let (main, extra, secondary) = match method {
        Method::OnePass => (base + r, r, 0),
        Method::TwoPass => (base + r * s.query_len, r * s.query_len, 0),
        Method::Pipeline => (base, r * s.query_len, r * s.query_len),
        Method::LowerBound => (base, 0, 0),
    };
    CostReport {
        method,
        main_model_forward_tokens: main,
        extra_query_forward_tokens: extra,
        secondary_model_forward_tokens: secondary,
        wall_clock_seconds: None,
    }
}

/// Fixed random token streams for one scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub rounds: Vec<Round>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Round {
    pub query: Vec<usize>,
    pub docs: Vec<Vec<usize>>,
    pub output: Vec<usize>,
}

/// Token ids below this are reserved specials and never drawn.
const FIRST_PLAIN_ID: usize = 11;

impl Workload {
    pub fn generate(s: &Scenario, vocab_size: usize, seed: u64) -> Result<Self> {
        s.validate()?;
        if vocab_size <= FIRST_PLAIN_ID {
            return Err(Error::InvalidConfig("bench vocabulary has no plain tokens".into()));
        }
        let mut rng = keyed_rng(seed, "workload");
        let mut draw = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(FIRST_PLAIN_ID..vocab_size)).collect() };
        let rounds = (0..s.rounds)
            .map(|_| Round {
                query: draw(s.query_len),
                docs: (0..s.retrievals_per_round).map(|_| draw(s.doc_len)).collect(),
                output: draw(s.output_len),
            })
            .collect();
        Ok(Workload { rounds })
    }

    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for r in &self.rounds {
            for t in r.query.iter().chain(r.docs.iter().flatten()).chain(&r.output) {
                bytes.extend_from_slice(&(*t as u64).to_le_bytes());
            }
            bytes.push(0xff);
        }
        sha256_hex(&bytes)
    }
}

/// Models and index used by executed runs.
pub struct BenchModels {
    pub main: ModelParams,
    pub secondary: ModelParams,
    pub index: RetrievalIndex,
}

impl BenchModels {
    /// Random-weight models. The secondary defaults to half the main
    /// model's layers (at least one).
    pub fn random(config: &ModelConfig, secondary_layers: Option<usize>, index_docs: usize) -> Result<Self> {
        let main = init_params(config)?;
        let mut sc = *config;
        sc.n_layers = secondary_layers.unwrap_or(config.n_layers / 2).max(1);
        sc.seed = config.seed.wrapping_add(1);
        let secondary = init_params(&sc)?;
        let mut rng = keyed_rng(config.seed, "index-docs");
        let docs: Vec<crate::reconstruct::Document> = (0..index_docs.max(1))
            .map(|i| {
                let mut tokens: Vec<usize> = (0..8).map(|_| rng.gen_range(FIRST_PLAIN_ID..config.vocab_size)).collect();
                tokens.push(crate::vocab::RD);
                crate::reconstruct::Document {
                    doc_id: format!("bench-{i}"),
                    rd_positions: vec![tokens.len() - 1],
                    tokens,
                    granularity: crate::reconstruct::Granularity::PerDoc,
                    sentences: vec![String::new()],
                }
            })
            .collect();
        let index = embed_documents(&main, &docs)?;
        Ok(Self { main, secondary, index })
    }
}

/// Runs the method's forward pattern over the workload, counting with the
/// decoder's own counters. The transcript covers the main session only.
pub fn execute(s: &Scenario, method: Method, models: &BenchModels, w: &Workload) -> Result<(CostReport, Transcript)> {
    let main = &models.main;
    let needed = count_costs(s, method).main_model_forward_tokens
        - if method == Method::TwoPass { s.retrievals() * s.query_len } else { 0 };
    if needed > main.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: needed,
            max: main.config.max_seq_len,
        });
    }
    let mut st = DecodeState::new(main);
    let mut tokens = Vec::new();
    let mut events = Vec::new();
    let mut reencoded = 0;
    let mut secondary = 0;
    let mut generated = 0;
    let feed = |st: &mut DecodeState, tokens: &mut Vec<TranscriptToken>, id, role, origin| -> Result<Vec<f64>> {
        tokens.push(TranscriptToken { id, role, origin });
        Ok(decode_step(main, st, id)?.0)
    };
    for round in &w.rounds {
        let mut last = Vec::new();
        for &t in &round.query {
            last = feed(&mut st, &mut tokens, t, Role::Ctx, Origin::Prompt)?;
        }
        for doc in &round.docs {
            let query = match method {
                Method::OnePass => {
                    let h = feed(&mut st, &mut tokens, RQ, Role::Ret, Origin::Generated)?;
                    generated += 1;
                    Some(h)
                }
                Method::TwoPass | Method::Pipeline => {
                    let model = if method == Method::TwoPass { main } else { &models.secondary };
                    let mut side = DecodeState::new(model);
                    let mut h = Vec::new();
                    for &t in &round.query {
                        h = decode_step(model, &mut side, t)?.0;
                    }
                    if method == Method::TwoPass {
                        reencoded += side.forward_tokens();
                    } else {
                        secondary += side.forward_tokens();
                    }
                    (!h.is_empty()).then_some(h)
                }
                Method::LowerBound => None,
            };
            if let Some(q) = query.filter(|_| method == Method::OnePass || !last.is_empty()) {
                if q.len() == models.index.dim() && q.iter().any(|v| *v != 0.0) {
                    let hits = models.index.query(&q, 1)?.hits;
                    if method == Method::OnePass {
                        events.push(RetrievalEvent {
                            step: generated - 1,
                            position: tokens.len() - 1,
                            query: q,
                            action: SpliceAction::Splice {
                                doc: hits[0].doc_ref.clone(),
                                tokens: doc.len(),
                            },
                            hits,
                            overflow: false,
                        });
                    }
                }
            }
            for &t in doc {
                last = feed(&mut st, &mut tokens, t, Role::Ctx, Origin::Spliced)?;
            }
        }
        for &t in &round.output {
            last = feed(&mut st, &mut tokens, t, Role::Gen, Origin::Generated)?;
            generated += 1;
        }
        let _ = last;
    }
    let forward = st.forward_tokens();
    let report = CostReport {
        method,
        main_model_forward_tokens: forward + reencoded,
        extra_query_forward_tokens: match method {
            Method::OnePass => events.len(),
            Method::TwoPass => reencoded,
            Method::Pipeline => secondary,
            Method::LowerBound => 0,
        },
        secondary_model_forward_tokens: secondary,
        wall_clock_seconds: None,
    };
    let transcript = Transcript {
        mode: Mode::Rag,
        tokens,
        events,
        forward_token_count: forward,
        terminated_by: Termination::MaxLen,
    };
    Ok((report, transcript))
}

/// Median wall-clock over `repeats` executions after `warmup` discarded ones.
pub fn run_timed(
    s: &Scenario,
    method: Method,
    models: &BenchModels,
    w: &Workload,
    warmup: usize,
    repeats: usize,
) -> Result<CostReport> {
    let repeats = repeats.max(5);
    for _ in 0..warmup {
        execute(s, method, models, w)?;
    }
    let mut times = Vec::with_capacity(repeats);
    let mut report = None;
    for _ in 0..repeats {
        let t0 = Instant::now();
        let (r, _) = execute(s, method, models, w)?;
        times.push(t0.elapsed().as_secs_f64());
        report = Some(r);
    }
    times.sort_by(f64::total_cmp);
    let mut r = report.unwrap();
    r.wall_clock_seconds = Some(times[times.len() / 2]);
    Ok(r)
}

/// One `(method, x, y)` row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: Method,
    pub x: f64,
    pub y: f64,
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("method,x,y\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.method.as_str(), p.x, p.y);
    }
    s
}

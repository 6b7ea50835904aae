//! Greedy decoding with in-line retrieval: retrieval-then-generation
//! (splice the top document after each `[RQ]`) and generation-then-retrieval
//! (record the entity after each `[RQ]` and continue with `<CON>`).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::index::{Hit, RetrievalIndex};
use crate::model::{decode_step, DecodeState, ModelParams};
use crate::reconstruct::{DocRef, Document};
use crate::vocab::{Role, Vocabulary, BOS, CON, EOS, PARAGRAPH_CLOSE, PARAGRAPH_OPEN, RQ};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Limits {
    pub max_new_tokens: usize,
    pub top_k: usize,
    pub terminators: Vec<usize>,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            top_k: 1,
            terminators: vec![EOS],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Rag,
    El,
    Plain,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rag => "rag",
            Mode::El => "el",
            Mode::Plain => "plain",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rag" => Ok(Mode::Rag),
            "el" => Ok(Mode::El),
            "plain" => Ok(Mode::Plain),
            _ => Err(Error::InvalidInput(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Prompt,
    Generated,
    Spliced,
}

impl Origin {
    fn as_str(self) -> &'static str {
        match self {
            Origin::Prompt => "prompt",
            Origin::Generated => "gen",
            Origin::Spliced => "splice",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranscriptToken {
    pub id: usize,
    pub role: Role,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpliceAction {
    /// Document spliced as `<paragraph> … </paragraph>`, with its token count.
    Splice { doc: DocRef, tokens: usize },
    /// `<CON>` forced after an entity lookup.
    ForceCon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalEvent {
    /// Number of tokens generated before this `[RQ]`.
    pub step: usize,
    /// Position of the `[RQ]` in the full token sequence.
    pub position: usize,
    pub query: Vec<f64>,
    pub hits: Vec<Hit>,
    pub action: SpliceAction,
    /// The splice did not fit in the context window.
    pub overflow: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Terminator,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub mode: Mode,
    pub tokens: Vec<TranscriptToken>,
    pub events: Vec<RetrievalEvent>,
    pub forward_token_count: usize,
    pub terminated_by: Termination,
}

impl Transcript {
    pub fn prompt_len(&self) -> usize {
        self.count(Origin::Prompt)
    }

    pub fn generated(&self) -> usize {
        self.count(Origin::Generated)
    }

    pub fn spliced(&self) -> usize {
        self.count(Origin::Spliced)
    }

    fn count(&self, o: Origin) -> usize {
        self.tokens.iter().filter(|t| t.origin == o).count()
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    /// Tokens after the prompt, including spliced ones.
    pub fn output_ids(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .filter(|t| t.origin != Origin::Prompt)
            .map(|t| t.id)
            .collect()
    }

    pub fn to_text(&self, vocab: &Vocabulary) -> Result<String> {
        let mut s = String::from("retgen-transcript v1\n");
        let _ = writeln!(s, "mode {}", self.mode.as_str());
        for (i, t) in self.tokens.iter().enumerate() {
            let surface = vocab.token(t.id).ok_or(Error::InvalidTokenId(t.id, vocab.len()))?;
            let _ = writeln!(s, "token {i} {} {} {} {surface}", t.id, t.role.as_str(), t.origin.as_str());
        }
        for e in &self.events {
            let action = match &e.action {
                SpliceAction::Splice { doc, tokens } => format!("splice {doc} {tokens}"),
                SpliceAction::ForceCon => "con - 0".to_string(),
            };
            let query: Vec<String> = e.query.iter().map(|v| v.to_string()).collect();
            let hits: Vec<String> = e
                .hits
                .iter()
                .map(|h| format!("{}@{}:{}", h.doc_ref, h.row, h.score))
                .collect();
            let _ = writeln!(
                s,
                "event {} {} {action} {} query={} hits={}",
                e.step,
                e.position,
                e.overflow,
                query.join(","),
                hits.join(",")
            );
        }
        let _ = writeln!(s, "forward_token_count {}", self.forward_token_count);
        let _ = writeln!(
            s,
            "terminated_by {}",
            match self.terminated_by {
                Termination::Terminator => "TERMINATOR",
                Termination::MaxLen => "MAX_LEN",
            }
        );
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: &str| Error::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        match lines.next() {
            Some((_, "retgen-transcript v1")) => {}
            Some((_, l)) if l.starts_with("retgen-transcript") => {
                return Err(Error::VersionMismatch {
                    what: "transcript",
                    found: l.rsplit('v').next().and_then(|v| v.parse().ok()).unwrap_or(0),
                    expected: 1,
                })
            }
            _ => return Err(bad(0, "missing transcript header")),
        }
        let mut mode = None;
        let mut tokens = Vec::new();
        let mut events = Vec::new();
        let mut forward_token_count = None;
        let mut terminated_by = None;
        for (n, line) in lines {
            let f: Vec<&str> = line.split(' ').collect();
            let num = |i: usize| -> Result<usize> {
                f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(n, "bad number"))
            };
            match f[0] {
                "mode" => mode = Some(f.get(1).ok_or_else(|| bad(n, "missing mode"))?.parse()?),
                "token" => {
                    if f.len() < 6 || num(1)? != tokens.len() {
                        return Err(bad(n, "bad token line"));
                    }
                    let role = Role::parse(f[3]).ok_or_else(|| bad(n, "bad role"))?;
                    let origin = match f[4] {
                        "prompt" => Origin::Prompt,
                        "gen" => Origin::Generated,
                        "splice" => Origin::Spliced,
                        _ => return Err(bad(n, "bad origin")),
                    };
                    tokens.push(TranscriptToken {
                        id: num(2)?,
                        role,
                        origin,
                    });
                }
                "event" => {
                    if f.len() != 9 {
                        return Err(bad(n, "bad event line"));
                    }
                    let action = match f[3] {
                        "splice" => SpliceAction::Splice {
                            doc: f[4].parse()?,
                            tokens: num(5)?,
                        },
                        "con" => SpliceAction::ForceCon,
                        _ => return Err(bad(n, "bad action")),
                    };
                    let overflow = f[6].parse().map_err(|_| bad(n, "bad overflow flag"))?;
                    let query = f[7]
                        .strip_prefix("query=")
                        .ok_or_else(|| bad(n, "missing query"))?
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|v| v.parse::<f64>().map_err(|_| bad(n, "bad query value")))
                        .collect::<Result<Vec<_>>>()?;
                    let hits = f[8]
                        .strip_prefix("hits=")
                        .ok_or_else(|| bad(n, "missing hits"))?
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|h| {
                            let (r, rest) = h.split_once('@').ok_or_else(|| bad(n, "bad hit"))?;
                            let (row, score) = rest.split_once(':').ok_or_else(|| bad(n, "bad hit"))?;
                            Ok(Hit {
                                doc_ref: r.parse()?,
                                row: row.parse().map_err(|_| bad(n, "bad hit row"))?,
                                score: score.parse().map_err(|_| bad(n, "bad hit score"))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    events.push(RetrievalEvent {
                        step: num(1)?,
                        position: num(2)?,
                        query,
                        hits,
                        action,
                        overflow,
                    });
                }
                "forward_token_count" => forward_token_count = Some(num(1)?),
                "terminated_by" => {
                    terminated_by = Some(match f.get(1) {
                        Some(&"TERMINATOR") => Termination::Terminator,
                        Some(&"MAX_LEN") => Termination::MaxLen,
                        _ => return Err(bad(n, "bad termination")),
                    })
                }
                "" => {}
                _ => return Err(bad(n, "unknown line")),
            }
        }
        Ok(Transcript {
            mode: mode.ok_or_else(|| bad(0, "missing mode"))?,
            tokens,
            events,
            forward_token_count: forward_token_count.ok_or_else(|| bad(0, "missing forward_token_count"))?,
            terminated_by: terminated_by.ok_or_else(|| bad(0, "missing terminated_by"))?,
        })
    }
}

/// Linked output of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElResult {
    /// Generated text with `<LOC>` spans, without retrieval markers.
    pub annotated_text: String,
    /// Retrieved entity document per emitted `[RQ]`, in order.
    pub entity_list: Vec<String>,
}

/// Encodes a prompt, prepending `<s>` when the text does not start with it.
pub fn prompt_ids(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    let mut ids = vocab.encode(text)?;
    if ids.first() != Some(&BOS) {
        ids.insert(0, BOS);
    }
    Ok(ids)
}

/// Mention surfaces inside `<LOC>…</LOC>` spans of an annotated string.
pub fn parse_spans(annotated: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = annotated;
    while let Some(i) = rest.find("<LOC>") {
        let after = &rest[i + 5..];
        match after.find("</LOC>") {
            Some(j) => {
                out.push(after[..j].to_string());
                rest = &after[j + 6..];
            }
            None => break,
        }
    }
    out
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Session<'a> {
    params: &'a ModelParams,
    state: DecodeState,
    tokens: Vec<TranscriptToken>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl<'a> Session<'a> {
    fn fits(&self, extra: usize) -> bool {
        self.state.len() + extra <= self.params.config.max_seq_len
    }

    fn feed(&mut self, id: usize, role: Role, origin: Origin) -> Result<()> {
        let (h, l) = decode_step(self.params, &mut self.state, id)?;
        self.hidden = h;
        self.logits = l;
        self.tokens.push(TranscriptToken { id, role, origin });
        Ok(())
    }
}

fn run(
    params: &ModelParams,
    index: Option<&RetrievalIndex>,
    corpus: &[Document],
    prompt: &[usize],
    limits: &Limits,
    mode: Mode,
) -> Result<Transcript> {
    if prompt.is_empty() {
        return Err(Error::InvalidInput("empty prompt".into()));
    }
    if prompt.len() > params.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: prompt.len(),
            max: params.config.max_seq_len,
        });
    }
    if mode != Mode::Plain && index.map(|i| i.is_empty()).unwrap_or(true) {
        return Err(Error::EmptyIndex);
    }
    let docs: HashMap<&str, &Document> = corpus.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut s = Session {
        params,
        state: DecodeState::new(params),
        tokens: Vec::new(),
        hidden: Vec::new(),
        logits: Vec::new(),
    };
    for &t in prompt {
        s.feed(t, Role::Ctx, Origin::Prompt)?;
    }
    let mut events = Vec::new();
    let mut generated = 0;
    let terminated_by = loop {
        let next = argmax(&s.logits);
        if limits.terminators.contains(&next) {
            break Termination::Terminator;
        }
        if generated == limits.max_new_tokens || !s.fits(1) {
            break Termination::MaxLen;
        }
        let retrieves = next == RQ && mode != Mode::Plain;
        s.feed(next, if retrieves { Role::Ret } else { Role::Gen }, Origin::Generated)?;
        generated += 1;
        if !retrieves {
            continue;
        }
        let query = s.hidden.clone();
        let hits = index.unwrap().query(&query, limits.top_k.max(1))?.hits;
        let position = s.state.len() - 1;
        let step = generated - 1;
        match mode {
            Mode::Rag => {
                let top = &hits[0].doc_ref;
                let doc = docs
                    .get(top.doc_id.as_str())
                    .ok_or_else(|| Error::UnknownDocument(top.doc_id.clone()))?;
                let mut splice = vec![PARAGRAPH_OPEN];
                splice.extend(doc.text_tokens());
                splice.push(PARAGRAPH_CLOSE);
                let overflow = !s.fits(splice.len());
                events.push(RetrievalEvent {
                    step,
                    position,
                    query,
                    action: SpliceAction::Splice {
                        doc: top.clone(),
                        tokens: splice.len(),
                    },
                    hits,
                    overflow,
                });
                if overflow {
                    break Termination::MaxLen;
                }
                for t in splice {
                    s.feed(t, Role::Ctx, Origin::Spliced)?;
                }
            }
            Mode::El => {
                let overflow = !s.fits(1);
                events.push(RetrievalEvent {
                    step,
                    position,
                    query,
                    hits,
                    action: SpliceAction::ForceCon,
                    overflow,
                });
                if overflow {
                    break Termination::MaxLen;
                }
                s.feed(CON, Role::Gen, Origin::Spliced)?;
            }
            Mode::Plain => unreachable!(),
        }
    };
    let t = Transcript {
        mode,
        forward_token_count: s.state.forward_tokens(),
        tokens: s.tokens,
        events,
        terminated_by,
    };
    debug_assert_eq!(t.forward_token_count, t.prompt_len() + t.generated() + t.spliced());
    Ok(t)
}

/// Retrieval-then-generation: each generated `[RQ]` splices its top-1
/// document from `corpus` into the context.
pub fn generate_rag(
    params: &ModelParams,
    index: &RetrievalIndex,
    corpus: &[Document],
    prompt: &[usize],
    limits: &Limits,
) -> Result<Transcript> {
    run(params, Some(index), corpus, prompt, limits, Mode::Rag)
}

/// Generation-then-retrieval: each generated `[RQ]` looks up an entity and
/// decoding continues from a forced `<CON>`.
pub fn generate_el(
    params: &ModelParams,
    index: &RetrievalIndex,
    vocab: &Vocabulary,
    prompt: &[usize],
    limits: &Limits,
) -> Result<(ElResult, Transcript)> {
    let t = run(params, Some(index), &[], prompt, limits, Mode::El)?;
    let entity_list = t.events.iter().map(|e| e.hits[0].doc_ref.doc_id.clone()).collect();
    let visible: Vec<usize> = t
        .output_ids()
        .into_iter()
        .filter(|&id| id != RQ && id != CON && !limits.terminators.contains(&id))
        .collect();
    let annotated_text = vocab.decode(&visible)?;
    Ok((
        ElResult {
            annotated_text,
            entity_list,
        },
        t,
    ))
}

/// Plain greedy decoding; `[RQ]` gets no special treatment.
pub fn generate_plain(params: &ModelParams, prompt: &[usize], limits: &Limits) -> Result<Transcript> {
    run(params, None, &[], prompt, limits, Mode::Plain)
}

//! Turns raw task records into role-tagged training examples and
//! `[RD]`-anchored corpus documents.

mod document;
mod negatives;
mod templates;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use document::{reconstruct_document, split_sentences, Document, Granularity};
pub use negatives::{default_window, lexical_embedding, rank_by_cosine, sample_negatives};
pub use templates::{
    build_dataset, build_vocabulary, default_granularity, el_output_text, parse_jsonl,
    BuildOptions, CorpusRecord, ElRecord, HopRecord, InputRecords, MentionRecord,
    MultiHopRecord, RagSingleRecord, Reconstructor, FINAL_CLOSE, FINAL_OPEN, LEXICAL_DIM,
    TEMPLATE_SPECIALS,
};

use crate::error::{Error, Result};
use crate::vocab::{
    check_tagged, tag_sequence, Role, TaggedToken, Vocabulary, CON, LOC_CLOSE, LOC_OPEN, RD, RQ,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Template {
    RagSingle,
    RagMulti,
    El,
}

impl Template {
    pub fn as_str(self) -> &'static str {
        match self {
            Template::RagSingle => "RAG_SINGLE",
            Template::RagMulti => "RAG_MULTI",
            Template::El => "EL",
        }
    }
}

impl std::str::FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "RAG_SINGLE" => Ok(Template::RagSingle),
            "RAG_MULTI" => Ok(Template::RagMulti),
            "EL" => Ok(Template::El),
            _ => Err(Error::InvalidInput(format!("unknown template `{s}`"))),
        }
    }
}

/// One `[RD]` of one document: the `rd_index`-th anchor of `doc_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocRef {
    pub doc_id: String,
    pub rd_index: usize,
}

impl DocRef {
    pub fn new(doc_id: impl Into<String>, rd_index: usize) -> Self {
        Self {
            doc_id: doc_id.into(),
            rd_index,
        }
    }
}

impl fmt::Display for DocRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.rd_index)
    }
}

impl std::str::FromStr for DocRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad doc ref `{s}`"));
        let (id, k) = s.rsplit_once('#').ok_or_else(bad)?;
        Ok(DocRef::new(id, k.parse().map_err(|_| bad())?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalAnchor {
    /// Index of the `[RQ]` token in the example.
    pub position: usize,
    pub positive_doc_refs: Vec<DocRef>,
    pub negative_doc_refs: Vec<DocRef>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub tokens: Vec<TaggedToken>,
    pub anchors: Vec<RetrievalAnchor>,
    pub template: Template,
    pub source_id: String,
}

impl TrainingExample {
    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }

    pub fn trainable_anchors(&self) -> impl Iterator<Item = &RetrievalAnchor> {
        self.anchors.iter().filter(|a| a.trainable)
    }

    /// Number of positions carrying a generative label.
    pub fn target_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.lm_target.is_some()).count()
    }

    /// Structural checks that need no corpus.
    pub fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        let id = &self.source_id;
        if let Err(e) = check_tagged(&self.tokens) {
            out.push(format!("{id}: {e}"));
        }
        let toks = &self.tokens;
        if toks.iter().any(|t| t.token_id == RD) {
            out.push(format!("{id}: [RD] inside a training sequence"));
        }
        let rq: Vec<usize> = (0..toks.len()).filter(|&i| toks[i].token_id == RQ).collect();
        let anchored: Vec<usize> = self.anchors.iter().map(|a| a.position).collect();
        if rq != anchored {
            out.push(format!(
                "{id}: [RQ] positions {rq:?} disagree with anchor positions {anchored:?}"
            ));
        }
        for a in &self.anchors {
            if a.trainable && (a.positive_doc_refs.is_empty() || a.negative_doc_refs.is_empty()) {
                out.push(format!("{id}: trainable anchor at {} lacks positives or negatives", a.position));
            }
            if a.positive_doc_refs.iter().any(|p| a.negative_doc_refs.contains(p)) {
                out.push(format!("{id}: anchor at {} lists a ref as both positive and negative", a.position));
            }
        }
        for &i in &rq {
            let next = toks.get(i + 1);
            let next_is_con = next.map(|t| t.token_id == CON).unwrap_or(false);
            let next_is_gen = next.map(|t| t.role == Role::Gen).unwrap_or(false);
            if next_is_con != next_is_gen {
                out.push(format!("{id}: <CON> rule broken after [RQ] at {i}"));
            }
        }
        for (i, t) in toks.iter().enumerate() {
            if t.token_id == CON && (i == 0 || toks[i - 1].token_id != RQ) {
                out.push(format!("{id}: <CON> at {i} does not follow [RQ]"));
            }
        }
        if self.template == Template::El {
            let mut open = false;
            for (i, t) in toks.iter().enumerate() {
                match t.token_id {
                    LOC_OPEN if open => out.push(format!("{id}: nested <LOC> at {i}")),
                    LOC_OPEN => open = true,
                    LOC_CLOSE if !open => out.push(format!("{id}: stray </LOC> at {i}")),
                    LOC_CLOSE => {
                        open = false;
                        let ok = toks.get(i + 1).map(|t| t.token_id) == Some(RQ)
                            && toks.get(i + 2).map(|t| t.token_id) == Some(CON);
                        if !ok {
                            out.push(format!("{id}: </LOC> at {i} not followed by [RQ] <CON>"));
                        }
                    }
                    _ => {}
                }
            }
            if open {
                out.push(format!("{id}: unclosed <LOC>"));
            }
        }
        out
    }
}

/// Examples plus the corpus they retrieve from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub corpus: Vec<Document>,
    pub examples: Vec<TrainingExample>,
}

const DATASET_FORMAT: &str = "retgen-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    vocab: String,
    corpus: Vec<Document>,
    examples: Vec<TrainingExample>,
}

impl Dataset {
    pub fn doc_index(&self) -> HashMap<&str, usize> {
        self.corpus
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.as_str(), i))
            .collect()
    }

    /// Every `[RD]` in corpus order.
    pub fn all_refs(&self) -> Vec<DocRef> {
        self.corpus
            .iter()
            .flat_map(|d| (0..d.rd_positions.len()).map(move |k| DocRef::new(d.doc_id.clone(), k)))
            .collect()
    }

    /// All invariant violations; empty when the dataset is well formed.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for d in &self.corpus {
            if index.insert(d.doc_id.as_str(), d).is_some() {
                out.push(format!("duplicate document `{}`", d.doc_id));
            }
            if let Err(e) = d.check() {
                out.push(e);
            }
            if let Some(&t) = d.tokens.iter().find(|&&t| t >= self.vocab.len()) {
                out.push(format!("{}: token id {t} outside vocabulary", d.doc_id));
            }
        }
        for ex in &self.examples {
            out.extend(ex.check());
            if let Some(t) = ex.tokens.iter().find(|t| t.token_id >= self.vocab.len()) {
                out.push(format!("{}: token id {} outside vocabulary", ex.source_id, t.token_id));
            }
            for a in &ex.anchors {
                for r in a.positive_doc_refs.iter().chain(&a.negative_doc_refs) {
                    let ok = index
                        .get(r.doc_id.as_str())
                        .map(|d| r.rd_index < d.rd_positions.len())
                        .unwrap_or(false);
                    if !ok {
                        out.push(format!("{}: unresolved ref {r}", ex.source_id));
                    }
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            vocab: self.vocab.to_text(),
            corpus: self.corpus.clone(),
            examples: self.examples.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: DatasetFile = serde_json::from_str(text)?;
        if f.format != DATASET_FORMAT {
            return Err(Error::BadFormat { what: "dataset" });
        }
        if f.version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                what: "dataset",
                found: f.version,
                expected: DATASET_VERSION,
            });
        }
        let ds = Dataset {
            vocab: Vocabulary::from_text(&f.vocab)?,
            corpus: f.corpus,
            examples: f.examples,
        };
        let v = ds.validate();
        if !v.is_empty() {
            return Err(Error::Validation(v));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Renders an example as text: a header line, one `ROLE<TAB>text` line per
/// run of equal roles, then one line per anchor.
pub fn render_example(vocab: &Vocabulary, ex: &TrainingExample) -> Result<String> {
    let mut out = format!("EXAMPLE\t{}\t{}\n", ex.template.as_str(), ex.source_id);
    let mut i = 0;
    while i < ex.tokens.len() {
        let role = ex.tokens[i].role;
        let mut j = i;
        while j < ex.tokens.len() && ex.tokens[j].role == role {
            j += 1;
        }
        let ids: Vec<usize> = ex.tokens[i..j].iter().map(|t| t.token_id).collect();
        out.push_str(&format!("{}\t{}\n", role.as_str(), vocab.decode(&ids)?));
        i = j;
    }
    let refs = |v: &[DocRef]| v.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ");
    for a in &ex.anchors {
        out.push_str(&format!(
            "ANCHOR\t{}\t{}\t{}\t{}\n",
            a.position,
            if a.trainable { "trainable" } else { "frozen" },
            refs(&a.positive_doc_refs),
            refs(&a.negative_doc_refs)
        ));
    }
    Ok(out)
}

/// Inverse of [`render_example`]; the result is checked against the
/// example invariants.
pub fn parse_example(vocab: &Vocabulary, text: &str) -> Result<TrainingExample> {
    let bad = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty example"))?;
    let h: Vec<&str> = header.splitn(3, '\t').collect();
    if h.len() != 3 || h[0] != "EXAMPLE" {
        return Err(bad(1, "expected EXAMPLE header"));
    }
    let template: Template = h[1].parse()?;
    let mut seq = Vec::new();
    let mut anchors = Vec::new();
    for (n, line) in lines {
        let (tag, rest) = line.split_once('\t').ok_or_else(|| bad(n + 1, "missing tab"))?;
        if tag == "ANCHOR" {
            let f: Vec<&str> = rest.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(n + 1, "anchor needs four fields"));
            }
            let refs = |s: &str| -> Result<Vec<DocRef>> {
                s.split_whitespace().map(str::parse).collect()
            };
            anchors.push(RetrievalAnchor {
                position: f[0].parse().map_err(|_| bad(n + 1, "bad anchor position"))?,
                trainable: match f[1] {
                    "trainable" => true,
                    "frozen" => false,
                    _ => return Err(bad(n + 1, "bad anchor flag")),
                },
                positive_doc_refs: refs(f[2])?,
                negative_doc_refs: refs(f[3])?,
            });
        } else {
            let role = Role::parse(tag).ok_or_else(|| bad(n + 1, "unknown role"))?;
            seq.extend(vocab.encode(rest)?.into_iter().map(|id| (id, role)));
        }
    }
    let ex = TrainingExample {
        tokens: tag_sequence(&seq),
        anchors,
        template,
        source_id: h[2].to_string(),
    };
    let v = ex.check();
    if !v.is_empty() {
        return Err(Error::Validation(v));
    }
    Ok(ex)
}

#[cfg(test)]
mod tests;

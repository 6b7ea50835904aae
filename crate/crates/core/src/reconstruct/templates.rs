use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::document::{reconstruct_document, Document, Granularity};
use super::negatives::{default_window, lexical_embedding, rank_by_cosine, sample_negatives};
use super::{Dataset, DocRef, RetrievalAnchor, Template, TrainingExample};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::util::keyed_rng;
use crate::vocab::{
    tag_sequence, Role, Vocabulary, BOS, EOS, PARAGRAPH_CLOSE, PARAGRAPH_OPEN, RQ,
};

pub const FINAL_OPEN: &str = "<FINAL-ANSWER>";
pub const FINAL_CLOSE: &str = "</FINAL-ANSWER>";

/// Extra specials registered by every dataset. Reflection markers are inert:
/// they tokenize but no template emits them.
pub const TEMPLATE_SPECIALS: [&str; 10] = [
    FINAL_OPEN,
    FINAL_CLOSE,
    "[Retrieval]",
    "[Relevant]",
    "[Irrelevant]",
    "[Utility:1]",
    "[Utility:2]",
    "[Utility:3]",
    "[Utility:4]",
    "[Utility:5]",
];

pub const LEXICAL_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub sub_question: String,
    pub doc_id: String,
    pub sub_answer: String,
    /// String whose presence marks a positive segment; defaults to `sub_answer`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHopRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub hops: Vec<HopRecord>,
    pub final_answer: String,
    /// Candidate documents that are not referenced by any hop.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub distractors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionRecord {
    /// Byte offsets into the sentence, end exclusive.
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_id: Option<String>,
    /// Entity documents to use as negatives for this mention.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub sentence: String,
    pub mentions: Vec<MentionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagSingleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub instruction: String,
    pub retrieve: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    pub answer: String,
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputRecords {
    Multi(Vec<MultiHopRecord>),
    El(Vec<ElRecord>),
    Single(Vec<RagSingleRecord>),
}

impl InputRecords {
    pub fn template(&self) -> Template {
        match self {
            InputRecords::Multi(_) => Template::RagMulti,
            InputRecords::El(_) => Template::El,
            InputRecords::Single(_) => Template::RagSingle,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            InputRecords::Multi(r) => r.len(),
            InputRecords::El(r) => r.len(),
            InputRecords::Single(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses JSONL for `template`, reporting the 1-based line of any bad record.
    pub fn parse_jsonl(template: Template, text: &str) -> Result<Self> {
        Ok(match template {
            Template::RagMulti => InputRecords::Multi(parse_jsonl(text)?),
            Template::El => InputRecords::El(parse_jsonl(text)?),
            Template::RagSingle => InputRecords::Single(parse_jsonl(text)?),
        })
    }
}

pub fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Knobs for building a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    pub seed: u64,
    /// Overrides the per-template default granularity.
    pub granularity: Option<Granularity>,
    /// Negatives drawn per single-hop anchor (capped by the window).
    pub negatives_per_anchor: usize,
    /// 1-based rank window; defaults to [`default_window`].
    pub window: Option<(usize, usize)>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            granularity: None,
            negatives_per_anchor: 3,
            window: None,
        }
    }
}

pub fn default_granularity(template: Template) -> Granularity {
    match template {
        Template::RagMulti => Granularity::PerSentence,
        Template::El | Template::RagSingle => Granularity::PerDoc,
    }
}

fn check_mentions(sentence: &str, mentions: &[MentionRecord]) -> Result<()> {
    let mut prev_end = 0;
    for m in mentions {
        if m.start >= m.end
            || m.end > sentence.len()
            || !sentence.is_char_boundary(m.start)
            || !sentence.is_char_boundary(m.end)
        {
            return Err(Error::SpanOutOfBounds(m.start, m.end, sentence.len()));
        }
        if m.start < prev_end {
            return Err(Error::OverlappingSpans(m.start, m.end));
        }
        if sentence[m.start..m.end].trim().is_empty() {
            return Err(Error::InvalidInput(format!(
                "mention {}..{} is blank",
                m.start, m.end
            )));
        }
        prev_end = m.end;
    }
    Ok(())
}

/// Surface form of the linked output for one sentence, e.g.
/// `<LOC>Steve Jobs</LOC> [RQ] <CON> founded …`.
pub fn el_output_text(sentence: &str, mentions: &[MentionRecord]) -> Result<String> {
    check_mentions(sentence, mentions)?;
    let mut parts: Vec<String> = Vec::new();
    let mut cursor = 0;
    for m in mentions {
        let before = sentence[cursor..m.start].trim();
        if !before.is_empty() {
            parts.push(before.to_string());
        }
        parts.push(format!("<LOC>{}</LOC> [RQ] <CON>", sentence[m.start..m.end].trim()));
        cursor = m.end;
    }
    let rest = sentence[cursor..].trim();
    if !rest.is_empty() {
        parts.push(rest.to_string());
    }
    Ok(parts.join(" "))
}

/// Builds the vocabulary covering the corpus, the records and the rendered
/// template outputs.
pub fn build_vocabulary(corpus: &[CorpusRecord], records: &InputRecords) -> Result<Vocabulary> {
    let mut texts: Vec<String> = corpus.iter().map(|c| c.text.clone()).collect();
    match records {
        InputRecords::Multi(rs) => {
            for r in rs {
                texts.push(r.question.clone());
                texts.push(r.final_answer.clone());
                for h in &r.hops {
                    texts.push(h.sub_question.clone());
                    texts.push(h.sub_answer.clone());
                }
            }
        }
        InputRecords::El(rs) => {
            for r in rs {
                texts.push(r.sentence.clone());
                texts.push(el_output_text(&r.sentence, &r.mentions)?);
            }
        }
        InputRecords::Single(rs) => {
            for r in rs {
                texts.push(r.instruction.clone());
                texts.push(r.answer.clone());
            }
        }
    }
    Vocabulary::from_texts(&texts, &TEMPLATE_SPECIALS)
}

/// Turns records into training examples against a fixed corpus.
pub struct Reconstructor<'a> {
    vocab: &'a Vocabulary,
    corpus: &'a [Document],
    by_id: HashMap<&'a str, usize>,
    refs: Vec<DocRef>,
    lexical: Mat,
    options: BuildOptions,
}

impl<'a> Reconstructor<'a> {
    pub fn new(vocab: &'a Vocabulary, corpus: &'a [Document], options: BuildOptions) -> Result<Self> {
        let mut by_id = HashMap::new();
        for (i, d) in corpus.iter().enumerate() {
            if by_id.insert(d.doc_id.as_str(), i).is_some() {
                return Err(Error::DuplicateDocument(d.doc_id.clone()));
            }
        }
        let mut refs = Vec::new();
        let mut data = Vec::new();
        for d in corpus {
            for (k, &pos) in d.rd_positions.iter().enumerate() {
                refs.push(DocRef::new(d.doc_id.clone(), k));
                data.extend(lexical_embedding(
                    &d.tokens[..pos],
                    vocab.special_count(),
                    LEXICAL_DIM,
                ));
            }
        }
        let lexical = Mat::from_vec(refs.len(), LEXICAL_DIM, data);
        Ok(Self {
            vocab,
            corpus,
            by_id,
            refs,
            lexical,
            options,
        })
    }

    fn doc(&self, doc_id: &str) -> Result<&'a Document> {
        self.by_id
            .get(doc_id)
            .map(|&i| &self.corpus[i])
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))
    }

    fn push(&self, seq: &mut Vec<(usize, Role)>, text: &str, role: Role) -> Result<()> {
        for id in self.vocab.encode(text)? {
            seq.push((id, role));
        }
        Ok(())
    }

    fn push_nonempty(
        &self,
        seq: &mut Vec<(usize, Role)>,
        text: &str,
        role: Role,
        what: &str,
    ) -> Result<()> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput(format!("{what} must be nonempty")));
        }
        self.push(seq, text, role)
    }

    fn splice(&self, seq: &mut Vec<(usize, Role)>, doc: &Document) {
        seq.push((PARAGRAPH_OPEN, Role::Ctx));
        seq.extend(doc.text_tokens().into_iter().map(|t| (t, Role::Ctx)));
        seq.push((PARAGRAPH_CLOSE, Role::Ctx));
    }

    pub fn multihop(&self, source_id: &str, r: &MultiHopRecord) -> Result<TrainingExample> {
        if r.hops.is_empty() {
            return Err(Error::InvalidInput("multi-hop record needs at least one hop".into()));
        }
        let mut candidates: Vec<&Document> = Vec::new();
        for id in r.hops.iter().map(|h| &h.doc_id).chain(&r.distractors) {
            let d = self.doc(id)?;
            if !candidates.iter().any(|c| c.doc_id == d.doc_id) {
                candidates.push(d);
            }
        }
        let mut seq = vec![(BOS, Role::Ctx)];
        self.push_nonempty(&mut seq, &r.question, Role::Ctx, "question")?;
        let mut anchors = Vec::new();
        for (h, hop) in r.hops.iter().enumerate() {
            self.push_nonempty(&mut seq, &hop.sub_question, Role::Gen, "sub_question")?;
            let evidence = hop.evidence.as_deref().unwrap_or(&hop.sub_answer);
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for d in &candidates {
                for k in 0..d.rd_positions.len() {
                    let r = DocRef::new(d.doc_id.clone(), k);
                    if !evidence.is_empty() && d.segment_text(k).contains(evidence) {
                        positives.push(r);
                    } else {
                        negatives.push(r);
                    }
                }
            }
            if positives.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "hop {}: no segment of the candidate documents contains `{evidence}`",
                    h + 1
                )));
            }
            let trainable = !negatives.is_empty();
            anchors.push(RetrievalAnchor {
                position: seq.len(),
                positive_doc_refs: positives,
                negative_doc_refs: negatives,
                trainable,
            });
            seq.push((RQ, Role::Ret));
            self.splice(&mut seq, self.doc(&hop.doc_id)?);
            self.push_nonempty(&mut seq, &hop.sub_answer, Role::Gen, "sub_answer")?;
        }
        if r.final_answer.trim().is_empty() {
            return Err(Error::InvalidInput("final_answer must be nonempty".into()));
        }
        self.push(
            &mut seq,
            &format!("{FINAL_OPEN} {} {FINAL_CLOSE}", r.final_answer),
            Role::Gen,
        )?;
        seq.push((EOS, Role::Gen));
        Ok(TrainingExample {
            tokens: tag_sequence(&seq),
            anchors,
            template: Template::RagMulti,
            source_id: source_id.to_string(),
        })
    }

    pub fn el(&self, source_id: &str, r: &ElRecord) -> Result<TrainingExample> {
        let output = el_output_text(&r.sentence, &r.mentions)?;
        let mut seq = vec![(BOS, Role::Ctx)];
        self.push_nonempty(&mut seq, &r.sentence, Role::Ctx, "sentence")?;
        let start = seq.len();
        for id in self.vocab.encode(&output)? {
            seq.push((id, if id == RQ { Role::Ret } else { Role::Gen }));
        }
        seq.push((EOS, Role::Gen));
        let rq_positions: Vec<usize> = (start..seq.len()).filter(|&i| seq[i].0 == RQ).collect();
        debug_assert_eq!(rq_positions.len(), r.mentions.len());
        let mut anchors = Vec::new();
        for (m, &position) in r.mentions.iter().zip(&rq_positions) {
            let anchor = match &m.entity_id {
                None => RetrievalAnchor {
                    position,
                    positive_doc_refs: vec![],
                    negative_doc_refs: vec![],
                    trainable: false,
                },
                Some(entity) => {
                    let pos_doc = self.doc(entity)?;
                    let positives: Vec<DocRef> = (0..pos_doc.rd_positions.len())
                        .map(|k| DocRef::new(entity.clone(), k))
                        .collect();
                    let neg_ids: Vec<&str> = m.candidates.iter().map(String::as_str).collect();
                    let mut negatives = self.refs_of(&neg_ids, entity)?;
                    if negatives.is_empty() {
                        let all: Vec<&str> = self.corpus.iter().map(|d| d.doc_id.as_str()).collect();
                        negatives = self.refs_of(&all, entity)?;
                    }
                    RetrievalAnchor {
                        position,
                        trainable: !negatives.is_empty(),
                        positive_doc_refs: positives,
                        negative_doc_refs: negatives,
                    }
                }
            };
            anchors.push(anchor);
        }
        Ok(TrainingExample {
            tokens: tag_sequence(&seq),
            anchors,
            template: Template::El,
            source_id: source_id.to_string(),
        })
    }

    /// All `[RD]` refs of the listed documents except `exclude`, deduplicated.
    fn refs_of(&self, ids: &[&str], exclude: &str) -> Result<Vec<DocRef>> {
        let mut out: Vec<DocRef> = Vec::new();
        for &id in ids {
            if id == exclude {
                continue;
            }
            let d = self.doc(id)?;
            for k in 0..d.rd_positions.len() {
                let r = DocRef::new(id.to_string(), k);
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
        Ok(out)
    }

    pub fn rag_single(&self, source_id: &str, r: &RagSingleRecord) -> Result<TrainingExample> {
        let mut seq = vec![(BOS, Role::Ctx)];
        self.push_nonempty(&mut seq, &r.instruction, Role::Ctx, "instruction")?;
        let mut anchors = Vec::new();
        if r.retrieve {
            let doc_id = r
                .doc_id
                .as_deref()
                .ok_or_else(|| Error::InvalidInput("retrieve record without doc_id".into()))?;
            let doc = self.doc(doc_id)?;
            let positives: Vec<DocRef> = (0..doc.rd_positions.len())
                .map(|k| DocRef::new(doc_id.to_string(), k))
                .collect();
            let negatives = self.window_negatives(source_id, &r.instruction, &positives)?;
            anchors.push(RetrievalAnchor {
                position: seq.len(),
                trainable: r.trainable && !negatives.is_empty(),
                positive_doc_refs: positives,
                negative_doc_refs: negatives,
            });
            seq.push((RQ, Role::Ret));
            self.splice(&mut seq, doc);
        }
        self.push_nonempty(&mut seq, &r.answer, Role::Gen, "answer")?;
        seq.push((EOS, Role::Gen));
        Ok(TrainingExample {
            tokens: tag_sequence(&seq),
            anchors,
            template: Template::RagSingle,
            source_id: source_id.to_string(),
        })
    }

    fn window_negatives(&self, source_id: &str, query: &str, positives: &[DocRef]) -> Result<Vec<DocRef>> {
        let n = self.refs.len();
        let window = self.options.window.unwrap_or_else(|| default_window(n));
        let q = lexical_embedding(&self.vocab.encode(query)?, self.vocab.special_count(), LEXICAL_DIM);
        if window.0 >= 1 && window.0 <= window.1 && window.1 <= n {
            let order = rank_by_cosine(&self.lexical, &q);
            let available = (window.0 - 1..window.1)
                .filter(|&r| !positives.contains(&self.refs[order[r]]))
                .count();
            if available == 0 {
                return Ok(Vec::new());
            }
            let count = self.options.negatives_per_anchor.min(available);
            let mut rng = keyed_rng(self.options.seed, source_id);
            return sample_negatives(&self.lexical, &self.refs, &q, positives, window, count, &mut rng);
        }
        Err(Error::InvalidWindow {
            lo: window.0,
            hi: window.1,
            size: n,
        })
    }
}

/// Reconstructs the corpus and every record into a validated dataset.
pub fn build_dataset(
    corpus: &[CorpusRecord],
    records: &InputRecords,
    options: BuildOptions,
) -> Result<Dataset> {
    let template = records.template();
    let vocab = build_vocabulary(corpus, records)?;
    let granularity = options.granularity.unwrap_or(default_granularity(template));
    let mut docs = Vec::with_capacity(corpus.len());
    for c in corpus {
        if c.doc_id.is_empty() || c.doc_id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidInput(format!(
                "doc_id `{}` must be nonempty without whitespace",
                c.doc_id
            )));
        }
        docs.push(reconstruct_document(&vocab, &c.doc_id, &c.text, granularity)?);
    }
    let rec = Reconstructor::new(&vocab, &docs, options)?;
    let sid = |id: &Option<String>, i: usize| id.clone().unwrap_or_else(|| format!("line-{}", i + 1));
    let examples = match records {
        InputRecords::Multi(rs) => rs
            .iter()
            .enumerate()
            .map(|(i, r)| rec.multihop(&sid(&r.id, i), r))
            .collect::<Result<Vec<_>>>()?,
        InputRecords::El(rs) => rs
            .iter()
            .enumerate()
            .map(|(i, r)| rec.el(&sid(&r.id, i), r))
            .collect::<Result<Vec<_>>>()?,
        InputRecords::Single(rs) => rs
            .iter()
            .enumerate()
            .map(|(i, r)| rec.rag_single(&sid(&r.id, i), r))
            .collect::<Result<Vec<_>>>()?,
    };
    drop(rec);
    let ds = Dataset {
        vocab,
        corpus: docs,
        examples,
    };
    let violations = ds.validate();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(ds)
}

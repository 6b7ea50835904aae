use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, RD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Granularity {
    /// One `[RD]` at the end of the document.
    PerDoc,
    /// One `[RD]` after every sentence.
    PerSentence,
}

/// A corpus entry with `[RD]` anchors inserted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    /// Text tokens with `[RD]` tokens inserted.
    pub tokens: Vec<usize>,
    pub rd_positions: Vec<usize>,
    pub granularity: Granularity,
    pub sentences: Vec<String>,
}

impl Document {
    /// Tokens without `[RD]` anchors, as spliced into a generation context.
    pub fn text_tokens(&self) -> Vec<usize> {
        self.tokens.iter().copied().filter(|&t| t != RD).collect()
    }

    /// Surface text covered by the segment that ends at `[RD]` number
    /// `rd_index`: the whole prefix of the document up to that anchor.
    pub fn segment_text(&self, rd_index: usize) -> String {
        match self.granularity {
            Granularity::PerDoc => self.sentences.join(" "),
            Granularity::PerSentence => self.sentences[..=rd_index].join(" "),
        }
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        let rd_at: Vec<usize> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == RD)
            .map(|(i, _)| i)
            .collect();
        if rd_at != self.rd_positions {
            return Err(format!("{}: rd_positions disagree with [RD] tokens", self.doc_id));
        }
        match self.granularity {
            Granularity::PerDoc => {
                if self.rd_positions != [self.tokens.len() - 1] {
                    return Err(format!("{}: PER_DOC needs one trailing [RD]", self.doc_id));
                }
            }
            Granularity::PerSentence => {
                if self.rd_positions.len() != self.sentences.len()
                    || self.rd_positions.last() != Some(&(self.tokens.len() - 1))
                {
                    return Err(format!("{}: PER_SENTENCE needs one [RD] per sentence", self.doc_id));
                }
            }
        }
        if self.rd_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("{}: rd_positions not strictly increasing", self.doc_id));
        }
        Ok(())
    }
}

/// Splits at `.`, `?` or `!` followed by whitespace or end of text.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            let at_boundary = match chars.peek() {
                None => true,
                Some(&(_, n)) => n.is_whitespace(),
            };
            if at_boundary {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

pub fn reconstruct_document(
    vocab: &Vocabulary,
    doc_id: &str,
    raw_text: &str,
    granularity: Granularity,
) -> Result<Document> {
    let sentences = split_sentences(raw_text);
    if sentences.is_empty() {
        return Err(Error::InvalidInput(format!("document `{doc_id}` has empty text")));
    }
    let mut tokens = Vec::new();
    let mut rd_positions = Vec::new();
    for s in &sentences {
        let ids = vocab.encode(s)?;
        if ids.contains(&RD) {
            return Err(Error::InvalidInput(format!(
                "document `{doc_id}` already contains [RD]"
            )));
        }
        tokens.extend(ids);
        if granularity == Granularity::PerSentence {
            rd_positions.push(tokens.len());
            tokens.push(RD);
        }
    }
    if granularity == Granularity::PerDoc {
        rd_positions.push(tokens.len());
        tokens.push(RD);
    }
    Ok(Document {
        doc_id: doc_id.to_string(),
        tokens,
        rd_positions,
        granularity,
        sentences,
    })
}

//! Token universe: whitespace tokenizer with literal special-token matching,
//! token roles, and the versioned vocabulary file.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a token occurrence is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// Language-modeling target.
    #[serde(rename = "GEN")]
    Gen,
    /// Pure context.
    #[serde(rename = "CTX")]
    Ctx,
    /// Sentence representation carrier (`[RQ]` / `[RD]`).
    #[serde(rename = "RET")]
    Ret,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Gen => "GEN",
            Role::Ctx => "CTX",
            Role::Ret => "RET",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "GEN" => Some(Role::Gen),
            "CTX" => Some(Role::Ctx),
            "RET" => Some(Role::Ret),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const RQ: usize = 0;
pub const RD: usize = 1;
pub const CON: usize = 2;
pub const LOC_OPEN: usize = 3;
pub const LOC_CLOSE: usize = 4;
pub const PARAGRAPH_OPEN: usize = 5;
pub const PARAGRAPH_CLOSE: usize = 6;
pub const MENTION_OPEN: usize = 7;
pub const MENTION_CLOSE: usize = 8;
pub const BOS: usize = 9;
pub const EOS: usize = 10;

/// Reserved specials, in id order.
pub const DEFAULT_SPECIALS: [&str; 11] = [
    "[RQ]",
    "[RD]",
    "<CON>",
    "<LOC>",
    "</LOC>",
    "<paragraph>",
    "</paragraph>",
    "<MENTION>",
    "</MENTION>",
    "<s>",
    "</s>",
];

pub const UNK_LITERAL: &str = "<unk>";

const FORMAT_VERSION: u32 = 1;

/// Span markers rendered without a space on their inner side.
fn glues_right(id: usize) -> bool {
    id == LOC_OPEN || id == MENTION_OPEN
}

fn glues_left(id: usize) -> bool {
    id == LOC_CLOSE || id == MENTION_CLOSE
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    special_count: usize,
    index: HashMap<String, usize>,
    terminators: Vec<usize>,
    unk: Option<usize>,
    /// Special literals sorted longest first, for greedy matching.
    specials_by_len: Vec<(String, usize)>,
}

impl Vocabulary {
    /// Builds a vocabulary from pre-split base tokens. Specials take ids
    /// `0..K` (defaults, then `extra_specials` in order); base tokens follow
    /// in first-seen order.
    pub fn build<S: AsRef<str>>(corpus_tokens: &[S], extra_specials: &[&str]) -> Result<Self> {
        Self::build_inner(corpus_tokens, extra_specials, false)
    }

    /// Like [`Vocabulary::build`] but reserves an `<unk>` special that absorbs
    /// unknown surface forms during encoding.
    pub fn build_with_unk<S: AsRef<str>>(
        corpus_tokens: &[S],
        extra_specials: &[&str],
    ) -> Result<Self> {
        Self::build_inner(corpus_tokens, extra_specials, true)
    }

    /// Splits every text with the tokenizer and builds from the resulting pieces.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], extra_specials: &[&str]) -> Result<Self> {
        let mut specials: Vec<&str> = DEFAULT_SPECIALS.to_vec();
        specials.extend_from_slice(extra_specials);
        let matcher = specials_by_len(
            &specials
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect::<Vec<_>>(),
        );
        let mut pieces = Vec::new();
        for text in texts {
            for piece in split_pieces(text.as_ref(), &matcher) {
                if let Piece::Base(s) = piece {
                    pieces.push(s.to_string());
                }
            }
        }
        Self::build(&pieces, extra_specials)
    }

    fn build_inner<S: AsRef<str>>(
        corpus_tokens: &[S],
        extra_specials: &[&str],
        with_unk: bool,
    ) -> Result<Self> {
        if corpus_tokens.is_empty() {
            return Err(Error::InvalidInput("corpus_tokens must be nonempty".into()));
        }
        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let mut specials: Vec<&str> = DEFAULT_SPECIALS.to_vec();
        specials.extend_from_slice(extra_specials);
        if with_unk {
            specials.push(UNK_LITERAL);
        }
        for s in &specials {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::InvalidToken(s.to_string(), "special contains whitespace"));
            }
            if index.insert(s.to_string(), tokens.len()).is_some() {
                return Err(Error::DuplicateSpecial(s.to_string()));
            }
            tokens.push(s.to_string());
        }
        let special_count = tokens.len();
        let matcher = specials_by_len(
            &tokens
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i))
                .collect::<Vec<_>>(),
        );
        for tok in corpus_tokens {
            let tok = tok.as_ref();
            if index.contains_key(tok) {
                continue;
            }
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidToken(tok.into(), "empty or contains whitespace"));
            }
            if matcher.iter().any(|(lit, _)| tok.contains(lit.as_str())) {
                return Err(Error::InvalidToken(tok.into(), "embeds a special literal"));
            }
            index.insert(tok.to_string(), tokens.len());
            tokens.push(tok.to_string());
        }
        let unk = with_unk.then(|| index[UNK_LITERAL]);
        Ok(Self {
            tokens,
            special_count,
            index,
            terminators: vec![EOS],
            unk,
            specials_by_len: matcher,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special_count(&self) -> usize {
        self.special_count
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.special_count
    }

    pub fn terminators(&self) -> &[usize] {
        &self.terminators
    }

    pub fn is_terminator(&self, id: usize) -> bool {
        self.terminators.contains(&id)
    }

    pub fn unk(&self) -> Option<usize> {
        self.unk
    }

    pub fn id(&self, surface: &str) -> Option<usize> {
        self.index.get(surface).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Base tokens, in id order.
    pub fn base_tokens(&self) -> &[String] {
        &self.tokens[self.special_count..]
    }

    /// Extra specials beyond the reserved defaults (and the optional `<unk>`).
    pub fn extra_specials(&self) -> Vec<&str> {
        self.tokens[DEFAULT_SPECIALS.len()..self.special_count]
            .iter()
            .map(String::as_str)
            .filter(|s| Some(self.index[*s]) != self.unk)
            .collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for piece in split_pieces(text, &self.specials_by_len) {
            match piece {
                Piece::Special(id) => ids.push(id),
                Piece::Base(s) => match self.index.get(s) {
                    Some(&id) => ids.push(id),
                    None => match self.unk {
                        Some(unk) => ids.push(unk),
                        None => return Err(Error::OutOfVocabulary(s.to_string())),
                    },
                },
            }
        }
        Ok(ids)
    }

    /// Renders ids with single spaces, except inside `<LOC>…</LOC>` and
    /// `<MENTION>…</MENTION>` markers which hug their content.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut prev: Option<usize> = None;
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or(Error::InvalidTokenId(id, self.len()))?;
            if let Some(p) = prev {
                if !glues_right(p) && !glues_left(id) {
                    out.push(' ');
                }
            }
            out.push_str(tok);
            prev = Some(id);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let unk = self.unk.map_or("none".to_string(), |u| u.to_string());
        let terms: Vec<String> = self.terminators.iter().map(usize::to_string).collect();
        let mut s = format!(
            "retgen-vocab v{FORMAT_VERSION} specials={} unk={unk} terminators={}\n",
            self.special_count,
            terms.join(",")
        );
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::BadFormat { what: "vocabulary" })?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("retgen-vocab") {
            return Err(Error::BadFormat { what: "vocabulary" });
        }
        let version = fields
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or(Error::BadFormat { what: "vocabulary" })?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                what: "vocabulary",
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut special_count = None;
        let mut unk = None;
        let mut terminators = Vec::new();
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or(Error::BadFormat { what: "vocabulary" })?;
            let bad = || Error::Parse {
                line: 1,
                msg: format!("bad header field `{field}`"),
            };
            match key {
                "specials" => special_count = Some(value.parse::<usize>().map_err(|_| bad())?),
                "unk" if value == "none" => unk = None,
                "unk" => unk = Some(value.parse::<usize>().map_err(|_| bad())?),
                "terminators" => {
                    for t in value.split(',') {
                        terminators.push(t.parse::<usize>().map_err(|_| bad())?);
                    }
                }
                _ => return Err(bad()),
            }
        }
        let special_count = special_count.ok_or(Error::BadFormat { what: "vocabulary" })?;
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if special_count < DEFAULT_SPECIALS.len() || special_count > tokens.len() {
            return Err(Error::BadFormat { what: "vocabulary" });
        }
        for (i, d) in DEFAULT_SPECIALS.iter().enumerate() {
            if tokens[i] != *d {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("expected reserved special `{d}`, found `{}`", tokens[i]),
                });
            }
        }
        if terminators.is_empty() || !terminators.contains(&EOS) {
            return Err(Error::Parse {
                line: 1,
                msg: "terminator set must contain EOS".into(),
            });
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 2,
                    msg: format!("duplicate token `{t}`"),
                });
            }
        }
        let matcher = specials_by_len(
            &tokens[..special_count]
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i))
                .collect::<Vec<_>>(),
        );
        Ok(Self {
            tokens,
            special_count,
            index,
            terminators,
            unk,
            specials_by_len: matcher,
        })
    }
}

fn specials_by_len(specials: &[(String, usize)]) -> Vec<(String, usize)> {
    let mut v = specials.to_vec();
    // Longest first; ties keep id order.
    v.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
    v
}

#[derive(Debug, PartialEq, Eq)]
enum Piece<'a> {
    Special(usize),
    Base(&'a str),
}

fn split_pieces<'a>(text: &'a str, specials: &[(String, usize)]) -> Vec<Piece<'a>> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        let mut i = 0;
        while i < chunk.len() {
            let rest = &chunk[i..];
            if let Some((lit, id)) = specials.iter().find(|(lit, _)| rest.starts_with(lit.as_str()))
            {
                if start < i {
                    out.push(Piece::Base(&chunk[start..i]));
                }
                out.push(Piece::Special(*id));
                i += lit.len();
                start = i;
            } else {
                i += rest.chars().next().map_or(1, char::len_utf8);
            }
        }
        if start < chunk.len() {
            out.push(Piece::Base(&chunk[start..]));
        }
    }
    out
}

/// A token occurrence with its role and, when it contributes to the
/// generative loss, the next-token label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedToken {
    pub token_id: usize,
    pub role: Role,
    pub lm_target: Option<usize>,
}

/// Assigns next-token labels to a role-tagged sequence.
///
/// A position carries a label when the following token is GEN, or when the
/// following token is `[RQ]` (emitting the retrieval token is learned
/// generatively). RET positions never carry a label: their output is trained
/// only by the retrieval loss.
pub fn tag_sequence(tokens: &[(usize, Role)]) -> Vec<TaggedToken> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &(token_id, role))| {
            let lm_target = match tokens.get(i + 1) {
                Some(&(next, next_role))
                    if role != Role::Ret && (next_role == Role::Gen || next == RQ) =>
                {
                    Some(next)
                }
                _ => None,
            };
            TaggedToken {
                token_id,
                role,
                lm_target,
            }
        })
        .collect()
}

/// Checks role exclusivity and label placement over a tagged sequence.
pub fn check_tagged(tokens: &[TaggedToken]) -> std::result::Result<(), String> {
    for (i, t) in tokens.iter().enumerate() {
        if t.role == Role::Ret && t.token_id != RQ && t.token_id != RD {
            return Err(format!("position {i}: RET role on token {}", t.token_id));
        }
        if (t.token_id == RQ || t.token_id == RD) && t.role != Role::Ret {
            return Err(format!("position {i}: retrieval token without RET role"));
        }
        let expected = match tokens.get(i + 1) {
            Some(n) if t.role != Role::Ret && (n.role == Role::Gen || n.token_id == RQ) => {
                Some(n.token_id)
            }
            _ => None,
        };
        if t.lm_target != expected {
            return Err(format!(
                "position {i}: lm_target {:?}, expected {:?}",
                t.lm_target, expected
            ));
        }
    }
    Ok(())
}

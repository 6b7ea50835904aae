//! Joint generation and dense retrieval in a single causal transformer.
//!
//! Retrieval tokens (`[RQ]` for queries, `[RD]` for documents) carry sentence
//! embeddings trained with a contrastive objective, while ordinary tokens
//! carry the language-modeling objective. At inference time the hidden state
//! of a generated `[RQ]` queries a cached document index directly, so no
//! second encoding pass is needed.

pub mod bench;
pub mod error;
pub mod index;
pub mod inference;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod reconstruct;
pub mod util;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};

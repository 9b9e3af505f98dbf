//! BM25 retrieval over a memory of image-text pairs.
//!
//! Captions are the keys, image references the values. A query caption is
//! tokenized the same way as the memory and the top-K pairs come back in
//! score order.

mod corpus;
mod index;
mod store;
mod tokenize;

use thiserror::Error;

pub use corpus::{read_corpus, write_corpus};
pub use index::{
    Bm25Params, DocId, ImageTextPair, IndexBuilder, Posting, RetrievalIndex, RetrievalResult,
    ScoredPair, SkippedPair,
};
pub use store::{INDEX_MAGIC, INDEX_VERSION};
pub use tokenize::tokenize;

/// Default retrieval depth when augmenting pretraining data.
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("duplicate pair id {0:?}")]
    DuplicateId(String),
    #[error("unknown document {0}")]
    UnknownDoc(DocId),
    #[error("K must be at least 1, got {0}")]
    InvalidK(usize),
    #[error("corpus exceeds u32 document ids")]
    TooManyDocs,
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

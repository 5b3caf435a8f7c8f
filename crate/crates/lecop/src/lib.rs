//! LECOP-style news recommendation pipeline.
//!
//! The crate covers the batch stages end to end: MIND-format ingestion and
//! dataset statistics, prompt/triple construction for out-of-band LLM runs,
//! embedding and keyword ingestion, click-sequence co-occurrence graphs,
//! node2vec graph embeddings, fusion of co-occurrence and projected LLM
//! vectors into news vectors, an attention-based user model, and ranking
//! metrics.

pub mod embeddings;
pub mod error;
pub mod fusion;
pub mod graphs;
pub mod ingest;
pub mod keywords;
pub mod metrics;
pub mod node2vec;
pub mod prompts;
pub mod recommender;
pub mod seeds;
pub mod vectors;

pub use error::{Error, Result};
pub use vectors::VectorTable;

//! Knowledge-graph completion by rule-guided dynamic subgraph retrieval,
//! relational-GCN embedding enhancement and candidate re-ranking.

pub mod embedding;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gcn;
pub mod kg;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod rules;
pub mod selector;
mod util;

pub use error::{Error, Result};

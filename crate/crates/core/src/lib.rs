//! Layer-wise token features from a frozen transformer, compressed per layer,
//! fused across layers by a gated mixture of experts, and served from a
//! precomputed embedding store.

pub mod atomic;
pub mod backbone;
pub mod bench;
mod binio;
pub mod checkpoint;
pub mod compressor;
pub mod config;
pub mod corpus;
pub mod dump;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod ranker;
pub mod service;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};

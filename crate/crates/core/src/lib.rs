//! Unsupervised manifold-aware retrieval.
//!
//! The crate builds mutual k-NN affinity graphs over feature vectors, runs
//! classical diffusion baselines on them, encodes global structure with
//! anchor-based sparse codes, and trains a stack of graph diffusion layers
//! with unsupervised local/global ranking losses. Learned features are
//! queried by cosine similarity; unseen queries are embedded by query
//! feature expansion.

pub mod anchors;
pub mod cli;
pub mod dataio;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

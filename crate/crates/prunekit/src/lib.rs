//! Experiment harness over `prunekit-core`: byte corpora, `PERP1`
//! checkpoints, TOML experiment configs, grids over sparsity × method ×
//! seed, and CSV/markdown reports.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod grid;
pub mod report;

pub use error::{Error, Result};

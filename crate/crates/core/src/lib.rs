//! Post-pruning retraining and layer-wise reconstruction for small
//! transformer language models.
//!
//! The crate is `no_std` + `alloc` with the default `std` feature turned
//! off. It provides a tape-based autodiff engine, a group-tagged miniature
//! GPT, sparsity masks, pruning criteria (magnitude, Wanda, SparseGPT),
//! LoRA-family adapters, global retraining and layer-wise reconstruction.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapters;
pub mod autograd;
pub mod criteria;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod param;
pub mod reconstruct;
pub mod retrain;
pub mod scalar;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

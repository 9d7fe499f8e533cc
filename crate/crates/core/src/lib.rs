//! Neighborhood-aware matrix factorization for sparse interaction data.
//!
//! The model predicts `r̂_{i,j}` from a baseline (`μ + b_i + b̂_j`), a
//! low-rank term `u_i·v_j`, and explicit/implicit influence terms over the
//! Top-K neighbors of column `j`. Neighbors come from any provider: the exact
//! shrunk-Pearson GSM ([`similarity::gsm_topk`]), simLSH
//! ([`lsh::simlsh_topk`]), minHash, random-projection cosine, or random
//! selection.
//!
//! [`parallel`] runs conflict-free multi-worker training over a rotating
//! block schedule and [`online`] absorbs new rows and columns without touching
//! already-trained parameters.

pub mod data;
pub mod error;
pub mod factorization;
pub mod lsh;
pub mod online;
pub mod parallel;
pub mod similarity;
pub mod synthetic;

pub use error::{Error, Result};

//! RoPE-aligned pruning of key/value projections on a toy attention language model.
//!
//! Pipeline: score RoPE pairs with empirical Fisher information, allocate
//! per-group budgets, prune whole pairs (absorbing the binary expansion into
//! the query projection), run inference on a latent KV cache, and recover
//! accuracy with distilled low-rank adapters. SVD and PaLU-style
//! factorizations are provided as baselines, together with an analytical
//! resource model and executable checks of the structural claims.

pub mod analyze;
pub mod budget;
pub mod error;
pub mod factorize;
pub mod recover;
pub mod numcore;
pub mod rope;
pub mod scoring;
pub mod toymodel;
pub mod verify;

pub use error::{Error, Result};

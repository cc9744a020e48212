//! Mode-approximation adapters for frozen multimodal attention stacks.
//!
//! The frozen query/key/value projections of every attention block are
//! stacked into one `d × d × N` tensor. A learnable update for that tensor is
//! kept in CP (rank-one sum) form with globally shared factors `U`, `V`, `P`
//! and a per-slice coefficient table `Λ`:
//!
//! ```text
//! ΔW[i, j, k] = Σ_r Λ[k, r] · U[i, r] · V[j, r] · P[k, r]
//! ```
//!
//! Two alignment modules sit in the fusion branch: a batch-level context
//! enhancement over pooled fusion features and a gated blend of fusion and
//! query features. Everything here is pure computation; file formats and the
//! command line live in the `modeprompt` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod align;
pub mod analysis;
pub mod autodiff;
pub mod backbone;
mod error;
pub mod mode_approx;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tensor3, Vector};

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Semantic suppression for transformer text-embedding matrices.
//!
//! Embeddings are stored as an `M x N` matrix whose columns are tokens laid out
//! as `[SOT | prompt tokens | EOT padding]`. The crate provides:
//!
//! - [`embedding`]: the structured embedding type, token partitions and the
//!   negative-target matrix built from the suppressed tokens plus all EOT columns.
//! - [`swr`]: thin SVD and singular-value rules (exponential soft weighting,
//!   strengthening, top/bottom-K zeroing, weighted soft thresholding).
//! - [`eot_analysis`]: redundancy diagnostics for the EOT padding block.
//! - [`toy_attention`]: a seeded single-layer cross-attention denoiser with
//!   analytic gradients of the map/value losses.
//! - [`ito`]: the per-timestep embedding optimization loop.
//! - [`metrics`], [`io`]: comparison metrics, file formats and reports.

pub mod embedding;
pub mod eot_analysis;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod io;
pub mod ito;
pub mod metrics;
pub mod rng;
pub mod swr;
pub mod toy_attention;

pub use embedding::{NegativeTargetMatrix, TextEmbeddings, TokenPartition};
pub use error::{Error, Result};
pub use swr::{SpectrumDecomposition, SpectrumRule};

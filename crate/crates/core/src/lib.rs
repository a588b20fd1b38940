//! Functional alignment of brain recordings with fused unbalanced
//! Gromov-Wasserstein transport, ridge decoding of stimulus latents and
//! retrieval-based evaluation.
//!
//! The crate is organised bottom-up:
//!
//! * [`matrixio`]: the `FMAT` binary container, dataset manifests and run
//!   configuration.
//! * [`geometry`]: vertex geometries (geodesic distance matrices and vertex
//!   weights).
//! * [`preprocess`]: drift removal, standardisation and FIR windowing.
//! * [`fugw`]: the alignment loss and its block coordinate descent solver.
//! * [`transport`]: barycentric projection of features through a plan.
//! * [`decoder`]: ridge regression and the mean-predictor baseline.
//! * [`retrieval`]: cosine retrieval metrics (median relative rank, top-k).
//! * [`synth`]: synthetic multi-subject datasets with known alignments.
//! * [`experiment`]: setup runner, sweeps and the FIR grid search used by
//!   the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod decoder;
pub mod error;
pub mod experiment;
pub mod fugw;
pub mod geometry;
mod linalg;
pub mod matrixio;
pub mod preprocess;
pub mod retrieval;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod transport;

pub use error::{Error, Result};

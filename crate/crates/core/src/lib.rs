//! Instance-aware test-time augmentation.
//!
//! A small loss predictor looks at an input once and ranks a fixed space of
//! candidate transforms by the loss the target classifier is expected to
//! incur on each. The target then runs only on the top-k transforms and its
//! probabilities are averaged.
//!
//! Modules, bottom up:
//!
//! - [`imgcore`]: images, resampling, the transform space, crops.
//! - [`corruptions`]: seeded parametric corruptions with five severities.
//! - [`dataio`]: datasets, splits, corrupted-set manifests.
//! - [`nets`]: target classifier and loss predictor, training, checkpoints.
//! - [`ranking`]: Spearman correlation and differentiable ranking losses.
//! - [`labelgen`]: ground-truth relative losses per transform.
//! - [`ttapolicy`]: fixed ensembles, top-k selection, random and oracle.
//! - [`evalbench`]: error tables, mCE, relative cost, reports.
//! - [`pipeline`]: the config-driven command sequence.

pub mod corruptions;
pub mod dataio;
pub mod error;
pub mod evalbench;
pub mod imgcore;
pub mod labelgen;
pub mod nets;
pub mod pipeline;
pub mod ranking;
pub mod seed;
pub mod ttapolicy;

pub use error::{Error, Result};

// glibc's allocator fragments badly under the evaluation loops (large GEMM
// packing buffers interleaved with small retained results).
#[cfg(feature = "mimalloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

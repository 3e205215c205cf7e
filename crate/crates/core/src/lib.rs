//! Direct preference optimization for autoregressive models over
//! two-dimensional discrete token grids.
//!
//! The crate covers the whole loop on a synthetic codec-token TTS task:
//! data synthesis ([`seqdata`]), a miniature multi-scale transformer with
//! hand-written backpropagation ([`model`]), top-k temperature sampling
//! ([`sampler`]), proxy preference metrics ([`metrics`]), preference-pair
//! curation ([`curation`]), the DPO objective and trainers ([`align`]) and
//! experiment orchestration ([`eval`]).
//!
//! Batch-level work (per-sequence gradients, per-sample generation,
//! per-condition evaluation) runs on rayon when the `parallel` feature is
//! enabled. Reductions always happen in a fixed order, so results do not
//! depend on the thread count.

pub mod align;
pub mod cli;
pub mod curation;
pub mod error;
pub mod eval;
pub mod exec;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod seqdata;

pub use error::{Error, Result};

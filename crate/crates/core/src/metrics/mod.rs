//! Proxy preference metrics: intelligibility (WER), speaker similarity and
//! naturalness (MOS), plus a combined ranking.
//!
//! Two suites exist. [`SeenSuite`] is the one preference curation ranks
//! with; [`UnseenSuite`] re-implements the same three contracts with an
//! independently seeded speaker encoder, a different decoding vote and
//! different roughness weights, and is only used for held-out evaluation.
//! Curation accepts [`CurationMetric`] implementors only, which the unseen
//! suite is not.

mod mos;
mod rank;
mod spk;
mod wer;

use serde::{Deserialize, Serialize};

pub use mos::{mos_proxy, mos_with, repetition_fraction, unattested_fraction, Roughness, REPETITION_THRESHOLD};
pub use rank::{combined_rank, rank_by, RankTable};
pub use spk::{cosine, spk_sim, spk_sim_with, CodeEmbedding, Similarity};
pub use wer::{decode_text, edit_distance, wer_proxy, wer_with, VoteRule};

use crate::seqdata::TokenGrid;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub wer: f64,
    pub spk_sim: f64,
    pub mos: f64,
}

/// A complete set of the three proxy metrics.
pub trait MetricSuite: Sync {
    fn name(&self) -> &'static str;
    fn score(&self, grid: &TokenGrid, ref_grid: &TokenGrid, text: &[u32]) -> MetricScores;
}

/// Marker for suites that preference curation may rank with.
pub trait CurationMetric: MetricSuite {}

#[derive(Debug, Clone, Copy, Default)]
pub struct SeenSuite;

#[derive(Debug, Clone, Copy, Default)]
pub struct UnseenSuite;

impl MetricSuite for SeenSuite {
    fn name(&self) -> &'static str {
        "seen"
    }

    fn score(&self, grid: &TokenGrid, ref_grid: &TokenGrid, text: &[u32]) -> MetricScores {
        MetricScores {
            wer: wer_proxy(grid, text),
            spk_sim: spk_sim(grid, ref_grid),
            mos: mos_proxy(grid),
        }
    }
}

impl CurationMetric for SeenSuite {}

impl MetricSuite for UnseenSuite {
    fn name(&self) -> &'static str {
        "unseen"
    }

    fn score(&self, grid: &TokenGrid, ref_grid: &TokenGrid, text: &[u32]) -> MetricScores {
        unseen_metric_suite(grid, ref_grid, text)
    }
}

pub fn unseen_metric_suite(grid: &TokenGrid, ref_grid: &TokenGrid, text: &[u32]) -> MetricScores {
    MetricScores {
        wer: wer_with(grid, text, VoteRule::FirstDecodable),
        spk_sim: spk_sim_with(spk::unseen_embedding(), grid, ref_grid).value,
        mos: mos_with(grid, mos::UNSEEN_ROUGHNESS),
    }
}

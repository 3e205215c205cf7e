use serde::{Deserialize, Serialize};

use super::MetricScores;

/// Per-metric ranks (0 = best) and their per-sample sum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTable {
    pub wer: Vec<usize>,
    pub spk_sim: Vec<usize>,
    pub mos: Vec<usize>,
    pub combined: Vec<usize>,
}

/// Rank positions for `key`, where a smaller key is better; ties go to the
/// lower sample index.
pub fn rank_by<F: Fn(usize) -> f64>(n: usize, key: F) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    let mut ranks = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos;
    }
    ranks
}

pub fn combined_rank(scores: &[MetricScores]) -> RankTable {
    let n = scores.len();
    let wer = rank_by(n, |i| scores[i].wer);
    let spk_sim = rank_by(n, |i| -scores[i].spk_sim);
    let mos = rank_by(n, |i| -scores[i].mos);
    let combined = (0..n).map(|i| wer[i] + spk_sim[i] + mos[i]).collect();
    RankTable {
        wer,
        spk_sim,
        mos,
        combined,
    }
}

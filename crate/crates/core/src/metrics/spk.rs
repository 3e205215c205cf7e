//! Speaker-similarity proxy: cosine similarity of mean code embeddings.

use std::sync::OnceLock;

use rand::Rng as _;

use crate::rng::substream;
use crate::seqdata::{TokenGrid, AUDIO_VOCAB, N_Q};

/// Fixed random per-code embedding tables for a speaker encoder.
pub struct CodeEmbedding {
    dim: usize,
    /// `[n_q][vocab][dim]`, already multiplied by the codebook weight.
    table: Vec<f64>,
}

impl CodeEmbedding {
    /// Draw tables from `seed`; codebook `j` is scaled by `weights[j]`.
    pub fn new(seed: u64, dim: usize, weights: [f64; N_Q]) -> Self {
        let mut table = Vec::with_capacity(N_Q * AUDIO_VOCAB * dim);
        for (j, w) in weights.iter().enumerate() {
            let mut rng = substream(seed, "speaker-embedding", j as u64);
            table.extend((0..AUDIO_VOCAB * dim).map(|_| w * rng.random_range(-1.0..1.0)));
        }
        Self { dim, table }
    }

    /// Mean over frames of the summed per-codebook embeddings.
    pub fn embed(&self, grid: &TokenGrid) -> Vec<f64> {
        let mut e = vec![0.0; self.dim];
        for t in 0..grid.frames() {
            for (j, &c) in grid.row(t).iter().enumerate().take(N_Q) {
                let off = (j * AUDIO_VOCAB + c as usize % AUDIO_VOCAB) * self.dim;
                for (ei, ti) in e.iter_mut().zip(&self.table[off..off + self.dim]) {
                    *ei += ti;
                }
            }
        }
        let n = grid.frames() as f64;
        e.iter_mut().for_each(|v| *v /= n);
        e
    }
}

/// Result of a similarity computation; `degenerate` is set when either
/// embedding has zero norm and the value is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Similarity {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Similarity {
            value: 0.0,
            degenerate: true,
        };
    }
    Similarity {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

pub(crate) const SEEN_EMBED_SEED: u64 = 0x5EE0_0001;
pub(crate) const UNSEEN_EMBED_SEED: u64 = 0xA11E_0002;

pub(crate) fn seen_embedding() -> &'static CodeEmbedding {
    static E: OnceLock<CodeEmbedding> = OnceLock::new();
    // Codebook 0 carries content, not speaker identity, so it is
    // down-weighted.
    E.get_or_init(|| CodeEmbedding::new(SEEN_EMBED_SEED, 32, [0.25, 1.0]))
}

pub(crate) fn unseen_embedding() -> &'static CodeEmbedding {
    static E: OnceLock<CodeEmbedding> = OnceLock::new();
    E.get_or_init(|| CodeEmbedding::new(UNSEEN_EMBED_SEED, 24, [0.35, 1.0]))
}

pub fn spk_sim_with(embedding: &CodeEmbedding, grid: &TokenGrid, ref_grid: &TokenGrid) -> Similarity {
    cosine(&embedding.embed(grid), &embedding.embed(ref_grid))
}

pub fn spk_sim(grid: &TokenGrid, ref_grid: &TokenGrid) -> f64 {
    spk_sim_with(seen_embedding(), grid, ref_grid).value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::{clean_grid, SPEAKER_UNIVERSE};

    #[test]
    fn self_similarity_and_symmetry() {
        let a = clean_grid(&[1, 2, 3], 4);
        let b = clean_grid(&[9, 8], 6);
        assert!((spk_sim(&a, &a) - 1.0).abs() <= 1e-12);
        assert_eq!(spk_sim(&a, &b), spk_sim(&b, &a));
        assert!((-1.0..=1.0).contains(&spk_sim(&a, &b)));
    }

    #[test]
    fn zero_norm_is_flagged() {
        let s = cosine(&[0.0, 0.0], &[1.0, 0.0]);
        assert_eq!(s.value, 0.0);
        assert!(s.degenerate);
    }

    #[test]
    fn same_speaker_beats_same_text() {
        let mut rng = substream(0, "spk-trial", 0);
        let mut wins = 0;
        for _ in 0..200 {
            let a = rng.random_range(0..SPEAKER_UNIVERSE);
            let b = (a + rng.random_range(1..SPEAKER_UNIVERSE)) % SPEAKER_UNIVERSE;
            let t1: Vec<u32> = (0..rng.random_range(3..=6)).map(|_| rng.random_range(0..32)).collect();
            let t2: Vec<u32> = (0..rng.random_range(3..=6)).map(|_| rng.random_range(0..32)).collect();
            let base = clean_grid(&t1, a);
            if spk_sim(&base, &clean_grid(&t2, a)) > spk_sim(&base, &clean_grid(&t1, b)) {
                wins += 1;
            }
        }
        assert!(wins >= 190, "{wins}/200");
    }
}

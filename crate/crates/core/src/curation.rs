//! Preference-pair and SFT-set construction from generation dumps.
//!
//! Two strategies are supported: ground truth against a random generated
//! sample, and ranking the generated samples by a preference metric and
//! pairing the best fraction against the worst. Ranking is done with a
//! [`CurationMetric`] suite only; the held-out evaluation suite cannot be
//! passed here:
//!
//! ```compile_fail
//! use prefalign::curation::{pair_top_bottom, CurationConfig};
//! use prefalign::metrics::UnseenSuite;
//! use prefalign::seqdata::synth_example;
//!
//! let ex = synth_example(&[1, 2], 0, 0, 0.0).unwrap();
//! let gens = vec![ex.target_grid.clone(); 10];
//! pair_top_bottom(&UnseenSuite, &ex, &gens, &CurationConfig::default());
//! ```

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{combined_rank, rank_by, CurationMetric, MetricScores};
use crate::rng::{derive_seed, substream, Rng};
use crate::sampler::GenerationBatch;
use crate::seqdata::{Example, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    GtVsGen,
    Ranked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricUsed {
    SpkSim,
    Wer,
    Mos,
    All,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gt_vs_gen" => Some(Self::GtVsGen),
            "ranked" => Some(Self::Ranked),
            _ => None,
        }
    }
}

impl MetricUsed {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spk_sim" => Some(Self::SpkSim),
            "wer" => Some(Self::Wer),
            "mos" => Some(Self::Mos),
            "all" => Some(Self::All),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub example_id: String,
    pub winner: TokenGrid,
    pub loser: TokenGrid,
    pub strategy: Strategy,
    pub metric_used: MetricUsed,
    pub winner_scores: MetricScores,
    pub loser_scores: MetricScores,
}

impl PreferencePair {
    /// The same pair with winner and loser exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            winner: self.loser.clone(),
            loser: self.winner.clone(),
            winner_scores: self.loser_scores,
            loser_scores: self.winner_scores,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub strategy: Strategy,
    pub metric_used: MetricUsed,
    pub fraction: f64,
    pub samples_per_condition: usize,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ranked,
            metric_used: MetricUsed::All,
            fraction: 0.2,
            samples_per_condition: 10,
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 0.5) {
            return Err(Error::config("fraction", "must be in (0, 0.5]"));
        }
        if self.samples_per_condition == 0 {
            return Err(Error::config("samples_per_condition", "must be at least 1"));
        }
        if self.strategy == Strategy::Ranked && self.pairs_per_condition(self.samples_per_condition) == 0 {
            return Err(Error::config(
                "fraction",
                "fraction x samples_per_condition must be at least 1 after flooring",
            ));
        }
        Ok(())
    }

    pub fn pairs_per_condition(&self, n: usize) -> usize {
        // The small epsilon keeps e.g. 0.2 * 10 from flooring to 1.
        (self.fraction * n as f64 + 1e-9).floor() as usize
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Score every grid with `suite` against the example's condition.
pub fn score_grids<M: CurationMetric>(suite: &M, example: &Example, grids: &[TokenGrid]) -> Vec<MetricScores> {
    grids
        .iter()
        .map(|g| suite.score(g, &example.ref_grid, &example.text))
        .collect()
}

/// Ground truth as the winner, a uniformly drawn generation as the loser.
/// Generations identical to the ground truth are not eligible.
pub fn pair_gt_vs_gen<M: CurationMetric>(
    suite: &M,
    example: &Example,
    generations: &[TokenGrid],
    metric_used: MetricUsed,
    rng: &mut Rng,
) -> Result<PreferencePair> {
    let eligible: Vec<usize> = (0..generations.len())
        .filter(|&i| generations[i] != example.target_grid)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Curation(format!(
            "{}: no generation differs from the ground truth",
            example.id
        )));
    }
    let loser = &generations[eligible[rng.random_range(0..eligible.len())]];
    Ok(PreferencePair {
        example_id: example.id.clone(),
        winner: example.target_grid.clone(),
        loser: loser.clone(),
        strategy: Strategy::GtVsGen,
        metric_used,
        winner_scores: suite.score(&example.target_grid, &example.ref_grid, &example.text),
        loser_scores: suite.score(loser, &example.ref_grid, &example.text),
    })
}

/// Sample indices from best to worst under `metric`; ties keep sample order.
pub fn ranking_order(scores: &[MetricScores], metric: MetricUsed) -> Vec<usize> {
    let n = scores.len();
    let key: Vec<usize> = match metric {
        MetricUsed::Wer => rank_by(n, |i| scores[i].wer),
        MetricUsed::SpkSim => rank_by(n, |i| -scores[i].spk_sim),
        MetricUsed::Mos => rank_by(n, |i| -scores[i].mos),
        MetricUsed::All => combined_rank(scores).combined,
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (key[i], i));
    order
}

/// Rank the generations and pair the i-th best with the i-th worst, for
/// the top `floor(fraction * n)` of each end. Pairs whose two grids are
/// identical are dropped.
pub fn pair_top_bottom<M: CurationMetric>(
    suite: &M,
    example: &Example,
    generations: &[TokenGrid],
    config: &CurationConfig,
) -> Result<Vec<PreferencePair>> {
    let n = generations.len();
    let m = config.pairs_per_condition(n);
    if m == 0 {
        return Err(Error::Curation(format!(
            "{}: {n} generations give no pairs at fraction {}",
            example.id, config.fraction
        )));
    }
    let scores = score_grids(suite, example, generations);
    let order = ranking_order(&scores, config.metric_used);
    let mut pairs = Vec::with_capacity(m);
    for i in 0..m {
        let (w, l) = (order[i], order[n - 1 - i]);
        if generations[w] == generations[l] {
            log::warn!("{}: best and worst sample {i} are identical; pair dropped", example.id);
            continue;
        }
        pairs.push(PreferencePair {
            example_id: example.id.clone(),
            winner: generations[w].clone(),
            loser: generations[l].clone(),
            strategy: Strategy::Ranked,
            metric_used: config.metric_used,
            winner_scores: scores[w],
            loser_scores: scores[l],
        });
    }
    Ok(pairs)
}

/// Build pairs for every condition. `batches[i]` must hold the
/// generations for `examples[i]`; output follows the input order.
pub fn curate<M: CurationMetric>(
    suite: &M,
    examples: &[&Example],
    batches: &[GenerationBatch],
    config: &CurationConfig,
    exec: Exec,
) -> Result<Vec<PreferencePair>> {
    config.validate()?;
    if examples.len() != batches.len() {
        return Err(Error::Curation(format!(
            "{} conditions but {} generation batches",
            examples.len(),
            batches.len()
        )));
    }
    let per = exec.map(examples, |i, ex| -> Result<Vec<PreferencePair>> {
        let b = &batches[i];
        if b.example_id != ex.id {
            return Err(Error::Curation(format!(
                "generation batch {} does not match condition {}",
                b.example_id, ex.id
            )));
        }
        let grids: Vec<TokenGrid> = b.samples.iter().map(|s| s.grid.clone()).collect();
        match config.strategy {
            Strategy::GtVsGen => {
                let mut rng = substream(derive_seed(config.seed, &ex.id, 0), "curation", 0);
                pair_gt_vs_gen(suite, ex, &grids, config.metric_used, &mut rng).map(|p| vec![p])
            }
            Strategy::Ranked => pair_top_bottom(suite, ex, &grids, config),
        }
    });
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

/// One supervised fine-tuning item: a condition and the grid to imitate.
#[derive(Debug, Clone, PartialEq)]
pub struct SftItem {
    pub example_id: String,
    pub target: TokenGrid,
}

/// The winners of `pairs`, in pair order.
pub fn sft_extract(pairs: &[PreferencePair]) -> Vec<SftItem> {
    pairs
        .iter()
        .map(|p| SftItem {
            example_id: p.example_id.clone(),
            target: p.winner.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subsample {
    pub pairs: Vec<PreferencePair>,
    /// Set when the budget exceeded the available pairs.
    pub exhausted: bool,
}

/// Uniform seeded subsample of `budget` pairs without replacement,
/// returned in their original order.
pub fn subsample_hours(pairs: &[PreferencePair], budget: usize, seed: u64) -> Subsample {
    if budget >= pairs.len() {
        if budget > pairs.len() {
            log::warn!("budget {budget} exceeds the {} available pairs", pairs.len());
        }
        return Subsample {
            pairs: pairs.to_vec(),
            exhausted: budget > pairs.len(),
        };
    }
    let mut rng = substream(seed, "subsample", budget as u64);
    let mut idx = index::sample(&mut rng, pairs.len(), budget).into_vec();
    idx.sort_unstable();
    Subsample {
        pairs: idx.into_iter().map(|i| pairs[i].clone()).collect(),
        exhausted: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairFileHeader {
    format_version: u32,
    config_hash: String,
    config: CurationConfig,
    pairs: usize,
}

/// Write a pair file: a header line carrying the curation config and its
/// hash, then one pair per line.
pub fn write_pairs(path: &Path, config: &CurationConfig, pairs: &[PreferencePair]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = PairFileHeader {
        format_version: 1,
        config_hash: config.hash(),
        config: config.clone(),
        pairs: pairs.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<(CurationConfig, Vec<PreferencePair>)> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines.next().ok_or_else(|| Error::parse(path, "missing header line"))??;
    let header: PairFileHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::parse(path, format!("header: {e}")))?;
    if header.config_hash != header.config.hash() {
        return Err(Error::parse(path, "config hash does not match the header config"));
    }
    let mut pairs = Vec::with_capacity(header.pairs);
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 2)))?);
    }
    if pairs.len() != header.pairs {
        return Err(Error::parse(
            path,
            format!("header announces {} pairs, found {}", header.pairs, pairs.len()),
        ));
    }
    Ok((header.config, pairs))
}

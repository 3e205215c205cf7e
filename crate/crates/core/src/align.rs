//! Direct preference optimization.
//!
//! The implicit reward of a sequence is `beta * log(P_theta / P_ref)`; the
//! partition function of the optimal-policy identity cancels between
//! winner and loser and is never computed. The reference model is a frozen
//! copy of the initial policy, so its log-posteriors on the training pairs
//! are computed once up front.
//!
//! Win rate uses a strict inequality: a pair counts as won only when the
//! winner's implicit reward is strictly larger. With policy equal to
//! reference every margin is exactly zero, so training curves start at a
//! win rate of 0, not 0.5.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::{curate, CurationConfig, PreferencePair, SftItem};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::SeenSuite;
use crate::model::{
    ce_train, clip_grad_norm, gradient, AdamW, AdamWConfig, Batcher, CeSchedule, LogPosterior, ModelState, TrainItem,
};
use crate::rng::derive_seed;
use crate::sampler::{generate_all, SamplerConfig};
use crate::seqdata::{splice, Example, SplicedSequence};

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, stable on both tails.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry preference probability `e^rw / (e^rw + e^rl)`.
pub fn bt_probability(reward_w: f64, reward_l: f64) -> f64 {
    sigmoid(reward_w - reward_l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub beta: f64,
    pub length_norm: bool,
    pub learning_rate: f64,
    pub updates: u64,
    pub batch_pairs: usize,
    pub sft_first: bool,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub clip_norm: Option<f64>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            length_norm: false,
            learning_rate: 1e-4,
            updates: 350,
            batch_pairs: 16,
            sft_first: false,
            seed: 0,
            optimizer: AdamWConfig::default(),
            clip_norm: None,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("beta", "must be a positive finite number"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if self.batch_pairs == 0 {
            return Err(Error::config("batch_pairs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Per-pair policy/reference log-ratios and the resulting margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogRatios {
    pub delta_w: f64,
    pub delta_l: f64,
    pub margin: f64,
}

impl PairLogRatios {
    pub fn new(delta_w: f64, delta_l: f64, beta: f64) -> Self {
        Self {
            delta_w,
            delta_l,
            margin: beta * (delta_w - delta_l),
        }
    }
}

/// Fraction of margins strictly above zero.
pub fn win_rate_of(ratios: &[PairLogRatios]) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().filter(|r| r.margin > 0.0).count() as f64 / ratios.len() as f64
}

/// Lookup from example id to the condition it carries.
#[derive(Debug, Clone, Default)]
pub struct Conditions<'a>(HashMap<&'a str, &'a Example>);

impl<'a> Conditions<'a> {
    pub fn new<I: IntoIterator<Item = &'a Example>>(examples: I) -> Self {
        Self(examples.into_iter().map(|e| (e.id.as_str(), e)).collect())
    }

    pub fn get(&self, id: &str) -> Result<&'a Example> {
        self.0
            .get(id)
            .copied()
            .ok_or_else(|| Error::Curation(format!("pair refers to unknown example {id}")))
    }
}

/// A pair spliced against its condition, with the frozen reference's
/// log-posteriors.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub example_id: String,
    pub winner: SplicedSequence,
    pub loser: SplicedSequence,
    pub ref_w: LogPosterior,
    pub ref_l: LogPosterior,
}

/// Splice every pair and score it once under `reference`.
pub fn prepare_pairs(
    reference: &ModelState,
    pairs: &[PreferencePair],
    conditions: &Conditions<'_>,
    exec: Exec,
) -> Result<Vec<PreparedPair>> {
    exec.map(pairs, |_, p| {
        let ex = conditions.get(&p.example_id)?;
        let winner = splice(ex, &p.winner)?;
        let loser = splice(ex, &p.loser)?;
        let name = |e: Error| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("pair {}: {m}", p.example_id)),
            other => other,
        };
        Ok(PreparedPair {
            example_id: p.example_id.clone(),
            ref_w: reference.sequence_log_posterior(&winner).map_err(name)?,
            ref_l: reference.sequence_log_posterior(&loser).map_err(name)?,
            winner,
            loser,
        })
    })
    .into_iter()
    .collect()
}

/// Policy sequences of `batch`, laid out winner, loser, winner, loser, ...
fn interleave(batch: &[&PreparedPair]) -> Vec<SplicedSequence> {
    batch
        .iter()
        .flat_map(|p| [p.winner.clone(), p.loser.clone()])
        .collect()
}

fn log_ratios(policy: &[LogPosterior], batch: &[&PreparedPair], beta: f64, length_norm: bool) -> Vec<PairLogRatios> {
    batch
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let dw = policy[2 * i].value(length_norm) - p.ref_w.value(length_norm);
            let dl = policy[2 * i + 1].value(length_norm) - p.ref_l.value(length_norm);
            PairLogRatios::new(dw, dl, beta)
        })
        .collect()
}

/// DPO loss `mean softplus(-margin)` over a batch, and its derivative with
/// respect to each interleaved policy log-posterior total.
pub fn dpo_objective(
    policy: &[LogPosterior],
    batch: &[&PreparedPair],
    beta: f64,
    length_norm: bool,
) -> Result<(f64, Vec<f64>, Vec<PairLogRatios>)> {
    let ratios = log_ratios(policy, batch, beta, length_norm);
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut coeffs = vec![0.0; policy.len()];
    for (i, r) in ratios.iter().enumerate() {
        if !r.margin.is_finite() {
            return Err(Error::NonFinite(format!(
                "margin of pair {} is {}",
                batch[i].example_id, r.margin
            )));
        }
        loss += softplus(-r.margin);
        // d softplus(-m) / dm = -sigmoid(-m)
        let dm = -sigmoid(-r.margin) / n;
        let scale = |p: &LogPosterior| if length_norm { 1.0 / p.code_count as f64 } else { 1.0 };
        coeffs[2 * i] = dm * beta * scale(&policy[2 * i]);
        coeffs[2 * i + 1] = -dm * beta * scale(&policy[2 * i + 1]);
    }
    Ok((loss / n, coeffs, ratios))
}

/// Batch DPO loss and per-pair log-ratios of `policy` against the
/// reference scores stored in `batch`.
pub fn dpo_loss(
    policy: &ModelState,
    batch: &[&PreparedPair],
    config: &AlignConfig,
    exec: Exec,
) -> Result<(f64, Vec<PairLogRatios>)> {
    let seqs = interleave(batch);
    let posts = score_all(policy, &seqs, exec)?;
    let (loss, _, ratios) = dpo_objective(&posts, batch, config.beta, config.length_norm)?;
    Ok((loss, ratios))
}

/// Loss, parameter gradient and log-ratios for one batch.
pub fn dpo_gradient(
    policy: &ModelState,
    batch: &[&PreparedPair],
    config: &AlignConfig,
    exec: Exec,
) -> Result<(f64, Vec<f64>, Vec<PairLogRatios>)> {
    let seqs = interleave(batch);
    let mut ratios = Vec::new();
    let (loss, grad, _) = gradient(
        policy,
        &seqs,
        |posts| {
            let (l, c, r) = dpo_objective(posts, batch, config.beta, config.length_norm)?;
            ratios = r;
            Ok((l, c))
        },
        exec,
    )?;
    Ok((loss, grad, ratios))
}

fn score_all(state: &ModelState, seqs: &[SplicedSequence], exec: Exec) -> Result<Vec<LogPosterior>> {
    exec.map(seqs, |_, s| state.sequence_log_posterior(s))
        .into_iter()
        .collect()
}

/// Win rate of `policy` over all prepared pairs at the given `beta`.
pub fn win_rate(policy: &ModelState, pairs: &[PreparedPair], beta: f64, length_norm: bool, exec: Exec) -> Result<f64> {
    let batch: Vec<&PreparedPair> = pairs.iter().collect();
    let posts = score_all(policy, &interleave(&batch), exec)?;
    Ok(win_rate_of(&log_ratios(&posts, &batch, beta, length_norm)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub update: u64,
    pub loss: f64,
    pub win_rate: f64,
    pub mean_margin: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// One entry per update, measured on that update's batch before the
    /// parameters move.
    pub entries: Vec<LogEntry>,
    /// Win rate over every training pair after the last update.
    pub final_win_rate: f64,
    /// Set when training stopped early on a non-finite loss or gradient;
    /// the returned state is the last good one.
    pub aborted: Option<String>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run `config.updates` AdamW steps of DPO at a constant learning rate.
/// `reference` is only read.
pub fn align_train(
    policy: &ModelState,
    pairs: &[PreparedPair],
    config: &AlignConfig,
    exec: Exec,
) -> Result<(ModelState, TrainLog)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Domain("no preference pairs to train on".into()));
    }
    let mut state = policy.clone();
    let mut opt = AdamW::new(config.optimizer, state.param_count(), state.layout().decay_mask());
    let mut batcher = Batcher::new(pairs.len(), config.batch_pairs, derive_seed(config.seed, "align-batching", 0));
    let mut log = TrainLog::default();
    for update in 0..config.updates {
        let batch: Vec<&PreparedPair> = batcher.next_batch().into_iter().map(|i| &pairs[i]).collect();
        let (loss, mut grad, ratios) = match dpo_gradient(&state, &batch, config, exec) {
            Ok(v) => v,
            Err(Error::NonFinite(m)) => {
                log::error!("alignment diverged at update {update}: {m}");
                log.aborted = Some(format!("update {update}: {m}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let grad_norm = clip_grad_norm(&mut grad, config.clip_norm);
        log.entries.push(LogEntry {
            update,
            loss,
            win_rate: win_rate_of(&ratios),
            mean_margin: ratios.iter().map(|r| r.margin).sum::<f64>() / ratios.len() as f64,
            grad_norm,
        });
        let before = state.params.clone();
        opt.step(&mut state.params, &grad, config.learning_rate);
        if state.params.iter().any(|p| !p.is_finite()) {
            state.params = before;
            log.aborted = Some(format!("update {update}: non-finite parameters"));
            break;
        }
        state.step_count += 1;
    }
    log.final_win_rate = win_rate(&state, pairs, config.beta, config.length_norm, exec)?;
    Ok((state, log))
}

/// One epoch of cross-entropy fine-tuning on SFT items with the baseline
/// schedule shape. An empty set leaves the parameters untouched.
pub fn sft_train(
    policy: &ModelState,
    items: &[SftItem],
    conditions: &Conditions<'_>,
    batch_size: usize,
    peak_lr: f64,
    exec: Exec,
) -> Result<(ModelState, Vec<f64>)> {
    if items.is_empty() {
        log::warn!("empty SFT set; parameters unchanged");
        return Ok((policy.clone(), Vec::new()));
    }
    let train: Vec<TrainItem<'_>> = items
        .iter()
        .map(|it| {
            Ok(TrainItem {
                example: conditions.get(&it.example_id)?,
                target: &it.target,
            })
        })
        .collect::<Result<_>>()?;
    let batch = batch_size.clamp(1, items.len());
    let steps = items.len().div_ceil(batch) as u64;
    ce_train(policy, &train, &CeSchedule::warmup_decay(steps, batch, peak_lr), exec)
}

/// Monte Carlo estimate of `KL(policy || reference)`: the mean over
/// samples `y ~ policy` of `log P_policy(y|x) - log P_ref(y|x)`, both
/// scored on the spliced sample including its EOS frame.
pub fn kl_estimate(
    policy: &ModelState,
    reference: &ModelState,
    conditions: &[&Example],
    sampler: &SamplerConfig,
    exec: Exec,
) -> Result<f64> {
    if conditions.is_empty() {
        return Err(Error::Domain("KL estimate needs at least one condition".into()));
    }
    let batches = generate_all(policy, conditions, sampler, exec)?;
    let mut seqs = Vec::new();
    for (ex, b) in conditions.iter().zip(&batches) {
        for s in &b.samples {
            seqs.push(splice(ex, &s.grid)?);
        }
    }
    let terms: Vec<f64> = exec
        .map(&seqs, |_, s| -> Result<f64> {
            Ok(policy.sequence_log_posterior(s)?.total - reference.sequence_log_posterior(s)?.total)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateConfig {
    pub sampler: SamplerConfig,
    pub curation: CurationConfig,
    pub align: AlignConfig,
    pub rounds: usize,
}

/// Output of one round of iterative alignment.
#[derive(Debug, Clone)]
pub struct Round {
    pub state: ModelState,
    /// Content hash of the frozen reference used in this round.
    pub reference_hash: String,
    pub pairs: usize,
    pub log: TrainLog,
}

/// Repeated generate → curate → align, each round using the previous
/// round's model as both sampler and frozen reference. Stops early (and
/// returns the completed rounds) when a round diverges.
pub fn iterate(
    initial: &ModelState,
    conditions: &[&Example],
    config: &IterateConfig,
    exec: Exec,
) -> Result<Vec<Round>> {
    if config.rounds == 0 {
        return Err(Error::config("rounds", "must be at least 1"));
    }
    let lookup = Conditions::new(conditions.iter().copied());
    let mut rounds: Vec<Round> = Vec::new();
    for r in 0..config.rounds {
        let reference = rounds.last().map(|x| &x.state).unwrap_or(initial).clone();
        let sampler = SamplerConfig {
            seed: derive_seed(config.sampler.seed, "round", r as u64),
            ..config.sampler.clone()
        };
        let batches = generate_all(&reference, conditions, &sampler, exec)?;
        let curation = CurationConfig {
            seed: derive_seed(config.curation.seed, "round", r as u64),
            ..config.curation.clone()
        };
        let pairs = curate(&SeenSuite, conditions, &batches, &curation, exec)?;
        let prepared = prepare_pairs(&reference, &pairs, &lookup, exec)?;
        let align = AlignConfig {
            seed: derive_seed(config.align.seed, "round", r as u64),
            ..config.align.clone()
        };
        let (state, log) = align_train(&reference, &prepared, &align, exec)?;
        let diverged = log.aborted.is_some();
        rounds.push(Round {
            state,
            reference_hash: reference.content_hash(),
            pairs: pairs.len(),
            log,
        });
        if diverged {
            log::warn!("round {r} diverged; stopping");
            break;
        }
    }
    Ok(rounds)
}

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{backward_scored, forward_scored, AdamW, AdamWConfig, LogPosterior, LrSchedule, ModelState};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive_seed, Rng};
use crate::seqdata::{splice, Example, SplicedSequence, TokenGrid};

/// A conditioning example paired with the grid to learn.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub example: &'a Example,
    pub target: &'a TokenGrid,
}

impl<'a> TrainItem<'a> {
    pub fn ground_truth(example: &'a Example) -> Self {
        Self {
            example,
            target: &example.target_grid,
        }
    }

    pub fn splice(&self) -> Result<SplicedSequence> {
        splice(self.example, self.target)
    }
}

/// Loss value and parameter gradient of an objective defined on sequence
/// log-posteriors.
///
/// `objective` maps the batch's log-posteriors to `(loss, dL/d total_i)`;
/// every supported loss (cross-entropy, DPO, length-normalised DPO, SFT)
/// has that form. Per-sequence gradients are summed in input order.
pub fn gradient<F>(
    state: &ModelState,
    seqs: &[SplicedSequence],
    objective: F,
    exec: Exec,
) -> Result<(f64, Vec<f64>, Vec<LogPosterior>)>
where
    F: FnOnce(&[LogPosterior]) -> Result<(f64, Vec<f64>)>,
{
    let net = state.network();
    let forwards: Vec<_> = exec
        .map(seqs, |_, s| forward_scored(net, s))
        .into_iter()
        .collect::<Result<_>>()?;
    let posts: Vec<LogPosterior> = forwards.iter().map(|(lp, _)| *lp).collect();
    let (loss, coeffs) = objective(&posts)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let n = state.param_count();
    let parts = exec.map(seqs, |i, s| {
        if coeffs[i] == 0.0 {
            return None;
        }
        let mut g = vec![0.0; n];
        backward_scored(net, s, &forwards[i].1, coeffs[i], &mut g);
        Some(g)
    });
    let mut grad = vec![0.0; n];
    for g in parts.into_iter().flatten() {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} (index {i})",
            state.layout().name_of(i)
        )));
    }
    Ok((loss, grad, posts))
}

/// Mean negative log-probability per code: `-sum total / sum count`.
pub fn cross_entropy(posts: &[LogPosterior]) -> Result<(f64, Vec<f64>)> {
    let count: usize = posts.iter().map(|p| p.code_count).sum();
    if count == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let total: f64 = posts.iter().map(|p| p.total).sum();
    let c = -1.0 / count as f64;
    Ok((-total / count as f64, vec![c; posts.len()]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeSchedule {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl CeSchedule {
    /// Warmup then exponential decay over `steps`.
    pub fn warmup_decay(steps: u64, batch_size: usize, peak: f64) -> Self {
        Self {
            steps,
            batch_size,
            lr: LrSchedule {
                peak,
                warmup_steps: (steps / 20).max(1),
                total_steps: steps,
                final_ratio: 0.05,
            },
            optimizer: AdamWConfig::default(),
            clip_norm: Some(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr.peak >= 0.0 && self.lr.peak.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn clip_grad_norm(grad: &mut [f64], max_norm: Option<f64>) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let Some(m) = max_norm {
        if norm > m {
            let s = m / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Epoch-shuffled batches of item indices, seeded from `rng_state`.
pub struct Batcher {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Self {
            n,
            batch: batch.min(n).max(1),
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng: Rng = rand::SeedableRng::seed_from_u64(derive_seed(self.seed, "epoch", self.epoch));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let b = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        b
    }
}

/// Cross-entropy training on `items`. Returns the trained state and the
/// per-step batch loss.
pub fn ce_train(
    state: &ModelState,
    items: &[TrainItem<'_>],
    schedule: &CeSchedule,
    exec: Exec,
) -> Result<(ModelState, Vec<f64>)> {
    schedule.validate()?;
    if items.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut state = state.clone();
    let mut opt = AdamW::new(schedule.optimizer, state.param_count(), state.layout().decay_mask());
    let mut batcher = Batcher::new(items.len(), schedule.batch_size, state.rng_state);
    let mut trace = Vec::with_capacity(schedule.steps as usize);
    for step in 0..schedule.steps {
        let batch = batcher.next_batch();
        let seqs: Vec<SplicedSequence> = batch
            .iter()
            .map(|&i| items[i].splice())
            .collect::<Result<_>>()?;
        let (loss, mut grad, _) = gradient(&state, &seqs, cross_entropy, exec).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("cross-entropy step {step}: {m}")),
            other => other,
        })?;
        clip_grad_norm(&mut grad, schedule.clip_norm);
        opt.step(&mut state.params, &grad, schedule.lr.at(step));
        state.step_count += 1;
        trace.push(loss);
    }
    state.rng_state = derive_seed(state.rng_state, "batching", state.step_count);
    Ok((state, trace))
}

/// Mean per-code negative log-probability of `items` under `state`.
pub fn mean_code_loss(state: &ModelState, items: &[TrainItem<'_>], exec: Exec) -> Result<f64> {
    let net = state.network();
    let posts: Vec<LogPosterior> = exec
        .map(items, |_, it| {
            let s = it.splice()?;
            forward_scored(net, &s).map(|(lp, _)| lp)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    cross_entropy(&posts).map(|(l, _)| l)
}

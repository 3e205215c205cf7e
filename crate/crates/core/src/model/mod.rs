//! Miniature multi-scale transformer over spliced token grids.

mod checkpoint;
mod config;
mod decode;
mod layout;
mod network;
pub mod ops;
mod optim;
mod train;

use std::sync::Arc;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC};
pub use config::ModelConfig;
pub use decode::Decoder;
pub use layout::{BlockIdx, Layout, ParamEntry, ParamKind};
pub use network::{ForwardCache, Network};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use train::{ce_train, clip_grad_norm, cross_entropy, gradient, Batcher, mean_code_loss, CeSchedule, TrainItem};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::seqdata::SplicedSequence;

/// Sequence log-posterior: the sum of code log-probabilities over the
/// loss-masked rows, visited row by row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPosterior {
    pub total: f64,
    pub code_count: usize,
    pub normalized: f64,
}

impl LogPosterior {
    pub fn new(total: f64, code_count: usize) -> Self {
        Self {
            total,
            code_count,
            normalized: total / code_count as f64,
        }
    }

    /// Either the raw or the per-code normalized value.
    pub fn value(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.normalized
        } else {
            self.total
        }
    }
}

/// Trainable parameters plus the metadata needed to reproduce them.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub step_count: u64,
    pub seed: u64,
    /// Seed of the next batching stream; advanced by trainers.
    pub rng_state: u64,
    layout: Arc<Layout>,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.step_count == other.step_count
            && self.seed == other.seed
            && self.rng_state == other.rng_state
    }
}

/// Fresh model with parameters drawn from the scaled-uniform scheme.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let layout = Layout::new(config);
    let params = layout.init(config, &mut substream(seed, "init", 0));
    Ok(ModelState {
        config: config.clone(),
        params,
        step_count: 0,
        seed,
        rng_state: crate::rng::derive_seed(seed, "batching", 0),
        layout: Arc::new(layout),
    })
}

/// Logits for every code of rows `1..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLogits {
    pub rows: Vec<usize>,
    pub n_q: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl RowLogits {
    pub fn at(&self, row: usize, j: usize) -> &[f64] {
        let k = self.rows.iter().position(|&r| r == row).expect("row has logits");
        let r = k * self.n_q + j;
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }
}

impl ModelState {
    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<f64>,
        step_count: u64,
        seed: u64,
        rng_state: u64,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if layout.total != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match layout {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            params,
            step_count,
            seed,
            rng_state,
            layout: Arc::new(layout),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn network(&self) -> Network<'_> {
        Network::new(&self.config, &self.layout, &self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 of the parameter bytes and metadata, hex encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.step_count.to_le_bytes());
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn forward_logits(&self, seq: &SplicedSequence) -> Result<RowLogits> {
        let rows: Vec<usize> = (1..seq.len()).collect();
        let cache = self.network().forward(seq, &rows)?;
        Ok(RowLogits {
            rows,
            n_q: self.config.n_q,
            vocab: self.config.audio_vocab,
            data: cache.logits,
        })
    }

    pub fn sequence_log_posterior(&self, seq: &SplicedSequence) -> Result<LogPosterior> {
        forward_scored(self.network(), seq).map(|(lp, _)| lp)
    }
}

/// Forward pass over the loss-masked rows of `seq`, returning the
/// log-posterior and the activations needed by [`backward_scored`].
pub(crate) fn forward_scored(net: Network<'_>, seq: &SplicedSequence) -> Result<(LogPosterior, ForwardCache)> {
    let rows: Vec<usize> = seq.masked_rows().collect();
    if rows.is_empty() {
        return Err(Error::Domain("loss mask is empty".into()));
    }
    let cache = net.forward(seq, &rows)?;
    let (nq, v) = (net.cfg.n_q, net.cfg.audio_vocab);
    let mut logp = vec![0.0; v];
    let mut total = 0.0;
    for (k, &t) in rows.iter().enumerate() {
        for (j, &code) in seq.row(t).iter().enumerate() {
            let r = k * nq + j;
            ops::log_softmax(&cache.logits[r * v..(r + 1) * v], &mut logp);
            total += logp[code as usize];
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("sequence log-posterior {total}")));
    }
    Ok((LogPosterior::new(total, rows.len() * nq), cache))
}

/// Accumulate `coeff * d total / d params` into `grad`.
pub(crate) fn backward_scored(
    net: Network<'_>,
    seq: &SplicedSequence,
    cache: &ForwardCache,
    coeff: f64,
    grad: &mut [f64],
) {
    let (nq, v) = (net.cfg.n_q, net.cfg.audio_vocab);
    let mut dlogits = vec![0.0; cache.logits.len()];
    let mut logp = vec![0.0; v];
    for (k, &t) in cache.predicted().iter().enumerate() {
        for (j, &code) in seq.row(t).iter().enumerate() {
            let r = k * nq + j;
            ops::log_softmax(&cache.logits[r * v..(r + 1) * v], &mut logp);
            for (c, d) in dlogits[r * v..(r + 1) * v].iter_mut().enumerate() {
                let onehot = if c == code as usize { 1.0 } else { 0.0 };
                *d = coeff * (onehot - logp[c].exp());
            }
        }
    }
    net.backward(seq, cache, &dlogits, grad);
}

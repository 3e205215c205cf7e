//! Top-k temperature sampling and batched candidate generation.
//!
//! Every sample of a batch draws from its own substream, derived from the
//! master seed, the example id and the sample index, so a batch is
//! reproducible and independent of how samples are scheduled.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{Decoder, LogPosterior, ModelState};
use crate::rng::{derive_seed, substream, Rng};
use crate::seqdata::{splice_prefix, Example, Segment, TokenGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_frames: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 30,
            temperature: 1.2,
            max_frames: 16,
            n_samples: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be a positive finite number"));
        }
        if self.max_frames == 0 {
            return Err(Error::config("max_frames", "must be at least 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be at least 1"));
        }
        Ok(())
    }

    /// `k` clamped to the vocabulary.
    pub fn effective_k(&self, vocab: usize) -> usize {
        self.k.clamp(1, vocab)
    }
}

/// Indices of the `k` largest logits; equal logits are ordered by lower
/// index first, so the boundary of the top-k set is deterministic.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    ranked(logits, k, None)
}

fn ranked(logits: &[f64], k: usize, banned: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).filter(|&i| Some(i) != banned).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.clamp(1, idx.len()));
    idx
}

/// The full sampling distribution: temperature-scaled softmax restricted to
/// the top-k set, zero elsewhere.
pub fn top_k_distribution(logits: &[f64], k: usize, temperature: f64) -> Result<Vec<f64>> {
    distribution(logits, k, temperature, None)
}

fn distribution(logits: &[f64], k: usize, temperature: f64, banned: Option<usize>) -> Result<Vec<f64>> {
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
    }
    let keep = ranked(logits, k, banned);
    let max = logits[keep[0]] / temperature;
    let mut probs = vec![0.0; logits.len()];
    let mut z = 0.0;
    for &i in &keep {
        let p = (logits[i] / temperature - max).exp();
        probs[i] = p;
        z += p;
    }
    for &i in &keep {
        probs[i] /= z;
    }
    Ok(probs)
}

fn draw(probs: &[f64], rng: &mut Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i as u32;
            }
        }
    }
    // Rounding left `acc` a hair below 1.
    last as u32
}

/// Draw one code from the top-k temperature distribution of `logits`.
pub fn sample_code(logits: &[f64], config: &SamplerConfig, rng: &mut Rng) -> Result<u32> {
    let probs = top_k_distribution(logits, config.effective_k(logits.len()), config.temperature)?;
    Ok(draw(&probs, rng))
}

/// One generated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub example_id: String,
    pub sample_index: usize,
    pub grid: TokenGrid,
    /// Log-probability of the sampled codes under the untempered,
    /// unrestricted model, including the EOS frame when terminated.
    pub log_posterior: f64,
    pub code_count: usize,
    pub terminated: bool,
}

impl Generation {
    pub fn posterior(&self) -> LogPosterior {
        LogPosterior::new(self.log_posterior, self.code_count)
    }
}

/// All samples for one condition, ordered by sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationBatch {
    pub example_id: String,
    pub samples: Vec<Generation>,
}

impl GenerationBatch {
    /// True when no sample reached EOS within `max_frames`.
    pub fn none_terminated(&self) -> bool {
        !self.samples.iter().any(|s| s.terminated)
    }

    pub fn grids(&self) -> Vec<&TokenGrid> {
        self.samples.iter().map(|s| &s.grid).collect()
    }
}

fn log_prob(logits: &[f64], code: u32) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[code as usize] - max - z.ln()
}

fn sample_one(state: &ModelState, example: &Example, config: &SamplerConfig, index: usize) -> Result<Generation> {
    let cfg = &state.config;
    let eos = cfg.eos_code();
    let k = config.effective_k(cfg.audio_vocab);
    let mut dec = Decoder::new(state.network(), &splice_prefix(example)?)?;
    let mut rng = substream(derive_seed(config.seed, &example.id, 0), "sampler", index as u64);
    let mut codes = Vec::new();
    let mut total = 0.0;
    let mut terminated = false;
    let mut frame = vec![0u32; cfg.n_q];
    // One frame past `max_frames` is drawn so a full-length sample can
    // still terminate; anything else there is truncated.
    for f in 0..=config.max_frames {
        let mut frame_lp = 0.0;
        for j in 0..cfg.n_q {
            let logits = dec.code_logits(&frame[..j], j);
            // A grid has at least one frame, so EOS cannot open the output.
            let banned = (f == 0 && j == 0).then_some(eos as usize);
            frame[j] = draw(&distribution(&logits, k, config.temperature, banned)?, &mut rng);
            frame_lp += log_prob(&logits, frame[j]);
        }
        if frame.iter().all(|&c| c == eos) {
            total += frame_lp;
            terminated = true;
            break;
        }
        if f == config.max_frames {
            break;
        }
        total += frame_lp;
        codes.extend_from_slice(&frame);
        dec.push_row(Segment::Target, f, &frame)?;
    }
    let frames = codes.len() / cfg.n_q;
    Ok(Generation {
        example_id: example.id.clone(),
        sample_index: index,
        grid: TokenGrid::new(cfg.n_q, codes)?,
        log_posterior: total,
        code_count: (frames + usize::from(terminated)) * cfg.n_q,
        terminated,
    })
}

/// Generate `config.n_samples` candidates for one condition.
pub fn generate(state: &ModelState, example: &Example, config: &SamplerConfig, exec: Exec) -> Result<GenerationBatch> {
    config.validate()?;
    let samples: Result<Vec<_>> = exec
        .map_range(config.n_samples, |i| sample_one(state, example, config, i))
        .into_iter()
        .collect();
    Ok(GenerationBatch {
        example_id: example.id.clone(),
        samples: samples?,
    })
}

/// Generate for many conditions; the output follows the input order.
pub fn generate_all(
    state: &ModelState,
    examples: &[&Example],
    config: &SamplerConfig,
    exec: Exec,
) -> Result<Vec<GenerationBatch>> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..examples.len())
        .flat_map(|e| (0..config.n_samples).map(move |i| (e, i)))
        .collect();
    let mut flat = exec
        .map(&jobs, |_, &(e, i)| sample_one(state, examples[e], config, i))
        .into_iter();
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let samples: Result<Vec<_>> = flat.by_ref().take(config.n_samples).collect();
        out.push(GenerationBatch {
            example_id: ex.id.clone(),
            samples: samples?,
        });
    }
    Ok(out)
}

/// Write a generation dump, one sample per line.
pub fn write_generations(path: &Path, batches: &[GenerationBatch]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in batches.iter().flat_map(|b| &b.samples) {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a generation dump, regrouping consecutive samples by example id.
pub fn read_generations(path: &Path) -> Result<Vec<GenerationBatch>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut out: Vec<GenerationBatch> = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: Generation =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        match out.last_mut() {
            Some(b) if b.example_id == g.example_id => b.samples.push(g),
            _ => out.push(GenerationBatch {
                example_id: g.example_id.clone(),
                samples: vec![g],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::seqdata::{splice, synth_example};

    fn cfg(k: usize, temperature: f64) -> SamplerConfig {
        SamplerConfig {
            k,
            temperature,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn k_one_is_argmax() {
        let logits = [0.1, 2.0, -1.0, 2.0];
        for s in 0..20 {
            let mut rng = substream(s, "t", 0);
            assert_eq!(sample_code(&logits, &cfg(1, 1.2), &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn two_way_probability_matches_closed_form() {
        let p = top_k_distribution(&[2.0, 1.0], 2, 1.2).unwrap();
        let sigma = 1.0 / (1.0 + (-1.0f64 / 1.2).exp());
        assert!((p[0] - sigma).abs() < 1e-15);
        assert!((p[0] - 0.697_1).abs() < 1e-4);
    }

    #[test]
    fn temperature_flattens_two_way_distribution() {
        let mut prev = 1.0;
        for t in [0.5, 0.8, 1.0, 1.2, 2.0, 5.0] {
            let p = top_k_distribution(&[1.5, 0.2], 2, t).unwrap()[0];
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ties_at_the_boundary_prefer_low_indices() {
        assert_eq!(top_k_indices(&[0.0; 6], 3), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
    }

    #[test]
    fn codes_outside_top_k_are_never_drawn() {
        let logits: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let keep = top_k_indices(&logits, 4);
        let mut rng = substream(1, "t", 0);
        for _ in 0..100_000 {
            let c = sample_code(&logits, &cfg(4, 1.2), &mut rng).unwrap() as usize;
            assert!(keep.contains(&c));
        }
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let mut rng = substream(0, "t", 0);
        assert!(sample_code(&[0.0, f64::NAN], &cfg(2, 1.0), &mut rng).is_err());
    }

    fn small_config() -> SamplerConfig {
        SamplerConfig {
            n_samples: 4,
            max_frames: 8,
            seed: 3,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn generation_is_reproducible_and_valid() {
        let state = init_model(&ModelConfig::tiny(), 0).unwrap();
        let ex = synth_example(&[1, 2, 3], 0, 0, 0.05).unwrap();
        let c = small_config();
        let a = generate(&state, &ex, &c, Exec::Sequential).unwrap();
        let b = generate(&state, &ex, &c, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 4);
        for s in &a.samples {
            assert!(s.grid.frames() >= 1 && s.grid.frames() <= c.max_frames);
            s.grid.validate(64).unwrap();
        }
        let all = generate_all(&state, &[&ex, &ex], &c, Exec::Parallel).unwrap();
        assert_eq!(all[0], a);
        assert_eq!(all[1], a);
    }

    #[test]
    fn reported_posterior_matches_rescoring() {
        let mut state = init_model(&ModelConfig::tiny(), 4).unwrap();
        // Bias toward EOS so that some samples terminate early.
        let head_b = state.layout().entry("head.b").unwrap().offset;
        state.params[head_b + 63] = 3.0;
        state.params[head_b + 64 + 63] = 6.0;
        let ex = synth_example(&[4, 5], 1, 0, 0.05).unwrap();
        let batch = generate(&state, &ex, &small_config(), Exec::Sequential).unwrap();
        let mut checked = 0;
        for s in batch.samples.iter().filter(|s| s.terminated) {
            let lp = state.sequence_log_posterior(&splice(&ex, &s.grid).unwrap()).unwrap();
            assert!((lp.total - s.log_posterior).abs() < 1e-9);
            assert_eq!(lp.code_count, s.code_count);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn all_mass_on_eos_gives_single_frame() {
        let mut state = init_model(&ModelConfig::tiny(), 0).unwrap();
        state.params.iter_mut().for_each(|p| *p = 0.0);
        let head_b = state.layout().entry("head.b").unwrap().offset;
        for j in 0..2 {
            state.params[head_b + j * 64 + 63] = 100.0;
        }
        let ex = synth_example(&[7, 8, 9], 2, 0, 0.05).unwrap();
        let batch = generate(&state, &ex, &small_config(), Exec::Sequential).unwrap();
        for s in &batch.samples {
            assert_eq!(s.grid.frames(), 1);
            assert!(s.terminated);
        }
        assert!(!batch.none_terminated());
    }

    #[test]
    fn dump_round_trips() {
        let state = init_model(&ModelConfig::tiny(), 0).unwrap();
        let e1 = synth_example(&[1, 2], 0, 0, 0.05).unwrap();
        let mut e2 = synth_example(&[3, 4], 1, 0, 0.05).unwrap();
        e2.id = "other".into();
        let batches = generate_all(&state, &[&e1, &e2], &small_config(), Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gen.jsonl");
        write_generations(&p, &batches).unwrap();
        assert_eq!(read_generations(&p).unwrap(), batches);
    }
}

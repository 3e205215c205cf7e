//! Evaluation and experiment orchestration.
//!
//! [`evaluate`] samples `n_samples` candidates per condition, scores each
//! with a metric suite, averages over the samples of a condition and then
//! over conditions. [`run_experiment`] chains curation, optional SFT,
//! alignment and evaluation for every seed of an [`ExperimentSpec`] and
//! writes content-addressed artifacts plus a manifest that links them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{align_train, kl_estimate, prepare_pairs, sft_train, AlignConfig, Conditions, TrainLog};
use crate::curation::{curate, sft_extract, subsample_hours, write_pairs, CurationConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{MetricScores, MetricSuite, SeenSuite, UnseenSuite};
use crate::model::{checkpoint_bytes, load_checkpoint, ModelState};
use crate::rng::derive_seed;
use crate::sampler::{generate_all, write_generations, GenerationBatch, SamplerConfig};
use crate::seqdata::{Dataset, Example, Split};

/// Split-level means of one metric suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    pub suite: String,
    pub conditions: usize,
    pub wer: f64,
    pub spk_sim: f64,
    pub mos: f64,
    /// Mean of generated frames / ground-truth frames.
    pub length_ratio: f64,
    /// Fraction of samples that ended with an EOS frame.
    pub terminated: f64,
}

impl SplitReport {
    pub fn scores(&self) -> MetricScores {
        MetricScores {
            wer: self.wer,
            spk_sim: self.spk_sim,
            mos: self.mos,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Score a generation dump: per condition, average over its samples; then
/// average the per-condition values over conditions.
pub fn report_from_dump<S: MetricSuite + ?Sized>(
    suite: &S,
    split: Split,
    examples: &[&Example],
    batches: &[GenerationBatch],
    exec: Exec,
) -> Result<SplitReport> {
    if examples.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty split".into()));
    }
    if examples.len() != batches.len() {
        return Err(Error::Domain(format!(
            "{} conditions but {} generation batches",
            examples.len(),
            batches.len()
        )));
    }
    let per: Vec<[f64; 5]> = exec.map(examples, |i, ex| {
        let b = &batches[i];
        let gt = ex.target_grid.frames() as f64;
        let s: Vec<MetricScores> = b
            .samples
            .iter()
            .map(|g| suite.score(&g.grid, &ex.ref_grid, &ex.text))
            .collect();
        [
            mean(s.iter().map(|m| m.wer)),
            mean(s.iter().map(|m| m.spk_sim)),
            mean(s.iter().map(|m| m.mos)),
            mean(b.samples.iter().map(|g| g.grid.frames() as f64 / gt)),
            mean(b.samples.iter().map(|g| if g.terminated { 1.0 } else { 0.0 })),
        ]
    });
    Ok(SplitReport {
        split,
        suite: suite.name().to_string(),
        conditions: examples.len(),
        wer: mean(per.iter().map(|p| p[0])),
        spk_sim: mean(per.iter().map(|p| p[1])),
        mos: mean(per.iter().map(|p| p[2])),
        length_ratio: mean(per.iter().map(|p| p[3])),
        terminated: mean(per.iter().map(|p| p[4])),
    })
}

/// Generate for every condition of a split and score the samples.
pub fn evaluate<S: MetricSuite + ?Sized>(
    state: &ModelState,
    split: Split,
    examples: &[&Example],
    sampler: &SamplerConfig,
    suite: &S,
    exec: Exec,
) -> Result<(SplitReport, Vec<GenerationBatch>)> {
    let batches = generate_all(state, examples, sampler, exec)?;
    let report = report_from_dump(suite, split, examples, &batches, exec)?;
    Ok((report, batches))
}

/// Score the ground-truth grids themselves, bypassing generation.
pub fn evaluate_ground_truth<S: MetricSuite + ?Sized>(suite: &S, split: Split, examples: &[&Example]) -> Result<SplitReport> {
    let batches: Vec<GenerationBatch> = examples
        .iter()
        .map(|ex| GenerationBatch {
            example_id: ex.id.clone(),
            samples: vec![crate::sampler::Generation {
                example_id: ex.id.clone(),
                sample_index: 0,
                grid: ex.target_grid.clone(),
                log_posterior: 0.0,
                code_count: ex.target_grid.codes().len(),
                terminated: true,
            }],
        })
        .collect();
    report_from_dump(suite, split, examples, &batches, Exec::Sequential)
}

/// Reports of one model on one split under both metric suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub seen: SplitReport,
    pub unseen: SplitReport,
}

/// Evaluate on every split in `splits`, under both suites, from one shared
/// set of generations per split.
pub fn evaluate_splits(
    state: &ModelState,
    dataset: &Dataset,
    splits: &[Split],
    sampler: &SamplerConfig,
    exec: Exec,
) -> Result<Vec<EvalEntry>> {
    splits
        .iter()
        .map(|&split| {
            let exs = dataset.split(split);
            let sampler = SamplerConfig {
                seed: derive_seed(sampler.seed, split.tag(), 0),
                ..sampler.clone()
            };
            let (seen, batches) = evaluate(state, split, &exs, &sampler, &SeenSuite, exec)?;
            let unseen = report_from_dump(&UnseenSuite, split, &exs, &batches, exec)?;
            Ok(EvalEntry { seen, unseen })
        })
        .collect()
}

/// One experiment of the grid (A2, B3, D3, E1, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub label: String,
    pub curation: CurationConfig,
    pub align: AlignConfig,
    /// Pair budget after curation; `None` keeps every pair.
    pub budget: Option<usize>,
    pub eval_splits: Vec<Split>,
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty() {
            return Err(Error::config("label", "must be non-empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        self.curation.validate()?;
        self.align.validate()
    }
}

/// Inputs shared by every experiment of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentContext {
    pub dataset: PathBuf,
    /// Baseline checkpoint per seed, in the order of `ExperimentSpec::seeds`;
    /// a single entry is shared by all seeds.
    pub baselines: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub sampler: SamplerConfig,
    /// Sampler used for the KL estimate.
    pub kl_sampler: SamplerConfig,
    /// Number of train-split conditions to generate preference pairs on.
    pub train_conditions: usize,
    pub sft_batch: usize,
    pub sft_lr: f64,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub baseline_hash: String,
    pub pairs: usize,
    pub pairs_file: String,
    pub checkpoint: String,
    pub checkpoint_hash: String,
    pub train_log: String,
    pub win_rate_final: f64,
    pub kl_estimate: f64,
    pub reports: Vec<EvalEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub label: String,
    pub spec: ExperimentSpec,
    pub context: ExperimentContext,
    pub dataset_hash: String,
    pub runs: Vec<SeedRun>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Store `bytes` under `dir/artifacts/<hash>.<ext>` unless an identical file
/// is already there; returns the path relative to `dir`.
pub fn put_artifact(dir: &Path, bytes: &[u8], ext: &str) -> Result<String> {
    let rel = format!("artifacts/{}.{ext}", sha256_hex(bytes));
    let path = dir.join(&rel);
    if !path.exists() {
        std::fs::create_dir_all(dir.join("artifacts"))?;
        let tmp = path.with_extension(format!("{ext}.tmp"));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
    }
    Ok(rel)
}

fn file_artifact(dir: &Path, write: impl FnOnce(&Path) -> Result<()>, ext: &str) -> Result<String> {
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    write(tmp.path())?;
    let bytes = std::fs::read(tmp.path())?;
    put_artifact(dir, &bytes, ext)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    Ok(sha256_hex(&bytes))
}

/// Curate → (SFT) → align → evaluate for every seed of `spec`.
///
/// Every referenced input is checked before any training starts.
pub fn run_experiment(spec: &ExperimentSpec, ctx: &ExperimentContext) -> Result<Manifest> {
    spec.validate()?;
    for p in std::iter::once(&ctx.dataset).chain(&ctx.baselines) {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    if ctx.baselines.is_empty() || (ctx.baselines.len() != 1 && ctx.baselines.len() != spec.seeds.len()) {
        return Err(Error::config("baselines", "give one checkpoint, or one per seed"));
    }
    let dataset = Dataset::read(&ctx.dataset)?;
    let dataset_hash = hash_file(&ctx.dataset)?;
    std::fs::create_dir_all(&ctx.output_dir)?;
    let conditions = Conditions::new(&dataset.examples);
    let train: Vec<&Example> = dataset
        .split(Split::Train)
        .into_iter()
        .take(ctx.train_conditions)
        .collect();
    let mut runs = Vec::new();
    for (k, &seed) in spec.seeds.iter().enumerate() {
        let base_path = &ctx.baselines[if ctx.baselines.len() == 1 { 0 } else { k }];
        let baseline = load_checkpoint(base_path, None)?;
        log::info!("{} seed {seed}: generating on {} conditions", spec.label, train.len());
        let sampler = SamplerConfig {
            seed: derive_seed(seed, "sampler", 0),
            ..ctx.sampler.clone()
        };
        let batches = generate_all(&baseline, &train, &sampler, ctx.exec)?;
        file_artifact(&ctx.output_dir, |p| write_generations(p, &batches), "gen.jsonl")?;
        let curation = CurationConfig {
            seed: derive_seed(seed, "curation", 0),
            ..spec.curation.clone()
        };
        let mut pairs = curate(&SeenSuite, &train, &batches, &curation, ctx.exec)?;
        if let Some(b) = spec.budget {
            pairs = subsample_hours(&pairs, b, derive_seed(seed, "budget", 0)).pairs;
        }
        let pairs_file = file_artifact(&ctx.output_dir, |p| write_pairs(p, &curation, &pairs), "pairs.jsonl")?;
        let align = AlignConfig {
            seed: derive_seed(seed, "batching", 0),
            ..spec.align.clone()
        };
        let start = if align.sft_first {
            sft_train(&baseline, &sft_extract(&pairs), &conditions, ctx.sft_batch, ctx.sft_lr, ctx.exec)?.0
        } else {
            baseline.clone()
        };
        let (policy, log) = if align.updates == 0 {
            (start.clone(), TrainLog::default())
        } else {
            let prepared = prepare_pairs(&start, &pairs, &conditions, ctx.exec)?;
            align_train(&start, &prepared, &align, ctx.exec)?
        };
        let ckpt = checkpoint_bytes(&policy);
        let checkpoint = put_artifact(&ctx.output_dir, &ckpt, "ckpt")?;
        let train_log = file_artifact(&ctx.output_dir, |p| log.write_jsonl(p), "log.jsonl")?;
        let kl_sampler = SamplerConfig {
            seed: derive_seed(seed, "kl", 0),
            ..ctx.kl_sampler.clone()
        };
        let kl = kl_estimate(&policy, &start, &train, &kl_sampler, ctx.exec)?;
        let eval_sampler = SamplerConfig {
            seed: derive_seed(seed, "eval", 0),
            ..ctx.sampler.clone()
        };
        let reports = evaluate_splits(&policy, &dataset, &spec.eval_splits, &eval_sampler, ctx.exec)?;
        runs.push(SeedRun {
            seed,
            baseline_hash: baseline.content_hash(),
            pairs: pairs.len(),
            pairs_file,
            checkpoint_hash: sha256_hex(&ckpt),
            checkpoint,
            train_log,
            win_rate_final: log.final_win_rate,
            kl_estimate: kl,
            reports,
        });
    }
    let manifest = Manifest {
        label: spec.label.clone(),
        spec: spec.clone(),
        context: ctx.clone(),
        dataset_hash,
        runs,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    let dir = ctx.output_dir.join("manifests");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{}.json", spec.label)), bytes)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))
}

/// Comparison table: one row per (label, split, suite), averaged over seeds.
pub fn render_report_csv(rows: &[(String, Vec<EvalEntry>, Option<f64>, Option<f64>)]) -> String {
    let mut out = String::from("label,split,suite,wer,spk_sim,mos,length_ratio,win_rate_final,kl_estimate\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (label, entries, win, kl) in rows {
        for e in entries {
            for r in [&e.seen, &e.unseen] {
                out.push_str(&format!(
                    "{label},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                    r.split.tag(),
                    r.suite,
                    r.wer,
                    r.spk_sim,
                    r.mos,
                    r.length_ratio,
                    opt(*win),
                    opt(*kl)
                ));
            }
        }
    }
    out
}

/// Seed-averaged rows of a manifest.
fn manifest_rows(m: &Manifest) -> (Vec<EvalEntry>, f64, f64) {
    let n = m.runs.len() as f64;
    let avg = |f: &dyn Fn(&SplitReport) -> f64, i: usize, seen: bool| {
        m.runs
            .iter()
            .map(|r| f(if seen { &r.reports[i].seen } else { &r.reports[i].unseen }))
            .sum::<f64>()
            / n
    };
    let first = &m.runs[0].reports;
    let entries = (0..first.len())
        .map(|i| {
            let mk = |seen: bool| {
                let base = if seen { &first[i].seen } else { &first[i].unseen };
                SplitReport {
                    wer: avg(&|r| r.wer, i, seen),
                    spk_sim: avg(&|r| r.spk_sim, i, seen),
                    mos: avg(&|r| r.mos, i, seen),
                    length_ratio: avg(&|r| r.length_ratio, i, seen),
                    terminated: avg(&|r| r.terminated, i, seen),
                    ..base.clone()
                }
            };
            EvalEntry {
                seen: mk(true),
                unseen: mk(false),
            }
        })
        .collect();
    let win = m.runs.iter().map(|r| r.win_rate_final).sum::<f64>() / n;
    let kl = m.runs.iter().map(|r| r.kl_estimate).sum::<f64>() / n;
    (entries, win, kl)
}

/// Render manifests into `report.csv`, a human-readable `report.txt` and one
/// training-curve CSV per (label, seed) under `out_dir`. Output depends only
/// on the manifests and the artifacts they reference.
pub fn report_render(manifests: &[PathBuf], out_dir: &Path) -> Result<String> {
    let mut rows = Vec::new();
    std::fs::create_dir_all(out_dir)?;
    let mut loaded: BTreeMap<String, (PathBuf, Manifest)> = BTreeMap::new();
    for p in manifests {
        let m = read_manifest(p)?;
        if m.runs.is_empty() {
            return Err(Error::parse(p, "manifest lists no runs"));
        }
        loaded.insert(m.label.clone(), (p.clone(), m));
    }
    for (label, (path, m)) in &loaded {
        let (entries, win, kl) = manifest_rows(m);
        let no_updates = m.spec.align.updates == 0;
        rows.push((
            label.clone(),
            entries,
            (!no_updates).then_some(win),
            (!no_updates).then_some(kl),
        ));
        let base = path.parent().and_then(Path::parent).unwrap_or(Path::new("."));
        for run in &m.runs {
            let log_path = base.join(&run.train_log);
            let text = std::fs::read_to_string(&log_path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(log_path.clone()),
                _ => e.into(),
            })?;
            let mut csv = String::from("update,loss,win_rate,mean_margin,grad_norm\n");
            for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                let e: crate::align::LogEntry =
                    serde_json::from_str(line).map_err(|err| Error::parse(&log_path, format!("line {}: {err}", n + 1)))?;
                csv.push_str(&format!(
                    "{},{:.9},{:.6},{:.9},{:.9}\n",
                    e.update, e.loss, e.win_rate, e.mean_margin, e.grad_norm
                ));
            }
            std::fs::write(out_dir.join(format!("curve_{label}_seed{}.csv", run.seed)), csv)?;
        }
    }
    let csv = render_report_csv(&rows);
    std::fs::write(out_dir.join("report.csv"), &csv)?;
    let mut txt = String::new();
    txt.push_str(&format!(
        "{:<12} {:<16} {:<7} {:>8} {:>8} {:>8} {:>8}\n",
        "label", "split", "suite", "wer", "spk_sim", "mos", "len"
    ));
    for (label, entries, _, _) in &rows {
        for e in entries {
            for r in [&e.seen, &e.unseen] {
                txt.push_str(&format!(
                    "{label:<12} {:<16} {:<7} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                    r.split.tag(),
                    r.suite,
                    r.wer,
                    r.spk_sim,
                    r.mos,
                    r.length_ratio
                ));
            }
        }
    }
    let mut f = std::fs::File::create(out_dir.join("report.txt"))?;
    f.write_all(txt.as_bytes())?;
    Ok(txt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::seqdata::synth_example;

    fn examples() -> Vec<Example> {
        (0..3u32)
            .map(|i| {
                let mut e = synth_example(&[i, i + 1, i + 2], i, 0, 0.0).unwrap();
                e.id = format!("e{i}");
                e
            })
            .collect()
    }

    #[test]
    fn ground_truth_profile_is_clean() {
        let exs = examples();
        let refs: Vec<&Example> = exs.iter().collect();
        let r = evaluate_ground_truth(&SeenSuite, Split::EvalInDomain, &refs).unwrap();
        assert_eq!(r.wer, 0.0);
        assert_eq!(r.mos, 5.0);
        assert_eq!(r.length_ratio, 1.0);
    }

    #[test]
    fn report_means_match_flat_averaging() {
        let exs = examples();
        let refs: Vec<&Example> = exs.iter().collect();
        let state = init_model(&ModelConfig::tiny(), 0).unwrap();
        let sampler = SamplerConfig {
            n_samples: 4,
            max_frames: 10,
            ..SamplerConfig::default()
        };
        let (r, batches) = evaluate(&state, Split::EvalInDomain, &refs, &sampler, &SeenSuite, Exec::Parallel).unwrap();
        // Equal sample counts per condition: the mean of means equals the
        // flat mean over all samples.
        let mut all = Vec::new();
        for (ex, b) in refs.iter().zip(&batches) {
            for s in &b.samples {
                all.push(SeenSuite.score(&s.grid, &ex.ref_grid, &ex.text));
            }
        }
        let n = all.len() as f64;
        assert!((r.wer - all.iter().map(|m| m.wer).sum::<f64>() / n).abs() <= 1e-12);
        assert!((r.spk_sim - all.iter().map(|m| m.spk_sim).sum::<f64>() / n).abs() <= 1e-12);
        assert!((r.mos - all.iter().map(|m| m.mos).sum::<f64>() / n).abs() <= 1e-12);
        let (again, _) = evaluate(&state, Split::EvalInDomain, &refs, &sampler, &SeenSuite, Exec::Sequential).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn artifacts_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let a = put_artifact(dir.path(), b"abc", "bin").unwrap();
        let b = put_artifact(dir.path(), b"abc", "bin").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, put_artifact(dir.path(), b"abd", "bin").unwrap());
        assert_eq!(std::fs::read(dir.path().join(&a)).unwrap(), b"abc");
    }
}

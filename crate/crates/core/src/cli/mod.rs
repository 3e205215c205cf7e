//! Command-line front end.
//!
//! Every command resolves its parameters with the precedence
//! flags > environment (output dir and threads only) > config file >
//! defaults, validates them, runs, and writes a run manifest holding the
//! resolved configuration and the hashes of its inputs and outputs.
//!
//! Exit status: 0 on success, 2 for usage errors (unknown flags, invalid
//! values, missing inputs), 1 for failures during a run.

mod settings;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use settings::{Settings, ENV_OUTPUT_DIR, ENV_THREADS};

use crate::align::{align_train, iterate, prepare_pairs, sft_train, AlignConfig, Conditions, IterateConfig};
use crate::curation::{curate, read_pairs, sft_extract, subsample_hours, write_pairs, CurationConfig, MetricUsed, Strategy};
use crate::error::{Error, Result};
use crate::eval::{evaluate_splits, hash_file, render_report_csv, report_render, run_experiment, ExperimentContext, ExperimentSpec};
use crate::exec::Exec;
use crate::metrics::SeenSuite;
use crate::model::{ce_train, init_model, load_checkpoint, save_checkpoint, CeSchedule, ModelConfig, TrainItem};
use crate::sampler::{generate_all, read_generations, write_generations, SamplerConfig};
use crate::seqdata::{build_splits, Dataset, Example, Split, SplitConfig};

#[derive(Debug, Parser)]
#[command(name = "prefalign", version, about = "Preference alignment for codec-token sequence models")]
pub struct Cli {
    /// Flat TOML config file with dotted section keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for outputs [env: PREFALIGN_OUTPUT_DIR].
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for data-parallel loops [env: PREFALIGN_THREADS].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run every loop on one thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the synthetic dataset with train / in-domain / out-of-domain splits.
    SynthData(SynthArgs),
    /// Cross-entropy training of the baseline model.
    TrainBase(TrainArgs),
    /// Sample candidate grids for the conditions of a split.
    Generate(GenerateArgs),
    /// Build preference pairs from a generation dump.
    Curate(CurateArgs),
    /// Fine-tune on the winners of a pair file.
    Sft(SftArgs),
    /// DPO training on a pair file.
    Align(AlignArgs),
    /// Sample and score a checkpoint on evaluation splits.
    Evaluate(EvaluateArgs),
    /// Repeated generate / curate / align rounds.
    Iterate(IterateArgs),
    /// Run a labelled experiment over several seeds and write a manifest.
    Experiment(ExperimentArgs),
    /// Render manifests into a comparison table and training-curve CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub in_domain: Option<usize>,
    #[arg(long)]
    pub out_domain: Option<usize>,
    #[arg(long)]
    pub p_noise: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset file written by `synth-data`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Model size: tiny, compact or default.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, eval_in_domain or eval_out_domain.
    #[arg(long)]
    pub split: Option<String>,
    /// Use only the first N conditions of the split.
    #[arg(long)]
    pub conditions: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurationArgs {
    /// gt_vs_gen or ranked.
    #[arg(long)]
    pub strategy: Option<String>,
    /// spk_sim, wer, mos or all.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub generations: Option<PathBuf>,
    #[command(flatten)]
    pub curation: CurationArgs,
    /// Keep a seeded subsample of this many pairs.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SftArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignFlags {
    #[arg(long)]
    pub beta: Option<f64>,
    /// Divide every log-posterior by its code count.
    #[arg(long)]
    pub length_norm: Option<bool>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub updates: Option<u64>,
    #[arg(long)]
    pub batch_pairs: Option<usize>,
    /// Fine-tune on the winners before alignment.
    #[arg(long)]
    pub sft_first: Option<bool>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[command(flatten)]
    pub align: AlignFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated split names.
    #[arg(long)]
    pub splits: Option<String>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IterateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Train-split conditions used for pair generation.
    #[arg(long)]
    pub conditions: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub curation: CurationArgs,
    #[command(flatten)]
    pub align: AlignFlags,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Baseline checkpoint; repeat once per seed or give one for all.
    #[arg(long)]
    pub baseline: Vec<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub conditions: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub splits: Option<String>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub curation: CurationArgs,
    #[command(flatten)]
    pub align: AlignFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Manifest files written by `experiment`.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Settings shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub deterministic: bool,
}

impl GlobalConfig {
    pub fn exec(&self) -> Exec {
        if self.deterministic {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

/// A command with every parameter resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Resolved {
    SynthData {
        splits: SplitConfig,
        out: PathBuf,
    },
    TrainBase {
        dataset: PathBuf,
        model: ModelConfig,
        schedule: CeSchedule,
        out: PathBuf,
    },
    Generate {
        dataset: PathBuf,
        checkpoint: PathBuf,
        split: Split,
        conditions: Option<usize>,
        sampler: SamplerConfig,
        out: PathBuf,
    },
    Curate {
        dataset: PathBuf,
        generations: PathBuf,
        curation: CurationConfig,
        budget: Option<usize>,
        out: PathBuf,
    },
    Sft {
        dataset: PathBuf,
        checkpoint: PathBuf,
        pairs: PathBuf,
        batch: usize,
        lr: f64,
        out: PathBuf,
    },
    Align {
        dataset: PathBuf,
        checkpoint: PathBuf,
        pairs: PathBuf,
        align: AlignConfig,
        out: PathBuf,
    },
    Evaluate {
        dataset: PathBuf,
        checkpoint: PathBuf,
        splits: Vec<Split>,
        sampler: SamplerConfig,
        out: PathBuf,
    },
    Iterate {
        dataset: PathBuf,
        checkpoint: PathBuf,
        conditions: usize,
        config: IterateConfig,
    },
    Experiment {
        spec: ExperimentSpec,
        context: ExperimentContext,
    },
    Report {
        manifests: Vec<PathBuf>,
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Invocation {
    pub global: GlobalConfig,
    pub resolved: Resolved,
}

fn require(path: Option<PathBuf>, settings: &Settings, key: &str) -> Result<PathBuf> {
    match path {
        Some(p) => Ok(p),
        None => settings
            .get::<PathBuf>(key)?
            .ok_or_else(|| Error::config(key, "is required (flag or config file)")),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| Error::config("split", format!("{s:?} is not one of train, eval_in_domain, eval_out_domain")))
}

fn parse_splits(s: &str) -> Result<Vec<Split>> {
    s.split(',').map(|x| parse_split(x.trim())).collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::config("seeds", format!("{x:?} is not a non-negative integer")))
        })
        .collect()
}

fn sampler_config(a: &SamplerArgs, s: &Settings, seed: u64) -> Result<SamplerConfig> {
    let d = SamplerConfig::default();
    let c = SamplerConfig {
        k: s.pick(a.k, "sampler.k", d.k)?,
        temperature: s.pick(a.temperature, "sampler.temperature", d.temperature)?,
        max_frames: s.pick(a.max_frames, "sampler.max_frames", d.max_frames)?,
        n_samples: s.pick(a.n_samples, "sampler.n_samples", d.n_samples)?,
        seed,
    };
    c.validate()?;
    Ok(c)
}

fn curation_config(a: &CurationArgs, s: &Settings, seed: u64) -> Result<CurationConfig> {
    let d = CurationConfig::default();
    let strategy: String = s.pick(a.strategy.clone(), "curation.strategy", "ranked".into())?;
    let metric: String = s.pick(a.metric.clone(), "curation.metric", "all".into())?;
    let c = CurationConfig {
        strategy: Strategy::parse(&strategy)
            .ok_or_else(|| Error::config("strategy", format!("{strategy:?} is not one of gt_vs_gen, ranked")))?,
        metric_used: MetricUsed::parse(&metric)
            .ok_or_else(|| Error::config("metric", format!("{metric:?} is not one of spk_sim, wer, mos, all")))?,
        fraction: s.pick(a.fraction, "curation.fraction", d.fraction)?,
        samples_per_condition: s.pick(None, "curation.samples_per_condition", d.samples_per_condition)?,
        seed,
    };
    c.validate()?;
    Ok(c)
}

fn align_config(a: &AlignFlags, s: &Settings, seed: u64) -> Result<AlignConfig> {
    let d = AlignConfig::default();
    let c = AlignConfig {
        beta: s.pick(a.beta, "align.beta", d.beta)?,
        length_norm: s.pick(a.length_norm, "align.length_norm", d.length_norm)?,
        learning_rate: s.pick(a.lr, "align.learning_rate", d.learning_rate)?,
        updates: s.pick(a.updates, "align.updates", d.updates)?,
        batch_pairs: s.pick(a.batch_pairs, "align.batch_pairs", d.batch_pairs)?,
        sft_first: s.pick(a.sft_first, "align.sft_first", d.sft_first)?,
        seed,
        optimizer: d.optimizer,
        clip_norm: s.get("align.clip_norm")?.or(d.clip_norm),
    };
    c.validate()?;
    Ok(c)
}

fn model_preset(name: &str) -> Result<ModelConfig> {
    match name {
        "tiny" => Ok(ModelConfig::tiny()),
        "compact" => Ok(ModelConfig::compact()),
        "default" => Ok(ModelConfig::default()),
        other => Err(Error::config("preset", format!("{other:?} is not one of tiny, compact, default"))),
    }
}

/// Parse `argv` and resolve every parameter, without running anything.
pub fn resolve(cli: Cli) -> Result<Invocation> {
    let settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let s = &settings;
    let global = GlobalConfig {
        seed: s.pick(cli.seed, "global.seed", 0)?,
        output_dir: s.pick_env(cli.output_dir.clone(), ENV_OUTPUT_DIR, "global.output_dir", PathBuf::from("out"))?,
        threads: s.pick_env(cli.threads, ENV_THREADS, "global.threads", 0)?,
        deterministic: cli.deterministic || s.get("global.deterministic")?.unwrap_or(false),
    };
    let seed = global.seed;
    let out_or = |flag: &Option<PathBuf>, key: &str, name: &str| -> Result<PathBuf> {
        if let Some(f) = flag {
            return Ok(f.clone());
        }
        Ok(s.get::<PathBuf>(key)?.unwrap_or_else(|| global.output_dir.join(name)))
    };
    let resolved = match cli.command {
        Command::SynthData(a) => {
            let d = SplitConfig::default();
            let splits = SplitConfig {
                train: s.pick(a.train, "data.train", d.train)?,
                eval_in_domain: s.pick(a.in_domain, "data.in_domain", d.eval_in_domain)?,
                eval_out_domain: s.pick(a.out_domain, "data.out_domain", d.eval_out_domain)?,
                p_noise: s.pick(a.p_noise, "data.p_noise", d.p_noise)?,
                seed,
                ..d
            };
            splits.validate()?;
            Resolved::SynthData {
                splits,
                out: out_or(&a.out, "data.out", "dataset.jsonl")?,
            }
        }
        Command::TrainBase(a) => {
            let preset: String = s.pick(a.preset, "model.preset", "compact".into())?;
            let model = model_preset(&preset)?;
            let schedule = CeSchedule::warmup_decay(
                s.pick(a.steps, "train.steps", 3000)?,
                s.pick(a.batch, "train.batch", 8)?,
                s.pick(a.lr, "train.lr", 3e-3)?,
            );
            schedule.validate()?;
            Resolved::TrainBase {
                dataset: require(a.data.dataset, s, "data.path")?,
                model,
                schedule,
                out: out_or(&a.out, "train.out", "base.ckpt")?,
            }
        }
        Command::Generate(a) => Resolved::Generate {
            dataset: require(a.data.dataset, s, "data.path")?,
            checkpoint: require(a.checkpoint, s, "model.checkpoint")?,
            split: parse_split(&s.pick(a.split, "generate.split", "train".to_string())?)?,
            conditions: match a.conditions {
                Some(c) => Some(c),
                None => s.get("generate.conditions")?,
            },
            sampler: sampler_config(&a.sampler, s, seed)?,
            out: out_or(&a.out, "generate.out", "generations.jsonl")?,
        },
        Command::Curate(a) => Resolved::Curate {
            dataset: require(a.data.dataset, s, "data.path")?,
            generations: require(a.generations, s, "curate.generations")?,
            curation: curation_config(&a.curation, s, seed)?,
            budget: match a.budget {
                Some(b) => Some(b),
                None => s.get("curate.budget")?,
            },
            out: out_or(&a.out, "curate.out", "pairs.jsonl")?,
        },
        Command::Sft(a) => Resolved::Sft {
            dataset: require(a.data.dataset, s, "data.path")?,
            checkpoint: require(a.checkpoint, s, "model.checkpoint")?,
            pairs: require(a.pairs, s, "align.pairs")?,
            batch: s.pick(a.batch, "sft.batch", 8)?,
            lr: s.pick(a.lr, "sft.lr", 1e-3)?,
            out: out_or(&a.out, "sft.out", "sft.ckpt")?,
        },
        Command::Align(a) => Resolved::Align {
            dataset: require(a.data.dataset, s, "data.path")?,
            checkpoint: require(a.checkpoint, s, "model.checkpoint")?,
            pairs: require(a.pairs, s, "align.pairs")?,
            align: align_config(&a.align, s, seed)?,
            out: out_or(&a.out, "align.out", "aligned.ckpt")?,
        },
        Command::Evaluate(a) => Resolved::Evaluate {
            dataset: require(a.data.dataset, s, "data.path")?,
            checkpoint: require(a.checkpoint, s, "model.checkpoint")?,
            splits: parse_splits(&s.pick(a.splits, "evaluate.splits", "eval_in_domain,eval_out_domain".to_string())?)?,
            sampler: sampler_config(&a.sampler, s, seed)?,
            out: out_or(&a.out, "evaluate.out", "evaluation")?,
        },
        Command::Iterate(a) => {
            let config = IterateConfig {
                sampler: sampler_config(&a.sampler, s, seed)?,
                curation: curation_config(&a.curation, s, seed)?,
                align: align_config(&a.align, s, seed)?,
                rounds: s.pick(a.rounds, "iterate.rounds", 2)?,
            };
            if config.rounds == 0 {
                return Err(Error::config("rounds", "must be at least 1 (valid range 1..)"));
            }
            Resolved::Iterate {
                dataset: require(a.data.dataset, s, "data.path")?,
                checkpoint: require(a.checkpoint, s, "model.checkpoint")?,
                conditions: s.pick(a.conditions, "iterate.conditions", 200)?,
                config,
            }
        }
        Command::Experiment(a) => {
            let dataset = require(a.data.dataset, s, "data.path")?;
            let baselines = if a.baseline.is_empty() {
                s.get::<Vec<PathBuf>>("experiment.baselines")?
                    .ok_or_else(|| Error::config("baseline", "is required (flag or config file)"))?
            } else {
                a.baseline
            };
            let spec = ExperimentSpec {
                label: s.pick(a.label, "experiment.label", "B3".into())?,
                curation: curation_config(&a.curation, s, seed)?,
                align: align_config(&a.align, s, seed)?,
                budget: match a.budget {
                    Some(b) => Some(b),
                    None => s.get("experiment.budget")?,
                },
                eval_splits: parse_splits(&s.pick(a.splits, "experiment.splits", "eval_in_domain,eval_out_domain".to_string())?)?,
                seeds: parse_seeds(&s.pick(a.seeds, "experiment.seeds", "0,1,2".to_string())?)?,
            };
            spec.validate()?;
            let sampler = sampler_config(&a.sampler, s, seed)?;
            let context = ExperimentContext {
                dataset,
                baselines,
                output_dir: global.output_dir.clone(),
                kl_sampler: SamplerConfig {
                    k: crate::seqdata::AUDIO_VOCAB,
                    temperature: 1.0,
                    n_samples: 4,
                    ..sampler.clone()
                },
                sampler,
                train_conditions: s.pick(a.conditions, "experiment.conditions", 200)?,
                sft_batch: s.pick(None, "sft.batch", 8)?,
                sft_lr: s.pick(None, "sft.lr", 1e-3)?,
                exec: global.exec(),
            };
            Resolved::Experiment { spec, context }
        }
        Command::Report(a) => Resolved::Report {
            manifests: a.manifest,
            out: out_or(&a.out, "report.out", "report")?,
        },
    };
    Ok(Invocation { global, resolved })
}

/// Record of one command run, written next to its outputs.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    invocation: &'a Invocation,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn hashes(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .filter(|p| p.is_file())
        .map(|p| Ok((p.display().to_string(), hash_file(p)?)))
        .collect()
}

fn check_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.to_path_buf()));
        }
    }
    Ok(())
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}

/// Execute a resolved invocation; returns the paths it wrote.
pub fn execute(inv: &Invocation) -> Result<Vec<PathBuf>> {
    let exec = inv.global.exec();
    let seed = inv.global.seed;
    let (inputs, outputs): (Vec<PathBuf>, Vec<PathBuf>) = match &inv.resolved {
        Resolved::SynthData { splits, out } => {
            let ds = build_splits(splits, exec)?;
            ensure_parent(out)?;
            ds.write(out)?;
            (vec![], vec![out.clone()])
        }
        Resolved::TrainBase {
            dataset,
            model,
            schedule,
            out,
        } => {
            check_inputs(&[dataset])?;
            let ds = Dataset::read(dataset)?;
            let items: Vec<TrainItem<'_>> = ds.split(Split::Train).into_iter().map(TrainItem::ground_truth).collect();
            let state = init_model(model, seed)?;
            let (state, trace) = ce_train(&state, &items, schedule, exec)?;
            ensure_parent(out)?;
            save_checkpoint(&state, out)?;
            let trace_path = out.with_extension("loss.csv");
            let mut csv = String::from("step,loss\n");
            for (i, l) in trace.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.9}\n"));
            }
            std::fs::write(&trace_path, csv)?;
            (vec![dataset.clone()], vec![out.clone(), trace_path])
        }
        Resolved::Generate {
            dataset,
            checkpoint,
            split,
            conditions,
            sampler,
            out,
        } => {
            check_inputs(&[dataset, checkpoint])?;
            let ds = Dataset::read(dataset)?;
            let state = load_checkpoint(checkpoint, None)?;
            let mut exs = ds.split(*split);
            if let Some(n) = conditions {
                exs.truncate(*n);
            }
            let batches = generate_all(&state, &exs, sampler, exec)?;
            let flagged = batches.iter().filter(|b| b.none_terminated()).count();
            if flagged > 0 {
                log::warn!("{flagged} conditions produced no terminated sample");
            }
            ensure_parent(out)?;
            write_generations(out, &batches)?;
            (vec![dataset.clone(), checkpoint.clone()], vec![out.clone()])
        }
        Resolved::Curate {
            dataset,
            generations,
            curation,
            budget,
            out,
        } => {
            check_inputs(&[dataset, generations])?;
            let ds = Dataset::read(dataset)?;
            let batches = read_generations(generations)?;
            let exs: Vec<&Example> = batches
                .iter()
                .map(|b| {
                    ds.get(&b.example_id)
                        .ok_or_else(|| Error::Curation(format!("unknown example {}", b.example_id)))
                })
                .collect::<Result<_>>()?;
            let mut pairs = curate(&SeenSuite, &exs, &batches, curation, exec)?;
            if let Some(b) = budget {
                pairs = subsample_hours(&pairs, *b, seed).pairs;
            }
            ensure_parent(out)?;
            write_pairs(out, curation, &pairs)?;
            (vec![dataset.clone(), generations.clone()], vec![out.clone()])
        }
        Resolved::Sft {
            dataset,
            checkpoint,
            pairs,
            batch,
            lr,
            out,
        } => {
            check_inputs(&[dataset, checkpoint, pairs])?;
            let ds = Dataset::read(dataset)?;
            let state = load_checkpoint(checkpoint, None)?;
            let (_, pairs_v) = read_pairs(pairs)?;
            let (state, _) = sft_train(&state, &sft_extract(&pairs_v), &Conditions::new(&ds.examples), *batch, *lr, exec)?;
            ensure_parent(out)?;
            save_checkpoint(&state, out)?;
            (vec![dataset.clone(), checkpoint.clone(), pairs.clone()], vec![out.clone()])
        }
        Resolved::Align {
            dataset,
            checkpoint,
            pairs,
            align,
            out,
        } => {
            check_inputs(&[dataset, checkpoint, pairs])?;
            let ds = Dataset::read(dataset)?;
            let reference = load_checkpoint(checkpoint, None)?;
            let (_, pairs_v) = read_pairs(pairs)?;
            let conditions = Conditions::new(&ds.examples);
            let start = if align.sft_first {
                sft_train(&reference, &sft_extract(&pairs_v), &conditions, 8, 1e-3, exec)?.0
            } else {
                reference
            };
            let prepared = prepare_pairs(&start, &pairs_v, &conditions, exec)?;
            let (policy, log) = align_train(&start, &prepared, align, exec)?;
            ensure_parent(out)?;
            save_checkpoint(&policy, out)?;
            let log_path = out.with_extension("log.jsonl");
            log.write_jsonl(&log_path)?;
            (vec![dataset.clone(), checkpoint.clone(), pairs.clone()], vec![out.clone(), log_path])
        }
        Resolved::Evaluate {
            dataset,
            checkpoint,
            splits,
            sampler,
            out,
        } => {
            check_inputs(&[dataset, checkpoint])?;
            let ds = Dataset::read(dataset)?;
            let state = load_checkpoint(checkpoint, None)?;
            let entries = evaluate_splits(&state, &ds, splits, sampler, exec)?;
            std::fs::create_dir_all(out)?;
            let json = out.join("report.json");
            std::fs::write(&json, serde_json::to_vec_pretty(&entries)?)?;
            let csv = out.join("report.csv");
            std::fs::write(&csv, render_report_csv(&[("model".into(), entries, None, None)]))?;
            (vec![dataset.clone(), checkpoint.clone()], vec![json, csv])
        }
        Resolved::Iterate {
            dataset,
            checkpoint,
            conditions,
            config,
        } => {
            check_inputs(&[dataset, checkpoint])?;
            let ds = Dataset::read(dataset)?;
            let initial = load_checkpoint(checkpoint, None)?;
            let train: Vec<&Example> = ds.split(Split::Train).into_iter().take(*conditions).collect();
            let rounds = iterate(&initial, &train, config, exec)?;
            let dir = inv.global.output_dir.join("iterate");
            std::fs::create_dir_all(&dir)?;
            let mut rows = vec![("round0".to_string(), evaluate_splits(&initial, &ds, &[Split::EvalInDomain], &config.sampler, exec)?, None, None)];
            let mut written = Vec::new();
            for (r, round) in rounds.iter().enumerate() {
                let p = dir.join(format!("round{}.ckpt", r + 1));
                save_checkpoint(&round.state, &p)?;
                written.push(p);
                let entries = evaluate_splits(&round.state, &ds, &[Split::EvalInDomain], &config.sampler, exec)?;
                rows.push((format!("round{}", r + 1), entries, Some(round.log.final_win_rate), None));
            }
            let csv = dir.join("rounds.csv");
            std::fs::write(&csv, render_report_csv(&rows))?;
            written.push(csv);
            (vec![dataset.clone(), checkpoint.clone()], written)
        }
        Resolved::Experiment { spec, context } => {
            run_experiment(spec, context)?;
            let m = context.output_dir.join("manifests").join(format!("{}.json", spec.label));
            (std::iter::once(context.dataset.clone()).chain(context.baselines.clone()).collect(), vec![m])
        }
        Resolved::Report { manifests, out } => {
            check_inputs(&manifests.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
            let text = report_render(manifests, out)?;
            print!("{text}");
            (manifests.clone(), vec![out.join("report.csv"), out.join("report.txt")])
        }
    };
    let manifest = RunManifest {
        invocation: inv,
        inputs: hashes(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
        outputs: hashes(&outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
    };
    let name = match &inv.resolved {
        Resolved::SynthData { .. } => "synth-data",
        Resolved::TrainBase { .. } => "train-base",
        Resolved::Generate { .. } => "generate",
        Resolved::Curate { .. } => "curate",
        Resolved::Sft { .. } => "sft",
        Resolved::Align { .. } => "align",
        Resolved::Evaluate { .. } => "evaluate",
        Resolved::Iterate { .. } => "iterate",
        Resolved::Experiment { .. } => "experiment",
        Resolved::Report { .. } => "report",
    };
    let dir = inv.global.output_dir.join("runs");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{name}.json")), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(outputs)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::MissingArtifact(_) => 2,
        _ => 1,
    }
}

/// Parse, resolve and run. Returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let print_only = cli.print_config;
    let inv = match resolve(cli) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if inv.global.threads > 0 {
        crate::exec::set_threads(inv.global.threads);
    }
    if print_only {
        println!("{}", serde_json::to_string_pretty(&inv).expect("config serializes"));
        return 0;
    }
    match execute(&inv) {
        Ok(outputs) => {
            for o in outputs {
                log::info!("wrote {}", o.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Invocation> {
        resolve(Cli::try_parse_from(std::iter::once("prefalign").chain(args.iter().copied())).unwrap())
    }

    #[test]
    fn align_flags_resolve() {
        let inv = parse(&["align", "--beta", "0.01", "--updates", "350", "--dataset", "d", "--checkpoint", "c", "--pairs", "p"]).unwrap();
        match inv.resolved {
            Resolved::Align { align, .. } => {
                assert_eq!(align.beta, 0.01);
                assert_eq!(align.updates, 350);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let conf = dir.path().join("c.toml");
        std::fs::write(&conf, "align.beta = 1\nalign.updates = 20\nglobal.seed = 4\n").unwrap();
        let c = conf.to_str().unwrap();
        let inv = parse(&["--config", c, "align", "--beta", "0.5", "--dataset", "d", "--checkpoint", "c", "--pairs", "p"]).unwrap();
        assert_eq!(inv.global.seed, 4);
        match inv.resolved {
            Resolved::Align { align, .. } => {
                assert_eq!(align.beta, 0.5);
                assert_eq!(align.updates, 20);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let e = parse(&["train-base"]).unwrap_err();
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let e = parse(&["align", "--beta=-1", "--dataset", "d", "--checkpoint", "c", "--pairs", "p"]).unwrap_err();
        assert!(e.to_string().contains("beta"));
        let e = parse(&["generate", "--split", "nope", "--dataset", "d", "--checkpoint", "c"]).unwrap_err();
        assert!(e.to_string().contains("split"));
    }
}

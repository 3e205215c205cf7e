use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{synth_example, Example, TokenGrid, AUDIO_VOCAB, N_Q, SPEAKER_UNIVERSE, TEXT_VOCAB};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{derive_seed, substream};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    EvalInDomain,
    EvalOutDomain,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::EvalInDomain, Split::EvalOutDomain];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EvalInDomain => "eval_in_domain",
            Split::EvalOutDomain => "eval_out_domain",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.tag() == s)
    }
}

/// Bigram regime of generated text. Consecutive tokens differ by a step
/// `(next - prev) mod V_s`; the two regimes use disjoint step sets, so
/// their bigram supports never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextDistribution {
    /// Steps 1..=15.
    InDomain,
    /// Steps 0 and 16..=31.
    OutOfDomain,
}

impl TextDistribution {
    fn step(self, rng: &mut crate::rng::Rng) -> u32 {
        let half = TEXT_VOCAB as u32 / 2;
        match self {
            TextDistribution::InDomain => rng.random_range(1..half),
            TextDistribution::OutOfDomain => {
                let s = rng.random_range(half - 1..TEXT_VOCAB as u32);
                if s == half - 1 {
                    0
                } else {
                    s
                }
            }
        }
    }

    pub fn admits_bigram(self, prev: u32, next: u32) -> bool {
        let half = TEXT_VOCAB as u32 / 2;
        let step = (next + TEXT_VOCAB as u32 - prev) % TEXT_VOCAB as u32;
        match self {
            TextDistribution::InDomain => (1..half).contains(&step),
            TextDistribution::OutOfDomain => step == 0 || step >= half,
        }
    }

    pub fn sample(self, len: usize, rng: &mut crate::rng::Rng) -> Vec<u32> {
        let mut text = Vec::with_capacity(len);
        let mut tok = rng.random_range(0..TEXT_VOCAB as u32);
        text.push(tok);
        for _ in 1..len {
            tok = (tok + self.step(rng)) % TEXT_VOCAB as u32;
            text.push(tok);
        }
        text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: usize,
    pub eval_in_domain: usize,
    pub eval_out_domain: usize,
    pub train_speakers: Vec<u32>,
    pub out_domain_speakers: Vec<u32>,
    pub min_text_len: usize,
    pub max_text_len: usize,
    pub p_noise: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 2000,
            eval_in_domain: 50,
            eval_out_domain: 50,
            train_speakers: (0..11).collect(),
            out_domain_speakers: (11..SPEAKER_UNIVERSE).collect(),
            min_text_len: 3,
            max_text_len: 6,
            p_noise: super::P_NOISE,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_speakers.is_empty() || self.out_domain_speakers.is_empty() {
            return Err(Error::config("speakers", "speaker lists must be non-empty"));
        }
        if let Some(s) = self
            .train_speakers
            .iter()
            .chain(&self.out_domain_speakers)
            .find(|&&s| s >= SPEAKER_UNIVERSE)
        {
            return Err(Error::config(
                "speakers",
                format!("speaker {s} outside [0, {SPEAKER_UNIVERSE})"),
            ));
        }
        if let Some(s) = self
            .out_domain_speakers
            .iter()
            .find(|s| self.train_speakers.contains(s))
        {
            return Err(Error::config(
                "out_domain_speakers",
                format!("speaker {s} also appears in train_speakers"),
            ));
        }
        if self.min_text_len == 0 || self.min_text_len > self.max_text_len {
            return Err(Error::config(
                "text_len",
                format!(
                    "need 1 <= min_text_len <= max_text_len, got {}..={}",
                    self.min_text_len, self.max_text_len
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(Error::config("p_noise", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    #[serde(rename = "V_s")]
    pub text_vocab: usize,
    #[serde(rename = "V_a")]
    pub audio_vocab: usize,
    pub n_q: usize,
}

impl Default for DatasetHeader {
    fn default() -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            text_vocab: TEXT_VOCAB,
            audio_vocab: AUDIO_VOCAB,
            n_q: N_Q,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub examples: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: Vec<u32>,
    speaker_id: u32,
    ref_grid: Vec<u32>,
    target_grid: Vec<u32>,
    split: Split,
}

/// Generate the three splits. Examples are synthesized independently from
/// per-index seeds, so the result does not depend on `exec`.
pub fn build_splits(config: &SplitConfig, exec: Exec) -> Result<Dataset> {
    config.validate()?;
    let plan: Vec<(Split, usize)> = [
        (Split::Train, config.train),
        (Split::EvalInDomain, config.eval_in_domain),
        (Split::EvalOutDomain, config.eval_out_domain),
    ]
    .into_iter()
    .flat_map(|(s, n)| (0..n).map(move |i| (s, i)))
    .collect();
    let examples = exec.map(&plan, |_, &(split, i)| {
        let mut rng = substream(config.seed, split.tag(), i as u64);
        let (speakers, dist) = match split {
            Split::EvalOutDomain => (&config.out_domain_speakers, TextDistribution::OutOfDomain),
            _ => (&config.train_speakers, TextDistribution::InDomain),
        };
        let speaker = speakers[rng.random_range(0..speakers.len())];
        let len = rng.random_range(config.min_text_len..=config.max_text_len);
        let text = dist.sample(len, &mut rng);
        let noise_seed = derive_seed(config.seed, &format!("noise-{}", split.tag()), i as u64);
        synth_example(&text, speaker, noise_seed, config.p_noise).map(|mut ex| {
            ex.id = format!("{}-{:05}", split.tag(), i);
            ex.split = split;
            ex
        })
    });
    Ok(Dataset {
        header: DatasetHeader::default(),
        examples: examples.into_iter().collect::<Result<_>>()?,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Example> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for ex in &self.examples {
            let rec = Record {
                id: ex.id.clone(),
                text: ex.text.clone(),
                speaker_id: ex.speaker_id,
                ref_grid: ex.ref_grid.codes().to_vec(),
                target_grid: ex.target_grid.codes().to_vec(),
                split: ex.split,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::parse(path, "empty dataset file"))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::parse(path, format!("header: {e}")))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::parse(
                path,
                format!("unsupported format_version {}", header.format_version),
            ));
        }
        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, format!("line {}: {e}", i + 2)))?;
            let ref_grid = TokenGrid::new(header.n_q, rec.ref_grid)?;
            let target_grid = TokenGrid::new(header.n_q, rec.target_grid)?;
            ref_grid.validate(header.audio_vocab)?;
            target_grid.validate(header.audio_vocab)?;
            examples.push(Example {
                id: rec.id,
                text: rec.text,
                ref_grid,
                target_grid,
                speaker_id: rec.speaker_id,
                split: rec.split,
            });
        }
        Ok(Self { header, examples })
    }
}

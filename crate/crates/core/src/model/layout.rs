use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Offsets of one pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wqkv: usize,
    pub bqkv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Named layout of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub text_emb: usize,
    pub audio_emb: usize,
    pub seg_emb: usize,
    pub pos_emb: usize,
    pub global: Vec<BlockIdx>,
    pub global_lnf_g: usize,
    pub global_lnf_b: usize,
    pub local_in_w: usize,
    pub local_in_b: usize,
    pub local_code_emb: usize,
    pub local_pos: usize,
    pub local: Vec<BlockIdx>,
    pub local_lnf_g: usize,
    pub local_lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

struct Builder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], kind: ParamKind) -> usize {
        let offset = self.total;
        let entry = ParamEntry {
            name,
            offset,
            shape: shape.to_vec(),
            kind,
        };
        self.total += entry.len();
        self.entries.push(entry);
        offset
    }

    fn block(&mut self, prefix: &str, d: usize, ffn: usize) -> BlockIdx {
        use ParamKind::*;
        BlockIdx {
            ln1_g: self.add(format!("{prefix}.ln1.gain"), &[d], Gain),
            ln1_b: self.add(format!("{prefix}.ln1.bias"), &[d], Bias),
            wqkv: self.add(format!("{prefix}.attn.wqkv"), &[d, 3 * d], Weight),
            bqkv: self.add(format!("{prefix}.attn.bqkv"), &[3 * d], Bias),
            wo: self.add(format!("{prefix}.attn.wo"), &[d, d], Weight),
            bo: self.add(format!("{prefix}.attn.bo"), &[d], Bias),
            ln2_g: self.add(format!("{prefix}.ln2.gain"), &[d], Gain),
            ln2_b: self.add(format!("{prefix}.ln2.bias"), &[d], Bias),
            w1: self.add(format!("{prefix}.ffn.w1"), &[d, ffn], Weight),
            b1: self.add(format!("{prefix}.ffn.b1"), &[ffn], Bias),
            w2: self.add(format!("{prefix}.ffn.w2"), &[ffn, d], Weight),
            b2: self.add(format!("{prefix}.ffn.b2"), &[d], Bias),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use ParamKind::*;
        let (dg, dl) = (cfg.global_dim, cfg.local_dim);
        let mut b = Builder {
            entries: Vec::new(),
            total: 0,
        };
        let text_emb = b.add("embed.text".into(), &[cfg.text_vocab, dg], Embedding);
        let audio_emb = b.add("embed.audio".into(), &[cfg.n_q, cfg.audio_vocab, dg], Embedding);
        let seg_emb = b.add("embed.segment".into(), &[3, dg], Embedding);
        let pos_emb = b.add("embed.position".into(), &[3, cfg.max_rows, dg], Embedding);
        let global = (0..cfg.global_layers)
            .map(|i| b.block(&format!("global.{i}"), dg, cfg.global_ffn))
            .collect();
        let global_lnf_g = b.add("global.ln_f.gain".into(), &[dg], Gain);
        let global_lnf_b = b.add("global.ln_f.bias".into(), &[dg], Bias);
        let local_in_w = b.add("local.in_proj.w".into(), &[dg, dl], Weight);
        let local_in_b = b.add("local.in_proj.b".into(), &[dl], Bias);
        let local_code_emb = b.add(
            "local.code_embed".into(),
            &[cfg.n_q - 1, cfg.audio_vocab, dl],
            Embedding,
        );
        let local_pos = b.add("local.position".into(), &[cfg.n_q, dl], Embedding);
        let local = (0..cfg.local_layers)
            .map(|i| b.block(&format!("local.{i}"), dl, cfg.local_ffn))
            .collect();
        let local_lnf_g = b.add("local.ln_f.gain".into(), &[dl], Gain);
        let local_lnf_b = b.add("local.ln_f.bias".into(), &[dl], Bias);
        let head_w = b.add("head.w".into(), &[cfg.n_q, dl, cfg.audio_vocab], Weight);
        let head_b = b.add("head.b".into(), &[cfg.n_q, cfg.audio_vocab], Bias);
        Layout {
            entries: b.entries,
            total: b.total,
            text_emb,
            audio_emb,
            seg_emb,
            pos_emb,
            global,
            global_lnf_g,
            global_lnf_b,
            local_in_w,
            local_in_b,
            local_code_emb,
            local_pos,
            local,
            local_lnf_g,
            local_lnf_b,
            head_w,
            head_b,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Name of the tensor holding flat index `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.entries
            .iter()
            .find(|e| (e.offset..e.offset + e.len()).contains(&i))
            .map(|e| e.name.as_str())
            .unwrap_or("<out of range>")
    }

    /// Draw parameters: uniform in `[-s, s]` with `s = 1/sqrt(fan_in)` for
    /// weights, `0.5` for embeddings; residual output projections are
    /// additionally scaled by `1/sqrt(2 * layers)`; gains start at one and
    /// biases at zero.
    pub fn init(&self, cfg: &ModelConfig, rng: &mut Rng) -> Vec<f64> {
        let mut w = vec![0.0; self.total];
        let residual_out = |name: &str| name.ends_with("attn.wo") || name.ends_with("ffn.w2");
        for e in &self.entries {
            let slot = &mut w[e.offset..e.offset + e.len()];
            match e.kind {
                ParamKind::Gain => slot.fill(1.0),
                ParamKind::Bias => slot.fill(0.0),
                ParamKind::Embedding => {
                    for v in slot.iter_mut() {
                        *v = rng.random_range(-0.5..0.5);
                    }
                }
                ParamKind::Weight => {
                    let fan_in = e.shape[e.shape.len() - 2] as f64;
                    let mut s = 1.0 / fan_in.sqrt();
                    if residual_out(&e.name) {
                        let layers = if e.name.starts_with("global") {
                            cfg.global_layers
                        } else {
                            cfg.local_layers
                        };
                        s /= (2.0 * layers as f64).sqrt();
                    }
                    if e.name == "head.w" {
                        s *= 0.2;
                    }
                    for v in slot.iter_mut() {
                        *v = rng.random_range(-s..s);
                    }
                }
            }
        }
        w
    }

    /// Whether AdamW weight decay applies to the tensor.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for e in &self.entries {
            if e.kind == ParamKind::Weight {
                m[e.offset..e.offset + e.len()].fill(true);
            }
        }
        m
    }
}

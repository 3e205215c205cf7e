//! Incremental decoding with a key/value cache for the global transformer.
//!
//! Produces the same logits as a full [`Network::forward`] over the
//! sequence decoded so far, at a per-row cost instead of a per-sequence one.

use super::network::{block_forward, Network};
use super::ops;
use crate::error::{Error, Result};
use crate::seqdata::{Segment, SplicedSequence};

struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

pub struct Decoder<'a> {
    net: Network<'a>,
    layers: Vec<LayerCache>,
    rows: usize,
    hidden: Vec<f64>,
}

impl<'a> Decoder<'a> {
    /// Feed every row of `prefix` (usually a condition-only splice).
    pub fn new(net: Network<'a>, prefix: &SplicedSequence) -> Result<Self> {
        net.check_sequence(prefix)?;
        let mut dec = Self {
            net,
            layers: net
                .layout
                .global
                .iter()
                .map(|_| LayerCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                })
                .collect(),
            rows: 0,
            hidden: vec![0.0; net.cfg.global_dim],
        };
        for t in 0..prefix.len() {
            let (seg, pos) = prefix.segment_of(t);
            dec.push_row(seg, pos, prefix.row(t))?;
        }
        Ok(dec)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Append one row and advance the global transformer by one position.
    pub fn push_row(&mut self, seg: Segment, pos: usize, codes: &[u32]) -> Result<()> {
        let cfg = self.net.cfg;
        if self.rows + 1 > cfg.max_rows {
            return Err(Error::Length {
                rows: self.rows + 1,
                max_rows: cfg.max_rows,
            });
        }
        let (w, l) = (self.net.w, self.net.layout);
        let d = cfg.global_dim;
        let heads = cfg.global_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = vec![0.0; d];
        self.net.embed_row(seg, pos, codes, &mut x);
        for (idx, cache) in l.global.iter().zip(self.layers.iter_mut()) {
            let mut a = vec![0.0; d];
            ops::layer_norm(&x, &w[idx.ln1_g..idx.ln1_g + d], &w[idx.ln1_b..idx.ln1_b + d], d, &mut a);
            let mut qkv = vec![0.0; 3 * d];
            ops::linear(&a, &w[idx.wqkv..idx.wqkv + 3 * d * d], &w[idx.bqkv..idx.bqkv + 3 * d], d, 3 * d, &mut qkv);
            cache.keys.extend_from_slice(&qkv[d..2 * d]);
            cache.values.extend_from_slice(&qkv[2 * d..]);
            let m = self.rows + 1;
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; m];
            for h in 0..heads {
                let q = &qkv[h * dh..(h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = ops::dot(q, &cache.keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let o = &mut att[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter().enumerate() {
                    ops::axpy(s / z, &cache.values[j * d + h * dh..j * d + (h + 1) * dh], o);
                }
            }
            let mut o = vec![0.0; d];
            ops::linear(&att, &w[idx.wo..idx.wo + d * d], &w[idx.bo..idx.bo + d], d, d, &mut o);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let ffn = cfg.global_ffn;
            let mut c = vec![0.0; d];
            ops::layer_norm(&x, &w[idx.ln2_g..idx.ln2_g + d], &w[idx.ln2_b..idx.ln2_b + d], d, &mut c);
            let mut hbuf = vec![0.0; ffn];
            ops::linear(&c, &w[idx.w1..idx.w1 + d * ffn], &w[idx.b1..idx.b1 + ffn], d, ffn, &mut hbuf);
            for v in hbuf.iter_mut() {
                *v = ops::gelu(*v);
            }
            let mut f = vec![0.0; d];
            ops::linear(&hbuf, &w[idx.w2..idx.w2 + ffn * d], &w[idx.b2..idx.b2 + d], ffn, d, &mut f);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
        }
        ops::layer_norm(
            &x,
            &w[l.global_lnf_g..l.global_lnf_g + d],
            &w[l.global_lnf_b..l.global_lnf_b + d],
            d,
            &mut self.hidden,
        );
        self.rows += 1;
        Ok(())
    }

    /// Logits for code `j` of the next row, given that row's codes `< j`
    /// in `partial`.
    pub fn code_logits(&self, partial: &[u32], j: usize) -> Vec<f64> {
        let (cfg, w, l) = (self.net.cfg, self.net.w, self.net.layout);
        let (dg, dl) = (cfg.global_dim, cfg.local_dim);
        let mut projected = vec![0.0; dl];
        ops::linear(
            &self.hidden,
            &w[l.local_in_w..l.local_in_w + dg * dl],
            &w[l.local_in_b..l.local_in_b + dl],
            dg,
            dl,
            &mut projected,
        );
        let mut z = vec![0.0; (j + 1) * dl];
        self.net.local_inputs(&projected, partial, j + 1, &mut z);
        let ld = self.net.local_dims();
        for idx in &l.local {
            block_forward(w, idx, &ld, &mut z, j + 1);
        }
        let mut out = vec![0.0; dl];
        ops::layer_norm(
            &z[j * dl..],
            &w[l.local_lnf_g..l.local_lnf_g + dl],
            &w[l.local_lnf_b..l.local_lnf_b + dl],
            dl,
            &mut out,
        );
        let mut logits = vec![0.0; cfg.audio_vocab];
        self.net.head(j, &out, &mut logits);
        logits
    }
}

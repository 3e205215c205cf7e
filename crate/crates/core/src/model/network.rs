//! Full-sequence forward and backward passes of the two-level transformer.
//!
//! The global transformer runs causally over rows; its output at row
//! `t - 1` seeds a local transformer that predicts the `n_q` codes of row
//! `t` one after another. Code `(t, j)` therefore sees rows `< t` and
//! codes `(t, < j)` only.

use super::layout::{BlockIdx, Layout};
use super::ops::{self, LnCache};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::seqdata::{Segment, SplicedSequence};

/// Read-only view of a parameter vector.
#[derive(Clone, Copy)]
pub struct Network<'a> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
    pub w: &'a [f64],
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    ln1: LnCache,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    h: Vec<f64>,
    gh: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n_global: usize,
    global: Vec<BlockCache>,
    global_lnf: LnCache,
    predicted: Vec<usize>,
    gathered: Vec<f64>,
    local: Vec<BlockCache>,
    local_lnf: LnCache,
    local_out: Vec<f64>,
    /// `|predicted| * n_q` rows of `audio_vocab` logits; row `k * n_q + j`
    /// is code `j` of row `predicted[k]`.
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }
}

/// Split out two non-overlapping mutable ranges, `a` before `b`.
fn two_mut(g: &mut [f64], a: usize, la: usize, b: usize, lb: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + la <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + la], &mut hi[..lb])
}

pub(crate) struct Dims {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
}

pub(crate) fn block_forward(
    w: &[f64],
    idx: &BlockIdx,
    dims: &Dims,
    x: &mut [f64],
    group: usize,
) -> BlockCache {
    let Dims { d, heads, ffn } = *dims;
    let n = x.len() / d;
    let mut a = vec![0.0; n * d];
    let ln1 = ops::layer_norm(x, &w[idx.ln1_g..idx.ln1_g + d], &w[idx.ln1_b..idx.ln1_b + d], d, &mut a);
    let mut qkv = vec![0.0; n * 3 * d];
    ops::linear(&a, &w[idx.wqkv..idx.wqkv + 3 * d * d], &w[idx.bqkv..idx.bqkv + 3 * d], d, 3 * d, &mut qkv);
    let (att, probs) = ops::grouped_causal_attention(&qkv, n, d, heads, group);
    let mut o = vec![0.0; n * d];
    ops::linear(&att, &w[idx.wo..idx.wo + d * d], &w[idx.bo..idx.bo + d], d, d, &mut o);
    for (xi, oi) in x.iter_mut().zip(&o) {
        *xi += oi;
    }
    let mut c = vec![0.0; n * d];
    let ln2 = ops::layer_norm(x, &w[idx.ln2_g..idx.ln2_g + d], &w[idx.ln2_b..idx.ln2_b + d], d, &mut c);
    let mut h = vec![0.0; n * ffn];
    ops::linear(&c, &w[idx.w1..idx.w1 + d * ffn], &w[idx.b1..idx.b1 + ffn], d, ffn, &mut h);
    let gh: Vec<f64> = h.iter().map(|&v| ops::gelu(v)).collect();
    let mut f = vec![0.0; n * d];
    ops::linear(&gh, &w[idx.w2..idx.w2 + ffn * d], &w[idx.b2..idx.b2 + d], ffn, d, &mut f);
    for (xi, fi) in x.iter_mut().zip(&f) {
        *xi += fi;
    }
    BlockCache {
        ln1,
        a,
        qkv,
        probs,
        att,
        ln2,
        c,
        h,
        gh,
    }
}

/// On entry `dx` holds the gradient w.r.t. the block output; on exit, the
/// gradient w.r.t. its input.
pub(crate) fn block_backward(
    w: &[f64],
    idx: &BlockIdx,
    dims: &Dims,
    cache: &BlockCache,
    dx: &mut [f64],
    group: usize,
    grad: &mut [f64],
) {
    let Dims { d, heads, ffn } = *dims;
    let n = dx.len() / d;
    let mut dgh = vec![0.0; n * ffn];
    {
        let (dw, db) = two_mut(grad, idx.w2, ffn * d, idx.b2, d);
        ops::linear_backward(&cache.gh, &w[idx.w2..idx.w2 + ffn * d], dx, ffn, d, Some(&mut dgh), dw, db);
    }
    for (g, &h) in dgh.iter_mut().zip(&cache.h) {
        *g *= ops::gelu_grad(h);
    }
    let mut dc = vec![0.0; n * d];
    {
        let (dw, db) = two_mut(grad, idx.w1, d * ffn, idx.b1, ffn);
        ops::linear_backward(&cache.c, &w[idx.w1..idx.w1 + d * ffn], &dgh, d, ffn, Some(&mut dc), dw, db);
    }
    {
        let (dg, db) = two_mut(grad, idx.ln2_g, d, idx.ln2_b, d);
        ops::layer_norm_backward(&cache.ln2, &w[idx.ln2_g..idx.ln2_g + d], &dc, d, dx, dg, db);
    }
    let mut datt = vec![0.0; n * d];
    {
        let (dw, db) = two_mut(grad, idx.wo, d * d, idx.bo, d);
        ops::linear_backward(&cache.att, &w[idx.wo..idx.wo + d * d], dx, d, d, Some(&mut datt), dw, db);
    }
    let mut dqkv = vec![0.0; n * 3 * d];
    ops::grouped_causal_attention_backward(&cache.qkv, &cache.probs, &datt, n, d, heads, group, &mut dqkv);
    let mut da = vec![0.0; n * d];
    {
        let (dw, db) = two_mut(grad, idx.wqkv, 3 * d * d, idx.bqkv, 3 * d);
        ops::linear_backward(&cache.a, &w[idx.wqkv..idx.wqkv + 3 * d * d], &dqkv, d, 3 * d, Some(&mut da), dw, db);
    }
    {
        let (dg, db) = two_mut(grad, idx.ln1_g, d, idx.ln1_b, d);
        ops::layer_norm_backward(&cache.ln1, &w[idx.ln1_g..idx.ln1_g + d], &da, d, dx, dg, db);
    }
}

impl<'a> Network<'a> {
    pub fn new(cfg: &'a ModelConfig, layout: &'a Layout, w: &'a [f64]) -> Self {
        Self { cfg, layout, w }
    }

    pub(crate) fn global_dims(&self) -> Dims {
        Dims {
            d: self.cfg.global_dim,
            heads: self.cfg.global_heads,
            ffn: self.cfg.global_ffn,
        }
    }

    pub(crate) fn local_dims(&self) -> Dims {
        Dims {
            d: self.cfg.local_dim,
            heads: self.cfg.local_heads,
            ffn: self.cfg.local_ffn,
        }
    }

    pub fn check_sequence(&self, seq: &SplicedSequence) -> Result<()> {
        if seq.n_q() != self.cfg.n_q {
            return Err(Error::Shape(format!(
                "sequence n_q {} but model n_q {}",
                seq.n_q(),
                self.cfg.n_q
            )));
        }
        if seq.len() > self.cfg.max_rows {
            return Err(Error::Length {
                rows: seq.len(),
                max_rows: self.cfg.max_rows,
            });
        }
        for t in 0..seq.len() {
            let limit = match seq.segment_of(t).0 {
                Segment::Text => self.cfg.text_vocab,
                _ => self.cfg.audio_vocab,
            };
            if let Some(c) = seq.row(t).iter().find(|&&c| c as usize >= limit) {
                return Err(Error::InputDomain(format!("code {c} at row {t} outside [0, {limit})")));
            }
        }
        Ok(())
    }

    /// Input embedding of one row, written into `out` (length `global_dim`).
    pub(crate) fn embed_row(&self, seg: Segment, pos: usize, codes: &[u32], out: &mut [f64]) {
        let (dg, l, w) = (self.cfg.global_dim, self.layout, self.w);
        let s = seg as usize;
        out.copy_from_slice(&w[l.seg_emb + s * dg..l.seg_emb + (s + 1) * dg]);
        let p = l.pos_emb + (s * self.cfg.max_rows + pos) * dg;
        ops::axpy(1.0, &w[p..p + dg], out);
        match seg {
            Segment::Text => {
                let o = l.text_emb + codes[0] as usize * dg;
                ops::axpy(1.0, &w[o..o + dg], out);
            }
            _ => {
                for (j, &c) in codes.iter().enumerate() {
                    let o = l.audio_emb + (j * self.cfg.audio_vocab + c as usize) * dg;
                    ops::axpy(1.0, &w[o..o + dg], out);
                }
            }
        }
    }

    fn embed_row_backward(&self, seg: Segment, pos: usize, codes: &[u32], dx: &[f64], grad: &mut [f64]) {
        let (dg, l) = (self.cfg.global_dim, self.layout);
        let s = seg as usize;
        ops::axpy(1.0, dx, &mut grad[l.seg_emb + s * dg..l.seg_emb + (s + 1) * dg]);
        let p = l.pos_emb + (s * self.cfg.max_rows + pos) * dg;
        ops::axpy(1.0, dx, &mut grad[p..p + dg]);
        match seg {
            Segment::Text => {
                let o = l.text_emb + codes[0] as usize * dg;
                ops::axpy(1.0, dx, &mut grad[o..o + dg]);
            }
            _ => {
                for (j, &c) in codes.iter().enumerate() {
                    let o = l.audio_emb + (j * self.cfg.audio_vocab + c as usize) * dg;
                    ops::axpy(1.0, dx, &mut grad[o..o + dg]);
                }
            }
        }
    }

    /// Local-transformer input rows for one frame: position `j` gets the
    /// projected frame context, a position embedding and, for `j > 0`, the
    /// embedding of code `j - 1`.
    pub(crate) fn local_inputs(&self, projected: &[f64], codes: &[u32], upto: usize, out: &mut [f64]) {
        let (dl, l, w) = (self.cfg.local_dim, self.layout, self.w);
        for j in 0..upto {
            let z = &mut out[j * dl..(j + 1) * dl];
            z.copy_from_slice(projected);
            ops::axpy(1.0, &w[l.local_pos + j * dl..l.local_pos + (j + 1) * dl], z);
            if j > 0 {
                let o = l.local_code_emb + ((j - 1) * self.cfg.audio_vocab + codes[j - 1] as usize) * dl;
                ops::axpy(1.0, &w[o..o + dl], z);
            }
        }
    }

    /// Run the network and keep activations. `predicted` lists the rows
    /// whose codes get logits; each must satisfy `1 <= t < seq.len()`.
    pub fn forward(&self, seq: &SplicedSequence, predicted: &[usize]) -> Result<ForwardCache> {
        self.check_sequence(seq)?;
        if let Some(&t) = predicted.iter().find(|&&t| t == 0 || t >= seq.len()) {
            return Err(Error::Domain(format!("row {t} cannot be predicted")));
        }
        let (cfg, l, w) = (self.cfg, self.layout, self.w);
        let (dg, dl, nq, v) = (cfg.global_dim, cfg.local_dim, cfg.n_q, cfg.audio_vocab);
        let n_global = predicted.iter().copied().max().unwrap_or(0);

        let mut x = vec![0.0; n_global * dg];
        for t in 0..n_global {
            let (seg, pos) = seq.segment_of(t);
            self.embed_row(seg, pos, seq.row(t), &mut x[t * dg..(t + 1) * dg]);
        }
        let gd = self.global_dims();
        let global: Vec<BlockCache> = l
            .global
            .iter()
            .map(|idx| block_forward(w, idx, &gd, &mut x, n_global.max(1)))
            .collect();
        let mut hidden = vec![0.0; n_global * dg];
        let global_lnf = ops::layer_norm(
            &x,
            &w[l.global_lnf_g..l.global_lnf_g + dg],
            &w[l.global_lnf_b..l.global_lnf_b + dg],
            dg,
            &mut hidden,
        );

        let np = predicted.len();
        let mut gathered = vec![0.0; np * dg];
        for (k, &t) in predicted.iter().enumerate() {
            gathered[k * dg..(k + 1) * dg].copy_from_slice(&hidden[(t - 1) * dg..t * dg]);
        }
        let mut projected = vec![0.0; np * dl];
        ops::linear(
            &gathered,
            &w[l.local_in_w..l.local_in_w + dg * dl],
            &w[l.local_in_b..l.local_in_b + dl],
            dg,
            dl,
            &mut projected,
        );
        let mut z = vec![0.0; np * nq * dl];
        for (k, &t) in predicted.iter().enumerate() {
            self.local_inputs(
                &projected[k * dl..(k + 1) * dl],
                seq.row(t),
                nq,
                &mut z[k * nq * dl..(k + 1) * nq * dl],
            );
        }
        let ld = self.local_dims();
        let local: Vec<BlockCache> = l
            .local
            .iter()
            .map(|idx| block_forward(w, idx, &ld, &mut z, nq))
            .collect();
        let mut local_out = vec![0.0; np * nq * dl];
        let local_lnf = ops::layer_norm(
            &z,
            &w[l.local_lnf_g..l.local_lnf_g + dl],
            &w[l.local_lnf_b..l.local_lnf_b + dl],
            dl,
            &mut local_out,
        );
        let mut logits = vec![0.0; np * nq * v];
        for r in 0..np * nq {
            let j = r % nq;
            self.head(j, &local_out[r * dl..(r + 1) * dl], &mut logits[r * v..(r + 1) * v]);
        }
        Ok(ForwardCache {
            n_global,
            global,
            global_lnf,
            predicted: predicted.to_vec(),
            gathered,
            local,
            local_lnf,
            local_out,
            logits,
        })
    }

    pub(crate) fn head(&self, j: usize, o: &[f64], logits: &mut [f64]) {
        let (dl, v, l, w) = (self.cfg.local_dim, self.cfg.audio_vocab, self.layout, self.w);
        let hw = l.head_w + j * dl * v;
        let hb = l.head_b + j * v;
        ops::linear(o, &w[hw..hw + dl * v], &w[hb..hb + v], dl, v, logits);
    }

    /// Accumulate parameter gradients given `dlogits` (same shape as
    /// `cache.logits`).
    pub fn backward(&self, seq: &SplicedSequence, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        let (cfg, l, w) = (self.cfg, self.layout, self.w);
        let (dg, dl, nq, v) = (cfg.global_dim, cfg.local_dim, cfg.n_q, cfg.audio_vocab);
        let np = cache.predicted.len();

        let mut d_out = vec![0.0; np * nq * dl];
        for r in 0..np * nq {
            let j = r % nq;
            let hw = l.head_w + j * dl * v;
            let hb = l.head_b + j * v;
            let (dw, db) = two_mut(grad, hw, dl * v, hb, v);
            ops::linear_backward(
                &cache.local_out[r * dl..(r + 1) * dl],
                &w[hw..hw + dl * v],
                &dlogits[r * v..(r + 1) * v],
                dl,
                v,
                Some(&mut d_out[r * dl..(r + 1) * dl]),
                dw,
                db,
            );
        }
        let mut dz = vec![0.0; np * nq * dl];
        {
            let (dgn, dbn) = two_mut(grad, l.local_lnf_g, dl, l.local_lnf_b, dl);
            ops::layer_norm_backward(&cache.local_lnf, &w[l.local_lnf_g..l.local_lnf_g + dl], &d_out, dl, &mut dz, dgn, dbn);
        }
        let ld = self.local_dims();
        for (idx, bc) in l.local.iter().zip(&cache.local).rev() {
            block_backward(w, idx, &ld, bc, &mut dz, nq, grad);
        }
        let mut d_proj = vec![0.0; np * dl];
        for (k, &t) in cache.predicted.iter().enumerate() {
            let codes = seq.row(t);
            for j in 0..nq {
                let dzj = &dz[(k * nq + j) * dl..(k * nq + j + 1) * dl];
                ops::axpy(1.0, dzj, &mut d_proj[k * dl..(k + 1) * dl]);
                ops::axpy(1.0, dzj, &mut grad[l.local_pos + j * dl..l.local_pos + (j + 1) * dl]);
                if j > 0 {
                    let o = l.local_code_emb + ((j - 1) * v + codes[j - 1] as usize) * dl;
                    ops::axpy(1.0, dzj, &mut grad[o..o + dl]);
                }
            }
        }
        let mut d_gathered = vec![0.0; np * dg];
        {
            let (dw, db) = two_mut(grad, l.local_in_w, dg * dl, l.local_in_b, dl);
            ops::linear_backward(
                &cache.gathered,
                &w[l.local_in_w..l.local_in_w + dg * dl],
                &d_proj,
                dg,
                dl,
                Some(&mut d_gathered),
                dw,
                db,
            );
        }
        let n_global = cache.n_global;
        let mut d_hidden = vec![0.0; n_global * dg];
        for (k, &t) in cache.predicted.iter().enumerate() {
            ops::axpy(1.0, &d_gathered[k * dg..(k + 1) * dg], &mut d_hidden[(t - 1) * dg..t * dg]);
        }
        let mut dx = vec![0.0; n_global * dg];
        {
            let (dgn, dbn) = two_mut(grad, l.global_lnf_g, dg, l.global_lnf_b, dg);
            ops::layer_norm_backward(&cache.global_lnf, &w[l.global_lnf_g..l.global_lnf_g + dg], &d_hidden, dg, &mut dx, dgn, dbn);
        }
        let gd = self.global_dims();
        for (idx, bc) in l.global.iter().zip(&cache.global).rev() {
            block_backward(w, idx, &gd, bc, &mut dx, n_global.max(1), grad);
        }
        for t in 0..n_global {
            let (seg, pos) = seq.segment_of(t);
            self.embed_row_backward(seg, pos, seq.row(t), &dx[t * dg..(t + 1) * dg], grad);
        }
    }
}

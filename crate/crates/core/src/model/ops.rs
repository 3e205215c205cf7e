//! Dense kernels on row-major `f64` slices, with matching backward passes.
//! Backward functions accumulate into their gradient outputs.

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = x W + b` for `x: n x din`, `W: din x dout`.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize, y: &mut [f64]) {
    for (xi, yi) in x.chunks_exact(din).zip(y.chunks_exact_mut(dout)) {
        yi.copy_from_slice(b);
        for (k, &a) in xi.iter().enumerate() {
            axpy(a, &w[k * dout..(k + 1) * dout], yi);
        }
    }
}

/// Backward of [`linear`]: `dx += dy W^T`, `dW += x^T dy`, `db += sum dy`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    din: usize,
    dout: usize,
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for (xi, dyi) in x.chunks_exact(din).zip(dy.chunks_exact(dout)) {
        axpy(1.0, dyi, db);
        for (k, &a) in xi.iter().enumerate() {
            axpy(a, dyi, &mut dw[k * dout..(k + 1) * dout]);
        }
    }
    if let Some(dx) = dx {
        for (dxi, dyi) in dx.chunks_exact_mut(din).zip(dy.chunks_exact(dout)) {
            for (k, d) in dxi.iter_mut().enumerate() {
                *d += dot(&w[k * dout..(k + 1) * dout], dyi);
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64], d: usize, y: &mut [f64]) -> LnCache {
    let n = x.len() / d;
    let mut cache = LnCache {
        xhat: vec![0.0; x.len()],
        rstd: vec![0.0; n],
    };
    for (i, (xi, yi)) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).enumerate() {
        let mean = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        cache.rstd[i] = rstd;
        let xh = &mut cache.xhat[i * d..(i + 1) * d];
        for k in 0..d {
            xh[k] = (xi[k] - mean) * rstd;
            yi[k] = xh[k] * g[k] + b[k];
        }
    }
    cache
}

pub fn layer_norm_backward(
    cache: &LnCache,
    g: &[f64],
    dy: &[f64],
    d: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for (i, (dyi, dxi)) in dy.chunks_exact(d).zip(dx.chunks_exact_mut(d)).enumerate() {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for k in 0..d {
            dg[k] += dyi[k] * xh[k];
            db[k] += dyi[k];
            dxhat[k] = dyi[k] * g[k];
            mean_dxhat += dxhat[k];
            mean_dxhat_xhat += dxhat[k] * xh[k];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rstd = cache.rstd[i];
        for k in 0..d {
            dxi[k] += rstd * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal multi-head attention inside contiguous groups of `group` rows.
///
/// `qkv` holds `[q | k | v]` per row (`3 d` wide). Returns the
/// concatenated head outputs (`n x d`) and the attention probabilities,
/// stored as `probs[(h * n + i) * group + (j - group_start)]`.
pub fn grouped_causal_attention(
    qkv: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    group: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * group];
    let mut scores = vec![0.0; group];
    for h in 0..heads {
        for i in 0..n {
            let start = i - i % group;
            let q = &qkv[i * 3 * d + h * dh..i * 3 * d + (h + 1) * dh];
            let m = i - start + 1;
            let mut max = f64::NEG_INFINITY;
            for (jj, s) in scores[..m].iter_mut().enumerate() {
                let j = start + jj;
                let k = &qkv[j * 3 * d + d + h * dh..j * 3 * d + d + (h + 1) * dh];
                *s = dot(q, k) * scale;
                max = max.max(*s);
            }
            let mut z = 0.0;
            for s in scores[..m].iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let p = &mut probs[(h * n + i) * group..(h * n + i) * group + m];
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (jj, pj) in p.iter_mut().enumerate() {
                *pj = scores[jj] / z;
                let j = start + jj;
                let v = &qkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh];
                axpy(*pj, v, o);
            }
        }
    }
    (out, probs)
}

/// Backward of [`grouped_causal_attention`]; accumulates into `dqkv`.
#[allow(clippy::too_many_arguments)]
pub fn grouped_causal_attention_backward(
    qkv: &[f64],
    probs: &[f64],
    dout: &[f64],
    n: usize,
    d: usize,
    heads: usize,
    group: usize,
    dqkv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; group];
    for h in 0..heads {
        for i in 0..n {
            let start = i - i % group;
            let m = i - start + 1;
            let p = &probs[(h * n + i) * group..(h * n + i) * group + m];
            let doi = &dout[i * d + h * dh..i * d + (h + 1) * dh];
            let mut sum = 0.0;
            for jj in 0..m {
                let j = start + jj;
                let v = &qkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh];
                dp[jj] = dot(doi, v);
                sum += p[jj] * dp[jj];
                axpy(
                    p[jj],
                    doi,
                    &mut dqkv[j * 3 * d + 2 * d + h * dh..j * 3 * d + 2 * d + (h + 1) * dh],
                );
            }
            for jj in 0..m {
                let ds = p[jj] * (dp[jj] - sum) * scale;
                let j = start + jj;
                let (qi, kj) = (i * 3 * d + h * dh, j * 3 * d + d + h * dh);
                for c in 0..dh {
                    let (q, k) = (qkv[qi + c], qkv[kj + c]);
                    dqkv[qi + c] += ds * k;
                    dqkv[kj + c] += ds * q;
                }
            }
        }
    }
}

/// Numerically stable log-softmax. Probabilities below `1e-30` are never
/// materialised; the log form is returned directly.
pub fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

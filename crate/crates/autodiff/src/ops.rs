//! Numeric kernels behind the graph ops. Plain slices in, plain vectors out.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::graph::{NormMode, Var};

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// `[b, m, n] -> [b, n, m]`
pub(crate) fn transpose3(src: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        let base = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn linear_forward(x: &[f64], w: &[f64], b: &[f64], n_in: usize, n_out: usize) -> Vec<f64> {
    let rows = x.len() / n_in;
    let mut out = Vec::with_capacity(rows * n_out);
    for xr in x.chunks(n_in) {
        for (wr, bias) in w.chunks(n_in).zip(b) {
            out.push(bias + dot(xr, wr));
        }
    }
    out
}

pub(crate) fn linear_backward_input(dx: &mut [f64], g: &[f64], w: &[f64], n_in: usize, n_out: usize) {
    for (dxr, gr) in dx.chunks_mut(n_in).zip(g.chunks(n_out)) {
        for (gv, wr) in gr.iter().zip(w.chunks(n_in)) {
            axpy(dxr, *gv, wr);
        }
    }
}

pub(crate) fn linear_backward_weight(dw: &mut [f64], g: &[f64], x: &[f64], n_in: usize, n_out: usize) {
    for (xr, gr) in x.chunks(n_in).zip(g.chunks(n_out)) {
        for (gv, dwr) in gr.iter().zip(dw.chunks_mut(n_in)) {
            axpy(dwr, *gv, xr);
        }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub len: usize,
    pub kernel: usize,
}

impl ConvDims {
    /// Output range `[lo, hi)` that reads a valid input sample at tap `k`,
    /// and the input offset of that tap.
    fn tap(&self, k: usize) -> (usize, usize, isize) {
        let shift = k as isize - (self.kernel / 2) as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (self.len as isize - shift).clamp(0, self.len as isize) as usize;
        (lo, hi.max(lo), shift)
    }
}

pub(crate) fn conv1d_forward(d: &ConvDims, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.cout * d.len];
    for bi in 0..d.batch {
        for o in 0..d.cout {
            let y = &mut out[(bi * d.cout + o) * d.len..][..d.len];
            y.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..d.cin {
                let xr = &x[(bi * d.cin + c) * d.len..][..d.len];
                for k in 0..d.kernel {
                    let wv = w[(o * d.cin + c) * d.kernel + k];
                    let (lo, hi, shift) = d.tap(k);
                    let src = &xr[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    axpy(&mut y[lo..hi], wv, src);
                }
            }
        }
    }
    out
}

pub(crate) fn conv1d_backward_input(d: &ConvDims, dx: &mut [f64], g: &[f64], w: &[f64]) {
    for bi in 0..d.batch {
        for o in 0..d.cout {
            let gr = &g[(bi * d.cout + o) * d.len..][..d.len];
            for c in 0..d.cin {
                let dxr = &mut dx[(bi * d.cin + c) * d.len..][..d.len];
                for k in 0..d.kernel {
                    let wv = w[(o * d.cin + c) * d.kernel + k];
                    let (lo, hi, shift) = d.tap(k);
                    let dst = &mut dxr[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    axpy(dst, wv, &gr[lo..hi]);
                }
            }
        }
    }
}

pub(crate) fn conv1d_backward_weight(d: &ConvDims, dw: &mut [f64], g: &[f64], x: &[f64]) {
    for bi in 0..d.batch {
        for o in 0..d.cout {
            let gr = &g[(bi * d.cout + o) * d.len..][..d.len];
            for c in 0..d.cin {
                let xr = &x[(bi * d.cin + c) * d.len..][..d.len];
                for k in 0..d.kernel {
                    let (lo, hi, shift) = d.tap(k);
                    let src = &xr[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    dw[(o * d.cin + c) * d.kernel + k] += dot(&gr[lo..hi], src);
                }
            }
        }
    }
}

/// Saved state of a batch- or layer-norm node.
pub(crate) struct NormCache {
    /// `[x, gamma, beta]`
    pub inputs: [Var; 3],
    pub xhat: Vec<f64>,
    /// Per channel (batch norm) or per row (layer norm).
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// True when normalised with statistics of the input itself.
    pub batch_stats: bool,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    (batch, chans, len): (usize, usize, usize),
    running: (&[f64], &[f64]),
    mode: NormMode,
    eps: f64,
    inputs: [Var; 3],
) -> (Vec<f64>, NormCache) {
    let (mean, var) = match mode {
        NormMode::Eval => (running.0.to_vec(), running.1.to_vec()),
        NormMode::Train => {
            let n = (batch * len) as f64;
            let mut mean = vec![0.0; chans];
            let mut var = vec![0.0; chans];
            for c in 0..chans {
                let rows = (0..batch).map(|b| &x[(b * chans + c) * len..][..len]);
                let m = rows.clone().flatten().sum::<f64>() / n;
                let v = rows.flatten().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                mean[c] = m;
                var[c] = v;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..chans {
            let off = (b * chans + c) * len;
            for i in off..off + len {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                out[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    let cache = NormCache {
        inputs,
        xhat,
        inv_std,
        mean,
        var,
        batch_stats: mode == NormMode::Train,
    };
    (out, cache)
}

pub(crate) fn batch_norm_backward(
    cache: &NormCache,
    gamma: &[f64],
    g: &[f64],
    (batch, chans, len): (usize, usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; chans];
    let mut dbeta = vec![0.0; chans];
    let n = (batch * len) as f64;
    for c in 0..chans {
        let idx = || (0..batch).flat_map(move |b| (b * chans + c) * len..(b * chans + c + 1) * len);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in idx() {
            sum_g += g[i];
            sum_gx += g[i] * cache.xhat[i];
        }
        dgamma[c] = sum_gx;
        dbeta[c] = sum_g;
        let scale = gamma[c] * cache.inv_std[c];
        if cache.batch_stats {
            for i in idx() {
                dx[i] = scale * (g[i] - sum_g / n - cache.xhat[i] * sum_gx / n);
            }
        } else {
            for i in idx() {
                dx[i] = scale * g[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: usize,
    eps: f64,
    inputs: [Var; 3],
) -> (Vec<f64>, NormCache) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    let mut means = Vec::with_capacity(rows);
    let mut vars = Vec::with_capacity(rows);
    for (r, xr) in x.chunks(d).enumerate() {
        let m = xr.iter().sum::<f64>() / d as f64;
        let v = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let is = 1.0 / (v + eps).sqrt();
        for j in 0..d {
            let i = r * d + j;
            xhat[i] = (xr[j] - m) * is;
            out[i] = gamma[j] * xhat[i] + beta[j];
        }
        inv_std.push(is);
        means.push(m);
        vars.push(v);
    }
    let cache = NormCache {
        inputs,
        xhat,
        inv_std,
        mean: means,
        var: vars,
        batch_stats: true,
    };
    (out, cache)
}

pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    gamma: &[f64],
    g: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let n = d as f64;
    for (r, gr) in g.chunks(d).enumerate() {
        let xr = &cache.xhat[r * d..(r + 1) * d];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..d {
            let gh = gr[j] * gamma[j];
            sum_g += gh;
            sum_gx += gh * xr[j];
            dgamma[j] += gr[j] * xr[j];
            dbeta[j] += gr[j];
        }
        let is = cache.inv_std[r];
        for j in 0..d {
            let gh = gr[j] * gamma[j];
            dx[r * d + j] = is * (gh - sum_g / n - xr[j] * sum_gx / n);
        }
    }
    (dx, dgamma, dbeta)
}

/// Returns the output `[b, t, d]` and the attention probabilities
/// `[b, heads, t, t]`.
pub(crate) fn attention_forward(
    (batch, tokens, dim, heads): (usize, usize, usize, usize),
    q: &[f64],
    k: &[f64],
    v: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * tokens * dim];
    let mut probs = vec![0.0; batch * heads * tokens * tokens];
    for b in 0..batch {
        for h in 0..heads {
            let row = |t: usize| (b * tokens + t) * dim + h * dh;
            for i in 0..tokens {
                let p = &mut probs[((b * heads + h) * tokens + i) * tokens..][..tokens];
                let qi = &q[row(i)..row(i) + dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = scale * dot(qi, &k[row(j)..row(j) + dh]);
                }
                softmax_in_place(p);
                let o = &mut out[row(i)..row(i) + dh];
                for (j, pj) in p.iter().enumerate() {
                    axpy(o, *pj, &v[row(j)..row(j) + dh]);
                }
            }
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    (batch, tokens, dim, heads): (usize, usize, usize, usize),
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; tokens];
    for b in 0..batch {
        for h in 0..heads {
            let row = |t: usize| (b * tokens + t) * dim + h * dh;
            for i in 0..tokens {
                let p = &probs[((b * heads + h) * tokens + i) * tokens..][..tokens];
                let gi = &g[row(i)..row(i) + dh];
                for j in 0..tokens {
                    dp[j] = dot(gi, &v[row(j)..row(j) + dh]);
                    axpy(&mut dv[row(j)..row(j) + dh], p[j], gi);
                }
                let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..tokens {
                    let ds = p[j] * (dp[j] - pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (ri, rj) = (row(i), row(j));
                    axpy(&mut dq[ri..ri + dh], ds, &k[rj..rj + dh]);
                    axpy(&mut dk[rj..rj + dh], ds, &q[ri..ri + dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

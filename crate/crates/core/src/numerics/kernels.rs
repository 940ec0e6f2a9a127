//! Raw slice kernels.
//!
//! Each kernel computes an output row from inputs without depending on how
//! many other rows are computed in the same call. The tape and the streaming
//! encoder both call these, which is what makes incremental inference
//! bit-identical to a full forward pass.

use super::{Real, LAYER_NORM_EPS, MASK_PENALTY};

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub fn matmul_at_acc<F: Real>(a: &[F], g: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn relu_in_place<F: Real>(x: &mut [F]) {
    for v in x {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

pub fn add_in_place<F: Real>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Numerically stable softmax of one contiguous row, in place.
pub fn softmax_row<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn log_softmax_row<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Layer norm over rows of width `d`. Returns `(y, xhat, rstd)`.
pub fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = gain.len();
    let rows = x.len() / d;
    let eps = F::of(LAYER_NORM_EPS);
    let dn = F::of(d as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `mq×d`, `k` and `v` are `mk×d`. `allowed(i, j)` says whether query
/// `i` may attend key `j`; masked scores get [`MASK_PENALTY`] added before
/// the softmax. Returns the output `mq×d` and the attention probabilities
/// laid out as `heads×mq×mk`.
#[allow(clippy::too_many_arguments)]
pub fn attention<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    mq: usize,
    mk: usize,
    d: usize,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let penalty = F::of(MASK_PENALTY);
    let mut out = vec![F::zero(); mq * d];
    let mut probs = vec![F::zero(); heads * mq * mk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..mq {
            let qi = &q[i * d + off..i * d + off + dh];
            let p = &mut probs[(h * mq + i) * mk..(h * mq + i + 1) * mk];
            for j in 0..mk {
                let kj = &k[j * d + off..j * d + off + dh];
                let mut s = dot(qi, kj) * scale;
                if !allowed(i, j) {
                    s += penalty;
                }
                p[j] = s;
            }
            softmax_row(p);
            let o = &mut out[i * d + off..i * d + off + dh];
            for j in 0..mk {
                let w = p[j];
                let vj = &v[j * d + off..j * d + off + dh];
                for (ov, &vv) in o.iter_mut().zip(vj) {
                    *ov += w * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Geometry of a look-ahead 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub lookahead: usize,
}

impl ConvGeom {
    /// Frames of causal padding on the left.
    pub fn left(&self) -> usize {
        self.width - 1 - self.lookahead
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.stride)
    }

    /// Input index of kernel tap `w` for output frame `t`, if inside `[0, t_in)`.
    #[inline]
    pub fn tap(&self, t: usize, w: usize, t_in: usize) -> Option<usize> {
        let pos = (t * self.stride + w) as isize - self.left() as isize;
        (pos >= 0 && (pos as usize) < t_in).then_some(pos as usize)
    }

    /// Highest input index output frame `t` reads.
    pub fn last_input(&self, t: usize) -> usize {
        t * self.stride + self.lookahead
    }
}

/// Computes output frames `[t0, t1)` of a convolution over `x[t_in×c_in]`.
/// The kernel is laid out `width×c_in×c_out`.
pub fn conv1d_rows<F: Real>(
    x: &[F],
    t_in: usize,
    kernel: &[F],
    bias: &[F],
    g: ConvGeom,
    t0: usize,
    t1: usize,
) -> Vec<F> {
    let co = g.c_out;
    let mut out = vec![F::zero(); (t1 - t0) * co];
    for t in t0..t1 {
        let row = &mut out[(t - t0) * co..(t - t0 + 1) * co];
        for w in 0..g.width {
            let Some(i) = g.tap(t, w, t_in) else { continue };
            let xr = &x[i * g.c_in..(i + 1) * g.c_in];
            for (c, &xv) in xr.iter().enumerate() {
                if xv == F::zero() {
                    continue;
                }
                let krow = &kernel[(w * g.c_in + c) * co..(w * g.c_in + c + 1) * co];
                for (o, &kv) in row.iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        }
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

/// Sinusoidal position encoding row for absolute position `pos`.
pub fn position_encoding<F: Real>(pos: usize, d: usize) -> Vec<F> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
        .collect()
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

//! Raw forward/backward loops over flat row-major buffers.
//!
//! Every reduction runs in a fixed order so repeated calls are bit-identical.
//! Convolutions accumulate each output element over (input channel, kernel
//! taps) in lexicographic order, the same order a naive nested-loop
//! reference uses.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Conv2dDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.ph + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pw + 1 - self.kw
    }
}

/// Output index range `lo..hi` for which `out + tap - pad` lands in `0..extent`.
#[inline]
fn valid_range(tap: usize, pad: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (extent + pad).saturating_sub(tap).min(out_extent);
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &[f64], k: &[f64], d: &Conv2dDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.n * d.o * oh * ow];
    for n in 0..d.n {
        for o in 0..d.o {
            let out_plane = &mut out[(n * d.o + o) * oh * ow..(n * d.o + o + 1) * oh * ow];
            for c in 0..d.c {
                let in_plane = &x[(n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w];
                for ki in 0..d.kh {
                    let (y0, y1) = valid_range(ki, d.ph, d.h, oh);
                    for kj in 0..d.kw {
                        let wv = k[((o * d.c + c) * d.kh + ki) * d.kw + kj];
                        let (x0, x1) = valid_range(kj, d.pw, d.w, ow);
                        for y in y0..y1 {
                            let iy = y + ki - d.ph;
                            let src = &in_plane[iy * d.w + x0 + kj - d.pw..iy * d.w + x1 + kj - d.pw];
                            let dst = &mut out_plane[y * ow + x0..y * ow + x1];
                            for (o_v, &i_v) in dst.iter_mut().zip(src) {
                                *o_v += wv * i_v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d_forward` w.r.t. input and kernel. Either may be skipped.
pub fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    d: &Conv2dDims,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    for n in 0..d.n {
        for o in 0..d.o {
            let g_plane = &g[(n * d.o + o) * oh * ow..(n * d.o + o + 1) * oh * ow];
            for c in 0..d.c {
                let plane = (n * d.c + c) * d.h * d.w..(n * d.c + c + 1) * d.h * d.w;
                for ki in 0..d.kh {
                    let (y0, y1) = valid_range(ki, d.ph, d.h, oh);
                    for kj in 0..d.kw {
                        let widx = ((o * d.c + c) * d.kh + ki) * d.kw + kj;
                        let (x0, x1) = valid_range(kj, d.pw, d.w, ow);
                        if let Some(dx) = dx.as_mut() {
                            let wv = k[widx];
                            let dx_plane = &mut dx[plane.clone()];
                            for y in y0..y1 {
                                let iy = y + ki - d.ph;
                                let dst = &mut dx_plane[iy * d.w + x0 + kj - d.pw..iy * d.w + x1 + kj - d.pw];
                                for (d_v, &g_v) in dst.iter_mut().zip(&g_plane[y * ow + x0..y * ow + x1]) {
                                    *d_v += wv * g_v;
                                }
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            let in_plane = &x[plane.clone()];
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let iy = y + ki - d.ph;
                                let src = &in_plane[iy * d.w + x0 + kj - d.pw..iy * d.w + x1 + kj - d.pw];
                                for (&i_v, &g_v) in src.iter().zip(&g_plane[y * ow + x0..y * ow + x1]) {
                                    acc += i_v * g_v;
                                }
                            }
                            dk[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Temporal convolution over `x: [T, C, S]` with kernel `[O, C, kt]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dDims {
    pub t: usize,
    pub c: usize,
    pub s: usize,
    pub o: usize,
    pub kt: usize,
    pub pad: usize,
    pub stride: usize,
}

impl Conv1dDims {
    pub fn out_t(&self) -> usize {
        (self.t + 2 * self.pad - self.kt) / self.stride + 1
    }

    #[inline]
    fn src_frame(&self, t: usize, j: usize) -> Option<usize> {
        let pos = t * self.stride + j;
        (pos >= self.pad && pos - self.pad < self.t).then(|| pos - self.pad)
    }
}

pub fn conv1d_time_forward(x: &[f64], k: &[f64], d: &Conv1dDims) -> Vec<f64> {
    let ot = d.out_t();
    let mut out = vec![0.0; ot * d.o * d.s];
    for t in 0..ot {
        for o in 0..d.o {
            let dst = &mut out[(t * d.o + o) * d.s..(t * d.o + o + 1) * d.s];
            for c in 0..d.c {
                for j in 0..d.kt {
                    let Some(it) = d.src_frame(t, j) else { continue };
                    let wv = k[(o * d.c + c) * d.kt + j];
                    let src = &x[(it * d.c + c) * d.s..(it * d.c + c + 1) * d.s];
                    for (o_v, &i_v) in dst.iter_mut().zip(src) {
                        *o_v += wv * i_v;
                    }
                }
            }
        }
    }
    out
}

pub fn conv1d_time_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    d: &Conv1dDims,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let ot = d.out_t();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    for t in 0..ot {
        for o in 0..d.o {
            let gs = &g[(t * d.o + o) * d.s..(t * d.o + o + 1) * d.s];
            for c in 0..d.c {
                for j in 0..d.kt {
                    let Some(it) = d.src_frame(t, j) else { continue };
                    let widx = (o * d.c + c) * d.kt + j;
                    let range = (it * d.c + c) * d.s..(it * d.c + c + 1) * d.s;
                    if let Some(dx) = dx.as_mut() {
                        let wv = k[widx];
                        for (d_v, &g_v) in dx[range.clone()].iter_mut().zip(gs) {
                            *d_v += wv * g_v;
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        dk[widx] += x[range].iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Transposed temporal convolution with stride equal to the kernel length:
/// `out[t*kt + j, o] = sum_c k[o, c, j] * x[t, c]`.
pub fn conv_transpose_time_forward(x: &[f64], k: &[f64], t: usize, c: usize, s: usize, o: usize, kt: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * kt * o * s];
    for ti in 0..t {
        for j in 0..kt {
            let ot = ti * kt + j;
            for oc in 0..o {
                let dst = &mut out[(ot * o + oc) * s..(ot * o + oc + 1) * s];
                for ci in 0..c {
                    let wv = k[(oc * c + ci) * kt + j];
                    for (o_v, &i_v) in dst.iter_mut().zip(&x[(ti * c + ci) * s..(ti * c + ci + 1) * s]) {
                        *o_v += wv * i_v;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_time_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    t: usize,
    c: usize,
    s: usize,
    o: usize,
    kt: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for ti in 0..t {
        for j in 0..kt {
            let ot = ti * kt + j;
            for oc in 0..o {
                let gs = &g[(ot * o + oc) * s..(ot * o + oc + 1) * s];
                for ci in 0..c {
                    let widx = (oc * c + ci) * kt + j;
                    let range = (ti * c + ci) * s..(ti * c + ci + 1) * s;
                    let wv = k[widx];
                    for (d_v, &g_v) in dx[range.clone()].iter_mut().zip(gs) {
                        *d_v += wv * g_v;
                    }
                    dk[widx] += x[range].iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    (dx, dk)
}

/// `[m, k] x [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o_v, &b_v) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o_v += av * b_v;
            }
        }
    }
    out
}

/// `a^T` for `a: [m, n]`.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Scaled dot-product attention over `L` positions at each of `S` independent
/// sites; `q, k, v: [L, D, S]`. Returns the output and the softmax weights
/// laid out `[S, L, L]`.
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], l: usize, d: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; l * d * s];
    let mut probs = vec![0.0; s * l * l];
    let at = |buf: &[f64], li: usize, di: usize, si: usize| buf[(li * d + di) * s + si];
    for si in 0..s {
        let p = &mut probs[si * l * l..(si + 1) * l * l];
        for i in 0..l {
            let row = &mut p[i * l..(i + 1) * l];
            for (j, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for di in 0..d {
                    acc += at(q, i, di, si) * at(k, j, di, si);
                }
                *r = acc * scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                z += *r;
            }
            for r in row.iter_mut() {
                *r /= z;
            }
            for di in 0..d {
                let mut acc = 0.0;
                for (j, &pij) in row.iter().enumerate() {
                    acc += pij * at(v, j, di, si);
                }
                out[(i * d + di) * s + si] = acc;
            }
        }
    }
    (out, probs)
}

/// Gradients of attention w.r.t. `(q, k, v)` given saved softmax weights.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    l: usize,
    d: usize,
    s: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let idx = |li: usize, di: usize, si: usize| (li * d + di) * s + si;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; l * l];
    for si in 0..s {
        let p = &probs[si * l * l..(si + 1) * l * l];
        for i in 0..l {
            for j in 0..l {
                let mut acc = 0.0;
                for di in 0..d {
                    acc += g[idx(i, di, si)] * v[idx(j, di, si)];
                    dv[idx(j, di, si)] += p[i * l + j] * g[idx(i, di, si)];
                }
                dp[i * l + j] = acc;
            }
        }
        for i in 0..l {
            let row_dot: f64 = (0..l).map(|j| dp[i * l + j] * p[i * l + j]).sum();
            for j in 0..l {
                let ds = p[i * l + j] * (dp[i * l + j] - row_dot) * scale;
                for di in 0..d {
                    dq[idx(i, di, si)] += ds * k[idx(j, di, si)];
                    dk[idx(j, di, si)] += ds * q[idx(i, di, si)];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Saved statistics of a group normalization, one entry per (sample, group).
#[derive(Clone, Debug)]
pub struct GroupNormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Group normalization of `x: [N, C, S]` with per-channel affine parameters.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
    eps: f64,
) -> (Vec<f64>, GroupNormStats) {
    let cg = c / groups;
    let m = (cg * s) as f64;
    let mut out = vec![0.0; x.len()];
    let mut stats = GroupNormStats { mean: vec![0.0; n * groups], rstd: vec![0.0; n * groups] };
    for ni in 0..n {
        for gi in 0..groups {
            let range = (ni * c + gi * cg) * s..(ni * c + (gi + 1) * cg) * s;
            let seg = &x[range.clone()];
            let mean = seg.iter().sum::<f64>() / m;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.mean[ni * groups + gi] = mean;
            stats.rstd[ni * groups + gi] = rstd;
            for (ci_local, chunk) in out[range.clone()].chunks_mut(s).enumerate() {
                let ch = gi * cg + ci_local;
                let src = &seg[ci_local * s..(ci_local + 1) * s];
                for (o_v, &i_v) in chunk.iter_mut().zip(src) {
                    *o_v = (i_v - mean) * rstd * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (out, stats)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward(
    x: &[f64],
    gamma: &[f64],
    g: &[f64],
    stats: &GroupNormStats,
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let m = (cg * s) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for gi in 0..groups {
            let mean = stats.mean[ni * groups + gi];
            let rstd = stats.rstd[ni * groups + gi];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci_local in 0..cg {
                let ch = gi * cg + ci_local;
                let base = (ni * c + ch) * s;
                for si in 0..s {
                    let xhat = (x[base + si] - mean) * rstd;
                    let gv = g[base + si];
                    dgamma[ch] += gv * xhat;
                    dbeta[ch] += gv;
                    let dxhat = gv * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            for ci_local in 0..cg {
                let ch = gi * cg + ci_local;
                let base = (ni * c + ch) * s;
                for si in 0..s {
                    let xhat = (x[base + si] - mean) * rstd;
                    let dxhat = g[base + si] * gamma[ch];
                    dx[base + si] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Nearest-neighbour halving (keep even indices) along the middle axis of
/// an `[outer, extent, inner]` view.
pub fn downsample_nearest(x: &[f64], outer: usize, extent: usize, inner: usize) -> Vec<f64> {
    let half = extent / 2;
    let mut out = Vec::with_capacity(outer * half * inner);
    for o in 0..outer {
        for i in 0..half {
            let src = (o * extent + 2 * i) * inner;
            out.extend_from_slice(&x[src..src + inner]);
        }
    }
    out
}

/// Nearest-neighbour doubling (repeat each index twice).
pub fn upsample_nearest(x: &[f64], outer: usize, extent: usize, inner: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(outer * extent * 2 * inner);
    for o in 0..outer {
        for i in 0..extent {
            let src = (o * extent + i) * inner;
            out.extend_from_slice(&x[src..src + inner]);
            out.extend_from_slice(&x[src..src + inner]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_clips_padding() {
        // extent 4, pad 1, kernel 3 -> out extent 4
        assert_eq!(valid_range(0, 1, 4, 4), (1, 4));
        assert_eq!(valid_range(1, 1, 4, 4), (0, 4));
        assert_eq!(valid_range(2, 1, 4, 4), (0, 3));
    }

    #[test]
    fn nearest_resampling_definitions() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(downsample_nearest(&x, 1, 4, 1), vec![1.0, 3.0]);
        assert_eq!(upsample_nearest(&[1.0, 3.0], 1, 2, 1), vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(transpose(&a, 2, 2), vec![1.0, 3.0, 2.0, 4.0]);
    }
}

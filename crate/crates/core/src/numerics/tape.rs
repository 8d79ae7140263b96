//! Reverse-mode autodiff on a Wengert tape.
//!
//! Each operation appends a node holding its value and the handles of its
//! parents, so node order is already a topological order. `backward` walks
//! the tape once in reverse.

use super::kernels::{self, Conv1dDims, Conv2dDims, GroupNormStats};
use super::tensor::{split_at_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Down,
    Up,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    ChannelBias { x: Var, b: Var, per_sample: bool },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    Conv2d { x: Var, k: Var, dims: Conv2dDims },
    Conv1dTime { x: Var, k: Var, dims: Conv1dDims },
    ConvTransposeTime { x: Var, k: Var, t: usize, c: usize, s: usize, o: usize, kt: usize },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64>, l: usize, d: usize, s: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, stats: GroupNormStats, n: usize, c: usize, s: usize, groups: usize },
    Resize { x: Var, axis: usize, dir: Resample },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.derived(v, Op::Silu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.derived(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.derived(v, Op::Mean(a), &[a])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.derived(v, Op::Reshape(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?} (need [m,k] x [k,n])")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.derived(v, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// Adds `b` along axis 1 of `x: [N, C, ...]`; `b` is `[C]` (shared) or
    /// `[N, C]` (one row per sample).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 {
            return Err(Error::shape(format!("add_channel_bias: x rank {} < 2", sx.len())));
        }
        let (n, c) = (sx[0], sx[1]);
        let per_sample = match sb.as_slice() {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            _ => {
                return Err(Error::shape(format!(
                    "add_channel_bias: bias {sb:?} does not match channels of {sx:?}"
                )))
            }
        };
        let inner: usize = sx[2..].iter().product();
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let (ni, ci) = (i / c, i % c);
            let bv = if per_sample { bias[ni * c + ci] } else { bias[ci] };
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let v = Tensor::new(sx, data)?;
        Ok(self.derived(v, Op::ChannelBias { x, b, per_sample }, &[x, b]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        Ok(self.derived(v, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.derived(v, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Row lookup into `table: [K, D]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape(format!("gather_rows: table shape {st:?} is not [K, D]")));
        }
        let (k, d) = (st[0], st[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= k) {
            return Err(Error::invalid(format!("gather_rows: row {bad} out of range for {k} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let v = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.derived(v, Op::GatherRows { table, rows: rows.to_vec() }, &[table]))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `k: [O, C, kh, kw]` and
    /// zero padding `pad = (ph, pw)`.
    pub fn conv2d(&mut self, x: Var, k: Var, pad: (usize, usize)) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(format!("conv2d: x {sx:?} must be [N,C,H,W] and k {sk:?} [O,C,kh,kw]")));
        }
        if sx[1] != sk[1] {
            return Err(Error::shape(format!(
                "conv2d: input channel axis C={} of x {sx:?} != axis 1 of kernel {sk:?}",
                sx[1]
            )));
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::shape(format!("conv2d: kernel extents kh={} kw={} must be odd", sk[2], sk[3])));
        }
        let dims = Conv2dDims { n: sx[0], c: sx[1], h: sx[2], w: sx[3], o: sk[0], kh: sk[2], kw: sk[3], ph: pad.0, pw: pad.1 };
        if dims.h + 2 * dims.ph < dims.kh || dims.w + 2 * dims.pw < dims.kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {}x{} larger than padded input H={} W={}",
                dims.kh, dims.kw, dims.h, dims.w
            )));
        }
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), &dims);
        let v = Tensor::new(vec![dims.n, dims.o, dims.out_h(), dims.out_w()], data)?;
        Ok(self.derived(v, Op::Conv2d { x, k, dims }, &[x, k]))
    }

    /// Convolution along the leading (time) axis of `x: [T, C, ...]` with
    /// `k: [O, C, kt]`, independently at each spatial site.
    pub fn conv1d_time(&mut self, x: Var, k: Var, pad: usize, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k));
        if sx.len() < 2 || sk.len() != 3 {
            return Err(Error::shape(format!("conv1d_time: x {sx:?} must be [T,C,...] and k {sk:?} [O,C,kt]")));
        }
        if sx[1] != sk[1] {
            return Err(Error::shape(format!(
                "conv1d_time: channel axis C={} of x {sx:?} != axis 1 of kernel {sk:?}",
                sx[1]
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d_time: stride must be positive"));
        }
        let kt = sk[2];
        if kt % 2 == 0 {
            return Err(Error::shape(format!("conv1d_time: kernel length kt={kt} must be odd")));
        }
        if kt > sx[0] + 2 * pad {
            return Err(Error::shape(format!(
                "conv1d_time: kernel length kt={kt} exceeds T+2*pad={}",
                sx[0] + 2 * pad
            )));
        }
        let dims = Conv1dDims { t: sx[0], c: sx[1], s: sx[2..].iter().product(), o: sk[0], kt, pad, stride };
        let data = kernels::conv1d_time_forward(self.value(x).data(), self.value(k).data(), &dims);
        let mut shape = sx.clone();
        shape[0] = dims.out_t();
        shape[1] = dims.o;
        let v = Tensor::new(shape, data)?;
        Ok(self.derived(v, Op::Conv1dTime { x, k, dims }, &[x, k]))
    }

    /// Transposed temporal convolution whose stride equals the kernel length
    /// `kt` of `k: [O, C, kt]`; output has `kt * T` frames.
    pub fn conv_transpose_time(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k));
        if sx.len() < 2 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::shape(format!(
                "conv_transpose_time: x {sx:?} must be [T,C,...] and k {sk:?} [O,C,kt] with matching C"
            )));
        }
        let (t, c, s, o, kt) = (sx[0], sx[1], sx[2..].iter().product::<usize>(), sk[0], sk[2]);
        let data = kernels::conv_transpose_time_forward(self.value(x).data(), self.value(k).data(), t, c, s, o, kt);
        let mut shape = sx.clone();
        shape[0] = t * kt;
        shape[1] = o;
        let v = Tensor::new(shape, data)?;
        Ok(self.derived(v, Op::ConvTransposeTime { x, k, t, c, s, o, kt }, &[x, k]))
    }

    /// Softmax attention along axis 0 of `q, k, v: [L, D, ...]`, computed
    /// independently at every trailing site, scaled by `1/sqrt(D)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() < 2 {
            return Err(Error::shape(format!("attention: q {sq:?} must be [L, D, ...]")));
        }
        if self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::shape(format!(
                "attention: q {sq:?}, k {:?}, v {:?} must agree",
                self.shape(k),
                self.shape(v)
            )));
        }
        let (l, d, s) = (sq[0], sq[1], sq[2..].iter().product::<usize>());
        if l == 0 {
            return Err(Error::shape("attention: sequence length L is 0"));
        }
        let (out, probs) =
            kernels::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), l, d, s);
        let val = Tensor::new(sq, out)?;
        Ok(self.derived(val, Op::Attention { q, k, v, probs, l, d, s }, &[q, k, v]))
    }

    /// Group normalization over `x: [N, C, ...]` with affine `gamma, beta: [C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::shape(format!("group_norm: x {sx:?} must be [N, C, ...]")));
        }
        let (n, c, s) = (sx[0], sx[1], sx[2..].iter().product::<usize>());
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "group_norm: gamma {:?} / beta {:?} must be [{c}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (out, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            s,
            groups,
            eps,
        );
        let v = Tensor::new(sx, out)?;
        Ok(self.derived(v, Op::GroupNorm { x, gamma, beta, stats, n, c, s, groups }, &[x, gamma, beta]))
    }

    pub fn resize_nearest(&mut self, x: Var, axis: usize, dir: Resample) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::shape(format!("resize_nearest: axis {axis} on shape {sx:?}")));
        }
        let (outer, extent, inner) = split_at_axis(&sx, axis);
        let mut shape = sx.clone();
        let data = match dir {
            Resample::Down => {
                if extent % 2 != 0 {
                    return Err(Error::shape(format!(
                        "resize_nearest: cannot halve odd extent {extent} on axis {axis} of {sx:?}"
                    )));
                }
                shape[axis] = extent / 2;
                kernels::downsample_nearest(self.value(x).data(), outer, extent, inner)
            }
            Resample::Up => {
                shape[axis] = extent * 2;
                kernels::upsample_nearest(self.value(x).data(), outer, extent, inner)
            }
        };
        let v = Tensor::new(shape, data)?;
        Ok(self.derived(v, Op::Resize { x, axis, dir }, &[x]))
    }

    /// Gradients of the scalar `loss` w.r.t. every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (parent, contribution) in self.vjp(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                let Some(contribution) = contribution else { continue };
                accumulate(&mut grads[parent.0], contribution)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node for each parent.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Option<Tensor>)>> {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, Some(g.clone())), (*b, Some(g.clone()))],
            Op::Sub(a, b) => vec![(*a, Some(g.clone())), (*b, Some(g.scale(-1.0)))],
            Op::Mul(a, b) => vec![
                (*a, want(*a).then(|| g.mul(self.value(*b))).transpose()?),
                (*b, want(*b).then(|| g.mul(self.value(*a))).transpose()?),
            ],
            Op::Scale(a, s) => vec![(*a, Some(g.scale(*s)))],
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x.zip_map(g, |x, gv| {
                    let sig = 1.0 / (1.0 + (-x).exp());
                    gv * sig * (1.0 + x * (1.0 - sig))
                })?;
                vec![(*a, Some(d))]
            }
            Op::Sum(a) => vec![(*a, Some(Tensor::full(self.shape(*a), g.item()?)))],
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                vec![(*a, Some(Tensor::full(self.shape(*a), g.item()? / n)))]
            }
            Op::Reshape(a) => vec![(*a, Some(g.reshape(self.shape(*a))?))],
            Op::Matmul { a, b, m, k, n } => {
                let da = want(*a)
                    .then(|| {
                        let bt = kernels::transpose(self.value(*b).data(), *k, *n);
                        like(*a, kernels::matmul(g.data(), &bt, *m, *n, *k))
                    })
                    .transpose()?;
                let db = want(*b)
                    .then(|| {
                        let at = kernels::transpose(self.value(*a).data(), *m, *k);
                        like(*b, kernels::matmul(&at, g.data(), *k, *m, *n))
                    })
                    .transpose()?;
                vec![(*a, da), (*b, db)]
            }
            Op::ChannelBias { x, b, per_sample } => {
                let sx = self.shape(*x);
                let (n, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let db = want(*b)
                    .then(|| {
                        let mut db = vec![0.0; if *per_sample { n * c } else { c }];
                        for (i, chunk) in g.data().chunks(inner).enumerate() {
                            let slot = if *per_sample { i } else { i % c };
                            db[slot] += chunk.iter().sum::<f64>();
                        }
                        like(*b, db)
                    })
                    .transpose()?;
                vec![(*x, Some(g.clone())), (*b, db)]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    out.push((*p, want(*p).then(|| g.narrow(*axis, start, len)).transpose()?));
                    start += len;
                }
                out
            }
            Op::Narrow { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, extent, inner) = split_at_axis(sx, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, Some(like(*x, d)?))]
            }
            Op::GatherRows { table, rows } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dt[r * d + j] += g.data()[i * d + j];
                    }
                }
                vec![(*table, Some(like(*table, dt)?))]
            }
            Op::Conv2d { x, k, dims } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g.data(),
                    dims,
                    want(*x),
                    want(*k),
                );
                vec![(*x, dx.map(|d| like(*x, d)).transpose()?), (*k, dk.map(|d| like(*k, d)).transpose()?)]
            }
            Op::Conv1dTime { x, k, dims } => {
                let (dx, dk) = kernels::conv1d_time_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g.data(),
                    dims,
                    want(*x),
                    want(*k),
                );
                vec![(*x, dx.map(|d| like(*x, d)).transpose()?), (*k, dk.map(|d| like(*k, d)).transpose()?)]
            }
            Op::ConvTransposeTime { x, k, t, c, s, o, kt } => {
                let (dx, dk) = kernels::conv_transpose_time_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g.data(),
                    *t,
                    *c,
                    *s,
                    *o,
                    *kt,
                );
                vec![(*x, Some(like(*x, dx)?)), (*k, Some(like(*k, dk)?))]
            }
            Op::Attention { q, k, v, probs, l, d, s } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    *l,
                    *d,
                    *s,
                );
                vec![(*q, Some(like(*q, dq)?)), (*k, Some(like(*k, dk)?)), (*v, Some(like(*v, dv)?))]
            }
            Op::GroupNorm { x, gamma, beta, stats, n, c, s, groups } => {
                let (dx, dg, db) = kernels::group_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    g.data(),
                    stats,
                    *n,
                    *c,
                    *s,
                    *groups,
                );
                vec![(*x, Some(like(*x, dx)?)), (*gamma, Some(like(*gamma, dg)?)), (*beta, Some(like(*beta, db)?))]
            }
            Op::Resize { x, axis, dir } => {
                let (outer, extent, inner) = split_at_axis(self.shape(*x), *axis);
                let mut d = vec![0.0; self.value(*x).len()];
                match dir {
                    Resample::Down => {
                        for o in 0..outer {
                            for i in 0..extent / 2 {
                                let src = (o * (extent / 2) + i) * inner;
                                let dst = (o * extent + 2 * i) * inner;
                                d[dst..dst + inner].copy_from_slice(&g.data()[src..src + inner]);
                            }
                        }
                    }
                    Resample::Up => {
                        for o in 0..outer {
                            for i in 0..extent {
                                let a = (o * extent * 2 + 2 * i) * inner;
                                let dst = (o * extent + i) * inner;
                                for j in 0..inner {
                                    d[dst + j] = g.data()[a + j] + g.data()[a + inner + j];
                                }
                            }
                        }
                    }
                }
                vec![(*x, Some(like(*x, d)?))]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        None => contribution,
        Some(prev) => prev.add(&contribution)?,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_shared_use() {
        // f(x) = sum(x*x + x) -> grad 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 1.0));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2], 1.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn conv_errors_name_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, k, (1, 1)).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
        let k_even = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.conv2d(x, k_even, (0, 0)).is_err());
    }

    #[test]
    fn conv1d_time_rejects_long_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 1, 1]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 5]));
        assert!(tape.conv1d_time(x, k, 1, 1).is_err());
        assert!(tape.conv1d_time(x, k, 2, 1).is_ok());
    }

    #[test]
    fn attention_rejects_empty_sequence() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(tape.attention(q, q, q).is_err());
    }

    #[test]
    fn resize_down_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.resize_nearest(x, 0, Resample::Down).is_err());
        assert!(tape.resize_nearest(x, 1, Resample::Down).is_ok());
    }
}

//! U-Net graph construction shared by the image model and its inflated
//! space-time counterpart.
//!
//! The image path is `in_conv -> [ResBlock, spatial down]* -> mid ResBlock
//! -> [spatial up, concat skip, ResBlock]* -> norm/silu/conv`. Inflation
//! inserts, without touching any spatial tensor:
//!
//! * a temporal conv block after every non-coarsest ResBlock,
//! * stacked temporal attention after the coarsest (mid) ResBlock,
//! * a learnable temporal down/up sampler after each spatial resize on the
//!   configured level transitions.
//!
//! Every temporal block ends in a zero-initialised projection feeding a
//! residual add, and the samplers start as exact nearest-neighbour
//! resampling.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::config::{STUNetConfig, T2IConfig};
use crate::error::{Error, Result};
use crate::numerics::{Resample, Tape, Tensor, Var};
use crate::rng::Rng;

pub type NamedTensors = BTreeMap<String, Tensor>;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Named tensors placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Places every tensor of `maps` on the tape; names for which
    /// `trainable` returns true become gradient-receiving leaves.
    pub fn new(tape: &mut Tape, maps: &[&NamedTensors], trainable: impl Fn(&str) -> bool) -> Self {
        let mut vars = BTreeMap::new();
        for map in maps {
            for (name, t) in map.iter() {
                let v = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                vars.insert(name.clone(), v);
            }
        }
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("missing tensor '{name}'")))
    }

    /// Rebinds `name` to another tape variable.
    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Shape and summary statistics of one recorded activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

/// Records activations at named points of a forward pass: after every
/// encoder level, after the middle block and after every decoder level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub entries: Vec<ActivationRecord>,
}

impl ActivationTrace {
    pub fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.get(name).map(|r| r.shape.as_slice())
    }

    pub fn get(&self, name: &str) -> Option<&ActivationRecord> {
        self.entries.iter().find(|r| r.name == name)
    }

    fn push(&mut self, name: &str, value: &Tensor) {
        let mean = value.mean();
        let var = value.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / value.len() as f64;
        self.entries.push(ActivationRecord { name: name.to_string(), shape: value.shape().to_vec(), mean, std: var.sqrt() });
    }
}

/// Sinusoidal timestep features, one row per timestep.
pub fn timestep_features(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
    }
    Tensor::new(vec![timesteps.len(), dim], data).expect("feature shape")
}

// ---------------------------------------------------------------------------
// initialisation

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn put_conv(map: &mut NamedTensors, prefix: &str, o: usize, c: usize, k: usize, rng: &mut Rng) {
    let fan_in = (c * k * k) as f64;
    map.insert(format!("{prefix}.weight"), normal(&[o, c, k, k], 1.0 / fan_in.sqrt(), rng));
    map.insert(format!("{prefix}.bias"), Tensor::zeros(&[o]));
}

fn put_norm(map: &mut NamedTensors, prefix: &str, c: usize) {
    map.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
    map.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
}

fn put_linear(map: &mut NamedTensors, prefix: &str, i: usize, o: usize, rng: &mut Rng) {
    map.insert(format!("{prefix}.weight"), normal(&[i, o], 1.0 / (i as f64).sqrt(), rng));
    map.insert(format!("{prefix}.bias"), Tensor::zeros(&[o]));
}

fn put_resblock(map: &mut NamedTensors, prefix: &str, cin: usize, cout: usize, emb: usize, rng: &mut Rng) {
    put_conv(map, &format!("{prefix}.conv1"), cout, cin, 3, rng);
    put_norm(map, &format!("{prefix}.norm1"), cout);
    put_linear(map, &format!("{prefix}.emb"), emb, cout, rng);
    put_conv(map, &format!("{prefix}.conv2"), cout, cout, 3, rng);
    put_norm(map, &format!("{prefix}.norm2"), cout);
    if cin != cout {
        put_conv(map, &format!("{prefix}.skip"), cout, cin, 1, rng);
    }
}

/// Spatial (image-model) tensors in a fixed creation order.
pub(crate) fn init_spatial(cfg: &T2IConfig, rng: &mut Rng) -> NamedTensors {
    let e = cfg.cond_dim;
    let l = cfg.levels;
    let mut map = NamedTensors::new();
    put_linear(&mut map, "emb.time1", e, e, rng);
    put_linear(&mut map, "emb.time2", e, e, rng);
    map.insert("emb.class.weight".into(), normal(&[cfg.num_classes, e], 1.0, rng));
    put_conv(&mut map, "in_conv", cfg.channels(0), cfg.in_channels, 3, rng);
    for i in 0..l {
        let cin = if i == 0 { cfg.channels(0) } else { cfg.channels(i - 1) };
        put_resblock(&mut map, &format!("enc.{i}.res"), cin, cfg.channels(i), e, rng);
        if i + 1 < l {
            put_conv(&mut map, &format!("enc.{i}.down"), cfg.channels(i), cfg.channels(i), 3, rng);
        }
    }
    put_resblock(&mut map, "mid.res", cfg.channels(l - 1), cfg.channels(l - 1), e, rng);
    for i in (0..l - 1).rev() {
        put_conv(&mut map, &format!("dec.{i}.up"), cfg.channels(i + 1), cfg.channels(i + 1), 3, rng);
        put_resblock(&mut map, &format!("dec.{i}.res"), cfg.channels(i + 1) + cfg.channels(i), cfg.channels(i), e, rng);
    }
    put_norm(&mut map, "out.norm", cfg.channels(0));
    put_conv(&mut map, "out.conv", cfg.out_channels, cfg.channels(0), 3, rng);
    map
}

fn put_temporal_conv_block(map: &mut NamedTensors, prefix: &str, c: usize, kt: usize, rng: &mut Rng) {
    let fan_in = (c * kt) as f64;
    map.insert(format!("{prefix}.conv.weight"), normal(&[c, c, kt], 1.0 / fan_in.sqrt(), rng));
    map.insert(format!("{prefix}.conv.bias"), Tensor::zeros(&[c]));
    put_norm(map, &format!("{prefix}.norm"), c);
    map.insert(format!("{prefix}.proj.weight"), Tensor::zeros(&[c, c, 1, 1]));
    map.insert(format!("{prefix}.proj.bias"), Tensor::zeros(&[c]));
}

fn put_attention_block(map: &mut NamedTensors, prefix: &str, c: usize, rng: &mut Rng) {
    put_norm(map, &format!("{prefix}.norm"), c);
    for part in ["q", "k", "v"] {
        put_conv(map, &format!("{prefix}.{part}"), c, c, 1, rng);
    }
    map.insert(format!("{prefix}.proj.weight"), Tensor::zeros(&[c, c, 1, 1]));
    map.insert(format!("{prefix}.proj.bias"), Tensor::zeros(&[c]));
}

/// Identity channel mixing at the listed taps of a `[c, c, kt]` kernel.
fn identity_taps(c: usize, kt: usize, taps: &[usize]) -> Tensor {
    let mut data = vec![0.0; c * c * kt];
    for ch in 0..c {
        for &j in taps {
            data[(ch * c + ch) * kt + j] = 1.0;
        }
    }
    Tensor::new(vec![c, c, kt], data).expect("kernel shape")
}

/// Length of the learnable temporal down-sampling kernel (stride 2, pad 1).
pub const TEMPORAL_DOWN_KERNEL: usize = 3;

/// Temporal tensors inserted by inflation.
pub(crate) fn init_temporal(cfg: &STUNetConfig, rng: &mut Rng) -> NamedTensors {
    let t2i = &cfg.t2i;
    let l = t2i.levels;
    let kt = cfg.temporal_kernel;
    let mut map = NamedTensors::new();
    for i in 0..l - 1 {
        put_temporal_conv_block(&mut map, &format!("enc.{i}.tconv"), t2i.channels(i), kt, rng);
        if cfg.resamples_time(i) {
            let c = t2i.channels(i);
            // stride-2 conv whose centre tap copies frame 2i: nearest-neighbour down
            map.insert(format!("enc.{i}.tdown.weight"), identity_taps(c, TEMPORAL_DOWN_KERNEL, &[1]));
            map.insert(format!("enc.{i}.tdown.bias"), Tensor::zeros(&[c]));
            let cu = t2i.channels(i + 1);
            // transposed stride-2 conv writing each frame to both taps: nearest-neighbour up
            map.insert(format!("dec.{i}.tup.weight"), identity_taps(cu, 2, &[0, 1]));
            map.insert(format!("dec.{i}.tup.bias"), Tensor::zeros(&[cu]));
        }
    }
    for j in 0..cfg.attn_blocks_coarsest {
        put_attention_block(&mut map, &format!("mid.attn.{j}"), t2i.channels(l - 1), rng);
    }
    for i in (0..l - 1).rev() {
        put_temporal_conv_block(&mut map, &format!("dec.{i}.tconv"), t2i.channels(i), kt, rng);
    }
    map
}

/// Closed-form parameter count of the image U-Net.
///
/// With `E = cond_dim`, `K = num_classes` and `c_i` the channels of level `i`:
/// embedding `2(E^2+E) + K E`; input conv `9 c_0 C_in + c_0`; a ResBlock
/// `cin -> cout` holds `9 cin cout + 9 cout^2 + E cout + 7 cout`, plus
/// `cin cout + cout` for its 1x1 skip when `cin != cout`; each down/up
/// resize conv `9 c^2 + c`; output head `2 c_0 + 9 C_out c_0 + C_out`.
pub fn t2i_param_count(cfg: &T2IConfig) -> usize {
    let e = cfg.cond_dim;
    let c = |i: usize| cfg.channels(i);
    let res = |cin: usize, cout: usize| {
        9 * cin * cout + 9 * cout * cout + e * cout + 7 * cout + if cin != cout { cin * cout + cout } else { 0 }
    };
    let l = cfg.levels;
    let mut n = 2 * (e * e + e) + cfg.num_classes * e;
    n += 9 * c(0) * cfg.in_channels + c(0);
    for i in 0..l {
        n += res(if i == 0 { c(0) } else { c(i - 1) }, c(i));
        if i + 1 < l {
            n += 9 * c(i) * c(i) + c(i);
        }
    }
    n += res(c(l - 1), c(l - 1));
    for i in 0..l - 1 {
        n += 9 * c(i + 1) * c(i + 1) + c(i + 1);
        n += res(c(i + 1) + c(i), c(i));
    }
    n + 2 * c(0) + 9 * cfg.out_channels * c(0) + cfg.out_channels
}

// ---------------------------------------------------------------------------
// forward graph

/// Timestep + class embedding, `[B, E]` with one row per timestep/class pair.
pub(crate) fn embedding(
    tape: &mut Tape,
    p: &Bound,
    cfg: &T2IConfig,
    timesteps: &[usize],
    classes: &[usize],
) -> Result<Var> {
    if timesteps.len() != classes.len() || timesteps.is_empty() {
        return Err(Error::invalid(format!(
            "embedding: {} timesteps for {} classes",
            timesteps.len(),
            classes.len()
        )));
    }
    let feats = tape.constant(timestep_features(timesteps, cfg.cond_dim));
    let h = linear(tape, p, "emb.time1", feats)?;
    let h = tape.silu(h);
    let h = linear(tape, p, "emb.time2", h)?;
    let c = tape.gather_rows(p.get("emb.class.weight")?, classes)?;
    tape.add(h, c)
}

fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{prefix}.weight"))?)?;
    tape.add_channel_bias(y, p.get(&format!("{prefix}.bias"))?)
}

fn conv(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let k = p.get(&format!("{prefix}.weight"))?;
    let pad = tape.shape(k)[2] / 2;
    let y = tape.conv2d(x, k, (pad, pad))?;
    tape.add_channel_bias(y, p.get(&format!("{prefix}.bias"))?)
}

fn norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, groups: usize) -> Result<Var> {
    tape.group_norm(x, p.get(&format!("{prefix}.gamma"))?, p.get(&format!("{prefix}.beta"))?, groups, NORM_EPS)
}

fn resblock(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, emb_act: Var, groups: usize) -> Result<Var> {
    let h = conv(tape, p, &format!("{prefix}.conv1"), x)?;
    let h = norm(tape, p, &format!("{prefix}.norm1"), h, groups)?;
    let h = tape.silu(h);
    let e = linear(tape, p, &format!("{prefix}.emb"), emb_act)?;
    let e = if tape.shape(e)[0] == 1 {
        let c = tape.shape(e)[1];
        tape.reshape(e, &[c])?
    } else {
        e
    };
    let h = tape.add_channel_bias(h, e)?;
    let h = conv(tape, p, &format!("{prefix}.conv2"), h)?;
    let h = norm(tape, p, &format!("{prefix}.norm2"), h, groups)?;
    let h = tape.silu(h);
    let skip = if p.get(&format!("{prefix}.skip.weight")).is_ok() { conv(tape, p, &format!("{prefix}.skip"), x)? } else { x };
    tape.add(h, skip)
}

fn temporal_conv_block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, groups: usize) -> Result<Var> {
    let k = p.get(&format!("{prefix}.conv.weight"))?;
    let pad = tape.shape(k)[2] / 2;
    let h = tape.conv1d_time(x, k, pad, 1)?;
    let h = tape.add_channel_bias(h, p.get(&format!("{prefix}.conv.bias"))?)?;
    let h = norm(tape, p, &format!("{prefix}.norm"), h, groups)?;
    let h = tape.silu(h);
    let h = conv(tape, p, &format!("{prefix}.proj"), h)?;
    tape.add(x, h)
}

fn attention_block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, groups: usize) -> Result<Var> {
    let h = norm(tape, p, &format!("{prefix}.norm"), x, groups)?;
    let q = conv(tape, p, &format!("{prefix}.q"), h)?;
    let k = conv(tape, p, &format!("{prefix}.k"), h)?;
    let v = conv(tape, p, &format!("{prefix}.v"), h)?;
    // [T, C, h, w] is read as [L, D, sites]: attention runs over time only
    let a = tape.attention(q, k, v)?;
    let out = conv(tape, p, &format!("{prefix}.proj"), a)?;
    tape.add(x, out)
}

fn temporal_down(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let t = tape.shape(x)[0];
    if t % 2 != 0 {
        return Err(Error::shape(format!("temporal downsample at {prefix}: odd frame count T={t}")));
    }
    let h = tape.conv1d_time(x, p.get(&format!("{prefix}.weight"))?, TEMPORAL_DOWN_KERNEL / 2, 2)?;
    tape.add_channel_bias(h, p.get(&format!("{prefix}.bias"))?)
}

fn temporal_up(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.conv_transpose_time(x, p.get(&format!("{prefix}.weight"))?)?;
    tape.add_channel_bias(h, p.get(&format!("{prefix}.bias"))?)
}

fn spatial_halve(tape: &mut Tape, x: Var) -> Result<Var> {
    let h = tape.resize_nearest(x, 2, Resample::Down)?;
    tape.resize_nearest(h, 3, Resample::Down)
}

fn spatial_double(tape: &mut Tape, x: Var) -> Result<Var> {
    let h = tape.resize_nearest(x, 2, Resample::Up)?;
    tape.resize_nearest(h, 3, Resample::Up)
}

/// U-Net body over `x: [N, C_in, H, W]` given embedding `emb: [B, E]`
/// (`B == 1` shares one embedding across all `N` frames). With `temporal`
/// set, `N` is the time axis and the inflated blocks are applied.
pub(crate) fn forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &T2IConfig,
    temporal: Option<&STUNetConfig>,
    x: Var,
    emb: Var,
    mut trace: Option<&mut ActivationTrace>,
) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 4 || sx[1] != cfg.in_channels {
        return Err(Error::shape(format!(
            "model input {sx:?} must be [N, {}, H, W] (channel axis 1)",
            cfg.in_channels
        )));
    }
    cfg.check_spatial(sx[2], sx[3])?;
    if let Some(st) = temporal {
        st.check_frames(sx[0])?;
    }
    let g = cfg.norm_groups;
    let l = cfg.levels;
    let mut record = |name: &str, value: &Tensor| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(name, value);
        }
    };
    let e = tape.silu(emb);
    let mut h = conv(tape, p, "in_conv", x)?;
    let mut skips = Vec::with_capacity(l - 1);
    for i in 0..l {
        h = resblock(tape, p, &format!("enc.{i}.res"), h, e, g)?;
        if i + 1 < l {
            if temporal.is_some() {
                h = temporal_conv_block(tape, p, &format!("enc.{i}.tconv"), h, g)?;
            }
            skips.push(h);
            h = conv(tape, p, &format!("enc.{i}.down"), h)?;
            h = spatial_halve(tape, h)?;
            if temporal.is_some_and(|st| st.resamples_time(i)) {
                h = temporal_down(tape, p, &format!("enc.{i}.tdown"), h)?;
            }
        }
        record(&format!("enc.{i}"), tape.value(h));
    }
    h = resblock(tape, p, "mid.res", h, e, g)?;
    if let Some(st) = temporal {
        for j in 0..st.attn_blocks_coarsest {
            h = attention_block(tape, p, &format!("mid.attn.{j}"), h, g)?;
        }
    }
    record("mid", tape.value(h));
    for i in (0..l - 1).rev() {
        h = conv(tape, p, &format!("dec.{i}.up"), h)?;
        h = spatial_double(tape, h)?;
        if temporal.is_some_and(|st| st.resamples_time(i)) {
            h = temporal_up(tape, p, &format!("dec.{i}.tup"), h)?;
        }
        h = tape.concat(&[h, skips[i]], 1)?;
        h = resblock(tape, p, &format!("dec.{i}.res"), h, e, g)?;
        if temporal.is_some() {
            h = temporal_conv_block(tape, p, &format!("dec.{i}.tconv"), h, g)?;
        }
        record(&format!("dec.{i}"), tape.value(h));
    }
    h = norm(tape, p, "out.norm", h, g)?;
    h = tape.silu(h);
    conv(tape, p, "out.conv", h)
}

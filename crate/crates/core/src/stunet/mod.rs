//! Toy image U-Net and its inflation into a space-time U-Net.

mod config;
mod unet;

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

pub use config::{STUNetConfig, T2IConfig};
pub use unet::{t2i_param_count, timestep_features, ActivationRecord, ActivationTrace, Bound, NamedTensors, TEMPORAL_DOWN_KERNEL};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

/// Channel count of the conditional model input `<J, C, M>`.
pub const CONDITIONAL_IN_CHANNELS: usize = 7;
/// Name of the first convolution kernel, the one grown by conditioning.
pub const INPUT_CONV: &str = "in_conv.weight";

/// SHA-256 over names, shapes and value bits of a tensor map.
pub fn hash_tensors<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Checks that `tensors` has exactly the names and shapes of `reference`.
pub fn check_same_layout(reference: &NamedTensors, tensors: &NamedTensors, what: &str) -> Result<()> {
    for (name, t) in reference {
        match tensors.get(name) {
            None => return Err(Error::invalid(format!("{what}: missing tensor '{name}'"))),
            Some(v) if v.shape() != t.shape() => {
                return Err(Error::shape(format!(
                    "{what}: tensor '{name}' has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = tensors.keys().find(|k| !reference.contains_key(*k)) {
        return Err(Error::invalid(format!("{what}: unexpected tensor '{extra}'")));
    }
    Ok(())
}

/// Weights of the image U-Net.
#[derive(Clone, Debug, PartialEq)]
pub struct T2IWeights {
    pub config: T2IConfig,
    pub tensors: NamedTensors,
}

impl T2IWeights {
    /// Deterministic initialisation from `seed`.
    pub fn build(config: T2IConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0x7432_6900]);
        let tensors = unet::init_spatial(&config, &mut r);
        Ok(T2IWeights { config, tensors })
    }

    pub fn from_parts(config: T2IConfig, tensors: NamedTensors) -> Result<Self> {
        config.validate()?;
        let reference = unet::init_spatial(&config, &mut rng::stream(0, &[]));
        check_same_layout(&reference, &tensors, "image model")?;
        Ok(T2IWeights { config, tensors })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Predicts noise for `x: [N, C_in, H, W]`; `timesteps`/`classes` hold
    /// one entry (shared) or one per image.
    pub fn forward(&self, x: &Tensor, timesteps: &[usize], classes: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &[&self.tensors], |_| false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &bound, xv, timesteps, classes)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        timesteps: &[usize],
        classes: &[usize],
    ) -> Result<Var> {
        let n = tape.shape(x).first().copied().unwrap_or(0);
        if timesteps.len() != 1 && timesteps.len() != n {
            return Err(Error::invalid(format!("{} timesteps for a batch of {n}", timesteps.len())));
        }
        let emb = unet::embedding(tape, bound, &self.config, timesteps, classes)?;
        unet::forward(tape, bound, &self.config, None, x, emb, None)
    }

    pub fn hash(&self) -> [u8; 32] {
        hash_tensors(&self.tensors)
    }
}

/// Inflated space-time U-Net weights: frozen spatial tensors copied from the
/// image model plus trainable temporal tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct STUNetWeights {
    pub config: STUNetConfig,
    pub spatial: NamedTensors,
    pub temporal: NamedTensors,
    /// Spatial tensors released for training (the grown input conv of a
    /// conditional model). All other spatial tensors are frozen.
    pub unfrozen_spatial: BTreeSet<String>,
}

impl STUNetWeights {
    /// Inserts temporal blocks around a copy of `t2i`; temporal tensors are
    /// drawn from `seed`.
    pub fn inflate(t2i: &T2IWeights, config: STUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.t2i != t2i.config {
            return Err(Error::invalid("inflate: image-model config differs from the space-time config"));
        }
        let mut r = rng::stream(seed, &[0x7465_6d70]);
        let temporal = unet::init_temporal(&config, &mut r);
        Ok(STUNetWeights { config, spatial: t2i.tensors.clone(), temporal, unfrozen_spatial: BTreeSet::new() })
    }

    pub fn from_parts(
        config: STUNetConfig,
        spatial: NamedTensors,
        temporal: NamedTensors,
        unfrozen_spatial: BTreeSet<String>,
    ) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(0, &[]);
        check_same_layout(&unet::init_spatial(&config.t2i, &mut r), &spatial, "spatial weights")?;
        check_same_layout(&unet::init_temporal(&config, &mut r), &temporal, "temporal weights")?;
        if let Some(bad) = unfrozen_spatial.iter().find(|n| !spatial.contains_key(*n)) {
            return Err(Error::invalid(format!("unfrozen tensor '{bad}' is not a spatial tensor")));
        }
        Ok(STUNetWeights { config, spatial, temporal, unfrozen_spatial })
    }

    /// The image model the spatial tensors belong to.
    pub fn t2i(&self) -> T2IWeights {
        T2IWeights { config: self.config.t2i.clone(), tensors: self.spatial.clone() }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.temporal.contains_key(name) || self.unfrozen_spatial.contains(name)
    }

    /// Places all tensors on `tape`; trainable ones receive gradients.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> Bound {
        Bound::new(tape, &[&self.spatial, &self.temporal], |n| with_grad && self.is_trainable(n))
    }

    /// Predicts noise for a whole clip `x: [T, C_in, H, W]` in one pass.
    pub fn forward(&self, x: &Tensor, t: usize, class: usize) -> Result<Tensor> {
        self.forward_traced(x, t, class, None)
    }

    pub fn forward_traced(&self, x: &Tensor, t: usize, class: usize, trace: Option<&mut ActivationTrace>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape_traced(&mut tape, &bound, xv, t, class, trace)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &Bound, x: Var, t: usize, class: usize) -> Result<Var> {
        self.forward_on_tape_traced(tape, bound, x, t, class, None)
    }

    fn forward_on_tape_traced(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        t: usize,
        class: usize,
        trace: Option<&mut ActivationTrace>,
    ) -> Result<Var> {
        let emb = unet::embedding(tape, bound, &self.config.t2i, &[t], &[class])?;
        unet::forward(tape, bound, &self.config.t2i, Some(&self.config), x, emb, trace)
    }

    /// Hash of every spatial tensor.
    pub fn spatial_hash(&self) -> [u8; 32] {
        hash_tensors(&self.spatial)
    }

    /// Hash of the spatial tensors that must never change during training.
    pub fn frozen_hash(&self) -> [u8; 32] {
        hash_tensors(self.spatial.iter().filter(|(n, _)| !self.unfrozen_spatial.contains(*n)))
    }

    pub fn temporal_hash(&self) -> [u8; 32] {
        hash_tensors(&self.temporal)
    }

    /// Grows the first convolution from 3 to 7 input channels for `<J, C, M>`
    /// inputs. Existing kernel slices are copied, the four new ones are zero,
    /// and the grown kernel becomes trainable.
    pub fn expand_input_conv(&self) -> Result<Self> {
        let cin = self.config.t2i.in_channels;
        if cin != 3 {
            return Err(Error::invalid(format!(
                "expand_input_conv: model already takes {cin} input channels (expected an unconditional 3-channel model)"
            )));
        }
        let old = self.spatial.get(INPUT_CONV).ok_or_else(|| Error::invalid("missing input conv"))?;
        let zeros = Tensor::zeros(&[old.dim(0), CONDITIONAL_IN_CHANNELS - cin, old.dim(2), old.dim(3)]);
        let grown = Tensor::concat(&[old, &zeros], 1)?;
        let mut out = self.clone();
        out.config.t2i.in_channels = CONDITIONAL_IN_CHANNELS;
        out.spatial.insert(INPUT_CONV.to_string(), grown);
        out.unfrozen_spatial.insert(INPUT_CONV.to_string());
        Ok(out)
    }

    /// Replaces the spatial tensors (same names and shapes), leaving every
    /// temporal tensor untouched.
    pub fn with_spatial(&self, spatial: NamedTensors) -> Result<Self> {
        check_same_layout(&self.spatial, &spatial, "install spatial weights")?;
        let mut out = self.clone();
        out.spatial = spatial;
        Ok(out)
    }

    /// Activation elements at the coarsest level (after temporal attention)
    /// for an input of `t x c x h x w`.
    pub fn coarsest_elements(&self, t: usize, h: usize, w: usize) -> Result<usize> {
        let x = Tensor::zeros(&[t, self.config.t2i.in_channels, h, w]);
        let mut trace = ActivationTrace::default();
        self.forward_traced(&x, 0, 0, Some(&mut trace))?;
        let s = trace.shape_of("mid").ok_or_else(|| Error::invalid("no coarsest activation recorded"))?;
        Ok(s.iter().product())
    }
}

/// Spatial super-resolution model: an image SSR U-Net taking
/// `concat(noisy high-res, nearest-upsampled low-res)` (6 channels),
/// inflated like the base model. Returns the image model and its inflation.
pub fn build_ssr(config: &STUNetConfig, seed: u64) -> Result<(T2IWeights, STUNetWeights)> {
    let mut cfg = config.clone();
    cfg.t2i.in_channels = 6;
    cfg.t2i.out_channels = 3;
    let image = T2IWeights::build(cfg.t2i.clone(), seed)?;
    let video = STUNetWeights::inflate(&image, cfg, seed)?;
    Ok((image, video))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> STUNetConfig {
        STUNetConfig {
            t2i: T2IConfig { levels: 2, base_channels: 4, channel_mult: vec![1, 2], cond_dim: 8, num_classes: 3, ..Default::default() },
            temporal_kernel: 3,
            temporal_levels: vec![0],
            attn_blocks_coarsest: 1,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = T2IWeights::build(T2IConfig::default(), 3).unwrap();
        let b = T2IWeights::build(T2IConfig::default(), 3).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = T2IWeights::build(T2IConfig::default(), 4).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn param_count_matches_hand_count() {
        // levels=2, base=8, mult=[1,2], E=16, K=5, 3 -> 3 channels, counted by hand:
        // emb 624, in_conv 224, enc0 res 1336 + down 584, enc1 res 3968,
        // mid 4976, dec0 up 2320 + res 2688, head 235
        let cfg = T2IConfig::default();
        let w = T2IWeights::build(cfg.clone(), 0).unwrap();
        assert_eq!(t2i_param_count(&cfg), 16955);
        assert_eq!(w.param_count(), 16955);
    }

    #[test]
    fn image_forward_shape() {
        let w = T2IWeights::build(T2IConfig::default(), 1).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let y = w.forward(&x, &[10], &[0]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn indivisible_spatial_extent_is_an_error() {
        let w = T2IWeights::build(T2IConfig::default(), 1).unwrap();
        assert!(w.forward(&Tensor::zeros(&[1, 3, 15, 16]), &[0], &[0]).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = T2IConfig { levels: 1, channel_mult: vec![1], ..Default::default() };
        assert!(c.validate().is_err());
        c = T2IConfig { base_channels: 3, ..Default::default() };
        assert!(c.validate().is_err());
        let mut s = tiny();
        s.temporal_kernel = 2;
        assert!(s.validate().is_err());
        s = tiny();
        s.temporal_levels = vec![1];
        assert!(s.validate().is_err());
    }

    #[test]
    fn inflation_init_rules() {
        let cfg = tiny();
        let t2i = T2IWeights::build(cfg.t2i.clone(), 5).unwrap();
        let st = STUNetWeights::inflate(&t2i, cfg, 6).unwrap();
        assert_eq!(st.spatial, t2i.tensors);
        for (name, t) in &st.temporal {
            if name.ends_with("proj.weight") || name.ends_with("proj.bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
        assert!(st.temporal.keys().any(|n| n.starts_with("mid.attn.0.")));
        assert!(st.temporal.contains_key("enc.0.tdown.weight"));
        assert!(st.temporal.contains_key("dec.0.tup.weight"));
    }

    #[test]
    fn temporal_resamplers_start_as_nearest_neighbour() {
        let c = 2;
        let mut tape = Tape::new();
        let mut temporal = NamedTensors::new();
        temporal.insert("d.weight".into(), unet_identity(c, TEMPORAL_DOWN_KERNEL, &[1]));
        temporal.insert("u.weight".into(), unet_identity(c, 2, &[0, 1]));
        let bound = Bound::new(&mut tape, &[&temporal], |_| false);
        // frames a,b,c,d with two channels and one site
        let x = Tensor::new(vec![4, c, 1, 1], vec![1., 10., 2., 20., 3., 30., 4., 40.]).unwrap();
        let xv = tape.constant(x);
        let down = tape.conv1d_time(xv, bound.get("d.weight").unwrap(), 1, 2).unwrap();
        assert_eq!(tape.value(down).data(), &[1., 10., 3., 30.]);
        let up = tape.conv_transpose_time(down, bound.get("u.weight").unwrap()).unwrap();
        assert_eq!(tape.value(up).data(), &[1., 10., 1., 10., 3., 30., 3., 30.]);
    }

    fn unet_identity(c: usize, kt: usize, taps: &[usize]) -> Tensor {
        let mut data = vec![0.0; c * c * kt];
        for ch in 0..c {
            for &j in taps {
                data[(ch * c + ch) * kt + j] = 1.0;
            }
        }
        Tensor::new(vec![c, c, kt], data).unwrap()
    }

    #[test]
    fn stunet_forward_preserves_shape_and_checks_frames() {
        let cfg = tiny();
        let t2i = T2IWeights::build(cfg.t2i.clone(), 1).unwrap();
        let st = STUNetWeights::inflate(&t2i, cfg, 2).unwrap();
        let x = Tensor::zeros(&[8, 3, 16, 16]);
        assert_eq!(st.forward(&x, 3, 1).unwrap().shape(), &[8, 3, 16, 16]);
        assert!(st.forward(&Tensor::zeros(&[3, 3, 16, 16]), 3, 1).is_err());
    }

    #[test]
    fn expand_twice_is_an_error() {
        let cfg = tiny();
        let t2i = T2IWeights::build(cfg.t2i.clone(), 1).unwrap();
        let st = STUNetWeights::inflate(&t2i, cfg, 2).unwrap();
        let ex = st.expand_input_conv().unwrap();
        assert_eq!(ex.spatial[INPUT_CONV].shape()[1], 7);
        assert!(ex.expand_input_conv().is_err());
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let cfg = tiny();
        let t2i = T2IWeights::build(cfg.t2i.clone(), 1).unwrap();
        let mut tensors = t2i.tensors.clone();
        tensors.insert("in_conv.bias".into(), Tensor::zeros(&[3]));
        let err = T2IWeights::from_parts(cfg.t2i.clone(), tensors).unwrap_err();
        assert!(err.to_string().contains("in_conv.bias"));
    }
}

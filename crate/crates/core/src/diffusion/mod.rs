//! Forward noising, the noise-prediction objective, reverse samplers and
//! conditional input assembly.
//!
//! Videos are `[T, C, H, W]` tensors normalised to `[-1, 1]`; masks stay in
//! `{0, 1}`.

mod sampler;
mod schedule;

use rand::Rng as _;

pub use sampler::{reverse_process, reverse_step, sample, timestep_sequence, SamplerConfig, SamplerMode};
pub use sampler::SAMPLE_STREAM;
pub use schedule::{make_schedule, q_sample, q_sample_with_alpha_bar, NoiseSchedule, ScheduleKind};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::stunet::{STUNetWeights, T2IWeights};

/// Anything that predicts the injected noise of a noisy video.
pub trait Denoiser: Sync {
    /// `x_t: [T, 3, H, W]`; `extra` carries conditioning channels that are
    /// concatenated after `x_t` along the channel axis.
    fn predict_eps(&self, x_t: &Tensor, t: usize, extra: Option<&Tensor>) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, usize, Option<&Tensor>) -> Result<Tensor> + Sync,
{
    fn predict_eps(&self, x_t: &Tensor, t: usize, extra: Option<&Tensor>) -> Result<Tensor> {
        self(x_t, t, extra)
    }
}

/// Concatenates `x` with optional extra channels along axis 1.
pub fn model_input(x: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
    match extra {
        None => Ok(x.clone()),
        Some(e) => Tensor::concat(&[x, e], 1),
    }
}

/// Space-time U-Net as a whole-clip denoiser for one class.
pub struct VideoDenoiser<'a> {
    pub weights: &'a STUNetWeights,
    pub class: usize,
}

impl Denoiser for VideoDenoiser<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize, extra: Option<&Tensor>) -> Result<Tensor> {
        self.weights.forward(&model_input(x_t, extra)?, t, self.class)
    }
}

/// Image U-Net applied to each frame independently.
pub struct FrameDenoiser<'a> {
    pub weights: &'a T2IWeights,
    pub class: usize,
}

impl Denoiser for FrameDenoiser<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize, extra: Option<&Tensor>) -> Result<Tensor> {
        self.weights.forward(&model_input(x_t, extra)?, &[t], &[self.class])
    }
}

/// Masked conditioning video `C: [T, 3, H, W]` and binary mask
/// `M: [T, 1, H, W]` (1 = known content).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningPair {
    c: Tensor,
    m: Tensor,
}

impl ConditioningPair {
    /// Validates `M` binary and `C == C * M`.
    pub fn new(c: Tensor, m: Tensor) -> Result<Self> {
        let (sc, sm) = (c.shape(), m.shape());
        if sc.len() != 4 || sm.len() != 4 || sm[1] != 1 || sc[0] != sm[0] || sc[2..] != sm[2..] {
            return Err(Error::shape(format!("conditioning video {sc:?} and mask {sm:?} must be [T,C,H,W] and [T,1,H,W]")));
        }
        if let Some(v) = m.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        let pair = ConditioningPair { c, m };
        if !pair.apply_mask(&pair.c)?.bit_eq(&pair.c) {
            return Err(Error::invalid("conditioning video is non-zero where the mask is 0"));
        }
        Ok(pair)
    }

    pub fn video(&self) -> &Tensor {
        &self.c
    }

    pub fn mask(&self) -> &Tensor {
        &self.m
    }

    /// `v * M`, broadcasting the single mask channel over `v`'s channels.
    pub fn apply_mask(&self, v: &Tensor) -> Result<Tensor> {
        mask_channels(v, &self.m)
    }

    /// `concat(C, M)`: the four channels appended to the noisy video.
    pub fn extra_channels(&self) -> Result<Tensor> {
        Tensor::concat(&[&self.c, &self.m], 1)
    }
}

/// Multiplies every channel of `v: [T, C, H, W]` by `mask: [T, 1, H, W]`.
pub fn mask_channels(v: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (sv, sm) = (v.shape(), mask.shape());
    if sv.len() != 4 || sm.len() != 4 || sm[1] != 1 || sv[0] != sm[0] || sv[2..] != sm[2..] {
        return Err(Error::shape(format!("cannot mask {sv:?} with {sm:?}")));
    }
    let (c, plane) = (sv[1], sv[2] * sv[3]);
    let m = mask.data();
    let data = v
        .data()
        .chunks(plane)
        .enumerate()
        .flat_map(|(i, chunk)| {
            let mp = &m[(i / c) * plane..(i / c + 1) * plane];
            chunk.iter().zip(mp).map(|(a, b)| a * b)
        })
        .collect();
    Tensor::new(sv.to_vec(), data)
}

/// `<J, C, M>`: channels 0..3 noisy video, 3..6 conditioning video, 6 mask.
pub fn assemble_conditional_input(j: &Tensor, pair: &ConditioningPair) -> Result<Tensor> {
    let (sj, sc) = (j.shape(), pair.c.shape());
    if sj.len() != 4 || sj[1] != 3 || sj[0] != sc[0] || sj[2..] != sc[2..] {
        return Err(Error::shape(format!("noisy video {sj:?} does not match conditioning {sc:?} in T, H, W")));
    }
    Tensor::concat(&[j, &pair.c, &pair.m], 1)
}

/// Grows the first convolution of an unconditional model from 3 to 7 input
/// channels with zero-initialised new slices.
pub fn expand_input_conv(weights: &STUNetWeights) -> Result<STUNetWeights> {
    weights.expand_input_conv()
}

/// One training clip (or image batch) with its class and optional extra
/// conditioning channels.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub video: Tensor,
    pub class: usize,
    pub extra: Option<Tensor>,
}

/// A training example after forward noising.
#[derive(Clone, Debug)]
pub struct NoisedExample {
    pub t: usize,
    pub eps: Tensor,
    pub x_t: Tensor,
}

/// Draws `t ~ U{0..steps}` then `eps ~ N(0, I)` and noises the example.
pub fn draw_noised(video: &Tensor, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<NoisedExample> {
    let t = rng.random_range(0..schedule.steps());
    let eps = Tensor::randn(video.shape(), rng);
    let x_t = q_sample(video, t, &eps, schedule)?;
    Ok(NoisedExample { t, eps, x_t })
}

/// Mean over the batch of the per-example noise-prediction MSE.
pub fn training_loss<D: Denoiser + ?Sized>(
    model: &D,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let n = draw_noised(&ex.video, schedule, rng)?;
        let pred = model.predict_eps(&n.x_t, n.t, ex.extra.as_ref())?;
        let diff = pred.sub(&n.eps)?;
        let mse = diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        if !mse.is_finite() {
            return Err(Error::NonFinite(format!("loss of batch item {i} at t={} is {mse}", n.t)));
        }
        total += mse;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_rejects_unmasked_content() {
        let c = Tensor::full(&[2, 3, 2, 2], 0.5);
        let m = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(ConditioningPair::new(c, m).is_err());
        let bad_mask = Tensor::full(&[2, 1, 2, 2], 0.5);
        assert!(ConditioningPair::new(Tensor::zeros(&[2, 3, 2, 2]), bad_mask).is_err());
    }

    #[test]
    fn conditional_input_layout() {
        let j = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let pair = ConditioningPair::new(Tensor::zeros(&[2, 3, 2, 2]), Tensor::zeros(&[2, 1, 2, 2])).unwrap();
        let x = assemble_conditional_input(&j, &pair).unwrap();
        assert_eq!(x.shape(), &[2, 7, 2, 2]);
        assert!(x.narrow(1, 0, 3).unwrap().bit_eq(&j));
        assert!(x.narrow(1, 3, 4).unwrap().data().iter().all(|&v| v == 0.0));
        let short = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(assemble_conditional_input(&short, &pair).is_err());
    }
}

//! Temporal MultiDiffusion for the spatial super-resolution stage.
//!
//! Each reverse step slices the noisy high-resolution video into overlapping
//! temporal segments, updates every segment independently and reconciles
//! the overlapping updates with the least-squares combination, which is the
//! per-frame mean over the segments covering that frame.

use std::ops::Range;

use rayon::prelude::*;

use crate::diffusion::{reverse_step, timestep_sequence, Denoiser, NoiseSchedule, SamplerConfig, SamplerMode, SAMPLE_STREAM};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const DEFAULT_FRAMES: usize = 16;
pub const DEFAULT_SEGMENT: usize = 8;
pub const DEFAULT_STRIDE: usize = 6;

/// Overlapping temporal segments `[start, start + t_prime)` of a `t`-frame
/// video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    t: usize,
    t_prime: usize,
    stride: usize,
    starts: Vec<usize>,
}

/// Segment starts 0, stride, 2·stride, … with the last one clamped to
/// `t - t_prime`.
pub fn plan_windows(t: usize, t_prime: usize, stride: usize) -> Result<WindowPlan> {
    if !(1 <= stride && stride < t_prime && t_prime <= t) {
        return Err(Error::invalid(format!(
            "window plan needs 1 <= stride < T' <= T, got T={t}, T'={t_prime}, stride={stride}"
        )));
    }
    let last = t - t_prime;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s < last).collect();
    starts.push(last);
    Ok(WindowPlan { t, t_prime, stride, starts })
}

impl WindowPlan {
    /// Plan with explicit starts in the given order. Coverage is not
    /// required here so that degenerate plans can be constructed and
    /// rejected by [`aggregate`].
    pub fn from_starts(t: usize, t_prime: usize, starts: Vec<usize>) -> Result<Self> {
        if t_prime == 0 || t_prime > t || starts.is_empty() {
            return Err(Error::invalid(format!("invalid plan T={t}, T'={t_prime}, {} segments", starts.len())));
        }
        if let Some(s) = starts.iter().find(|&&s| s + t_prime > t) {
            return Err(Error::invalid(format!("segment starting at {s} overruns {t} frames")));
        }
        let mut sorted = starts.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate segment in {starts:?}")));
        }
        let stride = sorted.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(t_prime);
        Ok(WindowPlan { t, t_prime, stride, starts })
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn segment_len(&self) -> usize {
        self.t_prime
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.starts.iter().map(|&s| s..s + self.t_prime)
    }

    /// Number of segments containing each frame.
    pub fn coverage(&self) -> Vec<usize> {
        let mut counts = vec![0; self.t];
        for seg in self.segments() {
            counts[seg].iter_mut().for_each(|c| *c += 1);
        }
        counts
    }
}

/// Per-segment outputs `[T', C, H, W]`, one per plan segment, in plan order.
#[derive(Clone, Debug)]
pub struct SegmentPredictions {
    plan: WindowPlan,
    preds: Vec<Tensor>,
}

impl SegmentPredictions {
    pub fn new(plan: WindowPlan, preds: Vec<Tensor>) -> Result<Self> {
        if preds.len() != plan.len() {
            return Err(Error::invalid(format!("{} predictions for {} segments", preds.len(), plan.len())));
        }
        let shape = preds[0].shape().to_vec();
        if shape.len() != 4 || shape[0] != plan.t_prime {
            return Err(Error::shape(format!("segment prediction {shape:?} is not [{}, C, H, W]", plan.t_prime)));
        }
        if let Some(p) = preds.iter().find(|p| p.shape() != shape.as_slice()) {
            return Err(Error::shape(format!("segment predictions mix shapes {shape:?} and {:?}", p.shape())));
        }
        Ok(SegmentPredictions { plan, preds })
    }

    pub fn plan(&self) -> &WindowPlan {
        &self.plan
    }

    pub fn predictions(&self) -> &[Tensor] {
        &self.preds
    }
}

/// Minimiser of `sum_i |J' - Phi(J_i)|^2` restricted to each segment: the
/// coverage-weighted mean of the predictions at every frame.
pub fn aggregate(preds: &SegmentPredictions) -> Result<Tensor> {
    let plan = &preds.plan;
    let coverage = plan.coverage();
    if let Some(f) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("frame {f} is not covered by any segment")));
    }
    let frame_shape = &preds.preds[0].shape()[1..];
    let frame_len: usize = frame_shape.iter().product();
    let mut acc: Vec<Option<Vec<f64>>> = vec![None; plan.t];
    for (start, pred) in plan.starts.iter().zip(&preds.preds) {
        for (k, chunk) in pred.data().chunks(frame_len).enumerate() {
            match &mut acc[start + k] {
                slot @ None => *slot = Some(chunk.to_vec()),
                Some(sum) => sum.iter_mut().zip(chunk).for_each(|(s, v)| *s += v),
            }
        }
    }
    let mut data = Vec::with_capacity(plan.t * frame_len);
    for (frame, count) in acc.into_iter().zip(coverage) {
        let frame = frame.expect("coverage checked");
        let n = count as f64;
        data.extend(frame.into_iter().map(|v| v / n));
    }
    let mut shape = vec![plan.t];
    shape.extend_from_slice(frame_shape);
    Tensor::new(shape, data)
}

/// Nearest-neighbour spatial upsampling of `[T, C, H, W]` by `factor`.
pub fn upsample_frames(video: &Tensor, factor: usize) -> Result<Tensor> {
    let s = check_video(video, factor)?;
    let (h, w) = (s[2] * factor, s[3] * factor);
    let src = video.data();
    let mut data = Vec::with_capacity(s[0] * s[1] * h * w);
    for plane in src.chunks(s[2] * s[3]) {
        for y in 0..h {
            let row = &plane[(y / factor) * s[3]..(y / factor + 1) * s[3]];
            data.extend((0..w).map(|x| row[x / factor]));
        }
    }
    Tensor::new(vec![s[0], s[1], h, w], data)
}

/// Box-filter spatial downsampling of `[T, C, H, W]` by `factor`.
pub fn downsample_frames(video: &Tensor, factor: usize) -> Result<Tensor> {
    let s = check_video(video, factor)?;
    if s[2] % factor != 0 || s[3] % factor != 0 {
        return Err(Error::shape(format!("{}x{} frames are not divisible by {factor}", s[2], s[3])));
    }
    let (h, w) = (s[2] / factor, s[3] / factor);
    let norm = (factor * factor) as f64;
    let mut data = Vec::with_capacity(s[0] * s[1] * h * w);
    for plane in video.data().chunks(s[2] * s[3]) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += plane[(y * factor + dy) * s[3] + x * factor + dx];
                    }
                }
                data.push(acc / norm);
            }
        }
    }
    Tensor::new(vec![s[0], s[1], h, w], data)
}

fn check_video(video: &Tensor, factor: usize) -> Result<&[usize]> {
    if video.rank() != 4 {
        return Err(Error::shape(format!("expected a [T, C, H, W] video, got {:?}", video.shape())));
    }
    if factor == 0 {
        return Err(Error::invalid("resampling factor must be positive"));
    }
    Ok(video.shape())
}

/// Super-resolves `low_res` by `factor` with segment-wise denoising.
///
/// The SSR denoiser sees each noisy high-resolution segment with the
/// nearest-upsampled low-resolution segment as extra channels. Noise draws
/// follow [`crate::diffusion::sample`] so a single-segment plan reproduces
/// windowless sampling exactly.
pub fn ssr_multidiffusion_sample<D: Denoiser + ?Sized>(
    model: &D,
    low_res: &Tensor,
    factor: usize,
    plan: &WindowPlan,
    schedule: &NoiseSchedule,
    sampler: SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    if low_res.rank() != 4 || low_res.dim(0) != plan.t {
        return Err(Error::shape(format!("low-res video {:?} does not have the plan's {} frames", low_res.shape(), plan.t)));
    }
    let cond = upsample_frames(low_res, factor)?;
    let cond_segments: Vec<Tensor> =
        plan.starts.iter().map(|&s| cond.narrow(0, s, plan.t_prime)).collect::<Result<_>>()?;
    let points = timestep_sequence(schedule.steps() - 1, sampler.n_steps)?;
    let mut r = rng::stream(seed, &[SAMPLE_STREAM]);
    let mut x = Tensor::randn(cond.shape(), &mut r);
    for (i, pair) in points.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let segments: Vec<Tensor> = plan.starts.iter().map(|&s| x.narrow(0, s, plan.t_prime)).collect::<Result<_>>()?;
        let eps: Vec<Tensor> = segments
            .par_iter()
            .zip(cond_segments.par_iter())
            .map(|(seg, c)| model.predict_eps(seg, t, Some(c)))
            .collect::<Result<_>>()?;
        for e in &eps {
            e.ensure_finite(&format!("segment noise estimate at sampling step {i} (t={t})"))?;
        }
        let z = (sampler.mode == SamplerMode::Ddpm).then(|| Tensor::randn(x.shape(), &mut r));
        let updates = segments
            .iter()
            .zip(&eps)
            .zip(&plan.starts)
            .map(|((seg, e), &s)| {
                let z_seg = z.as_ref().map(|z| z.narrow(0, s, plan.t_prime)).transpose()?;
                reverse_step(schedule, sampler.mode, t, t_prev, seg, e, z_seg.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        x = aggregate(&SegmentPredictions::new(plan.clone(), updates)?)?;
        x.ensure_finite(&format!("aggregated sample at sampling step {i} (t={t} -> {t_prev})"))?;
    }
    Ok(x)
}

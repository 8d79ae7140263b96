//! Conditioning-mask constructors, style interpolation and SDEdit editing.
//!
//! Images are `[3, H, W]`, videos `[T, 3, H, W]`, image masks `[1, H, W]`
//! and video masks `[T, 1, H, W]`. Region masks mark pixels to be generated
//! with 1; conditioning masks mark known content with 1.

use std::ops::Range;

use crate::diffusion::{
    mask_channels, q_sample, reverse_process, timestep_sequence, ConditioningPair, Denoiser, NoiseSchedule,
    SamplerConfig, SAMPLE_STREAM,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::stunet::{check_same_layout, NamedTensors, STUNetWeights};

pub const DEFAULT_SDEDIT_STRENGTH: f64 = 0.97;
/// Interpolation coefficients used in practice; values below are accepted
/// but mostly erase the style.
pub const STYLE_ALPHA_RANGE: (f64, f64) = (0.5, 1.0);

fn check_binary(mask: &Tensor, what: &str) -> Result<()> {
    match mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::invalid(format!("{what} must be binary, found {v}"))),
        None => Ok(()),
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::shape(format!("expected a [3, H, W] image, got {s:?}"))),
    }
}

/// Repeats `[C, H, W]` into `[T, C, H, W]`.
pub fn repeat_frames(image: &Tensor, t: usize) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let frame = image.reshape(&shape)?;
    Tensor::concat(&vec![&frame; t], 0)
}

/// First frame known, all later frames to be generated.
pub fn cond_image_to_video(first_frame: &Tensor, t: usize) -> Result<ConditioningPair> {
    let (h, w) = check_image(first_frame)?;
    if t < 2 {
        return Err(Error::invalid(format!("image-to-video needs at least 2 frames, got {t}")));
    }
    let rest = Tensor::zeros(&[t - 1, 3, h, w]);
    let c = Tensor::concat(&[&first_frame.reshape(&[1, 3, h, w])?, &rest], 0)?;
    let m = Tensor::concat(&[&Tensor::full(&[1, 1, h, w], 1.0), &Tensor::zeros(&[t - 1, 1, h, w])], 0)?;
    ConditioningPair::new(c, m)
}

/// Keeps `video` outside `region` (`[T, 1, H, W]`, 1 = fill in).
pub fn cond_inpaint(video: &Tensor, region: &Tensor) -> Result<ConditioningPair> {
    check_binary(region, "inpainting region")?;
    let m = region.map(|r| 1.0 - r);
    let c = mask_channels(video, &m)?;
    ConditioningPair::new(c, m)
}

/// Animates `region` (`[1, H, W]`) of a still image; the first frame and
/// everything outside the region stay fixed.
pub fn cond_cinemagraph(image: &Tensor, region: &Tensor, t: usize) -> Result<ConditioningPair> {
    let (h, w) = check_image(image)?;
    if region.shape() != [1, h, w] {
        return Err(Error::shape(format!("cinemagraph region {:?} must be [1, {h}, {w}]", region.shape())));
    }
    check_binary(region, "cinemagraph region")?;
    if t == 0 {
        return Err(Error::invalid("cinemagraph needs at least one frame"));
    }
    let keep = region.map(|r| 1.0 - r).reshape(&[1, 1, h, w])?;
    let first = Tensor::full(&[1, 1, h, w], 1.0);
    let mut frames = vec![&first];
    frames.extend(std::iter::repeat_n(&keep, t - 1));
    let m = Tensor::concat(&frames, 0)?;
    let c = mask_channels(&repeat_frames(image, t)?, &m)?;
    ConditioningPair::new(c, m)
}

/// `[T, 1, H, W]` region that is 1 inside the box on the given frames.
pub fn box_region(
    shape: (usize, usize, usize),
    frames: Range<usize>,
    rows: Range<usize>,
    cols: Range<usize>,
) -> Result<Tensor> {
    let (t, h, w) = shape;
    if frames.end > t || rows.end > h || cols.end > w {
        return Err(Error::invalid(format!("box {frames:?}x{rows:?}x{cols:?} exceeds {t}x{h}x{w}")));
    }
    Ok(Tensor::from_fn(&[t, 1, h, w], |i| {
        let (f, y, x) = (i / (h * w), (i / w) % h, i % w);
        (frames.contains(&f) && rows.contains(&y) && cols.contains(&x)) as u8 as f64
    }))
}

/// Outpainting region: a `margin`-pixel border on every frame.
pub fn border_region(shape: (usize, usize, usize), margin: usize) -> Result<Tensor> {
    let (t, h, w) = shape;
    if 2 * margin >= h.min(w) {
        return Err(Error::invalid(format!("border of {margin} pixels leaves nothing of a {h}x{w} frame")));
    }
    Ok(Tensor::from_fn(&[t, 1, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        let inside = (margin..h - margin).contains(&y) && (margin..w - margin).contains(&x);
        (!inside) as u8 as f64
    }))
}

/// Original and style-fine-tuned spatial weights with an interpolation
/// coefficient.
#[derive(Clone, Debug)]
pub struct StylePair {
    orig: NamedTensors,
    style: NamedTensors,
    alpha: f64,
}

impl StylePair {
    /// Accepts any `alpha` in `[0, 1]`; see [`STYLE_ALPHA_RANGE`] for the
    /// useful range.
    pub fn new(orig: NamedTensors, style: NamedTensors, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("style alpha {alpha} outside [0, 1]")));
        }
        check_same_layout(&orig, &style, "style pair")?;
        Ok(StylePair { orig, style, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn in_operating_range(&self) -> bool {
        (STYLE_ALPHA_RANGE.0..=STYLE_ALPHA_RANGE.1).contains(&self.alpha)
    }
}

/// `alpha * W_style + (1 - alpha) * W_orig` per tensor.
pub fn interpolate_style(pair: &StylePair) -> Result<NamedTensors> {
    let a = pair.alpha;
    pair.orig
        .iter()
        .map(|(name, o)| {
            let s = &pair.style[name];
            let v = if a == 1.0 {
                s.clone()
            } else if a == 0.0 {
                o.clone()
            } else {
                s.zip_map(o, |sv, ov| a * sv + (1.0 - a) * ov)?
            };
            Ok((name.clone(), v))
        })
        .collect()
}

/// Video model whose spatial layers are the interpolated weights.
pub fn install_style(weights: &STUNetWeights, pair: &StylePair) -> Result<STUNetWeights> {
    weights.with_spatial(interpolate_style(pair)?)
}

/// Timestep index SDEdit starts from: `round(strength * steps) - 1`.
pub fn sdedit_start(strength: f64, steps: usize) -> Result<usize> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::invalid(format!("SDEdit strength {strength} outside (0, 1]")));
    }
    let t0 = ((strength * steps as f64).round() as usize).clamp(1, steps);
    Ok(t0 - 1)
}

/// Re-noises `input` part of the way and denoises it again. The number of
/// sampler steps scales with `strength`; at strength 1 the input is fully
/// replaced by noise and the result equals unconditional sampling.
pub fn sdedit_video<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    sampler: SamplerConfig,
    input: &Tensor,
    extra: Option<&Tensor>,
    strength: f64,
    seed: u64,
) -> Result<Tensor> {
    let start = sdedit_start(strength, schedule.steps())?;
    let n = ((strength * sampler.n_steps as f64).round() as usize).clamp(1, start + 1);
    let points = timestep_sequence(start, n)?;
    let mut r = rng::stream(seed, &[SAMPLE_STREAM]);
    let eps = Tensor::randn(input.shape(), &mut r);
    let x = if start + 1 == schedule.steps() { eps } else { q_sample(input, start, &eps, schedule)? };
    reverse_process(model, schedule, sampler.mode, &points, x, extra, &mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sdedit_start_index() {
        assert_eq!(sdedit_start(1.0, 1000).unwrap(), 999);
        assert_eq!(sdedit_start(0.97, 1000).unwrap(), 969);
        assert_eq!(sdedit_start(1e-9, 1000).unwrap(), 0);
        assert!(sdedit_start(0.0, 1000).is_err());
        assert!(sdedit_start(1.5, 1000).is_err());
    }

    #[test]
    fn regions() {
        let b = border_region((1, 4, 4), 1).unwrap();
        assert_eq!(b.sum(), 12.0);
        assert!(border_region((1, 4, 4), 2).is_err());
        let r = box_region((2, 3, 3), 1..2, 0..1, 0..3).unwrap();
        assert_eq!(r.sum(), 3.0);
        assert_eq!(r.narrow(0, 0, 1).unwrap().sum(), 0.0);
    }
}

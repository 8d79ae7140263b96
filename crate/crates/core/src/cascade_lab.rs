//! Synthetic periodic motion, keyframe/windowed-TSR cascade simulation and
//! temporal-aliasing measurements.
//!
//! Videos rendered here are `[T, 3, H, W]` with values in `[0, 1]`: a single
//! Gaussian blob on a black background, displaced from the frame centre
//! along `direction` by the motion law.

use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

const FREQ_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Sinusoid,
    /// Triangle wave with the zero crossings and extrema of the sinusoid.
    Bounce,
    /// `A * (2 f t - 1)`: constant velocity `2 A f` px/frame.
    Linear,
}

impl FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(MotionKind::Sinusoid),
            "bounce" => Ok(MotionKind::Bounce),
            "linear" => Ok(MotionKind::Linear),
            other => Err(Error::invalid(format!("unknown motion kind '{other}' (expected sinusoid|bounce|linear)"))),
        }
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MotionKind::Sinusoid => "sinusoid",
            MotionKind::Bounce => "bounce",
            MotionKind::Linear => "linear",
        })
    }
}

/// Motion law of the rendered object. Lengths in pixels, frequency in
/// cycles per frame, phase and direction in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub kind: MotionKind,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub size: f64,
    pub direction: f64,
}

impl MotionSpec {
    pub fn sinusoid(amplitude: f64, frequency: f64, phase: f64) -> Self {
        MotionSpec { kind: MotionKind::Sinusoid, amplitude, frequency, phase, size: 4.0, direction: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.amplitude, self.frequency, self.phase, self.size, self.direction].iter().all(|v| v.is_finite());
        if !finite || self.frequency < 0.0 || self.amplitude < 0.0 || self.size <= 0.0 {
            return Err(Error::invalid(format!("invalid motion {self:?}")));
        }
        Ok(())
    }

    /// Signed displacement from the frame centre at (possibly fractional)
    /// time `t`.
    pub fn displacement(&self, t: f64) -> f64 {
        let (a, f, p) = (self.amplitude, self.frequency, self.phase);
        match self.kind {
            MotionKind::Sinusoid => a * (TAU * f * t + p).sin(),
            MotionKind::Bounce => a * 2.0 / PI * (TAU * f * t + p).sin().asin(),
            MotionKind::Linear => a * (2.0 * f * t - 1.0),
        }
    }

    /// Object centre `(x, y)` in pixel coordinates.
    pub fn center(&self, t: f64, h: usize, w: usize) -> (f64, f64) {
        let d = self.displacement(t);
        ((w as f64 - 1.0) / 2.0 + d * self.direction.cos(), (h as f64 - 1.0) / 2.0 + d * self.direction.sin())
    }

    fn sigma(&self) -> f64 {
        self.size / 4.0
    }
}

/// Pixel coverage of a unit-peak Gaussian profile, one entry per pixel.
fn profile(center: f64, sigma: f64, n: usize) -> Vec<f64> {
    let k = 1.0 / (sigma * std::f64::consts::SQRT_2);
    let peak = libm::erf(0.5 * k);
    (0..n)
        .map(|i| {
            let x = i as f64 - center;
            0.5 * (libm::erf((x + 0.5) * k) - libm::erf((x - 0.5) * k)) / peak
        })
        .collect()
}

/// Renders one frame `[3, H, W]` at time `t`.
pub fn render_frame(spec: &MotionSpec, t: f64, h: usize, w: usize) -> Result<Tensor> {
    let (cx, cy) = spec.center(t, h, w);
    let margin = spec.size;
    let inside = |c: f64, n: usize| c - margin >= -0.5 && c + margin <= n as f64 - 0.5;
    if !inside(cx, w) || !inside(cy, h) {
        return Err(Error::invalid(format!(
            "object of size {} at ({cx:.2}, {cy:.2}) leaves the {h}x{w} frame at t={t}",
            spec.size
        )));
    }
    let (px, py) = (profile(cx, spec.sigma(), w), profile(cy, spec.sigma(), h));
    let plane: Vec<f64> = py.iter().flat_map(|gy| px.iter().map(move |gx| (gy * gx).min(1.0))).collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new(vec![3, h, w], data)
}

/// Deterministic rendering of `t` frames of `spec`.
pub fn render_video(spec: &MotionSpec, t: usize, h: usize, w: usize) -> Result<Tensor> {
    spec.validate()?;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("cannot render a {t}x{h}x{w} video")));
    }
    let frames: Vec<Tensor> = (0..t).map(|f| render_frame(spec, f as f64, h, w)?.reshape(&[1, 3, h, w])).collect::<Result<_>>()?;
    Tensor::concat(&frames.iter().collect::<Vec<_>>(), 0)
}

/// X-T slice `[T, W]` of `video` at `row`, averaged over channels.
pub fn xt_slice(video: &Tensor, row: usize) -> Result<Tensor> {
    let &[t, c, h, w] = video.shape() else {
        return Err(Error::shape(format!("expected a [T, C, H, W] video, got {:?}", video.shape())));
    };
    if row >= h {
        return Err(Error::invalid(format!("row {row} out of range 0..{h}")));
    }
    let d = video.data();
    Ok(Tensor::from_fn(&[t, w], |i| {
        let (f, x) = (i / w, i % w);
        (0..c).map(|ch| d[((f * c + ch) * h + row) * w + x]).sum::<f64>() / c as f64
    }))
}

/// Sinusoids whose every `s`-th frame matches `spec` exactly.
///
/// Candidates are `f + m/s` (same phase) and `m/s - f` (phase `pi - phase`,
/// i.e. the reversed motion). Only frequencies no faster than both the input
/// and the keyframe Nyquist limit allow are kept: `f' <= max(f, 1/(2s))`,
/// capped at 0.5 cycles/frame. The input itself is always the first entry.
pub fn alias_ambiguity(spec: &MotionSpec, s: usize) -> Result<Vec<MotionSpec>> {
    spec.validate()?;
    if spec.kind != MotionKind::Sinusoid {
        return Err(Error::invalid(format!("aliasing analysis needs a sinusoid, got {}", spec.kind)));
    }
    if s == 0 {
        return Err(Error::invalid("keyframe stride must be positive"));
    }
    let f = spec.frequency;
    let band = f.max(0.5 / s as f64).min(0.5) + FREQ_EPS;
    let step = 1.0 / s as f64;
    let mut out = vec![*spec];
    let max_m = (band * s as f64).ceil() as i64 + (f * s as f64).ceil() as i64 + 1;
    for m in -max_m..=max_m {
        let mm = m as f64 * step;
        for (freq, phase) in [(f + mm, spec.phase), (mm - f, PI - spec.phase)] {
            if freq < -FREQ_EPS || freq > band {
                continue;
            }
            let cand = MotionSpec { frequency: freq.max(0.0), phase, ..*spec };
            if !out.iter().any(|o| same_motion(o, &cand)) {
                out.push(cand);
            }
        }
    }
    Ok(out)
}

fn same_motion(a: &MotionSpec, b: &MotionSpec) -> bool {
    if (a.frequency - b.frequency).abs() > 1e-9 {
        return false;
    }
    if a.frequency < 1e-9 {
        return (a.phase.sin() - b.phase.sin()).abs() < 1e-9;
    }
    let d = (a.phase - b.phase).rem_euclid(TAU);
    d.min(TAU - d) < 1e-9
}

/// `true` when `cand` is the reversed-direction alias of `spec`.
fn is_reversed(spec: &MotionSpec, cand: &MotionSpec) -> bool {
    !same_motion(cand, &MotionSpec { phase: spec.phase, ..*cand })
}

/// Keyframe stride `s` and frames of context `w` of a windowed TSR stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeSpec {
    pub stride: usize,
    pub window: usize,
}

impl CascadeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.window < 2 {
            return Err(Error::invalid(format!("cascade needs stride >= 1 and window >= 2, got {self:?}")));
        }
        Ok(())
    }
}

/// Motion chosen by the TSR oracle for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowChoice {
    /// First and last frame of the window (both keyframes).
    pub frames: (usize, usize),
    pub motion: MotionSpec,
    pub reversed: bool,
}

#[derive(Clone, Debug)]
pub struct CascadeRun {
    pub video: Tensor,
    pub windows: Vec<WindowChoice>,
}

/// Keeps every `s`-th frame of `video` and fills the rest with an idealised
/// TSR that sees `w` keyframes at a time.
///
/// Within a window the TSR knows the motion up to aliasing: it picks the
/// slowest candidate of the same-direction family or of the
/// reversed-direction family, choosing between the two families by a coin
/// flip seeded per window. Consecutive windows share their boundary
/// keyframe; keyframes are copied unchanged.
pub fn simulate_cascade(video: &Tensor, motion: &MotionSpec, cascade: CascadeSpec, seed: u64) -> Result<CascadeRun> {
    cascade.validate()?;
    let &[t, _, h, w] = video.shape() else {
        return Err(Error::shape(format!("expected a [T, C, H, W] video, got {:?}", video.shape())));
    };
    let s = cascade.stride;
    if t == 0 || (t - 1) % s != 0 {
        return Err(Error::invalid(format!("{t} frames cannot be split into keyframes every {s} frames")));
    }
    if s == 1 {
        return Ok(CascadeRun { video: video.clone(), windows: Vec::new() });
    }
    let candidates = alias_ambiguity(motion, s)?;
    let slowest = |reversed: bool| {
        candidates
            .iter()
            .filter(|c| is_reversed(motion, c) == reversed)
            .min_by(|a, b| a.frequency.total_cmp(&b.frequency))
            .copied()
    };
    let families = [slowest(false), slowest(true)];
    let keys = (t - 1) / s;
    let span = cascade.window - 1;
    let mut frames: Vec<Tensor> = (0..t).map(|f| video.narrow(0, f, 1)).collect::<Result<_>>()?;
    let mut windows = Vec::new();
    for (j, first_key) in (0..keys).step_by(span).enumerate() {
        let last_key = (first_key + span).min(keys);
        let reversed = match families {
            [Some(_), Some(_)] => rng::stream(seed, &[j as u64]).random_bool(0.5),
            [None, Some(_)] => true,
            _ => false,
        };
        let chosen = families[reversed as usize].expect("family exists");
        let (a, b) = (first_key * s, last_key * s);
        for (f, frame) in frames.iter_mut().enumerate().take(b).skip(a + 1) {
            if f % s != 0 {
                *frame = render_frame(&chosen, f as f64, h, w)?.reshape(&[1, 3, h, w])?;
            }
        }
        windows.push(WindowChoice { frames: (a, b), motion: chosen, reversed });
    }
    let video = Tensor::concat(&frames.iter().collect::<Vec<_>>(), 0)?;
    Ok(CascadeRun { video, windows })
}

/// Intensity-weighted centroid `(x, y)` of every frame.
pub fn centroid_trajectory(video: &Tensor) -> Result<Vec<(f64, f64)>> {
    let &[t, c, h, w] = video.shape() else {
        return Err(Error::shape(format!("expected a [T, C, H, W] video, got {:?}", video.shape())));
    };
    let frame_len = c * h * w;
    video
        .data()
        .chunks(frame_len)
        .take(t)
        .enumerate()
        .map(|(f, frame)| {
            let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
            for (i, v) in frame.iter().enumerate() {
                let (y, x) = ((i / w) % h, i % w);
                m += v;
                mx += v * x as f64;
                my += v * y as f64;
            }
            if m.abs() < 1e-12 {
                return Err(Error::invalid(format!("frame {f} is empty; no centroid")));
            }
            Ok((mx / m, my / m))
        })
        .collect()
}

/// Mean squared second temporal difference of the centroid trajectory.
pub fn consistency_metric(video: &Tensor) -> Result<f64> {
    let c = centroid_trajectory(video)?;
    if c.len() < 3 {
        return Err(Error::invalid(format!("consistency needs at least 3 frames, got {}", c.len())));
    }
    Ok(second_difference_energy(&c))
}

/// Mean over interior frames of `|p[t+1] - 2 p[t] + p[t-1]|^2`.
pub fn second_difference_energy(points: &[(f64, f64)]) -> f64 {
    let sum: f64 = points
        .windows(3)
        .map(|w| {
            let ax = w[2].0 - 2.0 * w[1].0 + w[0].0;
            let ay = w[2].1 - 2.0 * w[1].1 + w[0].1;
            ax * ax + ay * ay
        })
        .sum();
    sum / (points.len() - 2) as f64
}

/// Window-boundary frames where the framewise displacement along the motion
/// direction changes sign and the adjacent windows resolved the aliasing
/// in opposite directions.
pub fn direction_flips(run: &CascadeRun, motion: &MotionSpec) -> Result<Vec<usize>> {
    let c = centroid_trajectory(&run.video)?;
    let (dx, dy) = (motion.direction.cos(), motion.direction.sin());
    let along = |f: usize| c[f].0 * dx + c[f].1 * dy;
    Ok(run
        .windows
        .windows(2)
        .filter(|p| p[0].reversed != p[1].reversed)
        .map(|p| p[0].frames.1)
        .filter(|&b| b >= 1 && b + 1 < c.len())
        .filter(|&b| {
            let (before, after) = (along(b) - along(b - 1), along(b + 1) - along(b));
            before * after < 0.0
        })
        .collect())
}

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Rng};

/// Stream label of the sampling generator.
pub const SAMPLE_STREAM: u64 = 0x5341_4d50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Ancestral sampling (stochastic).
    Ddpm,
    /// Deterministic implicit sampling (eta = 0).
    Ddim,
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerMode::Ddpm),
            "ddim" => Ok(SamplerMode::Ddim),
            other => Err(Error::invalid(format!("unknown sampler '{other}' (expected ddpm|ddim)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Timesteps visited, including the starting one.
    pub n_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { mode: SamplerMode::Ddim, n_steps: 50 }
    }
}

/// `n` timesteps evenly spaced from `start` down to 0 (duplicates removed).
pub fn timestep_sequence(start: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("sampler needs at least one timestep"));
    }
    if n > start + 1 {
        return Err(Error::invalid(format!("{n} sampling steps exceed the {} available timesteps", start + 1)));
    }
    if n == 1 {
        return Ok(vec![start]);
    }
    let mut seq: Vec<usize> =
        (0..n).rev().map(|i| ((i as f64) * start as f64 / (n - 1) as f64).round() as usize).collect();
    seq.dedup();
    Ok(seq)
}

/// One reverse update from timestep `t` to `t_prev < t` given the noise
/// estimate `eps`; `z` is the fresh Gaussian draw used by ancestral sampling.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    mode: SamplerMode,
    t: usize,
    t_prev: usize,
    x: &Tensor,
    eps: &Tensor,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    schedule.check_t(t_prev)?;
    let ab = schedule.alpha_bar[t];
    let ab_prev = schedule.alpha_bar[t_prev];
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0_hat = x.zip_map(eps, |xv, ev| (xv - sb * ev) / sa)?;
    match mode {
        SamplerMode::Ddim => {
            let (ca, cb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            x0_hat.zip_map(eps, |x0, ev| ca * x0 + cb * ev)
        }
        SamplerMode::Ddpm => {
            let z = z.ok_or_else(|| Error::invalid("ancestral step requires a noise draw"))?;
            let var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev);
            let sigma = var.max(0.0).sqrt();
            let (ca, cb) = (ab_prev.sqrt(), (1.0 - ab_prev - var).max(0.0).sqrt());
            let mean = x0_hat.zip_map(eps, |x0, ev| ca * x0 + cb * ev)?;
            mean.zip_map(z, |m, zv| m + sigma * zv)
        }
    }
}

/// Runs the reverse chain over `points` (descending) starting from `x`.
/// Ancestral noise is drawn from `rng` once per transition.
pub fn reverse_process<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    mode: SamplerMode,
    points: &[usize],
    mut x: Tensor,
    extra: Option<&Tensor>,
    rng: &mut Rng,
) -> Result<Tensor> {
    for (i, pair) in points.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps = model.predict_eps(&x, t, extra)?;
        eps.ensure_finite(&format!("noise estimate at sampling step {i} (t={t})"))?;
        let z = (mode == SamplerMode::Ddpm).then(|| Tensor::randn(x.shape(), rng));
        x = reverse_step(schedule, mode, t, t_prev, &x, &eps, z.as_ref())?;
        x.ensure_finite(&format!("sample at sampling step {i} (t={t} -> {t_prev})"))?;
    }
    Ok(x)
}

/// Draws `x_T ~ N(0, I)` of `shape` and denoises it down to timestep 0.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    sampler: SamplerConfig,
    shape: &[usize],
    extra: Option<&Tensor>,
    seed: u64,
) -> Result<Tensor> {
    let points = timestep_sequence(schedule.steps() - 1, sampler.n_steps)?;
    let mut r = rng::stream(seed, &[SAMPLE_STREAM]);
    let x = Tensor::randn(shape, &mut r);
    reverse_process(model, schedule, sampler.mode, &points, x, extra, &mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_endpoints() {
        assert_eq!(timestep_sequence(9, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
        let s = timestep_sequence(999, 50).unwrap();
        assert_eq!((s[0], *s.last().unwrap(), s.len()), (999, 0, 50));
        assert_eq!(timestep_sequence(0, 1).unwrap(), vec![0]);
        assert!(timestep_sequence(3, 5).is_err());
        assert!(timestep_sequence(3, 0).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("ddim".parse::<SamplerMode>().unwrap(), SamplerMode::Ddim);
        assert!("euler".parse::<SamplerMode>().is_err());
    }
}

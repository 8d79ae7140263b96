//! Training loops of the image and video models.
//!
//! Step `k` draws its batch and noise from `stream(seed, [label, k])`, so a
//! run resumed from a checkpoint after step `k` continues exactly the loss
//! curve of an uninterrupted run.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use stunet_core::applications::{box_region, cond_cinemagraph, cond_image_to_video, cond_inpaint};
use stunet_core::diffusion::{model_input, q_sample, NoiseSchedule, NoisedExample, TrainingExample};
use stunet_core::multidiffusion::upsample_frames;
use stunet_core::rng::{stream, Rng};
use stunet_core::stunet::{STUNetWeights, T2IWeights};
use stunet_core::train::{probe_loss, t2i_train_step, video_train_step, Adam};
use stunet_core::Tensor;

use crate::checkpoint::{Role, TrainingState};
use crate::config::{RunConfig, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{CliError, Result};

const T2I_STREAM: u64 = 0x7432_6900;
const VIDEO_STREAM: u64 = 0x7669_6400;
const PROBE_STREAM: u64 = 0x7072_6f62;

/// Data transform used to produce a style fine-tune of the image model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    #[default]
    None,
    /// Colour inversion `v -> -v`.
    Invert,
}

impl Style {
    pub fn apply(self, v: &Tensor) -> Tensor {
        match self {
            Style::None => v.clone(),
            Style::Invert => v.scale(-1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
}

/// Loss on the fixed probe set after `step` completed updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub step: u64,
    pub probe_loss: f64,
}

/// Where a run starts from.
pub enum Start<W> {
    /// Fresh optimiser on the given weights.
    Init(W),
    /// Weights and optimiser state from a checkpoint.
    Resume(W, TrainingState),
}

pub struct Trained<W> {
    pub weights: W,
    pub state: TrainingState,
    pub losses: Vec<LossRow>,
    pub probes: Vec<ProbeRow>,
}

fn frame(clip: &Tensor, f: usize) -> Result<Tensor> {
    Ok(clip.narrow(0, f, 1)?)
}

/// One image example (`[1, C, H, W]`) from clip `c`, frame `f`.
fn image_example(data: &Dataset, cfg: &RunConfig, role: Role, style: Style, c: usize, f: usize) -> Result<TrainingExample> {
    let class = data.rows[c].class;
    Ok(match role {
        Role::Base => TrainingExample { video: style.apply(&frame(&data.base[c], f)?), class, extra: None },
        Role::Ssr => {
            let low = upsample_frames(&frame(&data.base[c], f)?, cfg.data.base_factor)?;
            TrainingExample { video: style.apply(&frame(&data.full[c], f)?), class, extra: Some(style.apply(&low)) }
        }
        other => return Err(CliError::config(format!("image models are trained as base or ssr, not {other:?}"))),
    })
}

/// Random box covering at least one element on each axis.
fn random_span(n: usize, r: &mut Rng) -> std::ops::Range<usize> {
    let a = r.random_range(0..n);
    let b = r.random_range(a + 1..=n);
    a..b
}

/// One clip example for `role`, drawn from clip `c`.
fn video_example(data: &Dataset, cfg: &RunConfig, role: Role, c: usize, r: &mut Rng) -> Result<TrainingExample> {
    let class = data.rows[c].class;
    let clip = &data.base[c];
    let (t, h, w) = (clip.dim(0), clip.dim(2), clip.dim(3));
    let first = || -> Result<Tensor> { Ok(frame(clip, 0)?.reshape(&[3, h, w])?) };
    let with_pair = |video: Tensor, pair: stunet_core::diffusion::ConditioningPair| -> Result<TrainingExample> {
        Ok(TrainingExample { video, class, extra: Some(pair.extra_channels()?) })
    };
    match role {
        Role::Base => Ok(TrainingExample { video: clip.clone(), class, extra: None }),
        Role::Ssr => {
            let seg = cfg.video_training.ssr_segment;
            let start = r.random_range(0..=t - seg);
            let low = upsample_frames(&data.base[c].narrow(0, start, seg)?, cfg.data.base_factor)?;
            Ok(TrainingExample { video: data.full[c].narrow(0, start, seg)?, class, extra: Some(low) })
        }
        Role::Image2video => with_pair(clip.clone(), cond_image_to_video(&first()?, t)?),
        Role::Inpaint => {
            let region = box_region((t, h, w), random_span(t, r), random_span(h, r), random_span(w, r))?;
            with_pair(clip.clone(), cond_inpaint(clip, &region)?)
        }
        Role::Cinemagraph => {
            let region = box_region((1, h, w), 0..1, random_span(h, r), random_span(w, r))?.reshape(&[1, h, w])?;
            // Target: the clip inside the region, the still first frame outside.
            let still = stunet_core::applications::repeat_frames(&first()?, t)?;
            let inside = region.reshape(&[1, 1, h, w])?;
            let inside = Tensor::concat(&vec![&inside; t], 0)?;
            let target = stunet_core::diffusion::mask_channels(clip, &inside)?
                .add(&stunet_core::diffusion::mask_channels(&still, &inside.map(|v| 1.0 - v))?)?;
            let pair = cond_cinemagraph(&first()?, &region, t)?;
            with_pair(target, pair)
        }
    }
}

fn image_batch(data: &Dataset, cfg: &RunConfig, role: Role, style: Style, n: usize, r: &mut Rng) -> Result<Vec<TrainingExample>> {
    (0..n)
        .map(|_| {
            let c = r.random_range(0..data.len());
            let f = r.random_range(0..cfg.data.frames);
            image_example(data, cfg, role, style, c, f)
        })
        .collect()
}

fn video_batch(data: &Dataset, cfg: &RunConfig, role: Role, n: usize, r: &mut Rng) -> Result<Vec<TrainingExample>> {
    (0..n)
        .map(|_| {
            let c = r.random_range(0..data.len());
            video_example(data, cfg, role, c, r)
        })
        .collect()
}

fn mse(pred: &Tensor, target: &Tensor) -> stunet_core::Result<f64> {
    let d = pred.sub(target)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

/// Probe noise with timesteps spread evenly over the schedule (one per
/// stratum), so the probe loss estimates the training objective with low
/// variance.
fn draw_probe(batch: &[TrainingExample], schedule: &NoiseSchedule, r: &mut Rng) -> Result<Vec<NoisedExample>> {
    let n = batch.len();
    batch
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let t = ((2 * i + 1) * schedule.steps()) / (2 * n);
            let eps = Tensor::randn(ex.video.shape(), r);
            let x_t = q_sample(&ex.video, t, &eps, schedule)?;
            Ok(NoisedExample { t, eps, x_t })
        })
        .collect()
}

fn lr_at(tc: &TrainConfig, step: u64) -> f64 {
    if tc.lr_decay_steps == 0 {
        return tc.adam.lr;
    }
    tc.adam.lr * 0.1f64.powf((step - 1) as f64 / tc.lr_decay_steps as f64)
}

fn should_probe(step: u64, tc: &TrainConfig) -> bool {
    step % tc.probe_every == 0 || step == tc.steps
}

fn initial<W>(start: Start<W>, tc: &TrainConfig, seed: u64) -> Result<(W, TrainingState)> {
    match start {
        Start::Init(w) => Ok((w, TrainingState { step: 0, seed, adam: Adam::new(tc.adam) })),
        Start::Resume(w, state) => {
            if state.seed != seed {
                return Err(CliError::config(format!(
                    "checkpoint was trained with seed {}, resume requested seed {seed}",
                    state.seed
                )));
            }
            if state.step > tc.steps {
                return Err(CliError::config(format!("checkpoint is at step {}, beyond the {} configured", state.step, tc.steps)));
            }
            Ok((w, state))
        }
    }
}

fn non_finite(step: u64, e: stunet_core::Error) -> CliError {
    match e {
        stunet_core::Error::NonFinite(msg) => CliError::Numeric(format!("diverged at step {step}: {msg}")),
        other => other.into(),
    }
}

/// Trains an image model (`role` base or ssr) on single frames.
pub fn train_t2i(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
    role: Role,
    style: Style,
    start: Start<T2IWeights>,
) -> Result<Trained<T2IWeights>> {
    let tc = &cfg.t2i_training;
    let schedule = cfg.schedule.build()?;
    let (mut weights, mut state) = initial(start, tc, seed)?;
    let mut pr = stream(seed, &[PROBE_STREAM, T2I_STREAM]);
    let probe = image_batch(data, cfg, role, style, tc.probe_size, &mut pr)?;
    let probe_noise = draw_probe(&probe, &schedule, &mut pr)?;
    let eval = |w: &T2IWeights| -> Result<f64> {
        let loss = probe_loss(probe.len(), |i| {
            let (ex, nz) = (&probe[i], &probe_noise[i]);
            let pred = w.forward(&model_input(&nz.x_t, ex.extra.as_ref())?, &[nz.t], &[ex.class])?;
            mse(&pred, &nz.eps)
        })?;
        Ok(loss)
    };
    let (mut losses, mut probes) = (Vec::new(), Vec::new());
    if state.step == 0 {
        probes.push(ProbeRow { step: 0, probe_loss: eval(&weights)? });
    }
    while state.step < tc.steps {
        let step = state.step + 1;
        let mut r = stream(seed, &[T2I_STREAM, step]);
        let batch = image_batch(data, cfg, role, style, tc.batch, &mut r)?;
        state.adam.config.lr = lr_at(tc, step);
        let loss = t2i_train_step(&mut weights, &mut state.adam, &batch, &schedule, &mut r).map_err(|e| non_finite(step, e))?;
        state.step = step;
        losses.push(LossRow { step, loss });
        if should_probe(step, tc) {
            probes.push(ProbeRow { step, probe_loss: eval(&weights)? });
        }
    }
    Ok(Trained { weights, state, losses, probes })
}

/// Trains the temporal (and released spatial) tensors of a video model.
/// Frozen tensors are hashed before and after; any change is an error.
pub fn train_video(cfg: &RunConfig, data: &Dataset, seed: u64, role: Role, start: Start<STUNetWeights>) -> Result<Trained<STUNetWeights>> {
    let tc = &cfg.video_training;
    let schedule = cfg.schedule.build()?;
    let (mut weights, mut state) = initial(start, tc, seed)?;
    let frozen = weights.frozen_hash();
    let mut pr = stream(seed, &[PROBE_STREAM, VIDEO_STREAM]);
    let probe = video_batch(data, cfg, role, tc.probe_size, &mut pr)?;
    let probe_noise = draw_probe(&probe, &schedule, &mut pr)?;
    let eval = |w: &STUNetWeights| -> Result<f64> {
        let loss = probe_loss(probe.len(), |i| {
            let (ex, nz) = (&probe[i], &probe_noise[i]);
            let pred = w.forward(&model_input(&nz.x_t, ex.extra.as_ref())?, nz.t, ex.class)?;
            mse(&pred, &nz.eps)
        })?;
        Ok(loss)
    };
    let (mut losses, mut probes) = (Vec::new(), Vec::new());
    if state.step == 0 {
        probes.push(ProbeRow { step: 0, probe_loss: eval(&weights)? });
    }
    while state.step < tc.steps {
        let step = state.step + 1;
        let mut r = stream(seed, &[VIDEO_STREAM, step]);
        let batch = video_batch(data, cfg, role, tc.batch, &mut r)?;
        state.adam.config.lr = lr_at(tc, step);
        let loss =
            video_train_step(&mut weights, &mut state.adam, &batch, &schedule, &mut r).map_err(|e| non_finite(step, e))?;
        state.step = step;
        losses.push(LossRow { step, loss });
        if should_probe(step, tc) {
            probes.push(ProbeRow { step, probe_loss: eval(&weights)? });
        }
    }
    if weights.frozen_hash() != frozen {
        return Err(CliError::Integrity("frozen spatial tensors changed during video training".into()));
    }
    Ok(Trained { weights, state, losses, probes })
}

/// Draws one training batch exactly as step `step` of a video run would;
/// exposed so batches can be inspected.
pub fn video_batch_for_step(cfg: &RunConfig, data: &Dataset, seed: u64, role: Role, step: u64) -> Result<Vec<TrainingExample>> {
    let mut r = stream(seed, &[VIDEO_STREAM, step]);
    video_batch(data, cfg, role, cfg.video_training.batch, &mut r)
}

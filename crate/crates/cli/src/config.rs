//! JSON run configuration. Every section has defaults, so `{}` is a valid
//! config; unknown keys are rejected.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stunet_core::cascade_lab::{MotionKind, MotionSpec};
use stunet_core::diffusion::{make_schedule, NoiseSchedule, SamplerConfig, SamplerMode, ScheduleKind};
use stunet_core::stunet::STUNetConfig;
use stunet_core::train::AdamConfig;

use crate::error::{CliError, Result};
use crate::media::read_bytes;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: STUNetConfig,
    pub schedule: ScheduleConfig,
    pub t2i_training: TrainConfig,
    pub video_training: TrainConfig,
    pub sampling: SampleConfig,
    pub alias_lab: LabConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            // The temporal convolutions span almost the whole 16-frame clip.
            model: STUNetConfig { temporal_kernel: 15, ..STUNetConfig::default() },
            schedule: ScheduleConfig::default(),
            t2i_training: TrainConfig { batch: 8, ..TrainConfig::default() },
            video_training: TrainConfig { batch: 2, ..TrainConfig::default() },
            sampling: SampleConfig::default(),
            alias_lab: LabConfig::default(),
        }
    }
}

/// Synthetic clip dataset. Clips are rendered at `height × width`; the base
/// models work on `base_factor`-times smaller frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub base_factor: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { clips: 512, frames: 16, height: 32, width: 32, base_factor: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::Linear, steps: 1000 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(self.kind, self.steps)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    /// The learning rate falls tenfold every this many steps (0 keeps it
    /// constant). Depends on the step index only, so resumed runs follow the
    /// same curve.
    pub lr_decay_steps: u64,
    /// Fixed examples (with fixed noise) whose loss is tracked during training.
    pub probe_size: usize,
    pub probe_every: u64,
    /// Frames per training clip for the space-time SSR model.
    pub ssr_segment: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            adam: AdamConfig::default(),
            lr_decay_steps: 2000,
            probe_size: 16,
            probe_every: 250,
            ssr_segment: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub sampler: SamplerConfig,
    pub class: usize,
    /// Segment length and stride of the super-resolution window plan.
    pub segment: usize,
    pub stride: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            sampler: SamplerConfig { mode: SamplerMode::Ddim, n_steps: 25 },
            class: 0,
            segment: stunet_core::multidiffusion::DEFAULT_SEGMENT,
            stride: stunet_core::multidiffusion::DEFAULT_STRIDE,
        }
    }
}

/// Sweep of the aliasing lab: every motion is run through every
/// `(stride, window)` cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub motions: Vec<MotionSpec>,
    pub cascades: Vec<(usize, usize)>,
    /// Row of the exported X-T slices; defaults to the frame centre.
    pub slice_row: Option<usize>,
}

impl Default for LabConfig {
    fn default() -> Self {
        let motion = |frequency| MotionSpec {
            kind: MotionKind::Sinusoid,
            amplitude: 5.0,
            frequency,
            phase: 0.3,
            size: 6.0,
            direction: 0.0,
        };
        LabConfig {
            frames: 33,
            height: 16,
            width: 24,
            motions: vec![motion(0.05), motion(0.1), motion(0.2), motion(0.4), MotionSpec { direction: PI / 2.0, ..motion(0.4) }],
            cascades: vec![(1, 2), (2, 2), (4, 2), (4, 3)],
            slice_row: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` if given, otherwise returns the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let bytes = read_bytes(p)?;
                serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.data;
        if d.clips == 0 || d.frames == 0 || d.base_factor == 0 {
            return Err(CliError::config("data needs at least one clip, one frame and a positive base_factor"));
        }
        if d.height % d.base_factor != 0 || d.width % d.base_factor != 0 {
            return Err(CliError::config(format!(
                "{}x{} frames are not divisible by base_factor {}",
                d.height, d.width, d.base_factor
            )));
        }
        self.model.t2i.check_spatial(d.height / d.base_factor, d.width / d.base_factor)?;
        self.model.t2i.check_spatial(d.height, d.width)?;
        self.model.check_frames(d.frames)?;
        if self.model.t2i.num_classes < crate::dataset::CLASSES {
            return Err(CliError::config(format!(
                "model has {} classes but the dataset uses {}",
                self.model.t2i.num_classes,
                crate::dataset::CLASSES
            )));
        }
        for (name, t) in [("t2i_training", &self.t2i_training), ("video_training", &self.video_training)] {
            if t.batch == 0 || t.probe_size == 0 || t.probe_every == 0 {
                return Err(CliError::config(format!("{name}: batch, probe_size and probe_every must be positive")));
            }
        }
        let seg = self.video_training.ssr_segment;
        if seg == 0 || seg > d.frames {
            return Err(CliError::config(format!("ssr_segment {seg} must be in 1..={}", d.frames)));
        }
        self.model.check_frames(seg)?;
        if self.sampling.class >= crate::dataset::CLASSES {
            return Err(CliError::config(format!("sampling class {} is not a dataset class", self.sampling.class)));
        }
        let lab = &self.alias_lab;
        for m in &lab.motions {
            m.validate()?;
            if m.kind != MotionKind::Sinusoid {
                return Err(CliError::config(format!("alias lab motions must be sinusoids, got {}", m.kind)));
            }
        }
        for &(s, w) in &lab.cascades {
            if s == 0 || w < 2 || lab.frames == 0 || (lab.frames - 1) % s != 0 {
                return Err(CliError::config(format!(
                    "cascade (stride {s}, window {w}) does not fit {} frames",
                    lab.frames
                )));
            }
        }
        if let Some(r) = lab.slice_row {
            if r >= lab.height {
                return Err(CliError::config(format!("slice_row {r} is outside {} rows", lab.height)));
            }
        }
        Ok(())
    }

    pub fn base_size(&self) -> (usize, usize) {
        (self.data.height / self.data.base_factor, self.data.width / self.data.base_factor)
    }
}

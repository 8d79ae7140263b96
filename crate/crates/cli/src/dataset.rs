//! Synthetic class-labelled clips: a coloured blob moving over a static
//! textured background.
//!
//! The class fixes the motion kind and direction; amplitude, frequency,
//! phase, size, colours and texture are drawn per clip from its own stream,
//! so every clip can be regenerated independently.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use stunet_core::cascade_lab::{render_frame, MotionKind, MotionSpec};
use stunet_core::multidiffusion::downsample_frames;
use stunet_core::rng::{stream, Rng};
use stunet_core::Tensor;

use crate::config::DataConfig;
use crate::error::{CliError, Result};
use crate::media::{create_dir, read_csv, read_vid, write_csv, write_vid};

pub const CLASSES: usize = 4;
pub const MANIFEST: &str = "manifest.csv";
const DATA_STREAM: u64 = 0x4441_5441;

/// Motion kind and direction of every class.
pub const CLASS_MOTIONS: [(MotionKind, f64); CLASSES] =
    [(MotionKind::Sinusoid, 0.0), (MotionKind::Sinusoid, PI / 2.0), (MotionKind::Linear, 0.0), (MotionKind::Bounce, PI / 2.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub file: String,
    pub class: usize,
    pub kind: MotionKind,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub size: f64,
    pub direction: f64,
}

impl ManifestRow {
    pub fn motion(&self) -> MotionSpec {
        MotionSpec {
            kind: self.kind,
            amplitude: self.amplitude,
            frequency: self.frequency,
            phase: self.phase,
            size: self.size,
            direction: self.direction,
        }
    }
}

fn draw_motion(class: usize, cfg: &DataConfig, r: &mut Rng) -> MotionSpec {
    let (kind, direction) = CLASS_MOTIONS[class];
    let size = r.random_range(5.0..7.0) * cfg.height.min(cfg.width) as f64 / 32.0;
    let half = cfg.height.min(cfg.width) as f64 / 2.0;
    let max_amp = (half - size - 0.5).max(0.0);
    MotionSpec {
        kind,
        amplitude: r.random_range(0.4..0.9) * max_amp,
        // A linear sweep covers its full range once over the clip.
        frequency: match kind {
            MotionKind::Linear => r.random_range(0.5..1.0) / (cfg.frames.max(2) - 1) as f64,
            _ => r.random_range(0.03..0.1),
        },
        phase: r.random_range(0.0..TAU),
        size,
        direction,
    }
}

/// Static texture: independent uniform noise per channel and per
/// `cell × cell` block of pixels.
fn texture(h: usize, w: usize, cell: usize, r: &mut Rng) -> Vec<f64> {
    let (ch, cw) = (h / cell, w / cell);
    let cells: Vec<f64> = (0..3 * ch * cw).map(|_| r.random_range(-1.0..1.0)).collect();
    (0..3 * h * w)
        .map(|i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            cells[(c * ch + y / cell) * cw + x / cell]
        })
        .collect()
}

/// Renders clip `index` of the dataset for `seed` as `[T, 3, H, W]` with
/// values in `[-1, 1]`.
pub fn render_clip(cfg: &DataConfig, seed: u64, index: usize) -> Result<(ManifestRow, Tensor)> {
    let class = index % CLASSES;
    let mut r = stream(seed, &[DATA_STREAM, index as u64]);
    let motion = draw_motion(class, cfg, &mut r);
    let (h, w) = (cfg.height, cfg.width);
    let color: Vec<f64> = (0..3).map(|_| r.random_range(0.2..1.0)).collect();
    let level = r.random_range(-0.5..-0.1);
    let bg: Vec<f64> = texture(h, w, cfg.base_factor, &mut r).into_iter().map(|v| level + 0.6 * v).collect();
    let mut data = Vec::with_capacity(cfg.frames * 3 * h * w);
    for f in 0..cfg.frames {
        let blob = render_frame(&motion, f as f64, h, w)?;
        for (i, (&a, &b)) in blob.data().iter().zip(&bg).enumerate() {
            let c = color[i / (h * w)];
            data.push((b + (c - b) * a).clamp(-1.0, 1.0));
        }
    }
    let row = ManifestRow {
        file: format!("clip_{index:05}.stvf"),
        class,
        kind: motion.kind,
        amplitude: motion.amplitude,
        frequency: motion.frequency,
        phase: motion.phase,
        size: motion.size,
        direction: motion.direction,
    };
    Ok((row, Tensor::new(vec![cfg.frames, 3, h, w], data)?))
}

/// Writes every clip plus `manifest.csv` into `dir`.
pub fn generate(cfg: &DataConfig, seed: u64, dir: &Path) -> Result<Vec<ManifestRow>> {
    create_dir(dir)?;
    let mut rows = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let (row, clip) = render_clip(cfg, seed, i)?;
        write_vid(&dir.join(&row.file), &clip)?;
        rows.push(row);
    }
    write_csv(&dir.join(MANIFEST), &rows)?;
    Ok(rows)
}

/// A loaded dataset at full and base resolution.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub full: Vec<Tensor>,
    pub base: Vec<Tensor>,
}

impl Dataset {
    pub fn load(dir: &Path, cfg: &DataConfig) -> Result<Self> {
        let rows: Vec<ManifestRow> = read_csv(&dir.join(MANIFEST))?;
        if rows.is_empty() {
            return Err(CliError::config(format!("{} lists no clips", dir.join(MANIFEST).display())));
        }
        let mut full = Vec::with_capacity(rows.len());
        let mut base = Vec::with_capacity(rows.len());
        for row in &rows {
            if row.class >= CLASSES {
                return Err(CliError::config(format!("{}: class {} out of range", row.file, row.class)));
            }
            let clip = read_vid(&dir.join(&row.file))?;
            let expect = [cfg.frames, 3, cfg.height, cfg.width];
            if clip.shape() != expect {
                return Err(CliError::config(format!(
                    "{}: clip is {:?}, config expects {expect:?}",
                    row.file,
                    clip.shape()
                )));
            }
            base.push(downsample_frames(&clip, cfg.base_factor)?);
            full.push(clip);
        }
        Ok(Dataset { dir: dir.to_path_buf(), rows, full, base })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

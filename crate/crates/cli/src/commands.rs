//! Subcommands of the `stunet` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng as _;
use serde::Serialize;
use stunet_core::applications::{
    border_region, box_region, cond_cinemagraph, cond_image_to_video, cond_inpaint, install_style, sdedit_video,
    StylePair, DEFAULT_SDEDIT_STRENGTH,
};
use stunet_core::cascade_lab::{
    alias_ambiguity, consistency_metric, render_video, simulate_cascade, xt_slice, CascadeSpec, MotionKind,
};
use stunet_core::diffusion::{sample, ConditioningPair, VideoDenoiser};
use stunet_core::multidiffusion::{downsample_frames, plan_windows, ssr_multidiffusion_sample, WindowPlan};
use stunet_core::rng::stream;
use stunet_core::stunet::{STUNetConfig, STUNetWeights, T2IWeights};
use stunet_core::Tensor;

use crate::checkpoint::{Checkpoint, Model, Role, TrainingState};
use crate::config::RunConfig;
use crate::dataset::{generate, Dataset};
use crate::error::{CliError, Result};
use crate::media::{create_dir, encode_pgm_tensor, encode_ppm, read_vid, write_bytes, write_csv, write_vid};
use crate::training::{train_t2i, train_video, Start, Style, Trained};

pub const MODEL_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const SAMPLE_FILE: &str = "sample.stvf";
pub const BASE_SAMPLE_FILE: &str = "base.stvf";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SSR_SEED_STREAM: u64 = 0x7373_7200;

#[derive(Debug, Parser)]
#[command(name = "stunet", version, about = "Toy space-time U-Net video diffusion pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic clip dataset.
    GenData(Common),
    /// Train the image model on single frames.
    TrainT2i(TrainT2iArgs),
    /// Inflate an image model and train its temporal layers.
    TrainVideo(TrainVideoArgs),
    /// Generate a video (optionally super-resolved, stylised, edited or conditioned).
    Sample(SampleArgs),
    /// One stylised sample per interpolation coefficient.
    StyleSweep(StyleSweepArgs),
    /// Temporal-aliasing sweep over keyframe cascades.
    AliasLab(Common),
}

#[derive(Debug, Args)]
pub struct TrainT2iArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Train the super-resolution image model instead of the base model.
    #[arg(long)]
    pub ssr: bool,
    /// Train on style-transformed frames.
    #[arg(long, value_enum, default_value_t = Style::None)]
    pub style: Style,
    /// Start from the weights of an image checkpoint.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue a run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainVideoArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Image checkpoint to inflate, or a base video checkpoint to fine-tune
    /// for a conditional task.
    #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
    pub from: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Role::Base)]
    pub task: Role,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    /// Base video checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Class label; defaults to the configured sampling class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Space-time SSR checkpoint: super-resolve with temporal MultiDiffusion.
    #[arg(long)]
    pub ssr: Option<PathBuf>,
    /// Style-fine-tuned image checkpoint to interpolate into the spatial weights.
    #[arg(long, requires = "alpha")]
    pub style: Option<PathBuf>,
    #[arg(long, requires = "style")]
    pub alpha: Option<f64>,
    /// Input video to edit with SDEdit.
    #[arg(long)]
    pub sdedit: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SDEDIT_STRENGTH, requires = "sdedit")]
    pub strength: f64,
    /// Conditioning video for conditional checkpoints (frame 0 is the image).
    #[arg(long)]
    pub cond: Option<PathBuf>,
    /// Region to generate: `f0:f1,y0:y1,x0:x1` for inpainting,
    /// `y0:y1,x0:x1` for cinemagraphs.
    #[arg(long, conflicts_with = "border")]
    pub region: Option<String>,
    /// Outpainting: regenerate a border of this many pixels.
    #[arg(long)]
    pub border: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StyleSweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.625, 0.75, 0.875, 1.0])]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub class: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::TrainT2i(a) => cmd_train_t2i(&a),
        Command::TrainVideo(a) => cmd_train_video(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::StyleSweep(a) => cmd_style_sweep(&a),
        Command::AliasLab(c) => alias_lab(&c),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref())?;
    generate(&cfg.data, c.seed, &c.out)?;
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return Err(CliError::config(format!("{} is not a directory", path.display())));
    }
    Ok(())
}

fn write_run<W>(out: &Path, role: Role, trained: &Trained<W>, model: Model) -> Result<()> {
    create_dir(out)?;
    let ck = Checkpoint { role, model, training: Some(trained.state.clone()) };
    ck.save(&out.join(MODEL_FILE))?;
    write_csv(&out.join(LOSS_FILE), &trained.losses)?;
    write_csv(&out.join(PROBE_FILE), &trained.probes)
}

fn ssr_image_config(cfg: &RunConfig) -> STUNetConfig {
    let mut model = cfg.model.clone();
    model.t2i.in_channels = 6;
    model
}

fn cmd_train_t2i(a: &TrainT2iArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    require_dir(&a.data)?;
    let data = Dataset::load(&a.data, &cfg.data)?;
    let role = if a.ssr { Role::Ssr } else { Role::Base };
    let expected = if a.ssr { ssr_image_config(&cfg).t2i } else { cfg.model.t2i.clone() };
    let load = |path: &Path| -> Result<(T2IWeights, Option<TrainingState>)> {
        let (r, w, state) = Checkpoint::load(path)?.into_t2i(path)?;
        if r != role {
            return Err(CliError::config(format!("{} is a {r:?} image model, this run trains {role:?}", path.display())));
        }
        if w.config != expected {
            return Err(CliError::config(format!("{} was built with a different model config", path.display())));
        }
        Ok((w, state))
    };
    let start = if let Some(p) = &a.resume {
        let (w, state) = load(p)?;
        let state = state.ok_or_else(|| CliError::config(format!("{} has no training state to resume", p.display())))?;
        Start::Resume(w, state)
    } else if let Some(p) = &a.init {
        Start::Init(load(p)?.0)
    } else {
        Start::Init(T2IWeights::build(expected.clone(), a.common.seed)?)
    };
    let trained = train_t2i(&cfg, &data, a.common.seed, role, a.style, start)?;
    write_run(&a.common.out, role, &trained, Model::T2i(trained.weights.clone()))
}

/// Initial video weights for `task` from an image or base video checkpoint.
fn video_start(cfg: &RunConfig, from: &Path, task: Role, seed: u64) -> Result<STUNetWeights> {
    let ck = Checkpoint::load(from)?;
    let wrong = |what: &str| CliError::config(format!("{} {what}", from.display()));
    let image_role = if task == Role::Ssr { Role::Ssr } else { Role::Base };
    match ck.model {
        Model::T2i(t2i) => {
            if ck.role != image_role {
                return Err(wrong(&format!("is a {:?} image model, task {task:?} needs {image_role:?}", ck.role)));
            }
            let config = STUNetConfig { t2i: t2i.config.clone(), ..cfg.model.clone() };
            let video = STUNetWeights::inflate(&t2i, config, seed)?;
            Ok(if task.is_masked() { video.expand_input_conv()? } else { video })
        }
        Model::Video(video) => {
            if ck.role != Role::Base || !task.is_masked() {
                return Err(wrong(&format!(
                    "is a {:?} video model; only base video models can be fine-tuned, and only for conditional tasks",
                    ck.role
                )));
            }
            Ok(video.expand_input_conv()?)
        }
    }
}

fn cmd_train_video(a: &TrainVideoArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    require_dir(&a.data)?;
    let data = Dataset::load(&a.data, &cfg.data)?;
    let seed = a.common.seed;
    let (role, start) = match (&a.resume, &a.from) {
        (Some(p), _) => {
            let (role, w, state) = Checkpoint::load(p)?.into_video(p)?;
            if role != a.task {
                return Err(CliError::config(format!("{} was trained for {role:?}, not {:?}", p.display(), a.task)));
            }
            let state = state.ok_or_else(|| CliError::config(format!("{} has no training state to resume", p.display())))?;
            (role, Start::Resume(w, state))
        }
        (None, Some(from)) => (a.task, Start::Init(video_start(&cfg, from, a.task, seed)?)),
        (None, None) => return Err(CliError::config("train-video needs --from or --resume")),
    };
    let trained = train_video(&cfg, &data, seed, role, start)?;
    write_run(&a.common.out, role, &trained, Model::Video(trained.weights.clone()))
}

fn parse_range(s: &str) -> Result<std::ops::Range<usize>> {
    let bad = || CliError::config(format!("'{s}' is not a range like 2:5"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a >= b {
        return Err(bad());
    }
    Ok(a..b)
}

/// Writes the video plus one PPM per frame and the centre-row X-T slice.
fn write_video_outputs(dir: &Path, name: &str, video: &Tensor) -> Result<()> {
    write_vid(&dir.join(name), video)?;
    let stem = name.trim_end_matches(".stvf");
    let (t, h, w) = (video.dim(0), video.dim(2), video.dim(3));
    for f in 0..t {
        let frame = video.narrow(0, f, 1)?.reshape(&[3, h, w])?;
        write_bytes(&dir.join(format!("{stem}_frame_{f:03}.ppm")), &encode_ppm(&frame, -1.0, 1.0)?)?;
    }
    write_bytes(&dir.join(format!("{stem}_xt.pgm")), &encode_pgm_tensor(&xt_slice(video, h / 2)?, -1.0, 1.0)?)
}

/// Reads a video for the base model, downsampling full-resolution input.
fn base_input(cfg: &RunConfig, path: &Path) -> Result<Tensor> {
    let v = read_vid(path)?;
    let (h, w) = cfg.base_size();
    let t = cfg.data.frames;
    match v.shape() {
        [vt, 3, vh, vw] if *vt == t && (*vh, *vw) == (h, w) => Ok(v),
        [vt, 3, vh, vw] if *vt == t && (*vh, *vw) == (cfg.data.height, cfg.data.width) => {
            Ok(downsample_frames(&v, cfg.data.base_factor)?)
        }
        s => Err(CliError::config(format!(
            "{} is {s:?}; expected [{t}, 3, {h}, {w}] or [{t}, 3, {}, {}]",
            path.display(),
            cfg.data.height,
            cfg.data.width
        ))),
    }
}

fn conditioning(cfg: &RunConfig, role: Role, a: &SampleArgs) -> Result<Option<ConditioningPair>> {
    if !role.is_masked() {
        if a.cond.is_some() || a.region.is_some() || a.border.is_some() {
            return Err(CliError::config(format!("a {role:?} checkpoint takes no --cond/--region/--border")));
        }
        return Ok(None);
    }
    let path = a.cond.as_ref().ok_or_else(|| CliError::config(format!("a {role:?} checkpoint needs --cond")))?;
    let video = base_input(cfg, path)?;
    let (t, h, w) = (video.dim(0), video.dim(2), video.dim(3));
    let first = video.narrow(0, 0, 1)?.reshape(&[3, h, w])?;
    let parts: Vec<&str> = a.region.as_deref().map(|r| r.split(',').collect()).unwrap_or_default();
    let pair = match role {
        Role::Image2video => cond_image_to_video(&first, t)?,
        Role::Inpaint => {
            let region = match (a.border, parts.as_slice()) {
                (Some(m), _) => border_region((t, h, w), m)?,
                (None, [f, y, x]) => box_region((t, h, w), parse_range(f)?, parse_range(y)?, parse_range(x)?)?,
                _ => return Err(CliError::config("inpainting needs --region f0:f1,y0:y1,x0:x1 or --border N")),
            };
            cond_inpaint(&video, &region)?
        }
        Role::Cinemagraph => {
            let [y, x] = parts.as_slice() else {
                return Err(CliError::config("cinemagraphs need --region y0:y1,x0:x1"));
            };
            let region = box_region((1, h, w), 0..1, parse_range(y)?, parse_range(x)?)?.reshape(&[1, h, w])?;
            cond_cinemagraph(&first, &region, t)?
        }
        Role::Base | Role::Ssr => unreachable!("not a masked role"),
    };
    Ok(Some(pair))
}

fn load_style(path: &Path, weights: &STUNetWeights, alpha: f64) -> Result<STUNetWeights> {
    let (role, style, _) = Checkpoint::load(path)?.into_t2i(path)?;
    if role != Role::Base {
        return Err(CliError::config(format!("{} is a {role:?} image model, styles must be base models", path.display())));
    }
    let pair = StylePair::new(weights.spatial.clone(), style.tensors, alpha)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(install_style(weights, &pair)?)
}

/// Base (and optionally SSR) generation for an already loaded model.
fn generate_video(
    cfg: &RunConfig,
    weights: &STUNetWeights,
    role: Role,
    a: &SampleArgs,
    class: usize,
    seed: u64,
) -> Result<(Tensor, Option<Tensor>)> {
    let schedule = cfg.schedule.build()?;
    let sampler = cfg.sampling.sampler;
    let model = VideoDenoiser { weights, class };
    let (h, w) = cfg.base_size();
    let shape = [cfg.data.frames, 3, h, w];
    let pair = conditioning(cfg, role, a)?;
    let extra = pair.as_ref().map(|p| p.extra_channels()).transpose()?;
    let base = match &a.sdedit {
        Some(path) => {
            if pair.is_some() {
                return Err(CliError::config("--sdedit works with unconditional base checkpoints only"));
            }
            let input = base_input(cfg, path)?;
            sdedit_video(&model, &schedule, sampler, &input, None, a.strength, seed)?
        }
        None => sample(&model, &schedule, sampler, &shape, extra.as_ref(), seed)?,
    };
    let Some(ssr_path) = &a.ssr else { return Ok((base, None)) };
    let (ssr_role, ssr, _) = Checkpoint::load(ssr_path)?.into_video(ssr_path)?;
    if ssr_role != Role::Ssr {
        return Err(CliError::config(format!("{} is a {ssr_role:?} model, not an SSR model", ssr_path.display())));
    }
    let plan = window_plan(cfg)?;
    let ssr_seed = stream(seed, &[SSR_SEED_STREAM]).random::<u64>();
    let model = VideoDenoiser { weights: &ssr, class };
    let high = ssr_multidiffusion_sample(&model, &base, cfg.data.base_factor, &plan, &schedule, sampler, ssr_seed)?;
    Ok((base, Some(high)))
}

fn window_plan(cfg: &RunConfig) -> Result<WindowPlan> {
    let (t, seg, stride) = (cfg.data.frames, cfg.sampling.segment, cfg.sampling.stride);
    if seg >= t {
        return Ok(WindowPlan::from_starts(t, t, vec![0])?);
    }
    plan_windows(t, seg, stride).map_err(|e| CliError::config(format!("SSR window plan for {t} frames: {e}")))
}

fn load_sampling_model(cfg: &RunConfig, a: &SampleArgs) -> Result<(Role, STUNetWeights, usize)> {
    let (role, weights, _) = Checkpoint::load(&a.ckpt)?.into_video(&a.ckpt)?;
    if role == Role::Ssr {
        return Err(CliError::config(format!("{} is an SSR model; pass it with --ssr", a.ckpt.display())));
    }
    let class = a.class.unwrap_or(cfg.sampling.class);
    if class >= weights.config.t2i.num_classes {
        return Err(CliError::config(format!("class {class} outside the model's {} classes", weights.config.t2i.num_classes)));
    }
    Ok((role, weights, class))
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let (role, mut weights, class) = load_sampling_model(&cfg, a)?;
    if let (Some(style), Some(alpha)) = (&a.style, a.alpha) {
        weights = load_style(style, &weights, alpha)?;
    }
    let (base, high) = generate_video(&cfg, &weights, role, a, class, a.common.seed)?;
    create_dir(&a.common.out)?;
    match high {
        Some(high) => {
            write_video_outputs(&a.common.out, BASE_SAMPLE_FILE, &base)?;
            write_video_outputs(&a.common.out, SAMPLE_FILE, &high)
        }
        None => write_video_outputs(&a.common.out, SAMPLE_FILE, &base),
    }
}

fn cmd_style_sweep(a: &StyleSweepArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let sample_args = SampleArgs {
        common: Common { config: None, seed: a.common.seed, out: a.common.out.clone() },
        ckpt: a.ckpt.clone(),
        class: a.class,
        ssr: None,
        style: None,
        alpha: None,
        sdedit: None,
        strength: DEFAULT_SDEDIT_STRENGTH,
        cond: None,
        region: None,
        border: None,
    };
    let (role, weights, class) = load_sampling_model(&cfg, &sample_args)?;
    if role != Role::Base {
        return Err(CliError::config(format!("style sweeps need a base checkpoint, {} is {role:?}", a.ckpt.display())));
    }
    create_dir(&a.common.out)?;
    for &alpha in &a.alphas {
        let styled = load_style(&a.style, &weights, alpha)?;
        let (video, _) = generate_video(&cfg, &styled, role, &sample_args, class, a.common.seed)?;
        let dir = a.common.out.join(format!("alpha_{alpha:.3}"));
        create_dir(&dir)?;
        write_video_outputs(&dir, SAMPLE_FILE, &video)?;
    }
    Ok(())
}

/// One row of the aliasing-lab metric table.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LabRow {
    pub kind: MotionKind,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub size: f64,
    pub direction: f64,
    pub s: usize,
    pub w: usize,
    pub metric: f64,
    pub ambiguity_count: usize,
}

fn alias_lab(c: &Common) -> Result<()> {
    let cfg = RunConfig::load(c.config.as_deref())?;
    let lab = &cfg.alias_lab;
    create_dir(&c.out)?;
    let row_of_slice = lab.slice_row.unwrap_or(lab.height / 2);
    let mut rows = Vec::new();
    for (i, m) in lab.motions.iter().enumerate() {
        let truth = render_video(m, lab.frames, lab.height, lab.width)?;
        for (j, &(s, w)) in lab.cascades.iter().enumerate() {
            let run = simulate_cascade(&truth, m, CascadeSpec { stride: s, window: w }, c.seed)?;
            rows.push(LabRow {
                kind: m.kind,
                amplitude: m.amplitude,
                frequency: m.frequency,
                phase: m.phase,
                size: m.size,
                direction: m.direction,
                s,
                w,
                metric: consistency_metric(&run.video)?,
                ambiguity_count: alias_ambiguity(m, s)?.len(),
            });
            let slice = xt_slice(&run.video, row_of_slice)?;
            write_bytes(&c.out.join(format!("slice_m{i:02}_c{j:02}.pgm")), &encode_pgm_tensor(&slice, 0.0, 1.0)?)?;
        }
    }
    write_csv(&c.out.join(METRICS_FILE), &rows)
}

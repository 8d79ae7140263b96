use stunet_core::diffusion::{draw_noised, make_schedule, ScheduleKind, TrainingExample};
use stunet_core::numerics::{grad_check, Tape};
use stunet_core::rng::stream;
use stunet_core::stunet::{build_ssr, STUNetConfig, STUNetWeights, T2IConfig, T2IWeights};
use stunet_core::train::{video_train_step, Adam, AdamConfig};
use stunet_core::Tensor;

fn tiny() -> STUNetConfig {
    STUNetConfig {
        t2i: T2IConfig { base_channels: 4, cond_dim: 8, num_classes: 3, ..T2IConfig::default() },
        temporal_kernel: 3,
        temporal_levels: vec![0],
        attn_blocks_coarsest: 1,
    }
}

/// Temporal tensors replaced by random values so that no gradient path is
/// switched off by the zero-initialised projections.
fn perturbed(cfg: &STUNetConfig, seed: u64) -> STUNetWeights {
    let t2i = T2IWeights::build(cfg.t2i.clone(), seed).unwrap();
    let mut w = STUNetWeights::inflate(&t2i, cfg.clone(), seed + 1).unwrap();
    let mut r = stream(seed, &[2]);
    for t in w.temporal.values_mut() {
        *t = Tensor::randn(t.shape(), &mut r).scale(0.3);
    }
    w
}

fn constant_clip(frame: &Tensor, t: usize) -> Tensor {
    let s = frame.shape();
    let f = frame.reshape(&[1, s[0], s[1], s[2]]).unwrap();
    Tensor::concat(&vec![&f; t], 0).unwrap()
}

#[test]
fn composed_stunet_loss_gradients() {
    let cfg = tiny();
    let w = perturbed(&cfg, 3);
    let x = Tensor::randn(&[4, 3, 4, 4], &mut stream(4, &[]));
    let target = Tensor::randn(&[4, 3, 4, 4], &mut stream(5, &[]));
    let names = ["enc.0.tconv.conv.weight", "mid.attn.0.q.weight", "enc.0.tdown.weight", "dec.0.tup.weight", "dec.0.tconv.proj.weight"];
    for name in names {
        let p = w.temporal[name].clone();
        let err = grad_check(
            |tape: &mut Tape, v| {
                let mut bound = w.bind(tape, false);
                bound.insert(name, v);
                let xv = tape.constant(x.clone());
                let out = w.forward_on_tape(tape, &bound, xv, 17, 1)?;
                let tv = tape.constant(target.clone());
                tape.mse(out, tv)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{name}: relative error {err:e}");
    }
    let err = grad_check(
        |tape: &mut Tape, v| {
            let bound = w.bind(tape, false);
            let out = w.forward_on_tape(tape, &bound, v, 3, 2)?;
            let tv = tape.constant(target.clone());
            tape.mse(out, tv)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "input: relative error {err:e}");
}

#[test]
fn identity_at_init_on_constant_clips() {
    let cfg = STUNetConfig { temporal_levels: vec![0], ..STUNetConfig::default() };
    let t2i = T2IWeights::build(cfg.t2i.clone(), 11).unwrap();
    let w = STUNetWeights::inflate(&t2i, cfg, 12).unwrap();
    let mut r = stream(13, &[]);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let frame = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut r);
        let t = 999 * i / 19;
        let class = i % 5;
        let out = w.forward(&constant_clip(&frame, 4), t, class).unwrap();
        let reference = t2i.forward(&frame.reshape(&[1, 3, 8, 8]).unwrap(), &[t], &[class]).unwrap();
        for f in 0..4 {
            worst = worst.max(out.narrow(0, f, 1).unwrap().max_abs_diff(&reference).unwrap());
        }
    }
    assert!(worst < 1e-6, "max deviation {worst:e}");
}

#[test]
fn ssr_identity_at_init() {
    let cfg = STUNetConfig::default();
    let (image, video) = build_ssr(&cfg, 21).unwrap();
    assert_eq!(video.config.t2i.in_channels, 6);
    let frame = Tensor::uniform(&[6, 8, 8], -1.0, 1.0, &mut stream(22, &[]));
    let out = video.forward(&constant_clip(&frame, 4), 500, 0).unwrap();
    assert_eq!(out.shape(), &[4, 3, 8, 8]);
    let reference = image.forward(&frame.reshape(&[1, 6, 8, 8]).unwrap(), &[500], &[0]).unwrap();
    for f in 0..4 {
        assert!(out.narrow(0, f, 1).unwrap().max_abs_diff(&reference).unwrap() < 1e-6);
    }
    let (_, again) = build_ssr(&cfg, 21).unwrap();
    assert_eq!(again.spatial_hash(), video.spatial_hash());
    assert_eq!(again.temporal_hash(), video.temporal_hash());
}

#[test]
fn output_shape_for_eight_frames() {
    let cfg = STUNetConfig::default();
    let w = STUNetWeights::inflate(&T2IWeights::build(cfg.t2i.clone(), 1).unwrap(), cfg, 2).unwrap();
    let x = Tensor::randn(&[8, 3, 16, 16], &mut stream(3, &[]));
    assert_eq!(w.forward(&x, 10, 0).unwrap().shape(), &[8, 3, 16, 16]);
}

#[test]
fn training_only_moves_temporal_tensors() {
    let cfg = tiny();
    let t2i = T2IWeights::build(cfg.t2i.clone(), 31).unwrap();
    let mut w = STUNetWeights::inflate(&t2i, cfg, 32).unwrap();
    let (spatial, temporal) = (w.spatial_hash(), w.temporal_hash());
    let schedule = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let mut r = stream(33, &[]);
    let batch: Vec<TrainingExample> = (0..2)
        .map(|i| TrainingExample { video: Tensor::uniform(&[4, 3, 4, 4], -1.0, 1.0, &mut r), class: i, extra: None })
        .collect();
    for _ in 0..3 {
        video_train_step(&mut w, &mut adam, &batch, &schedule, &mut r).unwrap();
    }
    assert_eq!(w.spatial_hash(), spatial);
    assert_ne!(w.temporal_hash(), temporal);
    // The zero-initialised projections must have left zero after training.
    assert!(w.temporal["enc.0.tconv.proj.weight"].max_abs() > 0.0);
    assert!(w.temporal["mid.attn.0.proj.weight"].max_abs() > 0.0);
}

#[test]
fn conditional_expansion_trains_input_conv() {
    let cfg = tiny();
    let t2i = T2IWeights::build(cfg.t2i.clone(), 41).unwrap();
    let base = STUNetWeights::inflate(&t2i, cfg, 42).unwrap();
    let mut w = base.expand_input_conv().unwrap();
    let frozen = w.frozen_hash();
    let schedule = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let mut r = stream(43, &[]);
    let video = Tensor::uniform(&[4, 3, 4, 4], -1.0, 1.0, &mut r);
    let extra = Tensor::concat(&[&video, &Tensor::full(&[4, 1, 4, 4], 1.0)], 1).unwrap();
    let batch = vec![TrainingExample { video, class: 0, extra: Some(extra) }];
    video_train_step(&mut w, &mut adam, &batch, &schedule, &mut r).unwrap();
    let grown = &w.spatial["in_conv.weight"];
    let new_slices = grown.narrow(1, 3, 4).unwrap();
    assert!(new_slices.max_abs() > 0.0, "no update reached the new input channels");
    assert_eq!(w.frozen_hash(), frozen);
}

#[test]
fn coarsest_level_is_compressed() {
    let cfg = STUNetConfig {
        t2i: T2IConfig { levels: 3, base_channels: 4, channel_mult: vec![1, 1, 2], ..T2IConfig::default() },
        temporal_kernel: 3,
        temporal_levels: vec![0, 1],
        attn_blocks_coarsest: 1,
    };
    let w = STUNetWeights::inflate(&T2IWeights::build(cfg.t2i.clone(), 1).unwrap(), cfg, 2).unwrap();
    let (t, h, wd) = (8, 16, 16);
    let coarse = w.coarsest_elements(t, h, wd).unwrap();
    let input = t * 3 * h * wd;
    assert!(coarse * 16 < input, "coarsest {coarse} vs input {input}");
}

#[test]
fn noised_draw_is_seeded() {
    let schedule = make_schedule(ScheduleKind::Cosine, 50).unwrap();
    let x = Tensor::zeros(&[2, 3, 4, 4]);
    let a = draw_noised(&x, &schedule, &mut stream(1, &[])).unwrap();
    let b = draw_noised(&x, &schedule, &mut stream(1, &[])).unwrap();
    assert_eq!(a.t, b.t);
    assert!(a.x_t.bit_eq(&b.x_t));
}

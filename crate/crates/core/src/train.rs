//! Gradient computation and Adam updates for the image and video models.
//!
//! Every batch item is differentiated on its own tape (in parallel) and the
//! per-item gradients are summed in batch order, so results do not depend on
//! the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{draw_noised, model_input, NoiseSchedule, NoisedExample, TrainingExample};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::rng::Rng;
use crate::stunet::{Bound, NamedTensors, STUNetWeights, T2IWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam optimiser state keyed by tensor name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: NamedTensors,
    pub v: NamedTensors,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, ..Default::default() }
    }

    /// Applies one update to every tensor of `params` that has a gradient.
    pub fn apply(&mut self, params: &mut NamedTensors, grads: &NamedTensors) -> Result<()> {
        let c = self.config;
        let t = self.step as i32 + 1;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            p.expect_same_shape(g, name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let mut data = p.data().to_vec();
            let (md, vd) = (m.data().to_vec(), v.data().to_vec());
            let mut new_m = Vec::with_capacity(md.len());
            let mut new_v = Vec::with_capacity(vd.len());
            for (((pv, gv), mv), vv) in data.iter_mut().zip(g.data()).zip(md).zip(vd) {
                let mv = c.beta1 * mv + (1.0 - c.beta1) * gv;
                let vv = c.beta2 * vv + (1.0 - c.beta2) * gv * gv;
                *pv -= c.lr * (mv / bc1) / ((vv / bc2).sqrt() + c.eps);
                new_m.push(mv);
                new_v.push(vv);
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
            *m = Tensor::new(g.shape().to_vec(), new_m)?;
            *v = Tensor::new(g.shape().to_vec(), new_v)?;
        }
        Ok(())
    }

    /// Finishes an optimisation step (advances the bias correction).
    pub fn finish_step(&mut self) {
        self.step += 1;
    }
}

fn loss_and_grads(tape: &mut Tape, bound: &Bound, pred: crate::numerics::Var, eps: &Tensor) -> Result<(f64, NamedTensors)> {
    let target = tape.constant(eps.clone());
    let loss = tape.mse(pred, target)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let out = bound
        .iter()
        .filter(|(_, v)| tape.requires_grad(**v))
        .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
        .collect();
    Ok((value, out))
}

/// Noise-prediction loss of one image example `[1, C, H, W]` and its
/// gradient with respect to every image-model tensor.
pub fn t2i_example_gradients(
    weights: &T2IWeights,
    example: &TrainingExample,
    noised: &NoisedExample,
) -> Result<(f64, NamedTensors)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &[&weights.tensors], |_| true);
    let x = tape.constant(model_input(&noised.x_t, example.extra.as_ref())?);
    let pred = weights.forward_on_tape(&mut tape, &bound, x, &[noised.t], &[example.class])?;
    loss_and_grads(&mut tape, &bound, pred, &noised.eps)
}

/// Noise-prediction loss of one clip `[T, C, H, W]` and its gradient with
/// respect to the trainable (temporal and unfrozen spatial) tensors.
pub fn video_example_gradients(
    weights: &STUNetWeights,
    example: &TrainingExample,
    noised: &NoisedExample,
) -> Result<(f64, NamedTensors)> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, true);
    let x = tape.constant(model_input(&noised.x_t, example.extra.as_ref())?);
    let pred = weights.forward_on_tape(&mut tape, &bound, x, noised.t, example.class)?;
    loss_and_grads(&mut tape, &bound, pred, &noised.eps)
}

/// Mean loss and mean gradient over a batch, reduced in batch order.
pub fn batch_gradients<F>(n: usize, per_item: F) -> Result<(f64, NamedTensors)>
where
    F: Fn(usize) -> Result<(f64, NamedTensors)> + Sync,
{
    if n == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    let items: Vec<(f64, NamedTensors)> = (0..n).into_par_iter().map(&per_item).collect::<Result<_>>()?;
    let mut iter = items.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss += l;
        for (name, t) in g {
            let acc = grads.get_mut(&name).ok_or_else(|| Error::invalid(format!("gradient '{name}' missing")))?;
            *acc = acc.add(&t)?;
        }
    }
    let inv = 1.0 / n as f64;
    Ok((loss * inv, grads.into_iter().map(|(k, v)| (k, v.scale(inv))).collect()))
}

/// Draws `(t, eps)` for every batch item in order.
pub fn draw_batch_noise(batch: &[TrainingExample], schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Vec<NoisedExample>> {
    batch.iter().map(|ex| draw_noised(&ex.video, schedule, rng)).collect()
}

/// One Adam step on the image model; returns the batch loss before the
/// update.
pub fn t2i_train_step(
    weights: &mut T2IWeights,
    adam: &mut Adam,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let noised = draw_batch_noise(batch, schedule, rng)?;
    let w: &T2IWeights = weights;
    let (loss, grads) = batch_gradients(batch.len(), |i| t2i_example_gradients(w, &batch[i], &noised[i]))?;
    adam.apply(&mut weights.tensors, &grads)?;
    adam.finish_step();
    Ok(loss)
}

/// One Adam step on the trainable tensors of the video model; frozen
/// spatial tensors are never written.
pub fn video_train_step(
    weights: &mut STUNetWeights,
    adam: &mut Adam,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let noised = draw_batch_noise(batch, schedule, rng)?;
    let w: &STUNetWeights = weights;
    let (loss, grads) = batch_gradients(batch.len(), |i| video_example_gradients(w, &batch[i], &noised[i]))?;
    let (temporal_grads, spatial_grads): (NamedTensors, NamedTensors) =
        grads.into_iter().partition(|(name, _)| weights.temporal.contains_key(name));
    adam.apply(&mut weights.temporal, &temporal_grads)?;
    let unfrozen: NamedTensors =
        spatial_grads.into_iter().filter(|(name, _)| weights.unfrozen_spatial.contains(name)).collect();
    adam.apply(&mut weights.spatial, &unfrozen)?;
    adam.finish_step();
    Ok(loss)
}

/// Mean loss of `batch` under fixed noise draws, without updating anything.
pub fn probe_loss<F>(n: usize, per_item: F) -> Result<f64>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    if n == 0 {
        return Err(Error::invalid("empty probe batch"));
    }
    let losses: Vec<f64> = (0..n).into_par_iter().map(&per_item).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        let mut params = NamedTensors::from([("w".to_string(), Tensor::new(vec![2], vec![1.0, -1.0]).unwrap())]);
        let grads = NamedTensors::from([("w".to_string(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())]);
        adam.apply(&mut params, &grads).unwrap();
        adam.finish_step();
        let p = params["w"].data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn batch_mean_order() {
        let (loss, g) = batch_gradients(3, |i| {
            Ok((i as f64, NamedTensors::from([("a".to_string(), Tensor::full(&[1], i as f64))])))
        })
        .unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g["a"].data(), &[1.0]);
    }
}

//! The noise-prediction objective, Adam and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalPair;
use crate::denoiser::{Checkpoint, Denoiser, DenoiserInput, Gradients, OptimizerSnapshot, Parameters, UNet};
use crate::diffusion::forward_sample;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::volume::{NoiseSample, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub rng_seed: u64,
    pub checkpoint_every: usize,
    /// Iterations averaged by [`TrainState::windowed_loss`].
    pub loss_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300_000,
            batch_size: 1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            rng_seed: 0,
            checkpoint_every: 10_000,
            loss_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.loss_window == 0 {
            return bad("batch_size, checkpoint_every and loss_window must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        Ok(())
    }
}

/// Weights plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub first_moment: Parameters,
    pub second_moment: Parameters,
    /// Completed optimizer steps.
    pub step: u64,
    /// Loss of every completed iteration, in order.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: Parameters) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            params,
            step: 0,
            loss_history: Vec::new(),
        }
    }

    /// Mean loss over `window` iterations starting at `start`.
    pub fn windowed_loss(&self, start: usize, window: usize) -> Option<f64> {
        let end = start.checked_add(window)?;
        let slice = self.loss_history.get(start..end)?;
        Some(slice.iter().sum::<f64>() / window as f64)
    }

    /// Mean of the last `window` recorded losses.
    pub fn final_windowed_loss(&self, window: usize) -> Option<f64> {
        let start = self.loss_history.len().checked_sub(window)?;
        self.windowed_loss(start, window)
    }

    pub fn to_checkpoint(&self, header: Vec<(String, String)>) -> Checkpoint {
        Checkpoint {
            header,
            params: self.params.clone(),
            optimizer: Some(OptimizerSnapshot {
                step: self.step,
                first_moment: self.first_moment.clone(),
                second_moment: self.second_moment.clone(),
                loss_history: self.loss_history.clone(),
            }),
        }
    }

    /// Restores a state; a weights-only checkpoint starts with fresh moments.
    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self> {
        match checkpoint.optimizer {
            None => Ok(Self::new(checkpoint.params)),
            Some(opt) => {
                checkpoint.params.ensure_same_layout(&opt.first_moment)?;
                checkpoint.params.ensure_same_layout(&opt.second_moment)?;
                Ok(Self {
                    params: checkpoint.params,
                    first_moment: opt.first_moment,
                    second_moment: opt.second_moment,
                    step: opt.step,
                    loss_history: opt.loss_history,
                })
            }
        }
    }
}

/// Checkpoint header describing the model, schedule and seed.
pub fn checkpoint_header(
    model: &crate::denoiser::UNetConfig,
    schedule: &ScheduleSpec,
    seed: u64,
) -> Vec<(String, String)> {
    let mut header = model.to_pairs();
    header.extend(schedule.to_pairs());
    header.push(("rng_seed".into(), seed.to_string()));
    header
}

/// One bias-corrected Adam update in place.
pub fn adam_step(state: &mut TrainState, gradients: &Gradients, config: &TrainConfig) -> Result<()> {
    state.params.ensure_same_layout(gradients)?;
    if let Some(name) = gradients.first_non_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            name: name.to_string(),
        });
    }
    let step = state.step + 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let correction1 = 1.0 - b1.powi(step as i32);
    let correction2 = 1.0 - b2.powi(step as i32);
    for (i, g) in gradients.iter().enumerate() {
        let m = state.first_moment.entry_mut(i).tensor.data_mut();
        let v = state.second_moment.entry_mut(i).tensor.data_mut();
        let p = state.params.entry_mut(i).tensor.data_mut();
        for (((p, m), v), &g) in p
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(g.tensor.data())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
    }
    state.step = step;
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// `mean((eps - eps_hat(x_t, t, S, delta))^2)` with `x_t` noised from the
/// pair's target.
pub fn loss_simple(
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    pair: &LongitudinalPair,
    t: usize,
    eps: &NoiseSample,
) -> Result<f64> {
    pair.source.ensure_same_shape(pair.target.shape())?;
    let xt = forward_sample(schedule, &pair.target, t, eps)?;
    let pred = denoiser.predict_noise(&DenoiserInput {
        xt: &xt,
        t,
        source: &pair.source,
        delta: pair.delta,
    })?;
    pred.ensure_same_shape(eps.shape())?;
    let loss = mse(pred.voxels(), eps.values());
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            name: pair.subject_id.clone(),
        });
    }
    Ok(loss)
}

/// [`loss_simple`] for a UNet, together with its parameter gradients.
pub fn loss_and_gradients(
    schedule: &NoiseSchedule,
    unet: &UNet,
    params: &Parameters,
    pair: &LongitudinalPair,
    t: usize,
    eps: &NoiseSample,
) -> Result<(f64, Gradients)> {
    pair.source.ensure_same_shape(pair.target.shape())?;
    let xt = forward_sample(schedule, &pair.target, t, eps)?;
    let input = DenoiserInput {
        xt: &xt,
        t,
        source: &pair.source,
        delta: pair.delta,
    };
    let trace = unet.trace(params, &input)?;
    let pred = trace.output();
    let loss = mse(pred.voxels(), eps.values());
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            name: pair.subject_id.clone(),
        });
    }
    let scale = 2.0 / pred.len() as f64;
    let grad = Volume::new(
        pred.shape(),
        pred.voxels()
            .iter()
            .zip(eps.values())
            .map(|(p, e)| scale * (p - e))
            .collect(),
    )?;
    Ok((loss, trace.backward(&grad)?))
}

/// What one iteration drew.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationDraw {
    pub pair_index: usize,
    pub t: usize,
}

/// Randomness for iteration `iteration` comes from its own ChaCha stream, so
/// a resumed run draws exactly what an uninterrupted one would.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Picks a pair uniformly and `t` uniformly in `1..=timesteps`. These are
/// the first values each training iteration takes from its stream.
pub fn draw_iteration<R: Rng>(rng: &mut R, pairs: usize, timesteps: usize) -> IterationDraw {
    IterationDraw {
        pair_index: rng.random_range(0..pairs),
        t: rng.random_range(1..=timesteps),
    }
}

/// Runs `config.iterations` further steps from `state`.
///
/// `observe` is called after every step with the completed state; returning
/// an error stops training.
pub fn train_from<F>(
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    unet: &UNet,
    pairs: &[LongitudinalPair],
    mut state: TrainState,
    mut observe: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InsufficientSamples { found: 0, needed: 1 });
    }
    for _ in 0..config.iterations {
        let iteration = state.step;
        let wrap = |e: Error| Error::Iteration {
            iteration: iteration as usize,
            source: Box::new(e),
        };
        let mut rng = iteration_rng(config.rng_seed, iteration);
        let mut total_loss = 0.0;
        let mut total_grad: Option<Gradients> = None;
        for _ in 0..config.batch_size {
            let d = draw_iteration(&mut rng, pairs.len(), schedule.len());
            let pair = &pairs[d.pair_index];
            let eps = NoiseSample::standard_normal(pair.target.shape(), &mut rng);
            let (loss, grad) =
                loss_and_gradients(schedule, unet, &state.params, pair, d.t, &eps).map_err(wrap)?;
            total_loss += loss;
            total_grad = Some(match total_grad {
                None => grad,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(grad.iter()) {
                        for (x, y) in a.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
                            *x += y;
                        }
                    }
                    acc
                }
            });
        }
        let mut grad = total_grad.expect("batch_size > 0");
        if config.batch_size > 1 {
            let inv = 1.0 / config.batch_size as f64;
            for e in grad.iter_mut() {
                e.tensor.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
        }
        adam_step(&mut state, &grad, config).map_err(wrap)?;
        state.loss_history.push(total_loss / config.batch_size as f64);
        observe(&state).map_err(wrap)?;
    }
    Ok(state)
}

/// Trains from fresh optimizer state.
pub fn train(
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    unet: &UNet,
    pairs: &[LongitudinalPair],
    initial_params: Parameters,
) -> Result<TrainState> {
    train_from(
        schedule,
        config,
        unet,
        pairs,
        TrainState::new(initial_params),
        |_| Ok(()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_state(value: f64) -> TrainState {
        let mut p = Parameters::default();
        p.push("w", Tensor::new(vec![1], vec![value]).unwrap());
        TrainState::new(p)
    }

    fn scalar_grad(g: f64) -> Gradients {
        let mut p = Parameters::default();
        p.push("w", Tensor::new(vec![1], vec![g]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let config = TrainConfig::default();
        let mut s = scalar_state(0.5);
        adam_step(&mut s, &scalar_grad(1.0), &config).unwrap();
        let p = s.params.clone();
        let m = s.first_moment.entry(0).tensor.data()[0];
        adam_step(&mut s, &scalar_grad(0.0), &config).unwrap();
        let m2 = s.first_moment.entry(0).tensor.data()[0];
        assert!((m2 - 0.9 * m).abs() < 1e-15);
        // The bias-corrected first moment is still non-zero, so the weight
        // keeps moving; only a fresh state is a true fixed point.
        let mut fresh = scalar_state(0.5);
        adam_step(&mut fresh, &scalar_grad(0.0), &config).unwrap();
        assert_eq!(fresh.params.entry(0).tensor.data(), &[0.5]);
        assert_ne!(s.params, p);
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut s = scalar_state(0.0);
        let err = adam_step(&mut s, &scalar_grad(f64::NAN), &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn windowed_loss() {
        let mut s = scalar_state(0.0);
        s.loss_history = vec![4.0, 2.0, 1.0, 1.0];
        assert_eq!(s.windowed_loss(0, 2), Some(3.0));
        assert_eq!(s.final_windowed_loss(2), Some(1.0));
        assert_eq!(s.windowed_loss(3, 2), None);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            adam_beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

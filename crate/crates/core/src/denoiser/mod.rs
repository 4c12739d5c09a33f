//! The conditional noise predictor `eps(x_t, t, S, delta)`.
//!
//! Two implementations live here: [`GaussianOracle`], the exact posterior
//! noise estimate for i.i.d. Gaussian data used to verify the sampler, and
//! [`NeuralDenoiser`], the attention UNet used for generation.

mod checkpoint;
mod params;
mod unet;

pub use checkpoint::{Checkpoint, OptimizerSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{Gradients, NamedTensor, Parameters};
pub use unet::{NeuralDenoiser, Trace, UNet, UNetConfig};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::volume::Volume;

/// Everything the noise predictor sees at one reverse step.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub xt: &'a Volume,
    /// 1-based timestep.
    pub t: usize,
    /// Conditioning (source) volume, same shape as `xt`.
    pub source: &'a Volume,
    /// Interval to the requested follow-up, in years.
    pub delta: f64,
}

impl DenoiserInput<'_> {
    pub fn validate(&self) -> Result<()> {
        self.xt.ensure_same_shape(self.source.shape())?;
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "interval must be finite and non-negative, got {}",
                self.delta
            )));
        }
        if self.t == 0 {
            return Err(Error::TimestepOutOfRange {
                t: 0,
                max: usize::MAX,
            });
        }
        Ok(())
    }
}

pub trait Denoiser {
    /// Predicts the noise component of `input.xt`; same shape as `xt`.
    fn predict_noise(&self, input: &DenoiserInput<'_>) -> Result<Volume>;
}

impl<F> Denoiser for F
where
    F: Fn(&DenoiserInput<'_>) -> Result<Volume>,
{
    fn predict_noise(&self, input: &DenoiserInput<'_>) -> Result<Volume> {
        self(input)
    }
}

/// Bayes-optimal noise estimate when every voxel of `x_0` is drawn
/// independently from `N(prior_mean, prior_var)`. Conditioning is ignored.
///
/// With `x_t = sqrt(ab) x_0 + sqrt(1 - ab) eps`, the pair `(x_0, x_t)` is
/// jointly Gaussian, giving
///
/// ```text
/// E[x_0 | x_t] = m + sqrt(ab) v / (ab v + 1 - ab) * (x_t - sqrt(ab) m)
/// E[eps | x_t] = (x_t - sqrt(ab) E[x_0 | x_t]) / sqrt(1 - ab)
/// ```
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    schedule: NoiseSchedule,
    prior_mean: f64,
    prior_var: f64,
}

impl GaussianOracle {
    pub fn new(schedule: NoiseSchedule, prior_mean: f64, prior_var: f64) -> Result<Self> {
        if !(prior_var > 0.0 && prior_var.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior variance must be positive, got {prior_var}"
            )));
        }
        Ok(Self {
            schedule,
            prior_mean,
            prior_var,
        })
    }

    /// `E[x_0 | x_t]` for a single voxel.
    pub fn posterior_x0(&self, xt: f64, t: usize) -> Result<f64> {
        let c = self.schedule.lookup(t)?;
        let s = c.alpha_bar.sqrt();
        let gain = s * self.prior_var / (c.alpha_bar * self.prior_var + c.one_minus_alpha_bar);
        Ok(self.prior_mean + gain * (xt - s * self.prior_mean))
    }

    /// `(a, b)` with `E[eps | x_t] = a * x_t + b`.
    pub fn affine_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let c = self.schedule.lookup(t)?;
        let s = c.alpha_bar.sqrt();
        let gain = s * self.prior_var / (c.alpha_bar * self.prior_var + c.one_minus_alpha_bar);
        let root = c.one_minus_alpha_bar.sqrt();
        let a = (1.0 - s * gain) / root;
        let b = -s * (self.prior_mean - gain * s * self.prior_mean) / root;
        Ok((a, b))
    }

    /// Exact mean and variance of one voxel of the ancestral sampler's
    /// output when this oracle drives it from `x_T ~ N(0, 1)`.
    ///
    /// Every reverse step is affine in `x_t` plus independent noise, so the
    /// moments follow `m <- k m + h`, `v <- k^2 v + sigma^2`.
    pub fn sampler_moments(&self) -> Result<(f64, f64)> {
        let (mut mean, mut var) = (0.0, 1.0);
        for t in (1..=self.schedule.len()).rev() {
            let c = self.schedule.lookup(t)?;
            let (a, b) = self.affine_coefficients(t)?;
            let inv_sqrt_alpha = 1.0 / c.alpha.sqrt();
            let eps_coef = c.beta / c.one_minus_alpha_bar.sqrt();
            let k = inv_sqrt_alpha * (1.0 - eps_coef * a);
            let h = -inv_sqrt_alpha * eps_coef * b;
            mean = k * mean + h;
            var = k * k * var + if t > 1 { c.posterior_variance } else { 0.0 };
        }
        Ok((mean, var))
    }
}

impl Denoiser for GaussianOracle {
    fn predict_noise(&self, input: &DenoiserInput<'_>) -> Result<Volume> {
        let c = self.schedule.lookup(input.t)?;
        let s = c.alpha_bar.sqrt();
        let root = c.one_minus_alpha_bar.sqrt();
        let mut out = input.xt.clone();
        for v in out.voxels_mut() {
            let x0 = self.posterior_x0(*v, input.t)?;
            *v = (*v - s * x0) / root;
        }
        Ok(out)
    }
}

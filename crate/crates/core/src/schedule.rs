//! Noise schedule and the per-step coefficients derived from it.
//!
//! Timesteps are 1-based throughout: `t = 1` is the first noising step and
//! `t = T` the last. The convention `alpha_bar(0) = 1` makes the posterior
//! variance at `t = 1` exactly zero, so the final reverse step is noiseless.
//!
//! Cumulative products are accumulated in double-double arithmetic and only
//! rounded once when stored; after 1000 multiplies a plain `f64` product
//! drifts by several ulps, which matters for `alpha_bar(T)` near `1e-5`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a linear schedule, as stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("timesteps".into(), self.timesteps.to_string()),
            ("beta_start".into(), self.beta_start.to_string()),
            ("beta_end".into(), self.beta_end.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let find = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::CorruptHeader(format!("missing key `{key}`")))
        };
        let bad = |key: &str| Error::CorruptHeader(format!("bad value for `{key}`"));
        Ok(Self {
            timesteps: find("timesteps")?.parse().map_err(|_| bad("timesteps"))?,
            beta_start: find("beta_start")?.parse().map_err(|_| bad("beta_start"))?,
            beta_end: find("beta_end")?.parse().map_err(|_| bad("beta_end"))?,
        })
    }
}

/// Precomputed linear-Gaussian coefficients for every timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 - alpha_bar`, rounded from the extended-precision value so that
    /// small-`t` entries do not suffer cancellation.
    one_minus_alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
    post_coef_x0: Vec<f64>,
    post_coef_xt: Vec<f64>,
}

/// Coefficient bundle for a single timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub t: usize,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    pub one_minus_alpha_bar: f64,
    pub one_minus_alpha_bar_prev: f64,
    pub posterior_variance: f64,
    pub post_coef_x0: f64,
    pub post_coef_xt: f64,
}

impl NoiseSchedule {
    /// Linear schedule hitting `beta_start` at `t = 1` and `beta_end` at `t = T`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::InvalidRange(format!(
                "linear schedule needs T >= 2, got {timesteps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let span = (timesteps - 1) as f64;
        let beta = (0..timesteps)
            .map(|i| {
                if i == timesteps - 1 {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * (i as f64 / span)
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Builds a schedule from explicit betas (`betas[0]` is `beta_1`). Unlike
    /// [`NoiseSchedule::linear`] this accepts a single step.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, &b)| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidRange(format!(
                "beta_{} = {b} is outside (0, 1)",
                i + 1
            )));
        }

        let n = beta.len();
        let mut alpha = Vec::with_capacity(n);
        let mut alpha_bar = Vec::with_capacity(n);
        let mut one_minus_alpha_bar = Vec::with_capacity(n);
        let mut posterior_variance = Vec::with_capacity(n);
        let mut post_coef_x0 = Vec::with_capacity(n);
        let mut post_coef_xt = Vec::with_capacity(n);

        let mut prod = DoubleDouble::ONE;
        for &b in &beta {
            let a = DoubleDouble::ONE.sub_f64(b);
            let prev = prod;
            prod = prod.mul(a);

            let ab_prev = prev.to_f64();
            let ab = prod.to_f64();
            let oma_prev = DoubleDouble::ONE.sub(prev).to_f64();
            let oma = DoubleDouble::ONE.sub(prod).to_f64();
            let alpha_t = a.to_f64();

            alpha.push(alpha_t);
            alpha_bar.push(ab);
            one_minus_alpha_bar.push(oma);
            posterior_variance.push(oma_prev / oma * b);
            post_coef_x0.push(ab_prev.sqrt() * b / oma);
            post_coef_xt.push(alpha_t.sqrt() * oma_prev / oma);
        }

        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            one_minus_alpha_bar,
            posterior_variance,
            post_coef_x0,
            post_coef_xt,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn one_minus_alpha_bars(&self) -> &[f64] {
        &self.one_minus_alpha_bar
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variance
    }

    pub fn post_coefs_x0(&self) -> &[f64] {
        &self.post_coef_x0
    }

    pub fn post_coefs_xt(&self) -> &[f64] {
        &self.post_coef_xt
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(())
    }

    pub fn lookup(&self, t: usize) -> Result<StepCoefficients> {
        self.check_timestep(t)?;
        let i = t - 1;
        let (alpha_bar_prev, one_minus_alpha_bar_prev) = if i == 0 {
            (1.0, 0.0)
        } else {
            (self.alpha_bar[i - 1], self.one_minus_alpha_bar[i - 1])
        };
        Ok(StepCoefficients {
            t,
            beta: self.beta[i],
            alpha: self.alpha[i],
            alpha_bar: self.alpha_bar[i],
            alpha_bar_prev,
            one_minus_alpha_bar: self.one_minus_alpha_bar[i],
            one_minus_alpha_bar_prev,
            posterior_variance: self.posterior_variance[i],
            post_coef_x0: self.post_coef_x0[i],
            post_coef_xt: self.post_coef_xt[i],
        })
    }

    /// Diagnostic dump, one row per timestep.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,beta,alpha,alpha_bar,posterior_variance")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                i + 1,
                self.beta[i],
                self.alpha[i],
                self.alpha_bar[i],
                self.posterior_variance[i]
            )?;
        }
        Ok(())
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    const ONE: Self = Self { hi: 1.0, lo: 0.0 };

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        let err = (a - (s - bb)) + (b - bb);
        Self { hi: s, lo: err }
    }

    fn quick_two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        Self {
            hi: s,
            lo: b - (s - a),
        }
    }

    fn add(self, other: Self) -> Self {
        let s = Self::two_sum(self.hi, other.hi);
        let t = Self::two_sum(self.lo, other.lo);
        let s = Self::quick_two_sum(s.hi, s.lo + t.hi);
        Self::quick_two_sum(s.hi, s.lo + t.lo)
    }

    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn sub(self, other: Self) -> Self {
        self.add(other.neg())
    }

    fn sub_f64(self, b: f64) -> Self {
        self.sub(Self { hi: b, lo: 0.0 })
    }

    fn mul(self, other: Self) -> Self {
        let p = self.hi * other.hi;
        let err = self.hi.mul_add(other.hi, -p);
        let err = err + (self.hi * other.lo + self.lo * other.hi);
        Self::quick_two_sum(p, err)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

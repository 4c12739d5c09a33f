//! Forward noising, the Bayes posterior of the forward chain, ancestral
//! reverse sampling and the per-step KL diagnostic.
//!
//! None of these functions know anything about a particular network: the
//! reverse chain takes its noise estimate from any [`Denoiser`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::volume::{NoiseSample, Volume};

/// Isotropic Gaussian over volumes: `N(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicGaussian {
    pub mean: Volume,
    pub variance: f64,
}

fn check_noise(volume: &Volume, noise: &NoiseSample) -> Result<()> {
    volume.ensure_same_shape(noise.shape())
}

/// `q(x_t | x_0)`.
pub fn forward_marginal(schedule: &NoiseSchedule, x0: &Volume, t: usize) -> Result<IsotropicGaussian> {
    let c = schedule.lookup(t)?;
    let scale = c.alpha_bar.sqrt();
    Ok(IsotropicGaussian {
        mean: x0.map(|v| scale * v),
        variance: c.one_minus_alpha_bar,
    })
}

/// Draws `x_t` from `q(x_t | x_0)` using the supplied noise.
pub fn forward_sample(schedule: &NoiseSchedule, x0: &Volume, t: usize, eps: &NoiseSample) -> Result<Volume> {
    check_noise(x0, eps)?;
    let c = schedule.lookup(t)?;
    x0.affine_combine(c.alpha_bar.sqrt(), &eps.as_volume(), c.one_minus_alpha_bar.sqrt())
}

/// `q(x_{t-1} | x_t, x_0)`.
pub fn posterior(schedule: &NoiseSchedule, x0: &Volume, xt: &Volume, t: usize) -> Result<IsotropicGaussian> {
    let c = schedule.lookup(t)?;
    let mean = x0.affine_combine(c.post_coef_x0, xt, c.post_coef_xt)?;
    Ok(IsotropicGaussian {
        mean,
        variance: c.posterior_variance,
    })
}

/// Mean of `p(x_{t-1} | x_t)` under the noise-prediction parameterization.
pub fn predicted_mean(schedule: &NoiseSchedule, xt: &Volume, t: usize, eps_pred: &Volume) -> Result<Volume> {
    let c = schedule.lookup(t)?;
    let inv_sqrt_alpha = 1.0 / c.alpha.sqrt();
    let eps_coef = c.beta / c.one_minus_alpha_bar.sqrt();
    xt.affine_combine(inv_sqrt_alpha, eps_pred, -inv_sqrt_alpha * eps_coef)
}

/// The clean volume implied by a noise estimate:
/// `(x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
pub fn predicted_x0(schedule: &NoiseSchedule, xt: &Volume, t: usize, eps_pred: &Volume) -> Result<Volume> {
    let c = schedule.lookup(t)?;
    let inv = 1.0 / c.alpha_bar.sqrt();
    xt.affine_combine(inv, eps_pred, -c.one_minus_alpha_bar.sqrt() * inv)
}

/// Reverse-chain variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Clamp the predicted `x_0` to `[-1, 1]` at every step and take the
    /// posterior mean around it instead of the noise-form mean. Off by
    /// default; when no clamp is active the two means coincide.
    pub clip_denoised: bool,
}

/// One ancestral step `x_t -> x_{t-1}`. The noise term vanishes at `t = 1`.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    xt: &Volume,
    t: usize,
    eps_pred: &Volume,
    noise: &NoiseSample,
) -> Result<Volume> {
    reverse_step_with(schedule, xt, t, eps_pred, noise, SamplerOptions::default())
}

/// [`reverse_step`] with explicit [`SamplerOptions`].
pub fn reverse_step_with(
    schedule: &NoiseSchedule,
    xt: &Volume,
    t: usize,
    eps_pred: &Volume,
    noise: &NoiseSample,
    options: SamplerOptions,
) -> Result<Volume> {
    check_noise(xt, noise)?;
    let mean = if options.clip_denoised {
        let x0 = predicted_x0(schedule, xt, t, eps_pred)?.clamped_to_data_range();
        posterior(schedule, &x0, xt, t)?.mean
    } else {
        predicted_mean(schedule, xt, t, eps_pred)?
    };
    if t == 1 {
        return Ok(mean);
    }
    let sigma = schedule.lookup(t)?.posterior_variance.sqrt();
    mean.affine_combine(1.0, &noise.as_volume(), sigma)
}

/// Runs the full reverse chain from `x_T ~ N(0, I)` down to `x_0`.
///
/// The returned volume is the raw chain output; clamp it with
/// [`Volume::clamped_to_data_range`] before treating it as data.
pub fn sample_loop(
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    source: &Volume,
    delta: f64,
    seed: u64,
) -> Result<Volume> {
    sample_loop_with(schedule, denoiser, source, delta, seed, |_, _| Ok(()))
}

/// [`sample_loop`] with an observer called on every intermediate `x_t`,
/// including the initial `x_T` and the final output (reported as `t = 0`).
pub fn sample_loop_with<F>(
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    source: &Volume,
    delta: f64,
    seed: u64,
    observe: F,
) -> Result<Volume>
where
    F: FnMut(usize, &Volume) -> Result<()>,
{
    sample_loop_configured(
        schedule,
        denoiser,
        source,
        delta,
        seed,
        SamplerOptions::default(),
        observe,
    )
}

/// [`sample_loop_with`] with explicit [`SamplerOptions`].
pub fn sample_loop_configured<F>(
    schedule: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    source: &Volume,
    delta: f64,
    seed: u64,
    options: SamplerOptions,
    mut observe: F,
) -> Result<Volume>
where
    F: FnMut(usize, &Volume) -> Result<()>,
{
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "interval must be finite and non-negative, got {delta}"
        )));
    }
    let shape = source.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = NoiseSample::standard_normal(shape, &mut rng).as_volume();
    let total = schedule.len();
    observe(total, &x)?;

    for t in (1..=total).rev() {
        let eps_pred = denoiser.predict_noise(&DenoiserInput {
            xt: &x,
            t,
            source,
            delta,
        })?;
        x.ensure_same_shape(eps_pred.shape())?;
        let noise = if t > 1 {
            NoiseSample::standard_normal(shape, &mut rng)
        } else {
            NoiseSample::zeros(shape)
        };
        x = reverse_step_with(schedule, &x, t, &eps_pred, &noise, options)?;
        if !x.is_finite() {
            let max_abs = x
                .voxels()
                .iter()
                .filter(|v| v.is_finite())
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            return Err(Error::NonFiniteSample { t, max_abs });
        }
        observe(t - 1, &x)?;
    }
    Ok(x)
}

/// `KL(q(x_{t-1} | x_t, x_0) || p(x_{t-1} | x_t))` summed over voxels.
///
/// Both distributions share the variance `posterior_variance[t]`, so the
/// divergence reduces to `|mu_tilde - mu_theta|^2 / (2 sigma^2)`.
pub fn vlb_term(
    schedule: &NoiseSchedule,
    x0: &Volume,
    xt: &Volume,
    t: usize,
    eps_pred: &Volume,
) -> Result<f64> {
    if t < 2 || t > schedule.len() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.len(),
        });
    }
    let q = posterior(schedule, x0, xt, t)?;
    let p_mean = predicted_mean(schedule, xt, t, eps_pred)?;
    let sq: f64 = q
        .mean
        .voxels()
        .iter()
        .zip(p_mean.voxels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / (2.0 * q.variance))
}

/// Weight `w_t` with `vlb_term = w_t * |eps - eps_pred|^2` when `x_t` was
/// produced from `x_0` with noise `eps`.
pub fn vlb_weight(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    let c = schedule.lookup(t)?;
    Ok(c.beta * c.beta / (2.0 * c.posterior_variance * c.alpha * c.one_minus_alpha_bar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.5, 0.5).unwrap()
    }

    #[test]
    fn marginal_scales_mean() {
        let s = toy();
        let m = forward_marginal(&s, &Volume::filled([2, 2, 2], 1.0), 2).unwrap();
        assert!(m.mean.voxels().iter().all(|&v| v == 0.5));
        assert_eq!(m.variance, 0.75);

        let z = forward_marginal(&s, &Volume::zeros([2, 1, 1]), 1).unwrap();
        assert!(z.mean.voxels().iter().all(|&v| v == 0.0));
        assert_eq!(z.variance, 0.5);
    }

    #[test]
    fn forward_sample_limits() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = NoiseSample::standard_normal([3, 3, 3], &mut rng).as_volume();
        let eps = NoiseSample::standard_normal([3, 3, 3], &mut rng);
        let c = s.lookup(17).unwrap();

        let a = forward_sample(&s, &x0, 17, &NoiseSample::zeros([3, 3, 3])).unwrap();
        for (o, i) in a.voxels().iter().zip(x0.voxels()) {
            assert_eq!(*o, c.alpha_bar.sqrt() * i);
        }
        let b = forward_sample(&s, &Volume::zeros([3, 3, 3]), 17, &eps).unwrap();
        for (o, e) in b.voxels().iter().zip(eps.values()) {
            assert_eq!(*o, c.one_minus_alpha_bar.sqrt() * e);
        }
        assert!(matches!(
            forward_sample(&s, &x0, 17, &NoiseSample::zeros([3, 3, 2])),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(forward_sample(&s, &x0, 51, &eps).is_err());
    }

    #[test]
    fn posterior_degenerate_first_step() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let x0 = Volume::new([1, 1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let xt = Volume::new([1, 1, 3], vec![1.5, 2.0, -3.0]).unwrap();
        let p = posterior(&s, &x0, &xt, 1).unwrap();
        assert_eq!(p.variance, 0.0);
        assert_eq!(p.mean.voxels(), x0.voxels());

        let z = posterior(&s, &Volume::zeros([2, 2, 2]), &Volume::zeros([2, 2, 2]), 7).unwrap();
        assert!(z.mean.voxels().iter().all(|&v| v == 0.0));
        assert!(posterior(&s, &x0, &Volume::zeros([2, 2, 2]), 3).is_err());
    }

    #[test]
    fn reverse_step_final_is_noiseless() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let xt = Volume::new([1, 1, 2], vec![0.3, -0.7]).unwrap();
        let eps = Volume::new([1, 1, 2], vec![0.1, 0.2]).unwrap();
        let big = NoiseSample::new([1, 1, 2], vec![10.0, -10.0]).unwrap();
        let out = reverse_step(&s, &xt, 1, &eps, &big).unwrap();
        let mean = predicted_mean(&s, &xt, 1, &eps).unwrap();
        assert_eq!(out, mean);

        let zero = reverse_step(
            &s,
            &Volume::zeros([2, 2, 2]),
            5,
            &Volume::zeros([2, 2, 2]),
            &NoiseSample::zeros([2, 2, 2]),
        )
        .unwrap();
        assert!(zero.voxels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_noise_mean_matches_posterior_mean() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = rng.random_range(2..=100);
            let x0 = Volume::scalar(rng.random_range(-1.0..1.0));
            let eps = NoiseSample::standard_normal([1, 1, 1], &mut rng);
            let xt = forward_sample(&s, &x0, t, &eps).unwrap();
            let mu = predicted_mean(&s, &xt, t, &eps.as_volume()).unwrap();
            let q = posterior(&s, &x0, &xt, t).unwrap();
            let (a, b) = (mu.voxels()[0], q.mean.voxels()[0]);
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-12), "t={t} {a} {b}");
        }
    }

    #[test]
    fn vlb_zero_for_exact_noise_and_grows_with_error() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = NoiseSample::standard_normal([2, 2, 2], &mut rng).as_volume();
        let eps = NoiseSample::standard_normal([2, 2, 2], &mut rng);
        let xt = forward_sample(&s, &x0, 40, &eps).unwrap();
        let exact = vlb_term(&s, &x0, &xt, 40, &eps.as_volume()).unwrap();
        assert!(exact.abs() < 1e-10);

        let mut prev = exact;
        for h in [0.01, 0.1, 0.5] {
            let mut perturbed = eps.as_volume();
            perturbed.voxels_mut()[3] += h;
            let kl = vlb_term(&s, &x0, &xt, 40, &perturbed).unwrap();
            assert!(kl > prev);
            prev = kl;
        }
        assert!(vlb_term(&s, &x0, &xt, 1, &eps.as_volume()).is_err());
        assert!(vlb_term(&s, &x0, &xt, 101, &eps.as_volume()).is_err());
    }

    #[test]
    fn vlb_is_weighted_noise_error() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let t = rng.random_range(2..=100);
            let x0 = Volume::scalar(rng.random_range(-1.0..1.0));
            let e: f64 = rng.sample(StandardNormal);
            let e_hat: f64 = rng.sample(StandardNormal);
            let xt = forward_sample(&s, &x0, t, &NoiseSample::new([1, 1, 1], vec![e]).unwrap()).unwrap();
            let kl = vlb_term(&s, &x0, &xt, t, &Volume::scalar(e_hat)).unwrap();
            let w = vlb_weight(&s, t).unwrap();
            let expected = w * (e - e_hat) * (e - e_hat);
            assert!((kl - expected).abs() <= 1e-8 * expected.abs().max(1e-300));
        }
    }

    #[test]
    fn sampler_rejects_negative_interval() {
        let s = toy();
        let zero = |i: &DenoiserInput<'_>| Ok(Volume::zeros(i.xt.shape()));
        assert!(sample_loop(&s, &zero, &Volume::scalar(0.0), -1.0, 0).is_err());
    }

    #[test]
    fn sampler_aborts_on_non_finite() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let bad = |i: &DenoiserInput<'_>| {
            let v = if i.t == 4 { f64::NAN } else { 0.0 };
            Ok(Volume::filled(i.xt.shape(), v))
        };
        match sample_loop(&s, &bad, &Volume::zeros([2, 2, 2]), 1.0, 0) {
            Err(Error::NonFiniteSample { t, max_abs }) => {
                assert_eq!(t, 4);
                assert_eq!(max_abs, 0.0);
            }
            other => panic!("expected NonFiniteSample, got {other:?}"),
        }
    }

    #[test]
    fn sampler_single_step_is_predicted_mean() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let eps = |i: &DenoiserInput<'_>| Ok(i.xt.map(|v| 0.5 * v));
        let mut first = None;
        let out = sample_loop_with(&s, &eps, &Volume::zeros([1, 2, 2]), 0.0, 9, |t, x| {
            if t == 1 {
                first = Some(x.clone());
            }
            Ok(())
        })
        .unwrap();
        let x1 = first.unwrap();
        let expected = predicted_mean(&s, &x1, 1, &x1.map(|v| 0.5 * v)).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let s = NoiseSchedule::linear(30, 1e-3, 0.2).unwrap();
        let eps = |i: &DenoiserInput<'_>| Ok(i.xt.map(|v| 0.3 * v));
        let src = Volume::zeros([2, 2, 2]);
        let a = sample_loop(&s, &eps, &src, 1.0, 42).unwrap();
        let b = sample_loop(&s, &eps, &src, 1.0, 42).unwrap();
        let c = sample_loop(&s, &eps, &src, 1.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn clipping_is_inert_inside_data_range() {
        let s = toy();
        let x0 = Volume::new([1, 1, 2], vec![0.4, -0.7]).unwrap();
        let eps = NoiseSample::new([1, 1, 2], vec![0.3, -1.1]).unwrap();
        let xt = forward_sample(&s, &x0, 2, &eps).unwrap();
        let noise = NoiseSample::new([1, 1, 2], vec![0.5, 0.5]).unwrap();
        let plain = reverse_step(&s, &xt, 2, &eps.as_volume(), &noise).unwrap();
        let clipped = reverse_step_with(
            &s,
            &xt,
            2,
            &eps.as_volume(),
            &noise,
            SamplerOptions { clip_denoised: true },
        )
        .unwrap();
        for (a, b) in plain.voxels().iter().zip(clipped.voxels()) {
            assert!((a - b).abs() < 1e-12);
        }
        let recovered = predicted_x0(&s, &xt, 2, &eps.as_volume()).unwrap();
        assert!((recovered.voxels()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_final_step() {
        let s = toy();
        let xt = Volume::scalar(5.0);
        let eps = Volume::scalar(-3.0);
        let out = reverse_step_with(
            &s,
            &xt,
            1,
            &eps,
            &NoiseSample::zeros([1, 1, 1]),
            SamplerOptions { clip_denoised: true },
        )
        .unwrap();
        assert_eq!(out.voxels()[0], 1.0);
    }
}

use longidiff::diffusion::{
    forward_marginal, forward_sample, posterior, predicted_mean, reverse_step, vlb_term, vlb_weight,
};
use longidiff::{NoiseSample, NoiseSchedule, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn standard_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn forward_samples_match_marginal_moments() {
    let schedule = standard_schedule();
    let x0 = Volume::scalar(0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 40_000;
    for t in [1, 250, 600, 1000] {
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let eps = NoiseSample::standard_normal([1, 1, 1], &mut rng);
                forward_sample(&schedule, &x0, t, &eps).unwrap().voxels()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let q = forward_marginal(&schedule, &x0, t).unwrap();
        let se = (q.variance / n as f64).sqrt();
        assert!((mean - q.mean.voxels()[0]).abs() < 4.0 * se, "t={t} mean {mean}");
        // Sample variance of a Gaussian has relative std sqrt(2/(n-1)).
        assert!(
            rel(var, q.variance) < 4.0 * (2.0 / (n - 1) as f64).sqrt(),
            "t={t} var {var}"
        );
    }
}

/// Conditional of the bivariate Gaussian `(x_{t-1}, x_t)` given `x_0`, with
/// `x_{t-1} ~ N(sqrt(ab_{t-1}) x0, 1 - ab_{t-1})` and
/// `x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z`.
fn conditioned(schedule: &NoiseSchedule, x0: f64, xt: f64, t: usize) -> (f64, f64) {
    let i = t - 1;
    let ab_prev = if t == 1 { 1.0 } else { schedule.alpha_bars()[i - 1] };
    let alpha = schedule.alphas()[i];
    let beta = schedule.betas()[i];
    let m1 = ab_prev.sqrt() * x0;
    let s11 = 1.0 - ab_prev;
    let m2 = alpha.sqrt() * m1;
    let s12 = alpha.sqrt() * s11;
    let s22 = alpha * s11 + beta;
    (m1 + s12 / s22 * (xt - m2), s11 - s12 * s12 / s22)
}

#[test]
fn posterior_matches_gaussian_conditioning() {
    let schedule = standard_schedule();
    for t in [2, 3, 10, 100, 500, 999, 1000] {
        for (x0, xt) in [(0.3, -1.2), (-1.0, 2.5), (0.95, 0.0)] {
            let (m, v) = conditioned(&schedule, x0, xt, t);
            let q = posterior(&schedule, &Volume::scalar(x0), &Volume::scalar(xt), t).unwrap();
            assert!((q.mean.voxels()[0] - m).abs() < 1e-12 * (1.0 + m.abs()), "t={t}");
            assert!(rel(q.variance, v) < 1e-10, "t={t}: {} vs {v}", q.variance);
        }
    }
}

/// `KL(N(m1, v) || N(m2, v))` by Simpson quadrature of `p log(p / q)`.
fn quadrature_kl(m1: f64, m2: f64, v: f64) -> f64 {
    let sd = v.sqrt();
    let (lo, hi) = (m1 - 14.0 * sd, m1 + 14.0 * sd);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let lp = -(x - m1).powi(2) / (2.0 * v);
        let lq = -(x - m2).powi(2) / (2.0 * v);
        lp.exp() / (2.0 * std::f64::consts::PI * v).sqrt() * (lp - lq)
    };
    let mut s = f(lo) + f(hi);
    for k in 1..n {
        s += f(lo + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn vlb_term_matches_quadrature_kl() {
    let schedule = standard_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [2, 50, 400, 1000] {
        let x0 = Volume::scalar(rng.random_range(-1.0..1.0));
        let eps = NoiseSample::standard_normal([1, 1, 1], &mut rng);
        let xt = forward_sample(&schedule, &x0, t, &eps).unwrap();
        let eps_pred = Volume::scalar(eps.values()[0] + 0.3);
        let q = posterior(&schedule, &x0, &xt, t).unwrap();
        let p = predicted_mean(&schedule, &xt, t, &eps_pred).unwrap();
        let oracle = quadrature_kl(q.mean.voxels()[0], p.voxels()[0], q.variance);
        let kl = vlb_term(&schedule, &x0, &xt, t, &eps_pred).unwrap();
        assert!(rel(kl, oracle) < 1e-8, "t={t}: {kl} vs {oracle}");
    }
}

#[test]
fn final_step_adds_no_noise() {
    let schedule = standard_schedule();
    let xt = Volume::filled([2, 2, 2], 0.4);
    let eps = Volume::filled([2, 2, 2], -0.1);
    let loud = NoiseSample::new([2, 2, 2], vec![9.0; 8]).unwrap();
    let out = reverse_step(&schedule, &xt, 1, &eps, &loud).unwrap();
    assert_eq!(out, predicted_mean(&schedule, &xt, 1, &eps).unwrap());
}

proptest! {
    #[test]
    fn posterior_conditioning_holds_everywhere(t in 2usize..=1000, x0 in -1.0f64..1.0, xt in -4.0f64..4.0) {
        let schedule = standard_schedule();
        let (m, v) = conditioned(&schedule, x0, xt, t);
        let q = posterior(&schedule, &Volume::scalar(x0), &Volume::scalar(xt), t).unwrap();
        prop_assert!((q.mean.voxels()[0] - m).abs() < 1e-11 * (1.0 + m.abs()));
        prop_assert!(rel(q.variance, v) < 1e-9);
    }

    #[test]
    fn exact_noise_recovers_posterior_mean(t in 1usize..=1000, x0 in -1.0f64..1.0, e in -4.0f64..4.0) {
        let schedule = standard_schedule();
        let x0 = Volume::scalar(x0);
        let eps = NoiseSample::new([1, 1, 1], vec![e]).unwrap();
        let xt = forward_sample(&schedule, &x0, t, &eps).unwrap();
        let mu = predicted_mean(&schedule, &xt, t, &eps.as_volume()).unwrap().voxels()[0];
        let tilde = posterior(&schedule, &x0, &xt, t).unwrap().mean.voxels()[0];
        prop_assert!((mu - tilde).abs() <= 1e-8 * mu.abs().max(tilde.abs()).max(xt.voxels()[0].abs()));
    }

    #[test]
    fn vlb_is_proportional_to_noise_error(t in 2usize..=1000, x0 in -1.0f64..1.0, e in -3.0f64..3.0, d in -2.0f64..2.0) {
        let schedule = standard_schedule();
        let x0 = Volume::scalar(x0);
        let eps = NoiseSample::new([1, 1, 1], vec![e]).unwrap();
        let xt = forward_sample(&schedule, &x0, t, &eps).unwrap();
        let kl = vlb_term(&schedule, &x0, &xt, t, &Volume::scalar(e + d)).unwrap();
        let expected = vlb_weight(&schedule, t).unwrap() * d * d;
        prop_assert!((kl - expected).abs() <= 1e-6 * expected.max(1e-12));
        prop_assert!(kl >= 0.0);
    }
}

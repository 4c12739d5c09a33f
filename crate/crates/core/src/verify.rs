//! Self-checks of a schedule and the sampler, runnable from the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::denoiser::GaussianOracle;
use crate::diffusion::{posterior, predicted_mean, sample_loop};
use crate::error::Result;
use crate::schedule::NoiseSchedule;
use crate::volume::{NoiseSample, Volume};

/// Scalar data distribution used by the sampler checks.
pub const PRIOR_MEAN: f64 = 0.3;
pub const PRIOR_VAR: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Informational checks never fail the run.
    pub gating: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "check,gating,passed,detail")?;
        for c in &self.checks {
            writeln!(
                out,
                "{},{},{},\"{}\"",
                c.name,
                c.gating,
                c.passed,
                c.detail.replace('"', "'")
            )?;
        }
        Ok(())
    }
}

fn ulp_distance(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

pub fn check_schedule(schedule: &NoiseSchedule) -> CheckResult {
    let ab = schedule.alpha_bars();
    let mut problems = Vec::new();
    if !ab.windows(2).all(|w| w[1] < w[0]) {
        problems.push("alpha_bar not strictly decreasing".to_string());
    }
    if !ab.iter().all(|&a| a > 0.0 && a < 1.0) {
        problems.push("alpha_bar outside (0, 1)".to_string());
    }
    if schedule.posterior_variances()[0] != 0.0 {
        problems.push(format!(
            "posterior variance at t=1 is {}",
            schedule.posterior_variances()[0]
        ));
    }
    let worst_ulps = (1..ab.len())
        .map(|i| ulp_distance(ab[i], ab[i - 1] * schedule.alphas()[i]))
        .max()
        .unwrap_or(0);
    if worst_ulps > 2 {
        problems.push(format!("cumulative product recurrence off by {worst_ulps} ulps"));
    }
    CheckResult {
        name: "schedule_invariants",
        passed: problems.is_empty(),
        gating: true,
        detail: if problems.is_empty() {
            format!(
                "T={}, alpha_bar(T)={:.6e}, recurrence within {worst_ulps} ulps",
                ab.len(),
                ab[ab.len() - 1]
            )
        } else {
            problems.join("; ")
        },
    }
}

/// The reverse mean written with the true noise equals the posterior mean.
pub fn check_eps_identity(schedule: &NoiseSchedule, instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = rng.random_range(1..=schedule.len());
        let x0 = Volume::scalar(rng.random_range(-1.0..=1.0));
        let eps = NoiseSample::standard_normal([1, 1, 1], &mut rng);
        let c = schedule.lookup(t)?;
        let xt = x0.affine_combine(c.alpha_bar.sqrt(), &eps.as_volume(), c.one_minus_alpha_bar.sqrt())?;
        let via_eps = predicted_mean(schedule, &xt, t, &eps.as_volume())?.voxels()[0];
        let exact = posterior(schedule, &x0, &xt, t)?.mean.voxels()[0];
        // Relative to the magnitude of the terms being combined.
        let scale = exact.abs().max(xt.voxels()[0].abs()).max(f64::MIN_POSITIVE);
        let rel = (via_eps - exact).abs() / scale;
        worst = worst.max(rel);
    }
    Ok(CheckResult {
        name: "eps_identity",
        passed: worst <= 1e-8,
        gating: true,
        detail: format!("{instances} instances, worst relative error {worst:.3e} (tolerance 1e-8)"),
    })
}

/// Monte Carlo moments of `seeds` scalar chains driven by the Gaussian oracle.
pub fn oracle_chain_samples(schedule: &NoiseSchedule, seeds: usize, base_seed: u64) -> Result<Vec<f64>> {
    let oracle = GaussianOracle::new(schedule.clone(), PRIOR_MEAN, PRIOR_VAR)?;
    let source = Volume::scalar(0.0);
    (0..seeds as u64)
        .map(|i| Ok(sample_loop(schedule, &oracle, &source, 0.0, base_seed.wrapping_add(i))?.voxels()[0]))
        .collect()
}

pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Compares sampled moments against the exact moments of the chain, and
/// reports (without gating) how far the chain lands from the data
/// distribution itself.
pub fn check_oracle_chain(
    schedule: &NoiseSchedule,
    seeds: usize,
    base_seed: u64,
) -> Result<Vec<CheckResult>> {
    let oracle = GaussianOracle::new(schedule.clone(), PRIOR_MEAN, PRIOR_VAR)?;
    let (exact_mean, exact_var) = oracle.sampler_moments()?;
    let xs = oracle_chain_samples(schedule, seeds, base_seed)?;
    let (mean, var) = mean_and_variance(&xs);
    let se = (exact_var / seeds as f64).sqrt();
    let z = (mean - exact_mean) / se;
    let var_rel = var / exact_var - 1.0;
    let data_z = (mean - PRIOR_MEAN) / (PRIOR_VAR / seeds as f64).sqrt();
    let data_rel = var / PRIOR_VAR - 1.0;
    Ok(vec![
        CheckResult {
            name: "oracle_chain_moments",
            passed: z.abs() <= 3.0 && var_rel.abs() <= 0.05,
            gating: true,
            detail: format!(
                "{seeds} chains: mean {mean:.5} vs exact {exact_mean:.5} ({z:+.2} SE), \
                 variance {var:.5} vs exact {exact_var:.5} ({:+.2}%)",
                100.0 * var_rel
            ),
        },
        CheckResult {
            name: "oracle_data_recovery",
            passed: data_z.abs() <= 3.0 && data_rel.abs() <= 0.05,
            gating: false,
            detail: format!(
                "target N({PRIOR_MEAN}, {PRIOR_VAR}): mean {data_z:+.2} SE, variance {:+.2}%",
                100.0 * data_rel
            ),
        },
    ])
}

pub fn run_all(schedule: &NoiseSchedule, seeds: usize, seed: u64) -> Result<VerifyReport> {
    let mut checks = vec![
        check_schedule(schedule),
        check_eps_identity(schedule, 1000, seed)?,
    ];
    checks.extend(check_oracle_chain(schedule, seeds, seed)?);
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_schedule_passes() {
        let s = NoiseSchedule::linear(2, 1e-4, 0.02).unwrap();
        let report = run_all(&s, 2000, 1).unwrap();
        assert!(report.passed(), "{report:?}");
        let recovery = report
            .checks
            .iter()
            .find(|c| c.name == "oracle_data_recovery")
            .unwrap();
        assert!(!recovery.passed);
    }

    #[test]
    fn csv_has_one_row_per_check() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let report = run_all(&s, 200, 0).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().count(),
            1 + report.checks.len()
        );
    }
}

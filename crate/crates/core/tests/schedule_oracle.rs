//! The schedule against exact rational arithmetic.

#[path = "support/rational.rs"]
mod rational;

use longidiff::NoiseSchedule;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

#[test]
fn standard_schedule_matches_rational_oracle() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let reference = rational::linear_schedule(1000, 1e-4, 0.02);
    let mut worst = 0.0f64;
    for (i, want) in reference.iter().enumerate() {
        let got = [
            s.betas()[i],
            s.alphas()[i],
            s.alpha_bars()[i],
            s.one_minus_alpha_bars()[i],
            s.posterior_variances()[i],
            s.post_coefs_x0()[i],
            s.post_coefs_xt()[i],
        ];
        for (k, (g, w)) in got.iter().zip(want).enumerate() {
            let r = rel(*g, *w);
            assert!(r <= 1e-12, "t={} array {k}: {g} vs {w} (rel {r:e})", i + 1);
            worst = worst.max(r);
        }
    }
    assert_eq!(s.posterior_variances()[0], 0.0);
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    println!("worst relative deviation {worst:e}");
}

proptest! {
    #[test]
    fn invariants_hold_for_any_valid_linear_schedule(
        t_max in 2usize..400,
        start in 1e-5f64..0.05,
        width in 0.0f64..0.5,
    ) {
        let end = (start + width).min(0.999);
        let s = NoiseSchedule::linear(t_max, start, end).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert_eq!(s.posterior_variances()[0], 0.0);
        for i in 0..t_max {
            let pv = s.posterior_variances()[i];
            prop_assert!(pv >= 0.0 && pv <= s.betas()[i] * (1.0 + 1e-12));
            // post_coef_x0 + post_coef_xt * sqrt(alpha) scaled: mean of a noiseless
            // trajectory is x_{t-1} itself.
            let prev = if i == 0 { 1.0 } else { ab[i - 1] };
            let recon = s.post_coefs_x0()[i] + s.post_coefs_xt()[i] * ab[i].sqrt();
            prop_assert!((recon - prev.sqrt()).abs() <= 1e-10);
        }
    }
}

use std::f64::consts::PI;

use longidiff::data::phantom::{count_above, generate_phantom, tissue_voxel_count, PhantomSpec};

fn spec32() -> PhantomSpec {
    PhantomSpec {
        grid: [32, 32, 32],
        center: [15.5, 15.5, 15.5],
        semi_axes: [12.0, 13.0, 11.0],
        ventricle_axes: [4.0, 5.0, 3.6],
        ..PhantomSpec::default()
    }
}

#[test]
fn baseline_matches_analytic_ellipsoid_volume() {
    // Hard edges, so the count is a lattice count of the ellipsoid interior.
    let spec = PhantomSpec {
        smoothing: 0.0,
        ..spec32()
    };
    let v = generate_phantom(&spec, 0.0).unwrap();
    let counted = count_above(&v, spec.inside_threshold()) as f64;
    let [a, b, c] = spec.semi_axes;
    let analytic = 4.0 / 3.0 * PI * a * b * c;
    let rel = (counted - analytic).abs() / analytic;
    assert!(rel < 0.05, "counted {counted}, analytic {analytic}, rel {rel}");
}

#[test]
fn tissue_count_decreases_with_age_at_both_sizes() {
    for spec in [PhantomSpec::default(), spec32()] {
        let counts: Vec<usize> = (0..=5)
            .map(|a| tissue_voxel_count(&spec, &generate_phantom(&spec, a as f64).unwrap()))
            .collect();
        println!("{:?}: {counts:?}", spec.grid);
        assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
    }
}

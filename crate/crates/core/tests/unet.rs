use longidiff::denoiser::{DenoiserInput, Parameters, UNet, UNetConfig};
use longidiff::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Volume::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(out: &Volume, weights: &Volume) -> f64 {
    out.voxels()
        .iter()
        .zip(weights.voxels())
        .map(|(a, b)| a * b)
        .sum()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.random_params(7, 0.05);
    let shape = [8, 8, 8];
    let xt = random_volume(shape, 1);
    let source = random_volume(shape, 2);
    let input = DenoiserInput {
        xt: &xt,
        t: 17,
        source: &source,
        delta: 2.0,
    };
    let weights = random_volume(shape, 3);
    let grads = net.backward(&params, &input, &weights).unwrap();

    let loss = |p: &Parameters| weighted_sum(&net.forward(p, &input).unwrap(), &weights);
    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut worst = 0.0_f64;
    // Every tensor gets at least one probe; the rest are spread at random.
    let mut probes: Vec<(usize, usize)> = (0..params.len())
        .map(|i| (i, rng.random_range(0..params.entry(i).tensor.len())))
        .collect();
    while probes.len() < 150 {
        let i = rng.random_range(0..params.len());
        probes.push((i, rng.random_range(0..params.entry(i).tensor.len())));
    }
    for (i, j) in probes {
        let mut plus = params.clone();
        plus.entry_mut(i).tensor.data_mut()[j] += h;
        let mut minus = params.clone();
        minus.entry_mut(i).tensor.data_mut()[j] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic = grads.entry(i).tensor.data()[j];
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-6 {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        worst = worst.max(rel);
        assert!(
            rel < 1e-3,
            "{}[{j}]: analytic {analytic} numeric {numeric}",
            params.entry(i).name
        );
        checked += 1;
    }
    assert!(
        checked >= 100,
        "only {checked} parameters had measurable gradients"
    );
    assert!(worst < 1e-3);
}

#[test]
fn output_shape_follows_input() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.random_params(0, 0.05);
    for shape in [[8, 8, 8], [16, 16, 16], [8, 4, 6]] {
        let x = random_volume(shape, 5);
        let out = net
            .forward(
                &params,
                &DenoiserInput {
                    xt: &x,
                    t: 1,
                    source: &x,
                    delta: 1.0,
                },
            )
            .unwrap();
        assert_eq!(out.shape(), shape);
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let x = random_volume([8, 8, 8], 6);
    let out = net
        .forward(
            &net.zero_params(),
            &DenoiserInput {
                xt: &x,
                t: 40,
                source: &x,
                delta: 3.0,
            },
        )
        .unwrap();
    assert!(out.voxels().iter().all(|&v| v == 0.0));
}

#[test]
fn interval_changes_freshly_initialized_output() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.random_params(8, 0.05);
    let x = random_volume([8, 8, 8], 9);
    let s = random_volume([8, 8, 8], 10);
    let run = |delta| {
        net.forward(
            &params,
            &DenoiserInput {
                xt: &x,
                t: 5,
                source: &s,
                delta,
            },
        )
        .unwrap()
    };
    let (a, b) = (run(1.0), run(3.0));
    let diff = a
        .voxels()
        .iter()
        .zip(b.voxels())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    assert!(diff > 0.0);
}

#[test]
fn source_changes_output() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.random_params(11, 0.05);
    let x = random_volume([8, 8, 8], 12);
    let s1 = random_volume([8, 8, 8], 13);
    let s2 = random_volume([8, 8, 8], 14);
    let run = |s: &Volume| {
        net.forward(
            &params,
            &DenoiserInput {
                xt: &x,
                t: 5,
                source: s,
                delta: 1.0,
            },
        )
        .unwrap()
    };
    assert_ne!(run(&s1), run(&s2));
}

#[test]
fn stem_fusion_is_additive() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.random_params(15, 0.1);
    let x = random_volume([8, 8, 8], 16);
    let s = random_volume([8, 8, 8], 17);
    let zero = Volume::zeros([8, 8, 8]);
    let with = net
        .stem_outputs(
            &params,
            &DenoiserInput {
                xt: &x,
                t: 3,
                source: &s,
                delta: 2.0,
            },
        )
        .unwrap();
    let without = net
        .stem_outputs(
            &params,
            &DenoiserInput {
                xt: &x,
                t: 3,
                source: &zero,
                delta: 2.0,
            },
        )
        .unwrap();

    let channels = with.delta.len();
    let per_channel = with.image.len() / channels;
    for k in 0..with.fused.len() {
        let c = k / per_channel;
        let sum = with.image.data()[k] + with.source.data()[k] + with.delta.data()[c];
        assert_eq!(with.fused.data()[k], sum);
        let change = without.fused.data()[k] - with.fused.data()[k];
        let expected = without.source.data()[k] - with.source.data()[k];
        assert!((change - expected).abs() < 1e-12);
    }
    assert_eq!(with.image, without.image);
    assert_eq!(with.delta, without.delta);
}

#[test]
fn forward_is_deterministic() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.random_params(18, 0.05);
    let x = random_volume([8, 8, 8], 19);
    let input = DenoiserInput {
        xt: &x,
        t: 9,
        source: &x,
        delta: 1.5,
    };
    let a = net.forward(&params, &input).unwrap();
    let b = net.forward(&params, &input).unwrap();
    assert_eq!(a.voxels(), b.voxels());
}

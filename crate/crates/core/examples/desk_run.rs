//! Trains the default UNet on 16^3 phantoms and samples one subject at two
//! intervals.
//!
//! `cargo run --example desk_run -- [iterations] [seed] [checkpoint] [clip]`
//!
//! When `checkpoint` exists it is loaded instead of training; otherwise the
//! trained weights are written there.

use std::path::Path;
use std::time::Instant;

use longidiff::data::{build_pairs, generate_subjects, tissue_voxel_count, PhantomSpec};
use longidiff::denoiser::{Checkpoint, NeuralDenoiser, UNet, UNetConfig};
use longidiff::diffusion::{sample_loop_configured, SamplerOptions};
use longidiff::training::{checkpoint_header, train_from, TrainConfig, TrainState};
use longidiff::ScheduleSpec;

fn main() -> longidiff::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(2000, |a| a.parse().expect("iterations"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));
    let checkpoint = args.next();
    let options = SamplerOptions {
        clip_denoised: args.next().is_some_and(|a| a == "clip"),
    };

    let spec = PhantomSpec::default();
    let subjects = generate_subjects(&spec, 8, 4, seed)?;
    let pairs = build_pairs(&subjects)?;
    let schedule_spec = ScheduleSpec {
        timesteps: 100,
        beta_start: 1e-3,
        beta_end: 0.2,
    };
    let schedule = schedule_spec.build()?;
    let model = UNetConfig::default();
    let unet = UNet::new(model.clone())?;

    let params = match checkpoint.as_deref().filter(|p| Path::new(p).exists()) {
        Some(path) => Checkpoint::load(path)?.params,
        None => {
            let config = TrainConfig {
                iterations,
                rng_seed: seed,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let state = train_from(
                &schedule,
                &config,
                &unet,
                &pairs,
                TrainState::new(unet.init_params(seed)),
                |s| {
                    if s.step % 100 == 0 {
                        let w = s.final_windowed_loss(100).unwrap_or(f64::NAN);
                        println!(
                            "step {:5}  loss(100) {w:.4}  {:.1}s",
                            s.step,
                            start.elapsed().as_secs_f64()
                        );
                    }
                    Ok(())
                },
            )?;
            println!(
                "first window {:.4}, last window {:.4}",
                state.windowed_loss(0, 100).unwrap_or(f64::NAN),
                state.final_windowed_loss(100).unwrap_or(f64::NAN)
            );
            if let Some(path) = &checkpoint {
                state
                    .to_checkpoint(checkpoint_header(&model, &schedule_spec, seed))
                    .save(path)?;
            }
            state.params
        }
    };

    let denoiser = NeuralDenoiser::new(unet, params)?;
    let source = &subjects[0].visits[0].volume;
    let truth: Vec<usize> = subjects[0]
        .visits
        .iter()
        .map(|v| tissue_voxel_count(&spec, &v.volume))
        .collect();
    println!("ground-truth tissue counts by visit: {truth:?}");
    for trial in 0..10u64 {
        let mut line = format!("trial {trial}:");
        for delta in [1.0, 3.0] {
            let raw = sample_loop_configured(
                &schedule,
                &denoiser,
                source,
                delta,
                1000 + trial,
                options,
                |t, x| {
                    if trial == 0 && delta == 1.0 && t % 10 == 0 {
                        let (lo, hi) = x.min_max();
                        println!("  t={t:3} mean {:+.3} min {lo:+.3} max {hi:+.3}", x.mean());
                    }
                    Ok(())
                },
            )?;
            let y = raw.clamped_to_data_range();
            line += &format!(
                " delta {delta} -> {} (mean {:+.3})",
                tissue_voxel_count(&spec, &y),
                raw.mean()
            );
        }
        println!("{line}");
    }
    Ok(())
}

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use longidiff::data::{
    build_pairs, generate_subjects, load_dataset, read_volume, split_by_hash, write_dataset, write_mid_slice,
    write_volume, PhantomSpec,
};
use longidiff::denoiser::{Checkpoint, NeuralDenoiser, UNet, UNetConfig};
use longidiff::diffusion::{sample_loop_configured, SamplerOptions};
use longidiff::metrics::report::delta_from_name;
use longidiff::metrics::{evaluate, EvalPair, MetricConfig};
use longidiff::training::{checkpoint_header, train_from, TrainState};
use longidiff::{verify as checks, Error, NoiseSchedule, Result, ScheduleSpec};

use crate::config::{ResolvedTrain, TrainFile};
use crate::manifest::{now_ms, RunManifest};
use crate::{EvalArgs, ExportSliceArgs, GenDataArgs, SampleArgs, TrainArgs, VerifyArgs};

pub const MANIFEST: &str = "manifest.json";
/// Intermediate sampler states go in `<out>.trajectory/`.
pub const TRAJECTORY_SUFFIX: &str = "trajectory";

fn not_found(what: String) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, what))
}

/// `out.lvol` -> `out.lvol.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> Result<bool> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            toml::from_str::<PhantomSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => PhantomSpec::default(),
    };
    let config = serde_json::json!({
        "spec": spec,
        "subjects": args.subjects,
        "visits": args.visits,
    });
    let mut manifest = RunManifest::start("gen-data", Some(args.seed), config)?;
    let subjects = generate_subjects(&spec, args.subjects, args.visits, args.seed)?;
    let records = write_dataset(&args.out, &subjects)?;
    let pairs = build_pairs(&subjects)?;
    manifest.inputs.extend(args.spec.clone());
    manifest.outputs = records.iter().map(|r| PathBuf::from(&r.path)).collect();
    manifest
        .outputs
        .push(longidiff::data::dataset::DATASET_MANIFEST.into());
    manifest
        .outputs
        .push(longidiff::data::dataset::PAIRS_LISTING.into());
    manifest.finish(&args.out.join(MANIFEST))?;
    println!(
        "wrote {} volumes and {} pairs for {} subjects to {}",
        records.len(),
        pairs.len(),
        subjects.len(),
        args.out.display()
    );
    Ok(true)
}

pub fn verify(args: VerifyArgs) -> Result<bool> {
    let spec = ScheduleSpec {
        timesteps: args.timesteps,
        beta_start: args.beta_start,
        beta_end: args.beta_end,
    };
    let schedule = spec.build()?;
    let mut manifest = RunManifest::start(
        "verify",
        Some(args.seed),
        serde_json::json!({ "schedule": spec, "chains": args.chains }),
    )?;
    let report = checks::run_all(&schedule, args.chains, args.seed)?;
    for c in &report.checks {
        let status = match (c.passed, c.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        println!("{status} {:<22} {}", c.name, c.detail);
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        schedule.write_csv(fs::File::create(out.join("schedule.csv"))?)?;
        report.write_csv(fs::File::create(out.join("checks.csv"))?)?;
        manifest.outputs = vec!["schedule.csv".into(), "checks.csv".into()];
        manifest.finish(&out.join(MANIFEST))?;
    }
    Ok(report.passed())
}

pub fn train(args: TrainArgs) -> Result<bool> {
    let file = match &args.config {
        Some(path) => TrainFile::load(path)?,
        None => TrainFile::default(),
    };
    let flags = TrainFile {
        iterations: args.iterations,
        rng_seed: args.seed,
        learning_rate: args.learning_rate,
        checkpoint_every: args.checkpoint_every,
        timesteps: args.timesteps,
        beta_start: args.beta_start,
        beta_end: args.beta_end,
        eval_subjects: args.eval_subjects,
        ..TrainFile::default()
    };
    let resolved = ResolvedTrain::resolve(file.overlay(flags))?;
    let mut manifest = RunManifest::start("train", Some(resolved.train.rng_seed), &resolved)?;

    let mut subjects = load_dataset(&args.data)?;
    if resolved.eval_subjects > 0 {
        let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
        let split = split_by_hash(&ids, resolved.eval_subjects)?;
        subjects.retain(|s| split.train.contains(&s.id));
        fs::create_dir_all(&args.out)?;
        let text = serde_json::to_string_pretty(&split).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(args.out.join("split.json"), text + "\n")?;
        manifest.outputs.push("split.json".into());
    }
    let pairs = build_pairs(&subjects)?;
    let shape = pairs
        .first()
        .ok_or(Error::InsufficientSamples { found: 0, needed: 1 })?
        .source
        .shape();
    resolved.model.check_shape(shape)?;
    let schedule = resolved.schedule.build()?;
    let unet = UNet::new(resolved.model.clone())?;
    let header = checkpoint_header(&resolved.model, &resolved.schedule, resolved.train.rng_seed);

    let state = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if UNetConfig::from_pairs(&ck.header)? != resolved.model
                || ScheduleSpec::from_pairs(&ck.header)? != resolved.schedule
            {
                return Err(Error::Config(format!(
                    "{} was trained with a different model or schedule",
                    path.display()
                )));
            }
            manifest.inputs.push(path.clone());
            TrainState::from_checkpoint(ck)?
        }
        None => TrainState::new(unet.init_params(resolved.train.rng_seed)),
    };
    let mut run = resolved.train.clone();
    run.iterations = run.iterations.saturating_sub(state.step as usize);

    fs::create_dir_all(&args.out)?;
    let mut log = BufWriter::new(fs::File::create(args.out.join("loss.csv"))?);
    writeln!(log, "iteration,loss")?;
    let started = Instant::now();
    let every = run.checkpoint_every as u64;
    let mut written = Vec::new();
    let state = train_from(&schedule, &run, &unet, &pairs, state, |s| {
        let loss = s.loss_history.last().copied().unwrap_or(f64::NAN);
        writeln!(log, "{},{loss}", s.step)?;
        if s.step % every == 0 {
            let name = format!("checkpoint-{:07}.ldck", s.step);
            s.to_checkpoint(header.clone()).save(args.out.join(&name))?;
            written.push(PathBuf::from(name));
            log.flush()?;
            eprintln!(
                "step {:>7}  loss {:.5}  {:.1}s",
                s.step,
                s.final_windowed_loss(run.loss_window.min(s.loss_history.len()))
                    .unwrap_or(loss),
                started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    log.flush()?;
    state.to_checkpoint(header).save(args.out.join("final.ldck"))?;

    manifest.inputs.push(args.data.clone());
    manifest.inputs.extend(args.config.clone());
    manifest.outputs.extend(written);
    manifest.outputs.push("final.ldck".into());
    manifest.outputs.push("loss.csv".into());
    manifest.finish(&args.out.join(MANIFEST))?;
    println!("trained to step {} ({} pairs)", state.step, pairs.len());
    Ok(true)
}

pub fn load_model(path: &Path) -> Result<(NeuralDenoiser, NoiseSchedule)> {
    let ck = Checkpoint::load(path)?;
    let unet = UNet::new(UNetConfig::from_pairs(&ck.header)?)?;
    let schedule = ScheduleSpec::from_pairs(&ck.header)?.build()?;
    Ok((NeuralDenoiser::new(unet, ck.params)?, schedule))
}

pub fn sample(args: SampleArgs) -> Result<bool> {
    let mut manifest = RunManifest::start(
        "sample",
        Some(args.seed),
        serde_json::json!({
            "delta": args.delta,
            "trajectory_every": args.trajectory_every,
            "clip_denoised": args.clip_denoised,
        }),
    )?;
    if args.trajectory_every == Some(0) {
        return Err(Error::Config("trajectory_every must be positive".into()));
    }
    let (denoiser, schedule) = load_model(&args.checkpoint)?;
    let source = read_volume(&args.source)?;
    if !source.is_data_range() {
        return Err(Error::InvalidArgument(format!(
            "{} is not normalized to [-1, 1]",
            args.source.display()
        )));
    }
    denoiser.unet.config().check_shape(source.shape())?;
    ensure_parent(&args.out)?;
    let mut trajectory = Vec::new();
    let options = SamplerOptions {
        clip_denoised: args.clip_denoised,
    };
    let raw = sample_loop_configured(
        &schedule,
        &denoiser,
        &source,
        args.delta,
        args.seed,
        options,
        |t, x| {
            if let Some(k) = args.trajectory_every {
                if t > 0 && t % k == 0 {
                    let dir = sibling(&args.out, TRAJECTORY_SUFFIX);
                    fs::create_dir_all(&dir)?;
                    let path = dir.join(format!("t{t:04}.lvol"));
                    write_volume(&path, x)?;
                    trajectory.push(path);
                }
            }
            Ok(())
        },
    )?;
    let generated = raw.clamped_to_data_range();
    write_volume(&args.out, &generated)?;
    manifest.inputs = vec![args.checkpoint.clone(), args.source.clone()];
    manifest.outputs.push(args.out.clone());
    manifest.outputs.extend(trajectory);
    if let Some(png) = &args.png {
        ensure_parent(png)?;
        write_mid_slice(&generated, png)?;
        manifest.outputs.push(png.clone());
    }
    manifest.finish(&sibling(&args.out, MANIFEST))?;
    println!("wrote {}", args.out.display());
    Ok(true)
}

fn lvol_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                if path.extension().is_none_or(|e| e != TRAJECTORY_SUFFIX) {
                    stack.push(path);
                }
            } else if path.extension().is_some_and(|e| e == "lvol") {
                found.push(path.strip_prefix(root).expect("walked from root").to_path_buf());
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn eval(args: EvalArgs) -> Result<bool> {
    let config = MetricConfig {
        ssim_window: args.window,
        data_range: 2.0,
        feature_dim: args.feature_dim,
        projection_seed: args.projection_seed,
    };
    let mut manifest = RunManifest::start("eval", Some(args.projection_seed), &config)?;
    let mut pairs = Vec::new();
    for rel in lvol_files(&args.generated)? {
        let reference = args.reference.join(&rel);
        if !reference.exists() {
            return Err(not_found(format!("no reference for {}", rel.display())));
        }
        let name = rel.to_string_lossy().replace('\\', "/");
        pairs.push(EvalPair {
            delta: delta_from_name(&name),
            name,
            generated: read_volume(args.generated.join(&rel))?,
            reference: read_volume(&reference)?,
        });
    }
    if pairs.is_empty() {
        return Err(not_found(format!(
            "no .lvol files under {}",
            args.generated.display()
        )));
    }
    let report = evaluate(&pairs, &config)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("report.jsonl"), report.to_jsonl()?)?;
    let table = report.to_table(&args.method);
    fs::write(args.out.join("report.txt"), &table)?;
    manifest.inputs = vec![args.generated.clone(), args.reference.clone()];
    manifest.outputs = vec!["report.jsonl".into(), "report.txt".into()];
    manifest.finish(&args.out.join(MANIFEST))?;
    print!("{table}");
    Ok(true)
}

pub fn export_slice(args: ExportSliceArgs) -> Result<bool> {
    let started = now_ms();
    let volume = read_volume(&args.input)?;
    ensure_parent(&args.out)?;
    write_mid_slice(&volume, &args.out)?;
    let mut manifest = RunManifest::start("export-slice", None, serde_json::json!({}))?;
    manifest.started_unix_ms = started;
    manifest.inputs = vec![args.input.clone()];
    manifest.outputs = vec![args.out.clone()];
    manifest.finish(&sibling(&args.out, MANIFEST))?;
    Ok(true)
}

//! Training configuration: defaults, then the config file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use longidiff::denoiser::UNetConfig;
use longidiff::training::TrainConfig;
use longidiff::{Error, Result, ScheduleSpec};

/// Keys accepted in a training config file. Every key is optional.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_epsilon: Option<f64>,
    pub rng_seed: Option<u64>,
    pub checkpoint_every: Option<usize>,
    pub loss_window: Option<usize>,
    pub timesteps: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub base_channels: Option<usize>,
    pub channel_multipliers: Option<Vec<usize>>,
    pub attention_levels: Option<Vec<usize>>,
    pub time_embed_dim: Option<usize>,
    pub delta_embed_dim: Option<usize>,
    pub groups_for_norm: Option<usize>,
    pub eval_subjects: Option<usize>,
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Values set in `other` replace those in `self`.
    pub fn overlay(self, other: TrainFile) -> TrainFile {
        macro_rules! pick {
            ($($f:ident),*) => { TrainFile { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            iterations,
            batch_size,
            learning_rate,
            adam_beta1,
            adam_beta2,
            adam_epsilon,
            rng_seed,
            checkpoint_every,
            loss_window,
            timesteps,
            beta_start,
            beta_end,
            base_channels,
            channel_multipliers,
            attention_levels,
            time_embed_dim,
            delta_embed_dim,
            groups_for_norm,
            eval_subjects
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedTrain {
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    pub model: UNetConfig,
    /// Subjects held out by hash; training uses the rest.
    pub eval_subjects: usize,
}

impl ResolvedTrain {
    pub fn resolve(layers: TrainFile) -> Result<Self> {
        let mut train = TrainConfig::default();
        let mut schedule = ScheduleSpec::default();
        let mut model = UNetConfig::default();
        macro_rules! set {
            ($dst:ident . $f:ident) => {
                if let Some(v) = layers.$f.clone() {
                    $dst.$f = v;
                }
            };
        }
        set!(train.iterations);
        set!(train.batch_size);
        set!(train.learning_rate);
        set!(train.adam_beta1);
        set!(train.adam_beta2);
        set!(train.adam_epsilon);
        set!(train.rng_seed);
        set!(train.checkpoint_every);
        set!(train.loss_window);
        set!(schedule.timesteps);
        set!(schedule.beta_start);
        set!(schedule.beta_end);
        set!(model.base_channels);
        set!(model.channel_multipliers);
        set!(model.attention_levels);
        set!(model.time_embed_dim);
        set!(model.delta_embed_dim);
        set!(model.groups_for_norm);
        train.validate()?;
        model.validate()?;
        schedule.build()?;
        Ok(Self {
            train,
            schedule,
            model,
            eval_subjects: layers.eval_subjects.unwrap_or(0),
        })
    }
}

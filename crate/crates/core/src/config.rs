//! Flat `key = value` run configuration. Every key has a default, unknown
//! keys are rejected, and the fully resolved key set can be written as a
//! lock file that reproduces a run on its own.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, Dataset};
use crate::experiments::{ExperimentPlan, SubsampleOrder, WeightMode};
use crate::frameselect::QualityConfig;
use crate::losses::ClassWeights;
use crate::nnet::{AugmentConfig, FillMode, ScheduleKind};
use crate::synthgen::{self, NoiseMode, SynthConfig, SynthTruth};

pub const LOCK_FILE: &str = "run.lock.json";

/// Keys left out of the lock file because they cannot change results.
const UNLOCKED: [&str; 1] = ["experiment.jobs"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("key {0:?} given twice")]
    DuplicateKey(String),
    #[error("invalid value {value:?} for {key}: expected {expected}")]
    InvalidValue {
        key: String,
        value: String,
        expected: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("lock file: {0}")]
    Lock(#[from] serde_json::Error),
}

/// Typed view of a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    /// Master seed: generator seed and the default experiment seed list.
    pub seed: u64,
    pub synth: SynthConfig,
    /// Dataset manifest; experiments synthesize in memory when absent.
    pub manifest: Option<PathBuf>,
    /// Hidden-truth file of a synthesized dataset, for tag cross-tabs.
    pub truth: Option<PathBuf>,
    pub plan: ExperimentPlan,
    /// Train the quality scorer with the dominance model's augmentation.
    pub quality_augment: bool,
}

impl Default for Settings {
    fn default() -> Self {
        let plan = ExperimentPlan::default();
        Settings {
            seed: 0,
            synth: SynthConfig::default(),
            manifest: None,
            truth: None,
            quality_augment: true,
            plan,
        }
    }
}

fn list<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Every key with its value, as text.
    pub fn to_values(&self) -> BTreeMap<String, String> {
        let s = &self.synth;
        let p = &self.plan;
        let t = &p.train;
        let mut v = BTreeMap::new();
        let mut put = |k: &str, x: String| {
            v.insert(k.to_string(), x);
        };
        put("seed", self.seed.to_string());
        put("synth.num_studies", s.num_studies.to_string());
        put("synth.left_fraction", s.left_fraction.to_string());
        put("synth.image_size", s.image_size.to_string());
        put("synth.frames_min", s.frames_min.to_string());
        put("synth.frames_max", s.frames_max.to_string());
        put("synth.views_mean_left", s.views_mean[0].to_string());
        put("synth.views_mean_right", s.views_mean[1].to_string());
        put("synth.width_left", s.width_mean[0].to_string());
        put("synth.width_right", s.width_mean[1].to_string());
        put("synth.width_jitter", s.width_jitter.to_string());
        put("synth.profile.baseline", s.profile.baseline.to_string());
        put("synth.profile.ramp", s.profile.ramp.to_string());
        put("synth.profile.plateau", s.profile.plateau.to_string());
        put("synth.profile.washout", s.profile.washout.to_string());
        put("synth.informative_threshold", s.informative_threshold.to_string());
        put("synth.noise_sigma", s.noise_sigma.to_string());
        put("synth.background", s.background.to_string());
        put("synth.vessel_depth", s.vessel_depth.to_string());
        put("synth.occlusion_fraction", s.occlusion_fraction.to_string());
        put("synth.lca_views", s.lca_views.to_string());
        put(
            "data.manifest",
            self.manifest.as_ref().map(|m| m.display().to_string()).unwrap_or_default(),
        );
        put(
            "data.truth",
            self.truth.as_ref().map(|m| m.display().to_string()).unwrap_or_default(),
        );
        put("loss.kind", p.loss.as_str().to_string());
        put("loss.alpha", p.loss_config.alpha.to_string());
        put("loss.beta", p.loss_config.beta.to_string());
        put("loss.q_floor", p.loss_config.q_floor.to_string());
        put("loss.smoothing", p.loss_config.smoothing.to_string());
        put(
            "loss.class_weights",
            match p.class_weights {
                WeightMode::Balanced => "balanced".into(),
                WeightMode::Fixed(w) if w == ClassWeights::default() => "default".into(),
                WeightMode::Fixed(w) => list(&w.weights()),
            },
        );
        put("gate.train_right", p.gating.train_threshold_right.to_string());
        put("gate.train_left", p.gating.train_threshold_left.to_string());
        put("gate.test", p.gating.test_threshold.to_string());
        put("ssim.window", p.ssim.window.to_string());
        put("ssim.sigma", p.ssim.sigma.to_string());
        put("ssim.k1", p.ssim.k1.to_string());
        put("ssim.k2", p.ssim.k2.to_string());
        put("ssim.dynamic_range", p.ssim.dynamic_range.to_string());
        put("ssim.peak_window", p.ssim.peak_window.to_string());
        put("frames.method", p.frame_method.as_str().to_string());
        put("frames.discard", p.discard_n.to_string());
        put("frames.subsample", p.subsample.as_str().to_string());
        put("augment.enabled", t.augment.enabled.to_string());
        put("augment.max_rotation_deg", t.augment.max_rotation_deg.to_string());
        put("augment.crop_scale", list(&[t.augment.crop_scale.0, t.augment.crop_scale.1]));
        put("augment.crop_ratio", list(&[t.augment.crop_ratio.0, t.augment.crop_ratio.1]));
        put("augment.fill", t.augment.fill.as_str().to_string());
        put("train.schedule", t.schedule.kind.as_str().to_string());
        put("train.warmup_lr", t.schedule.warmup_lr.to_string());
        put("train.peak_lr", t.schedule.peak_lr.to_string());
        put("train.decay_lr", t.schedule.decay_lr.to_string());
        put("train.decay_epoch", t.schedule.decay_epoch.to_string());
        put("train.epochs", t.schedule.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.weight_decay", t.optimizer.weight_decay.to_string());
        put("train.beta1", t.optimizer.beta1.to_string());
        put("train.beta2", t.optimizer.beta2.to_string());
        put("train.eps", t.optimizer.eps.to_string());
        put("quality.frame_stride", p.quality.frame_stride.to_string());
        put("quality.augment", self.quality_augment.to_string());
        // empty means "just the master seed"
        let seeds = if p.seeds == [self.seed] { String::new() } else { list(&p.seeds) };
        put("experiment.seeds", seeds);
        put("experiment.k", p.k.to_string());
        put("experiment.splits", p.splits.to_string());
        put("experiment.val_splits", p.val_splits.to_string());
        put("experiment.val_fraction", p.val_fraction.to_string());
        put("experiment.fraction", p.fraction.to_string());
        put("experiment.fractions", list(&p.fractions));
        put("experiment.repeat_scale", p.repeat_scale.to_string());
        put("experiment.min_repeats", p.min_repeats.to_string());
        put("experiment.ablation_fractions", list(&p.ablation_fractions));
        put("experiment.ensemble_size", p.ensemble_size.to_string());
        put("experiment.noise_rate", p.noise_rate.to_string());
        put("experiment.noise_mode", p.noise_mode.as_str().to_string());
        put("experiment.level", p.level.to_string());
        put("experiment.jobs", p.jobs.to_string());
        v
    }

    /// Parses a complete key set (as produced by [`Settings::to_values`]).
    pub fn from_values(values: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let r = Reader(values);
        let mut s = Settings::default();
        s.seed = r.get("seed", "an unsigned integer")?;
        let sy = &mut s.synth;
        sy.seed = s.seed;
        sy.num_studies = r.get("synth.num_studies", "a positive integer")?;
        sy.left_fraction = r.get("synth.left_fraction", "a number in (0, 1)")?;
        sy.image_size = r.get("synth.image_size", "an integer of at least 16")?;
        sy.frames_min = r.get("synth.frames_min", "a positive integer")?;
        sy.frames_max = r.get("synth.frames_max", "an integer >= frames_min")?;
        sy.views_mean = [
            r.get("synth.views_mean_left", "a number in [1, 3]")?,
            r.get("synth.views_mean_right", "a number in [1, 3]")?,
        ];
        sy.width_mean = [
            r.get("synth.width_left", "a positive width in pixels")?,
            r.get("synth.width_right", "a positive width in pixels")?,
        ];
        sy.width_jitter = r.get("synth.width_jitter", "a non-negative number")?;
        sy.profile.baseline = r.get("synth.profile.baseline", "a fraction")?;
        sy.profile.ramp = r.get("synth.profile.ramp", "a fraction")?;
        sy.profile.plateau = r.get("synth.profile.plateau", "a fraction")?;
        sy.profile.washout = r.get("synth.profile.washout", "a fraction")?;
        sy.informative_threshold = r.get("synth.informative_threshold", "a number in (0, 1)")?;
        sy.noise_sigma = r.get("synth.noise_sigma", "a non-negative number")?;
        sy.background = r.get("synth.background", "a grey level in [0, 255]")?;
        sy.vessel_depth = r.get("synth.vessel_depth", "a grey level in [0, 255]")?;
        sy.occlusion_fraction = r.get("synth.occlusion_fraction", "a fraction")?;
        sy.lca_views = r.get("synth.lca_views", "true or false")?;
        s.manifest = r.path("data.manifest");
        s.truth = r.path("data.truth");

        let p = &mut s.plan;
        p.loss = r.get("loss.kind", "one of CE, NCE, RCE, SCE, NSCE")?;
        p.loss_config.alpha = r.get("loss.alpha", "a non-negative number")?;
        p.loss_config.beta = r.get("loss.beta", "a non-negative number")?;
        p.loss_config.q_floor = r.get("loss.q_floor", "a number in (0, 1)")?;
        p.loss_config.smoothing = r.get("loss.smoothing", "a number in [0, 0.5)")?;
        p.class_weights = r.weights("loss.class_weights")?;
        p.gating.train_threshold_right = r.get("gate.train_right", "a probability")?;
        p.gating.train_threshold_left = r.get("gate.train_left", "a probability")?;
        p.gating.test_threshold = r.get("gate.test", "a probability")?;
        p.ssim.window = r.get("ssim.window", "an odd positive integer")?;
        p.ssim.sigma = r.get("ssim.sigma", "a positive number")?;
        p.ssim.k1 = r.get("ssim.k1", "a positive number")?;
        p.ssim.k2 = r.get("ssim.k2", "a positive number")?;
        p.ssim.dynamic_range = r.get("ssim.dynamic_range", "a positive number")?;
        p.ssim.peak_window = r.get("ssim.peak_window", "a non-negative integer")?;
        p.frame_method = r.get("frames.method", "one of quality, ssim, discard20, all")?;
        p.discard_n = r.get("frames.discard", "a non-negative integer")?;
        p.subsample = match r.raw("frames.subsample") {
            "after" => SubsampleOrder::AfterGating,
            "before" => SubsampleOrder::BeforeGating,
            _ => return Err(r.invalid("frames.subsample", "after or before")),
        };

        let t = &mut p.train;
        t.augment = AugmentConfig {
            enabled: r.get("augment.enabled", "true or false")?,
            max_rotation_deg: r.get("augment.max_rotation_deg", "a non-negative angle in degrees")?,
            crop_scale: r.pair("augment.crop_scale")?,
            crop_ratio: r.pair("augment.crop_ratio")?,
            fill: r.get::<FillMode>("augment.fill", "zero or mean")?,
        };
        t.schedule.kind = r.get::<ScheduleKind>("train.schedule", "warmup_peak_decay or constant_after_warmup")?;
        t.schedule.warmup_lr = r.get("train.warmup_lr", "a positive number")?;
        t.schedule.peak_lr = r.get("train.peak_lr", "a positive number")?;
        t.schedule.decay_lr = r.get("train.decay_lr", "a positive number")?;
        t.schedule.decay_epoch = r.get("train.decay_epoch", "an epoch index below train.epochs")?;
        t.schedule.epochs = r.get("train.epochs", "a positive integer")?;
        t.batch_size = r.get("train.batch_size", "a positive integer")?;
        t.optimizer.weight_decay = r.get("train.weight_decay", "a non-negative number")?;
        t.optimizer.beta1 = r.get("train.beta1", "a number in [0, 1)")?;
        t.optimizer.beta2 = r.get("train.beta2", "a number in [0, 1)")?;
        t.optimizer.eps = r.get("train.eps", "a positive number")?;
        s.quality_augment = r.get("quality.augment", "true or false")?;
        let base = QualityConfig::default();
        p.quality = QualityConfig {
            train: crate::nnet::TrainConfig {
                schedule: t.schedule,
                batch_size: t.batch_size,
                optimizer: t.optimizer,
                augment: if s.quality_augment { t.augment } else { AugmentConfig::disabled() },
                ..base.train
            },
            frame_stride: r.get("quality.frame_stride", "a positive integer")?,
        };

        p.seeds = r.list("experiment.seeds", "a comma-separated list of unsigned integers")?;
        if p.seeds.is_empty() {
            p.seeds = vec![s.seed];
        }
        p.k = r.get("experiment.k", "an integer of at least 2")?;
        p.splits = r.get("experiment.splits", "a positive integer")?;
        p.val_splits = r.get("experiment.val_splits", "a positive integer")?;
        p.val_fraction = r.get("experiment.val_fraction", "a number in [0, 1)")?;
        p.fraction = r.get("experiment.fraction", "a number in (0, 1]")?;
        p.fractions = r.list("experiment.fractions", "ascending numbers in (0, 1]")?;
        p.repeat_scale = r.get("experiment.repeat_scale", "a positive number")?;
        p.min_repeats = r.get("experiment.min_repeats", "a non-negative integer")?;
        p.ablation_fractions = r.list("experiment.ablation_fractions", "numbers in (0, 1]")?;
        p.ensemble_size = r.get("experiment.ensemble_size", "an integer of at least 2")?;
        p.noise_rate = r.get("experiment.noise_rate", "a number in [0, 0.5]")?;
        p.noise_mode = r.get::<NoiseMode>("experiment.noise_mode", "exact_count or bernoulli")?;
        p.level = r.get("experiment.level", "0.9, 0.95 or 0.99")?;
        p.jobs = r.get("experiment.jobs", "a non-negative integer")?;

        s.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        s.plan.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(s)
    }
}

impl Settings {
    /// The configured manifest (with its optional truth file), or an
    /// in-memory synthetic dataset.
    pub fn load_data(&self) -> Result<(Dataset, Option<SynthTruth>), DataLoadError> {
        match &self.manifest {
            Some(m) => {
                let ds = dataio::load_manifest(m)?;
                let truth = self.truth.as_ref().map(synthgen::read_truth).transpose()?;
                Ok((ds, truth))
            }
            None => {
                let (ds, truth) = synthgen::synthesize(&self.synth)?;
                Ok((ds, Some(truth)))
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum DataLoadError {
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Synth(#[from] synthgen::SynthError),
}

struct Reader<'a>(&'a BTreeMap<String, String>);

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    fn invalid(&self, key: &str, expected: &str) -> ConfigError {
        ConfigError::InvalidValue {
            key: key.to_string(),
            value: self.raw(key).to_string(),
            expected: expected.to_string(),
        }
    }

    fn get<T: FromStr>(&self, key: &str, expected: &str) -> Result<T, ConfigError> {
        self.raw(key).parse().map_err(|_| self.invalid(key, expected))
    }

    fn list<T: FromStr>(&self, key: &str, expected: &str) -> Result<Vec<T>, ConfigError> {
        let raw = self.raw(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|x| x.trim().parse().map_err(|_| self.invalid(key, expected)))
            .collect()
    }

    fn pair(&self, key: &str) -> Result<(f64, f64), ConfigError> {
        match self.list::<f64>(key, "two comma-separated numbers")?[..] {
            [a, b] => Ok((a, b)),
            _ => Err(self.invalid(key, "two comma-separated numbers")),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key).trim();
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    fn weights(&self, key: &str) -> Result<WeightMode, ConfigError> {
        let expected = "default, balanced, or two positive weights \"left,right\"";
        match self.raw(key).trim() {
            "default" => Ok(WeightMode::Fixed(ClassWeights::default())),
            "balanced" => Ok(WeightMode::Balanced),
            _ => {
                let [l, r] = self.list::<f64>(key, expected)?[..] else {
                    return Err(self.invalid(key, expected));
                };
                ClassWeights::new(l, r)
                    .map(WeightMode::Fixed)
                    .map_err(|_| self.invalid(key, expected))
            }
        }
    }
}

/// Resolved key set: defaults overlaid with file values and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Lock {
    command: String,
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: Settings::default().to_values(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` text. Blank lines and lines starting with `#`
    /// or `;` are ignored; `[section]` headers prefix the keys below them.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            if !seen.insert(key.clone()) {
                return Err(ConfigError::DuplicateKey(key));
            }
            cfg.set(&key, v.trim())?;
        }
        Ok(cfg)
    }

    /// Reads a config file, or a lock file written by a previous run.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if text.trim_start().starts_with('{') {
            let lock: Lock = serde_json::from_str(&text)?;
            let mut cfg = RunConfig::default();
            for (k, v) in &lock.values {
                cfg.set(k, v)?;
            }
            return Ok(cfg);
        }
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn settings(&self) -> Result<Settings, ConfigError> {
        Settings::from_values(&self.values)
    }

    /// Lock file contents: every result-relevant key plus the command.
    pub fn lock_json(&self, command: &str) -> String {
        let lock = Lock {
            command: command.to_string(),
            values: self
                .values
                .iter()
                .filter(|(k, _)| !UNLOCKED.contains(&k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&lock).expect("string map serializes") + "\n"
    }

    /// Command recorded in a lock file.
    pub fn lock_command(path: impl AsRef<Path>) -> Result<String, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str::<Lock>(&text)?.command)
    }
}

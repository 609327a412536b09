//! Experiment configuration.
//!
//! A single JSON file, optionally overridden by environment variables named
//! `SNNFORGE__SECTION__KEY` (nesting separated by `__`, case-insensitive)
//! and then by `--override section.key=value` flags. Values are parsed as
//! JSON when possible and taken as strings otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use snnforge_core::conversion::ConversionConfig;
use snnforge_core::energy::EnergyModel;
use snnforge_core::network::{build_unet, Task};
use snnforge_core::optim::OptimizerConfig;

use crate::error::{CliError, Result};

pub const ENV_PREFIX: &str = "SNNFORGE__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    ShapesSeg,
    NoisyImages,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset root with `train/` and `test/`; defaults to `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generator used by `gen-synthetic`; defaults from the task.
    pub kind: Option<SyntheticKind>,
    pub train_count: usize,
    pub test_count: usize,
    pub size: usize,
    /// Noise standard deviation in 8-bit units used for denoising runs.
    pub noise_level: u32,
    pub num_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { kind: None, train_count: 500, test_count: 100, size: 64, noise_level: 25, num_classes: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width_factor: f64,
    pub in_channels: usize,
    /// Defaults to the class count (segmentation) or `in_channels` (denoising).
    pub out_channels: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width_factor: 1.0 / 16.0, in_channels: 1, out_channels: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub flip_augment: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerConfig::adam(3e-3), epochs: 12, batch_size: 8, flip_augment: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub percentile: f64,
    /// Training samples the statistics are gathered over.
    pub max_samples: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { percentile: 99.9, max_samples: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub steps: usize,
    /// Test samples simulated by `simulate`.
    pub samples: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { steps: 20, samples: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub flip_augment: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { steps: 20, optimizer: OptimizerConfig::adam(1e-6), epochs: 1, batch_size: 8, flip_augment: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Ann,
    Converted,
    Finetuned,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Ann => "ann",
            ModelChoice::Converted => "converted",
            ModelChoice::Finetuned => "finetuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub models: Vec<ModelChoice>,
    /// Simulation window; defaults to `simulation.steps`.
    pub steps: Option<usize>,
    /// Evaluate only the first `limit` test samples.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { models: vec![ModelChoice::Ann, ModelChoice::Converted], steps: None, limit: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub model: EnergyModel,
    /// Which spiking network to measure.
    pub network: ModelChoice,
    pub samples: usize,
    pub steps: Option<usize>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self { model: EnergyModel::default(), network: ModelChoice::Converted, samples: 16, steps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Drives every random choice of the run.
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub conversion: ConversionConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) in `root`, creating objects as needed.
fn set_path(root: &mut Value, path: &[String], value: Value) -> std::result::Result<(), String> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| format!("`{}` is not a section", path[..i].join(".")))?;
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    Err("empty key".into())
}

/// Environment variables carrying the prefix, as `(dotted.key, value)` sorted by key.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.split("__").map(str::to_ascii_lowercase).collect::<Vec<_>>().join("."), v))
        })
        .collect();
    out.sort();
    out
}

impl ExperimentConfig {
    /// Reads `path`, applies `env` then `flags` (each `key=value`), and validates.
    pub fn load(path: &Path, env: &[(String, String)], flags: &[String]) -> Result<Self> {
        if !path.is_file() {
            return Err(CliError::missing(path, "configuration file not found"));
        }
        let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        let mut errors = Vec::new();
        for (key, raw) in env {
            if let Err(e) =
                set_path(&mut value, &key.split('.').map(String::from).collect::<Vec<_>>(), parse_value(raw))
            {
                errors.push(format!("environment override {key}: {e}"));
            }
        }
        for flag in flags {
            match flag.split_once('=') {
                Some((key, raw)) if !key.is_empty() => {
                    if let Err(e) =
                        set_path(&mut value, &key.split('.').map(String::from).collect::<Vec<_>>(), parse_value(raw))
                    {
                        errors.push(format!("override {key}: {e}"));
                    }
                }
                _ => errors.push(format!("override `{flag}` is not of the form key=value")),
            }
        }
        if !errors.is_empty() {
            return Err(CliError::Config(errors));
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| CliError::Config(vec![e.to_string()]))?;
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(CliError::Config(problems));
        }
        Ok(cfg)
    }

    /// Every violation found, empty when the configuration is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let d = &self.data;
        if d.size < 16 || d.size % 16 != 0 {
            v.push(format!("data.size must be a positive multiple of 16 (four 2x2 poolings), got {}", d.size));
        }
        if self.task == Task::Segmentation && d.num_classes < 2 {
            v.push(format!("data.num_classes must be at least 2 for segmentation, got {}", d.num_classes));
        }
        if d.num_classes > 256 {
            v.push("data.num_classes must fit 8-bit label images (at most 256)".into());
        }
        if d.noise_level == 0 {
            v.push("data.noise_level must be positive".into());
        }
        match (self.task, d.kind) {
            (Task::Segmentation, Some(SyntheticKind::NoisyImages))
            | (Task::Denoising, Some(SyntheticKind::ShapesSeg)) => {
                v.push(format!("data.kind {:?} does not fit task {:?}", d.kind.unwrap(), self.task))
            }
            _ => {}
        }
        if self.model.in_channels == 0 {
            v.push("model.in_channels must be positive".into());
        }
        if let Err(e) =
            build_unet(self.model.width_factor, self.model.in_channels.max(1), self.out_channels().max(1), self.task)
        {
            v.push(format!("model.width_factor: {e}"));
        }
        if let Some(o) = self.model.out_channels {
            let expected = self.default_out_channels();
            if o != expected {
                v.push(format!("model.out_channels is {o} but the task needs {expected}"));
            }
        }
        for (name, opt) in
            [("training.optimizer", &self.training.optimizer), ("finetune.optimizer", &self.finetune.optimizer)]
        {
            if let Err(e) = opt.validate() {
                v.push(format!("{name}: {e}"));
            }
        }
        if self.training.batch_size == 0 {
            v.push("training.batch_size must be positive".into());
        }
        if self.finetune.batch_size == 0 {
            v.push("finetune.batch_size must be positive".into());
        }
        if !(0.0..=100.0).contains(&self.stats.percentile) {
            v.push(format!("stats.percentile must lie in [0, 100], got {}", self.stats.percentile));
        }
        if self.stats.max_samples == 0 {
            v.push("stats.max_samples must be positive".into());
        }
        let c = &self.conversion;
        if c.thresholds == 0 || c.thresholds > 52 {
            v.push(format!("conversion.thresholds must lie in 1..=52, got {}", c.thresholds));
        }
        if !(c.v_max.is_finite() && c.v_max > 0.0) {
            v.push(format!("conversion.v_max must be positive, got {}", c.v_max));
        }
        for (layer, vm) in &c.v_max_overrides {
            if !(vm.is_finite() && *vm > 0.0) {
                v.push(format!("conversion.v_max_overrides.{layer} must be positive, got {vm}"));
            }
        }
        for (name, steps) in [
            ("simulation.steps", Some(self.simulation.steps)),
            ("finetune.steps", Some(self.finetune.steps)),
            ("eval.steps", self.eval.steps),
            ("energy.steps", self.energy.steps),
        ] {
            if steps == Some(0) {
                v.push(format!("{name} must be at least 1"));
            }
        }
        if self.eval.models.is_empty() {
            v.push("eval.models must name at least one model".into());
        }
        if let Err(e) = self.energy.model.validate() {
            v.push(format!("energy.model: {e}"));
        }
        v
    }

    fn default_out_channels(&self) -> usize {
        match self.task {
            Task::Segmentation => self.data.num_classes,
            Task::Denoising => self.model.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.model.out_channels.unwrap_or_else(|| self.default_out_channels())
    }

    pub fn synthetic_kind(&self) -> SyntheticKind {
        self.data.kind.unwrap_or(match self.task {
            Task::Segmentation => SyntheticKind::ShapesSeg,
            Task::Denoising => SyntheticKind::NoisyImages,
        })
    }
}

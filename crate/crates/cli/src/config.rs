//! Experiment configuration: one JSON document with strict keys, plus
//! `--set dotted.key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use needle_core::harness::TrainConfig;
use needle_core::{NetworkConfig, NormalizationConfig, OpticsConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub optics: OpticsConfig,
    pub normalization: NormalizationConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub calibration: CalibrationConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            optics: OpticsConfig::desk_scale(),
            normalization: NormalizationConfig::default(),
            network: NetworkConfig::desk_scale(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            calibration: CalibrationConfig::default(),
            bench: BenchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n: usize,
    /// Also write lossless `.ntwt` copies next to the PNG frames.
    pub raw_sidecar: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 606,
            raw_sidecar: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub min_poses: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            min_poses: needle_core::calibrate::DEFAULT_MIN_POSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_runs: usize,
    pub warmup: usize,
    /// Image sides to time; each gets a freshly initialised network.
    pub sides: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            warmup: 5,
            sides: vec![64, 400],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub poses: PathBuf,
    pub calibration: PathBuf,
    pub weights: PathBuf,
    pub model: PathBuf,
    pub loss_csv: PathBuf,
    pub metrics: PathBuf,
    pub latency: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            poses: "poses.json".into(),
            calibration: "run/calibration.json".into(),
            weights: "run/weights.ntwt".into(),
            model: "run/model.json".into(),
            loss_csv: "run/loss.csv".into(),
            metrics: "run/metrics.json".into(),
            latency: "run/latency.json".into(),
        }
    }
}

impl ExperimentConfig {
    /// Loads `path` (or the defaults) and applies `overrides` in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                let parsed: Self = serde_json::from_str(&text)
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                serde_json::to_value(parsed).expect("config serializes")
            }
            None => serde_json::to_value(Self::default()).expect("config serializes"),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{item}`")))?;
            apply_override(&mut doc, key.trim(), raw)?;
        }
        let cfg: Self =
            serde_json::from_value(doc).map_err(|e| CliError::Data(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.optics.validate()?;
        self.normalization.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.dataset.n == 0 {
            return Err(CliError::Data("invalid config `dataset.n`: must be >= 1".into()));
        }
        if self.bench.n_runs < 10 {
            return Err(CliError::Data(format!(
                "invalid config `bench.n_runs`: must be >= 10, got {}",
                self.bench.n_runs
            )));
        }
        Ok(())
    }
}

fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<(), CliError> {
    let unknown = || CliError::Data(format!("unknown config key `{key}`"));
    let mut node = doc;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|obj| obj.get_mut(part))
            .ok_or_else(unknown)?;
    }
    // bare words fall back to strings so paths need no quoting
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if std::mem::discriminant(node) != std::mem::discriminant(&value)
        && !(node.is_number() && value.is_number())
    {
        return Err(CliError::Data(format!(
            "config key `{key}` expects {}, got `{raw}`",
            kind(node)
        )));
    }
    *node = value;
    Ok(())
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::exec::Execution;
use crate::model::ModelConfig;
use crate::objective::{OptimizerConfig, TrainConfig};
use crate::preprocess::WindowOptions;
use crate::schema::{self, DatasetProfile};

/// Environment variable naming the config file used when none is given.
pub const CONFIG_ENV: &str = "TGRAPH_CONFIG";

/// Every file a run reads or writes. Relative paths resolve against the
/// working directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Annotated training corpus.
    pub corpus: Option<PathBuf>,
    /// Annotated corpus used to pick the best epoch.
    pub dev_corpus: Option<PathBuf>,
    pub windows: Option<PathBuf>,
    /// JSON summary written by `preprocess`.
    pub summary: Option<PathBuf>,
    /// Final checkpoint; also the model used by `predict` and `bench`.
    pub checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub loss_curve: Option<PathBuf>,
    /// Documents to predict on or benchmark with.
    pub input: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    /// Tab-separated evaluation report.
    pub report: Option<PathBuf>,
    pub bench_report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Also emit event-pair labels; the input must then carry events.
    pub events: bool,
    /// Thread limit for scoring windows (default: all cores).
    pub workers: Option<usize>,
    pub execution: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repetitions: usize,
    /// Untimed passes run before the measured ones.
    pub warmup: usize,
    pub workers: Option<usize>,
    pub execution: Execution,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repetitions: 10,
            warmup: 1,
            workers: None,
            execution: Execution::Parallel,
        }
    }
}

/// Complete description of a run. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub paths: Paths,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub preprocess: WindowOptions,
    pub predict: PredictConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: "tbdense".into(),
            paths: Paths::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            preprocess: WindowOptions::default(),
            predict: PredictConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Sets `a.b.c = value` inside a TOML table, creating tables on the way.
/// The value is read as TOML when it parses and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides (which win), and
    /// validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads the config file, if any, then applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                PipelineError::Config(format!("cannot read config {}: {e}", p.display()))
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset_profile(&self) -> Result<DatasetProfile, PipelineError> {
        schema::profile(&self.profile).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let config = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.dataset_profile()?;
        self.model.validate().map_err(|e| config(&e))?;
        self.optimizer.validate().map_err(|e| config(&e))?;
        self.train.validate().map_err(|e| config(&e))?;
        if self.preprocess.max_len == 0 {
            return Err(config(&"preprocess: max_len must be at least 1"));
        }
        if self.bench.repetitions == 0 {
            return Err(config(&"bench: repetitions must be at least 1"));
        }
        if self.predict.workers == Some(0) || self.bench.workers == Some(0) {
            return Err(config(&"workers must be at least 1"));
        }
        Ok(())
    }
}

/// Returns the path or a config error naming the missing key.
pub(crate) fn required<'a>(path: &'a Option<PathBuf>, key: &'static str) -> Result<&'a Path, PipelineError> {
    path.as_deref().ok_or(PipelineError::MissingPath(key))
}

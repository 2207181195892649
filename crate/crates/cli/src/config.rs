use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use convlr_core::baseline::GraspConfig;
use convlr_core::metrics::MetricOptions;
use convlr_core::network::{Ablation, NetworkConfig};
use convlr_core::simdata::DatasetConfig;
use convlr_core::training::TrainConfig;

use crate::error::{invalid, CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Convlr,
    Grasp,
    Regrid,
    GroundTruth,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Convlr => "convlr",
            Method::Grasp => "grasp",
            Method::Regrid => "regrid",
            Method::GroundTruth => "ground-truth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub split: String,
    pub methods: Vec<Method>,
    pub spokes: Vec<usize>,
    pub frames: Vec<usize>,
    /// Overrides the ablation recorded with a checkpoint.
    pub ablation: Option<Ablation>,
    pub max_sequences: Option<usize>,
    pub export_pgm: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            methods: vec![Method::Convlr, Method::Grasp, Method::Regrid],
            spokes: vec![4, 8, 16, 32],
            frames: vec![5],
            ablation: None,
            max_sequences: None,
            export_pgm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub dataset: DatasetConfig,
    pub model: NetworkConfig,
    pub training: TrainConfig,
    pub grasp: GraspConfig,
    pub evaluation: EvaluationConfig,
    pub metrics: MetricOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            dataset: DatasetConfig::default(),
            model: NetworkConfig::default(),
            training: TrainConfig::default(),
            grasp: GraspConfig::default(),
            evaluation: EvaluationConfig::default(),
            metrics: MetricOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("cannot parse {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Checks every section and every cross-reference between sections.
    pub fn validate(&self) -> CliResult<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(CliError::Validation(format!(
                "format_version {} is not supported (expected {CONFIG_VERSION})",
                self.format_version
            )));
        }
        self.dataset.validate().map_err(invalid)?;
        self.model.validate().map_err(invalid)?;
        self.training.validate().map_err(invalid)?;
        self.grasp.validate().map_err(invalid)?;
        self.metrics.validate().map_err(invalid)?;
        let d = &self.dataset;
        let t = &self.training;
        if !d.spokes.contains(&t.spokes) {
            return Err(CliError::Validation(format!(
                "training.spokes {} is not among dataset.spokes {:?}",
                t.spokes, d.spokes
            )));
        }
        if let Some(f) = t.frames {
            if f > d.frames {
                return Err(CliError::Validation(format!(
                    "training.frames {f} exceeds dataset.frames {}",
                    d.frames
                )));
            }
        }
        let e = &self.evaluation;
        if !["train", "val", "test"].contains(&e.split.as_str()) {
            return Err(CliError::Validation(format!(
                "evaluation.split must be train, val or test, got {}",
                e.split
            )));
        }
        if e.methods.is_empty() || e.spokes.is_empty() || e.frames.is_empty() {
            return Err(CliError::Validation(
                "evaluation.methods, spokes and frames must not be empty".into(),
            ));
        }
        if let Some(s) = e.spokes.iter().find(|s| !d.spokes.contains(s)) {
            return Err(CliError::Validation(format!(
                "evaluation.spokes entry {s} is not among dataset.spokes {:?}",
                d.spokes
            )));
        }
        if let Some(f) = e.frames.iter().find(|&&f| f == 0 || f > d.frames) {
            return Err(CliError::Validation(format!(
                "evaluation.frames entry {f} must lie in 1..={}",
                d.frames
            )));
        }
        if e.max_sequences == Some(0) {
            return Err(CliError::Validation("evaluation.max_sequences must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use bst::eval::EvalOptions;
use bst::features::synth::SynthParams;
use bst::features::{VocabConfig, DEFAULT_POSITION_EDGES};
use bst::model::BstConfig;
use bst::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub min_count: usize,
    pub max_size: Option<usize>,
    pub crosses: Vec<(String, String)>,
    pub position_edges: Vec<i64>,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            min_count: 1,
            max_size: None,
            crosses: Vec::new(),
            position_edges: DEFAULT_POSITION_EDGES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Run directory; a fresh `runs/<timestamp>-seed<seed>` when absent.
    pub run_dir: Option<PathBuf>,
    /// Directory holding `train.jsonl` and `test.jsonl`.
    pub data: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// 1-based day whose start separates train from test; defaults to the
    /// last generated day.
    pub split_day: Option<usize>,
    pub model: BstConfig,
    pub train: TrainConfig,
    pub synth: SynthParams,
    pub features: FeaturesConfig,
    pub eval: EvalOptions,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            split_day: None,
            model: BstConfig::default(),
            train: TrainConfig::default(),
            synth: SynthParams::default(),
            features: FeaturesConfig::default(),
            eval: EvalOptions::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let split = self.split_day();
        if split < 2 || split > self.synth.days {
            return Err(CliError::Config(format!(
                "split_day {split} must be between 2 and days ({})",
                self.synth.days
            )));
        }
        Ok(())
    }

    pub fn split_day(&self) -> usize {
        self.split_day.unwrap_or(self.synth.days)
    }

    /// Epoch second separating train (before) from test.
    pub fn split_boundary(&self) -> i64 {
        self.synth.day_start(self.split_day() - 1)
    }

    pub fn vocab(&self) -> VocabConfig {
        VocabConfig {
            min_count: self.features.min_count,
            max_size: self.features.max_size,
            crosses: self.features.crosses.clone(),
            position_edges: self.features.position_edges.clone(),
            item_dim: self.model.item_dim,
            category_dim: self.model.category_dim,
            position_dim: self.model.position_dim,
            other_dim: self.model.other_dim,
        }
    }

    /// The effective configuration as TOML, echoed into every artifact.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.run_dir.clone().unwrap_or_else(|| {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            PathBuf::from("runs").join(format!("{stamp}-seed{}", self.train.seed))
        })
    }

    pub fn data_dir(&self, run_dir: &Path) -> PathBuf {
        self.paths.data.clone().unwrap_or_else(|| run_dir.join("data"))
    }

    pub fn spec_path(&self, run_dir: &Path) -> PathBuf {
        self.paths.spec.clone().unwrap_or_else(|| run_dir.join("feature_spec.txt"))
    }

    pub fn checkpoint_path(&self, run_dir: &Path) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| run_dir.join(format!("{}.ckpt", self.train.model)))
    }

    pub fn report_path(&self, run_dir: &Path) -> PathBuf {
        self.paths.report.clone().unwrap_or_else(|| run_dir.join("metrics.txt"))
    }
}

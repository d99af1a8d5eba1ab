//! Run configuration: a TOML file with command-line overrides.

use std::path::{Path, PathBuf};

use epfgnn_core::dataset::{locate_citation_files, planetoid_split, ratio_split, Dataset, Split};
use epfgnn_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Planetoid,
    Ratio,
    /// The `split.tsv` shipped with a generic-format dataset.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub per_class: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            kind: SplitKind::Planetoid,
            per_class: 20,
            num_val: 500,
            num_test: 1000,
            train_frac: 0.2,
            val_frac: 0.2,
            test_frac: 0.6,
        }
    }
}

impl SplitSpec {
    /// Builds the split for one seed. Random kinds draw a fresh split per
    /// seed; the file kind returns the shipped split for every seed.
    pub fn build(&self, ds: &Dataset, shipped: Option<&Split>, seed: u64) -> Result<Split, CliError> {
        let split = match self.kind {
            SplitKind::Planetoid => planetoid_split(ds, self.per_class, self.num_val, self.num_test, seed)?,
            SplitKind::Ratio => ratio_split(ds, self.train_frac, self.val_frac, self.test_frac, seed)?,
            SplitKind::File => shipped
                .cloned()
                .ok_or_else(|| CliError::Config("split.kind = \"file\" but the dataset has no split.tsv".into()))?,
        };
        Ok(split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    /// Row-normalize features after loading.
    pub normalize_features: bool,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub split: SplitSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            normalize_features: true,
            seeds: vec![0],
            out: None,
            split: SplitSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let dataset = self
            .dataset
            .as_ref()
            .ok_or_else(|| CliError::Config("dataset: no dataset path given (set `dataset` or pass --dataset)".into()))?;
        if !dataset.exists() && locate_citation_files(dataset).is_none() {
            return Err(CliError::Config(format!("dataset: no dataset found at {}", dataset.display())));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds: at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::Config("seeds: duplicate seeds".into()));
        }
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))
    }
}

//! Run configuration, read from a TOML file. Every field has a default, so
//! an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use reserving::experiment::{ScenarioConfig, TailSettings};
use reserving::synthgen::GeneratorConfig;
use reserving::tail::{zeta_serde, DEFAULT_ZETA};
use reserving::train::ModelSetup;
use reserving::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub portfolio: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub outputs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub proportions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { proportions: [0.6, 0.2, 0.2], seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjustmentSettings {
    #[serde(with = "zeta_serde")]
    pub zeta: f64,
    /// Taken from the tail parameters file when absent.
    pub zero_run_reference: Option<f64>,
}

impl Default for AdjustmentSettings {
    fn default() -> Self {
        Self { zeta: DEFAULT_ZETA, zero_run_reference: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
    pub model: ModelSetup,
    pub alpha: f64,
    pub alpha_candidates: Vec<f64>,
    pub backdate_offset: u32,
    pub tail: TailSettings,
    pub adjustment: AdjustmentSettings,
    /// Include the large-claim stage in `report`.
    pub report_tail: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            generator: GeneratorConfig::default(),
            split: SplitConfig::default(),
            model: ModelSetup::default(),
            alpha: 0.2,
            alpha_candidates: (1..=25).map(|i| i as f64 / 10.0).collect(),
            backdate_offset: 1,
            tail: TailSettings::default(),
            adjustment: AdjustmentSettings::default(),
            report_tail: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::parse(&std::fs::read_to_string(p)?),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    pub fn emit(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(format!("config: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the emitted configuration.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.emit()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            name: "report".into(),
            generator: self.generator.clone(),
            split: self.split.proportions,
            split_seed: self.split.seed,
            setup: self.model.clone(),
            alpha: self.alpha,
            tail: self.report_tail.then(|| self.tail.clone()),
        }
    }
}

//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Tolerance;
use crate::model::BackboneConfig;
use crate::postprocess::Thresholds;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

/// Every section is optional; missing keys take their defaults and unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub model: BackboneConfig,
    pub thresholds: Thresholds,
    pub eval: Tolerance,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration always serialises") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        let t = &self.thresholds;
        if !(0.0..=1.0).contains(&t.proposal) || !(0.0..=1.0).contains(&t.final_) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        if !(self.eval.dist > 0.0 && self.eval.angle > 0.0) {
            return Err(Error::Config(
                "evaluation tolerances must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Sets every seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }
}

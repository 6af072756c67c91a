use std::fs;
use std::path::Path;

use advmos_core::predictor::TrainConfig;
use advmos_core::{AdvTrainConfig, AttackConfig, Error, Result, SynthSpec};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with. Every table is optional; missing
/// keys take their defaults and unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of every stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub advtrain: AdvTrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Applies a command-line seed, then pushes the global seed into every
    /// stage and validates the result.
    pub fn resolve(mut self, cli_seed: Option<u64>) -> Result<Self> {
        if cli_seed.is_some() {
            self.seed = cli_seed;
        }
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.train.seed = seed;
            self.attack.seed = seed;
            self.advtrain.seed = seed;
        }
        self.synth.validate()?;
        self.train.validate()?;
        self.attack.validate()?;
        self.advtrain.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

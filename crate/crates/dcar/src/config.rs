//! One JSON file drives a whole experiment. Every section and every field
//! defaults, so a config file only needs the overrides it cares about;
//! unknown keys are rejected to catch typos.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcpo::DcpoConfig;
use crate::decode::SamplingConfig;
use crate::model::{CarModelConfig, TrainConfig};
use crate::policy::PolicyConfig;
use crate::world::WorldConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("inconsistent config: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub n_policy: usize,
    pub text_len_min: usize,
    pub text_len_max: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 2000, n_eval: 200, n_policy: 980, text_len_min: 6, text_len_max: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 0, max_new_tokens: 256 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub model: CarModelConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub dcpo: DcpoConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        cfg.check_consistency()?;
        Ok(cfg)
    }

    /// Cross-section invariants that individual `validate` calls cannot see.
    pub fn check_consistency(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Inconsistent(m));
        if self.model.token_vocab != self.world.token_vocab() {
            return bad(format!(
                "model token_vocab {} but world needs {}",
                self.model.token_vocab,
                self.world.token_vocab()
            ));
        }
        if self.model.text_vocab != self.world.symbol_count {
            return bad(format!(
                "model text_vocab {} but world has {} symbols",
                self.model.text_vocab, self.world.symbol_count
            ));
        }
        if self.policy.d_in != self.model.d_model {
            return bad(format!(
                "policy d_in {} but model d_model {}",
                self.policy.d_in, self.model.d_model
            ));
        }
        let heads = self.model.total_heads();
        if self.policy.action_set.iter().any(|&a| a > heads) {
            return bad(format!(
                "action set {:?} exceeds {heads} heads",
                self.policy.action_set
            ));
        }
        if self.data.text_len_min < 1 || self.data.text_len_max < self.data.text_len_min {
            return bad(format!(
                "text length range {}..={} is infeasible",
                self.data.text_len_min, self.data.text_len_max
            ));
        }
        Ok(())
    }
}

use std::path::Path;

use contrastive_core::data::GenSpec;
use contrastive_core::eval::EvalConfig;
use contrastive_core::trainer::TrainConfig;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::{usage, Failure};

/// Everything needed to reproduce a train/eval run. The resolved copy (after
/// flag overrides) is echoed next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_generation")]
    pub generation: GenSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Overrides the prompting flag recorded in the checkpoint.
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

fn default_generation() -> GenSpec {
    GenSpec::desk_default(0)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generation: default_generation(),
            train: TrainConfig::default(),
            eval: None,
        }
    }
}

impl RunConfig {
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.generation.seed = s;
            self.train.seed = s;
            self.train.encoder.init_seed = s;
        }
        self
    }
}

/// Reads a JSON config; unreadable or malformed files are usage errors.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    path.map_or_else(|| Ok(T::default()), load_json)
}

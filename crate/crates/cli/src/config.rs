//! Training configuration files.
//!
//! ```json
//! { "model": { "stages": 2, "flags": { "denoise": false } },
//!   "train": { "learning_rate": 0.0005, "batch_size": 8 } }
//! ```
//!
//! Both sections are optional and every field inside them defaults. Unknown
//! keys are rejected with their path.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sct_core::train::TrainConfig;
use sct_core::SctConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: Option<SctConfig>,
    pub train: Option<TrainConfig>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("at `{path}`: {}", e.into_inner())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("malformed config {}", path.display()))
    }
}

/// What `train` actually runs with; echoed before training and saved next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Effective<'a> {
    pub model: &'a SctConfig,
    pub train: &'a TrainConfig,
}

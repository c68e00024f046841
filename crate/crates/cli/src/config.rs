//! Configuration files and flag overrides.
//!
//! A config file is TOML with up to three sections, each optional:
//!
//! ```toml
//! [synth]
//! shift = 0.5
//!
//! [preproc]
//! align = false
//!
//! [train]
//! lambda1 = 2.0
//! max_epochs_stage1 = 200
//! ```
//!
//! Precedence, lowest to highest: built-in defaults, the config file, then
//! command-line flags. The resolved result is written into every manifest.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sdda::data::SynthConfig;
use sdda::preproc::PreprocConfig;
use sdda::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub preproc: PreprocConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Sets `field` when the flag was given.
pub(crate) fn set<T>(field: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *field = v;
    }
}

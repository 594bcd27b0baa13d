//! Config-file loading.
//!
//! The file is TOML with three optional sections, each mirroring a library
//! config struct field for field:
//!
//! ```toml
//! [gen]     # dataset generation  (canvas, classes, colors, sizes, seed, ...)
//! [model]   # model architecture  (range, tokenizer.*, decoder.*, ...)
//! [train]   # training run        (stage, epochs, lr, batch_size, freeze.*, ...)
//! ```
//!
//! Missing sections fall back to defaults; command-line flags override file
//! values. Unknown top-level keys are rejected so typos fail loudly.

use std::path::Path;

use anyhow::{Context, Result};
use vistask::data::GenConfig;
use vistask::model::ModelConfig;
use vistask::train::TrainConfig;

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub gen: Option<GenConfig>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
}

impl FileConfig {
    /// Loads `path`, or returns the all-defaults config when `None`.
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        self.gen.clone().unwrap_or_default()
    }

    /// The model section, defaulting to the CPU-sized preset.
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(ModelConfig::small)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }
}

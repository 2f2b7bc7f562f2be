use std::path::{Path, PathBuf};

use muse_core::distill::DistillConfig;
use muse_core::evalsuite::EvalConfig;
use muse_core::finetune::FtConfig;
use muse_core::gradsuite::GradSuiteConfig;
use muse_core::{ModelConfig, MultiCropConfig, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a command needs, read from one TOML file. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub sampler: MultiCropConfig,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub finetune: FtConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradSuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            synth: SynthConfig::default(),
            sampler: MultiCropConfig::default(),
            model: ModelConfig::default(),
            distill: DistillConfig::default(),
            finetune: FtConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradSuiteConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    CliError::Config(msg) => CliError::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.sampler.validate()?;
        self.model.validate()?;
        self.distill.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

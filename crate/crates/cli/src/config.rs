//! Experiment configuration loaded from TOML.

use std::path::{Path, PathBuf};

use eqdiff_core::sampler::SamplerConfig;
use eqdiff_core::DiffusionConfig;
use eqdiff_synthbench::GenConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// Implicit diffusion policy with the rotation-equivariant network.
    Idpoe,
    /// The same policy with unconstrained layers.
    IdpoeNoEquiv,
    /// Conditional diffusion over actions given the clean clip.
    ExplicitDiffusion,
    /// Direct regression from clip to trajectory.
    Bc,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Idpoe => "idpoe",
            ModelChoice::IdpoeNoEquiv => "idpoe_no_equiv",
            ModelChoice::ExplicitDiffusion => "explicit_diffusion",
            ModelChoice::Bc => "bc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelChoice,
    pub out_dir: PathBuf,
    /// Dataset root; defaults to `<out_dir>/dataset`.
    pub dataset: Option<PathBuf>,
    pub device: String,
    pub diffusion: DiffusionConfig,
    pub sampler: SamplerConfig,
    pub synth: GenConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelChoice::Idpoe,
            out_dir: PathBuf::from("runs"),
            dataset: None,
            device: "cpu".into(),
            diffusion: DiffusionConfig::default(),
            sampler: SamplerConfig::default(),
            synth: GenConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    /// Diffusion settings with the network flavour implied by the model kind.
    pub fn model_config(&self) -> DiffusionConfig {
        let mut d = self.diffusion.clone();
        match self.model {
            ModelChoice::Idpoe => d.network.equivariant = true,
            ModelChoice::IdpoeNoEquiv => d.network.equivariant = false,
            ModelChoice::ExplicitDiffusion | ModelChoice::Bc => {}
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(CliError::config(format!(
                "device '{}' is not available; only 'cpu' is supported",
                self.device
            )));
        }
        self.model_config().validate()?;
        self.synth.validate()?;
        Ok(())
    }
}

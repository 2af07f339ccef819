use std::path::Path;

use fusionseg_core::lesioneval::EvalConfig;
use fusionseg_core::phantom::PhantomConfig;
use fusionseg_core::pipeline::{InferenceConfig, TrainConfig};
use fusionseg_core::preprocess::PreprocessConfig;
use fusionseg_core::register::RegistrationConfig;
use fusionseg_nn::UNetConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const LOCK_FILE: &str = "config.lock.json";

/// Every module configuration in one document. Missing sections and
/// fields take their defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub registration: RegistrationConfig,
    /// `in_channels` is taken from the training setup.
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |stage: &str, r: Result<(), String>| r.map_err(|e| CliError::Validation(format!("{stage}: {e}")));
        v("phantom", self.phantom.validate().map_err(|e| e.to_string()))?;
        v("preprocess", self.preprocess.validate().map_err(|e| e.to_string()))?;
        v("registration", self.registration.validate().map_err(|e| e.to_string()))?;
        v("unet", self.unet.validate().map_err(|e| e.to_string()))?;
        v("train", self.train.validate().map_err(|e| e.to_string()))?;
        v("inference", self.inference.validate().map_err(|e| e.to_string()))?;
        v("evaluation", self.evaluation.validate().map_err(|e| e.to_string()))
    }

    /// Effective configuration as written to `config.lock.json`.
    pub fn write_lock(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(dir.join(LOCK_FILE), text + "\n").map_err(|e| CliError::runtime("config", e))
    }
}

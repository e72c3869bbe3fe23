use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochReport, TdmConfig, TdmModel};
use crate::error::{Error, Result};

pub const TDM_FORMAT_VERSION: u32 = 1;

/// Self-describing TDM checkpoint, stored as JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TdmCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub config: TdmConfig,
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_epoch: Option<EpochReport>,
    /// Set when training aborted; the model is the last finite state.
    pub abort_reason: Option<String>,
    pub parameter_fingerprint: String,
    pub compat_fingerprint: String,
    pub model: TdmModel,
}

impl TdmCheckpoint {
    pub fn new(model: TdmModel, config: TdmConfig, seed: u64, epochs_completed: usize) -> Self {
        TdmCheckpoint {
            format_version: TDM_FORMAT_VERSION,
            kind: "tdm".into(),
            config,
            seed,
            epochs_completed,
            final_epoch: None,
            abort_reason: None,
            parameter_fingerprint: model.parameter_fingerprint(),
            compat_fingerprint: model.compat_fingerprint(),
            model,
        }
    }

    /// Checks the header and that the stored fingerprints match the stored
    /// parameters.
    pub fn verify(&self) -> Result<()> {
        if self.kind != "tdm" {
            return Err(Error::Format(format!("expected a tdm checkpoint, found `{}`", self.kind)));
        }
        if self.format_version != TDM_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported tdm checkpoint version {} (expected {TDM_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.model.parameter_fingerprint() != self.parameter_fingerprint {
            return Err(Error::Format("tdm parameters do not match their fingerprint".into()));
        }
        if self.model.compat_fingerprint() != self.compat_fingerprint {
            return Err(Error::Format("tdm compatibility fingerprint is stale".into()));
        }
        Ok(())
    }
}

pub fn save_tdm(path: &Path, checkpoint: &TdmCheckpoint) -> Result<()> {
    let text = serde_json::to_string(checkpoint)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_tdm(path: &Path) -> Result<TdmCheckpoint> {
    if !path.exists() {
        return Err(Error::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let ckpt: TdmCheckpoint = serde_json::from_str(&text)?;
    ckpt.verify()?;
    Ok(ckpt)
}

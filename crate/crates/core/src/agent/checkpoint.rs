use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AugmentationRule, TsrlAgent};
use crate::error::{Error, Result};

pub const TSRL_FORMAT_VERSION: u32 = 1;

/// Full agent state: networks, optimizers, RNG, the embedded frozen TDM
/// and the augmentation rule, so training resumes bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TsrlCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub env: String,
    pub seed: u64,
    pub tdm_parameter_fingerprint: String,
    pub tdm_compat_fingerprint: String,
    pub augmentation: Option<AugmentationRule>,
    pub agent: TsrlAgent,
}

impl TsrlCheckpoint {
    pub fn new(agent: TsrlAgent, augmentation: Option<AugmentationRule>, env: &str, seed: u64) -> Self {
        TsrlCheckpoint {
            format_version: TSRL_FORMAT_VERSION,
            kind: "tsrl".into(),
            env: env.into(),
            seed,
            tdm_parameter_fingerprint: agent.tdm().parameter_fingerprint(),
            tdm_compat_fingerprint: agent.tdm().compat_fingerprint(),
            augmentation,
            agent,
        }
    }

    pub fn verify(&self) -> Result<()> {
        if self.kind != "tsrl" {
            return Err(Error::Format(format!("expected a tsrl checkpoint, found `{}`", self.kind)));
        }
        if self.format_version != TSRL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported tsrl checkpoint version {} (expected {TSRL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.agent.tdm().parameter_fingerprint() != self.tdm_parameter_fingerprint {
            return Err(Error::Format("embedded tdm does not match its fingerprint".into()));
        }
        self.agent.config().validate()
    }
}

pub fn save_tsrl(path: &Path, checkpoint: &TsrlCheckpoint) -> Result<()> {
    let text = serde_json::to_string(checkpoint)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_tsrl(path: &Path) -> Result<TsrlCheckpoint> {
    if !path.exists() {
        return Err(Error::Validation(format!("checkpoint {} does not exist", path.display())));
    }
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let ckpt: TsrlCheckpoint = serde_json::from_str(&text)?;
    ckpt.verify()?;
    Ok(ckpt)
}

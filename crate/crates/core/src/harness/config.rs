use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::TsrlConfig;
use crate::envs::{BehaviorPolicy, EnvParams};
use crate::error::{Error, Result};
use crate::tdm::TdmConfig;

/// Generates a dataset by rolling out a behavior policy in an oracle
/// environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvRecipe {
    pub name: String,
    #[serde(default)]
    pub params: EnvParams,
    pub behavior: BehaviorPolicy,
    pub transitions: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Exactly one of `path` and `env` must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSource {
    pub path: Option<PathBuf>,
    pub env: Option<EnvRecipe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationParams {
    /// Quantile of the training-set scores used as the acceptance threshold.
    pub tau: f64,
    /// Perturbation std as a multiple of the per-dimension latent std.
    pub noise_scale: f64,
    /// Perturbations drawn per transition.
    pub k: usize,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams {
            tau: 0.5,
            noise_scale: 0.01,
            k: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    /// Environment to evaluate in. Defaults to the dataset recipe's.
    pub env: Option<String>,
    pub env_params: Option<EnvParams>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Steps between evaluations; the final step is always evaluated.
    pub interval: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            env: None,
            env_params: None,
            episodes: 5,
            seeds: vec![0, 1, 2],
            interval: 5000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    /// Training steps between metrics records.
    pub log_interval: usize,
    pub dataset: DatasetSource,
    pub augmentation: AugmentationParams,
    pub eval: EvalProtocol,
    pub tdm: TdmConfig,
    pub tsrl: TsrlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F64,
            output_dir: PathBuf::from("runs/default"),
            log_interval: 1000,
            dataset: DatasetSource::default(),
            augmentation: AugmentationParams::default(),
            eval: EvalProtocol::default(),
            tdm: TdmConfig::default(),
            tsrl: TsrlConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file and applies `key.path=value` overrides on top.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Validation(format!("config {} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        if self.precision == Precision::F32 {
            return Err(Error::Config(
                "32-bit precision is not supported; every computation runs in f64".into(),
            ));
        }
        match (&self.dataset.path, &self.dataset.env) {
            (Some(p), None) => {
                if !p.exists() {
                    return Err(Error::Validation(format!("dataset {} does not exist", p.display())));
                }
            }
            (None, Some(r)) => {
                if r.transitions < 2 {
                    return Err(Error::Config("an env recipe needs at least two transitions".into()));
                }
            }
            _ => {
                return Err(Error::Config(
                    "exactly one of dataset.path and dataset.env must be set".into(),
                ))
            }
        }
        if self.log_interval == 0 || self.eval.interval == 0 {
            return Err(Error::Config("log and eval intervals must be positive".into()));
        }
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&a.tau) || a.k == 0 || !(a.noise_scale >= 0.0) {
            return Err(Error::Config("augmentation needs tau in [0, 1], k >= 1 and noise_scale >= 0".into()));
        }
        self.tdm.validate()?;
        self.tsrl.validate()
    }

    /// Environment used for evaluation, if one can be determined.
    pub fn eval_env_spec(&self) -> Option<(String, EnvParams)> {
        match (&self.eval.env, &self.dataset.env) {
            (Some(name), _) => Some((name.clone(), self.eval.env_params.clone().unwrap_or_default())),
            (None, Some(r)) => Some((r.name.clone(), self.eval.env_params.clone().unwrap_or_else(|| r.params.clone()))),
            (None, None) => None,
        }
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("override `{assignment}` is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Argument(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Argument(format!("override key `{key}` crosses a non-table value")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

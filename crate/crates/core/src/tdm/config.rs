use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// Which terms of the objective a model is trained with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TdmVariant {
    /// Full model: ODE-constrained forward and reverse dynamics plus
    /// T-symmetry.
    #[default]
    #[serde(rename = "TDM")]
    Tdm,
    /// `f` and `g` regress `ż_s` and `−ż_s` directly instead of the encoder
    /// JVP; the other terms are kept.
    #[serde(rename = "TDM-no-ODE")]
    TdmNoOde,
    /// Autoencoder plus a forward model on `z_s' − z_s`; no reverse model.
    #[serde(rename = "AE-fwd-rep")]
    AeFwdRep,
    /// Plain autoencoder.
    #[serde(rename = "AE-rep")]
    AeRep,
}

impl TdmVariant {
    pub fn name(self) -> &'static str {
        match self {
            TdmVariant::Tdm => "TDM",
            TdmVariant::TdmNoOde => "TDM-no-ODE",
            TdmVariant::AeFwdRep => "AE-fwd-rep",
            TdmVariant::AeRep => "AE-rep",
        }
    }
}

impl std::str::FromStr for TdmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TdmVariant::Tdm, TdmVariant::TdmNoOde, TdmVariant::AeFwdRep, TdmVariant::AeRep]
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown TDM variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub ds: f64,
    pub fwd: f64,
    pub rvs: f64,
    pub tsym: f64,
    /// Coefficient of the L1 penalty on the dynamics parameters.
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            ds: 1.0,
            fwd: 0.1,
            rvs: 0.1,
            tsym: 1.0,
            l1: 1e-5,
        }
    }
}

/// Dataset scale buckets with their TDM epoch budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRegime {
    /// 5k and 10k locomotion subsamples.
    LocomotionSmall,
    /// 50k and 100k locomotion subsamples.
    LocomotionMedium,
    LocomotionFull,
    /// 5k and 10k Adroit subsamples.
    AdroitSmall,
    AdroitFull,
}

impl DataRegime {
    /// `(training_epochs, pretrain_epochs)`; pretraining counts toward the
    /// training total.
    pub fn epochs(self) -> (usize, usize) {
        match self {
            DataRegime::LocomotionSmall => (2000, 200),
            DataRegime::LocomotionMedium => (1000, 100),
            DataRegime::LocomotionFull => (200, 20),
            DataRegime::AdroitSmall => (2000, 0),
            DataRegime::AdroitFull => (200, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdmConfig {
    /// Defaults to the state dimension.
    pub latent_state_dim: Option<usize>,
    /// Defaults to the action dimension.
    pub latent_action_dim: Option<usize>,
    pub encoder_hidden: Vec<usize>,
    pub dynamics_hidden_width: usize,
    /// Number of affine layers in each dynamics network.
    pub dynamics_layers: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub training_epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub use_enhanced_tsym: bool,
    pub variant: TdmVariant,
}

impl Default for TdmConfig {
    fn default() -> Self {
        let (training_epochs, pretrain_epochs) = DataRegime::LocomotionSmall.epochs();
        TdmConfig {
            latent_state_dim: None,
            latent_action_dim: None,
            encoder_hidden: vec![512, 256, 128],
            dynamics_hidden_width: 512,
            dynamics_layers: 4,
            activation: Activation::Relu,
            learning_rate: 3e-4,
            weights: LossWeights::default(),
            training_epochs,
            pretrain_epochs,
            batch_size: 256,
            use_enhanced_tsym: false,
            variant: TdmVariant::Tdm,
        }
    }
}

impl TdmConfig {
    pub fn with_regime(mut self, regime: DataRegime) -> Self {
        (self.training_epochs, self.pretrain_epochs) = regime.epochs();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_state_dim == Some(0) || self.latent_action_dim == Some(0) {
            return bad("latent dimensions must be positive".into());
        }
        if self.encoder_hidden.iter().any(|&w| w == 0) {
            return bad(format!("encoder widths must be positive, got {:?}", self.encoder_hidden));
        }
        if self.dynamics_hidden_width == 0 || self.dynamics_layers == 0 {
            return bad("dynamics width and depth must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.training_epochs == 0 {
            return bad("training epochs must be positive".into());
        }
        if self.pretrain_epochs > self.training_epochs {
            return bad(format!(
                "pretrain epochs ({}) exceed training epochs ({})",
                self.pretrain_epochs, self.training_epochs
            ));
        }
        let w = &self.weights;
        if [w.rec, w.ds, w.fwd, w.rvs, w.tsym, w.l1]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad(format!("loss weights must be finite and non-negative, got {w:?}"));
        }
        Ok(())
    }
}

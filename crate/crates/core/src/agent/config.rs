use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Switches that remove one component of the method each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Critics consume raw `(s, a)` instead of the latent representation.
    pub no_r: bool,
    /// Replace the latent-action and T-symmetry policy constraints with
    /// raw-action behavior cloning.
    pub no_p: bool,
    /// Disable latent augmentation.
    pub no_a: bool,
}

impl Ablations {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_r {
            parts.push("no-R");
        }
        if self.no_p {
            parts.push("no-P");
        }
        if self.no_a {
            parts.push("no-A");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// Policy-constraint weights for the dataset regimes the method was tuned
/// on. Where two values are listed for a regime the smaller one is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRegime {
    /// Full locomotion datasets: λ₁ ∈ {5, 10}, λ₂ = 1.
    LocomotionFull,
    /// 10k locomotion subsamples: λ₁ ∈ {100, 200}, λ₂ = 100.
    LocomotionSmall,
    /// Adroit: λ₁ = 10000, λ₂ = 1.
    Adroit,
}

impl LambdaRegime {
    pub fn lambdas(self) -> (f64, f64) {
        match self {
            LambdaRegime::LocomotionFull => (5.0, 1.0),
            LambdaRegime::LocomotionSmall => (100.0, 100.0),
            LambdaRegime::Adroit => (10_000.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsrlConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub discount: f64,
    /// Soft target update rate ρ.
    pub target_update_rate: f64,
    /// Std of target-policy smoothing noise, as a fraction of the action
    /// half-range.
    pub policy_noise: f64,
    /// Clip of the smoothing noise, as a fraction of the action half-range.
    pub noise_clip: f64,
    pub policy_update_freq: usize,
    pub iterations: usize,
    pub alpha0: f64,
    /// Weight of the latent-action constraint.
    pub lambda1: f64,
    /// Weight of the T-symmetry constraint.
    pub lambda2: f64,
    /// Weight of the behavior-cloning term used under `no_p`.
    pub bc_weight: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub hidden_width: usize,
    /// Hidden layers in the policy and in each critic.
    pub hidden_layers: usize,
    pub ablations: Ablations,
}

impl Default for TsrlConfig {
    fn default() -> Self {
        let (lambda1, lambda2) = LambdaRegime::LocomotionSmall.lambdas();
        TsrlConfig {
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            discount: 0.99,
            target_update_rate: 0.005,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_update_freq: 2,
            iterations: 1_000_000,
            alpha0: 2.5,
            lambda1,
            lambda2,
            bc_weight: 1.0,
            dropout_rate: 0.0,
            batch_size: 256,
            hidden_width: 512,
            hidden_layers: 2,
            ablations: Ablations::default(),
        }
    }
}

impl TsrlConfig {
    pub fn with_regime(mut self, regime: LambdaRegime) -> Self {
        (self.lambda1, self.lambda2) = regime.lambdas();
        self
    }

    /// Behavior cloning expressed through the ablation switches: raw
    /// critics, no augmentation, and a policy loss with the Q term zeroed.
    pub fn behavior_cloning(mut self) -> Self {
        self.ablations = Ablations {
            no_r: true,
            no_p: true,
            no_a: true,
        };
        self.alpha0 = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount must be in (0, 1), got {}", self.discount));
        }
        if !(self.target_update_rate > 0.0 && self.target_update_rate <= 1.0) {
            return bad(format!("target update rate must be in (0, 1], got {}", self.target_update_rate));
        }
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("policy_noise", self.policy_noise),
            ("noise_clip", self.noise_clip),
            ("alpha0", self.alpha0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("bc_weight", self.bc_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.policy_update_freq == 0 || self.batch_size == 0 || self.hidden_width == 0 || self.iterations == 0 {
            return bad("update frequency, batch size, width and iterations must be positive".into());
        }
        Ok(())
    }
}

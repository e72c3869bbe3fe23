//! TD3-style actor-critic on top of a frozen TDM.
//!
//! Critics score latent state-action pairs `φ(s, a)`. The policy maximizes
//! an α-normalized Q value while staying close to the data in latent action
//! space and keeping its own actions T-symmetric under the TDM.

mod checkpoint;
mod config;

pub use checkpoint::{load_tsrl, save_tsrl, TsrlCheckpoint, TSRL_FORMAT_VERSION};
pub use config::{Ablations, LambdaRegime, TsrlConfig};

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentationRule, LatentBatch};
use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::nn::{hstack, row_sq_norm, Activation, Adam, Dropout, Mlp, MlpGrads};
use crate::tdm::TdmModel;

/// Floor of the α denominator.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// `α₀ / max(mean |q|, 1e-8)`.
pub fn alpha_normalizer(q: &[f64], alpha0: f64) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::Argument("α needs at least one Q value".into()));
    }
    let mean_abs = q.iter().map(|v| v.abs()).sum::<f64>() / q.len() as f64;
    Ok(alpha0 / mean_abs.max(ALPHA_FLOOR))
}

/// `target ← (1 − ρ) target + ρ online`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, rho: f64) -> Result<()> {
    target.soft_update_from(online, rho)
}

/// `r + γ (1 − done) min(q1, q2)`, row by row.
pub fn td_targets(
    rewards: ArrayView1<f64>,
    done: ArrayView1<f64>,
    q1_next: ArrayView1<f64>,
    q2_next: ArrayView1<f64>,
    discount: f64,
) -> Array1<f64> {
    let mut y = Array1::zeros(rewards.len());
    for i in 0..y.len() {
        let q = q1_next[i].min(q2_next[i]);
        y[i] = rewards[i] + if done[i] > 0.5 { 0.0 } else { discount * q };
    }
    y
}

/// A normalized dataset with its latent encodings cached. The TDM is
/// frozen during policy learning, so `φ(s, a)` and `φ(s', a)` never change.
#[derive(Clone, Debug)]
pub struct TsrlData {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub done: Array1<f64>,
    pub z_s: Array2<f64>,
    pub z_a: Array2<f64>,
    pub z_next: Array2<f64>,
}

impl TsrlData {
    /// `dataset` must already be normalized with the TDM's statistics.
    pub fn new(dataset: &TransitionDataset, tdm: &TdmModel) -> Result<Self> {
        let cur = tdm.encode(dataset.states(), dataset.actions())?;
        let next = tdm.encode(dataset.next_states(), dataset.actions())?;
        Ok(TsrlData {
            states: dataset.states().to_owned(),
            actions: dataset.actions().to_owned(),
            rewards: dataset.rewards().to_owned(),
            next_states: dataset.next_states().to_owned(),
            done: dataset.done_mask(),
            z_s: cur.z_s,
            z_a: cur.z_a,
            z_next: next.z_s,
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, idx: &[usize]) -> Batch {
        Batch {
            s: self.states.select(Axis(0), idx),
            a: self.actions.select(Axis(0), idx),
            r: self.rewards.select(Axis(0), idx),
            s_next: self.next_states.select(Axis(0), idx),
            done: self.done.select(Axis(0), idx),
            z_s: self.z_s.select(Axis(0), idx),
            z_a: self.z_a.select(Axis(0), idx),
            z_next: self.z_next.select(Axis(0), idx),
        }
    }
}

/// One sampled mini-batch of dataset rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s_next: Array2<f64>,
    pub done: Array1<f64>,
    pub z_s: Array2<f64>,
    pub z_a: Array2<f64>,
    pub z_next: Array2<f64>,
}

/// Augmented rows in the form the critic consumes.
struct ExtraRows {
    input: Array2<f64>,
    target_input: Array2<f64>,
    r: Array1<f64>,
    done: Array1<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub critic_loss: f64,
    pub policy_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub kept_fraction: f64,
    pub q_mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TsrlAgent {
    config: TsrlConfig,
    tdm: TdmModel,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    policy: Mlp,
    policy_target: Mlp,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    total_it: u64,
    rng: ChaCha8Rng,
}

impl TsrlAgent {
    pub fn new(config: TsrlConfig, tdm: TdmModel, action_low: Vec<f64>, action_high: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        let (ds, da) = (tdm.state_dim(), tdm.action_dim());
        if action_low.len() != da || action_high.len() != da {
            return Err(Error::Shape(format!("action bounds must have {da} entries")));
        }
        if action_low.iter().zip(&action_high).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("every action lower bound must be below its upper bound".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.hidden_width;
        let hidden = vec![w; config.hidden_layers];
        let sizes = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(&hidden);
            v.push(output);
            v
        };
        let critic_in = if config.ablations.no_r {
            ds + da
        } else {
            tdm.latent_state_dim() + tdm.latent_action_dim()
        };
        let policy = Mlp::new(&sizes(ds, da), Activation::Relu, Activation::Tanh, &mut rng);
        let q1 = Mlp::new(&sizes(critic_in, 1), Activation::Relu, Activation::Identity, &mut rng);
        let q2 = Mlp::new(&sizes(critic_in, 1), Activation::Relu, Activation::Identity, &mut rng);
        Ok(TsrlAgent {
            actor_opt: Adam::new(&policy, config.actor_lr),
            q1_opt: Adam::new(&q1, config.critic_lr),
            q2_opt: Adam::new(&q2, config.critic_lr),
            policy_target: policy.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            config,
            tdm,
            action_low,
            action_high,
            total_it: 0,
            rng,
        })
    }

    pub fn config(&self) -> &TsrlConfig {
        &self.config
    }

    pub fn tdm(&self) -> &TdmModel {
        &self.tdm
    }

    pub fn iterations(&self) -> u64 {
        self.total_it
    }

    pub fn policy(&self) -> &Mlp {
        &self.policy
    }

    pub fn critics(&self) -> (&Mlp, &Mlp) {
        (&self.q1, &self.q2)
    }

    pub fn targets(&self) -> (&Mlp, &Mlp, &Mlp) {
        (&self.policy_target, &self.q1_target, &self.q2_target)
    }

    pub fn action_bounds(&self) -> (&[f64], &[f64]) {
        (&self.action_low, &self.action_high)
    }

    fn center_half(&self) -> (Array1<f64>, Array1<f64>) {
        let lo = Array1::from(self.action_low.clone());
        let hi = Array1::from(self.action_high.clone());
        ((&hi + &lo) * 0.5, (&hi - &lo) * 0.5)
    }

    fn scale_actions(&self, squashed: &Array2<f64>) -> Array2<f64> {
        let (c, h) = self.center_half();
        squashed * &h + &c
    }

    fn clip_actions(&self, a: &mut Array2<f64>) {
        for mut row in a.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = v.clamp(self.action_low[j], self.action_high[j]);
            }
        }
    }

    /// Deterministic actions for normalized states, without dropout.
    pub fn act_normalized(&self, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut a = self.scale_actions(&self.policy.forward(s)?);
        self.clip_actions(&mut a);
        Ok(a)
    }

    /// Evaluation-time action for a raw (unnormalized) state.
    pub fn act(&self, s: &[f64]) -> Result<Vec<f64>> {
        let norm = self.tdm.stats().normalize_row(s)?;
        let x = ArrayView2::from_shape((1, norm.len()), &norm).map_err(|e| Error::Argument(e.to_string()))?;
        Ok(self.act_normalized(x)?.row(0).to_vec())
    }

    /// Critic input for raw-space rows.
    fn critic_input(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.config.ablations.no_r {
            Ok(hstack(s, a))
        } else {
            Ok(self.tdm.encode(s, a)?.joined())
        }
    }

    fn target_actions(&mut self, s_next: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut a = self.scale_actions(&self.policy_target.forward(s_next)?);
        let (_, h) = self.center_half();
        let (sigma, clip) = (self.config.policy_noise, self.config.noise_clip);
        for mut row in a.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                *v += (sigma * e).clamp(-clip, clip) * h[j];
            }
        }
        self.clip_actions(&mut a);
        Ok(a)
    }

    /// Converts kept augmented latent rows into critic rows. Their target
    /// uses the row's own latent action; under `no_r` the latent states
    /// are decoded and paired with the source action.
    fn extra_rows(&self, batch: &Batch, aug: &LatentBatch, source: &[usize]) -> Result<ExtraRows> {
        let (input, target_input) = if self.config.ablations.no_r {
            let a = batch.a.select(Axis(0), source);
            let s = self.tdm.decode_state(aug.z_s.view(), 0.0)?;
            let s_next = self.tdm.decode_state(aug.z_next.view(), 0.0)?;
            (hstack(s.view(), a.view()), hstack(s_next.view(), a.view()))
        } else {
            (
                hstack(aug.z_s.view(), aug.z_a.view()),
                hstack(aug.z_next.view(), aug.z_a.view()),
            )
        };
        Ok(ExtraRows {
            input,
            target_input,
            r: aug.rewards.clone(),
            done: aug.done.clone(),
        })
    }

    fn critic_update(&mut self, batch: &Batch, extra: Option<ExtraRows>) -> Result<(f64, f64)> {
        let a_next = self.target_actions(batch.s_next.view())?;
        let mut input = if self.config.ablations.no_r {
            hstack(batch.s.view(), batch.a.view())
        } else {
            hstack(batch.z_s.view(), batch.z_a.view())
        };
        let mut target_input = self.critic_input(batch.s_next.view(), a_next.view())?;
        let mut r = batch.r.clone();
        let mut done = batch.done.clone();
        if let Some(x) = extra.filter(|x| x.input.nrows() > 0) {
            input = concatenate![Axis(0), input, x.input];
            target_input = concatenate![Axis(0), target_input, x.target_input];
            r = concatenate![Axis(0), r, x.r];
            done = concatenate![Axis(0), done, x.done];
        }
        let q1n = self.q1_target.forward(target_input.view())?;
        let q2n = self.q2_target.forward(target_input.view())?;
        let y = td_targets(r.view(), done.view(), q1n.column(0), q2n.column(0), self.config.discount);

        let n = y.len() as f64;
        let t1 = self.q1.forward_trace(input.view())?;
        let t2 = self.q2.forward_trace(input.view())?;
        let d1 = &t1.output().column(0) - &y;
        let d2 = &t2.output().column(0) - &y;
        let loss = d1.dot(&d1) / n + d2.dot(&d2) / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("critic loss at step {}", self.total_it)));
        }
        let q_mean = t1.output().column(0).mean().unwrap_or(0.0);
        let mut g1 = MlpGrads::zeros_like(&self.q1);
        let mut g2 = MlpGrads::zeros_like(&self.q2);
        let go1 = (d1 * (2.0 / n)).insert_axis(Axis(1));
        let go2 = (d2 * (2.0 / n)).insert_axis(Axis(1));
        self.q1.backward(&t1, go1.view(), Some(&mut g1));
        self.q2.backward(&t2, go2.view(), Some(&mut g2));
        if !(g1.is_finite() && g2.is_finite()) {
            return Err(Error::NonFinite(format!("critic gradient at step {}", self.total_it)));
        }
        self.q1_opt.step(&mut self.q1, &g1);
        self.q2_opt.step(&mut self.q2, &g2);
        Ok((loss, q_mean))
    }

    /// Policy loss, its parameter gradient, and α. With `alpha` given, that
    /// value is used instead of the batch normalizer.
    pub fn policy_objective(
        &mut self,
        batch: &Batch,
        alpha: Option<f64>,
        train: bool,
    ) -> Result<(f64, MlpGrads, f64)> {
        let cfg = self.config.clone();
        let ds = self.tdm.state_dim();
        let dz = self.tdm.latent_state_dim();
        let n = batch.s.nrows() as f64;
        let trace_pi = if train && cfg.dropout_rate > 0.0 {
            self.policy.forward_trace_dropout(
                batch.s.view(),
                Dropout {
                    rate: cfg.dropout_rate,
                    rng: &mut self.rng,
                },
            )?
        } else {
            self.policy.forward_trace(batch.s.view())?
        };
        let a_pi = self.scale_actions(trace_pi.output());
        let (_, half) = self.center_half();

        let need_encoder = !cfg.ablations.no_r || !cfg.ablations.no_p;
        let enc = if need_encoder {
            Some(self.tdm.encoder().forward_trace(hstack(batch.s.view(), a_pi.view()).view())?)
        } else {
            None
        };
        let critic_in = match &enc {
            Some(t) if !cfg.ablations.no_r => t.output().clone(),
            _ => hstack(batch.s.view(), a_pi.view()),
        };
        let tq = self.q1.forward_trace(critic_in.view())?;
        let q = tq.output().column(0).to_owned();
        let alpha = match alpha {
            Some(a) => a,
            None => alpha_normalizer(q.as_slice().unwrap(), cfg.alpha0)?,
        };
        let mut loss = -alpha * q.mean().unwrap_or(0.0);
        let gq = Array2::from_elem((q.len(), 1), -alpha / n);
        let g_critic_in = self.q1.backward(&tq, gq.view(), None);

        let mut g_a = Array2::<f64>::zeros(a_pi.dim());
        let mut g_enc_out = enc.as_ref().map(|t| Array2::<f64>::zeros(t.output().dim()));
        if cfg.ablations.no_r {
            g_a += &g_critic_in.slice(s![.., ds..]);
        } else if let Some(g) = g_enc_out.as_mut() {
            *g += &g_critic_in;
        }

        if cfg.ablations.no_p {
            let diff = &a_pi - &batch.a;
            loss += cfg.bc_weight * row_sq_norm(diff.view()).sum() / n;
            g_a.scaled_add(2.0 * cfg.bc_weight / n, &diff);
        } else {
            let t = enc.as_ref().expect("encoder pass for constraints");
            let g = g_enc_out.as_mut().unwrap();
            let zs_pi = t.output().slice(s![.., ..dz]);
            let za_pi = t.output().slice(s![.., dz..]);
            let diff = &za_pi - &batch.z_a;
            loss += cfg.lambda1 * row_sq_norm(diff.view()).sum() / n;
            g.slice_mut(s![.., dz..]).scaled_add(2.0 * cfg.lambda1 / n, &diff);
            let coef = Array1::from_elem(batch.s.nrows(), cfg.lambda2 / n);
            let (tsym, g_zs, g_za) = self.tdm.tsym_with_input_grad(zs_pi, za_pi, coef.view())?;
            loss += cfg.lambda2 * tsym.sum() / n;
            g.slice_mut(s![.., ..dz]).scaled_add(1.0, &g_zs);
            g.slice_mut(s![.., dz..]).scaled_add(1.0, &g_za);
        }
        if let (Some(t), Some(g)) = (&enc, &g_enc_out) {
            let gx = self.tdm.encoder().backward(t, g.view(), None);
            g_a += &gx.slice(s![.., ds..]);
        }
        let g_out = g_a * &half;
        let mut grads = MlpGrads::zeros_like(&self.policy);
        self.policy.backward(&trace_pi, g_out.view(), Some(&mut grads));
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("policy loss at step {}", self.total_it)));
        }
        Ok((loss, grads, alpha))
    }

    fn update_targets(&mut self) -> Result<()> {
        let rho = self.config.target_update_rate;
        soft_update(&mut self.policy_target, &self.policy, rho)?;
        soft_update(&mut self.q1_target, &self.q1, rho)?;
        soft_update(&mut self.q2_target, &self.q2, rho)
    }

    pub fn sample(&mut self, data: &TsrlData) -> Batch {
        let n = data.len();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        data.rows(&idx)
    }

    /// One iteration: sample, augment (unless disabled), update the
    /// critics, and on schedule update the policy and the targets.
    pub fn train_step(&mut self, data: &TsrlData, rule: Option<&AugmentationRule>) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Argument("cannot train on an empty dataset".into()));
        }
        let batch = self.sample(data);
        self.train_on_batch(&batch, rule)
    }

    pub fn train_on_batch(&mut self, batch: &Batch, rule: Option<&AugmentationRule>) -> Result<StepMetrics> {
        self.total_it += 1;
        let mut kept_fraction = 0.0;
        let extra = match rule {
            Some(rule) if !self.config.ablations.no_a => {
                let latent = LatentBatch {
                    z_s: batch.z_s.clone(),
                    z_a: batch.z_a.clone(),
                    rewards: batch.r.clone(),
                    z_next: batch.z_next.clone(),
                    done: batch.done.clone(),
                };
                let aug = augment_batch(&self.tdm, &latent, rule, &mut self.rng)?;
                kept_fraction = aug.kept_fraction();
                Some(self.extra_rows(batch, &aug.rows, &aug.source)?)
            }
            _ => None,
        };
        let (critic_loss, q_mean) = self.critic_update(batch, extra)?;
        let mut metrics = StepMetrics {
            step: self.total_it,
            critic_loss,
            policy_loss: None,
            alpha: None,
            kept_fraction,
            q_mean,
        };
        if self.total_it % self.config.policy_update_freq as u64 == 0 {
            let (loss, grads, alpha) = self.policy_objective(batch, None, true)?;
            self.actor_opt.step(&mut self.policy, &grads);
            self.update_targets()?;
            metrics.policy_loss = Some(loss);
            metrics.alpha = Some(alpha);
        }
        Ok(metrics)
    }
}

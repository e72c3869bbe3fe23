use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossBreakdown, TdmBatch, TdmConfig, TdmModel, TdmVariant};
use crate::data::{NormalizationStats, TransitionDataset};
use crate::error::{Error, Result};
use crate::nn::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Reconstruction only; dynamics networks are left untouched.
    Pretrain,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: Phase,
    /// Sample-weighted mean of the per-batch losses.
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Optimizers {
    encoder: Adam,
    state_decoder: Adam,
    action_decoder: Adam,
    forward_dynamics: Adam,
    reverse_dynamics: Adam,
}

/// Owns a model under training together with its optimizer and shuffling
/// state. A failed epoch leaves the model as it was before the offending
/// step, so it can still be written out for diagnosis.
pub struct TdmTrainer {
    model: TdmModel,
    config: TdmConfig,
    opt: Optimizers,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl TdmTrainer {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        config: &TdmConfig,
        stats: NormalizationStats,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TdmModel::new(state_dim, action_dim, config, stats, &mut rng)?;
        Ok(Self::from_model(model, config, rng))
    }

    fn from_model(model: TdmModel, config: &TdmConfig, rng: ChaCha8Rng) -> Self {
        let lr = config.learning_rate;
        let opt = Optimizers {
            encoder: Adam::new(&model.encoder, lr),
            state_decoder: Adam::new(&model.state_decoder, lr),
            action_decoder: Adam::new(&model.action_decoder, lr),
            forward_dynamics: Adam::new(&model.forward_dynamics, lr),
            reverse_dynamics: Adam::new(&model.reverse_dynamics, lr),
        };
        TdmTrainer {
            model,
            config: config.clone(),
            opt,
            rng,
            epoch: 0,
        }
    }

    /// Continues training an existing model with fresh optimizer state.
    pub fn resume(model: TdmModel, config: &TdmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::from_model(model, config, ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn model(&self) -> &TdmModel {
        &self.model
    }

    pub fn into_model(self) -> TdmModel {
        self.model
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.training_epochs
    }

    pub fn current_phase(&self) -> Phase {
        if self.epoch < self.config.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Full
        }
    }

    /// One gradient step on `batch`; returns the loss before the step.
    pub fn step(&mut self, batch: &TdmBatch<'_>, phase: Phase) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let (loss, grads) = self
            .model
            .objective(batch, &cfg.weights, cfg.use_enhanced_tsym, phase)?;
        let m = &mut self.model;
        let o = &mut self.opt;
        o.encoder.step(&mut m.encoder, &grads.encoder);
        o.state_decoder.step(&mut m.state_decoder, &grads.state_decoder);
        o.action_decoder.step(&mut m.action_decoder, &grads.action_decoder);
        if phase == Phase::Full {
            match m.variant {
                TdmVariant::AeRep => {}
                TdmVariant::AeFwdRep => {
                    o.forward_dynamics.step(&mut m.forward_dynamics, &grads.forward_dynamics);
                }
                TdmVariant::Tdm | TdmVariant::TdmNoOde => {
                    o.forward_dynamics.step(&mut m.forward_dynamics, &grads.forward_dynamics);
                    o.reverse_dynamics.step(&mut m.reverse_dynamics, &grads.reverse_dynamics);
                }
            }
        }
        Ok(loss)
    }

    /// One pass over `data` in shuffled mini-batches.
    pub fn run_epoch(&mut self, data: &TransitionDataset) -> Result<EpochReport> {
        if data.state_dim() != self.model.state_dim() || data.action_dim() != self.model.action_dim() {
            return Err(Error::Shape(format!(
                "dataset is {}x{}, model expects {}x{}",
                data.state_dim(),
                data.action_dim(),
                self.model.state_dim(),
                self.model.action_dim()
            )));
        }
        let phase = self.current_phase();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = LossBreakdown::default();
        let n = data.len() as f64;
        for chunk in order.chunks(self.config.batch_size) {
            let s = data.states().select(Axis(0), chunk);
            let a = data.actions().select(Axis(0), chunk);
            let s_next = data.next_states().select(Axis(0), chunk);
            let batch = TdmBatch {
                s: s.view(),
                a: a.view(),
                s_next: s_next.view(),
            };
            let loss = self.step(&batch, phase).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {}: {msg}", self.epoch)),
                other => other,
            })?;
            total.accumulate(&loss, chunk.len() as f64 / n);
        }
        let report = EpochReport {
            epoch: self.epoch,
            phase,
            loss: total,
        };
        self.epoch += 1;
        Ok(report)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, data: &TransitionDataset, mut on_epoch: impl FnMut(&EpochReport)) -> Result<()> {
        while !self.is_finished() {
            let report = self.run_epoch(data)?;
            log::debug!(
                "tdm epoch {} ({:?}): total {:.6} rec {:.6} tsym {:.6}",
                report.epoch,
                report.phase,
                report.loss.total,
                report.loss.rec,
                report.loss.tsym
            );
            on_epoch(&report);
        }
        Ok(())
    }
}

/// Trains a model on an already normalized dataset. `stats` are the
/// statistics that produced the normalization; they travel with the model.
pub fn train_tdm(
    dataset: &TransitionDataset,
    stats: NormalizationStats,
    config: &TdmConfig,
    seed: u64,
) -> Result<(TdmModel, Vec<EpochReport>)> {
    let mut trainer = TdmTrainer::new(dataset.state_dim(), dataset.action_dim(), config, stats, seed)?;
    let mut history = Vec::with_capacity(config.training_epochs);
    trainer.run(dataset, |r| history.push(r.clone()))?;
    Ok((trainer.into_model(), history))
}

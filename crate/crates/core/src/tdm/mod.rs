//! T-symmetry enforced dynamics model.
//!
//! An encoder maps `(s, a)` to latent `(z_s, z_a)`; decoders map back. A
//! latent forward model `f(z_s, z_a)` predicts `ż_s` and a reverse model
//! `g(z_s', z_a)` predicts `−ż_s`. Both are tied to the encoder through its
//! directional derivative along `ṡ = s' − s`, and to each other through the
//! T-symmetry residual `f(z_s, z_a) + g(z_s + f(z_s, z_a), z_a)`.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{load_tdm, save_tdm, TdmCheckpoint, TDM_FORMAT_VERSION};
pub use config::{DataRegime, LossWeights, TdmConfig, TdmVariant};
pub use train::{train_tdm, EpochReport, Phase, TdmTrainer};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{NormalizationStats, TransitionDataset};
use crate::error::{Error, Result};
use crate::nn::{hstack, row_sq_norm, with_indicator, Activation, DualTrace, Mlp, MlpGrads, Trace};

/// Latent state and latent action blocks of an encoding, row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub z_s: Array2<f64>,
    pub z_a: Array2<f64>,
}

impl Latents {
    pub fn joined(&self) -> Array2<f64> {
        hstack(self.z_s.view(), self.z_a.view())
    }
}

/// A batch of `(s, a, s')` rows in normalized state space.
#[derive(Clone, Copy, Debug)]
pub struct TdmBatch<'a> {
    pub s: ArrayView2<'a, f64>,
    pub a: ArrayView2<'a, f64>,
    pub s_next: ArrayView2<'a, f64>,
}

impl<'a> TdmBatch<'a> {
    pub fn from_dataset(d: &'a TransitionDataset) -> Self {
        TdmBatch {
            s: d.states(),
            a: d.actions(),
            s_next: d.next_states(),
        }
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch-mean value of every loss term, plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub ds: f64,
    pub fwd: f64,
    pub rvs: f64,
    pub tsym: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.ds, self.fwd, self.rvs, self.tsym, self.l1, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("rec", self.rec),
            ("ds", self.ds),
            ("fwd", self.fwd),
            ("rvs", self.rvs),
            ("tsym", self.tsym),
            ("l1", self.l1),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(k, _)| k)
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.rec += weight * other.rec;
        self.ds += weight * other.ds;
        self.fwd += weight * other.fwd;
        self.rvs += weight * other.rvs;
        self.tsym += weight * other.tsym;
        self.l1 += weight * other.l1;
        self.total += weight * other.total;
    }
}

/// Parameter gradients for every sub-network of a [`TdmModel`].
#[derive(Clone, Debug)]
pub struct TdmGrads {
    pub encoder: MlpGrads,
    pub state_decoder: MlpGrads,
    pub action_decoder: MlpGrads,
    pub forward_dynamics: MlpGrads,
    pub reverse_dynamics: MlpGrads,
}

impl TdmGrads {
    pub fn zeros_like(m: &TdmModel) -> Self {
        TdmGrads {
            encoder: MlpGrads::zeros_like(&m.encoder),
            state_decoder: MlpGrads::zeros_like(&m.state_decoder),
            action_decoder: MlpGrads::zeros_like(&m.action_decoder),
            forward_dynamics: MlpGrads::zeros_like(&m.forward_dynamics),
            reverse_dynamics: MlpGrads::zeros_like(&m.reverse_dynamics),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.state_decoder.is_finite()
            && self.action_decoder.is_finite()
            && self.forward_dynamics.is_finite()
            && self.reverse_dynamics.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdmModel {
    variant: TdmVariant,
    state_dim: usize,
    action_dim: usize,
    latent_state_dim: usize,
    latent_action_dim: usize,
    encoder: Mlp,
    state_decoder: Mlp,
    action_decoder: Mlp,
    forward_dynamics: Mlp,
    reverse_dynamics: Mlp,
    stats: NormalizationStats,
}

enum EncoderPass {
    Plain(Trace),
    Dual(DualTrace),
}

impl EncoderPass {
    fn output(&self) -> &Array2<f64> {
        match self {
            EncoderPass::Plain(t) => t.output(),
            EncoderPass::Dual(t) => t.output(),
        }
    }

    fn tangent(&self) -> &Array2<f64> {
        match self {
            EncoderPass::Dual(t) => t.output_tangent(),
            EncoderPass::Plain(_) => unreachable!("tangent requested from a plain pass"),
        }
    }

    fn backward(&self, net: &Mlp, gy: &Array2<f64>, gdy: &Array2<f64>, grads: &mut MlpGrads) {
        match self {
            EncoderPass::Plain(t) => {
                net.backward(t, gy.view(), Some(grads));
            }
            EncoderPass::Dual(t) => {
                net.backward_dual(t, gy.view(), gdy.view(), Some(grads));
            }
        }
    }
}

/// `(mean_i ‖pred_i − target_i‖², ∂(weight · mean)/∂pred)`.
fn sq_term(pred: &Array2<f64>, target: ArrayView2<f64>, weight: f64) -> (f64, Array2<f64>) {
    let diff = pred - &target;
    let n = pred.nrows().max(1) as f64;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (value, diff * (2.0 * weight / n))
}

fn mean_sq(diff: &Array2<f64>) -> f64 {
    diff.iter().map(|v| v * v).sum::<f64>() / diff.nrows().max(1) as f64
}

impl TdmModel {
    /// Randomly initialised model for the given data dimensions.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        config: &TdmConfig,
        stats: NormalizationStats,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if stats.dim() != state_dim {
            return Err(Error::Shape(format!(
                "normalization stats cover {} dims, states have {state_dim}",
                stats.dim()
            )));
        }
        let dz = config.latent_state_dim.unwrap_or(state_dim);
        let dw = config.latent_action_dim.unwrap_or(action_dim);
        let act = config.activation;
        let hidden = &config.encoder_hidden;
        let reversed: Vec<usize> = hidden.iter().rev().copied().collect();
        let sizes = |input: usize, mid: &[usize], output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(mid);
            v.push(output);
            v
        };
        let encoder = Mlp::new(&sizes(state_dim + action_dim, hidden, dz + dw), act, Activation::Identity, rng);
        let state_decoder = Mlp::new(&sizes(dz + 1, &reversed, state_dim), act, Activation::Identity, rng);
        let action_decoder = Mlp::new(&sizes(dw, &reversed, action_dim), act, Activation::Identity, rng);
        let dyn_hidden = vec![config.dynamics_hidden_width; config.dynamics_layers - 1];
        let forward_dynamics = Mlp::new(&sizes(dz + dw, &dyn_hidden, dz), act, Activation::Identity, rng);
        let reverse_dynamics = Mlp::new(&sizes(dz + dw, &dyn_hidden, dz), act, Activation::Identity, rng);
        Ok(TdmModel {
            variant: config.variant,
            state_dim,
            action_dim,
            latent_state_dim: dz,
            latent_action_dim: dw,
            encoder,
            state_decoder,
            action_decoder,
            forward_dynamics,
            reverse_dynamics,
            stats,
        })
    }

    /// Assembles a model from explicit networks, checking that their
    /// input/output widths fit together.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        variant: TdmVariant,
        latent_state_dim: usize,
        encoder: Mlp,
        state_decoder: Mlp,
        action_decoder: Mlp,
        forward_dynamics: Mlp,
        reverse_dynamics: Mlp,
        stats: NormalizationStats,
    ) -> Result<Self> {
        let state_dim = stats.dim();
        let action_dim = encoder
            .input_dim()
            .checked_sub(state_dim)
            .ok_or_else(|| Error::Shape("encoder input narrower than the state".into()))?;
        let dz = latent_state_dim;
        let dw = encoder
            .output_dim()
            .checked_sub(dz)
            .ok_or_else(|| Error::Shape("encoder output narrower than the latent state".into()))?;
        let checks = [
            ("state decoder input", state_decoder.input_dim(), dz + 1),
            ("state decoder output", state_decoder.output_dim(), state_dim),
            ("action decoder input", action_decoder.input_dim(), dw),
            ("action decoder output", action_decoder.output_dim(), action_dim),
            ("forward dynamics input", forward_dynamics.input_dim(), dz + dw),
            ("forward dynamics output", forward_dynamics.output_dim(), dz),
            ("reverse dynamics input", reverse_dynamics.input_dim(), dz + dw),
            ("reverse dynamics output", reverse_dynamics.output_dim(), dz),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!("{what} is {got}, expected {want}")));
            }
        }
        Ok(TdmModel {
            variant,
            state_dim,
            action_dim,
            latent_state_dim: dz,
            latent_action_dim: dw,
            encoder,
            state_decoder,
            action_decoder,
            forward_dynamics,
            reverse_dynamics,
            stats,
        })
    }

    pub fn variant(&self) -> TdmVariant {
        self.variant
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn latent_state_dim(&self) -> usize {
        self.latent_state_dim
    }

    pub fn latent_action_dim(&self) -> usize {
        self.latent_action_dim
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn state_decoder(&self) -> &Mlp {
        &self.state_decoder
    }

    pub fn action_decoder(&self) -> &Mlp {
        &self.action_decoder
    }

    pub fn forward_dynamics(&self) -> &Mlp {
        &self.forward_dynamics
    }

    pub fn reverse_dynamics(&self) -> &Mlp {
        &self.reverse_dynamics
    }

    #[cfg(test)]
    pub(crate) fn networks_mut(&mut self) -> [&mut Mlp; 5] {
        [
            &mut self.encoder,
            &mut self.state_decoder,
            &mut self.action_decoder,
            &mut self.forward_dynamics,
            &mut self.reverse_dynamics,
        ]
    }

    fn check_sa(&self, s: &ArrayView2<f64>, a: &ArrayView2<f64>) -> Result<()> {
        if s.ncols() != self.state_dim || a.ncols() != self.action_dim || s.nrows() != a.nrows() {
            return Err(Error::Argument(format!(
                "expected states [n x {}] and actions [n x {}], got {:?} and {:?}",
                self.state_dim,
                self.action_dim,
                s.dim(),
                a.dim()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z_s: &ArrayView2<f64>, z_a: &ArrayView2<f64>) -> Result<()> {
        if z_s.ncols() != self.latent_state_dim
            || z_a.ncols() != self.latent_action_dim
            || z_s.nrows() != z_a.nrows()
        {
            return Err(Error::Argument(format!(
                "expected latents [n x {}] and [n x {}], got {:?} and {:?}",
                self.latent_state_dim,
                self.latent_action_dim,
                z_s.dim(),
                z_a.dim()
            )));
        }
        Ok(())
    }

    fn split(&self, y: &Array2<f64>) -> Latents {
        let dz = self.latent_state_dim;
        Latents {
            z_s: y.slice(s![.., ..dz]).to_owned(),
            z_a: y.slice(s![.., dz..]).to_owned(),
        }
    }

    /// `φ(s, a) = (z_s, z_a)` for every row.
    pub fn encode(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Latents> {
        self.check_sa(&s, &a)?;
        let y = self.encoder.forward(hstack(s, a).view())?;
        Ok(self.split(&y))
    }

    /// Single-sample [`TdmModel::encode`].
    pub fn encode_one(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = ArrayView2::from_shape((1, s.len()), s).map_err(|e| Error::Argument(e.to_string()))?;
        let a = ArrayView2::from_shape((1, a.len()), a).map_err(|e| Error::Argument(e.to_string()))?;
        let l = self.encode(s, a)?;
        Ok((l.z_s.row(0).to_vec(), l.z_a.row(0).to_vec()))
    }

    /// Encodes `(s, a)` and returns `(∂z_s/∂s)·direction` for every row,
    /// computed as a forward-mode JVP.
    pub fn encoder_jvp(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        direction: ArrayView2<f64>,
    ) -> Result<(Latents, Array2<f64>)> {
        self.check_sa(&s, &a)?;
        if direction.dim() != s.dim() {
            return Err(Error::Argument("JVP direction must match the state shape".into()));
        }
        let dx = hstack(direction, Array2::zeros(a.dim()).view());
        let t = self.encoder.forward_dual(hstack(s, a).view(), dx.view())?;
        let jvp = t.output_tangent().slice(s![.., ..self.latent_state_dim]).to_owned();
        Ok((self.split(t.output()), jvp))
    }

    /// `f(z_s, z_a)`, the predicted latent time derivative.
    pub fn latent_forward(&self, z_s: ArrayView2<f64>, z_a: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_latent(&z_s, &z_a)?;
        self.forward_dynamics.forward(hstack(z_s, z_a).view())
    }

    /// `g(z_s', z_a)`, the predicted negative latent time derivative.
    pub fn latent_reverse(&self, z_s_next: ArrayView2<f64>, z_a: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_latent(&z_s_next, &z_a)?;
        self.reverse_dynamics.forward(hstack(z_s_next, z_a).view())
    }

    /// `ψ_s(z, δ)`: decodes a latent state (`δ = 0`) or latent time
    /// derivative (`δ = 1`).
    pub fn decode_state(&self, z: ArrayView2<f64>, indicator: f64) -> Result<Array2<f64>> {
        self.state_decoder.forward(with_indicator(z, indicator).view())
    }

    pub fn decode_action(&self, z_a: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.action_decoder.forward(z_a)
    }

    /// Row-wise `f(z_s, z_a) + g(z_s + f(z_s, z_a), z_a)`.
    pub fn tsym_residual(&self, z_s: ArrayView2<f64>, z_a: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self.latent_forward(z_s, z_a)?;
        let g = self.latent_reverse((&z_s + &f).view(), z_a)?;
        Ok(f + g)
    }

    /// Per-row T-symmetry consistency loss.
    pub fn tsym_per_sample(&self, z_s: ArrayView2<f64>, z_a: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(row_sq_norm(self.tsym_residual(z_s, z_a)?.view()))
    }

    /// Per-row T-symmetry loss together with the gradient of
    /// `Σ_i coef_i · ℓ_tsym(z_s_i, z_a_i)` w.r.t. `z_s` and `z_a`.
    pub fn tsym_with_input_grad(
        &self,
        z_s: ArrayView2<f64>,
        z_a: ArrayView2<f64>,
        coef: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
        self.check_latent(&z_s, &z_a)?;
        let dz = self.latent_state_dim;
        let trf = self.forward_dynamics.forward_trace(hstack(z_s, z_a).view())?;
        let f = trf.output();
        let u = &z_s + f;
        let trg = self.reverse_dynamics.forward_trace(hstack(u.view(), z_a).view())?;
        let t = f + trg.output();
        let values = row_sq_norm(t.view());
        let gt = &t * &coef.insert_axis(Axis(1)) * 2.0;
        let gin_g = self.reverse_dynamics.backward(&trg, gt.view(), None);
        let gu = gin_g.slice(s![.., ..dz]);
        let g_f = &gt + &gu;
        let gin_f = self.forward_dynamics.backward(&trf, g_f.view(), None);
        let g_zs = &gin_f.slice(s![.., ..dz]) + &gu;
        let g_za = &gin_f.slice(s![.., dz..]) + &gin_g.slice(s![.., dz..]);
        Ok((values, g_zs, g_za))
    }

    /// `mean ‖s − ψ_s(z_s, 0)‖² + ‖a − ψ_a(z_a)‖²`.
    pub fn loss_reconstruction(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<f64> {
        let l = self.encode(s, a)?;
        let s_hat = self.decode_state(l.z_s.view(), 0.0)?;
        let a_hat = self.decode_action(l.z_a.view())?;
        Ok(mean_sq(&(&s - &s_hat)) + mean_sq(&(&a - &a_hat)))
    }

    /// `mean ‖(∂φ(s,a)/∂s)·ṡ − f(φ(s,a))‖²`.
    pub fn loss_forward_ode(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        s_next: ArrayView2<f64>,
    ) -> Result<f64> {
        let ds = &s_next - &s;
        let (l, jvp) = self.encoder_jvp(s, a, ds.view())?;
        let f = self.latent_forward(l.z_s.view(), l.z_a.view())?;
        Ok(mean_sq(&(jvp - f)))
    }

    /// `mean ‖ṡ − ψ_s(f(φ(s,a)), 1)‖²`.
    pub fn loss_ds_reconstruction(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        s_next: ArrayView2<f64>,
    ) -> Result<f64> {
        let ds = &s_next - &s;
        let l = self.encode(s, a)?;
        let f = self.latent_forward(l.z_s.view(), l.z_a.view())?;
        let ds_hat = self.decode_state(f.view(), 1.0)?;
        Ok(mean_sq(&(ds - ds_hat)))
    }

    /// `mean ‖(∂φ(s',a)/∂s')·(−ṡ) − g(φ(s',a))‖²`.
    pub fn loss_reverse_ode(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        s_next: ArrayView2<f64>,
    ) -> Result<f64> {
        let neg_ds = &s - &s_next;
        let (l, jvp) = self.encoder_jvp(s_next, a, neg_ds.view())?;
        let g = self.latent_reverse(l.z_s.view(), l.z_a.view())?;
        Ok(mean_sq(&(jvp - g)))
    }

    /// `mean ‖f(z_s, z_a) + g(z_s + f(z_s, z_a), z_a)‖²`.
    pub fn loss_tsym(&self, z_s: ArrayView2<f64>, z_a: ArrayView2<f64>) -> Result<f64> {
        Ok(mean_sq(&self.tsym_residual(z_s, z_a)?))
    }

    /// [`TdmModel::loss_tsym`] plus `mean ‖f(z_s, z_a) + g(z_s', z_a)‖²`.
    pub fn loss_tsym_enhanced(
        &self,
        z_s: ArrayView2<f64>,
        z_a: ArrayView2<f64>,
        z_s_next: ArrayView2<f64>,
    ) -> Result<f64> {
        let f = self.latent_forward(z_s, z_a)?;
        let g_next = self.latent_reverse(z_s_next, z_a)?;
        Ok(self.loss_tsym(z_s, z_a)? + mean_sq(&(f + g_next)))
    }

    /// L1 norm of the forward and reverse dynamics parameters.
    pub fn dynamics_l1(&self) -> f64 {
        self.forward_dynamics.l1_norm() + self.reverse_dynamics.l1_norm()
    }

    /// The full weighted objective, evaluated term by term through the
    /// public loss functions.
    pub fn loss_total(&self, batch: &TdmBatch<'_>, weights: &LossWeights, enhanced: bool) -> Result<LossBreakdown> {
        let rec = self.loss_reconstruction(batch.s, batch.a)?;
        let ds = self.loss_ds_reconstruction(batch.s, batch.a, batch.s_next)?;
        let fwd = self.loss_forward_ode(batch.s, batch.a, batch.s_next)?;
        let rvs = self.loss_reverse_ode(batch.s, batch.a, batch.s_next)?;
        let l = self.encode(batch.s, batch.a)?;
        let tsym = if enhanced {
            let next = self.encode(batch.s_next, batch.a)?;
            self.loss_tsym_enhanced(l.z_s.view(), l.z_a.view(), next.z_s.view())?
        } else {
            self.loss_tsym(l.z_s.view(), l.z_a.view())?
        };
        let l1 = weights.l1 * self.dynamics_l1();
        let total = weights.rec * rec
            + weights.ds * ds
            + weights.fwd * fwd
            + weights.rvs * rvs
            + weights.tsym * tsym
            + l1;
        Ok(LossBreakdown {
            rec,
            ds,
            fwd,
            rvs,
            tsym,
            l1,
            total,
        })
    }

    /// Loss and parameter gradients of the training objective for this
    /// model's variant. During [`Phase::Pretrain`] only the reconstruction
    /// term is active.
    pub fn objective(
        &self,
        batch: &TdmBatch<'_>,
        weights: &LossWeights,
        enhanced: bool,
        phase: Phase,
    ) -> Result<(LossBreakdown, TdmGrads)> {
        self.check_sa(&batch.s, &batch.a)?;
        if batch.s_next.dim() != batch.s.dim() {
            return Err(Error::Argument("next states must match the state shape".into()));
        }
        let dz = self.latent_state_dim;
        let variant = self.variant;
        let full = phase == Phase::Full && variant != TdmVariant::AeRep;
        let ode = full && variant == TdmVariant::Tdm;
        let mut grads = TdmGrads::zeros_like(self);
        let mut out = LossBreakdown::default();

        let ds = &batch.s_next - &batch.s;
        let x1 = hstack(batch.s, batch.a);
        let enc1 = if ode {
            let dx1 = hstack(ds.view(), Array2::zeros(batch.a.dim()).view());
            EncoderPass::Dual(self.encoder.forward_dual(x1.view(), dx1.view())?)
        } else {
            EncoderPass::Plain(self.encoder.forward_trace(x1.view())?)
        };
        let y1 = enc1.output();
        let zs = y1.slice(s![.., ..dz]);
        let za = y1.slice(s![.., dz..]);
        let mut gy1 = Array2::<f64>::zeros(y1.dim());
        let mut gdy1 = Array2::<f64>::zeros(if ode { y1.dim() } else { (0, 0) });

        // reconstruction
        let tr = self.state_decoder.forward_trace(with_indicator(zs, 0.0).view())?;
        let (rec_s, g) = sq_term(tr.output(), batch.s, weights.rec);
        let gin = self.state_decoder.backward(&tr, g.view(), Some(&mut grads.state_decoder));
        gy1.slice_mut(s![.., ..dz]).scaled_add(1.0, &gin.slice(s![.., ..dz]));
        let tr = self.action_decoder.forward_trace(za)?;
        let (rec_a, g) = sq_term(tr.output(), batch.a, weights.rec);
        let gin = self.action_decoder.backward(&tr, g.view(), Some(&mut grads.action_decoder));
        gy1.slice_mut(s![.., dz..]).scaled_add(1.0, &gin);
        out.rec = rec_s + rec_a;

        if full {
            let x2 = hstack(batch.s_next, batch.a);
            let enc2 = if ode {
                let dx2 = hstack((-&ds).view(), Array2::zeros(batch.a.dim()).view());
                EncoderPass::Dual(self.encoder.forward_dual(x2.view(), dx2.view())?)
            } else {
                EncoderPass::Plain(self.encoder.forward_trace(x2.view())?)
            };
            let y2 = enc2.output();
            let zs2 = y2.slice(s![.., ..dz]);
            let mut gy2 = Array2::<f64>::zeros(y2.dim());
            let mut gdy2 = Array2::<f64>::zeros(if ode { y2.dim() } else { (0, 0) });

            let trf = self.forward_dynamics.forward_trace(y1.view())?;
            let f_out = trf.output();
            let mut g_f = Array2::<f64>::zeros(f_out.dim());

            // forward regression: onto the encoder JVP, or onto z_s' − z_s
            if ode {
                let jf = enc1.tangent().slice(s![.., ..dz]);
                let (v, gp) = sq_term(f_out, jf, weights.fwd);
                out.fwd = v;
                g_f += &gp;
                gdy1.slice_mut(s![.., ..dz]).scaled_add(-1.0, &gp);
            } else {
                let zdot = &zs2 - &zs;
                let (v, gp) = sq_term(f_out, zdot.view(), weights.fwd);
                out.fwd = v;
                g_f += &gp;
                gy2.slice_mut(s![.., ..dz]).scaled_add(-1.0, &gp);
                gy1.slice_mut(s![.., ..dz]).scaled_add(1.0, &gp);
            }

            // ṡ reconstruction through the δ = 1 decoder branch
            let trd = self.state_decoder.forward_trace(with_indicator(f_out.view(), 1.0).view())?;
            let (v, g) = sq_term(trd.output(), ds.view(), weights.ds);
            out.ds = v;
            let gin = self.state_decoder.backward(&trd, g.view(), Some(&mut grads.state_decoder));
            g_f.scaled_add(1.0, &gin.slice(s![.., ..dz]));

            if variant != TdmVariant::AeFwdRep {
                let trg = self.reverse_dynamics.forward_trace(y2.view())?;
                let g_out = trg.output();
                let mut g_g = Array2::<f64>::zeros(g_out.dim());
                if ode {
                    let jr = enc2.tangent().slice(s![.., ..dz]);
                    let (v, gp) = sq_term(g_out, jr, weights.rvs);
                    out.rvs = v;
                    g_g += &gp;
                    gdy2.slice_mut(s![.., ..dz]).scaled_add(-1.0, &gp);
                } else {
                    let target = &zs - &zs2;
                    let (v, gp) = sq_term(g_out, target.view(), weights.rvs);
                    out.rvs = v;
                    g_g += &gp;
                    gy1.slice_mut(s![.., ..dz]).scaled_add(-1.0, &gp);
                    gy2.slice_mut(s![.., ..dz]).scaled_add(1.0, &gp);
                }

                // T-symmetry: f(z) + g(z + f(z), z_a)
                let u = &zs + f_out;
                let trt = self.reverse_dynamics.forward_trace(hstack(u.view(), za).view())?;
                let t = f_out + trt.output();
                out.tsym = mean_sq(&t);
                let gt = &t * (2.0 * weights.tsym / t.nrows() as f64);
                g_f += &gt;
                let gin = self
                    .reverse_dynamics
                    .backward(&trt, gt.view(), Some(&mut grads.reverse_dynamics));
                let gu = gin.slice(s![.., ..dz]);
                g_f.scaled_add(1.0, &gu);
                gy1.slice_mut(s![.., ..dz]).scaled_add(1.0, &gu);
                gy1.slice_mut(s![.., dz..]).scaled_add(1.0, &gin.slice(s![.., dz..]));

                if enhanced {
                    // f(z) + g(z_s', z_a)
                    let tre = self.reverse_dynamics.forward_trace(hstack(zs2, za).view())?;
                    let t2 = f_out + tre.output();
                    out.tsym += mean_sq(&t2);
                    let gt2 = &t2 * (2.0 * weights.tsym / t2.nrows() as f64);
                    g_f += &gt2;
                    let gin = self
                        .reverse_dynamics
                        .backward(&tre, gt2.view(), Some(&mut grads.reverse_dynamics));
                    gy2.slice_mut(s![.., ..dz]).scaled_add(1.0, &gin.slice(s![.., ..dz]));
                    gy1.slice_mut(s![.., dz..]).scaled_add(1.0, &gin.slice(s![.., dz..]));
                }

                let gin = self
                    .reverse_dynamics
                    .backward(&trg, g_g.view(), Some(&mut grads.reverse_dynamics));
                gy2 += &gin;
                out.l1 += weights.l1 * self.reverse_dynamics.l1_norm();
                self.reverse_dynamics
                    .add_l1_subgradient(weights.l1, &mut grads.reverse_dynamics);
            }

            let gin = self
                .forward_dynamics
                .backward(&trf, g_f.view(), Some(&mut grads.forward_dynamics));
            gy1 += &gin;
            out.l1 += weights.l1 * self.forward_dynamics.l1_norm();
            self.forward_dynamics
                .add_l1_subgradient(weights.l1, &mut grads.forward_dynamics);

            enc2.backward(&self.encoder, &gy2, &gdy2, &mut grads.encoder);
        }
        enc1.backward(&self.encoder, &gy1, &gdy1, &mut grads.encoder);

        out.total = weights.rec * out.rec
            + weights.ds * out.ds
            + weights.fwd * out.fwd
            + weights.rvs * out.rvs
            + weights.tsym * out.tsym
            + out.l1;
        if let Some(term) = out.first_non_finite() {
            return Err(Error::NonFinite(format!("loss term `{term}` is not finite")));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient is not finite".into()));
        }
        Ok((out, grads))
    }

    /// Hash of every parameter, for detecting unintended updates.
    pub fn parameter_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for net in [
            &self.encoder,
            &self.state_decoder,
            &self.action_decoder,
            &self.forward_dynamics,
            &self.reverse_dynamics,
        ] {
            net.feed_params(&mut h);
        }
        format!("{:x}", h.finalize())
    }

    /// Identifies the data contract of this model: dimensions plus the
    /// normalization statistics it was trained under.
    pub fn compat_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in [
            self.state_dim,
            self.action_dim,
            self.latent_state_dim,
            self.latent_action_dim,
        ] {
            h.update((d as u64).to_le_bytes());
        }
        h.update(self.stats.fingerprint().as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Per-sample T-symmetry scores of every transition, in row order.
/// Evaluated in parallel chunks; no gradient state is kept.
pub fn tsym_scores(model: &TdmModel, dataset: &TransitionDataset) -> Result<Array1<f64>> {
    const CHUNK: usize = 2048;
    let n = dataset.len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<Array1<f64>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let l = model.encode(
                dataset.states().slice(s![start..end, ..]),
                dataset.actions().slice(s![start..end, ..]),
            )?;
            model.tsym_per_sample(l.z_s.view(), l.z_a.view())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests;

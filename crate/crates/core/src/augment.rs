//! T-symmetry consistent latent augmentation.
//!
//! A latent state is perturbed, pushed forward through the learned
//! dynamics, and kept only if the perturbed sample is at least as
//! T-symmetric as the `tau`-quantile of the training data.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::nn::row_sq_norm;
use crate::tdm::{tsym_scores, TdmModel};

/// Linear-interpolation empirical quantile: with sorted scores `x` and
/// `p = tau · (n − 1)`, returns `x[⌊p⌋] + (p − ⌊p⌋)(x[⌊p⌋+1] − x[⌊p⌋])`.
pub fn compute_threshold(scores: &[f64], tau: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Argument("cannot take a quantile of no scores".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Argument(format!("quantile {tau} not in (0, 1)")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("scores contain non-finite values".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = tau * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// `z_s + ε` with `ε_ij ~ N(0, (noise_scale · sigma_zs[j])²)`.
pub fn perturb_latent<R: Rng + ?Sized>(
    z_s: ArrayView2<f64>,
    sigma_zs: &[f64],
    noise_scale: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if sigma_zs.len() != z_s.ncols() {
        return Err(Error::Argument(format!(
            "sigma has {} entries for {} latent dims",
            sigma_zs.len(),
            z_s.ncols()
        )));
    }
    let mut out = z_s.to_owned();
    for mut row in out.rows_mut() {
        for (v, &sigma) in row.iter_mut().zip(sigma_zs) {
            let e: f64 = StandardNormal.sample(rng);
            *v += noise_scale * sigma * e;
        }
    }
    Ok(out)
}

/// `(z_s + ε) + f(z_s + ε, z_a)`.
pub fn propagate_next(model: &TdmModel, z_s_pert: ArrayView2<f64>, z_a: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(&z_s_pert + &model.latent_forward(z_s_pert, z_a)?)
}

/// Transitions expressed in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub z_s: Array2<f64>,
    pub z_a: Array2<f64>,
    pub rewards: Array1<f64>,
    pub z_next: Array2<f64>,
    pub done: Array1<f64>,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.z_s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Kept augmented rows and the batch row each one was derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub rows: LatentBatch,
    pub source: Vec<usize>,
    /// Number of candidates drawn (`K · |batch|`).
    pub candidates: usize,
}

impl AugmentedBatch {
    pub fn kept_fraction(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.source.len() as f64 / self.candidates as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRule {
    pub threshold: f64,
    pub tau: f64,
    pub noise_scale: f64,
    pub sigma_zs: Vec<f64>,
    pub k: usize,
}

impl AugmentationRule {
    /// Threshold from the model's own training-set scores and the
    /// per-dimension (population) std of the encoded latent states.
    pub fn fit(model: &TdmModel, dataset: &TransitionDataset, tau: f64, noise_scale: f64, k: usize) -> Result<Self> {
        let scores = tsym_scores(model, dataset)?;
        let latents = model.encode(dataset.states(), dataset.actions())?;
        Self::from_scores(scores.as_slice().unwrap(), latents.z_s.view(), tau, noise_scale, k)
    }

    pub fn from_scores(scores: &[f64], z_s: ArrayView2<f64>, tau: f64, noise_scale: f64, k: usize) -> Result<Self> {
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::Argument(format!("noise scale must be non-negative, got {noise_scale}")));
        }
        if k == 0 {
            return Err(Error::Argument("K must be at least 1".into()));
        }
        let threshold = compute_threshold(scores, tau)?;
        let sigma_zs = z_s.std_axis(Axis(0), 0.0).to_vec();
        Ok(AugmentationRule {
            threshold,
            tau,
            noise_scale,
            sigma_zs,
            k,
        })
    }
}

/// Draws `K` perturbations per row and keeps those whose T-symmetry loss
/// is at most the rule's threshold. Rewards and done flags are copied
/// from the source row; the next latent state comes from the forward
/// model.
pub fn augment_batch<R: Rng + ?Sized>(
    model: &TdmModel,
    batch: &LatentBatch,
    rule: &AugmentationRule,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    let n = batch.len();
    let mut kept_zs = Vec::new();
    let mut source = Vec::new();
    let mut kept_next = Vec::new();
    for _ in 0..rule.k {
        let zp = perturb_latent(batch.z_s.view(), &rule.sigma_zs, rule.noise_scale, rng)?;
        let f = model.latent_forward(zp.view(), batch.z_a.view())?;
        let next = &zp + &f;
        let g = model.latent_reverse(next.view(), batch.z_a.view())?;
        let scores = row_sq_norm((f + g).view());
        for i in 0..n {
            if scores[i] <= rule.threshold {
                kept_zs.push(zp.row(i).to_owned());
                kept_next.push(next.row(i).to_owned());
                source.push(i);
            }
        }
    }
    let stack = |rows: &[Array1<f64>], cols: usize| {
        let mut out = Array2::zeros((rows.len(), cols));
        for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
            dst.assign(src);
        }
        out
    };
    let dz = batch.z_s.ncols();
    let rows = LatentBatch {
        z_s: stack(&kept_zs, dz),
        z_a: batch.z_a.select(Axis(0), &source),
        rewards: batch.rewards.select(Axis(0), &source),
        z_next: stack(&kept_next, dz),
        done: batch.done.select(Axis(0), &source),
    };
    Ok(AugmentedBatch {
        rows,
        source,
        candidates: rule.k * n,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::{array, concatenate};
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::NormalizationStats;
    use crate::nn::{Activation, Linear, Mlp};
    use crate::tdm::{TdmConfig, TdmVariant};

    fn linear(weight: Array2<f64>) -> Mlp {
        let out = weight.ncols();
        Mlp::from_layers(
            vec![Linear {
                weight,
                bias: Array1::zeros(out),
            }],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| scale * rng.sample::<f64, _>(StandardNormal))
    }

    /// Two-dimensional latent state, one-dimensional latent action, with
    /// linear `f` and `g`.
    fn stub_model(f_w: Array2<f64>, g_w: Array2<f64>) -> TdmModel {
        TdmModel::from_parts(
            TdmVariant::Tdm,
            2,
            linear(Array2::eye(3)),
            linear(Array2::zeros((3, 2))),
            linear(Array2::eye(1)),
            linear(f_w),
            linear(g_w),
            NormalizationStats::identity(2),
        )
        .unwrap()
    }

    fn random_model(seed: u64) -> TdmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TdmConfig {
            encoder_hidden: vec![8],
            dynamics_hidden_width: 8,
            dynamics_layers: 2,
            ..TdmConfig::default()
        };
        TdmModel::new(2, 1, &cfg, NormalizationStats::identity(2), &mut rng).unwrap()
    }

    fn latent_batch(rng: &mut ChaCha8Rng, n: usize) -> LatentBatch {
        LatentBatch {
            z_s: randn(rng, n, 2, 1.0),
            z_a: randn(rng, n, 1, 1.0),
            rewards: Array1::from_shape_fn(n, |i| i as f64),
            z_next: randn(rng, n, 2, 1.0),
            done: Array1::from_shape_fn(n, |i| (i % 2) as f64),
        }
    }

    fn brute_force_quantile(scores: &[f64], tau: f64) -> f64 {
        // smallest order statistic pair bracketing rank tau·(n−1)
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        let target = tau * (s.len() - 1) as f64;
        for i in 0..s.len() {
            if (i as f64) <= target && target <= (i + 1) as f64 {
                let j = (i + 1).min(s.len() - 1);
                return s[i] * ((i + 1) as f64 - target) + s[j] * (target - i as f64);
            }
        }
        unreachable!()
    }

    #[test]
    fn threshold_examples() {
        assert_abs_diff_eq!(compute_threshold(&[0.1, 0.2, 0.3, 0.4], 0.5).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(compute_threshold(&[0.4, 0.1, 0.3, 0.2], 0.5).unwrap(), 0.25, epsilon = 1e-15);
        for tau in [0.1, 0.5, 0.7, 0.99] {
            assert_eq!(compute_threshold(&[1.5; 7], tau).unwrap(), 1.5);
        }
        assert!(matches!(compute_threshold(&[], 0.5), Err(Error::Argument(_))));
        assert!(compute_threshold(&[1.0], 1.0).is_err());
        assert!(compute_threshold(&[1.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn threshold_matches_brute_force_and_covers_tau(
            scores in prop::collection::vec(0.0f64..10.0, 1..60),
            tau in 0.01f64..0.99,
        ) {
            let h = compute_threshold(&scores, tau).unwrap();
            prop_assert!((h - brute_force_quantile(&scores, tau)).abs() < 1e-12);
            let n = scores.len() as f64;
            let covered = scores.iter().filter(|&&s| s <= h).count() as f64 / n;
            prop_assert!(covered >= tau - 1.0 / n);
        }
    }

    #[test]
    fn zero_noise_leaves_latents_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = randn(&mut rng, 5, 3, 1.0);
        assert_eq!(perturb_latent(z.view(), &[1.0, 2.0, 3.0], 0.0, &mut rng).unwrap(), z);
        assert_eq!(perturb_latent(z.view(), &[0.0, 0.0, 0.0], 0.01, &mut rng).unwrap(), z);
        assert!(perturb_latent(z.view(), &[1.0], 0.01, &mut rng).is_err());
    }

    #[test]
    fn noise_has_the_configured_standard_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::zeros((100_000, 2));
        let p = perturb_latent(z.view(), &[1.0, 1.0], 0.01, &mut rng).unwrap();
        for std in p.std_axis(Axis(0), 0.0) {
            assert!((0.0095..=0.0105).contains(&std), "std {std}");
        }
        let a = perturb_latent(z.slice(ndarray::s![..10, ..]), &[1.0, 1.0], 0.01, &mut ChaCha8Rng::seed_from_u64(3));
        let b = perturb_latent(z.slice(ndarray::s![..10, ..]), &[1.0, 1.0], 0.01, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn propagation_follows_the_forward_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = randn(&mut rng, 6, 2, 1.0);
        let w = randn(&mut rng, 6, 1, 1.0);
        let zero = stub_model(Array2::zeros((3, 2)), Array2::zeros((3, 2)));
        assert_eq!(propagate_next(&zero, z.view(), w.view()).unwrap(), z);

        // f(z, w) = A z, so the next latent is (I + A) z
        let a = randn(&mut rng, 2, 2, 0.5);
        let f_w = concatenate![Axis(0), a.t(), Array2::zeros((1, 2))];
        let m = stub_model(f_w, Array2::zeros((3, 2)));
        let expected = z.dot(&(Array2::eye(2) + &a).t());
        assert_abs_diff_eq!(propagate_next(&m, z.view(), w.view()).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn infinite_and_negative_thresholds() {
        let m = random_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = latent_batch(&mut rng, 20);
        let mut rule = AugmentationRule {
            threshold: f64::INFINITY,
            tau: 0.5,
            noise_scale: 0.01,
            sigma_zs: vec![1.0, 1.0],
            k: 3,
        };
        let all = augment_batch(&m, &b, &rule, &mut rng).unwrap();
        assert_eq!(all.source.len(), 60);
        assert_eq!(all.kept_fraction(), 1.0);
        rule.threshold = -1.0;
        let none = augment_batch(&m, &b, &rule, &mut rng).unwrap();
        assert!(none.rows.is_empty());
        assert_eq!(none.kept_fraction(), 0.0);
    }

    #[test]
    fn kept_rows_rescore_under_threshold_and_copy_reward_and_done() {
        let m = random_model(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = latent_batch(&mut rng, 500);
        let scores = m.tsym_per_sample(b.z_s.view(), b.z_a.view()).unwrap();
        let rule = AugmentationRule::from_scores(scores.as_slice().unwrap(), b.z_s.view(), 0.5, 0.5, 2).unwrap();
        let out = augment_batch(&m, &b, &rule, &mut rng).unwrap();
        assert!(!out.rows.is_empty() && out.rows.len() < 1000);
        let rescored = m.tsym_per_sample(out.rows.z_s.view(), out.rows.z_a.view()).unwrap();
        assert!(rescored.iter().all(|&s| s <= rule.threshold));
        let next = propagate_next(&m, out.rows.z_s.view(), out.rows.z_a.view()).unwrap();
        assert_eq!(next, out.rows.z_next);
        for (k, &i) in out.source.iter().enumerate() {
            assert_eq!(out.rows.rewards[k], b.rewards[i]);
            assert_eq!(out.rows.done[k], b.done[i]);
            assert_eq!(out.rows.z_a.row(k), b.z_a.row(i));
        }
    }

    #[test]
    fn filter_criterion_is_the_reverse_perturbation_gap() {
        // f(z, w) = A z + B w, g(z', w) = C z' + D w
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, bm) = (randn(&mut rng, 2, 2, 0.3), randn(&mut rng, 2, 1, 0.3));
        let (c, d) = (randn(&mut rng, 2, 2, 0.3), randn(&mut rng, 2, 1, 0.3));
        let m = stub_model(
            concatenate![Axis(0), a.t(), bm.t()],
            concatenate![Axis(0), c.t(), d.t()],
        );
        let z = randn(&mut rng, 10, 2, 1.0);
        let w = randn(&mut rng, 10, 1, 1.0);
        let eps = randn(&mut rng, 10, 2, 0.01);
        let zp = &z + &eps;
        let f = zp.dot(&a.t()) + w.dot(&bm.t());
        let z_next = &zp + &f;
        // stepping back from the augmented next state with g lands at z + ε″
        let back = &z_next + &(z_next.dot(&c.t()) + w.dot(&d.t()));
        let eps2 = &back - &z;
        let gap = row_sq_norm((&eps2 - &eps).view());
        let score = m.tsym_per_sample(zp.view(), w.view()).unwrap();
        assert_abs_diff_eq!(gap, score, epsilon = 1e-14);
    }

    #[test]
    fn fitted_rule_uses_latent_std() {
        let m = random_model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = randn(&mut rng, 50, 2, 1.0);
        let a = randn(&mut rng, 50, 1, 1.0);
        let d = TransitionDataset::new("t", s.clone(), a.clone(), Array1::zeros(50), s.clone(), vec![true; 50], None)
            .unwrap();
        let rule = AugmentationRule::fit(&m, &d, 0.7, 0.01, 1).unwrap();
        let z = m.encode(s.view(), a.view()).unwrap().z_s;
        assert_abs_diff_eq!(
            Array1::from(rule.sigma_zs.clone()),
            z.std_axis(Axis(0), 0.0),
            epsilon = 1e-15
        );
        let scores = tsym_scores(&m, &d).unwrap();
        assert_eq!(rule.threshold, compute_threshold(scores.as_slice().unwrap(), 0.7).unwrap());
        assert_eq!(array![rule.tau, rule.noise_scale], array![0.7, 0.01]);
    }
}

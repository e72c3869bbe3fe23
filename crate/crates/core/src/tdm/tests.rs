use approx::assert_abs_diff_eq;
use ndarray::{array, concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::nn::{Linear, Mlp};

fn linear(weight: Array2<f64>, bias: Array1<f64>) -> Mlp {
    Mlp::from_layers(vec![Linear { weight, bias }], Activation::Identity, Activation::Identity).unwrap()
}

fn constant(input: usize, value: Array1<f64>) -> Mlp {
    let out = value.len();
    linear(Array2::zeros((input, out)), value)
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn tiny_config(variant: TdmVariant) -> TdmConfig {
    TdmConfig {
        encoder_hidden: vec![3],
        dynamics_hidden_width: 2,
        dynamics_layers: 2,
        activation: Activation::Tanh,
        variant,
        ..TdmConfig::default()
    }
}

fn tiny_model(variant: TdmVariant, seed: u64) -> TdmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TdmModel::new(1, 1, &tiny_config(variant), NormalizationStats::identity(1), &mut rng).unwrap()
}

fn small_model(variant: TdmVariant, seed: u64) -> TdmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TdmConfig {
        encoder_hidden: vec![6, 5],
        dynamics_hidden_width: 5,
        dynamics_layers: 3,
        activation: Activation::Tanh,
        variant,
        ..TdmConfig::default()
    };
    TdmModel::new(3, 2, &cfg, NormalizationStats::identity(3), &mut rng).unwrap()
}

struct Data {
    s: Array2<f64>,
    a: Array2<f64>,
    s_next: Array2<f64>,
}

impl Data {
    fn random(rng: &mut ChaCha8Rng, n: usize, ds: usize, da: usize) -> Self {
        let s = randn(rng, n, ds, 1.0);
        let a = randn(rng, n, da, 1.0);
        let s_next = &s + &randn(rng, n, ds, 0.3);
        Data { s, a, s_next }
    }

    fn batch(&self) -> TdmBatch<'_> {
        TdmBatch {
            s: self.s.view(),
            a: self.a.view(),
            s_next: self.s_next.view(),
        }
    }
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

/// Central finite differences of `loss` with respect to every parameter of
/// the network selected by `net`.
fn fd_param_grad(
    model: &TdmModel,
    net: usize,
    loss: &dyn Fn(&TdmModel) -> f64,
    h: f64,
) -> Vec<f64> {
    let mut m = model.clone();
    let base = m.networks_mut()[net].flat_params();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            m.networks_mut()[net].set_flat_params(&p).unwrap();
            let up = loss(&m);
            p[i] = base[i] - h;
            m.networks_mut()[net].set_flat_params(&p).unwrap();
            let down = loss(&m);
            m.networks_mut()[net].set_flat_params(&base).unwrap();
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn grads_of(g: &TdmGrads, net: usize) -> Vec<f64> {
    [
        &g.encoder,
        &g.state_decoder,
        &g.action_decoder,
        &g.forward_dynamics,
        &g.reverse_dynamics,
    ][net]
        .flat()
}

fn only(f: impl FnOnce(&mut LossWeights)) -> LossWeights {
    let mut w = LossWeights {
        rec: 0.0,
        ds: 0.0,
        fwd: 0.0,
        rvs: 0.0,
        tsym: 0.0,
        l1: 0.0,
    };
    f(&mut w);
    w
}

/// Exact linear system `s' = (I + A)s + Ba` with a model that represents it
/// with zero error: identity encoder, `f = A z_s + B z_a`, and `g` the
/// closed-form inverse.
fn linear_certificate(rng: &mut ChaCha8Rng) -> (TdmModel, Data) {
    let (ds, da) = (3, 2);
    let a_mat = randn(rng, ds, ds, 0.1);
    let b_mat = randn(rng, ds, da, 0.5);
    let s = randn(rng, 40, ds, 1.0);
    let a = randn(rng, 40, da, 1.0);
    let s_next = &s + &s.dot(&a_mat.t()) + a.dot(&b_mat.t());

    let d = ds + da;
    let encoder = linear(Array2::eye(d), Array1::zeros(d));
    // row-vector convention: y = x W, so W = [Aᵀ; Bᵀ]
    let f = linear(concatenate![Axis(0), a_mat.t(), b_mat.t()], Array1::zeros(ds));
    // s = M (s' − B a) with M = (I + A)⁻¹, so g(z', w) = −A M z' + (A M B − B) w
    let m = invert(&(Array2::eye(ds) + &a_mat));
    let am = a_mat.dot(&m);
    let gz = -&am;
    let gw = am.dot(&b_mat) - &b_mat;
    let g = linear(concatenate![Axis(0), gz.t(), gw.t()], Array1::zeros(ds));
    let mut dec_w = Array2::zeros((ds + 1, ds));
    dec_w.slice_mut(s![..ds, ..]).assign(&Array2::eye(ds));
    let state_decoder = linear(dec_w, Array1::zeros(ds));
    let action_decoder = linear(Array2::eye(da), Array1::zeros(da));
    let model = TdmModel::from_parts(
        TdmVariant::Tdm,
        ds,
        encoder,
        state_decoder,
        action_decoder,
        f,
        g,
        NormalizationStats::identity(ds),
    )
    .unwrap();
    (model, Data { s, a, s_next })
}

fn invert(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let dm = nalgebra::DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let inv = dm.try_inverse().expect("invertible");
    Array2::from_shape_fn((n, n), |(i, j)| inv[(i, j)])
}

#[test]
fn encode_is_deterministic_with_expected_shapes() {
    let m = small_model(TdmVariant::Tdm, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = Data::random(&mut rng, 7, 3, 2);
    let l1 = m.encode(d.s.view(), d.a.view()).unwrap();
    let l2 = m.encode(d.s.view(), d.a.view()).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(l1.z_s.dim(), (7, 3));
    assert_eq!(l1.z_a.dim(), (7, 2));
    assert!(matches!(m.encode(d.a.view(), d.a.view()), Err(Error::Argument(_))));
}

#[test]
fn linear_encoder_jvp_is_its_weight_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = randn(&mut rng, 5, 5, 1.0);
    let (mut model, d) = linear_certificate(&mut rng);
    model.encoder = linear(w.clone(), Array1::zeros(5));
    let v = randn(&mut rng, d.s.nrows(), 3, 1.0);
    let (_, jvp) = model.encoder_jvp(d.s.view(), d.a.view(), v.view()).unwrap();
    let expected = v.dot(&w.slice(s![..3, ..3]));
    assert_abs_diff_eq!(jvp, expected, epsilon = 1e-12);
}

#[test]
fn jvp_matches_central_differences() {
    for seed in 0..5 {
        let m = small_model(TdmVariant::Tdm, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = Data::random(&mut rng, 6, 3, 2);
        let v = &d.s_next - &d.s;
        let (_, jvp) = m.encoder_jvp(d.s.view(), d.a.view(), v.view()).unwrap();
        let h = 1e-5;
        let up = m.encode((&d.s + &(&v * h)).view(), d.a.view()).unwrap().z_s;
        let down = m.encode((&d.s - &(&v * h)).view(), d.a.view()).unwrap().z_s;
        let fd = (up - down) / (2.0 * h);
        let err = relative_error(jvp.as_slice().unwrap(), fd.as_slice().unwrap());
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn tiny_model_stays_under_fifty_parameters_for_the_ode_terms() {
    let m = tiny_model(TdmVariant::Tdm, 0);
    let n = m.encoder().num_params() + m.forward_dynamics().num_params() + m.reverse_dynamics().num_params();
    assert!(n <= 50, "{n} parameters");
}

#[test]
fn ode_loss_gradients_match_finite_differences() {
    for seed in 0..3 {
        let model = tiny_model(TdmVariant::Tdm, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let d = Data::random(&mut rng, 5, 1, 1);
        let b = d.batch();

        let wf = only(|w| w.fwd = 1.0);
        let (_, g) = model.objective(&b, &wf, false, Phase::Full).unwrap();
        let loss = |m: &TdmModel| m.loss_forward_ode(b.s, b.a, b.s_next).unwrap();
        for net in [0, 3] {
            let fd = fd_param_grad(&model, net, &loss, 1e-6);
            let err = relative_error(&grads_of(&g, net), &fd);
            assert!(err < 1e-3, "fwd net {net} seed {seed}: {err}");
        }

        let wr = only(|w| w.rvs = 1.0);
        let (_, g) = model.objective(&b, &wr, false, Phase::Full).unwrap();
        let loss = |m: &TdmModel| m.loss_reverse_ode(b.s, b.a, b.s_next).unwrap();
        for net in [0, 4] {
            let fd = fd_param_grad(&model, net, &loss, 1e-6);
            let err = relative_error(&grads_of(&g, net), &fd);
            assert!(err < 1e-3, "rvs net {net} seed {seed}: {err}");
        }
    }
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let d = Data::random(&mut rng, 8, 3, 2);
    let b = d.batch();
    let weights = LossWeights {
        l1: 1e-3,
        ..LossWeights::default()
    };
    for variant in [TdmVariant::Tdm, TdmVariant::TdmNoOde, TdmVariant::AeFwdRep, TdmVariant::AeRep] {
        for enhanced in [false, true] {
            for phase in [Phase::Pretrain, Phase::Full] {
                let model = small_model(variant, 5);
                let (_, g) = model.objective(&b, &weights, enhanced, phase).unwrap();
                let loss = |m: &TdmModel| m.objective(&b, &weights, enhanced, phase).unwrap().0.total;
                for net in 0..5 {
                    let fd = fd_param_grad(&model, net, &loss, 1e-6);
                    let an = grads_of(&g, net);
                    let err = if fd.iter().all(|v| *v == 0.0) {
                        an.iter().map(|v| v.abs()).fold(0.0, f64::max)
                    } else {
                        relative_error(&an, &fd)
                    };
                    assert!(err < 1e-5, "{variant:?} enhanced={enhanced} {phase:?} net {net}: {err}");
                }
            }
        }
    }
}

#[test]
fn objective_value_agrees_with_public_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = Data::random(&mut rng, 9, 3, 2);
    let model = small_model(TdmVariant::Tdm, 9);
    let w = LossWeights::default();
    for enhanced in [false, true] {
        let (a, _) = model.objective(&d.batch(), &w, enhanced, Phase::Full).unwrap();
        let b = model.loss_total(&d.batch(), &w, enhanced).unwrap();
        for (x, y) in [
            (a.rec, b.rec),
            (a.ds, b.ds),
            (a.fwd, b.fwd),
            (a.rvs, b.rvs),
            (a.tsym, b.tsym),
            (a.l1, b.l1),
            (a.total, b.total),
        ] {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}

#[test]
fn exact_zero_certificate_on_linear_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (model, d) = linear_certificate(&mut rng);
    let w = LossWeights::default();
    for enhanced in [false, true] {
        let l = model.loss_total(&d.batch(), &w, enhanced).unwrap();
        assert!(l.total - l.l1 <= 1e-10, "{l:?}");
        let (o, _) = model.objective(&d.batch(), &w, enhanced, Phase::Full).unwrap();
        assert!(o.total - o.l1 <= 1e-10, "{o:?}");
    }
}

#[test]
fn tsym_stub_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut model, _) = linear_certificate(&mut rng);
    model.latent_state_dim = 3;
    let z = randn(&mut rng, 4, 3, 1.0);
    let w = randn(&mut rng, 4, 2, 1.0);
    let c = array![0.3, -1.2, 2.0];
    model.forward_dynamics = constant(5, c.clone());
    model.reverse_dynamics = constant(5, -&c);
    assert_abs_diff_eq!(model.loss_tsym(z.view(), w.view()).unwrap(), 0.0);

    // one-dimensional latent: f ≡ 1, g ≡ −0.5
    let (mut m1, _) = linear_certificate(&mut rng);
    m1.latent_state_dim = 1;
    m1.forward_dynamics = constant(3, array![1.0]);
    m1.reverse_dynamics = constant(3, array![-0.5]);
    let z1 = randn(&mut rng, 5, 1, 1.0);
    let w1 = randn(&mut rng, 5, 2, 1.0);
    let zn = randn(&mut rng, 5, 1, 1.0);
    assert_abs_diff_eq!(m1.loss_tsym(z1.view(), w1.view()).unwrap(), 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(
        m1.loss_tsym_enhanced(z1.view(), w1.view(), zn.view()).unwrap(),
        0.5,
        epsilon = 1e-15
    );
    m1.reverse_dynamics = constant(3, array![-1.0]);
    assert_abs_diff_eq!(
        m1.loss_tsym_enhanced(z1.view(), w1.view(), zn.view()).unwrap(),
        0.0
    );
}

#[test]
fn enhanced_tsym_doubles_when_next_latent_follows_f() {
    let m = small_model(TdmVariant::Tdm, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let z = randn(&mut rng, 6, 3, 1.0);
    let w = randn(&mut rng, 6, 2, 1.0);
    let zn = &z + &m.latent_forward(z.view(), w.view()).unwrap();
    let base = m.loss_tsym(z.view(), w.view()).unwrap();
    let enh = m.loss_tsym_enhanced(z.view(), w.view(), zn.view()).unwrap();
    assert_abs_diff_eq!(enh, 2.0 * base, epsilon = 1e-12);
}

#[test]
fn linear_reversible_tsym_residual_is_a_times_f() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut m, _) = linear_certificate(&mut rng);
    let a_mat = randn(&mut rng, 3, 3, 0.4);
    let b_mat = randn(&mut rng, 3, 2, 0.4);
    m.forward_dynamics = linear(concatenate![Axis(0), a_mat.t(), b_mat.t()], Array1::zeros(3));
    m.reverse_dynamics = linear(-concatenate![Axis(0), a_mat.t(), b_mat.t()], Array1::zeros(3));
    let z = randn(&mut rng, 10, 3, 1.0);
    let w = randn(&mut rng, 10, 2, 1.0);
    let f = z.dot(&a_mat.t()) + w.dot(&b_mat.t());
    let expected = row_sq_norm(f.dot(&a_mat.t()).view());
    let got = m.tsym_per_sample(z.view(), w.view()).unwrap();
    assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
}

#[test]
fn reconstruction_and_ds_stub_arithmetic() {
    // 1-d state, 1-d action: ψ_s ≡ 0.5, ψ_a ≡ 0
    let m = TdmModel::from_parts(
        TdmVariant::Tdm,
        1,
        linear(Array2::eye(2), Array1::zeros(2)),
        constant(2, array![0.5]),
        constant(1, array![0.0]),
        constant(2, array![0.0]),
        constant(2, array![0.0]),
        NormalizationStats::identity(1),
    )
    .unwrap();
    let l = m.loss_reconstruction(array![[1.0]].view(), array![[0.0]].view()).unwrap();
    assert_abs_diff_eq!(l, 0.25);

    // ṡ = [1, 0] against a decoder that outputs zeros on both branches
    let m2 = TdmModel::from_parts(
        TdmVariant::Tdm,
        2,
        linear(Array2::eye(3), Array1::zeros(3)),
        constant(3, array![0.0, 0.0]),
        constant(1, array![0.0]),
        constant(3, array![0.0, 0.0]),
        constant(3, array![0.0, 0.0]),
        NormalizationStats::identity(2),
    )
    .unwrap();
    let ds = m2
        .loss_ds_reconstruction(array![[0.0, 0.0]].view(), array![[0.0]].view(), array![[1.0, 0.0]].view())
        .unwrap();
    assert_abs_diff_eq!(ds, 1.0);

    // a decoder that returns ṡ only on the δ = 1 branch
    let mut w = Array2::zeros((3, 2));
    w[[2, 0]] = 1.0;
    let m3 = TdmModel::from_parts(
        TdmVariant::Tdm,
        2,
        linear(Array2::eye(3), Array1::zeros(3)),
        linear(w, Array1::zeros(2)),
        constant(1, array![0.0]),
        constant(3, array![0.0, 0.0]),
        constant(3, array![0.0, 0.0]),
        NormalizationStats::identity(2),
    )
    .unwrap();
    let ds = m3
        .loss_ds_reconstruction(array![[0.0, 0.0]].view(), array![[0.0]].view(), array![[1.0, 0.0]].view())
        .unwrap();
    assert_abs_diff_eq!(ds, 0.0);
    let rec = m3.loss_reconstruction(array![[1.0, 0.0]].view(), array![[0.0]].view()).unwrap();
    assert_abs_diff_eq!(rec, 1.0);
}

#[test]
fn identity_encoder_with_exact_stub_dynamics_zeroes_ode_losses() {
    // s' = s + c for a constant c, so ṡ ≡ c
    let c = array![0.4, -0.7];
    let m = TdmModel::from_parts(
        TdmVariant::Tdm,
        2,
        linear(Array2::eye(3), Array1::zeros(3)),
        constant(3, array![0.0, 0.0]),
        constant(1, array![0.0]),
        constant(3, c.clone()),
        constant(3, -&c),
        NormalizationStats::identity(2),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = randn(&mut rng, 5, 2, 1.0);
    let a = randn(&mut rng, 5, 1, 1.0);
    let s_next = &s + &c;
    assert_abs_diff_eq!(m.loss_forward_ode(s.view(), a.view(), s_next.view()).unwrap(), 0.0, epsilon = 1e-24);
    assert_abs_diff_eq!(m.loss_reverse_ode(s.view(), a.view(), s_next.view()).unwrap(), 0.0, epsilon = 1e-24);
}

#[test]
fn reverse_jvp_target_is_negated_forward_direction() {
    let m = small_model(TdmVariant::Tdm, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = Data::random(&mut rng, 4, 3, 2);
    let ds = &d.s_next - &d.s;
    let (_, fwd) = m.encoder_jvp(d.s_next.view(), d.a.view(), ds.view()).unwrap();
    let (_, rvs) = m.encoder_jvp(d.s_next.view(), d.a.view(), (-&ds).view()).unwrap();
    assert_abs_diff_eq!(fwd, -rvs, epsilon = 1e-14);
}

#[test]
fn losses_are_permutation_invariant_and_weights_linear() {
    let m = small_model(TdmVariant::Tdm, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let d = Data::random(&mut rng, 6, 3, 2);
    let perm = [3, 0, 5, 1, 4, 2];
    let p = Data {
        s: d.s.select(Axis(0), &perm),
        a: d.a.select(Axis(0), &perm),
        s_next: d.s_next.select(Axis(0), &perm),
    };
    let w = LossWeights::default();
    let x = m.loss_total(&d.batch(), &w, false).unwrap();
    let y = m.loss_total(&p.batch(), &w, false).unwrap();
    assert_abs_diff_eq!(x.total, y.total, epsilon = 1e-12);

    let w2 = LossWeights { fwd: 2.0 * w.fwd, ..w };
    let z = m.loss_total(&d.batch(), &w2, false).unwrap();
    assert_abs_diff_eq!(z.total - x.total, w.fwd * x.fwd, epsilon = 1e-12);
}

#[test]
fn zero_dynamics_and_perfect_data_give_zero_total() {
    // ṡ = 0 everywhere, f = g = 0, identity autoencoder
    let m = TdmModel::from_parts(
        TdmVariant::Tdm,
        2,
        linear(Array2::eye(3), Array1::zeros(3)),
        linear(array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], Array1::zeros(2)),
        linear(Array2::eye(1), Array1::zeros(1)),
        constant(3, array![0.0, 0.0]),
        constant(3, array![0.0, 0.0]),
        NormalizationStats::identity(2),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let s = randn(&mut rng, 5, 2, 1.0);
    let a = randn(&mut rng, 5, 1, 1.0);
    let b = TdmBatch {
        s: s.view(),
        a: a.view(),
        s_next: s.view(),
    };
    let l = m.loss_total(&b, &LossWeights::default(), false).unwrap();
    assert_eq!(l.total, 0.0);
}

#[test]
fn tsym_input_gradient_matches_finite_differences() {
    let m = small_model(TdmVariant::Tdm, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let z = randn(&mut rng, 4, 3, 1.0);
    let w = randn(&mut rng, 4, 2, 1.0);
    let coef = array![0.5, 1.0, -2.0, 0.25];
    let (vals, gz, gw) = m.tsym_with_input_grad(z.view(), w.view(), coef.view()).unwrap();
    assert_abs_diff_eq!(vals, m.tsym_per_sample(z.view(), w.view()).unwrap(), epsilon = 1e-14);
    let obj = |z: &Array2<f64>, w: &Array2<f64>| m.tsym_per_sample(z.view(), w.view()).unwrap().dot(&coef);
    let h = 1e-6;
    for ((i, j), &g) in gz.indexed_iter() {
        let (mut up, mut down) = (z.clone(), z.clone());
        up[[i, j]] += h;
        down[[i, j]] -= h;
        assert_abs_diff_eq!(g, (obj(&up, &w) - obj(&down, &w)) / (2.0 * h), epsilon = 1e-6);
    }
    for ((i, j), &g) in gw.indexed_iter() {
        let (mut up, mut down) = (w.clone(), w.clone());
        up[[i, j]] += h;
        down[[i, j]] -= h;
        assert_abs_diff_eq!(g, (obj(&z, &up) - obj(&z, &down)) / (2.0 * h), epsilon = 1e-6);
    }
}

fn toy_dataset(rng: &mut ChaCha8Rng, n: usize) -> TransitionDataset {
    let s = randn(rng, n, 3, 1.0);
    let a = randn(rng, n, 2, 1.0);
    let s_next = &s * 0.9 + &a.dot(&array![[0.2, 0.0, 0.1], [0.0, 0.3, -0.1]]);
    let terminals = vec![true; n];
    TransitionDataset::new("toy", s, a, Array1::zeros(n), s_next, terminals, None).unwrap()
}

fn desk_config(variant: TdmVariant, epochs: usize, pretrain: usize) -> TdmConfig {
    TdmConfig {
        encoder_hidden: vec![16, 16],
        dynamics_hidden_width: 16,
        dynamics_layers: 3,
        training_epochs: epochs,
        pretrain_epochs: pretrain,
        batch_size: 32,
        variant,
        ..TdmConfig::default()
    }
}

#[test]
fn single_epoch_descends_on_toy_data() {
    let mut decreased = 0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = toy_dataset(&mut rng, 10);
        let cfg = desk_config(TdmVariant::Tdm, 1, 0);
        let mut trainer = TdmTrainer::new(3, 2, &cfg, NormalizationStats::identity(3), seed).unwrap();
        let w = cfg.weights;
        let before = trainer.model().loss_total(&TdmBatch::from_dataset(&data), &w, false).unwrap();
        trainer.run(&data, |_| {}).unwrap();
        let after = trainer.model().loss_total(&TdmBatch::from_dataset(&data), &w, false).unwrap();
        if after.total < before.total {
            decreased += 1;
        }
    }
    assert!(decreased >= 9, "{decreased}/10 seeds decreased");
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let data = toy_dataset(&mut rng, 128);
    let cfg = TdmConfig {
        learning_rate: 3e-3,
        ..desk_config(TdmVariant::Tdm, 30, 5)
    };
    let (m1, h1) = train_tdm(&data, NormalizationStats::identity(3), &cfg, 9).unwrap();
    let (m2, h2) = train_tdm(&data, NormalizationStats::identity(3), &cfg, 9).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(m1.parameter_fingerprint(), m2.parameter_fingerprint());
    assert_eq!(h1.len(), 30);
    assert!(h1[..5].iter().all(|r| r.phase == Phase::Pretrain));
    assert!(h1[5..].iter().all(|r| r.phase == Phase::Full));
    assert!(h1[29].loss.total < h1[5].loss.total);
    let (m3, _) = train_tdm(&data, NormalizationStats::identity(3), &cfg, 10).unwrap();
    assert_ne!(m1.parameter_fingerprint(), m3.parameter_fingerprint());
}

#[test]
fn pretraining_and_ae_rep_leave_dynamics_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let data = toy_dataset(&mut rng, 64);
    let dyn_hash = |m: &TdmModel| {
        let mut p = m.forward_dynamics().flat_params();
        p.extend(m.reverse_dynamics().flat_params());
        p
    };

    let cfg = desk_config(TdmVariant::AeRep, 6, 2);
    let mut t = TdmTrainer::new(3, 2, &cfg, NormalizationStats::identity(3), 3).unwrap();
    let initial = dyn_hash(t.model());
    let enc0 = t.model().encoder().flat_params();
    t.run(&data, |_| {}).unwrap();
    assert_eq!(dyn_hash(t.model()), initial);
    assert_ne!(t.model().encoder().flat_params(), enc0);

    let cfg = desk_config(TdmVariant::Tdm, 4, 2);
    let mut t = TdmTrainer::new(3, 2, &cfg, NormalizationStats::identity(3), 3).unwrap();
    let initial = dyn_hash(t.model());
    t.run_epoch(&data).unwrap();
    t.run_epoch(&data).unwrap();
    assert_eq!(dyn_hash(t.model()), initial);
    t.run_epoch(&data).unwrap();
    assert_ne!(dyn_hash(t.model()), initial);

    let cfg = desk_config(TdmVariant::AeFwdRep, 3, 0);
    let mut t = TdmTrainer::new(3, 2, &cfg, NormalizationStats::identity(3), 3).unwrap();
    let g0 = t.model().reverse_dynamics().flat_params();
    let f0 = t.model().forward_dynamics().flat_params();
    t.run(&data, |_| {}).unwrap();
    assert_eq!(t.model().reverse_dynamics().flat_params(), g0);
    assert_ne!(t.model().forward_dynamics().flat_params(), f0);
}

#[test]
fn non_finite_data_aborts_with_model_intact() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let data = toy_dataset(&mut rng, 16);
    let mut s = data.states().to_owned();
    s[[3, 1]] = f64::NAN;
    let bad = TransitionDataset::new(
        "bad",
        s,
        data.actions().to_owned(),
        Array1::zeros(16),
        data.next_states().to_owned(),
        vec![true; 16],
        None,
    )
    .unwrap();
    let cfg = desk_config(TdmVariant::Tdm, 2, 0);
    let mut t = TdmTrainer::new(3, 2, &cfg, NormalizationStats::identity(3), 0).unwrap();
    let before = t.model().parameter_fingerprint();
    let err = t.run(&bad, |_| {}).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    assert_eq!(t.model().parameter_fingerprint(), before);
}

#[test]
fn scores_are_non_negative_and_row_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let data = toy_dataset(&mut rng, 40);
    let m = small_model(TdmVariant::Tdm, 54);
    let scores = tsym_scores(&m, &data).unwrap();
    assert_eq!(scores.len(), 40);
    assert!(scores.iter().all(|&v| v >= 0.0));
    let perm: Vec<usize> = (0..40).rev().collect();
    let permuted = data.select(&perm).unwrap();
    let ps = tsym_scores(&m, &permuted).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(ps[k], scores[i]);
    }
}

#[test]
fn checkpoint_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tdm.json");
    let m = small_model(TdmVariant::TdmNoOde, 55);
    let cfg = tiny_config(TdmVariant::TdmNoOde);
    save_tdm(&path, &TdmCheckpoint::new(m.clone(), cfg.clone(), 55, 0)).unwrap();
    let back = load_tdm(&path).unwrap();
    assert_eq!(back.model, m);
    assert_eq!(back.config, cfg);

    let mut tampered = TdmCheckpoint::new(m, cfg, 55, 0);
    tampered.model.encoder.layers_mut()[0].bias[0] += 1.0;
    save_tdm(&path, &tampered).unwrap();
    assert!(matches!(load_tdm(&path), Err(Error::Format(_))));
}

#[test]
fn from_parts_rejects_mismatched_widths() {
    let r = TdmModel::from_parts(
        TdmVariant::Tdm,
        2,
        linear(Array2::eye(3), Array1::zeros(3)),
        constant(2, array![0.0, 0.0]),
        constant(1, array![0.0]),
        constant(3, array![0.0, 0.0]),
        constant(3, array![0.0, 0.0]),
        NormalizationStats::identity(2),
    );
    assert!(matches!(r, Err(Error::Shape(_))));
}

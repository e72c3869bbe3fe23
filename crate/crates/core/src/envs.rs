//! Small dynamical systems with closed-form forward and reverse dynamics,
//! used to generate offline datasets and to evaluate policies.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TransitionDataset;
use crate::error::{Error, Result};

/// Episodes used to estimate the normalization references.
const REFERENCE_EPISODES: usize = 200;
const REFERENCE_SEED: u64 = 0x5EED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// `s' = s + A_d s + B_d a`; exactly invertible.
    LinearReversible,
    /// Frictionless pendulum hanging at `θ = 0`, integrated with
    /// semi-implicit Euler; exactly invertible.
    Pendulum,
    /// Damped point mass, `v' = v + dt (a − μ v)`, `x' = x + dt v'`.
    PointmassFriction,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::LinearReversible => "linear_reversible",
            EnvKind::Pendulum => "pendulum",
            EnvKind::PointmassFriction => "pointmass_friction",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [EnvKind::LinearReversible, EnvKind::Pendulum, EnvKind::PointmassFriction]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownEnv(s.to_string()))
    }
}

/// Optional overrides of an environment's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    /// Linear system only; must be even when `a_matrix` is not given.
    pub state_dim: Option<usize>,
    /// Linear system only.
    pub action_dim: Option<usize>,
    /// Row-major `A_d` for the linear system.
    pub a_matrix: Option<Vec<Vec<f64>>>,
    /// Row-major `B_d` for the linear system.
    pub b_matrix: Option<Vec<Vec<f64>>>,
    /// Friction coefficient μ of the point mass.
    pub friction: Option<f64>,
    pub dt: Option<f64>,
    pub horizon: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorPolicy {
    Random,
    /// Weakened expert gain plus substantial noise.
    ScriptedSuboptimal,
    /// Expert with small Gaussian action noise.
    NoisyExpert,
}

impl std::str::FromStr for BehaviorPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BehaviorPolicy::Random),
            "scripted-suboptimal" => Ok(BehaviorPolicy::ScriptedSuboptimal),
            "noisy-expert" => Ok(BehaviorPolicy::NoisyExpert),
            other => Err(Error::Config(format!("unknown behavior policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct OracleEnv {
    kind: EnvKind,
    state_dim: usize,
    action_dim: usize,
    dt: f64,
    horizon: usize,
    friction: f64,
    /// Pendulum `g / l`.
    omega_sq: f64,
    a_d: Array2<f64>,
    b_d: Array2<f64>,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    state_cost: f64,
    velocity_cost: f64,
    action_cost: f64,
    expert_gain: Array2<f64>,
    seed: u64,
    random_ref: f64,
    expert_ref: f64,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(Array2::from_shape_fn((r, c), |(i, j)| rows[i][j]))
}

/// Default linear system: 2x2 rotation blocks scaled slightly above one
/// (mildly unstable) with one actuated coordinate per block.
fn default_linear(n: usize, m: usize) -> (Array2<f64>, Array2<f64>) {
    let (r, theta) = (1.02_f64, 0.15_f64);
    let mut a = Array2::zeros((n, n));
    for k in 0..n / 2 {
        let (i, j) = (2 * k, 2 * k + 1);
        a[[i, i]] = r * theta.cos() - 1.0;
        a[[i, j]] = -r * theta.sin();
        a[[j, i]] = r * theta.sin();
        a[[j, j]] = r * theta.cos() - 1.0;
    }
    let mut b = Array2::zeros((n, m));
    for k in 0..n / 2 {
        b[[2 * k, k % m]] = 0.2;
    }
    (a, b)
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Infinite-horizon discrete LQR gain `K` (control `u = −K s`) for
/// `s' = F s + G u` with stage cost `sᵀQs + uᵀRu`.
fn lqr_gain(f: &Array2<f64>, g: &Array2<f64>, q: &Array2<f64>, r: &Array2<f64>) -> Result<Array2<f64>> {
    let (f, g, q, r) = (to_dmatrix(f), to_dmatrix(g), to_dmatrix(q), to_dmatrix(r));
    let mut p = q.clone();
    let mut k = DMatrix::zeros(g.ncols(), f.nrows());
    for _ in 0..100_000 {
        let gtp = g.transpose() * &p;
        let inner = (&r + &gtp * &g)
            .try_inverse()
            .ok_or_else(|| Error::Config("LQR iteration hit a singular matrix".into()))?;
        k = &inner * &gtp * &f;
        let next = &q + f.transpose() * &p * &f - f.transpose() * &p * &g * &k;
        let delta = (&next - &p).abs().max();
        p = next;
        if delta < 1e-12 * (1.0 + p.abs().max()) {
            break;
        }
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::Config("LQR iteration diverged; system is not stabilizable".into()));
    }
    Ok(Array2::from_shape_fn((k.nrows(), k.ncols()), |(i, j)| k[(i, j)]))
}

/// Creates a registered environment. The dynamics depend only on `name`
/// and `params`; `seed` is the default stream for resets.
pub fn make_env(name: &str, params: &EnvParams, seed: u64) -> Result<OracleEnv> {
    let kind: EnvKind = name.parse()?;
    let dt = params.dt.unwrap_or(match kind {
        EnvKind::LinearReversible => 1.0,
        EnvKind::Pendulum => 0.05,
        EnvKind::PointmassFriction => 0.1,
    });
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let horizon = params.horizon.unwrap_or(match kind {
        EnvKind::LinearReversible => 50,
        EnvKind::Pendulum | EnvKind::PointmassFriction => 100,
    });
    if horizon == 0 {
        return Err(Error::Config("horizon must be positive".into()));
    }
    let friction = params.friction.unwrap_or(0.0);
    if !(friction >= 0.0 && friction.is_finite()) {
        return Err(Error::Config(format!("friction must be non-negative, got {friction}")));
    }
    if kind != EnvKind::PointmassFriction && params.friction.is_some() {
        return Err(Error::Config(format!("`friction` does not apply to {}", kind.name())));
    }
    let omega_sq = 4.0;

    let (a_d, b_d, low, high, costs) = match kind {
        EnvKind::LinearReversible => {
            let (a, b) = match (&params.a_matrix, &params.b_matrix) {
                (Some(a), Some(b)) => (matrix_from_rows(a, "a_matrix")?, matrix_from_rows(b, "b_matrix")?),
                (None, None) => {
                    let n = params.state_dim.unwrap_or(4);
                    let m = params.action_dim.unwrap_or(2);
                    if n == 0 || n % 2 != 0 || m == 0 {
                        return Err(Error::Config(format!(
                            "linear system needs an even state dimension and a positive action dimension, got {n} and {m}"
                        )));
                    }
                    default_linear(n, m)
                }
                _ => return Err(Error::Config("give both a_matrix and b_matrix or neither".into())),
            };
            if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
                return Err(Error::Config(format!(
                    "a_matrix must be square and match b_matrix rows, got {:?} and {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
            let m = b.ncols();
            (a, b, vec![-1.0; m], vec![1.0; m], (1.0, 1.0, 0.1))
        }
        EnvKind::Pendulum => {
            let a = Array2::from_shape_vec((2, 2), vec![-dt * dt * omega_sq, dt, -dt * omega_sq, 0.0]).unwrap();
            let b = Array2::from_shape_vec((2, 1), vec![dt * dt, dt]).unwrap();
            (a, b, vec![-2.0], vec![2.0], (1.0, 0.1, 0.01))
        }
        EnvKind::PointmassFriction => {
            let k = 1.0 - dt * friction;
            let a = Array2::from_shape_vec((2, 2), vec![0.0, dt * k, 0.0, k - 1.0]).unwrap();
            let b = Array2::from_shape_vec((2, 1), vec![dt * dt, dt]).unwrap();
            (a, b, vec![-1.0], vec![1.0], (1.0, 0.1, 0.01))
        }
    };
    let state_dim = a_d.nrows();
    let action_dim = b_d.ncols();
    let (state_cost, velocity_cost, action_cost) = costs;

    let f = Array2::eye(state_dim) + &a_d;
    let mut q = Array2::eye(state_dim) * state_cost;
    if kind != EnvKind::LinearReversible {
        q[[1, 1]] = velocity_cost;
    }
    let r = Array2::eye(action_dim) * action_cost;
    let expert_gain = lqr_gain(&f, &b_d, &q, &r)?;

    let mut env = OracleEnv {
        kind,
        state_dim,
        action_dim,
        dt,
        horizon,
        friction,
        omega_sq,
        a_d,
        b_d,
        action_low: low,
        action_high: high,
        state_cost,
        velocity_cost,
        action_cost,
        expert_gain,
        seed,
        random_ref: 0.0,
        expert_ref: 0.0,
    };
    let seeds = [REFERENCE_SEED];
    env.random_ref = env.average_return(BehaviorPolicy::Random, REFERENCE_EPISODES, &seeds);
    env.expert_ref = env.average_return_expert(REFERENCE_EPISODES, &seeds);
    if !(env.expert_ref > env.random_ref) {
        return Err(Error::Config(format!(
            "{}: expert reference {} does not beat random reference {}",
            kind.name(),
            env.expert_ref,
            env.random_ref
        )));
    }
    Ok(env)
}

impl OracleEnv {
    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn friction(&self) -> f64 {
        self.friction
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn action_low(&self) -> &[f64] {
        &self.action_low
    }

    pub fn action_high(&self) -> &[f64] {
        &self.action_high
    }

    /// Discrete-time `A_d` (linearized for the pendulum).
    pub fn a_matrix(&self) -> &Array2<f64> {
        &self.a_d
    }

    pub fn b_matrix(&self) -> &Array2<f64> {
        &self.b_d
    }

    pub fn random_ref(&self) -> f64 {
        self.random_ref
    }

    pub fn expert_ref(&self) -> f64 {
        self.expert_ref
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
            .collect()
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            EnvKind::LinearReversible => (0..self.state_dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            EnvKind::Pendulum => vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
            EnvKind::PointmassFriction => vec![rng.random_range(-1.0..=1.0), rng.random_range(-0.5..=0.5)],
        }
    }

    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let a_cost: f64 = a.iter().map(|v| v * v).sum::<f64>() * self.action_cost;
        let s_cost = match self.kind {
            EnvKind::LinearReversible => s.iter().map(|v| v * v).sum::<f64>() * self.state_cost,
            EnvKind::Pendulum | EnvKind::PointmassFriction => {
                self.state_cost * s[0] * s[0] + self.velocity_cost * s[1] * s[1]
            }
        };
        -(s_cost + a_cost)
    }

    /// Deterministic next state for a (clipped) action.
    pub fn next_state(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let a = self.clip_action(a);
        match self.kind {
            EnvKind::LinearReversible => {
                let sv = Array1::from(s.to_vec());
                let av = Array1::from(a);
                (&sv + &self.a_d.dot(&sv) + self.b_d.dot(&av)).to_vec()
            }
            EnvKind::Pendulum => {
                let (theta, omega) = (s[0], s[1]);
                let omega_next = omega + self.dt * (-self.omega_sq * theta.sin() + a[0]);
                vec![theta + self.dt * omega_next, omega_next]
            }
            EnvKind::PointmassFriction => {
                let (x, v) = (s[0], s[1]);
                let v_next = v + self.dt * (a[0] - self.friction * v);
                vec![x + self.dt * v_next, v_next]
            }
        }
    }

    /// `(s', r, terminal)`. None of these systems has terminal states;
    /// episodes end at the horizon.
    pub fn step(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64, bool) {
        let a = self.clip_action(a);
        (self.next_state(s, &a), self.reward(s, &a), false)
    }

    /// Closed-form reverse model: the predecessor of `s_next` under `a`,
    /// ignoring friction.
    pub fn reverse_state(&self, s_next: &[f64], a: &[f64]) -> Vec<f64> {
        let a = self.clip_action(a);
        match self.kind {
            EnvKind::LinearReversible => {
                let n = self.state_dim;
                let f = to_dmatrix(&(Array2::eye(n) + &self.a_d));
                let bu = self.b_d.dot(&Array1::from(a));
                let rhs = DVector::from_iterator(n, s_next.iter().zip(bu.iter()).map(|(x, b)| x - b));
                f.lu().solve(&rhs).expect("I + A_d is invertible").iter().copied().collect()
            }
            EnvKind::Pendulum => {
                let (theta_n, omega_n) = (s_next[0], s_next[1]);
                let theta = theta_n - self.dt * omega_n;
                vec![theta, omega_n - self.dt * (-self.omega_sq * theta.sin() + a[0])]
            }
            EnvKind::PointmassFriction => {
                let (x_n, v_n) = (s_next[0], s_next[1]);
                vec![x_n - self.dt * v_n, v_n - self.dt * a[0]]
            }
        }
    }

    /// `‖F(s,a) + G(s',a)‖²` with `F(s,a) = s' − s` and
    /// `G(s',a) = reverse_state(s', a) − s'`.
    pub fn analytic_tsym_residual(&self, s: &[f64], a: &[f64]) -> f64 {
        let s_next = self.next_state(s, a);
        let back = self.reverse_state(&s_next, a);
        back.iter().zip(s).map(|(b, x)| (b - x).powi(2)).sum()
    }

    /// LQR action `−K s`, clipped.
    pub fn expert_action(&self, s: &[f64]) -> Vec<f64> {
        let u = -self.expert_gain.dot(&Array1::from(s.to_vec()));
        self.clip_action(u.as_slice().unwrap())
    }

    pub fn behavior_action<R: Rng + ?Sized>(&self, policy: BehaviorPolicy, s: &[f64], rng: &mut R) -> Vec<f64> {
        let half: Vec<f64> = self
            .action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| 0.5 * (hi - lo))
            .collect();
        match policy {
            BehaviorPolicy::Random => self
                .action_low
                .iter()
                .zip(&self.action_high)
                .map(|(&lo, &hi)| rng.random_range(lo..=hi))
                .collect(),
            BehaviorPolicy::ScriptedSuboptimal | BehaviorPolicy::NoisyExpert => {
                let (gain, noise) = match policy {
                    BehaviorPolicy::ScriptedSuboptimal => (0.1, 0.5),
                    _ => (1.0, 0.1),
                };
                let u = -self.expert_gain.dot(&Array1::from(s.to_vec())) * gain;
                let raw: Vec<f64> = u
                    .iter()
                    .zip(&half)
                    .map(|(&v, &h)| v + Normal::new(0.0, noise * h).unwrap().sample(rng))
                    .collect();
                self.clip_action(&raw)
            }
        }
    }

    /// Undiscounted return of one episode from `s0`.
    pub fn rollout_from(&self, s0: &[f64], mut act: impl FnMut(&[f64]) -> Vec<f64>) -> f64 {
        let mut s = s0.to_vec();
        let mut total = 0.0;
        for _ in 0..self.horizon {
            let a = act(&s);
            let (next, r, done) = self.step(&s, &a);
            total += r;
            if done {
                break;
            }
            s = next;
        }
        total
    }

    fn average_return(&self, policy: BehaviorPolicy, episodes: usize, seeds: &[u64]) -> f64 {
        let mut total = 0.0;
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..episodes {
                let s0 = self.reset(&mut rng);
                let mut act_rng = ChaCha8Rng::seed_from_u64(rng.random());
                total += self.rollout_from(&s0, |s| self.behavior_action(policy, s, &mut act_rng));
            }
        }
        total / (episodes * seeds.len()) as f64
    }

    fn average_return_expert(&self, episodes: usize, seeds: &[u64]) -> f64 {
        evaluate_policy(self, |s| self.expert_action(s), episodes, seeds)
            .map(|r| r.mean_return)
            .unwrap_or(f64::NAN)
    }

    /// `100 · (return − random_ref) / (expert_ref − random_ref)`.
    pub fn normalized_score(&self, ret: f64) -> f64 {
        100.0 * (ret - self.random_ref) / (self.expert_ref - self.random_ref)
    }
}

/// Rolls out `episodes` episodes for each seed. Initial states for seed
/// `k` come from a stream seeded with `k`, so different policies are
/// compared on identical start states.
pub fn evaluate_policy(
    env: &OracleEnv,
    mut act: impl FnMut(&[f64]) -> Vec<f64>,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    if episodes == 0 || seeds.is_empty() {
        return Err(Error::Argument("evaluation needs at least one episode and one seed".into()));
    }
    let mut returns = Vec::with_capacity(episodes * seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..episodes {
            let s0 = env.reset(&mut rng);
            let _ = rng.random::<u64>();
            returns.push(env.rollout_from(&s0, &mut act));
        }
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport {
        mean_return: mean,
        std_return: std,
        normalized_score: env.normalized_score(mean),
        episodes,
        seeds: seeds.to_vec(),
    })
}

/// Concatenates behavior-policy episodes until `n` transitions are
/// collected. Episodes end in a timeout at the horizon; the last episode
/// is truncated at `n` and also marked as timed out.
pub fn collect_dataset(env: &OracleEnv, policy: BehaviorPolicy, n: usize, seed: u64) -> Result<TransitionDataset> {
    if n == 0 {
        return Err(Error::Argument("cannot collect an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ds, da) = (env.state_dim, env.action_dim);
    let mut states = Vec::with_capacity(n * ds);
    let mut actions = Vec::with_capacity(n * da);
    let mut rewards = Vec::with_capacity(n);
    let mut next_states = Vec::with_capacity(n * ds);
    let mut timeouts = Vec::with_capacity(n);
    while rewards.len() < n {
        let mut s = env.reset(&mut rng);
        for t in 0..env.horizon {
            let a = env.behavior_action(policy, &s, &mut rng);
            let (next, r, _) = env.step(&s, &a);
            states.extend_from_slice(&s);
            actions.extend_from_slice(&a);
            rewards.push(r);
            next_states.extend_from_slice(&next);
            let last = rewards.len() == n;
            timeouts.push(t + 1 == env.horizon || last);
            if last {
                break;
            }
            s = next;
        }
    }
    let to2 = |v: Vec<f64>, c: usize| Array2::from_shape_vec((n, c), v).expect("row-major buffer");
    TransitionDataset::new(
        format!("{}-{}", env.name(), behavior_name(policy)),
        to2(states, ds),
        to2(actions, da),
        Array1::from(rewards),
        to2(next_states, ds),
        vec![false; n],
        Some(timeouts),
    )
}

fn behavior_name(p: BehaviorPolicy) -> &'static str {
    match p {
        BehaviorPolicy::Random => "random",
        BehaviorPolicy::ScriptedSuboptimal => "scripted-suboptimal",
        BehaviorPolicy::NoisyExpert => "noisy-expert",
    }
}

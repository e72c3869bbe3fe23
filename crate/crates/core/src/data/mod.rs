//! Offline transition datasets: validation, trajectory handling,
//! subsampling, feature filtering and state normalization.

mod io;

pub use io::{load_dataset, save_dataset, ContainerKind};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lower bound applied to every per-dimension standard deviation.
pub const STD_FLOOR: f64 = 1e-3;

/// Columnar store of `(s, a, r, s', done)` transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    states: Array2<f64>,
    actions: Array2<f64>,
    rewards: Array1<f64>,
    next_states: Array2<f64>,
    terminals: Vec<bool>,
    timeouts: Option<Vec<bool>>,
    name: String,
}

/// A half-open index range `[start, end)` into a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: usize,
    pub end: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

impl TransitionDataset {
    pub fn new(
        name: impl Into<String>,
        states: Array2<f64>,
        actions: Array2<f64>,
        rewards: Array1<f64>,
        next_states: Array2<f64>,
        terminals: Vec<bool>,
        timeouts: Option<Vec<bool>>,
    ) -> Result<Self> {
        let n = states.nrows();
        if n == 0 {
            return Err(Error::Validation("dataset has no transitions".into()));
        }
        let counts = [
            ("actions", actions.nrows()),
            ("rewards", rewards.len()),
            ("next_observations", next_states.nrows()),
            ("terminals", terminals.len()),
        ];
        for (key, len) in counts {
            if len != n {
                return Err(Error::Validation(format!(
                    "`{key}` has {len} rows but `observations` has {n}"
                )));
            }
        }
        if next_states.ncols() != states.ncols() {
            return Err(Error::Validation(format!(
                "next_observations have {} columns, observations {}",
                next_states.ncols(),
                states.ncols()
            )));
        }
        if let Some(t) = &timeouts {
            if t.len() != n {
                return Err(Error::Validation(format!(
                    "`timeouts` has {} rows but `observations` has {n}",
                    t.len()
                )));
            }
            if let Some(i) = (0..n).find(|&i| t[i] && terminals[i]) {
                return Err(Error::Validation(format!(
                    "row {i} is flagged both terminal and timeout"
                )));
            }
        }
        let ds = TransitionDataset {
            states,
            actions,
            rewards,
            next_states,
            terminals,
            timeouts,
            name: name.into(),
        };
        if let Some(i) = ds.first_discontinuity() {
            return Err(Error::Validation(format!(
                "row {i} is inside a trajectory but next_observations[{i}] != observations[{}]",
                i + 1
            )));
        }
        Ok(ds)
    }

    fn first_discontinuity(&self) -> Option<usize> {
        (0..self.len().saturating_sub(1)).find(|&i| {
            !self.ends_trajectory(i)
                && self
                    .next_states
                    .row(i)
                    .iter()
                    .zip(self.states.row(i + 1))
                    .any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())))
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn states(&self) -> ArrayView2<'_, f64> {
        self.states.view()
    }

    pub fn actions(&self) -> ArrayView2<'_, f64> {
        self.actions.view()
    }

    pub fn rewards(&self) -> ArrayView1<'_, f64> {
        self.rewards.view()
    }

    pub fn next_states(&self) -> ArrayView2<'_, f64> {
        self.next_states.view()
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }

    pub fn timeouts(&self) -> Option<&[bool]> {
        self.timeouts.as_deref()
    }

    /// Whether row `i` closes its trajectory (terminal or timeout).
    pub fn ends_trajectory(&self, i: usize) -> bool {
        self.terminals[i] || self.timeouts.as_ref().is_some_and(|t| t[i])
    }

    /// TD bootstrapping mask: only true environment terminals count.
    pub fn done_mask(&self) -> Array1<f64> {
        self.terminals.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect()
    }

    /// Rows `indices` in the given order. A row whose original successor is
    /// not the next selected row gets a timeout flag so trajectory
    /// boundaries survive the selection.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Validation("selection is empty".into()));
        }
        let mut timeouts: Vec<bool> = indices
            .iter()
            .map(|&i| self.timeouts.as_ref().is_some_and(|t| t[i]))
            .collect();
        for (k, &i) in indices.iter().enumerate() {
            let continues = indices.get(k + 1).is_some_and(|&j| j == i + 1);
            if !self.ends_trajectory(i) && !continues && k + 1 < indices.len() {
                timeouts[k] = true;
            }
        }
        let any_timeout = timeouts.iter().any(|&t| t);
        TransitionDataset::new(
            self.name.clone(),
            self.states.select(Axis(0), indices),
            self.actions.select(Axis(0), indices),
            self.rewards.select(Axis(0), indices),
            self.next_states.select(Axis(0), indices),
            indices.iter().map(|&i| self.terminals[i]).collect(),
            (any_timeout || self.timeouts.is_some()).then_some(timeouts),
        )
    }

    /// Same transitions with states and next states mapped through `stats`.
    pub fn normalized_with(&self, stats: &NormalizationStats) -> Result<Self> {
        Ok(TransitionDataset {
            states: stats.normalize(self.states.view())?,
            next_states: stats.normalize(self.next_states.view())?,
            ..self.clone()
        })
    }
}

/// Splits the dataset into trajectories. A segment closes after any index
/// flagged terminal or timeout, and at the end of the dataset.
pub fn split_trajectories(d: &TransitionDataset) -> Vec<Trajectory> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..d.len() {
        if d.ends_trajectory(i) || i + 1 == d.len() {
            out.push(Trajectory { start, end: i + 1 });
            start = i + 1;
        }
    }
    out
}

/// Which trajectories `subsample_trajectories` draws, in draw order.
pub fn subsample_plan(trajectories: &[Trajectory], target_transitions: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..trajectories.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut total = 0;
    let mut picked = Vec::new();
    for idx in order {
        if total >= target_transitions {
            break;
        }
        total += trajectories[idx].len();
        picked.push(idx);
    }
    picked
}

/// Draws whole trajectories uniformly without replacement until the number
/// of transitions first reaches `target_transitions`.
pub fn subsample_trajectories(
    d: &TransitionDataset,
    target_transitions: usize,
    seed: u64,
) -> Result<TransitionDataset> {
    if target_transitions == 0 || target_transitions > d.len() {
        return Err(Error::Argument(format!(
            "target of {target_transitions} transitions is outside [1, {}]",
            d.len()
        )));
    }
    let trajectories = split_trajectories(d);
    let rows: Vec<usize> = subsample_plan(&trajectories, target_transitions, seed)
        .into_iter()
        .flat_map(|t| trajectories[t].start..trajectories[t].end)
        .collect();
    d.select(&rows)
}

/// Keeps transitions whose `states[.., dim]` is at most
/// `fraction × max(states[.., dim])`.
pub fn filter_by_feature(d: &TransitionDataset, dim: usize, fraction: f64) -> Result<TransitionDataset> {
    if dim >= d.state_dim() {
        return Err(Error::Argument(format!(
            "feature {dim} out of range for {}-dimensional states",
            d.state_dim()
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction {fraction} not in (0, 1]")));
    }
    let column = d.states.column(dim);
    let max = column.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let cutoff = fraction * max;
    let keep: Vec<usize> = (0..d.len()).filter(|&i| column[i] <= cutoff).collect();
    if keep.is_empty() {
        return Err(Error::Validation(format!(
            "filtering feature {dim} at {fraction} x max ({max}) removes every transition"
        )));
    }
    d.select(&keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Per-dimension mean and (population) standard deviation of `x`,
    /// with the standard deviation floored at [`STD_FLOOR`].
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::Argument(
                "normalization needs at least two transitions".into(),
            ));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        Ok(NormalizationStats {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn identity(dim: usize) -> Self {
        NormalizationStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::Shape(format!(
                "stats cover {} dimensions, data has {cols}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mean = ArrayView1::from(&self.mean[..]);
        let std = ArrayView1::from(&self.std[..]);
        Ok((&x - &mean) / &std)
    }

    pub fn denormalize(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mean = ArrayView1::from(&self.mean[..]);
        let std = ArrayView1::from(&self.std[..]);
        Ok(&x * &std + &mean)
    }

    pub fn normalize_row(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check(s.len())?;
        Ok(s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect())
    }

    /// Stable fingerprint used to detect checkpoint/data mismatches.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// Normalizes states and next states with statistics of `states` only.
pub fn normalize_states(d: &TransitionDataset) -> Result<(TransitionDataset, NormalizationStats)> {
    let stats = NormalizationStats::fit(d.states())?;
    Ok((d.normalized_with(&stats)?, stats))
}

/// Finite-difference time derivative `s' − s`.
pub fn state_derivative(s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
    if s.len() != s_next.len() {
        return Err(Error::Argument(format!(
            "state has {} dims, next state {}",
            s.len(),
            s_next.len()
        )));
    }
    Ok(s_next.iter().zip(s).map(|(b, a)| b - a).collect())
}

/// Batched [`state_derivative`].
pub fn state_derivatives(states: ArrayView2<f64>, next_states: ArrayView2<f64>) -> Array2<f64> {
    &next_states - &states
}

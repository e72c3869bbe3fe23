use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::MetricsRecord;
use crate::augment::{augment_batch, compute_threshold, AugmentationRule, LatentBatch};
use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::tdm::{tsym_scores, TdmModel};

/// Quantiles reported by [`ScoreSummary`].
pub const SUMMARY_QUANTILES: [f64; 2] = [0.5, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Keyed by the quantile level, e.g. `"0.5"`.
    pub quantiles: BTreeMap<String, f64>,
}

fn check_dims(tdm: &TdmModel, raw: &TransitionDataset) -> Result<()> {
    if tdm.state_dim() != raw.state_dim() || tdm.action_dim() != raw.action_dim() {
        return Err(Error::Compatibility(format!(
            "tdm expects ({}, {}) state/action dims, dataset has ({}, {})",
            tdm.state_dim(),
            tdm.action_dim(),
            raw.state_dim(),
            raw.action_dim()
        )));
    }
    Ok(())
}

/// Per-transition T-symmetry scores of a raw dataset, normalized with the
/// TDM's own statistics.
pub fn score_dataset(tdm: &TdmModel, raw: &TransitionDataset) -> Result<Array1<f64>> {
    check_dims(tdm, raw)?;
    tsym_scores(tdm, &raw.normalized_with(tdm.stats())?)
}

pub fn summarize_scores(scores: &[f64]) -> Result<ScoreSummary> {
    if scores.is_empty() {
        return Err(Error::Argument("no scores to summarize".into()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut quantiles = BTreeMap::new();
    for q in SUMMARY_QUANTILES {
        quantiles.insert(q.to_string(), compute_threshold(scores, q)?);
    }
    Ok(ScoreSummary {
        n: scores.len(),
        mean,
        std,
        min: scores.iter().copied().fold(f64::INFINITY, f64::min),
        max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        quantiles,
    })
}

/// `index,score` rows. Scores are written with round-trip precision.
pub fn write_scores_csv(path: &Path, scores: &[f64]) -> Result<()> {
    let mut text = String::with_capacity(scores.len() * 24 + 12);
    text.push_str("index,score\n");
    for (i, s) in scores.iter().enumerate() {
        text.push_str(&format!("{i},{s:?}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "index,score")) => {}
        _ => return Err(parse_err(1, "expected header `index,score`".into())),
    }
    let mut scores = Vec::new();
    for (i, line) in lines {
        let (_, value) = line
            .split_once(',')
            .ok_or_else(|| parse_err(i + 1, "expected two columns".into()))?;
        scores.push(value.trim().parse().map_err(|e| parse_err(i + 1, format!("{e}")))?);
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreviewRow {
    pub source: usize,
    pub z_s: Vec<f64>,
    pub z_next: Vec<f64>,
    pub reward: f64,
    pub tsym: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPreview {
    pub rule: AugmentationRule,
    pub candidates: usize,
    pub kept: usize,
    pub kept_fraction: f64,
    /// Kept rows whose recomputed score exceeds the threshold.
    pub violations: usize,
    pub rows: Vec<PreviewRow>,
}

/// Fits the augmentation rule on `raw` and runs one augmentation pass over
/// its first `limit` transitions.
pub fn augment_preview(
    tdm: &TdmModel,
    raw: &TransitionDataset,
    tau: f64,
    noise_scale: f64,
    k: usize,
    limit: usize,
    seed: u64,
) -> Result<AugmentPreview> {
    check_dims(tdm, raw)?;
    let data = raw.normalized_with(tdm.stats())?;
    let rule = AugmentationRule::fit(tdm, &data, tau, noise_scale, k)?;
    let n = limit.min(data.len());
    if n == 0 {
        return Err(Error::Argument("preview needs at least one transition".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let sub = data.select(&idx)?;
    let cur = tdm.encode(sub.states(), sub.actions())?;
    let next = tdm.encode(sub.next_states(), sub.actions())?;
    let batch = LatentBatch {
        z_s: cur.z_s,
        z_a: cur.z_a,
        rewards: sub.rewards().to_owned(),
        z_next: next.z_s,
        done: sub.done_mask(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = augment_batch(tdm, &batch, &rule, &mut rng)?;
    let rescored = tdm.tsym_per_sample(aug.rows.z_s.view(), aug.rows.z_a.view())?;
    let violations = rescored.iter().filter(|&&s| s > rule.threshold).count();
    let rows = (0..aug.source.len())
        .map(|i| PreviewRow {
            source: aug.source[i],
            z_s: aug.rows.z_s.row(i).to_vec(),
            z_next: aug.rows.z_next.row(i).to_vec(),
            reward: aug.rows.rewards[i],
            tsym: rescored[i],
        })
        .collect();
    Ok(AugmentPreview {
        kept: aug.source.len(),
        kept_fraction: aug.kept_fraction(),
        candidates: aug.candidates,
        violations,
        rule,
        rows,
    })
}

/// Reads a metrics JSONL file. Blank lines are skipped; anything else
/// that fails to parse is reported with its line number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::tools::read_metrics;
use crate::error::{Error, Result};

/// Pointwise statistics of one metric across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub step: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
}

/// Collects `metric` from every file and aggregates it per step. Records
/// where the metric is absent are skipped.
pub fn metric_bands(files: &[PathBuf], metric: &str) -> Result<Vec<Band>> {
    if files.is_empty() {
        return Err(Error::Argument("plotting needs at least one metrics file".into()));
    }
    let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for f in files {
        for rec in read_metrics(f)? {
            let value = serde_json::to_value(&rec)?;
            let field = value
                .get(metric)
                .ok_or_else(|| Error::Argument(format!("unknown metric `{metric}`")))?;
            if let Some(v) = field.as_f64() {
                by_step.entry(rec.step).or_default().push(v);
            }
        }
    }
    Ok(by_step
        .into_iter()
        .map(|(step, vals)| Band {
            step,
            mean: vals.iter().sum::<f64>() / vals.len() as f64,
            min: vals.iter().copied().fold(f64::INFINITY, f64::min),
            max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            runs: vals.len(),
        })
        .collect())
}

/// Renders the mean curve with a min/max band across runs as SVG.
pub fn plot_learning_curves(files: &[PathBuf], metric: &str, out: &Path) -> Result<Vec<Band>> {
    let bands = metric_bands(files, metric)?;
    if bands.is_empty() {
        return Err(Error::Validation(format!("no `{metric}` values in the metrics files")));
    }
    let draw_err = |e: String| Error::io(format!("rendering {}", out.display()), std::io::Error::other(e));
    let x_max = bands.last().unwrap().step.max(1) as f64;
    let x_min = bands[0].step as f64;
    let mut y_min = bands.iter().map(|b| b.min).fold(f64::INFINITY, f64::min);
    let mut y_max = bands.iter().map(|b| b.max).fold(f64::NEG_INFINITY, f64::max);
    if y_max - y_min < 1e-9 {
        y_min -= 1.0;
        y_max += 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    let root = SVGBackend::new(out, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(metric, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x_min..x_max.max(x_min + 1.0), (y_min - pad)..(y_max + pad))
        .map_err(|e| draw_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(metric)
        .draw()
        .map_err(|e| draw_err(e.to_string()))?;
    let upper: Vec<(f64, f64)> = bands.iter().map(|b| (b.step as f64, b.max)).collect();
    let lower: Vec<(f64, f64)> = bands.iter().rev().map(|b| (b.step as f64, b.min)).collect();
    let polygon: Vec<(f64, f64)> = upper.into_iter().chain(lower).collect();
    chart
        .draw_series(std::iter::once(Polygon::new(polygon, BLUE.mix(0.2).filled())))
        .map_err(|e| draw_err(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(bands.iter().map(|b| (b.step as f64, b.mean)), &BLUE))
        .map_err(|e| draw_err(e.to_string()))?;
    root.present().map_err(|e| draw_err(e.to_string()))?;
    Ok(bands)
}

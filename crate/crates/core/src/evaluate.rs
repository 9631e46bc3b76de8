//! Error metrics, residual diagnostics, binned statistics and heatmaps.
//!
//! Residuals are `ŷ − y`, so overestimates are positive.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::DisplacementMap;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("target has zero variance")]
    ZeroVariance,
    #[error("grid spec mismatch for {0}")]
    SpecMismatch(String),
    #[error("heatmap range must be positive")]
    InvalidRange,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<(), EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

fn sum_sq_err(y: &[f64], yhat: &[f64]) -> f64 {
    y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check_pair(y, yhat)?;
    Ok(sum_sq_err(y, yhat) / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    mse(y, yhat).map(f64::sqrt)
}

/// Coefficient of determination, unclamped (negative when worse than the mean).
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check_pair(y, yhat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if y.len() < 2 || ss_tot == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok(1.0 - sum_sq_err(y, yhat) / ss_tot)
}

pub fn residuals(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch(y.len(), yhat.len()));
    }
    Ok(yhat.iter().zip(y).map(|(p, t)| p - t).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rmse: f64,
    pub mse: f64,
    pub r2: f64,
}

impl MetricsRecord {
    /// RMSE is derived from the same MSE value so the two always agree.
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self, EvalError> {
        let mse = mse(y, yhat)?;
        Ok(Self {
            rmse: mse.sqrt(),
            mse,
            r2: r2(y, yhat)?,
        })
    }
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl BoxStats {
    /// Tukey box statistics; `None` for empty input.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&s, 0.25);
        let median = quantile_sorted(&s, 0.5);
        let q3 = quantile_sorted(&s, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside = s.iter().copied().filter(|v| *v >= lo_fence && *v <= hi_fence);
        let whisker_low = inside.clone().fold(f64::INFINITY, f64::min);
        let whisker_high = inside.fold(f64::NEG_INFINITY, f64::max);
        let outliers = s.iter().copied().filter(|v| *v < lo_fence || *v > hi_fence).collect();
        Some(Self {
            median,
            q1,
            q3,
            whisker_low,
            whisker_high,
            outliers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub count: usize,
    pub mae: Option<f64>,
    #[serde(rename = "box")]
    pub box_stats: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedStats {
    /// `n_bins + 1` edges over `[min(y), max(y)]`.
    pub bin_edges: Vec<f64>,
    pub bins: Vec<Bin>,
}

/// Equal-width bin assignment over the true-value range; the last bin is
/// right-inclusive.
fn assign_bins(y: &[f64], n_bins: usize) -> (Vec<f64>, Vec<usize>) {
    let n_bins = n_bins.max(1);
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if y.is_empty() {
        return (vec![0.0; n_bins + 1], vec![]);
    }
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins)
        .map(|i| if i == n_bins { hi } else { lo + width * i as f64 })
        .collect();
    let idx = y
        .iter()
        .map(|v| {
            if width > 0.0 {
                (((v - lo) / width).floor() as usize).min(n_bins - 1)
            } else {
                0
            }
        })
        .collect();
    (edges, idx)
}

fn binned(y: &[f64], yhat: &[f64], n_bins: usize, with_mae: bool, with_box: bool) -> Result<BinnedStats, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch(y.len(), yhat.len()));
    }
    let n_bins = n_bins.max(1);
    let (bin_edges, idx) = assign_bins(y, n_bins);
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for (k, &b) in idx.iter().enumerate() {
        groups[b].push(yhat[k] - y[k]);
    }
    let bins = groups
        .iter()
        .map(|g| Bin {
            count: g.len(),
            mae: (with_mae && !g.is_empty()).then(|| g.iter().map(|r| r.abs()).sum::<f64>() / g.len() as f64),
            box_stats: if with_box { BoxStats::from_values(g) } else { None },
        })
        .collect();
    Ok(BinnedStats { bin_edges, bins })
}

pub fn binned_mae(y: &[f64], yhat: &[f64], n_bins: usize) -> Result<BinnedStats, EvalError> {
    binned(y, yhat, n_bins, true, false)
}

pub fn binned_residual_boxstats(y: &[f64], yhat: &[f64], n_bins: usize) -> Result<BinnedStats, EvalError> {
    binned(y, yhat, n_bins, false, true)
}

/// Both MAE and box statistics per bin.
pub fn binned_stats(y: &[f64], yhat: &[f64], n_bins: usize) -> Result<BinnedStats, EvalError> {
    binned(y, yhat, n_bins, true, true)
}

/// Blue (−range) → white (0) → red (+range), clamped outside the range.
pub fn diverging_color(value: f64, range: f64) -> [u8; 3] {
    let t = (value / range).clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if t < 0.0 {
        [fade(t), fade(t), 255]
    } else {
        [255, fade(t), fade(t)]
    }
}

/// Binary P6 image bytes, row 0 at the top.
pub fn heatmap_ppm(map: &DisplacementMap, range: f64) -> Result<Vec<u8>, EvalError> {
    if !(range > 0.0) || !range.is_finite() {
        return Err(EvalError::InvalidRange);
    }
    let (h, w) = (map.spec.height, map.spec.width);
    let mut out = format!("P6 {w} {h} 255\n").into_bytes();
    out.reserve(h * w * 3);
    for v in &map.values {
        out.extend_from_slice(&diverging_color(*v, range));
    }
    Ok(out)
}

pub fn render_heatmap(map: &DisplacementMap, range: f64, path: &Path) -> Result<(), EvalError> {
    let bytes = heatmap_ppm(map, range)?;
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub rmse: f64,
    pub mse: f64,
    pub r2: f64,
    /// Metrics restricted to held-out validation pixels, when the model had any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub validation: Option<MetricsRecord>,
}

/// A named prediction map plus optional validation-pixel indices.
#[derive(Debug, Clone)]
pub struct NamedPrediction {
    pub name: String,
    pub map: DisplacementMap,
    pub validation_pixels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub n_bins: usize,
    /// Symmetric colour range in mm; defaults to max |truth|.
    pub heatmap_range: Option<f64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            n_bins: 10,
            heatmap_range: None,
        }
    }
}

/// Writes the evaluation directory and returns the per-model metrics in
/// input order.
///
/// Layout: `metrics.json`, `scatter_<model>.csv`, `residuals_<model>.csv`,
/// `bins_<model>.json`, `heatmap_truth.ppm`, `heatmap_<model>.ppm`,
/// `heatmap_diff_<model>.ppm`.
pub fn build_report(
    truth: &DisplacementMap,
    predictions: &[NamedPrediction],
    opts: &ReportOptions,
    out_dir: &Path,
) -> Result<Vec<ModelMetrics>, EvalError> {
    for p in predictions {
        if p.map.spec != truth.spec || p.map.values.len() != truth.values.len() {
            return Err(EvalError::SpecMismatch(p.name.clone()));
        }
    }
    let y = &truth.values;
    let mut metrics = Vec::with_capacity(predictions.len());
    for p in predictions {
        let m = MetricsRecord::compute(y, &p.map.values)?;
        let validation = match &p.validation_pixels {
            Some(idx) if idx.len() >= 2 => {
                let yv: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
                let pv: Vec<f64> = idx.iter().map(|&i| p.map.values[i]).collect();
                MetricsRecord::compute(&yv, &pv).ok()
            }
            _ => None,
        };
        metrics.push(ModelMetrics {
            model: p.name.clone(),
            rmse: m.rmse,
            mse: m.mse,
            r2: m.r2,
            validation,
        });
    }

    fs::create_dir_all(out_dir)?;
    let range = opts
        .heatmap_range
        .unwrap_or_else(|| y.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    let range = if range > 0.0 { range } else { 1.0 };
    render_heatmap(truth, range, &out_dir.join("heatmap_truth.ppm"))?;
    for p in predictions {
        let res = residuals(y, &p.map.values)?;
        let mut scatter = csv::Writer::from_writer(BufWriter::new(File::create(
            out_dir.join(format!("scatter_{}.csv", p.name)),
        )?));
        scatter.write_record(["pixel", "true", "predicted"])?;
        let mut resid = csv::Writer::from_writer(BufWriter::new(File::create(
            out_dir.join(format!("residuals_{}.csv", p.name)),
        )?));
        resid.write_record(["pixel", "true", "residual"])?;
        for (k, (t, r)) in y.iter().zip(&res).enumerate() {
            scatter.write_record([k.to_string(), t.to_string(), p.map.values[k].to_string()])?;
            resid.write_record([k.to_string(), t.to_string(), r.to_string()])?;
        }
        scatter.flush()?;
        resid.flush()?;

        let bins = binned_stats(y, &p.map.values, opts.n_bins)?;
        serde_json::to_writer_pretty(File::create(out_dir.join(format!("bins_{}.json", p.name)))?, &bins)?;

        render_heatmap(&p.map, range, &out_dir.join(format!("heatmap_{}.ppm", p.name)))?;
        let diff = DisplacementMap::from_values(truth.spec, res, truth.epoch_index);
        render_heatmap(&diff, range, &out_dir.join(format!("heatmap_diff_{}.ppm", p.name)))?;
    }
    let mut f = BufWriter::new(File::create(out_dir.join("metrics.json"))?);
    serde_json::to_writer_pretty(&mut f, &metrics)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(metrics)
}

//! Log-likelihood, spread, precision and top-k metrics over evaluation records.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{ModeSet, PoseDistribution};
use crate::model::ImplicitDensityModel;
use crate::rotation::{geodesic_distance, Rotation};
use crate::so3grid::EquivolumetricGrid;

pub const DEFAULT_THRESHOLDS_DEG: [f64; 2] = [15.0, 30.0];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub distribution: PoseDistribution,
    pub gt_annotated: Rotation,
    /// Every rotation equivalent to the annotation, when known.
    pub gt_full: Option<Vec<Rotation>>,
}

impl EvalRecord {
    /// The full orbit if known, else the annotation alone.
    pub fn gt_set(&self) -> &[Rotation] {
        self.gt_full
            .as_deref()
            .unwrap_or(std::slice::from_ref(&self.gt_annotated))
    }
}

pub fn min_distance(r: &Rotation, set: &[Rotation]) -> f64 {
    set.iter()
        .map(|g| geodesic_distance(r, g))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogLikelihood {
    pub mean: f64,
    pub per_record: Vec<f64>,
    /// Records whose density was zero and was floored before the log.
    pub floored: Vec<usize>,
}

/// Mean log density of the cell nearest each annotation.
pub fn average_log_likelihood(records: &[EvalRecord], grid: &EquivolumetricGrid) -> LogLikelihood {
    let mut floored = Vec::new();
    let per_record: Vec<f64> = records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let p = rec.distribution.density_at(grid, &rec.gt_annotated);
            if p < f64::MIN_POSITIVE {
                floored.push(i);
            }
            p.max(f64::MIN_POSITIVE).ln()
        })
        .collect();
    LogLikelihood {
        mean: mean(&per_record),
        per_record,
        floored,
    }
}

/// `log p(gt|x)` with the network queried at `gt` itself and normalized over
/// the grid: `f(gt) − LSE(f(grid)) − log V`.
pub fn log_likelihood_exact(
    model: &ImplicitDensityModel,
    descriptor: &[f64],
    grid: &EquivolumetricGrid,
    gt: &Rotation,
) -> Result<f64> {
    let f = model.forward(descriptor, grid.rotations())?;
    let at = model.forward(descriptor, std::slice::from_ref(gt))?[0];
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(at - lse - grid.cell_volume().ln())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Expected distance from the orbit under the predicted distribution:
/// `Σ_cells p·V·min_g d(cell, g)`.
pub fn record_spread(record: &EvalRecord, grid: &EquivolumetricGrid) -> f64 {
    let orbit = record.gt_set();
    let v = record.distribution.cell_volume();
    grid.rotations()
        .par_iter()
        .zip(record.distribution.densities.par_iter())
        .map(|(r, &p)| if p == 0.0 { 0.0 } else { p * v * min_distance(r, orbit) })
        .sum()
}

/// Mean spread in radians. Every record needs its full ground truth.
pub fn spread(records: &[EvalRecord], grid: &EquivolumetricGrid) -> Result<f64> {
    if let Some(i) = records.iter().position(|r| r.gt_full.is_none()) {
        return Err(Error::MissingFullGroundTruth(i));
    }
    let per: Vec<f64> = records.iter().map(|r| record_spread(r, grid)).collect();
    Ok(mean(&per))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    pub median_error_deg: f64,
    /// Threshold in degrees → fraction of records with error strictly below.
    pub acc_at: BTreeMap<String, f64>,
    pub errors_deg: Vec<f64>,
}

pub fn threshold_key(deg: f64) -> String {
    format!("{deg}")
}

fn accuracy(errors_deg: &[f64], deg: f64) -> f64 {
    errors_deg.iter().filter(|&&e| e < deg).count() as f64 / errors_deg.len() as f64
}

pub fn precision_metrics(
    predictions: &[Rotation],
    records: &[EvalRecord],
    thresholds_deg: &[f64],
) -> Result<Precision> {
    if predictions.len() != records.len() {
        return Err(Error::DimensionMismatch {
            expected: records.len(),
            got: predictions.len(),
        });
    }
    let errors_deg: Vec<f64> = predictions
        .iter()
        .zip(records)
        .map(|(p, r)| min_distance(p, r.gt_set()).to_degrees())
        .collect();
    Ok(Precision {
        median_error_deg: median(&errors_deg),
        acc_at: thresholds_deg
            .iter()
            .map(|&t| (threshold_key(t), accuracy(&errors_deg, t)))
            .collect(),
        errors_deg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub threshold_deg: f64,
    pub topk_acc: f64,
    pub topk_error_median_deg: f64,
    pub topk_spread_deg: f64,
    pub errors_deg: Vec<f64>,
}

/// Best-of-k error and spread per record. The spread of candidate `j` is the
/// expected distance to the ground truth under mode `j`'s renormalized mass.
pub fn topk_metrics(
    candidates: &[Vec<Rotation>],
    modes: &[ModeSet],
    records: &[EvalRecord],
    grid: &EquivolumetricGrid,
    k: usize,
    threshold_deg: f64,
) -> Result<TopK> {
    if candidates.len() != records.len() || modes.len() != records.len() {
        return Err(Error::DimensionMismatch {
            expected: records.len(),
            got: candidates.len().min(modes.len()),
        });
    }
    let mut errors_deg = Vec::with_capacity(records.len());
    let mut spreads = Vec::with_capacity(records.len());
    for ((cands, ms), rec) in candidates.iter().zip(modes).zip(records) {
        let gts = rec.gt_set();
        let err = cands
            .iter()
            .take(k)
            .map(|c| min_distance(c, gts))
            .fold(f64::INFINITY, f64::min);
        errors_deg.push(err.to_degrees());
        let s = ms
            .modes
            .iter()
            .take(k)
            .map(|m| {
                m.normalized_masses(&rec.distribution)
                    .iter()
                    .map(|&(cell, w)| w * min_distance(&grid.rotations()[cell], gts))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        spreads.push(s.to_degrees());
    }
    Ok(TopK {
        k,
        threshold_deg,
        topk_acc: accuracy(&errors_deg, threshold_deg),
        topk_error_median_deg: median(&errors_deg),
        topk_spread_deg: mean(&spreads),
        errors_deg,
    })
}

/// Everything a report needs from one record, so its distribution can be
/// dropped as soon as it is scored. Angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordMetrics {
    pub log_likelihood: f64,
    pub floored: bool,
    /// `None` without the full ground truth.
    pub spread: Option<f64>,
    pub error: f64,
    /// Best-of-k error and spread for `k = 1..=k_max`.
    pub topk_error: Vec<f64>,
    pub topk_spread: Vec<f64>,
}

/// Scores one record. Top-k candidates are the mode centers in rank order.
pub fn record_metrics(
    record: &EvalRecord,
    grid: &EquivolumetricGrid,
    prediction: &Rotation,
    modes: &ModeSet,
    k_max: usize,
) -> RecordMetrics {
    let ll = average_log_likelihood(std::slice::from_ref(record), grid);
    let gts = record.gt_set();
    let mut topk_error = Vec::with_capacity(k_max);
    let mut topk_spread = Vec::with_capacity(k_max);
    let (mut best_err, mut best_spread) = (f64::INFINITY, f64::INFINITY);
    for k in 0..k_max {
        if let Some(m) = modes.modes.get(k) {
            best_err = best_err.min(min_distance(&m.center, gts));
            let s = m
                .normalized_masses(&record.distribution)
                .iter()
                .map(|&(cell, w)| w * min_distance(&grid.rotations()[cell], gts))
                .sum::<f64>();
            best_spread = best_spread.min(s);
        }
        topk_error.push(best_err);
        topk_spread.push(best_spread);
    }
    RecordMetrics {
        log_likelihood: ll.mean,
        floored: !ll.floored.is_empty(),
        spread: record.gt_full.as_ref().map(|_| record_spread(record, grid)),
        error: min_distance(prediction, gts),
        topk_error,
        topk_spread,
    }
}

/// Aggregates per-record scores into a report. Top-k entries are keyed by k.
pub fn summarize(
    rows: &[RecordMetrics],
    topk_threshold_deg: f64,
    config: BTreeMap<String, String>,
) -> EvalReport {
    let errors_deg: Vec<f64> = rows.iter().map(|r| r.error.to_degrees()).collect();
    let spreads: Option<Vec<f64>> = rows.iter().map(|r| r.spread).collect();
    let k_max = rows.iter().map(|r| r.topk_error.len()).min().unwrap_or(0);
    let topk = (1..=k_max)
        .map(|k| {
            let errs: Vec<f64> = rows.iter().map(|r| r.topk_error[k - 1].to_degrees()).collect();
            let spread: Vec<f64> = rows.iter().map(|r| r.topk_spread[k - 1].to_degrees()).collect();
            let t = TopK {
                k,
                threshold_deg: topk_threshold_deg,
                topk_acc: accuracy(&errs, topk_threshold_deg),
                topk_error_median_deg: median(&errs),
                topk_spread_deg: mean(&spread),
                errors_deg: errs,
            };
            (k.to_string(), t)
        })
        .collect();
    EvalReport {
        avg_log_likelihood: mean(&rows.iter().map(|r| r.log_likelihood).collect::<Vec<_>>()),
        spread_deg: spreads.filter(|s| !s.is_empty()).map(|s| mean(&s).to_degrees()),
        median_error_deg: median(&errors_deg),
        acc15: accuracy(&errors_deg, 15.0),
        acc30: accuracy(&errors_deg, 30.0),
        topk,
        floored_records: rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.floored)
            .map(|(i, _)| i)
            .collect(),
        config,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub avg_log_likelihood: f64,
    pub spread_deg: Option<f64>,
    pub median_error_deg: f64,
    pub acc15: f64,
    pub acc30: f64,
    pub topk: BTreeMap<String, TopK>,
    pub floored_records: Vec<usize>,
    /// Effective settings of the run that produced the report.
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Per-record CSV: index, log-likelihood, error in degrees.
pub fn write_record_csv(
    path: impl AsRef<Path>,
    log_likelihoods: &[f64],
    errors_deg: &[f64],
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "record,log_likelihood,error_deg")?;
    for (i, (ll, e)) in log_likelihoods.iter().zip(errors_deg).enumerate() {
        writeln!(w, "{i},{ll},{e}")?;
    }
    w.flush()?;
    Ok(())
}

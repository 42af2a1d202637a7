//! Sweep outputs: the per-record CSV, the per-configuration JSON summary and
//! the tolerance-band check on mean coverage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentRecord, JobFailure, SweepConfig};
use crate::attack::Epsilon;
use crate::error::{Error, Result};

pub const RECORD_HEADER: &str = "dataset,eps_train,eps_cal,eps_test,seed,coverage,mean_set_size,q_hat,clean_acc,adv_acc";

/// Slack on the band edges so that e.g. a coverage of exactly `0.88` counts
/// as inside `[1 - 0.1 - 0.02, ...]` despite rounding in the edge itself.
const BAND_SLACK: f64 = 1e-12;

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_records_csv(records: &[ExperimentRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if records.is_empty() {
        w.write_record(RECORD_HEADER.split(',')).map_err(|e| csv_error(path, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().collect::<Vec<_>>().join(",") != RECORD_HEADER {
        return Err(Error::Format(format!(
            "{}: expected header {RECORD_HEADER:?}",
            path.display()
        )));
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))
}

pub fn write_failures_csv(failures: &[JobFailure], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if failures.is_empty() {
        w.write_record(["eps_train", "seed", "error"]).map_err(|e| csv_error(path, e))?;
    }
    for f in failures {
        w.serialize(f).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and normal-approximation standard error (`sd / sqrt(n)`, zero for a
/// single value).
fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Seed-averaged results for one `(eps_train, eps_cal, eps_test)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub eps_train: Epsilon,
    pub eps_cal: Epsilon,
    pub eps_test: Epsilon,
    pub n_seeds: usize,
    pub mean_coverage: f64,
    pub se_coverage: f64,
    pub mean_set_size: f64,
    pub se_set_size: f64,
    pub mean_q_hat: f64,
    pub mean_clean_acc: f64,
    pub mean_adv_acc: f64,
}

/// Consecutive records sharing the key given by `key`. Records must already
/// be in grid order.
fn groups<K: PartialEq>(records: &[ExperimentRecord], key: impl Fn(&ExperimentRecord) -> K) -> Vec<&[ExperimentRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || key(&records[i]) != key(&records[start]) {
            out.push(&records[start..i]);
            start = i;
        }
    }
    out
}

fn sorted(records: &[ExperimentRecord]) -> Vec<ExperimentRecord> {
    let mut v = records.to_vec();
    v.sort_by(super::grid_order);
    v
}

pub fn config_summaries(records: &[ExperimentRecord]) -> Vec<ConfigSummary> {
    let records = sorted(records);
    groups(&records, |r| (r.eps_train, r.eps_cal, r.eps_test))
        .into_iter()
        .map(|g| {
            let col = |f: fn(&ExperimentRecord) -> f64| g.iter().map(f).collect::<Vec<_>>();
            let (mean_coverage, se_coverage) = mean_se(&col(|r| r.coverage));
            let (mean_set_size, se_set_size) = mean_se(&col(|r| r.mean_set_size));
            ConfigSummary {
                eps_train: g[0].eps_train,
                eps_cal: g[0].eps_cal,
                eps_test: g[0].eps_test,
                n_seeds: g.len(),
                mean_coverage,
                se_coverage,
                mean_set_size,
                se_set_size,
                mean_q_hat: mean_se(&col(|r| r.q_hat)).0,
                mean_clean_acc: mean_se(&col(|r| r.clean_acc)).0,
                mean_adv_acc: mean_se(&col(|r| r.adv_acc)).0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub eps_test: Epsilon,
    pub mean_coverage: f64,
    pub in_band: bool,
}

/// Span of consecutive in-band test strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRun {
    pub eps_lo: Epsilon,
    pub eps_hi: Epsilon,
    pub length: f64,
    pub points: usize,
}

/// Empirical tolerance band for one `(eps_train, eps_cal)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub eps_train: Epsilon,
    pub eps_cal: Epsilon,
    pub lower: f64,
    pub upper: f64,
    pub points: Vec<BandPoint>,
    /// Whether the in-band test strengths are consecutive on the grid.
    pub contiguous: bool,
    /// The longest in-band run; `None` when no strength is in band.
    pub longest_run: Option<BandRun>,
}

/// Average coverage over seeds at each test strength and mark the strengths
/// whose mean lies in `[1 - alpha - beta, 1 - alpha + beta]`.
pub fn check_band(records: &[ExperimentRecord], alpha: f64, beta: f64) -> Vec<BandReport> {
    let lower = 1.0 - alpha - beta;
    let upper = 1.0 - alpha + beta;
    let summaries = config_summaries(records);
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=summaries.len() {
        let same = |a: &ConfigSummary, b: &ConfigSummary| a.eps_train == b.eps_train && a.eps_cal == b.eps_cal;
        if i < summaries.len() && same(&summaries[i], &summaries[start]) {
            continue;
        }
        let group = &summaries[start..i];
        let points: Vec<BandPoint> = group
            .iter()
            .map(|s| BandPoint {
                eps_test: s.eps_test,
                mean_coverage: s.mean_coverage,
                in_band: s.mean_coverage >= lower - BAND_SLACK && s.mean_coverage <= upper + BAND_SLACK,
            })
            .collect();
        let runs = in_band_runs(&points);
        out.push(BandReport {
            eps_train: group[0].eps_train,
            eps_cal: group[0].eps_cal,
            lower,
            upper,
            contiguous: runs.len() <= 1,
            longest_run: runs.into_iter().max_by_key(|r| r.points),
            points,
        });
        start = i;
    }
    out
}

fn in_band_runs(points: &[BandPoint]) -> Vec<BandRun> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < points.len() {
        if !points[i].in_band {
            i += 1;
            continue;
        }
        let j = (i..points.len()).find(|&j| !points[j].in_band).unwrap_or(points.len());
        let (lo, hi) = (points[i].eps_test, points[j - 1].eps_test);
        runs.push(BandRun {
            eps_lo: lo,
            eps_hi: hi,
            length: hi.value() - lo.value(),
            points: j - i,
        });
        i = j;
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub dataset: String,
    pub alpha: f64,
    pub beta: f64,
    pub n_records: usize,
    pub failures: Vec<JobFailure>,
    pub per_config: Vec<ConfigSummary>,
    pub bands: Vec<BandReport>,
    pub config_echo: SweepConfig,
}

pub fn summarize(cfg: &SweepConfig, records: &[ExperimentRecord], failures: &[JobFailure]) -> SweepSummary {
    SweepSummary {
        dataset: cfg.data.id(),
        alpha: cfg.conformal.alpha,
        beta: cfg.conformal.beta,
        n_records: records.len(),
        failures: failures.to_vec(),
        per_config: config_summaries(records),
        bands: check_band(records, cfg.conformal.alpha, cfg.conformal.beta),
        config_echo: cfg.clone(),
    }
}

pub fn write_summary_json(summary: &SweepSummary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

//! Columnar plot data emitted from persisted runs. Rendering is out of
//! scope; these CSVs feed whatever plotting stack sits downstream.

use super::runner::{RegressionEvalArrays, TaskReport};
use super::{report, HarnessError};
use crate::metrics::{calibration_curve, selective_curve};
use crate::regression::GaussianPrediction;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// `(level, empirical coverage)` along the configured MACE levels.
    CalibrationCurve,
    /// `(kept fraction, rmse)` sweeping the uncertainty threshold.
    SelectiveCurve,
    /// `(index, y, mean, lo, hi)` per test sample.
    IntervalSeries,
    /// `(group, metric, value)` rows from the per-group reports.
    GroupBars,
}

impl PlotKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "calibration-curve" => Some(PlotKind::CalibrationCurve),
            "selective-curve" => Some(PlotKind::SelectiveCurve),
            "interval-series" => Some(PlotKind::IntervalSeries),
            "group-bars" => Some(PlotKind::GroupBars),
            _ => None,
        }
    }

    pub fn file_name(&self) -> &'static str {
        match self {
            PlotKind::CalibrationCurve => "calibration_curve.csv",
            PlotKind::SelectiveCurve => "selective_curve.csv",
            PlotKind::IntervalSeries => "interval_series.csv",
            PlotKind::GroupBars => "group_bars.csv",
        }
    }
}

fn missing(kind: &str, field: &str) -> HarnessError {
    HarnessError::MissingField {
        kind: kind.to_string(),
        field: field.to_string(),
    }
}

fn load_arrays(run_dir: &Path) -> Result<RegressionEvalArrays, HarnessError> {
    let path = run_dir.join("eval.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| missing("plot-data", "eval.json (regression runs only)"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Render one plot-data kind for a persisted run; returns the written
/// CSV path under `<run>/plot_data/`.
pub fn emit_plot_data(run_dir: &Path, kind: PlotKind) -> Result<PathBuf, HarnessError> {
    let record = report::load_run(run_dir)?;
    let csv = match kind {
        PlotKind::CalibrationCurve => {
            let arrays = load_arrays(run_dir)?;
            let std = arrays
                .std
                .ok_or_else(|| missing("calibration-curve", "std"))?;
            let pred = GaussianPrediction {
                mean: arrays.mean,
                std,
            };
            let levels = record.config.mace_levels();
            let mut out = String::from("level,empirical_coverage\n");
            for (level, coverage) in calibration_curve(&pred, &arrays.y, &levels) {
                let _ = writeln!(out, "{level},{coverage}");
            }
            out
        }
        PlotKind::SelectiveCurve => {
            let arrays = load_arrays(run_dir)?;
            let uncertainty = arrays
                .uncertainty
                .ok_or_else(|| missing("selective-curve", "uncertainty"))?;
            let mut out = String::from("kept_fraction,rmse\n");
            for (frac, risk) in selective_curve(&uncertainty, &arrays.mean, &arrays.y) {
                let _ = writeln!(out, "{frac},{risk}");
            }
            out
        }
        PlotKind::IntervalSeries => {
            let arrays = load_arrays(run_dir)?;
            let lo = arrays.lo.ok_or_else(|| missing("interval-series", "lo"))?;
            let hi = arrays.hi.ok_or_else(|| missing("interval-series", "hi"))?;
            let mut out = String::from("index,y,mean,lo,hi\n");
            for i in 0..arrays.y.len() {
                let _ = writeln!(
                    out,
                    "{i},{},{},{},{}",
                    arrays.y[i], arrays.mean[i], lo[i], hi[i]
                );
            }
            out
        }
        PlotKind::GroupBars => {
            let mut out = String::from("group,metric,value\n");
            let mut rows: Vec<(String, &'static str, f64)> = Vec::new();
            match &record.report {
                TaskReport::Regression(report) => {
                    if report.groups.is_empty() {
                        return Err(missing("group-bars", "groups"));
                    }
                    for (group, sub) in &report.groups {
                        rows.push((group.clone(), "rmse", sub.rmse));
                        rows.push((group.clone(), "mae", sub.mae));
                        if let Some(v) = sub.mean_uncertainty {
                            rows.push((group.clone(), "mean_uncertainty", v));
                        }
                        if let Some(v) = sub.nll {
                            rows.push((group.clone(), "nll", v));
                        }
                        if let Some(v) = sub.mace {
                            rows.push((group.clone(), "mace", v));
                        }
                        if let Some(v) = sub.coverage {
                            rows.push((group.clone(), "coverage", v));
                        }
                        if let Some(v) = sub.error_uncert_corr {
                            rows.push((group.clone(), "error_uncert_corr", v));
                        }
                    }
                }
                TaskReport::Classification(report) => {
                    if report.groups.is_empty() {
                        return Err(missing("group-bars", "groups"));
                    }
                    for (group, sub) in &report.groups {
                        rows.push((group.clone(), "accuracy", sub.accuracy));
                        rows.push((group.clone(), "nll", sub.nll));
                        rows.push((group.clone(), "mean_entropy", sub.mean_entropy));
                        if let Some(v) = sub.coverage {
                            rows.push((group.clone(), "coverage", v));
                        }
                    }
                }
            }
            for (group, metric, value) in rows {
                let _ = writeln!(out, "{group},{metric},{value}");
            }
            out
        }
    };
    let plot_dir = run_dir.join("plot_data");
    std::fs::create_dir_all(&plot_dir)?;
    let path = plot_dir.join(kind.file_name());
    std::fs::write(&path, csv)?;
    Ok(path)
}

//! Comparison tables over persisted runs: CSV and aligned text, with the
//! lexicographic ranking column.

use super::runner::{RunRecord, TaskReport};
use super::HarnessError;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One method's row in a benchmark table.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub family: String,
    pub method: String,
    pub rmse: f64,
    pub rmse_delta: Option<f64>,
    pub nll: Option<f64>,
    pub mace: Option<f64>,
    pub coverage: Option<f64>,
    pub corr: Option<f64>,
    /// 1-based rank under the lexicographic rule (RMSE, then delta RMSE
    /// descending, then NLL, then MACE; absent values sort last, ties
    /// keep row order).
    pub rank: usize,
}

/// UQ family grouping used by the table layout.
pub fn method_family(method: &str) -> &'static str {
    match method {
        "deterministic" => "None",
        "mve" | "der" => "Deterministic",
        "qr" | "cqr" => "Quantile",
        "deep_ensemble" => "Ensemble",
        "mc_dropout" | "swag" | "laplace" | "bnn_vi_elbo" => "Bayesian",
        "tta" | "temp_scaling" | "raps" => "Post-hoc",
        _ => "Other",
    }
}

/// Assemble rows in record order and attach ranks.
pub fn table_rows(records: &[RunRecord]) -> Result<Vec<TableRow>, HarnessError> {
    let mut rows = Vec::with_capacity(records.len());
    for record in records {
        let TaskReport::Regression(report) = &record.report else {
            return Err(HarnessError::Config(format!(
                "benchmark tables cover regression runs; {:?} is a classification run",
                record.method
            )));
        };
        let rmse_delta = if record.method == "deterministic" {
            // No uncertainty to threshold on: zero improvement by
            // definition.
            Some(0.0)
        } else {
            report.selective.as_ref().and_then(|s| s.rmse_delta)
        };
        rows.push(TableRow {
            family: method_family(&record.method).to_string(),
            method: record.method.clone(),
            rmse: report.rmse,
            rmse_delta,
            nll: report.nll,
            mace: report.mace,
            coverage: report.coverage,
            corr: report.error_uncert_corr,
            rank: 0,
        });
    }
    assign_ranks(&mut rows);
    Ok(rows)
}

fn assign_ranks(rows: &mut [TableRow]) {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let key = |r: &TableRow| {
        (
            r.rmse,
            r.rmse_delta.map_or(f64::INFINITY, |d| -d),
            r.nll.unwrap_or(f64::INFINITY),
            r.mace.unwrap_or(f64::INFINITY),
        )
    };
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(&rows[a]), key(&rows[b]));
        ka.partial_cmp(&kb).expect("finite metrics").then(a.cmp(&b))
    });
    for (rank, idx) in order.into_iter().enumerate() {
        rows[idx].rank = rank + 1;
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn rows_to_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("uq_group,method,rmse,rmse_delta,nll,mace,coverage,corr,rank\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{},{},{},{},{}",
            r.family,
            r.method,
            r.rmse,
            opt(r.rmse_delta),
            opt(r.nll),
            opt(r.mace),
            opt(r.coverage),
            opt(r.corr),
            r.rank
        );
    }
    out
}

pub fn rows_to_text(rows: &[TableRow]) -> String {
    let header = [
        "UQ group", "Method", "RMSE", "RMSE d", "NLL", "MACE", "Coverage", "Corr", "Rank",
    ];
    let mut cells: Vec<[String; 9]> = Vec::with_capacity(rows.len());
    for r in rows {
        cells.push([
            r.family.clone(),
            r.method.clone(),
            format!("{:.4}", r.rmse),
            fmt_opt(r.rmse_delta),
            fmt_opt(r.nll),
            fmt_opt(r.mace),
            fmt_opt(r.coverage),
            fmt_opt(r.corr),
            r.rank.to_string(),
        ]);
    }
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for (w, h) in widths.iter().zip(header.iter()) {
        let _ = write!(out, "{h:<w$}  ");
    }
    out.push('\n');
    for w in &widths {
        let _ = write!(out, "{}  ", "-".repeat(*w));
    }
    out.push('\n');
    for row in &cells {
        for (w, cell) in widths.iter().zip(row.iter()) {
            let _ = write!(out, "{cell:<w$}  ");
        }
        out.push('\n');
    }
    out
}

/// Load a run record back from its directory.
pub fn load_run(dir: &Path) -> Result<RunRecord, HarnessError> {
    let path = dir.join("run.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        HarnessError::Config(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Collect run directories under `input`: either `input` itself is a run
/// directory, or every immediate subdirectory containing `run.json`
/// (sorted by name for stable output).
pub fn collect_runs(input: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    if input.join("run.json").is_file() {
        return Ok(vec![load_run(input)?]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", input.display())))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join("run.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(HarnessError::Config(format!(
            "no run directories under {}",
            input.display()
        )));
    }
    dirs.iter().map(|d| load_run(d)).collect()
}

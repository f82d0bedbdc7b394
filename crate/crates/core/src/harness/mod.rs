//! Config-driven experiment runner: single runs, method benchmarks over
//! a shared dataset/split, comparison tables, and plot data.
//!
//! Reproducibility contract: every stochastic choice derives from the
//! config seed (per-method roots via `child_seed(seed, "method.<name>")`),
//! so rerunning a config — in any order, under any worker count — yields
//! byte-identical `metrics.json` documents. `UQKIT_THREADS` caps the
//! benchmark worker pool.

mod config;
mod plotdata;
mod report;
mod runner;

pub use config::{
    DatasetConfig, EvalConfig, ExperimentConfig, MethodConfig, ModelConfig, SplitConfig, TaskKind,
    TrainSection, CLASSIFICATION_METHODS, CONFIG_VERSION, REGRESSION_METHODS,
};
pub use plotdata::{emit_plot_data, PlotKind};
pub use report::{
    collect_runs, load_run, method_family, rows_to_csv, rows_to_text, table_rows, TableRow,
};
pub use runner::{
    build_dataset, run, ClassificationReport, RegressionEvalArrays, RunRecord, SelectiveAccuracy,
    TaskReport,
};

use crate::classification::ClassificationError;
use crate::conformal::ConformalError;
use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::nn::NnError;
use crate::regression::RegressionError;
use crate::tensor::TensorError;
use crate::train::TrainError;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{kind} needs the {field} field, which this run did not produce")]
    MissingField { kind: String, field: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Classification(#[from] ClassificationError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Worker cap: `UQKIT_THREADS` when set, otherwise the machine's
/// available parallelism.
pub fn worker_cap() -> usize {
    if let Ok(raw) = std::env::var("UQKIT_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, std::num::NonZeroUsize::get)
}

/// Check that every config in a benchmark shares the dataset, split,
/// eval settings, seed, and task.
fn validate_shared(configs: &[ExperimentConfig]) -> Result<(), HarnessError> {
    let Some(first) = configs.first() else {
        return Err(HarnessError::Config("benchmark needs at least one config".into()));
    };
    for config in &configs[1..] {
        if config.dataset != first.dataset
            || config.split != first.split
            || config.eval != first.eval
            || config.seed != first.seed
            || config.task != first.task
        {
            return Err(HarnessError::Config(format!(
                "benchmark configs must share dataset, split, eval, seed, and task; {:?} diverges",
                config.method.name
            )));
        }
    }
    Ok(())
}

/// Run every config (methods may run concurrently; results are identical
/// regardless of scheduling) and write `benchmark.csv` / `benchmark.txt`
/// into `table_dir`. Row order follows config order.
pub fn benchmark(
    configs: &[ExperimentConfig],
    table_dir: &Path,
) -> Result<Vec<RunRecord>, HarnessError> {
    validate_shared(configs)?;
    for config in configs {
        config.validate()?;
    }

    let workers = worker_cap().min(configs.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunRecord, HarnessError>>>> =
        (0..configs.len()).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let result = run(&configs[i]);
                *slots[i].lock().expect("no poisoned slot") = Some(result);
            });
        }
    });

    let mut records = Vec::with_capacity(configs.len());
    for slot in slots {
        records.push(slot.into_inner().expect("no poisoned slot").expect("worker filled slot")?);
    }

    let rows = table_rows(&records)?;
    std::fs::create_dir_all(table_dir)?;
    std::fs::write(table_dir.join("benchmark.csv"), rows_to_csv(&rows))?;
    std::fs::write(table_dir.join("benchmark.txt"), rows_to_text(&rows))?;
    Ok(records)
}

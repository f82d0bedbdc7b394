//! Synthetic data generators, CSV ingestion, and deterministic splits.
//!
//! Two generators cover the benchmark tasks: a heteroscedastic sine for
//! regression (input-dependent noise, so aleatoric uncertainty is
//! learnable) and two moons for binary classification. Both are pure
//! functions of their parameters and a seed. Real data enters through
//! [`load_csv`]; all datasets flow through [`split`] into
//! train/val/calibration/test parts.

use crate::rng::Rng;
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("generator: {0}")]
    Generator(String),
    #[error("csv {path}: {reason}")]
    Csv { path: String, reason: String },
    #[error("csv {path} line {line}: {reason}")]
    CsvLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("split: {0}")]
    Split(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Regression targets or class labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Vec<f64>),
    Classification { labels: Vec<usize>, n_classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.len(),
            Targets::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_regression(&self) -> Option<&[f64]> {
        match self {
            Targets::Regression(y) => Some(y),
            _ => None,
        }
    }

    pub fn as_classification(&self) -> Option<(&[usize], usize)> {
        match self {
            Targets::Classification { labels, n_classes } => Some((labels, *n_classes)),
            _ => None,
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(y) => Targets::Regression(idx.iter().map(|&i| y[i]).collect()),
            Targets::Classification { labels, n_classes } => Targets::Classification {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        }
    }
}

/// Feature matrix, targets, and optional group labels.
#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub x: Tensor,
    pub y: Targets,
    pub groups: Option<Vec<String>>,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols().unwrap_or(0)
    }

    fn select(&self, idx: &[usize]) -> TabularDataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        TabularDataset {
            x: Tensor::from_vec(vec![idx.len(), d], data).expect("selection preserves shape"),
            y: self.y.select(idx),
            groups: self
                .groups
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i].clone()).collect()),
        }
    }
}

/// Ground truth of the heteroscedastic sine generator, kept around so
/// tests can compare fitted predictive distributions to the source.
#[derive(Debug, Clone, Copy)]
pub struct SineNoise {
    /// Base noise standard deviation (`a` in `a + b|x|`).
    pub a: f64,
    /// Noise growth per unit `|x|`.
    pub b: f64,
}

impl Default for SineNoise {
    fn default() -> Self {
        SineNoise { a: 0.1, b: 0.2 }
    }
}

impl SineNoise {
    pub fn mean(x: f64) -> f64 {
        x * x.sin()
    }

    pub fn std(&self, x: f64) -> f64 {
        self.a + self.b * x.abs()
    }
}

/// `x ~ U[-3, 3]`, `y = x sin(x) + N(0, (a + b|x|)^2)`. Group label is
/// `"low-noise"` when `|x| < 1`, `"high-noise"` otherwise.
pub fn gen_heteroscedastic_sine(
    n: usize,
    seed: u64,
    noise: SineNoise,
) -> Result<TabularDataset, DataError> {
    if n < 10 {
        return Err(DataError::Generator(format!("need n >= 10, got {n}")));
    }
    if noise.a < 0.0 || noise.b < 0.0 {
        return Err(DataError::Generator(format!(
            "noise parameters must be non-negative (a={}, b={})",
            noise.a, noise.b
        )));
    }
    let mut rng = Rng::new(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_in(-3.0, 3.0);
        let y = SineNoise::mean(x) + noise.std(x) * rng.normal();
        xs.push(x);
        ys.push(y);
        groups.push(if x.abs() < 1.0 {
            "low-noise".to_string()
        } else {
            "high-noise".to_string()
        });
    }
    Ok(TabularDataset {
        x: Tensor::from_vec(vec![n, 1], xs).expect("shape matches"),
        y: Targets::Regression(ys),
        groups: Some(groups),
    })
}

/// Two interleaved half circles with Gaussian jitter; balanced classes.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<TabularDataset, DataError> {
    if !n.is_multiple_of(2) {
        return Err(DataError::Generator(format!("need even n, got {n}")));
    }
    if noise_std < 0.0 {
        return Err(DataError::Generator(format!(
            "noise std must be non-negative, got {noise_std}"
        )));
    }
    let half = n / 2;
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..half {
        let t = std::f64::consts::PI * i as f64 / (half - 1).max(1) as f64;
        data.push(t.cos() + noise_std * rng.normal());
        data.push(t.sin() + noise_std * rng.normal());
        labels.push(0);
    }
    for i in 0..half {
        let t = std::f64::consts::PI * i as f64 / (half - 1).max(1) as f64;
        data.push(1.0 - t.cos() + noise_std * rng.normal());
        data.push(0.5 - t.sin() + noise_std * rng.normal());
        labels.push(1);
    }
    Ok(TabularDataset {
        x: Tensor::from_vec(vec![n, 2], data).expect("shape matches"),
        y: Targets::Classification { labels, n_classes: 2 },
        groups: None,
    })
}

/// Noiseless two-moons curve point for class `label` at parameter `t`.
pub fn two_moons_curve(label: usize, t: f64) -> (f64, f64) {
    if label == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

/// Load a CSV file: header row mandatory, numeric feature columns, the
/// named target column, and an optional group-label column. Row order is
/// preserved; parse failures carry 1-based line numbers.
pub fn load_csv(
    path: &Path,
    task: Task,
    target_column: &str,
    group_column: Option<&str>,
) -> Result<TabularDataset, DataError> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Csv {
        path: pstr.clone(),
        reason: e.to_string(),
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Csv {
        path: pstr.clone(),
        reason: "empty file".to_string(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let target_idx = columns
        .iter()
        .position(|c| *c == target_column)
        .ok_or_else(|| DataError::Csv {
            path: pstr.clone(),
            reason: format!("missing target column {target_column:?}"),
        })?;
    let group_idx = match group_column {
        Some(g) => Some(columns.iter().position(|c| *c == g).ok_or_else(|| {
            DataError::Csv {
                path: pstr.clone(),
                reason: format!("missing group column {g:?}"),
            }
        })?),
        None => None,
    };
    let feature_idx: Vec<usize> = (0..columns.len())
        .filter(|i| *i != target_idx && Some(*i) != group_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(DataError::Csv {
            path: pstr.clone(),
            reason: "no feature columns".to_string(),
        });
    }

    let mut xs = Vec::new();
    let mut raw_targets = Vec::new();
    let mut groups = Vec::new();
    let mut n = 0usize;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(DataError::CsvLine {
                path: pstr.clone(),
                line: line_no + 1,
                reason: format!("expected {} cells, got {}", columns.len(), cells.len()),
            });
        }
        for &fi in &feature_idx {
            let v: f64 = cells[fi].parse().map_err(|_| DataError::CsvLine {
                path: pstr.clone(),
                line: line_no + 1,
                reason: format!("non-numeric cell {:?} in column {:?}", cells[fi], columns[fi]),
            })?;
            xs.push(v);
        }
        raw_targets.push((line_no + 1, cells[target_idx].to_string()));
        if let Some(gi) = group_idx {
            groups.push(cells[gi].to_string());
        }
        n += 1;
    }
    if n == 0 {
        return Err(DataError::Csv {
            path: pstr.clone(),
            reason: "no data rows".to_string(),
        });
    }

    let y = match task {
        Task::Regression => {
            let mut ys = Vec::with_capacity(n);
            for (line, cell) in raw_targets {
                ys.push(cell.parse::<f64>().map_err(|_| DataError::CsvLine {
                    path: pstr.clone(),
                    line,
                    reason: format!("non-numeric target {cell:?}"),
                })?);
            }
            Targets::Regression(ys)
        }
        Task::Classification => {
            let mut labels = Vec::with_capacity(n);
            for (line, cell) in raw_targets {
                labels.push(cell.parse::<usize>().map_err(|_| DataError::CsvLine {
                    path: pstr.clone(),
                    line,
                    reason: format!("class label {cell:?} is not a non-negative integer"),
                })?);
            }
            let n_classes = labels.iter().max().copied().unwrap_or(0) + 1;
            Targets::Classification { labels, n_classes }
        }
    };

    Ok(TabularDataset {
        x: Tensor::from_vec(vec![n, feature_idx.len()], xs).expect("shape matches"),
        y,
        groups: if group_idx.is_some() { Some(groups) } else { None },
    })
}

/// Write a dataset as CSV (feature columns `x0..`, `target`, optional `group`).
pub fn write_csv(ds: &TabularDataset, path: &Path) -> Result<(), DataError> {
    let d = ds.dim();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "x{j},");
    }
    out.push_str("target");
    if ds.groups.is_some() {
        out.push_str(",group");
    }
    out.push('\n');
    for i in 0..ds.len() {
        for v in ds.x.row(i) {
            let _ = write!(out, "{v},");
        }
        match &ds.y {
            Targets::Regression(y) => {
                let _ = write!(out, "{}", y[i]);
            }
            Targets::Classification { labels, .. } => {
                let _ = write!(out, "{}", labels[i]);
            }
        }
        if let Some(groups) = &ds.groups {
            let _ = write!(out, ",{}", groups[i]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Split fractions for train/val/calibration/test, plus a shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub calib: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.calib, self.test];
        if parts.iter().any(|f| *f < 0.0) {
            return Err(DataError::Split("fractions must be non-negative".to_string()));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::Split(format!(
                "fractions must sum to 1 (got {total})"
            )));
        }
        Ok(())
    }
}

/// The four parts of a split dataset.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: TabularDataset,
    pub val: TabularDataset,
    pub calib: TabularDataset,
    pub test: TabularDataset,
}

/// Seeded shuffle followed by contiguous slicing. Sizes are floor
/// allocations of each fraction with the remainder going to train, so the
/// parts are always disjoint and exhaustive.
pub fn split(ds: &TabularDataset, spec: &SplitSpec) -> Result<SplitData, DataError> {
    spec.validate()?;
    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(spec.seed);
    rng.shuffle(&mut idx);

    let n_val = (spec.val * n as f64).floor() as usize;
    let n_calib = (spec.calib * n as f64).floor() as usize;
    let n_test = (spec.test * n as f64).floor() as usize;
    let n_train = n - n_val - n_calib - n_test;

    let (train_idx, rest) = idx.split_at(n_train);
    let (val_idx, rest) = rest.split_at(n_val);
    let (calib_idx, test_idx) = rest.split_at(n_calib);

    Ok(SplitData {
        train: ds.select(train_idx),
        val: ds.select(val_idx),
        calib: ds.select(calib_idx),
        test: ds.select(test_idx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_generator_is_deterministic() {
        let a = gen_heteroscedastic_sine(100, 9, SineNoise::default()).unwrap();
        let b = gen_heteroscedastic_sine(100, 9, SineNoise::default()).unwrap();
        assert_eq!(a.x.data(), b.x.data());
        assert_eq!(a.y, b.y);
        assert!(gen_heteroscedastic_sine(5, 9, SineNoise::default()).is_err());
        assert!(gen_heteroscedastic_sine(100, 9, SineNoise { a: -0.1, b: 0.0 }).is_err());
    }

    // With b = 0 the generator is homoscedastic: residuals against the
    // known conditional mean must have std close to `a`.
    #[test]
    fn homoscedastic_residual_std_matches_generator() {
        let noise = SineNoise { a: 0.5, b: 0.0 };
        let ds = gen_heteroscedastic_sine(10_000, 3, noise).unwrap();
        let y = ds.y.as_regression().unwrap();
        let mut sq = 0.0;
        for i in 0..ds.len() {
            let r = y[i] - SineNoise::mean(ds.x.row(i)[0]);
            sq += r * r;
        }
        let std = (sq / ds.len() as f64).sqrt();
        assert!((std - 0.5).abs() / 0.5 < 0.10, "residual std {std}");
    }

    // P(|x| < 1) = 2/6 = 1/3 for x ~ U[-3,3]; allow 3 standard errors.
    #[test]
    fn group_proportions_match_uniform_measure() {
        let ds = gen_heteroscedastic_sine(10_000, 4, SineNoise::default()).unwrap();
        let low = ds
            .groups
            .as_ref()
            .unwrap()
            .iter()
            .filter(|g| g.as_str() == "low-noise")
            .count();
        let p = low as f64 / 10_000.0;
        let se = ((1.0 / 3.0) * (2.0 / 3.0) / 10_000.0_f64).sqrt();
        assert!((p - 1.0 / 3.0).abs() <= 3.0 * se, "low-noise fraction {p}");
    }

    #[test]
    fn two_moons_balanced_and_validated() {
        let ds = gen_two_moons(200, 0.1, 5).unwrap();
        let (labels, c) = ds.y.as_classification().unwrap();
        assert_eq!(c, 2);
        assert_eq!(labels.iter().filter(|l| **l == 0).count(), 100);
        assert_eq!(labels.iter().filter(|l| **l == 1).count(), 100);
        assert!(gen_two_moons(7, 0.1, 5).is_err());
        assert!(gen_two_moons(8, -0.1, 5).is_err());
    }

    // Noise 0: every sample sits exactly on its generating curve, so a
    // nearest-curve classifier is perfect.
    #[test]
    fn noiseless_moons_separable_by_curves() {
        let ds = gen_two_moons(100, 0.0, 6).unwrap();
        let (labels, _) = ds.y.as_classification().unwrap();
        for i in 0..ds.len() {
            let (px, py) = (ds.x.row(i)[0], ds.x.row(i)[1]);
            let dist = |label: usize| {
                (0..=100)
                    .map(|k| {
                        let t = std::f64::consts::PI * k as f64 / 100.0;
                        let (cx, cy) = two_moons_curve(label, t);
                        (px - cx).hypot(py - cy)
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            let predicted = if dist(0) <= dist(1) { 0 } else { 1 };
            assert_eq!(predicted, labels[i]);
        }
    }

    // 1-NN oracle on a held-out half of noisy moons.
    #[test]
    fn noisy_moons_one_nn_accuracy() {
        let ds = gen_two_moons(1000, 0.1, 7).unwrap();
        let spec = SplitSpec { train: 0.5, val: 0.0, calib: 0.0, test: 0.5, seed: 1 };
        let parts = split(&ds, &spec).unwrap();
        let (train_labels, _) = parts.train.y.as_classification().unwrap();
        let (test_labels, _) = parts.test.y.as_classification().unwrap();
        let mut correct = 0;
        for i in 0..parts.test.len() {
            let (px, py) = (parts.test.x.row(i)[0], parts.test.x.row(i)[1]);
            let mut best = (f64::INFINITY, 0);
            for j in 0..parts.train.len() {
                let d = (px - parts.train.x.row(j)[0]).hypot(py - parts.train.x.row(j)[1]);
                if d < best.0 {
                    best = (d, train_labels[j]);
                }
            }
            if best.1 == test_labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / parts.test.len() as f64;
        assert!(acc >= 0.95, "1-NN accuracy {acc}");
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = gen_heteroscedastic_sine(100, 2, SineNoise::default()).unwrap();
        let spec = SplitSpec { train: 0.5, val: 0.2, calib: 0.1, test: 0.2, seed: 3 };
        let parts = split(&ds, &spec).unwrap();
        assert_eq!(parts.train.len(), 50);
        assert_eq!(parts.val.len(), 20);
        assert_eq!(parts.calib.len(), 10);
        assert_eq!(parts.test.len(), 20);

        // Union of split rows equals the original multiset of rows.
        let mut all: Vec<(u64, u64)> = Vec::new();
        for part in [&parts.train, &parts.val, &parts.calib, &parts.test] {
            let y = part.y.as_regression().unwrap();
            for i in 0..part.len() {
                all.push((part.x.row(i)[0].to_bits(), y[i].to_bits()));
            }
        }
        let y = ds.y.as_regression().unwrap();
        let mut orig: Vec<(u64, u64)> = (0..ds.len())
            .map(|i| (ds.x.row(i)[0].to_bits(), y[i].to_bits()))
            .collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);

        // Same seed, same split.
        let again = split(&ds, &spec).unwrap();
        assert_eq!(again.train.x.data(), parts.train.x.data());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let spec = SplitSpec { train: 0.5, val: 0.2, calib: 0.1, test: 0.1, seed: 0 };
        assert!(spec.validate().is_err());
        let neg = SplitSpec { train: 1.2, val: -0.2, calib: 0.0, test: 0.0, seed: 0 };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = gen_heteroscedastic_sine(50, 8, SineNoise::default()).unwrap();
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, Task::Regression, "target", Some("group")).unwrap();
        assert_eq!(back.len(), 50);
        assert_eq!(back.x.data(), ds.x.data());
        assert_eq!(back.y, ds.y);
        assert_eq!(back.groups, ds.groups);

        let missing = load_csv(&path, Task::Regression, "label", None);
        assert!(matches!(missing, Err(DataError::Csv { reason, .. })
            if reason.contains("label")));

        std::fs::write(dir.path().join("bad.csv"), "x0,target\n1.0,oops\n").unwrap();
        let bad = load_csv(&dir.path().join("bad.csv"), Task::Regression, "target", None);
        assert!(matches!(bad, Err(DataError::CsvLine { line: 2, .. })));
    }
}

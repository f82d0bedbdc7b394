//! Evaluation stack: proper scoring, calibration error, coverage,
//! selective prediction, and error-uncertainty correlation.
//!
//! Metrics that are undefined for a method (NLL without a density,
//! correlation of a constant) are reported as absent rather than NaN.

use crate::conformal::IntervalPrediction;
use crate::regression::{mixture_decompose, GaussianPrediction, MixturePrediction};
use crate::special::norm_quantile;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Invalid(String),
}

/// Selective-prediction summary at one validation-quantile threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    #[serde(with = "crate::jsonnum::f64_inf")]
    pub threshold: f64,
    pub kept_fraction: f64,
    /// Absent when every sample was rejected.
    pub rmse_kept: Option<f64>,
    /// `rmse(all) - rmse(kept)`; positive when abstention helps.
    pub rmse_delta: Option<f64>,
}

/// Full regression evaluation record; optional fields are absent when the
/// method does not define them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    /// Mean of the per-sample uncertainty scalar (predictive std by
    /// default); absent for methods without one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_uncertainty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mace: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::jsonnum::opt_f64_inf"
    )]
    pub mean_interval_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selective: Option<SelectiveReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_uncert_corr: Option<f64>,
    /// Per-group sub-reports keyed by group label (empty without labels).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, MetricsReport>,
}

/// Mean absolute error.
pub fn mae(pred_means: &[f64], targets: &[f64]) -> Result<f64, MetricsError> {
    if pred_means.is_empty() || pred_means.len() != targets.len() {
        return Err(MetricsError::Invalid(format!(
            "mae needs matching non-empty inputs ({} predictions, {} targets)",
            pred_means.len(),
            targets.len()
        )));
    }
    let total: f64 = pred_means
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y).abs())
        .sum();
    Ok(total / pred_means.len() as f64)
}

/// Root mean squared error.
pub fn rmse(pred_means: &[f64], targets: &[f64]) -> Result<f64, MetricsError> {
    if pred_means.is_empty() || pred_means.len() != targets.len() {
        return Err(MetricsError::Invalid(format!(
            "rmse needs matching non-empty inputs ({} predictions, {} targets)",
            pred_means.len(),
            targets.len()
        )));
    }
    let ss: f64 = pred_means
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok((ss / pred_means.len() as f64).sqrt())
}

/// Mean Gaussian negative log-likelihood
/// `0.5 ln(2 pi sigma^2) + (y - mu)^2 / (2 sigma^2)`.
pub fn nll_gaussian(pred: &GaussianPrediction, targets: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != targets.len() || targets.is_empty() {
        return Err(MetricsError::Invalid(format!(
            "nll needs matching non-empty inputs ({} predictions, {} targets)",
            pred.len(),
            targets.len()
        )));
    }
    if pred.std.iter().any(|s| *s <= 0.0) {
        return Err(MetricsError::Invalid("nll needs strictly positive std".into()));
    }
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let total: f64 = pred
        .mean
        .iter()
        .zip(&pred.std)
        .zip(targets)
        .map(|((m, s), y)| half_ln_2pi + s.ln() + (y - m) * (y - m) / (2.0 * s * s))
        .sum();
    Ok(total / targets.len() as f64)
}

/// The 19 evenly spaced calibration levels 0.05, 0.10, ..., 0.95.
pub fn default_mace_levels() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Mean absolute calibration error over centered Gaussian intervals:
/// for each level `p` the interval is `mu ± z_{(1+p)/2} sigma`, and MACE
/// averages `|empirical coverage - p|`.
pub fn mace(pred: &GaussianPrediction, targets: &[f64], levels: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != targets.len() || targets.is_empty() {
        return Err(MetricsError::Invalid(format!(
            "mace needs matching non-empty inputs ({} predictions, {} targets)",
            pred.len(),
            targets.len()
        )));
    }
    if levels.is_empty() || levels.iter().any(|p| !(0.0 < *p && *p < 1.0)) {
        return Err(MetricsError::Invalid("mace levels must lie in (0, 1)".into()));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    for &p in levels {
        let z = norm_quantile((1.0 + p) / 2.0);
        let covered = pred
            .mean
            .iter()
            .zip(&pred.std)
            .zip(targets)
            .filter(|((m, s), y)| (*y - *m).abs() <= z * **s)
            .count() as f64;
        total += (covered / n - p).abs();
    }
    Ok(total / levels.len() as f64)
}

/// Points of the calibration curve: `(level, empirical coverage)`.
pub fn calibration_curve(
    pred: &GaussianPrediction,
    targets: &[f64],
    levels: &[f64],
) -> Vec<(f64, f64)> {
    let n = targets.len() as f64;
    levels
        .iter()
        .map(|&p| {
            let z = norm_quantile((1.0 + p) / 2.0);
            let covered = pred
                .mean
                .iter()
                .zip(&pred.std)
                .zip(targets)
                .filter(|((m, s), y)| (*y - *m).abs() <= z * **s)
                .count() as f64;
            (p, covered / n)
        })
        .collect()
}

/// Fraction of targets inside their closed interval, and the mean width
/// (infinite when any interval is unbounded).
pub fn coverage_width(intervals: &IntervalPrediction, targets: &[f64]) -> (f64, f64) {
    let n = targets.len() as f64;
    let covered = intervals
        .lo
        .iter()
        .zip(&intervals.hi)
        .zip(targets)
        .filter(|((lo, hi), y)| **lo <= **y && **y <= **hi)
        .count() as f64;
    let width = intervals.widths().iter().sum::<f64>() / n;
    (covered / n, width)
}

/// Type-1 (inverse ECDF) quantile: the `ceil(q n)`-th smallest value.
pub fn type1_quantile(values: &[f64], q: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Invalid("quantile of an empty sample".into()));
    }
    if !(0.0 < q && q < 1.0) {
        return Err(MetricsError::Invalid(format!(
            "quantile level {q} must lie in (0, 1)"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let k = ((q * n as f64) * (1.0 - 1e-12)).ceil() as usize;
    Ok(sorted[k.clamp(1, n) - 1])
}

#[derive(Debug, Clone)]
pub struct SelectiveConfig {
    /// Validation-set uncertainties that fix the threshold.
    pub val_uncertainties: Vec<f64>,
    /// Quantile of the validation uncertainties used as threshold.
    pub quantile_level: f64,
}

impl SelectiveConfig {
    pub fn new(val_uncertainties: Vec<f64>, quantile_level: f64) -> Self {
        SelectiveConfig {
            val_uncertainties,
            quantile_level,
        }
    }
}

/// Omit test samples whose uncertainty exceeds the validation-quantile
/// threshold and compare RMSE before and after.
pub fn selective_prediction(
    uncertainties: &[f64],
    pred_means: &[f64],
    targets: &[f64],
    config: &SelectiveConfig,
) -> Result<SelectiveReport, MetricsError> {
    if uncertainties.len() != pred_means.len() || pred_means.len() != targets.len() {
        return Err(MetricsError::Invalid("selective prediction needs aligned inputs".into()));
    }
    let threshold = type1_quantile(&config.val_uncertainties, config.quantile_level)?;
    let kept: Vec<usize> = (0..targets.len())
        .filter(|i| uncertainties[*i] <= threshold)
        .collect();
    let kept_fraction = kept.len() as f64 / targets.len() as f64;
    if kept.is_empty() {
        return Ok(SelectiveReport {
            threshold,
            kept_fraction: 0.0,
            rmse_kept: None,
            rmse_delta: None,
        });
    }
    let all = rmse(pred_means, targets)?;
    let kept_means: Vec<f64> = kept.iter().map(|&i| pred_means[i]).collect();
    let kept_targets: Vec<f64> = kept.iter().map(|&i| targets[i]).collect();
    let kept_rmse = rmse(&kept_means, &kept_targets)?;
    Ok(SelectiveReport {
        threshold,
        kept_fraction,
        rmse_kept: Some(kept_rmse),
        rmse_delta: Some(all - kept_rmse),
    })
}

/// Risk-coverage sweep: `(kept fraction, rmse of kept)` for every
/// distinct uncertainty threshold, ending at full coverage.
pub fn selective_curve(
    uncertainties: &[f64],
    pred_means: &[f64],
    targets: &[f64],
) -> Vec<(f64, f64)> {
    let n = targets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        uncertainties[a]
            .partial_cmp(&uncertainties[b])
            .expect("finite uncertainties")
    });
    let mut curve = Vec::new();
    let mut ss = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        let e = pred_means[i] - targets[i];
        ss += e * e;
        let next_differs = rank + 1 == n
            || uncertainties[order[rank + 1]] > uncertainties[i];
        if next_differs {
            let kept = rank + 1;
            curve.push((kept as f64 / n as f64, (ss / kept as f64).sqrt()));
        }
    }
    curve
}

/// Pearson correlation between uncertainty and absolute error; absent for
/// constant inputs or fewer than two samples.
pub fn error_uncert_correlation(uncertainties: &[f64], abs_errors: &[f64]) -> Option<f64> {
    let n = uncertainties.len();
    if n < 2 || n != abs_errors.len() {
        return None;
    }
    let mean_u: f64 = uncertainties.iter().sum::<f64>() / n as f64;
    let mean_e: f64 = abs_errors.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut var_u = 0.0;
    let mut var_e = 0.0;
    for i in 0..n {
        let du = uncertainties[i] - mean_u;
        let de = abs_errors[i] - mean_e;
        cov += du * de;
        var_u += du * du;
        var_e += de * de;
    }
    if var_u == 0.0 || var_e == 0.0 {
        return None;
    }
    Some(cov / (var_u.sqrt() * var_e.sqrt()))
}

/// Per-sample aleatoric/epistemic variance split of a mixture; requires
/// at least two members. The two parts sum exactly to the
/// `mixture_moments` total variance.
pub fn variance_decomposition(
    mix: &MixturePrediction,
) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if mix.members() < 2 {
        return Err(MetricsError::Invalid(format!(
            "variance decomposition needs at least 2 members, got {}",
            mix.members()
        )));
    }
    mixture_decompose(mix).map_err(|e| MetricsError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn rmse_basics() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // Errors [0,0,0,0,10]: sqrt(100/5) = sqrt(20).
        let r = rmse(&[0.0, 0.0, 0.0, 0.0, 10.0], &[0.0; 5]).unwrap();
        assert!((r - 20.0_f64.sqrt()).abs() < 1e-12);
        // Permutation invariance.
        let a = rmse(&[1.0, 3.0, -2.0], &[0.0, 1.0, 0.5]).unwrap();
        let b = rmse(&[3.0, -2.0, 1.0], &[1.0, 0.5, 0.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn nll_closed_form_points() {
        let pred = GaussianPrediction { mean: vec![0.0], std: vec![1.0] };
        let v = nll_gaussian(&pred, &[0.0]).unwrap();
        assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);

        // Doubling sigma at zero residual adds ln 2.
        let wide = GaussianPrediction { mean: vec![0.0], std: vec![2.0] };
        let w = nll_gaussian(&wide, &[0.0]).unwrap();
        assert!((w - v - 2.0_f64.ln()).abs() < 1e-12);

        let bad = GaussianPrediction { mean: vec![0.0], std: vec![0.0] };
        assert!(nll_gaussian(&bad, &[0.0]).is_err());
    }

    // Proper-scoring sanity: the generative parameters score best.
    #[test]
    fn nll_prefers_true_parameters() {
        let mut rng = Rng::new(7);
        let n = 100_000;
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let truth = GaussianPrediction { mean: vec![0.0; n], std: vec![1.0; n] };
        let wide = GaussianPrediction { mean: vec![0.0; n], std: vec![2.0; n] };
        let shifted = GaussianPrediction { mean: vec![0.5; n], std: vec![1.0; n] };
        let nll_truth = nll_gaussian(&truth, &y).unwrap();
        assert!(nll_truth <= nll_gaussian(&wide, &y).unwrap());
        assert!(nll_truth <= nll_gaussian(&shifted, &y).unwrap());
    }

    #[test]
    fn mace_perfectly_calibrated_and_degenerate() {
        let mut rng = Rng::new(8);
        let n = 100_000;
        let mut pred = GaussianPrediction {
            mean: Vec::with_capacity(n),
            std: Vec::with_capacity(n),
        };
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let m = rng.normal() * 2.0;
            let s = 0.3 + rng.uniform() * 1.5;
            pred.mean.push(m);
            pred.std.push(s);
            y.push(m + s * rng.normal());
        }
        let levels = default_mace_levels();
        assert_eq!(levels.len(), 19);
        let v = mace(&pred, &y, &levels).unwrap();
        assert!(v <= 0.01, "perfectly calibrated mace {v}");
        // The whole calibration curve hugs the diagonal, not just the
        // mean deviation.
        for (level, coverage) in calibration_curve(&pred, &y, &levels) {
            assert!(
                (coverage - level).abs() <= 0.01,
                "curve point ({level}, {coverage}) off the diagonal"
            );
        }

        // Tiny sigma with exact means: coverage 1 everywhere, MACE
        // = 1 - mean(levels) = 0.5.
        let exact = GaussianPrediction { mean: vec![1.0; 4], std: vec![1e-300; 4] };
        let v = mace(&exact, &[1.0; 4], &levels).unwrap();
        assert!((v - 0.5).abs() < 1e-12);

        // Tiny sigma, means all wrong: coverage 0, MACE = mean(levels) = 0.5.
        let wrong = GaussianPrediction { mean: vec![0.0; 4], std: vec![1e-300; 4] };
        let v = mace(&wrong, &[1.0; 4], &levels).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn coverage_closed_intervals_and_infinite_width() {
        let intervals = IntervalPrediction {
            lo: vec![0.0, 0.0, f64::NEG_INFINITY],
            hi: vec![2.0, 1.0, f64::INFINITY],
        };
        // Boundary y == hi counts as covered.
        let (cov, width) = coverage_width(&intervals, &[1.0, 1.0, 123.0]);
        assert_eq!(cov, 1.0);
        assert!(width.is_infinite());
        assert!(intervals.has_infinite());

        let finite = IntervalPrediction { lo: vec![0.0, 0.0], hi: vec![2.0, 1.0] };
        let (cov, width) = coverage_width(&finite, &[3.0, 0.5]);
        assert_eq!(cov, 0.5);
        assert!((width - 1.5).abs() < 1e-12);
    }

    #[test]
    fn coverage_monotone_under_widening() {
        let mut rng = Rng::new(9);
        let n = 200;
        let lo: Vec<f64> = (0..n).map(|_| rng.normal() - 0.5).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.uniform()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let narrow = IntervalPrediction { lo: lo.clone(), hi: hi.clone() };
        let wide = IntervalPrediction {
            lo: lo.iter().map(|l| l - 0.3).collect(),
            hi: hi.iter().map(|h| h + 0.3).collect(),
        };
        let (c_narrow, _) = coverage_width(&narrow, &y);
        let (c_wide, _) = coverage_width(&wide, &y);
        assert!(c_wide >= c_narrow);
    }

    #[test]
    fn selective_prediction_examples() {
        // Threshold 5 keeps 4 of 5; delta = sqrt(20) - 0.
        let cfg = SelectiveConfig::new(vec![1.0, 1.0, 1.0, 1.0, 9.0], 0.8);
        let report = selective_prediction(
            &[1.0, 1.0, 1.0, 1.0, 9.0],
            &[0.0, 0.0, 0.0, 0.0, 10.0],
            &[0.0; 5],
            &cfg,
        )
        .unwrap();
        assert!((report.kept_fraction - 0.8).abs() < 1e-12);
        assert_eq!(report.rmse_kept, Some(0.0));
        assert!((report.rmse_delta.unwrap() - 20.0_f64.sqrt()).abs() < 1e-12);

        // Constant uncertainties: threshold equals the constant, all kept.
        let cfg = SelectiveConfig::new(vec![2.0; 10], 0.8);
        let report = selective_prediction(&[2.0; 4], &[1.0; 4], &[1.0; 4], &cfg).unwrap();
        assert_eq!(report.threshold, 2.0);
        assert_eq!(report.kept_fraction, 1.0);
        assert_eq!(report.rmse_delta, Some(0.0));

        // Everything rejected.
        let cfg = SelectiveConfig::new(vec![0.1; 10], 0.8);
        let report =
            selective_prediction(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(report.kept_fraction, 0.0);
        assert_eq!(report.rmse_kept, None);
        assert_eq!(report.rmse_delta, None);
    }

    // Permutation-null oracle: uncertainty independent of error means the
    // expected delta is zero.
    #[test]
    fn selective_prediction_null_distribution() {
        let mut deltas = Vec::new();
        for seed in 0..100 {
            let mut rng = Rng::new(seed);
            let n = 400;
            let uncert: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let val_uncert: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let pred: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let y = vec![0.0; n];
            let cfg = SelectiveConfig::new(val_uncert, 0.8);
            let report = selective_prediction(&uncert, &pred, &y, &cfg).unwrap();
            deltas.push(report.rmse_delta.unwrap());
        }
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (deltas.len() - 1) as f64;
        let se = (var / deltas.len() as f64).sqrt();
        assert!(
            mean.abs() <= 2.0 * se,
            "null delta mean {mean} exceeds 2 se {se}"
        );
    }

    #[test]
    fn selective_quantile_level_near_one_keeps_everything() {
        let mut rng = Rng::new(11);
        let uncert: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        let pred: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let y = vec![0.0; 100];
        let cfg = SelectiveConfig::new(uncert.clone(), 0.999);
        let report = selective_prediction(&uncert, &pred, &y, &cfg).unwrap();
        assert_eq!(report.kept_fraction, 1.0);
        assert_eq!(report.rmse_delta, Some(0.0));
    }

    #[test]
    fn correlation_reference_cases() {
        let e = [0.1, 0.5, 0.9, 0.2];
        assert!((error_uncert_correlation(&e, &e).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = e.iter().map(|v| 1.0 - v).collect();
        assert!((error_uncert_correlation(&neg, &e).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(error_uncert_correlation(&[1.0, 1.0], &[0.1, 0.9]), None);
        assert_eq!(error_uncert_correlation(&[1.0], &[0.1]), None);

        // Independent pairs have near-zero correlation.
        let mut rng = Rng::new(12);
        let n = 10_000;
        let u: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        assert!(error_uncert_correlation(&u, &v).unwrap().abs() <= 0.05);
    }

    #[test]
    fn selective_curve_endpoint_is_full_rmse() {
        let mut rng = Rng::new(13);
        let n = 50;
        let uncert: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let curve = selective_curve(&uncert, &pred, &y);
        let (frac, risk) = *curve.last().unwrap();
        assert_eq!(frac, 1.0);
        assert!((risk - rmse(&pred, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn type1_quantile_is_order_statistic() {
        let xs = [5.0, 1.0, 3.0, 2.0, 4.0];
        // ceil(0.8 * 5) = 4th smallest.
        assert_eq!(type1_quantile(&xs, 0.8).unwrap(), 4.0);
        assert_eq!(type1_quantile(&xs, 0.5).unwrap(), 3.0);
        assert_eq!(type1_quantile(&xs, 0.01).unwrap(), 1.0);
        assert!(type1_quantile(&[], 0.5).is_err());
    }

    #[test]
    fn variance_decomposition_requires_two_members() {
        let single = MixturePrediction {
            member_means: vec![vec![0.0]],
            member_stds: vec![vec![1.0]],
        };
        assert!(variance_decomposition(&single).is_err());
        let pair = MixturePrediction {
            member_means: vec![vec![0.0], vec![2.0]],
            member_stds: vec![vec![1.0], vec![1.0]],
        };
        let (a, e) = variance_decomposition(&pair).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(e, vec![1.0]);
    }
}

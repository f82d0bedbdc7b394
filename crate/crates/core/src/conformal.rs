//! Split-conformal calibration: finite-sample corrected score quantiles
//! turning heuristic predictors into interval/set predictors with
//! marginal coverage guarantees under exchangeability.
//!
//! The shared core is the corrected quantile `qhat`: the k-th smallest of
//! the calibration scores with `k = ceil((n+1)(1-alpha))`, and `+inf`
//! when `k > n` (the infinite-width fallback, propagated explicitly).
//! Three procedures build on it: conformalized quantile regression,
//! residual intervals around Gaussian predictions, and regularized
//! adaptive prediction sets for classification.

use crate::classification::CategoricalPrediction;
use crate::regression::{GaussianPrediction, QuantilePrediction};
use crate::rng::{child_seed, Rng};
use crate::special::norm_quantile;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("miscoverage alpha {0} must lie in (0, 1)")]
    InvalidAlpha(f64),
    #[error("quantile levels {got:?} do not match (alpha/2, 1-alpha/2) = ({expected_lo}, {expected_hi})")]
    LevelMismatch {
        expected_lo: f64,
        expected_hi: f64,
        got: Vec<f64>,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Held-out nonconformity scores with their corrected quantile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub scores: Vec<f64>,
    pub alpha: f64,
    /// `+inf` when the calibration set is too small for the requested
    /// coverage.
    #[serde(with = "crate::jsonnum::f64_inf")]
    pub qhat: f64,
}

impl ConformalCalibration {
    pub fn from_scores(scores: Vec<f64>, alpha: f64) -> Result<Self, ConformalError> {
        if !(0.0 < alpha && alpha < 1.0) {
            return Err(ConformalError::InvalidAlpha(alpha));
        }
        if scores.is_empty() {
            return Err(ConformalError::Invalid("calibration set is empty".into()));
        }
        let qhat = corrected_quantile(&scores, alpha);
        Ok(ConformalCalibration {
            scores,
            alpha,
            qhat,
        })
    }

    pub fn n_cal(&self) -> usize {
        self.scores.len()
    }
}

/// `k = ceil((n+1)(1-alpha))`-th smallest score (duplicates retained),
/// or `+inf` when `k > n`. The ceiling is taken after shaving one part
/// in 1e9 off the product so binary-rounding noise on an exactly-integer
/// target (for example `(9+1)(1-0.1)`) cannot push the index up a slot.
pub fn corrected_quantile(scores: &[f64], alpha: f64) -> f64 {
    let n = scores.len();
    let target = (n as f64 + 1.0) * (1.0 - alpha);
    let k = (target * (1.0 - 1e-9)).ceil() as usize;
    if k > n {
        return f64::INFINITY;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    sorted[k - 1]
}

/// Per-sample closed intervals; either bound may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalPrediction {
    #[serde(with = "crate::jsonnum::vec_f64_inf")]
    pub lo: Vec<f64>,
    #[serde(with = "crate::jsonnum::vec_f64_inf")]
    pub hi: Vec<f64>,
}

impl IntervalPrediction {
    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    /// Any infinite-width interval present (the infinite-qhat fallback).
    pub fn has_infinite(&self) -> bool {
        self.lo.iter().any(|v| v.is_infinite()) || self.hi.iter().any(|v| v.is_infinite())
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }
}

/// Central `1 - alpha` interval of a Gaussian prediction.
pub fn gaussian_central_interval(
    pred: &GaussianPrediction,
    alpha: f64,
) -> Result<IntervalPrediction, ConformalError> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    let z = norm_quantile(1.0 - alpha / 2.0);
    Ok(IntervalPrediction {
        lo: pred
            .mean
            .iter()
            .zip(&pred.std)
            .map(|(m, s)| m - z * s)
            .collect(),
        hi: pred
            .mean
            .iter()
            .zip(&pred.std)
            .map(|(m, s)| m + z * s)
            .collect(),
    })
}

// ---------------------------------------------------------------------
// Conformalized quantile regression
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CqrCalibration {
    pub calibration: ConformalCalibration,
    pub levels: (f64, f64),
}

const LEVEL_TOL: f64 = 1e-9;

fn check_cqr_levels(levels: &[f64], alpha: f64) -> Result<(), ConformalError> {
    let (lo, hi) = (alpha / 2.0, 1.0 - alpha / 2.0);
    if levels.len() != 2 || (levels[0] - lo).abs() > LEVEL_TOL || (levels[1] - hi).abs() > LEVEL_TOL
    {
        return Err(ConformalError::LevelMismatch {
            expected_lo: lo,
            expected_hi: hi,
            got: levels.to_vec(),
        });
    }
    Ok(())
}

/// Score `s_i = max(q_lo(x_i) - y_i, y_i - q_hi(x_i))`: negative inside
/// the raw interval, positive outside.
pub fn cqr_calibrate(
    qpred: &QuantilePrediction,
    y: &[f64],
    alpha: f64,
) -> Result<CqrCalibration, ConformalError> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    check_cqr_levels(&qpred.levels, alpha)?;
    if qpred.len() != y.len() || y.is_empty() {
        return Err(ConformalError::Invalid(format!(
            "{} predictions for {} calibration targets",
            qpred.len(),
            y.len()
        )));
    }
    let scores = qpred
        .values
        .iter()
        .zip(y)
        .map(|(row, yi)| (row[0] - yi).max(yi - row[1]))
        .collect();
    Ok(CqrCalibration {
        calibration: ConformalCalibration::from_scores(scores, alpha)?,
        levels: (qpred.levels[0], qpred.levels[1]),
    })
}

/// Widen the raw quantile interval by `qhat` on both sides.
pub fn cqr_predict(
    qpred: &QuantilePrediction,
    calib: &CqrCalibration,
) -> Result<IntervalPrediction, ConformalError> {
    check_cqr_levels(&qpred.levels, calib.calibration.alpha)?;
    if (qpred.levels[0] - calib.levels.0).abs() > LEVEL_TOL
        || (qpred.levels[1] - calib.levels.1).abs() > LEVEL_TOL
    {
        return Err(ConformalError::Invalid(format!(
            "prediction levels {:?} differ from calibration levels {:?}",
            qpred.levels, calib.levels
        )));
    }
    let qhat = calib.calibration.qhat;
    Ok(IntervalPrediction {
        lo: qpred.values.iter().map(|row| row[0] - qhat).collect(),
        hi: qpred.values.iter().map(|row| row[1] + qhat).collect(),
    })
}

// ---------------------------------------------------------------------
// Residual conformal around Gaussian predictions
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualCalibration {
    pub calibration: ConformalCalibration,
    pub normalized: bool,
}

/// Score `|y - mu|`, or `|y - mu| / sigma` in normalized mode.
pub fn residual_calibrate(
    pred: &GaussianPrediction,
    y: &[f64],
    alpha: f64,
    normalized: bool,
) -> Result<ResidualCalibration, ConformalError> {
    if pred.len() != y.len() || y.is_empty() {
        return Err(ConformalError::Invalid(format!(
            "{} predictions for {} calibration targets",
            pred.len(),
            y.len()
        )));
    }
    if normalized && pred.std.iter().any(|s| *s <= 0.0) {
        return Err(ConformalError::Invalid(
            "normalized residual scores need strictly positive std".into(),
        ));
    }
    let scores = pred
        .mean
        .iter()
        .zip(&pred.std)
        .zip(y)
        .map(|((m, s), yi)| {
            let r = (yi - m).abs();
            if normalized {
                r / s
            } else {
                r
            }
        })
        .collect();
    Ok(ResidualCalibration {
        calibration: ConformalCalibration::from_scores(scores, alpha)?,
        normalized,
    })
}

/// Intervals `mu ± qhat` (or `mu ± qhat sigma` in normalized mode).
pub fn residual_predict(
    pred: &GaussianPrediction,
    calib: &ResidualCalibration,
) -> IntervalPrediction {
    let qhat = calib.calibration.qhat;
    let half: Vec<f64> = if calib.normalized {
        pred.std.iter().map(|s| qhat * s).collect()
    } else {
        vec![qhat; pred.len()]
    };
    IntervalPrediction {
        lo: pred.mean.iter().zip(&half).map(|(m, h)| m - h).collect(),
        hi: pred.mean.iter().zip(&half).map(|(m, h)| m + h).collect(),
    }
}

// ---------------------------------------------------------------------
// Regularized adaptive prediction sets
// ---------------------------------------------------------------------

/// RAPS hyperparameters: penalty `lambda` on ranks beyond `k_reg`, with
/// optional randomization of the boundary class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RapsConfig {
    pub k_reg: usize,
    pub lambda: f64,
    pub randomized: bool,
}

impl Default for RapsConfig {
    fn default() -> Self {
        RapsConfig {
            k_reg: 1,
            lambda: 0.01,
            randomized: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RapsCalibration {
    pub calibration: ConformalCalibration,
    pub config: RapsConfig,
    /// Seed backing the randomized variant (calibration consumed the
    /// `"raps-cal"` stream; prediction derives `"raps-predict"`).
    pub seed: u64,
}

/// Per-sample boolean class membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub membership: Vec<Vec<bool>>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    pub fn set_sizes(&self) -> Vec<usize> {
        self.membership
            .iter()
            .map(|row| row.iter().filter(|b| **b).count())
            .collect()
    }

    /// Fraction of samples whose true label lies in the set.
    pub fn coverage(&self, labels: &[usize]) -> f64 {
        let covered = self
            .membership
            .iter()
            .zip(labels)
            .filter(|(row, l)| row[**l])
            .count();
        covered as f64 / labels.len() as f64
    }
}

/// Classes of one row ordered by descending probability (ties broken by
/// class index for determinism).
fn descending_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    order
}

/// Score of the true class: cumulative mass of all classes ranked at or
/// above it, minus `u * p_true` when randomized, plus
/// `lambda * max(0, rank - k_reg)`.
pub fn raps_calibrate(
    probs: &CategoricalPrediction,
    labels: &[usize],
    alpha: f64,
    config: RapsConfig,
    seed: u64,
) -> Result<RapsCalibration, ConformalError> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    if config.lambda < 0.0 {
        return Err(ConformalError::Invalid(format!(
            "lambda must be non-negative, got {}",
            config.lambda
        )));
    }
    if probs.len() != labels.len() || labels.is_empty() {
        return Err(ConformalError::Invalid(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let c = probs.n_classes();
    let mut rng = Rng::new(child_seed(seed, "raps-cal"));
    let mut scores = Vec::with_capacity(labels.len());
    for (row, &label) in probs.probs.iter().zip(labels) {
        if label >= c {
            return Err(ConformalError::Invalid(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let order = descending_order(row);
        let mut cum = 0.0;
        let mut rank = 0;
        for (pos, &class) in order.iter().enumerate() {
            cum += row[class];
            if class == label {
                rank = pos + 1;
                break;
            }
        }
        let mut score = cum;
        if config.randomized {
            score -= rng.uniform() * row[label];
        }
        score += config.lambda * (rank.saturating_sub(config.k_reg)) as f64;
        scores.push(score);
    }
    Ok(RapsCalibration {
        calibration: ConformalCalibration::from_scores(scores, alpha)?,
        config,
        seed,
    })
}

/// Include classes in descending-probability order while the running
/// score stays at or below `qhat`.
pub fn raps_predict(probs: &CategoricalPrediction, calib: &RapsCalibration) -> PredictionSet {
    let c = probs.n_classes();
    let qhat = calib.calibration.qhat;
    let config = calib.config;
    let mut rng = Rng::new(child_seed(calib.seed, "raps-predict"));
    let membership = probs
        .probs
        .iter()
        .map(|row| {
            let order = descending_order(row);
            let mut included = vec![false; c];
            let mut cum = 0.0;
            for (pos, &class) in order.iter().enumerate() {
                cum += row[class];
                let mut score = cum;
                if config.randomized {
                    score -= rng.uniform() * row[class];
                }
                score += config.lambda * ((pos + 1).saturating_sub(config.k_reg)) as f64;
                if score <= qhat {
                    included[class] = true;
                } else {
                    break;
                }
            }
            included
        })
        .collect();
    PredictionSet { membership }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::child_seed_indexed;

    // Integer-exact oracle for the corrected index: alpha = p/q rational.
    fn qhat_oracle(scores: &[f64], p: u64, q: u64) -> f64 {
        let n = scores.len() as u64;
        // k = ceil((n+1) (q-p) / q) in integer arithmetic.
        let k = ((n + 1) * (q - p)).div_ceil(q);
        if k > n {
            return f64::INFINITY;
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[(k - 1) as usize]
    }

    #[test]
    fn corrected_quantile_matches_integer_oracle() {
        let mut rng = Rng::new(1);
        for n in 1..=50 {
            let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            for (alpha, p, q) in [(0.05, 5, 100), (0.1, 1, 10), (0.2, 2, 10), (0.5, 5, 10)] {
                let got = corrected_quantile(&scores, alpha);
                let want = qhat_oracle(&scores, p, q);
                assert_eq!(got.to_bits(), want.to_bits(), "n={n}, alpha={alpha}");
            }
        }
    }

    #[test]
    fn index_arithmetic_examples() {
        // n = 9, alpha = 0.1: k = ceil(10 * 0.9) = 9, the largest score.
        let scores: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(corrected_quantile(&scores, 0.1), 9.0);
        // scores {1,2,3}, alpha = 0.5: k = ceil(4 * 0.5) = 2.
        assert_eq!(corrected_quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
        // Tiny calibration set: k > n falls back to infinity.
        assert_eq!(corrected_quantile(&[1.0], 0.1), f64::INFINITY);
    }

    fn two_level_pred(rows: Vec<[f64; 2]>, alpha: f64) -> QuantilePrediction {
        QuantilePrediction {
            levels: vec![alpha / 2.0, 1.0 - alpha / 2.0],
            values: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn cqr_score_examples() {
        let pred = two_level_pred(vec![[1.0, 3.0]], 0.1);
        let cal = cqr_calibrate(&pred, &[0.0], 0.1).unwrap();
        // max(1 - 0, 0 - 3) = 1.
        assert_eq!(cal.calibration.scores, vec![1.0]);

        // Target strictly inside the interval gives a negative score.
        let cal = cqr_calibrate(&pred, &[2.0], 0.1).unwrap();
        assert!(cal.calibration.scores[0] < 0.0);

        // Level mismatch is rejected.
        let wrong = QuantilePrediction {
            levels: vec![0.25, 0.75],
            values: vec![vec![1.0, 3.0]],
        };
        assert!(matches!(
            cqr_calibrate(&wrong, &[0.0], 0.1),
            Err(ConformalError::LevelMismatch { .. })
        ));
    }

    #[test]
    fn cqr_predict_widens_by_qhat() {
        let alpha = 0.1;
        let mut rng = Rng::new(2);
        let cal_pred = two_level_pred(
            (0..50).map(|_| [rng.normal() - 1.0, rng.normal() + 1.0]).collect(),
            alpha,
        );
        let y: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let cal = cqr_calibrate(&cal_pred, &y, alpha).unwrap();
        let test_pred = two_level_pred(vec![[1.0, 3.0], [-2.0, 0.5]], alpha);
        let intervals = cqr_predict(&test_pred, &cal).unwrap();
        let qhat = cal.calibration.qhat;
        assert!((intervals.lo[0] - (1.0 - qhat)).abs() < 1e-12);
        assert!((intervals.hi[0] - (3.0 + qhat)).abs() < 1e-12);
        // Width grows by exactly 2 qhat when qhat >= 0.
        if qhat >= 0.0 {
            assert!((intervals.widths()[1] - (2.5 + 2.0 * qhat)).abs() < 1e-12);
        }

        // qhat = 0 reproduces the raw interval.
        let zero = CqrCalibration {
            calibration: ConformalCalibration {
                scores: vec![0.0],
                alpha,
                qhat: 0.0,
            },
            levels: (alpha / 2.0, 1.0 - alpha / 2.0),
        };
        let same = cqr_predict(&test_pred, &zero).unwrap();
        assert_eq!(same.lo, vec![1.0, -2.0]);
        assert_eq!(same.hi, vec![3.0, 0.5]);
    }

    // Coverage-guarantee simulation: true quantiles of a known Gaussian
    // target, miscalibrated narrow on purpose; CQR brings mean coverage
    // into the guarantee band.
    #[test]
    fn cqr_coverage_simulation() {
        let alpha = 0.1;
        let mut coverages = Vec::new();
        for seed in 0..20 {
            let mut rng = Rng::new(child_seed_indexed(77, "sim", seed));
            let n = 1000;
            // Heteroscedastic truth: y ~ N(0, (0.5 + |x|)^2), quantile
            // model trained at the wrong (too narrow) levels.
            let draw = |rng: &mut Rng| {
                let x = rng.uniform_in(-2.0, 2.0);
                let s = 0.5 + x.abs();
                let y = s * rng.normal();
                // Narrow raw quantiles: true 25%/75% instead of 5%/95%.
                let z = norm_quantile(0.75);
                ([-(z * s), z * s], y)
            };
            let mut cal_rows = Vec::with_capacity(n);
            let mut cal_y = Vec::with_capacity(n);
            for _ in 0..n {
                let (row, y) = draw(&mut rng);
                cal_rows.push(row);
                cal_y.push(y);
            }
            let cal = cqr_calibrate(&two_level_pred(cal_rows, alpha), &cal_y, alpha).unwrap();

            let mut test_rows = Vec::with_capacity(n);
            let mut test_y = Vec::with_capacity(n);
            for _ in 0..n {
                let (row, y) = draw(&mut rng);
                test_rows.push(row);
                test_y.push(y);
            }
            let raw = two_level_pred(test_rows, alpha);
            let intervals = cqr_predict(&raw, &cal).unwrap();
            let covered = test_y
                .iter()
                .enumerate()
                .filter(|(i, y)| intervals.lo[*i] <= **y && **y <= intervals.hi[*i])
                .count();
            coverages.push(covered as f64 / n as f64);

            // Monotonicity: conformalized intervals only widen the raw
            // ones here (qhat > 0 for under-covering raw quantiles).
            assert!(cal.calibration.qhat > 0.0);
        }
        let mean = coverages.iter().sum::<f64>() / coverages.len() as f64;
        assert!(
            (0.88..=0.92).contains(&mean),
            "mean CQR coverage {mean} outside [0.88, 0.92]"
        );
    }

    #[test]
    fn residual_conformal_modes() {
        // All residuals zero: degenerate intervals at mu.
        let pred = GaussianPrediction {
            mean: vec![1.0, 2.0, 3.0],
            std: vec![1.0, 1.0, 1.0],
        };
        let cal = residual_calibrate(&pred, &[1.0, 2.0, 3.0], 0.5, false).unwrap();
        assert_eq!(cal.calibration.qhat, 0.0);
        let intervals = residual_predict(&pred, &cal);
        assert_eq!(intervals.lo, pred.mean);
        assert_eq!(intervals.hi, pred.mean);

        // Normalized mode with a perfectly specified sigma: coverage near
        // the target at a large calibration size.
        let mut rng = Rng::new(3);
        let n = 2000;
        let make = |rng: &mut Rng| {
            let s = 0.2 + rng.uniform() * 2.0;
            (s, s * rng.normal())
        };
        let mut stds = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let (s, y) = make(&mut rng);
            stds.push(s);
            ys.push(y);
        }
        let cal_pred = GaussianPrediction {
            mean: vec![0.0; n],
            std: stds,
        };
        let cal = residual_calibrate(&cal_pred, &ys, 0.1, true).unwrap();

        let mut stds = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let (s, y) = make(&mut rng);
            stds.push(s);
            ys.push(y);
        }
        let test_pred = GaussianPrediction {
            mean: vec![0.0; n],
            std: stds,
        };
        let intervals = residual_predict(&test_pred, &cal);
        let covered = ys
            .iter()
            .enumerate()
            .filter(|(i, y)| intervals.lo[*i] <= **y && **y <= intervals.hi[*i])
            .count() as f64
            / n as f64;
        assert!(
            (0.88..=0.92).contains(&covered),
            "normalized residual coverage {covered}"
        );
    }

    #[test]
    fn raps_score_examples() {
        let probs = CategoricalPrediction {
            probs: vec![vec![0.5, 0.3, 0.2]],
        };
        // True class at rank 2, k_reg = 1, lambda = 0.1, no randomization:
        // 0.5 + 0.3 + 0.1 * 1 = 0.9.
        let cal = raps_calibrate(
            &probs,
            &[1],
            0.1,
            RapsConfig { k_reg: 1, lambda: 0.1, randomized: false },
            0,
        )
        .unwrap();
        assert!((cal.calibration.scores[0] - 0.9).abs() < 1e-12);

        // Top-rank true class with lambda = 0: its own mass only.
        let cal = raps_calibrate(
            &probs,
            &[0],
            0.1,
            RapsConfig { k_reg: 1, lambda: 0.0, randomized: false },
            0,
        )
        .unwrap();
        assert!((cal.calibration.scores[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn raps_reduces_to_adaptive_score_without_regularization() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let c = 3 + rng.below(4);
            let mut row: Vec<f64> = (0..c).map(|_| rng.uniform() + 1e-6).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
            let label = rng.below(c);
            let probs = CategoricalPrediction { probs: vec![row.clone()] };
            let cal = raps_calibrate(
                &probs,
                &[label],
                0.1,
                RapsConfig { k_reg: 0, lambda: 0.0, randomized: false },
                0,
            )
            .unwrap();
            // Unregularized adaptive score: cumulative mass down to the
            // true class.
            let order = descending_order(&row);
            let mut cum = 0.0;
            for &class in &order {
                cum += row[class];
                if class == label {
                    break;
                }
            }
            assert!((cal.calibration.scores[0] - cum).abs() < 1e-12);
        }
    }

    #[test]
    fn raps_prediction_sets_saturate_and_stay_nonempty() {
        let probs = CategoricalPrediction {
            probs: vec![vec![0.6, 0.3, 0.1], vec![0.4, 0.35, 0.25]],
        };
        let config = RapsConfig { k_reg: 1, lambda: 0.1, randomized: false };
        // qhat >= 1 + lambda (C - k_reg): every set is the full class list.
        let full = RapsCalibration {
            calibration: ConformalCalibration { scores: vec![], alpha: 0.1, qhat: 1.2 },
            config,
            seed: 0,
        };
        let sets = raps_predict(&probs, &full);
        assert!(sets.membership.iter().all(|row| row.iter().all(|b| *b)));

        // qhat just above the top-1 mass: singleton sets containing the
        // argmax.
        let tight = RapsCalibration {
            calibration: ConformalCalibration { scores: vec![], alpha: 0.1, qhat: 0.61 },
            config: RapsConfig { k_reg: 1, lambda: 0.1, randomized: false },
            seed: 0,
        };
        let sets = raps_predict(&probs, &tight);
        assert_eq!(sets.set_sizes(), vec![1, 1]);
        assert!(sets.membership[0][0]);
        assert!(sets.membership[1][0]);

        // Infinite qhat always saturates.
        let inf = RapsCalibration {
            calibration: ConformalCalibration { scores: vec![], alpha: 0.1, qhat: f64::INFINITY },
            config,
            seed: 0,
        };
        assert!(raps_predict(&probs, &inf)
            .membership
            .iter()
            .all(|row| row.iter().all(|b| *b)));
    }

    // Simulation oracle: labels drawn from the stated probabilities are
    // exchangeable between calibration and test, so RAPS coverage
    // concentrates at 1 - alpha.
    #[test]
    fn raps_coverage_simulation() {
        let alpha = 0.1;
        let mut coverages = Vec::new();
        for seed in 0..20 {
            let mut rng = Rng::new(child_seed_indexed(88, "raps-sim", seed));
            let n = 1000;
            let c = 4;
            let gen = |rng: &mut Rng| {
                let mut row: Vec<f64> = (0..c).map(|_| (rng.normal() * 1.2).exp()).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= sum);
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut label = c - 1;
                for (j, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        label = j;
                        break;
                    }
                }
                (row, label)
            };
            let mut cal_rows = Vec::new();
            let mut cal_labels = Vec::new();
            for _ in 0..n {
                let (row, label) = gen(&mut rng);
                cal_rows.push(row);
                cal_labels.push(label);
            }
            let cal = raps_calibrate(
                &CategoricalPrediction { probs: cal_rows },
                &cal_labels,
                alpha,
                RapsConfig::default(),
                seed as u64,
            )
            .unwrap();

            let mut test_rows = Vec::new();
            let mut test_labels = Vec::new();
            for _ in 0..n {
                let (row, label) = gen(&mut rng);
                test_rows.push(row);
                test_labels.push(label);
            }
            let sets = raps_predict(&CategoricalPrediction { probs: test_rows }, &cal);
            coverages.push(sets.coverage(&test_labels));
        }
        let mean = coverages.iter().sum::<f64>() / coverages.len() as f64;
        assert!(
            (0.88..=0.93).contains(&mean),
            "mean RAPS coverage {mean} outside [0.88, 0.93]"
        );
    }

    #[test]
    fn gaussian_interval_hits_nominal_width() {
        let pred = GaussianPrediction {
            mean: vec![0.0],
            std: vec![2.0],
        };
        let interval = gaussian_central_interval(&pred, 0.05).unwrap();
        // z_{0.975} = 1.959964 scaled by sigma = 2.
        assert!((interval.hi[0] - 3.919_927_969_080_108).abs() < 1e-6);
        assert!((interval.lo[0] + 3.919_927_969_080_108).abs() < 1e-6);
        assert!(gaussian_central_interval(&pred, 1.5).is_err());
    }
}

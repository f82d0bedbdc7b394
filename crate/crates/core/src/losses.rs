//! Training objectives, built as tape graphs so gradients come from the
//! same reverse pass as everything else.
//!
//! Distribution heads live here too: raw network columns are mapped to
//! constrained parameters (softplus plus a small floor for scales, a unit
//! offset for the evidential alpha) before the loss is assembled.

use crate::data::Targets;
use crate::tape::{Tape, VarId};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

/// Floor added to softplus-parameterized scales.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{loss} expects {expected} output columns, got {got}")]
    OutputDim {
        loss: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{loss} requires {expected} targets")]
    WrongTargets {
        loss: &'static str,
        expected: &'static str,
    },
    #[error("quantile level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("{0}")]
    BadParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Objective selector consumed by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// Mean squared error on a single output column.
    Mse,
    /// Gaussian negative log-likelihood over a two-column (mean, raw-std)
    /// head.
    GaussianNll,
    /// Pinball (check) loss, one output column per quantile level, summed
    /// over levels and averaged over the batch.
    Pinball { levels: Vec<f64> },
    /// Evidential regression: Student-t NLL of a four-column
    /// Normal-Inverse-Gamma head plus `lambda`-weighted evidence
    /// regularizer.
    Der { lambda: f64 },
    /// Softmax cross-entropy from logits in log-sum-exp form.
    CrossEntropy,
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::Mse => "mse",
            Loss::GaussianNll => "gaussian_nll",
            Loss::Pinball { .. } => "pinball",
            Loss::Der { .. } => "der",
            Loss::CrossEntropy => "cross_entropy",
        }
    }

    /// Output columns the model must produce for this loss.
    pub fn required_output_dim(&self, n_classes: Option<usize>) -> usize {
        match self {
            Loss::Mse => 1,
            Loss::GaussianNll => 2,
            Loss::Pinball { levels } => levels.len(),
            Loss::Der { .. } => 4,
            Loss::CrossEntropy => n_classes.unwrap_or(0),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match self {
            Loss::Pinball { levels } => {
                if levels.is_empty() {
                    return Err(LossError::BadParam("pinball needs at least one level".into()));
                }
                for level in levels {
                    if !(0.0 < *level && *level < 1.0) {
                        return Err(LossError::BadLevel(*level));
                    }
                }
                if levels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(LossError::BadParam(
                        "pinball levels must be strictly ascending".into(),
                    ));
                }
                Ok(())
            }
            Loss::Der { lambda } => {
                if *lambda < 0.0 {
                    Err(LossError::BadParam(format!(
                        "der regularizer weight must be non-negative, got {lambda}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Assemble the scalar loss node for a batch.
    pub fn build_on_tape(
        &self,
        tape: &mut Tape,
        output: VarId,
        targets: &Targets,
    ) -> Result<VarId, LossError> {
        self.validate()?;
        let cols = tape.value(output).cols()?;
        match self {
            Loss::Mse => {
                let y = regression_targets(targets, "mse")?;
                require_dim("mse", 1, cols)?;
                let yt = tape.constant(Tensor::column(y));
                let diff = tape.sub(output, yt)?;
                let sq = tape.mul(diff, diff)?;
                Ok(tape.mean(sq)?)
            }
            Loss::GaussianNll => {
                let y = regression_targets(targets, "gaussian_nll")?;
                require_dim("gaussian_nll", 2, cols)?;
                let (mean, std) = mve_head(tape, output)?;
                Ok(gaussian_nll_on_tape(tape, mean, std, y)?)
            }
            Loss::Pinball { levels } => {
                let y = regression_targets(targets, "pinball")?;
                require_dim("pinball", levels.len(), cols)?;
                Ok(pinball_on_tape(tape, levels, output, y)?)
            }
            Loss::Der { lambda } => {
                let y = regression_targets(targets, "der")?;
                require_dim("der", 4, cols)?;
                let head = nig_head(tape, output)?;
                Ok(der_loss_on_tape(tape, &head, y, *lambda)?)
            }
            Loss::CrossEntropy => {
                let (labels, n_classes) = targets.as_classification().ok_or(
                    LossError::WrongTargets {
                        loss: "cross_entropy",
                        expected: "classification",
                    },
                )?;
                require_dim("cross_entropy", n_classes, cols)?;
                Ok(cross_entropy_on_tape(tape, output, labels)?)
            }
        }
    }
}

fn regression_targets<'a>(
    targets: &'a Targets,
    loss: &'static str,
) -> Result<&'a [f64], LossError> {
    targets.as_regression().ok_or(LossError::WrongTargets {
        loss,
        expected: "regression",
    })
}

fn require_dim(loss: &'static str, expected: usize, got: usize) -> Result<(), LossError> {
    if expected == got {
        Ok(())
    } else {
        Err(LossError::OutputDim { loss, expected, got })
    }
}

/// Map a two-column head to `(mean, std)` with
/// `std = softplus(raw) + SCALE_FLOOR`.
pub fn mve_head(tape: &mut Tape, output: VarId) -> Result<(VarId, VarId), TensorError> {
    let mean = tape.select_column(output, 0)?;
    let raw = tape.select_column(output, 1)?;
    let sp = tape.softplus(raw)?;
    let std = tape.add_scalar(sp, SCALE_FLOOR)?;
    Ok((mean, std))
}

/// Normal-Inverse-Gamma head nodes.
pub struct NigNodes {
    pub gamma: VarId,
    pub nu: VarId,
    pub alpha: VarId,
    pub beta: VarId,
}

/// Map a four-column head to NIG parameters: `nu, beta` through softplus
/// with a floor, `alpha` through `1 + softplus` so it stays above one.
pub fn nig_head(tape: &mut Tape, output: VarId) -> Result<NigNodes, TensorError> {
    let gamma = tape.select_column(output, 0)?;
    let raw_nu = tape.select_column(output, 1)?;
    let raw_alpha = tape.select_column(output, 2)?;
    let raw_beta = tape.select_column(output, 3)?;
    let nu = tape.softplus(raw_nu)?;
    let nu = tape.add_scalar(nu, SCALE_FLOOR)?;
    let alpha = tape.softplus(raw_alpha)?;
    let alpha = tape.add_scalar(alpha, 1.0 + SCALE_FLOOR)?;
    let beta = tape.softplus(raw_beta)?;
    let beta = tape.add_scalar(beta, SCALE_FLOOR)?;
    Ok(NigNodes {
        gamma,
        nu,
        alpha,
        beta,
    })
}

/// Batch-averaged Gaussian NLL
/// `0.5 ln(2 pi sigma^2) + (y - mu)^2 / (2 sigma^2)`.
pub fn gaussian_nll_on_tape(
    tape: &mut Tape,
    mean: VarId,
    std: VarId,
    y: &[f64],
) -> Result<VarId, TensorError> {
    let yt = tape.constant(Tensor::column(y));
    let diff = tape.sub(yt, mean)?;
    let sq = tape.mul(diff, diff)?;
    let var = tape.mul(std, std)?;
    let two_var = tape.scale(var, 2.0)?;
    let quad = tape.div(sq, two_var)?;
    let log_std = tape.log(std)?;
    let per = tape.add(log_std, quad)?;
    let avg = tape.mean(per)?;
    tape.add_scalar(avg, 0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Pinball loss `rho_tau(u) = tau relu(u) + (1 - tau) relu(-u)` with
/// `u = y - q`, summed over levels, averaged over the batch.
pub fn pinball_on_tape(
    tape: &mut Tape,
    levels: &[f64],
    output: VarId,
    y: &[f64],
) -> Result<VarId, TensorError> {
    let yt = tape.constant(Tensor::column(y));
    let mut total: Option<VarId> = None;
    for (j, &tau) in levels.iter().enumerate() {
        let q = tape.select_column(output, j)?;
        let u = tape.sub(yt, q)?;
        let over = tape.relu(u)?;
        let neg_u = tape.neg(u)?;
        let under = tape.relu(neg_u)?;
        let over_scaled = tape.scale(over, tau)?;
        let under_scaled = tape.scale(under, 1.0 - tau)?;
        let term = tape.add(over_scaled, under_scaled)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    tape.mean(total.expect("at least one level"))
}

/// Evidential regression loss, averaged over the batch. With
/// `Omega = 2 beta (1 + nu)`, each sample contributes
/// `0.5 ln(pi/nu) - alpha ln(Omega) + (alpha + 0.5) ln((y-gamma)^2 nu + Omega)
/// + ln Gamma(alpha) - ln Gamma(alpha + 0.5) + lambda |y-gamma| (2 nu + alpha)`.
pub fn der_loss_on_tape(
    tape: &mut Tape,
    head: &NigNodes,
    y: &[f64],
    lambda: f64,
) -> Result<VarId, TensorError> {
    let yt = tape.constant(Tensor::column(y));
    let nu_plus_one = tape.add_scalar(head.nu, 1.0)?;
    let beta_nu = tape.mul(head.beta, nu_plus_one)?;
    let omega = tape.scale(beta_nu, 2.0)?;

    let diff = tape.sub(yt, head.gamma)?;
    let sq = tape.mul(diff, diff)?;

    let log_nu = tape.log(head.nu)?;
    let t_nu = tape.scale(log_nu, -0.5)?;

    let log_omega = tape.log(omega)?;
    let alpha_log_omega = tape.mul(head.alpha, log_omega)?;
    let t_omega = tape.neg(alpha_log_omega)?;

    let nu_sq = tape.mul(head.nu, sq)?;
    let inner = tape.add(nu_sq, omega)?;
    let log_inner = tape.log(inner)?;
    let alpha_half = tape.add_scalar(head.alpha, 0.5)?;
    let t_inner = tape.mul(alpha_half, log_inner)?;

    let lg_alpha = tape.ln_gamma(head.alpha)?;
    let lg_alpha_half = tape.ln_gamma(alpha_half)?;
    let t_gamma = tape.sub(lg_alpha, lg_alpha_half)?;

    let mut per = tape.add(t_nu, t_omega)?;
    per = tape.add(per, t_inner)?;
    per = tape.add(per, t_gamma)?;

    if lambda > 0.0 {
        let abs_diff = tape.abs(diff)?;
        let two_nu = tape.scale(head.nu, 2.0)?;
        let evidence = tape.add(two_nu, head.alpha)?;
        let reg = tape.mul(abs_diff, evidence)?;
        let reg = tape.scale(reg, lambda)?;
        per = tape.add(per, reg)?;
    }

    let avg = tape.mean(per)?;
    tape.add_scalar(avg, 0.5 * std::f64::consts::PI.ln())
}

/// Cross-entropy from logits: `mean_i [ lse(z_i) - z_{i, y_i} ]`.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    logits: VarId,
    labels: &[usize],
) -> Result<VarId, TensorError> {
    let lse = tape.logsumexp_rows(logits)?;
    let picked = tape.gather_labels(logits, labels)?;
    let per = tape.sub(lse, picked)?;
    tape.mean(per)
}

/// Closed-form KL between diagonal Gaussians `N(mu, sigma^2)` and the
/// prior `N(0, s^2)`, summed over all entries:
/// `ln(s/sigma) + (sigma^2 + mu^2) / (2 s^2) - 1/2`.
pub fn kl_gaussian_on_tape(
    tape: &mut Tape,
    mu: VarId,
    sigma: VarId,
    prior_std: f64,
) -> Result<VarId, TensorError> {
    let count = tape.value(mu).len() as f64;
    let log_sigma = tape.log(sigma)?;
    let neg_log_sigma = tape.neg(log_sigma)?;
    let sig_sq = tape.mul(sigma, sigma)?;
    let mu_sq = tape.mul(mu, mu)?;
    let sum_sq = tape.add(sig_sq, mu_sq)?;
    let quad = tape.scale(sum_sq, 1.0 / (2.0 * prior_std * prior_std))?;
    let per = tape.add(neg_log_sigma, quad)?;
    let total = tape.sum(per)?;
    tape.add_scalar(total, count * (prior_std.ln() - 0.5))
}

/// Plain-value KL for a single Gaussian pair (the closed form above).
pub fn kl_gaussian(mu: f64, sigma: f64, prior_std: f64) -> Result<f64, LossError> {
    if sigma <= 0.0 || prior_std <= 0.0 {
        return Err(LossError::BadParam(format!(
            "kl_gaussian needs positive scales (sigma={sigma}, prior={prior_std})"
        )));
    }
    Ok((prior_std / sigma).ln() + (sigma * sigma + mu * mu) / (2.0 * prior_std * prior_std) - 0.5)
}

/// Plain-value pinball loss for one (level, prediction, target) triple.
pub fn pinball(tau: f64, q: f64, y: f64) -> f64 {
    let u = y - q;
    if u >= 0.0 {
        tau * u
    } else {
        (tau - 1.0) * u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn fd_check(
        params: &[f64],
        eval: impl Fn(&[f64]) -> f64,
        analytic: &[f64],
        tol: f64,
    ) {
        let h = 1e-5;
        let mut work = params.to_vec();
        for i in 0..params.len() {
            work[i] = params[i] + h;
            let up = eval(&work);
            work[i] = params[i] - h;
            let down = eval(&work);
            work[i] = params[i];
            let fd = (up - down) / (2.0 * h);
            let denom = 1.0_f64.max(fd.abs());
            assert!(
                (analytic[i] - fd).abs() / denom <= tol,
                "param {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn gaussian_nll_standard_normal_value() {
        // mu = 0, sigma = 1, y = 0 evaluates to 0.5 ln(2 pi).
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::column(&[0.0]));
        let std = tape.constant(Tensor::column(&[1.0]));
        let loss = gaussian_nll_on_tape(&mut tape, mean, std, &[0.0]).unwrap();
        let expected = 0.918_938_533_204_672_7; // 0.5 ln(2 pi)
        assert!((tape.value(loss).scalar_value().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_minimized_at_target_mean() {
        let y = [1.3];
        let at = |mu: f64| {
            let mut tape = Tape::new();
            let mean = tape.constant(Tensor::column(&[mu]));
            let std = tape.constant(Tensor::column(&[0.7]));
            let loss = gaussian_nll_on_tape(&mut tape, mean, std, &y).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };
        let best = at(1.3);
        for mu in [-1.0, 0.0, 1.0, 1.2, 1.4, 2.0] {
            assert!(at(mu) >= best);
        }
    }

    #[test]
    fn gaussian_nll_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let y: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let params: Vec<f64> = (0..8).map(|_| rng.normal() * 0.5).collect();
        let eval = |p: &[f64]| {
            let mut tape = Tape::new();
            let mean = tape.param(Tensor::column(&p[0..4]));
            let raw = tape.param(Tensor::column(&p[4..8]));
            let sp = tape.softplus(raw).unwrap();
            let std = tape.add_scalar(sp, SCALE_FLOOR).unwrap();
            let loss = gaussian_nll_on_tape(&mut tape, mean, std, &y).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };
        let mut tape = Tape::new();
        let mean = tape.param(Tensor::column(&params[0..4]));
        let raw = tape.param(Tensor::column(&params[4..8]));
        let sp = tape.softplus(raw).unwrap();
        let std = tape.add_scalar(sp, SCALE_FLOOR).unwrap();
        let loss = gaussian_nll_on_tape(&mut tape, mean, std, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut analytic = grads.slot(0).data().to_vec();
        analytic.extend_from_slice(grads.slot(1).data());
        fd_check(&params, eval, &analytic, 1e-4);
    }

    #[test]
    fn pinball_hand_values() {
        assert!((pinball(0.9, 0.0, 1.0) - 0.9).abs() < 1e-15);
        assert!((pinball(0.9, 1.0, 0.0) - 0.1).abs() < 1e-15);
        // tau = 0.5 halves the absolute error.
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let (q, y) = (rng.normal(), rng.normal());
            assert!((pinball(0.5, q, y) - 0.5 * (y - q).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn pinball_tape_matches_plain_eval() {
        let levels = [0.1, 0.5, 0.9];
        let mut rng = Rng::new(4);
        let y: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let q: Vec<f64> = (0..18).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let out = tape.constant(Tensor::from_vec(vec![6, 3], q.clone()).unwrap());
        let node = pinball_on_tape(&mut tape, &levels, out, &y).unwrap();
        let mut expected = 0.0;
        for i in 0..6 {
            for (j, tau) in levels.iter().enumerate() {
                expected += pinball(*tau, q[i * 3 + j], y[i]);
            }
        }
        expected /= 6.0;
        assert!((tape.value(node).scalar_value().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn der_loss_closed_form_point() {
        // y = gamma = 0, nu = alpha = beta = 1, lambda = 0 gives ln 4.
        let mut tape = Tape::new();
        let head = NigNodes {
            gamma: tape.constant(Tensor::column(&[0.0])),
            nu: tape.constant(Tensor::column(&[1.0])),
            alpha: tape.constant(Tensor::column(&[1.0])),
            beta: tape.constant(Tensor::column(&[1.0])),
        };
        let loss = der_loss_on_tape(&mut tape, &head, &[0.0], 0.0).unwrap();
        assert!((tape.value(loss).scalar_value().unwrap() - 4.0_f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn der_regularizer_vanishes_at_zero_residual() {
        let value = |lambda: f64| {
            let mut tape = Tape::new();
            let head = NigNodes {
                gamma: tape.constant(Tensor::column(&[2.0])),
                nu: tape.constant(Tensor::column(&[1.5])),
                alpha: tape.constant(Tensor::column(&[2.0])),
                beta: tape.constant(Tensor::column(&[0.5])),
            };
            let loss = der_loss_on_tape(&mut tape, &head, &[2.0], lambda).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };
        assert!((value(0.0) - value(10.0)).abs() < 1e-12);
    }

    #[test]
    fn der_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let y: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let params: Vec<f64> = (0..12).map(|_| rng.normal() * 0.4).collect();
        let build = |tape: &mut Tape, p: &[f64]| {
            let raw = tape.param(Tensor::from_vec(vec![3, 4], p.to_vec()).unwrap());
            let head = nig_head(tape, raw).unwrap();
            der_loss_on_tape(tape, &head, &y, 0.05).unwrap()
        };
        let eval = |p: &[f64]| {
            let mut tape = Tape::new();
            let loss = build(&mut tape, p);
            tape.value(loss).scalar_value().unwrap()
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &params);
        let grads = tape.backward(loss).unwrap();
        fd_check(&params, eval, grads.slot(0).data(), 1e-3);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![1, 4], vec![0.0; 4]).unwrap());
        let loss = cross_entropy_on_tape(&mut tape, logits, &[2]).unwrap();
        assert!((tape.value(loss).scalar_value().unwrap() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_and_gradient() {
        // Strong logit gap toward the true label drives the loss to zero.
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![1, 2], vec![100.0, 0.0]).unwrap());
        let loss = cross_entropy_on_tape(&mut tape, logits, &[0]).unwrap();
        assert!(tape.value(loss).scalar_value().unwrap() < 1e-12);

        let mut rng = Rng::new(2);
        let labels = vec![0usize, 2, 1];
        let params: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let eval = |p: &[f64]| {
            let mut tape = Tape::new();
            let z = tape.param(Tensor::from_vec(vec![3, 3], p.to_vec()).unwrap());
            let loss = cross_entropy_on_tape(&mut tape, z, &labels).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };
        let mut tape = Tape::new();
        let z = tape.param(Tensor::from_vec(vec![3, 3], params.clone()).unwrap());
        let loss = cross_entropy_on_tape(&mut tape, z, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        fd_check(&params, eval, grads.slot(0).data(), 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![1, 3], vec![0.0; 3]).unwrap());
        assert!(cross_entropy_on_tape(&mut tape, logits, &[3]).is_err());
    }

    #[test]
    fn kl_gaussian_closed_form() {
        assert!(kl_gaussian(0.0, 1.0, 1.0).unwrap().abs() < 1e-15);
        assert!((kl_gaussian(1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_gaussian(0.0, -1.0, 1.0).is_err());

        // Non-negativity sweep over random valid parameters.
        let mut rng = Rng::new(12);
        for _ in 0..200 {
            let mu = rng.normal() * 3.0;
            let sigma = 0.05 + rng.uniform() * 3.0;
            let s = 0.05 + rng.uniform() * 3.0;
            assert!(kl_gaussian(mu, sigma, s).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn kl_gaussian_tape_matches_scalar_sum() {
        let mus = [0.3, -1.2, 0.0];
        let sigmas = [0.5, 1.1, 2.0];
        let prior = 0.8;
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::column(&mus));
        let sigma = tape.constant(Tensor::column(&sigmas));
        let node = kl_gaussian_on_tape(&mut tape, mu, sigma, prior).unwrap();
        let expected: f64 = mus
            .iter()
            .zip(&sigmas)
            .map(|(m, s)| kl_gaussian(*m, *s, prior).unwrap())
            .sum();
        assert!((tape.value(node).scalar_value().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = Rng::new(10);
        let params: Vec<f64> = (0..6).map(|_| rng.normal() * 0.5).collect();
        let eval = |p: &[f64]| {
            let mut tape = Tape::new();
            let mu = tape.param(Tensor::column(&p[0..3]));
            let rho = tape.param(Tensor::column(&p[3..6]));
            let sigma = tape.softplus(rho).unwrap();
            let node = kl_gaussian_on_tape(&mut tape, mu, sigma, 1.0).unwrap();
            tape.value(node).scalar_value().unwrap()
        };
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::column(&params[0..3]));
        let rho = tape.param(Tensor::column(&params[3..6]));
        let sigma = tape.softplus(rho).unwrap();
        let node = kl_gaussian_on_tape(&mut tape, mu, sigma, 1.0).unwrap();
        let grads = tape.backward(node).unwrap();
        let mut analytic = grads.slot(0).data().to_vec();
        analytic.extend_from_slice(grads.slot(1).data());
        fd_check(&params, eval, &analytic, 1e-4);
    }

    #[test]
    fn loss_validation() {
        assert!(Loss::Pinball { levels: vec![0.5, 0.2] }.validate().is_err());
        assert!(Loss::Pinball { levels: vec![0.0] }.validate().is_err());
        assert!(Loss::Der { lambda: -1.0 }.validate().is_err());
        assert!(Loss::Pinball { levels: vec![0.05, 0.95] }.validate().is_ok());
        assert_eq!(Loss::GaussianNll.required_output_dim(None), 2);
        assert_eq!(Loss::CrossEntropy.required_output_dim(Some(5)), 5);
    }
}

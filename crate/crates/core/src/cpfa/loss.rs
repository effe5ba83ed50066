//! Reconstruction, prior and confidence-shrinkage losses.
//!
//! The plain functions here evaluate each term directly from values; the
//! tape-recorded versions used during training live in [`record_total_loss`].

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{smoothed_target, Mat, Tape, Var};

use super::model::ForwardVars;

/// Epoch at which the Gamma hyper-parameters reach their final values.
pub const GAMMA_ANNEAL_EPOCHS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub prior: f64,
    pub gamma_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, prior: f64, gamma_reg: f64) -> Self {
        Self {
            recon,
            prior,
            gamma_reg,
            total: recon + prior + gamma_reg,
        }
    }
}

/// `α Σ_h λ_h ‖Ā^(h) − P‖²`.
pub fn prior_penalty(
    head_means: &[Vec<f64>],
    prior: &[f64],
    lambdas: &[f64],
    alpha: f64,
) -> Result<f64> {
    if head_means.len() != lambdas.len() {
        return Err(Error::Shape(format!(
            "{} head means vs {} lambdas",
            head_means.len(),
            lambdas.len()
        )));
    }
    let mut acc = 0.0;
    for (mean, &lambda) in head_means.iter().zip(lambdas) {
        if mean.len() != prior.len() {
            return Err(Error::Shape(format!(
                "head mean length {} vs prior length {}",
                mean.len(),
                prior.len()
            )));
        }
        let sq: f64 = mean.iter().zip(prior).map(|(a, p)| (a - p).powi(2)).sum();
        acc += lambda * sq;
    }
    Ok(alpha * acc)
}

pub fn recon_loss_regression(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape("prediction/target length mismatch".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Focal cross-entropy with label smoothing, averaged over the batch.
pub fn recon_loss_classification(
    logits: &Mat,
    labels: &[usize],
    gamma: f64,
    smoothing: f64,
) -> Result<f64> {
    let (b, k) = logits.dim();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if labels.len() != b {
        return Err(Error::Shape("logit/label count mismatch".into()));
    }
    if k < 2 {
        return Err(Error::invalid("classification needs at least 2 classes"));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::invalid(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        for c in 0..k {
            let y = smoothed_target(label, c, k, smoothing);
            let logp = row[c] - lse;
            let p = logp.exp();
            total += y * (1.0 - p).powf(gamma) * (-logp);
        }
    }
    Ok(total / b as f64)
}

/// `Σ_h [−(a − 1) ln λ_h + b λ_h]`.
pub fn gamma_regularizer(lambdas: &[f64], shape_a: f64, rate_b: f64) -> Result<f64> {
    let mut acc = 0.0;
    for &l in lambdas {
        if !(l > 0.0) {
            return Err(Error::invalid(format!(
                "confidence must be positive, got {l}"
            )));
        }
        acc += -(shape_a - 1.0) * l.ln() + rate_b * l;
    }
    Ok(acc)
}

/// Linear annealing of `(a, b)` from `(0.5, 0.5)` at epoch 0 to
/// `(2, 2/λ₀)` at epoch 10, held afterwards.
pub fn gamma_schedule(epoch: usize, lambda0: f64) -> (f64, f64) {
    let t = epoch.min(GAMMA_ANNEAL_EPOCHS) as f64 / GAMMA_ANNEAL_EPOCHS as f64;
    let a = 0.5 + t * (2.0 - 0.5);
    let b = 0.5 + t * (2.0 / lambda0 - 0.5);
    if epoch >= GAMMA_ANNEAL_EPOCHS {
        (2.0, 2.0 / lambda0)
    } else {
        (a, b)
    }
}

/// Supervision for one batch.
#[derive(Clone, Debug)]
pub enum BatchTarget {
    Regression(Rc<Mat>),
    Classification(Rc<Vec<usize>>),
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights<'a> {
    pub prior: &'a [f64],
    pub alpha: f64,
    /// Gamma hyper-parameters, or `None` when the regularizer is off.
    pub gamma: Option<(f64, f64)>,
    pub focal_gamma: f64,
    pub label_smoothing: f64,
}

pub struct LossVars {
    pub recon: Var,
    pub prior: Var,
    pub gamma_reg: Var,
    pub total: Var,
}

/// Records `L_recon + L_prior + R(λ)` on the tape. Only the first
/// `prior.len()` attention columns are compared to the prior.
pub fn record_total_loss(
    tape: &mut Tape,
    fv: &ForwardVars,
    target: &BatchTarget,
    w: LossWeights<'_>,
) -> LossVars {
    let recon = match target {
        BatchTarget::Regression(y) => tape.mse(fv.output, y.clone()),
        BatchTarget::Classification(labels) => {
            tape.focal_ce(fv.output, labels.clone(), w.focal_gamma, w.label_smoothing)
        }
    };
    let p =
        tape.leaf(Array2::from_shape_vec((1, w.prior.len()), w.prior.to_vec()).expect("prior row"));
    let mut terms = Vec::with_capacity(fv.attention.len());
    for (&a, &lambda) in fv.attention.iter().zip(&fv.lambdas) {
        let mean = tape.col_mean(a);
        let mean = tape.select_cols(mean, 0..w.prior.len());
        let diff = tape.sub(mean, p);
        let sq = tape.square(diff);
        let sq = tape.sum(sq);
        terms.push(tape.mul(sq, lambda));
    }
    let stacked = tape.concat_cols(&terms);
    let summed = tape.sum(stacked);
    let prior = tape.scale(summed, w.alpha);

    let gamma_reg = match w.gamma {
        Some((a, b)) => {
            let lambdas = tape.concat_cols(&fv.lambdas);
            let logs = tape.ln(lambdas);
            let logs = tape.scale(logs, -(a - 1.0));
            let lin = tape.scale(lambdas, b);
            let per_head = tape.add(logs, lin);
            tape.sum(per_head)
        }
        None => tape.leaf(Mat::zeros((1, 1))),
    };
    let partial = tape.add(recon, prior);
    let total = tape.add(partial, gamma_reg);
    LossVars {
        recon,
        prior,
        gamma_reg,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn penalty_examples() {
        let p = vec![0.6, 0.4];
        assert_eq!(
            prior_penalty(&[p.clone(), p.clone()], &p, &[1.0, 2.0], 1.0).unwrap(),
            0.0
        );
        assert_eq!(
            prior_penalty(&[vec![1.0, 0.0]], &p, &[1.0], 0.0).unwrap(),
            0.0
        );
        let v = prior_penalty(&[vec![0.7, 0.3]], &p, &[1.0], 1.0).unwrap();
        assert!((v - 0.02).abs() < 1e-15);
    }

    #[test]
    fn regression_examples() {
        assert_eq!(
            recon_loss_regression(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            0.0
        );
        assert_eq!(
            recon_loss_regression(&[1.0, -1.0], &[0.0, 0.0]).unwrap(),
            1.0
        );
        assert!((recon_loss_regression(&[3.5, 0.5], &[3.0, 0.0]).unwrap() - 0.25).abs() < 1e-15);
        assert!(recon_loss_regression(&[], &[]).is_err());
    }

    #[test]
    fn classification_examples() {
        let z = array![[1.0, 2.0, -1.0]];
        let plain = recon_loss_classification(&z, &[1], 0.0, 0.0).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + (-1f64).exp()).ln();
        assert!((plain - (lse - 2.0)).abs() < 1e-14);
        let perfect = recon_loss_classification(&array![[0.0, 900.0]], &[1], 2.0, 0.0).unwrap();
        assert!(perfect.abs() < 1e-300);
        let half = recon_loss_classification(&array![[0.3, 0.3]], &[0], 2.0, 0.0).unwrap();
        assert!((half - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((half - 0.173_286_795_139_986_3).abs() < 1e-12);
        assert!(recon_loss_classification(&Mat::zeros((0, 2)), &[], 2.0, 0.1).is_err());
    }

    #[test]
    fn gamma_examples() {
        let r = gamma_regularizer(&[0.5, 2.0], 1.0, 0.3).unwrap();
        assert!((r - 0.3 * 2.5).abs() < 1e-15);
        let r = gamma_regularizer(&[1.0, 1.0], 2.0, 2.0).unwrap();
        assert!((r - 4.0).abs() < 1e-15);
        assert!(gamma_regularizer(&[0.0], 2.0, 2.0).is_err());
        assert_eq!(gamma_schedule(0, 1.0), (0.5, 0.5));
        assert_eq!(gamma_schedule(10, 0.8), (2.0, 2.0 / 0.8));
        assert_eq!(gamma_schedule(37, 0.8), (2.0, 2.0 / 0.8));
        let (a, b) = gamma_schedule(5, 1.0);
        assert!((a - 1.25).abs() < 1e-15 && (b - 1.25).abs() < 1e-15);
    }

    #[test]
    fn breakdown_identity() {
        let l = LossBreakdown::new(0.3, 0.02, -1.5);
        assert!((l.total - (l.recon + l.prior + l.gamma_reg)).abs() < 1e-15);
    }
}

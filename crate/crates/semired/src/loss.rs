//! Separable loss functions and their curvature quantities.
//!
//! Every loss here has the form `L(mu) = sum_i l_i(mu_i)` for scalar functions
//! `l_i` determined by the data vector `b`. The optimizer consumes losses
//! through [`CurvatureBundle`], which packages the gradient, the diagonal
//! second derivative `d`, its square root `w` (the diagonal of the weighting
//! matrix `W`), and the weighted residual `r` with `grad = W r`.

use nalgebra::DVector;
use thiserror::Error;

/// Errors raised by loss evaluations.
#[derive(Debug, Error)]
pub enum LossError {
    /// `mu` left the domain of the loss (e.g. `mu_i <= 0` for Poisson data).
    #[error("loss domain violation at component {index}: mu = {value}")]
    DomainViolation { index: usize, value: f64 },
    /// Vector length does not match the data length.
    #[error("dimension mismatch: mu has length {got}, data has length {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    /// Invalid construction parameter.
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq)]
enum LossKind {
    LeastSquares,
    /// Variance-weighted least squares with per-component weights
    /// `omega_i = 1 / max(sqrt(b_i), eps)`.
    WeightedLeastSquares { omega: DVector<f64> },
    Poisson,
    /// Huber with one threshold per component; the scalar-threshold
    /// constructor fills a constant vector.
    Huber { t: DVector<f64> },
}

/// A separable loss `L(mu) = sum_i l_i(mu_i)` attached to a data vector.
#[derive(Debug, Clone)]
pub struct LossModel {
    kind: LossKind,
    b: DVector<f64>,
}

/// Gradient and curvature quantities of a loss at a point `mu`.
///
/// Invariants: `w_i = sqrt(curv_i)` and `grad_i = w_i * r_i` wherever
/// `w_i > 0`; where the curvature vanishes (Huber tail, Poisson at `b_i = 0`)
/// the convention `r_i = 0` is used so the identity `grad = W r` stays
/// meaningful on the support of `W`.
#[derive(Debug, Clone)]
pub struct CurvatureBundle {
    pub grad: DVector<f64>,
    pub curv: DVector<f64>,
    pub w: DVector<f64>,
    pub r: DVector<f64>,
}

/// The per-component weights `1 / max(sqrt(b_i), eps)` used by the
/// variance-weighted least squares loss.
pub fn weighted_ls_weights(b: &DVector<f64>, eps: f64) -> Result<DVector<f64>, LossError> {
    if eps <= 0.0 {
        return Err(LossError::InvalidParameter(format!(
            "weighted-LS floor eps must be positive, got {eps}"
        )));
    }
    let mut w = DVector::zeros(b.len());
    for i in 0..b.len() {
        if b[i] < 0.0 {
            return Err(LossError::DomainViolation { index: i, value: b[i] });
        }
        w[i] = 1.0 / b[i].sqrt().max(eps);
    }
    Ok(w)
}

impl LossModel {
    pub fn least_squares(b: DVector<f64>) -> Self {
        Self { kind: LossKind::LeastSquares, b }
    }

    pub fn weighted_least_squares(b: DVector<f64>, eps: f64) -> Result<Self, LossError> {
        let omega = weighted_ls_weights(&b, eps)?;
        Ok(Self { kind: LossKind::WeightedLeastSquares { omega }, b })
    }

    /// Poisson negative log-likelihood with the data-dependent constant
    /// `log(b_i!)` dropped: `l_i(mu) = mu - b_i log(mu)`.
    pub fn poisson(b: DVector<f64>) -> Result<Self, LossError> {
        for i in 0..b.len() {
            if b[i] < 0.0 {
                return Err(LossError::DomainViolation { index: i, value: b[i] });
            }
        }
        Ok(Self { kind: LossKind::Poisson, b })
    }

    /// Huber loss on the residual `x = mu_i - b_i` with threshold `t`:
    /// quadratic for `|x| <= t`, linear tail `t(|x| - t/2)` beyond.
    pub fn huber(b: DVector<f64>, t: f64) -> Result<Self, LossError> {
        if t <= 0.0 {
            return Err(LossError::InvalidParameter(format!(
                "huber threshold must be positive, got {t}"
            )));
        }
        let t = DVector::from_element(b.len(), t);
        Ok(Self { kind: LossKind::Huber { t }, b })
    }

    /// Huber with a separate threshold per component, as produced by row
    /// rescalings of a uniform-threshold problem.
    pub fn huber_per_component(b: DVector<f64>, t: DVector<f64>) -> Result<Self, LossError> {
        if t.len() != b.len() {
            return Err(LossError::DimensionMismatch { got: t.len(), expected: b.len() });
        }
        if let Some(bad) = t.iter().find(|&&ti| ti <= 0.0) {
            return Err(LossError::InvalidParameter(format!(
                "huber threshold must be positive, got {bad}"
            )));
        }
        Ok(Self { kind: LossKind::Huber { t }, b })
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.b
    }

    /// For quadratic losses the constant diagonal of `W`; `None` for losses
    /// whose curvature depends on the point (Poisson, Huber).
    pub fn quadratic_weights(&self) -> Option<DVector<f64>> {
        match &self.kind {
            LossKind::LeastSquares => Some(DVector::from_element(self.b.len(), 1.0)),
            LossKind::WeightedLeastSquares { omega } => Some(omega.clone()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.len() == 0
    }

    fn check_domain(&self, mu: &DVector<f64>) -> Result<(), LossError> {
        if mu.len() != self.b.len() {
            return Err(LossError::DimensionMismatch { got: mu.len(), expected: self.b.len() });
        }
        if let LossKind::Poisson = self.kind {
            for i in 0..mu.len() {
                // mu_i = 0 is tolerated only where b_i = 0 (there l_i = mu_i).
                if mu[i] < 0.0 || (mu[i] <= 0.0 && self.b[i] > 0.0) {
                    return Err(LossError::DomainViolation { index: i, value: mu[i] });
                }
            }
        }
        Ok(())
    }

    /// `L(mu) = sum_i l_i(mu_i)`.
    pub fn value(&self, mu: &DVector<f64>) -> Result<f64, LossError> {
        self.check_domain(mu)?;
        let b = &self.b;
        let v = match &self.kind {
            LossKind::LeastSquares => 0.5 * (mu - b).norm_squared(),
            LossKind::WeightedLeastSquares { omega } => {
                let mut acc = 0.0;
                for i in 0..mu.len() {
                    let d = omega[i] * (mu[i] - b[i]);
                    acc += 0.5 * d * d;
                }
                acc
            }
            LossKind::Poisson => {
                let mut acc = 0.0;
                for i in 0..mu.len() {
                    acc += if b[i] > 0.0 { mu[i] - b[i] * mu[i].ln() } else { mu[i] };
                }
                acc
            }
            LossKind::Huber { t } => {
                let mut acc = 0.0;
                for i in 0..mu.len() {
                    let x = mu[i] - b[i];
                    let ti = t[i];
                    acc += if x.abs() <= ti { 0.5 * x * x } else { ti * (x.abs() - 0.5 * ti) };
                }
                acc
            }
        };
        Ok(v)
    }

    /// Gradient, diagonal curvature, `w = sqrt(curv)` and weighted residual
    /// `r` with `grad = W r` (and `r_i = 0` where `w_i = 0`).
    pub fn curvature_bundle(&self, mu: &DVector<f64>) -> Result<CurvatureBundle, LossError> {
        self.check_domain(mu)?;
        let n = mu.len();
        let b = &self.b;
        let mut grad = DVector::zeros(n);
        let mut curv = DVector::zeros(n);
        match &self.kind {
            LossKind::LeastSquares => {
                for i in 0..n {
                    grad[i] = mu[i] - b[i];
                    curv[i] = 1.0;
                }
            }
            LossKind::WeightedLeastSquares { omega } => {
                for i in 0..n {
                    let w2 = omega[i] * omega[i];
                    grad[i] = w2 * (mu[i] - b[i]);
                    curv[i] = w2;
                }
            }
            LossKind::Poisson => {
                for i in 0..n {
                    if b[i] > 0.0 {
                        grad[i] = 1.0 - b[i] / mu[i];
                        curv[i] = b[i] / (mu[i] * mu[i]);
                    } else {
                        grad[i] = 1.0;
                        curv[i] = 0.0;
                    }
                }
            }
            LossKind::Huber { t } => {
                for i in 0..n {
                    let x = mu[i] - b[i];
                    grad[i] = x.clamp(-t[i], t[i]);
                    curv[i] = if x.abs() <= t[i] { 1.0 } else { 0.0 };
                }
            }
        }
        let w = curv.map(f64::sqrt);
        let mut r = DVector::zeros(n);
        for i in 0..n {
            r[i] = if w[i] > 0.0 { grad[i] / w[i] } else { 0.0 };
        }
        Ok(CurvatureBundle { grad, curv, w, r })
    }
}

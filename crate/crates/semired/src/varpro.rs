//! Variable-projection machinery for unconstrained least squares.
//!
//! The reduced functional `F_r(y) = F(y, z_m(y))` with `z_m(y)` the inner
//! least-squares minimizer admits cheap reduced Jacobians: Kaufman's
//! `J_s = -P^perp J_y` and Golub-Pereyra's `K_s = J_s + M`. This module
//! implements both, the `UDU^T` block factorization, the Golub-Pereyra
//! Hessian model `H`, the exact reduced Newton Hessian for the exponential
//! model, and a dual-route iteration driver that checks the equivalence of
//! reduced and semi-reduced methods numerically.
//!
//! Everything here works on dense single-block matrices: these are
//! verification oracles and a small-problem solver, not the scalable path.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::loss::LossModel;
use crate::model::{second_order_cross, ModelError, SeparableModel, SeparableProblem};
use crate::problems::ExpSumModel;

#[derive(Debug, Error)]
pub enum VarproError {
    #[error("rank-deficient matrix in {0}")]
    RankDeficient(String),
    #[error("singular matrix in {0}")]
    Singular(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unsupported problem for varpro: {0}")]
    Unsupported(String),
    #[error("line search failed in equivalence run")]
    LineSearchFailed,
}

/// The reduced functional and its derivatives at one `y`.
#[derive(Debug, Clone)]
pub struct ReducedEval {
    pub y: DVector<f64>,
    pub z_m: DVector<f64>,
    pub f_r: f64,
    pub g_r: DVector<f64>,
    pub jac_r: Option<DMatrix<f64>>,
}

fn qr_factors(a: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DMatrix<f64>), VarproError> {
    let (q, r) = crate::blocksolve::thin_qr(a);
    let n = a.ncols();
    let max_diag = (0..n).map(|k| r[(k, k)].abs()).fold(0.0_f64, f64::max);
    if n > 0 && ((0..n).any(|k| r[(k, k)].abs() <= 1e-12 * max_diag.max(1e-300)) || max_diag == 0.0)
    {
        return Err(VarproError::RankDeficient(what.to_string()));
    }
    Ok((q, r))
}

/// Minimum-residual solution of `min |A z - b|` via thin QR.
pub fn zm_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, VarproError> {
    let (q, r) = qr_factors(a, "zm_least_squares")?;
    let mut z = q.transpose() * b;
    r.view((0, 0), (a.ncols(), a.ncols())).solve_upper_triangular_mut(&mut z);
    Ok(z)
}

/// Weighted single-block pieces shared by the reduced Jacobians: the weighted
/// matrix `Abar = W A(y)`, its QR factors, the weighted `J_y` and residual.
struct WeightedPieces {
    abar: DMatrix<f64>,
    q: DMatrix<f64>,
    r_fac: DMatrix<f64>,
    j_y: DMatrix<f64>,
    w: DVector<f64>,
    /// weighted residual `r` with `grad = W r`
    r_vec: DVector<f64>,
}

fn weighted_pieces(
    model: &(dyn SeparableModel + Send + Sync),
    loss: &LossModel,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<WeightedPieces, VarproError> {
    if model.n_blocks() != 1 {
        return Err(VarproError::Unsupported(
            "reduced Jacobians are single-block only".into(),
        ));
    }
    let a = model.dense_block(y).ok_or(ModelError::DenseUnavailable)?;
    let mu = model.apply(y, z);
    let bundle = loss.curvature_bundle(&mu).map_err(ModelError::from)?;
    let m = a.nrows();
    let mut abar = a;
    for i in 0..m {
        for c in 0..abar.ncols() {
            abar[(i, c)] *= bundle.w[i];
        }
    }
    let (q, r_fac) = qr_factors(&abar, "Abar")?;
    let mut j_y = DMatrix::zeros(m, model.n_y());
    for j in 0..model.n_y() {
        let col = model.apply_da(j, y, z).component_mul(&bundle.w);
        j_y.set_column(j, &col);
    }
    Ok(WeightedPieces { abar, q, r_fac, j_y, w: bundle.w, r_vec: bundle.r })
}

/// Kaufman's reduced Jacobian `J_s = -(I - Q Q^T) J_y` with `Q` from the QR
/// of the weighted `Abar`.
pub fn kaufman_jacobian(
    model: &(dyn SeparableModel + Send + Sync),
    loss: &LossModel,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DMatrix<f64>, VarproError> {
    let p = weighted_pieces(model, loss, y, z)?;
    Ok(-(&p.j_y - &p.q * (p.q.transpose() * &p.j_y)))
}

/// Golub-Pereyra's reduced Jacobian `K_s = J_s + M` with
/// `M_{:,j} = (Abar^+)^T (d_j Abar)^T r`, the pseudoinverse product computed
/// through the QR factors as `Q (R^-T v)`.
pub fn golub_pereyra_jacobian(
    model: &(dyn SeparableModel + Send + Sync),
    loss: &LossModel,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DMatrix<f64>, VarproError> {
    let p = weighted_pieces(model, loss, y, z)?;
    let j_s = -(&p.j_y - &p.q * (p.q.transpose() * &p.j_y));
    let wr = p.w.component_mul(&p.r_vec);
    let c = p.abar.ncols();
    let rt = p.r_fac.view((0, 0), (c, c)).transpose().clone_owned();
    let mut k_s = j_s;
    for j in 0..model.n_y() {
        let v = model.apply_dat(j, y, &wr);
        let u = rt
            .clone()
            .solve_lower_triangular(&v)
            .ok_or_else(|| VarproError::Singular("R^T in M".into()))?;
        let m_col = &p.q * u;
        for i in 0..m_col.len() {
            k_s[(i, j)] += m_col[i];
        }
    }
    Ok(k_s)
}

/// Block `UDU^T` factorization of a symmetric matrix split after `n_y` rows:
/// `X = U diag(X_s, X_zz) U^T` with `U = [[I, X_yz X_zz^-1], [0, I]]` and
/// `X_s` the Schur complement of `X_zz`. Returns `(U, X_s, X_zz)`.
pub fn udu_factor(
    x: &DMatrix<f64>,
    n_y: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), VarproError> {
    let n = x.nrows();
    let n_z = n - n_y;
    let x_yy = x.view((0, 0), (n_y, n_y)).clone_owned();
    let x_yz = x.view((0, n_y), (n_y, n_z)).clone_owned();
    let x_zy = x.view((n_y, 0), (n_z, n_y)).clone_owned();
    let x_zz = x.view((n_y, n_y), (n_z, n_z)).clone_owned();
    let lu = x_zz.clone().lu();
    // C^T = X_zz^-1 X_zy (X symmetric)
    let ct = lu
        .solve(&x_zy)
        .ok_or_else(|| VarproError::Singular("X_zz".into()))?;
    let c = ct.transpose();
    let x_s = x_yy - &x_yz * &ct;
    let mut u = DMatrix::identity(n, n);
    u.view_mut((0, n_y), (n_y, n_z)).copy_from(&c);
    Ok((u, x_s, x_zz))
}

/// Dense single-block Gauss-Newton matrix `G = J^T J` with
/// `J = [J_y | Abar]`, plus the stacked `J` itself.
fn dense_gauss_newton(p: &WeightedPieces) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = p.j_y.nrows();
    let (n_y, c) = (p.j_y.ncols(), p.abar.ncols());
    let mut j = DMatrix::zeros(m, n_y + c);
    j.view_mut((0, 0), (m, n_y)).copy_from(&p.j_y);
    j.view_mut((0, n_y), (m, c)).copy_from(&p.abar);
    let g = j.transpose() * &j;
    (g, j)
}

/// The Golub-Pereyra Hessian model `H = U Hhat U^T`: equals `G` plus the
/// second-order correction `E_yz G_zz^-1 E_zy` on the `yy` block, so the
/// Schur complement of `G_zz` in `H` is exactly `K_s^T K_s`.
pub fn gp_hessian_model(
    model: &(dyn SeparableModel + Send + Sync),
    loss: &LossModel,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DMatrix<f64>, VarproError> {
    let p = weighted_pieces(model, loss, y, z)?;
    let (g, _) = dense_gauss_newton(&p);
    let n_y = model.n_y();
    let n_z = model.n_z();
    let wr = p.w.component_mul(&p.r_vec);
    let e_zy = second_order_cross(model, y, &wr);
    let g_zz = g.view((n_y, n_y), (n_z, n_z)).clone_owned();
    let sol = g_zz
        .lu()
        .solve(&e_zy)
        .ok_or_else(|| VarproError::Singular("G_zz".into()))?;
    let corr = e_zy.transpose() * sol;
    let mut h = g;
    for i in 0..n_y {
        for j in 0..n_y {
            h[(i, j)] += corr[(i, j)];
        }
    }
    Ok(h)
}

/// The exact reduced Newton Hessian `nabla^2 F_r(y)` for the exponential
/// least-squares model: the Schur complement of the `zz` block of the exact
/// full Hessian, evaluated at `(y, z_m(y))`.
pub fn reduced_newton_hessian(
    model: &ExpSumModel,
    b: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DMatrix<f64>, VarproError> {
    let a = model.dense_block(y).ok_or(ModelError::DenseUnavailable)?;
    let m = model.rows_per_block();
    let c = model.cols_per_block();
    let n = model.n_blocks();
    let mut z_m = DVector::zeros(c * n);
    for k in 0..n {
        let bk = DVector::from(b.rows(k * m, m));
        let zk = zm_least_squares(&a, &bk)?;
        z_m.rows_mut(k * c, c).copy_from(&zk);
    }
    let residual = model.apply(y, &z_m) - b;
    let h = model.ls_hessian(y, &z_m, &residual);
    let n_y = model.n_y();
    let (_, h_s, _) = udu_factor(&h, n_y)?;
    Ok(h_s)
}

/// Which Hessian model the equivalence runs use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianModel {
    GaussNewton,
    GolubPereyra,
}

/// Which algebraic route generates the iterates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EquivalenceMode {
    /// Line search on `F_r` with `B_r = J_r^T J_r` from the reduced Jacobian.
    Reduced,
    /// Simplified semi-reduced: full dense `G` (or `H`) at `(y, z_m(y))`,
    /// `dy` from the Schur complement, exact inner solve at each trial.
    SemiReducedSimplified,
}

/// Evaluates `F_r` and its gradient at `y` (weighted least squares only).
pub fn reduced_eval(
    problem: &SeparableProblem,
    y: &DVector<f64>,
) -> Result<ReducedEval, VarproError> {
    let model = problem.model.as_ref();
    if model.n_blocks() != 1 {
        return Err(VarproError::Unsupported("single-block only".into()));
    }
    let w = problem
        .loss
        .quadratic_weights()
        .ok_or_else(|| VarproError::Unsupported("quadratic loss required".into()))?;
    let a = model.dense_block(y).ok_or(ModelError::DenseUnavailable)?;
    let mut abar = a;
    for i in 0..abar.nrows() {
        for c in 0..abar.ncols() {
            abar[(i, c)] *= w[i];
        }
    }
    let bbar = w.component_mul(problem.loss.data());
    let z_m = zm_least_squares(&abar, &bbar)?;
    let r = &abar * &z_m - &bbar;
    let f_r = 0.5 * r.norm_squared();
    let g_r = DVector::from_fn(model.n_y(), |j, _| {
        model.apply_da(j, y, &z_m).component_mul(&w).dot(&r)
    });
    Ok(ReducedEval { y: y.clone(), z_m, f_r, g_r, jac_r: None })
}

fn backtrack(
    problem: &SeparableProblem,
    y: &DVector<f64>,
    dy: &DVector<f64>,
    f0: f64,
    g_dot_dy: f64,
) -> Result<DVector<f64>, VarproError> {
    let (delta, alpha) = (1e-4, 0.2_f64);
    for j in 0..=60 {
        let s = alpha.powi(j);
        let y_t = y + dy * s;
        if let Ok(ev) = reduced_eval(problem, &y_t) {
            // The roundoff slack keeps the search from failing once the
            // iterates have stagnated at machine precision, where the
            // predicted decrease is smaller than rounding error in f.
            let slack = 4.0 * f64::EPSILON * f0.abs();
            if ev.f_r - f0 <= delta * s * g_dot_dy + slack {
                return Ok(y_t);
            }
        }
    }
    Err(VarproError::LineSearchFailed)
}

/// Runs `n_iter` undamped line-search iterations from `y0` along one of the
/// two routes and returns the `y` iterates (including `y0`). With exact inner
/// solves and matching Hessian models, the two routes produce the same
/// sequence; this driver makes that claim executable.
pub fn equivalence_run(
    problem: &SeparableProblem,
    y0: &DVector<f64>,
    mode: EquivalenceMode,
    hessian: HessianModel,
    n_iter: usize,
) -> Result<Vec<DVector<f64>>, VarproError> {
    let model = problem.model.as_ref();
    let n_y = model.n_y();
    let mut y = y0.clone();
    let mut iterates = vec![y.clone()];
    for _ in 0..n_iter {
        let ev = reduced_eval(problem, &y)?;
        let dy = match mode {
            EquivalenceMode::Reduced => {
                let jr = match hessian {
                    HessianModel::GaussNewton => {
                        kaufman_jacobian(model, &problem.loss, &y, &ev.z_m)?
                    }
                    HessianModel::GolubPereyra => {
                        golub_pereyra_jacobian(model, &problem.loss, &y, &ev.z_m)?
                    }
                };
                let b_r = jr.transpose() * &jr;
                b_r.lu()
                    .solve(&(-&ev.g_r))
                    .ok_or_else(|| VarproError::Singular("B_r".into()))?
            }
            EquivalenceMode::SemiReducedSimplified => {
                let b = match hessian {
                    HessianModel::GaussNewton => {
                        let p = weighted_pieces(model, &problem.loss, &y, &ev.z_m)?;
                        dense_gauss_newton(&p).0
                    }
                    HessianModel::GolubPereyra => {
                        gp_hessian_model(model, &problem.loss, &y, &ev.z_m)?
                    }
                };
                let (_, b_s, _) = udu_factor(&b, n_y)?;
                b_s.lu()
                    .solve(&(-&ev.g_r))
                    .ok_or_else(|| VarproError::Singular("B_s".into()))?
            }
        };
        y = backtrack(problem, &y, &dy, ev.f_r, ev.g_r.dot(&dy))?;
        iterates.push(y.clone());
    }
    Ok(iterates)
}

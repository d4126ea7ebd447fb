//! The separable forward map `A(y) z`, its derivatives, and objective
//! assembly.
//!
//! Models are exposed through the [`SeparableModel`] trait as operator
//! products only; dense single-block matrices are optional and needed only by
//! the QR-based linear solvers and the variable-projection oracles. With
//! `n_blocks > 1` the operator acts as `I_n (x) A(y)` on a stacked `z`: every
//! measurement block shares the same `A(y)` but owns its own coefficient
//! block.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::loss::{CurvatureBundle, LossError, LossModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("model does not expose a dense block; use the operator path")]
    DenseUnavailable,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// The map `(y, z) -> A(y) z` with per-parameter derivative operators.
///
/// Implementations must be linear in `z` at fixed `y`, adjoint-consistent
/// (`<apply(y,z), v> = <z, apply_at(y,v)>`), and block-structured: with
/// `n_blocks` measurement vectors, block `k` of the output depends only on
/// block `k` of `z`.
pub trait SeparableModel {
    /// Number of nonlinear parameters.
    fn n_y(&self) -> usize;
    /// Number of measurement blocks `n`.
    fn n_blocks(&self) -> usize;
    /// Linear parameters per block (`c`); total `n_z = c * n_blocks`.
    fn cols_per_block(&self) -> usize;
    /// Output rows per block (`m`); total output length `m * n_blocks`.
    fn rows_per_block(&self) -> usize;

    fn n_z(&self) -> usize {
        self.cols_per_block() * self.n_blocks()
    }
    fn output_len(&self) -> usize {
        self.rows_per_block() * self.n_blocks()
    }

    /// `A(y) z`.
    fn apply(&self, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64>;
    /// `(d A / d y_j) z`.
    fn apply_da(&self, j: usize, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64>;
    /// `A(y)^T v`.
    fn apply_at(&self, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
    /// `(d A / d y_j)^T v`.
    fn apply_dat(&self, j: usize, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    /// Dense matrix of one block `A(y)`, when the model can afford it.
    fn dense_block(&self, _y: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Objective value and gradients of `F(y, z) = L(A(y) z)` at one point.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub f: f64,
    pub g_y: DVector<f64>,
    pub g_z: DVector<f64>,
    pub bundle: CurvatureBundle,
}

impl ObjectiveEval {
    /// Stacked gradient `[g_y; g_z]`.
    pub fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.g_y.len() + self.g_z.len());
        g.rows_mut(0, self.g_y.len()).copy_from(&self.g_y);
        g.rows_mut(self.g_y.len(), self.g_z.len()).copy_from(&self.g_z);
        g
    }
}

/// Weighted Gauss-Newton Jacobian blocks: `J_y` dense, `J_z` as a list of
/// per-block dense `m x c` matrices (never materialized as one sparse matrix).
#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    pub j_y: DMatrix<f64>,
    pub j_z_blocks: Vec<DMatrix<f64>>,
}

/// A model paired with a loss: the objective `F(y, z) = L(A(y) z)`.
#[derive(Clone)]
pub struct SeparableProblem {
    pub model: Arc<dyn SeparableModel + Send + Sync>,
    pub loss: LossModel,
}

impl SeparableProblem {
    pub fn new(model: Arc<dyn SeparableModel + Send + Sync>, loss: LossModel) -> Self {
        Self { model, loss }
    }

    pub fn n_y(&self) -> usize {
        self.model.n_y()
    }

    pub fn n_z(&self) -> usize {
        self.model.n_z()
    }

    pub fn dim(&self) -> usize {
        self.n_y() + self.n_z()
    }

    /// Splits a stacked `x = [y; z]` into its two views.
    pub fn split<'a>(&self, x: &'a DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let _ = x.rows(0, 0); // length check happens below
        let n_y = self.n_y();
        (
            DVector::from(x.rows(0, n_y)),
            DVector::from(x.rows(n_y, self.n_z())),
        )
    }

    pub fn objective_at(&self, x: &DVector<f64>) -> Result<ObjectiveEval, ModelError> {
        let (y, z) = self.split(x);
        objective(self.model.as_ref(), &self.loss, &y, &z)
    }
}

/// Evaluates `F(y, z) = L(A(y) z)` with gradients via adjoint products.
pub fn objective(
    model: &(impl SeparableModel + ?Sized),
    loss: &LossModel,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<ObjectiveEval, ModelError> {
    if y.len() != model.n_y() || z.len() != model.n_z() {
        return Err(ModelError::DimensionMismatch(format!(
            "y: {} (want {}), z: {} (want {})",
            y.len(),
            model.n_y(),
            z.len(),
            model.n_z()
        )));
    }
    let mu = model.apply(y, z);
    let f = loss.value(&mu)?;
    let bundle = loss.curvature_bundle(&mu)?;
    let g_y = DVector::from_fn(model.n_y(), |j, _| model.apply_da(j, y, z).dot(&bundle.grad));
    let g_z = model.apply_at(y, &bundle.grad);
    Ok(ObjectiveEval { f, g_y, g_z, bundle })
}

/// Assembles the weighted Jacobian blocks at `(y, z)` with loss weights `w`:
/// column `j` of `J_y` is `w .* (dA/dy_j) z`, and diagonal block `k` of `J_z`
/// is `diag(w_k) A(y)`. Requires the dense block.
pub fn jacobian_blocks(
    model: &(impl SeparableModel + ?Sized),
    y: &DVector<f64>,
    z: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<JacobianBlocks, ModelError> {
    if w.len() != model.output_len() {
        return Err(ModelError::DimensionMismatch(format!(
            "w: {} (want {})",
            w.len(),
            model.output_len()
        )));
    }
    let a = model.dense_block(y).ok_or(ModelError::DenseUnavailable)?;
    let m = model.rows_per_block();
    let mut j_y = DMatrix::zeros(model.output_len(), model.n_y());
    for j in 0..model.n_y() {
        let col = model.apply_da(j, y, z);
        for i in 0..model.output_len() {
            j_y[(i, j)] = w[i] * col[i];
        }
    }
    let mut j_z_blocks = Vec::with_capacity(model.n_blocks());
    for k in 0..model.n_blocks() {
        let mut block = a.clone();
        for i in 0..m {
            let wi = w[k * m + i];
            for c in 0..block.ncols() {
                block[(i, c)] *= wi;
            }
        }
        j_z_blocks.push(block);
    }
    Ok(JacobianBlocks { j_y, j_z_blocks })
}

/// The residual cross term `E_zy`: column `j` equals `(dA/dy_j)^T grad`.
pub fn second_order_cross(
    model: &(impl SeparableModel + ?Sized),
    y: &DVector<f64>,
    grad: &DVector<f64>,
) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(model.n_z(), model.n_y());
    for j in 0..model.n_y() {
        e.set_column(j, &model.apply_dat(j, y, grad));
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::ExpSumModel;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exp_model(m: usize, c: usize, n_blocks: usize) -> ExpSumModel {
        let t = DVector::from_fn(m, |i, _| 5.0 * i as f64 / (m.max(2) - 1) as f64);
        ExpSumModel::new(t, c, n_blocks)
    }

    #[test]
    fn objective_zero_z() {
        let model = exp_model(5, 2, 1);
        let b = DVector::from_fn(5, |i, _| 1.0 + i as f64);
        let loss = LossModel::least_squares(b.clone());
        let eval =
            objective(&model, &loss, &DVector::from_column_slice(&[1.0, 2.0]), &DVector::zeros(2))
                .unwrap();
        assert_relative_eq!(eval.f, 0.5 * b.norm_squared(), epsilon = 1e-14);
        assert_abs_diff_eq!(eval.g_y.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = exp_model(5, 2, 1);
        let b = DVector::from_fn(5, |_, _| rng.random_range(1.0..5.0));
        let loss = LossModel::least_squares(b);
        for _ in 0..10 {
            let y = DVector::from_fn(2, |_, _| rng.random_range(0.3..3.0));
            let z = DVector::from_fn(2, |_, _| rng.random_range(0.5..4.0));
            let eval = objective(&model, &loss, &y, &z).unwrap();
            for j in 0..2 {
                let h = 1e-6 * (1.0 + y[j].abs());
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += h;
                ym[j] -= h;
                let fd = (objective(&model, &loss, &yp, &z).unwrap().f
                    - objective(&model, &loss, &ym, &z).unwrap().f)
                    / (2.0 * h);
                assert_relative_eq!(fd, eval.g_y[j], max_relative = 1e-5, epsilon = 1e-9);
            }
            for k in 0..2 {
                let h = 1e-6 * (1.0 + z[k].abs());
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += h;
                zm[k] -= h;
                let fd = (objective(&model, &loss, &y, &zp).unwrap().f
                    - objective(&model, &loss, &y, &zm).unwrap().f)
                    / (2.0 * h);
                assert_relative_eq!(fd, eval.g_z[k], max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn jacobian_j_z_all_ones_at_zero_rates() {
        let model = exp_model(4, 1, 1);
        let y = DVector::zeros(1);
        let z = DVector::from_element(1, 1.0);
        let w = DVector::from_element(4, 1.0);
        let blocks = jacobian_blocks(&model, &y, &z, &w).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(blocks.j_z_blocks[0][(i, 0)], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn jacobian_j_y_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = exp_model(6, 2, 2);
        let y = DVector::from_column_slice(&[0.8, 2.1]);
        let z = DVector::from_fn(4, |_, _| rng.random_range(0.5..3.0));
        let w = DVector::from_element(12, 1.0);
        let blocks = jacobian_blocks(&model, &y, &z, &w).unwrap();
        for j in 0..2 {
            let h = 1e-6;
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[j] += h;
            ym[j] -= h;
            let fd = (model.apply(&yp, &z) - model.apply(&ym, &z)) / (2.0 * h);
            for i in 0..12 {
                assert_relative_eq!(fd[i], blocks.j_y[(i, j)], max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn adjoint_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = exp_model(7, 3, 2);
        for _ in 0..20 {
            let y = DVector::from_fn(3, |_, _| rng.random_range(0.2..3.0));
            let z1 = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            let z2 = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
            let v = DVector::from_fn(14, |_, _| rng.random_range(-1.0..1.0));
            // linearity in z
            let lhs = model.apply(&y, &(&z1 * 2.0 + &z2 * -0.5));
            let rhs = model.apply(&y, &z1) * 2.0 - model.apply(&y, &z2) * 0.5;
            assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-12);
            // adjoint consistency
            let ip1 = model.apply(&y, &z1).dot(&v);
            let ip2 = z1.dot(&model.apply_at(&y, &v));
            assert_relative_eq!(ip1, ip2, max_relative = 1e-12, epsilon = 1e-12);
            for j in 0..3 {
                let ip1 = model.apply_da(j, &y, &z1).dot(&v);
                let ip2 = z1.dot(&model.apply_dat(j, &y, &v));
                assert_relative_eq!(ip1, ip2, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn second_order_cross_zero_grad() {
        let model = exp_model(5, 2, 1);
        let e = second_order_cross(&model, &DVector::from_column_slice(&[1.0, 2.0]), &DVector::zeros(5));
        assert_eq!(e.norm(), 0.0);
    }

    #[test]
    fn second_order_cross_single_exponential() {
        // A(y) = exp(-y t): E_zy column is -t .* exp(-y t) dotted with grad.
        let t = DVector::from_column_slice(&[0.5, 1.0, 2.0]);
        let model = ExpSumModel::new(t.clone(), 1, 1);
        let y = DVector::from_element(1, 0.7);
        let grad = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let e = second_order_cross(&model, &y, &grad);
        let expect: f64 = (0..3).map(|i| -t[i] * (-0.7 * t[i]).exp() * grad[i]).sum();
        assert_relative_eq!(e[(0, 0)], expect, max_relative = 1e-12);
    }

    #[test]
    fn second_order_cross_matches_gz_derivative_in_y() {
        // At LS stationarity in z, d g_z / d y_j = J_z^T dmu/dy_j + E_zy col j.
        // Check the general identity d g_z / d y_j = A^T d(grad)/dy_j + (dA/dy_j)^T grad.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = exp_model(6, 2, 1);
        let b = DVector::from_fn(6, |_, _| rng.random_range(1.0..4.0));
        let loss = LossModel::least_squares(b);
        let y = DVector::from_column_slice(&[0.9, 1.7]);
        let z = DVector::from_column_slice(&[1.3, 0.7]);
        let eval = objective(&model, &loss, &y, &z).unwrap();
        let e = second_order_cross(&model, &y, &eval.bundle.grad);
        for j in 0..2 {
            let h = 1e-6;
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[j] += h;
            ym[j] -= h;
            let fd = (objective(&model, &loss, &yp, &z).unwrap().g_z
                - objective(&model, &loss, &ym, &z).unwrap().g_z)
                / (2.0 * h);
            // subtract the Gauss-Newton part A^T d(grad)/dy_j = A^T (dA/dy_j) z for LS
            let gn = model.apply_at(&y, &model.apply_da(j, &y, &z));
            for k in 0..2 {
                assert_relative_eq!(fd[k] - gn[k], e[(k, j)], max_relative = 1e-4, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn kronecker_block_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = exp_model(5, 2, 3);
        let b = DVector::from_fn(15, |_, _| rng.random_range(1.0..5.0));
        let loss = LossModel::least_squares(b.clone());
        let y = DVector::from_column_slice(&[0.6, 1.4]);
        let z = DVector::from_fn(6, |_, _| rng.random_range(0.5..2.0));
        let f0 = objective(&model, &loss, &y, &z).unwrap().f;
        // swap blocks 0 and 2 of both z and the data
        let mut z2 = z.clone();
        let mut b2 = b.clone();
        for c in 0..2 {
            z2.swap_rows(c, 4 + c);
        }
        for i in 0..5 {
            b2.swap_rows(i, 10 + i);
        }
        let loss2 = LossModel::least_squares(b2);
        let f1 = objective(&model, &loss2, &y, &z2).unwrap().f;
        assert_relative_eq!(f0, f1, max_relative = 1e-14);
    }

    #[test]
    fn gauss_newton_products_match_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = exp_model(8, 2, 3);
        let y = DVector::from_column_slice(&[0.5, 1.8]);
        let z = DVector::from_fn(6, |_, _| rng.random_range(0.5..2.0));
        let w = DVector::from_fn(24, |_, _| rng.random_range(0.5..1.5));
        let blocks = jacobian_blocks(&model, &y, &z, &w).unwrap();
        // dense stacked J
        let (rows, n_y, c, n) = (24, 2, 2, 3);
        let mut j = DMatrix::zeros(rows, n_y + c * n);
        j.view_mut((0, 0), (rows, n_y)).copy_from(&blocks.j_y);
        for k in 0..n {
            j.view_mut((k * 8, n_y + k * c), (8, c)).copy_from(&blocks.j_z_blocks[k]);
        }
        let dense = j.transpose() * &j;
        // blockwise products
        let jyty = blocks.j_y.transpose() * &blocks.j_y;
        assert_relative_eq!(
            (&dense.view((0, 0), (n_y, n_y)) - &jyty).norm(),
            0.0,
            epsilon = 1e-12 * dense.norm()
        );
        for k in 0..n {
            let jytz = blocks.j_y.rows(k * 8, 8).transpose() * &blocks.j_z_blocks[k];
            assert_relative_eq!(
                (&dense.view((0, n_y + k * c), (n_y, c)) - &jytz).norm(),
                0.0,
                epsilon = 1e-12 * dense.norm()
            );
            let jztz = blocks.j_z_blocks[k].transpose() * &blocks.j_z_blocks[k];
            assert_relative_eq!(
                (&dense.view((n_y + k * c, n_y + k * c), (c, c)) - &jztz).norm(),
                0.0,
                epsilon = 1e-12 * dense.norm()
            );
        }
    }
}

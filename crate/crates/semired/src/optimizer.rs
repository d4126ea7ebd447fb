//! The damped projected Newton-type method with block trial-point adjustment.
//!
//! One iteration: evaluate the objective, split variables into an active set
//! (pressed against a bound by the gradient) and its complement, solve the
//! damped Gauss-Newton system on the inactive block with the configured
//! linear solver, take a projected backtracking line search along that
//! direction, optionally improving the `z` coordinates of every trial point
//! by a few inner iterations at fixed `y`, and finally update the damping
//! from the ratio of actual to model decrease.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocksolve::{
    cg, solve_block_qr, solve_block_qr_blockdiag, solve_full_qr, solve_mixed_cg_direct,
    BlockHessianOperator, BlockNormalSystem, BlockSolveError,
};
use crate::model::{jacobian_blocks, ModelError, ObjectiveEval, SeparableModel, SeparableProblem};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] BlockSolveError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Componentwise box `lo <= x <= up`, with infinite entries allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundBox {
    pub lo: DVector<f64>,
    pub up: DVector<f64>,
}

impl BoundBox {
    pub fn new(lo: DVector<f64>, up: DVector<f64>) -> Result<Self, OptimizerError> {
        if lo.len() != up.len() {
            return Err(OptimizerError::InvalidConfig(format!(
                "bound lengths differ: {} vs {}",
                lo.len(),
                up.len()
            )));
        }
        for i in 0..lo.len() {
            if !(lo[i] <= up[i]) {
                return Err(OptimizerError::InvalidConfig(format!(
                    "lo[{i}] = {} > up[{i}] = {}",
                    lo[i], up[i]
                )));
            }
        }
        Ok(Self { lo, up })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lo: DVector::from_element(n, f64::NEG_INFINITY),
            up: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.len() == 0
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (0..x.len()).all(|i| self.lo[i] <= x[i] && x[i] <= self.up[i])
    }

    /// Sub-box over a contiguous index range.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            lo: DVector::from(self.lo.rows(start, len)),
            up: DVector::from(self.up.rows(start, len)),
        }
    }
}

/// Componentwise projection `median(lo_i, x_i, up_i)`.
pub fn project(x: &DVector<f64>, bx: &BoundBox) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].max(bx.lo[i]).min(bx.up[i]))
}

/// The active set at `(x, g)` with band width `eps`: component `i` is active
/// iff the gradient pushes it into a nearby bound, i.e.
/// `(g_i > 0 and x_i <= lo_i + eps)` or `(g_i < 0 and x_i >= up_i - eps)`.
/// Components pinned by `lo_i = up_i` are always active.
pub fn active_set(x: &DVector<f64>, g: &DVector<f64>, bx: &BoundBox, eps: f64) -> Vec<bool> {
    (0..x.len())
        .map(|i| {
            bx.lo[i] == bx.up[i]
                || (g[i] > 0.0 && x[i] <= bx.lo[i] + eps)
                || (g[i] < 0.0 && x[i] >= bx.up[i] - eps)
        })
        .collect()
}

/// Which route solves the damped Gauss-Newton system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSolver {
    FullQr,
    BlockQr,
    BlockdiagQr,
    MixedCgDirect,
    FullCg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Armijo constant, in (0, 1/2).
    pub delta: f64,
    /// Backtracking ratio, in (0, 1).
    pub alpha: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Step-quality threshold above which damping is halved.
    pub rho_good: f64,
    /// Step-quality threshold below which damping is increased tenfold.
    pub rho_bad: f64,
    /// Active-set band seed.
    pub epsilon0: f64,
    /// Projected-gradient stopping tolerance; `None` selects
    /// `max(2.2e-15, pg0 / 1e8)` from the starting point.
    pub tau: Option<f64>,
    pub k_max_outer: usize,
    /// Inner adjustment iteration cap; 0 disables trial-point adjustment.
    pub adjust_k_max: usize,
    /// Inner stopping tolerance; `None` selects the same self-scaling
    /// rule as the outer `tau`, from the inner starting point.
    pub adjust_tau: Option<f64>,
    pub linear_solver: LinearSolver,
    pub lambda0: f64,
    /// Backtracking cap per line search.
    pub j_max: usize,
    pub cg_tol: f64,
    pub cg_max: usize,
    /// Diagonal preconditioner value on the `y` coordinates for the full-CG
    /// route (the `z` coordinates get 1).
    pub full_cg_precond_y: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            delta: 1e-4,
            alpha: 0.2,
            lambda_min: 1e-20,
            lambda_max: 1e20,
            rho_good: 0.7,
            rho_bad: 0.01,
            epsilon0: 2.2e-14,
            tau: None,
            k_max_outer: 200,
            adjust_k_max: 0,
            adjust_tau: None,
            linear_solver: LinearSolver::FullQr,
            lambda0: 1e-3,
            j_max: 60,
            cg_tol: 1e-6,
            cg_max: 40,
            full_cg_precond_y: 1e5,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |msg: String| Err(OptimizerError::InvalidConfig(msg));
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return bad(format!("delta must lie in (0, 1/2), got {}", self.delta));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(0.0 <= self.lambda_min && self.lambda_min <= self.lambda_max) {
            return bad(format!(
                "need 0 <= lambda_min <= lambda_max, got {} and {}",
                self.lambda_min, self.lambda_max
            ));
        }
        if !(0.0 <= self.rho_bad && self.rho_bad < self.rho_good && self.rho_good <= 1.0) {
            return bad(format!(
                "need 0 <= rho_bad < rho_good <= 1, got {} and {}",
                self.rho_bad, self.rho_good
            ));
        }
        if self.epsilon0 < 0.0 {
            return bad(format!("epsilon0 must be >= 0, got {}", self.epsilon0));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    IterationCap,
    LineSearchFailure,
}

/// One row of the run trace. `f` and `proj_grad_norm` describe the iterate at
/// the start of iteration `k`; the remaining fields describe the step taken
/// from it. The terminal record carries the final point with zeroed step
/// fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub k: usize,
    pub f: f64,
    pub proj_grad_norm: f64,
    pub lambda: f64,
    pub step_exponent: usize,
    pub n_backtracks: usize,
    pub n_inner_adjust_iters: usize,
    pub cpu_time_ms: f64,
    pub active_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<IterRecord>,
    pub status: RunStatus,
    pub tau: f64,
}

impl RunTrace {
    pub fn final_f(&self) -> f64 {
        self.records.last().map(|r| r.f).unwrap_or(f64::NAN)
    }

    /// Accepted outer steps (the terminal record is excluded).
    pub fn n_steps(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

/// `|P(x - g) - x|`, the stationarity measure used for stopping.
pub fn projected_gradient_norm(x: &DVector<f64>, g: &DVector<f64>, bx: &BoundBox) -> f64 {
    // Componentwise form of |P(x - g) - x|: -g_i where x_i - g_i stays
    // interior, distance to the bound where it clips. Algebraically identical
    // to projecting x - g and subtracting x, but immune to the rounding that
    // swallows a gradient smaller than the ulp of the iterate.
    DVector::from_fn(x.len(), |i, _| {
        let t = x[i] - g[i];
        if t < bx.lo[i] {
            bx.lo[i] - x[i]
        } else if t > bx.up[i] {
            bx.up[i] - x[i]
        } else {
            -g[i]
        }
    })
    .norm()
}

/// The adjusted-trial sufficient-decrease test: accepts iff
/// `f_adj_trial - f_old <= delta * (g_I . (step dx_I) + g_A . (x_trial - x)_A)`,
/// with the inactive term using the unprojected scaled step and the active
/// term the projected displacement.
#[allow(clippy::too_many_arguments)]
pub fn armijo_accept(
    f_old: f64,
    f_adj_trial: f64,
    g: &DVector<f64>,
    x: &DVector<f64>,
    x_trial: &DVector<f64>,
    dx: &DVector<f64>,
    active: &[bool],
    delta: f64,
    step: f64,
) -> bool {
    let mut rhs = 0.0;
    for i in 0..x.len() {
        if active[i] {
            rhs += g[i] * (x_trial[i] - x[i]);
        } else {
            rhs += g[i] * step * dx[i];
        }
    }
    f_adj_trial - f_old <= delta * rhs
}

/// Shared state captured by the operator closures.
struct OpData {
    y: DVector<f64>,
    w: DVector<f64>,
    curv: DVector<f64>,
    free_y: Vec<usize>,
    /// Free z indices, block-local layout preserved (global z index).
    free_z: Vec<usize>,
    /// Dense weighted `J_y` restricted to the free y columns.
    jy_free: DMatrix<f64>,
    n_z_total: usize,
    lambda: f64,
}

impl OpData {
    fn embed_z(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::zeros(self.n_z_total);
        for (slot, &idx) in self.free_z.iter().enumerate() {
            full[idx] = v[slot];
        }
        full
    }

    fn restrict_z(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.free_z.len(), |slot, _| v[self.free_z[slot]])
    }
}

fn hessian_operator<'a>(
    model: &'a (dyn SeparableModel + Send + Sync),
    data: Arc<OpData>,
) -> BlockHessianOperator<'a> {
    let d1 = Arc::clone(&data);
    let d2 = Arc::clone(&data);
    let d3 = Arc::clone(&data);
    let d4 = Arc::clone(&data);
    BlockHessianOperator {
        n_y: data.free_y.len(),
        n_z: data.free_z.len(),
        byy: Box::new(move |v| {
            d1.jy_free.transpose() * (&d1.jy_free * v) + v * d1.lambda
        }),
        byz: Box::new(move |v| {
            let full = d2.embed_z(v);
            let u = model.apply(&d2.y, &full).component_mul(&d2.w);
            d2.jy_free.transpose() * u
        }),
        bzy: Box::new(move |v| {
            let u = (&d3.jy_free * v).component_mul(&d3.w);
            d3.restrict_z(&model.apply_at(&d3.y, &u))
        }),
        bzz: Box::new(move |v| {
            let full = d4.embed_z(v);
            let u = model.apply(&d4.y, &full).component_mul(&d4.curv);
            d4.restrict_z(&model.apply_at(&d4.y, &u)) + v * d4.lambda
        }),
    }
}

/// Solves the inactive-block damped Gauss-Newton system with the configured
/// route and fills `dx_A = -g_A` on the active components. Returns the full
/// direction and the number of inner CG iterations spent.
pub fn search_direction(
    problem: &SeparableProblem,
    eval: &ObjectiveEval,
    x: &DVector<f64>,
    active: &[bool],
    lambda: f64,
    cfg: &OptimizerConfig,
) -> Result<(DVector<f64>, usize), OptimizerError> {
    let model = problem.model.as_ref();
    let n_y = model.n_y();
    let n_z = model.n_z();
    let c = model.cols_per_block();
    let g = eval.gradient();

    let mut dx = DVector::zeros(n_y + n_z);
    for i in 0..n_y + n_z {
        if active[i] {
            dx[i] = -g[i];
        }
    }
    let free_y: Vec<usize> = (0..n_y).filter(|&j| !active[j]).collect();
    let free_z: Vec<usize> = (0..n_z).filter(|&i| !active[n_y + i]).collect();
    if free_y.is_empty() && free_z.is_empty() {
        return Ok((dx, 0));
    }
    let (y, z) = problem.split(x);

    let mut cg_iters = 0usize;
    let (dy, dz) = match cfg.linear_solver {
        LinearSolver::FullQr | LinearSolver::BlockQr | LinearSolver::BlockdiagQr => {
            let blocks = jacobian_blocks(model, &y, &z, &eval.bundle.w)?;
            let jy_free = DMatrix::from_fn(model.output_len(), free_y.len(), |i, slot| {
                blocks.j_y[(i, free_y[slot])]
            });
            let jz_free: Vec<DMatrix<f64>> = (0..model.n_blocks())
                .map(|k| {
                    let cols: Vec<usize> =
                        (0..c).filter(|&cc| !active[n_y + k * c + cc]).collect();
                    DMatrix::from_fn(model.rows_per_block(), cols.len(), |i, slot| {
                        blocks.j_z_blocks[k][(i, cols[slot])]
                    })
                })
                .collect();
            // Gradient components on zero-curvature rows are invisible to the
            // least-squares model (their Jacobian rows are scaled to zero), so
            // J^T r alone is not the gradient there. Route the missing part
            // through explicit damping rows carrying a residual offset: with
            // half the damping embedded as data rows [sqrt(l/2) I | e/sqrt(l/2)]
            // and the other half applied by the solver, the solved normal
            // equations are (J^T J + lambda I) dx = -(J^T r + e) = -g exactly.
            let masked = DVector::from_fn(model.output_len(), |i, _| {
                if eval.bundle.w[i] == 0.0 { eval.bundle.grad[i] } else { 0.0 }
            });
            if masked.iter().all(|&v| v == 0.0) {
                let sys = BlockNormalSystem {
                    j_y: jy_free,
                    j_z_blocks: jz_free,
                    r: eval.bundle.r.clone(),
                    lambda,
                };
                match cfg.linear_solver {
                    LinearSolver::FullQr => solve_full_qr(&sys)?,
                    LinearSolver::BlockQr if model.n_blocks() == 1 => solve_block_qr(&sys)?,
                    _ => solve_block_qr_blockdiag(&sys)?,
                }
            } else {
                if lambda <= 0.0 {
                    return Err(OptimizerError::Solver(BlockSolveError::SingularSystem(
                        "zero damping with zero-curvature gradient components".into(),
                    )));
                }
                let sh = (0.5 * lambda).sqrt();
                let m = model.rows_per_block();
                let n_fy = free_y.len();
                let e_z_full = model.apply_at(&y, &masked);
                let e_y: Vec<f64> =
                    free_y.iter().map(|&j| model.apply_da(j, &y, &z).dot(&masked)).collect();
                let free_z_cols: Vec<Vec<usize>> = (0..model.n_blocks())
                    .map(|k| (0..c).filter(|&cc| !active[n_y + k * c + cc]).collect())
                    .collect();
                let rows_total: usize =
                    free_z_cols.iter().map(|cols| m + cols.len()).sum::<usize>() + n_fy;
                let mut jy_big = DMatrix::zeros(rows_total, n_fy);
                let mut r_big = DVector::zeros(rows_total);
                let mut blocks_big = Vec::with_capacity(model.n_blocks() + 1);
                let mut row = 0;
                for (k, cols) in free_z_cols.iter().enumerate() {
                    let ck = cols.len();
                    let mut blk = DMatrix::zeros(m + ck, ck);
                    blk.view_mut((0, 0), (m, ck)).copy_from(&jz_free[k]);
                    jy_big.view_mut((row, 0), (m, n_fy)).copy_from(&jy_free.rows(k * m, m));
                    for i in 0..m {
                        r_big[row + i] = eval.bundle.r[k * m + i];
                    }
                    for (slot, &cc) in cols.iter().enumerate() {
                        blk[(m + slot, slot)] = sh;
                        r_big[row + m + slot] = e_z_full[k * c + cc] / sh;
                    }
                    blocks_big.push(blk);
                    row += m + ck;
                }
                for (slot, &ey) in e_y.iter().enumerate() {
                    jy_big[(row + slot, slot)] = sh;
                    r_big[row + slot] = ey / sh;
                }
                blocks_big.push(DMatrix::zeros(n_fy, 0));
                let sys = BlockNormalSystem {
                    j_y: jy_big,
                    j_z_blocks: blocks_big,
                    r: r_big,
                    lambda: 0.5 * lambda,
                };
                match cfg.linear_solver {
                    LinearSolver::FullQr => solve_full_qr(&sys)?,
                    _ => solve_block_qr_blockdiag(&sys)?,
                }
            }
        }
        LinearSolver::MixedCgDirect | LinearSolver::FullCg => {
            let jy_free = {
                let mut m = DMatrix::zeros(model.output_len(), free_y.len());
                for (slot, &j) in free_y.iter().enumerate() {
                    let col = model.apply_da(j, &y, &z).component_mul(&eval.bundle.w);
                    m.set_column(slot, &col);
                }
                m
            };
            let data = Arc::new(OpData {
                y: y.clone(),
                w: eval.bundle.w.clone(),
                curv: eval.bundle.curv.clone(),
                free_y: free_y.clone(),
                free_z: free_z.clone(),
                jy_free,
                n_z_total: n_z,
                lambda,
            });
            let op = hessian_operator(problem.model.as_ref(), data);
            let g_yf = DVector::from_fn(free_y.len(), |slot, _| g[free_y[slot]]);
            let g_zf = DVector::from_fn(free_z.len(), |slot, _| g[n_y + free_z[slot]]);
            if cfg.linear_solver == LinearSolver::MixedCgDirect {
                let (dy, dz, stats) =
                    solve_mixed_cg_direct(&op, &g_yf, &g_zf, cfg.cg_tol, cfg.cg_max)?;
                cg_iters = stats.cg_iters_total;
                (dy, dz)
            } else {
                let (nyf, nzf) = (free_y.len(), free_z.len());
                let full_op = |v: &DVector<f64>| -> DVector<f64> {
                    let vy = DVector::from(v.rows(0, nyf));
                    let vz = DVector::from(v.rows(nyf, nzf));
                    let oy = (op.byy)(&vy) + (op.byz)(&vz);
                    let oz = (op.bzy)(&vy) + (op.bzz)(&vz);
                    let mut out = DVector::zeros(nyf + nzf);
                    out.rows_mut(0, nyf).copy_from(&oy);
                    out.rows_mut(nyf, nzf).copy_from(&oz);
                    out
                };
                let mut rhs = DVector::zeros(nyf + nzf);
                rhs.rows_mut(0, nyf).copy_from(&(-&g_yf));
                rhs.rows_mut(nyf, nzf).copy_from(&(-&g_zf));
                let mut precond = DVector::from_element(nyf + nzf, 1.0);
                for i in 0..nyf {
                    precond[i] = cfg.full_cg_precond_y;
                }
                let out = cg(&full_op, &rhs, cfg.cg_tol, cfg.cg_max, Some(&precond))?;
                cg_iters = out.iters;
                (
                    DVector::from(out.x.rows(0, nyf)),
                    DVector::from(out.x.rows(nyf, nzf)),
                )
            }
        }
    };

    for (slot, &j) in free_y.iter().enumerate() {
        dx[j] = dy[slot];
    }
    for (slot, &i) in free_z.iter().enumerate() {
        dx[n_y + i] = dz[slot];
    }
    Ok((dx, cg_iters))
}

/// The original model with `y` frozen: a pure-`z` problem with `n_y = 0`.
struct FixedYModel {
    inner: Arc<dyn SeparableModel + Send + Sync>,
    y: DVector<f64>,
}

impl SeparableModel for FixedYModel {
    fn n_y(&self) -> usize {
        0
    }
    fn n_blocks(&self) -> usize {
        self.inner.n_blocks()
    }
    fn cols_per_block(&self) -> usize {
        self.inner.cols_per_block()
    }
    fn rows_per_block(&self) -> usize {
        self.inner.rows_per_block()
    }
    fn apply(&self, _y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.inner.apply(&self.y, z)
    }
    fn apply_da(&self, _j: usize, _y: &DVector<f64>, _z: &DVector<f64>) -> DVector<f64> {
        unreachable!("fixed-y model has no y parameters")
    }
    fn apply_at(&self, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.inner.apply_at(&self.y, v)
    }
    fn apply_dat(&self, _j: usize, _y: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        unreachable!("fixed-y model has no y parameters")
    }
    fn dense_block(&self, _y: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner.dense_block(&self.y)
    }
}

/// Improves the `z` coordinates of a trial point by at most `adjust_k_max`
/// iterations of this same method on `min_z F(y_bar, z)`, starting from
/// `z_bar`. Falls back to `z_bar` unless the result does not increase `F`.
/// Returns the (possibly unchanged) `z` and the inner iteration count.
pub fn adjust_trial(
    problem: &SeparableProblem,
    bx: &BoundBox,
    y_bar: &DVector<f64>,
    z_bar: &DVector<f64>,
    cfg: &OptimizerConfig,
) -> (DVector<f64>, usize) {
    if cfg.adjust_k_max == 0 {
        return (z_bar.clone(), 0);
    }
    let n_y = problem.n_y();
    let sub = SeparableProblem::new(
        Arc::new(FixedYModel { inner: Arc::clone(&problem.model), y: y_bar.clone() }),
        problem.loss.clone(),
    );
    let sub_bx = bx.slice(n_y, problem.n_z());
    let sub_cfg = OptimizerConfig {
        k_max_outer: cfg.adjust_k_max,
        adjust_k_max: 0,
        tau: cfg.adjust_tau,
        linear_solver: match cfg.linear_solver {
            LinearSolver::MixedCgDirect | LinearSolver::FullCg => LinearSolver::FullCg,
            _ => LinearSolver::BlockdiagQr,
        },
        ..cfg.clone()
    };
    let f_before = match sub.objective_at(z_bar) {
        Ok(ev) => ev.f,
        Err(_) => return (z_bar.clone(), 0),
    };
    match run(&sub, &sub_bx, z_bar, &sub_cfg) {
        Ok((z_adj, trace)) => {
            let ok = sub.objective_at(&z_adj).map(|ev| ev.f <= f_before).unwrap_or(false);
            if ok {
                (z_adj, trace.n_steps())
            } else {
                (z_bar.clone(), trace.n_steps())
            }
        }
        Err(_) => (z_bar.clone(), 0),
    }
}

/// Runs the damped projected Newton-type method from `x0` until the projected
/// gradient drops below `tau`, the iteration cap is reached, or a line search
/// fails.
pub fn run(
    problem: &SeparableProblem,
    bx: &BoundBox,
    x0: &DVector<f64>,
    cfg: &OptimizerConfig,
) -> Result<(DVector<f64>, RunTrace), OptimizerError> {
    cfg.validate()?;
    let dim = problem.dim();
    if bx.len() != dim || x0.len() != dim {
        return Err(OptimizerError::InvalidConfig(format!(
            "dimension mismatch: problem {dim}, box {}, x0 {}",
            bx.len(),
            x0.len()
        )));
    }
    let n_y = problem.n_y();

    let mut x = project(x0, bx);
    let mut eval = problem.objective_at(&x)?;
    let mut g = eval.gradient();
    let tau = cfg
        .tau
        .unwrap_or_else(|| (projected_gradient_norm(&x, &g, bx) / 1e8).max(2.2e-15));
    let mut eps = cfg.epsilon0;
    let mut lambda = cfg.lambda0.clamp(cfg.lambda_min, cfg.lambda_max);
    let mut records: Vec<IterRecord> = Vec::new();
    let status;

    let terminal = |k: usize, f: f64, pg: f64, lambda: f64, active_count: usize| IterRecord {
        k,
        f,
        proj_grad_norm: pg,
        lambda,
        step_exponent: 0,
        n_backtracks: 0,
        n_inner_adjust_iters: 0,
        cpu_time_ms: 0.0,
        active_count,
    };

    let mut k = 0;
    loop {
        let tick = Instant::now();
        let pg = projected_gradient_norm(&x, &g, bx);
        let active = active_set(&x, &g, bx, eps);
        let active_count = active.iter().filter(|&&a| a).count();
        if pg <= tau {
            status = RunStatus::Converged;
            records.push(terminal(k, eval.f, pg, lambda, active_count));
            break;
        }
        if k >= cfg.k_max_outer {
            status = RunStatus::IterationCap;
            records.push(terminal(k, eval.f, pg, lambda, active_count));
            break;
        }

        // direction, escalating damping on solver failures
        let mut dir = None;
        for _ in 0..40 {
            match search_direction(problem, &eval, &x, &active, lambda, cfg) {
                Ok(d) => {
                    dir = Some(d);
                    break;
                }
                Err(OptimizerError::Solver(_)) if lambda < cfg.lambda_max => {
                    lambda = (10.0 * lambda).min(cfg.lambda_max);
                }
                Err(e) => return Err(e),
            }
        }
        let Some((dx, _cg_iters)) = dir else {
            status = RunStatus::LineSearchFailure;
            records.push(terminal(k, eval.f, pg, lambda, active_count));
            break;
        };

        let model_decrease: f64 = (0..dim)
            .filter(|&i| !active[i])
            .map(|i| -0.5 * g[i] * dx[i])
            .sum();

        // backtracking line search with per-trial adjustment
        let mut accepted = None;
        let mut inner_total = 0usize;
        let mut n_backtracks = 0usize;
        for j in 0..=cfg.j_max {
            let step = cfg.alpha.powi(j as i32);
            let x_trial = project(&(&x + &dx * step), bx);
            let x_adj = if cfg.adjust_k_max > 0 {
                let (y_bar, z_bar) = problem.split(&x_trial);
                // the inner run inherits the outer damping so its steps are
                // commensurate with the current trust level, not with a
                // possibly far larger initial default
                let cfg_inner = OptimizerConfig { lambda0: lambda, ..cfg.clone() };
                let (z_adj, inner) = adjust_trial(problem, bx, &y_bar, &z_bar, &cfg_inner);
                inner_total += inner;
                let mut xa = x_trial.clone();
                xa.rows_mut(n_y, problem.n_z()).copy_from(&z_adj);
                xa
            } else {
                x_trial.clone()
            };
            let Ok(ev) = problem.objective_at(&x_adj) else {
                n_backtracks = j + 1;
                continue;
            };
            if armijo_accept(eval.f, ev.f, &g, &x, &x_trial, &dx, &active, cfg.delta, step) {
                accepted = Some((j, x_adj, ev));
                break;
            }
            n_backtracks = j + 1;
        }

        let Some((j, x_new, ev_new)) = accepted else {
            status = RunStatus::LineSearchFailure;
            records.push(terminal(k, eval.f, pg, lambda, active_count));
            break;
        };

        let lambda_used = lambda;
        let rho = if model_decrease > 0.0 {
            (eval.f - ev_new.f) / model_decrease
        } else {
            0.0
        };
        if rho > cfg.rho_good {
            lambda = (lambda / 2.0).max(cfg.lambda_min);
        } else if rho < cfg.rho_bad {
            lambda = (10.0 * lambda).min(cfg.lambda_max);
        }
        eps = cfg.epsilon0.min((project(&(&x + &dx), bx) - &x).norm());

        records.push(IterRecord {
            k,
            f: eval.f,
            proj_grad_norm: pg,
            lambda: lambda_used,
            step_exponent: j,
            n_backtracks,
            n_inner_adjust_iters: inner_total,
            cpu_time_ms: tick.elapsed().as_secs_f64() * 1e3,
            active_count,
        });

        x = x_new;
        eval = ev_new;
        g = eval.gradient();
        k += 1;
    }

    Ok((x, RunTrace { records, status, tau }))
}

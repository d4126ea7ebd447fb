//! Block-Gaussian-elimination linear solvers for the Newton-type systems.
//!
//! Three routes are provided for the damped normal equations
//! `(J^T J + lambda I) dx = -J^T r`:
//!
//! * [`solve_full_qr`] stacks the dense `J` and QR-factorizes it whole; it is
//!   the reference oracle for the block solvers.
//! * [`solve_block_qr`] eliminates the `z` block first via a QR of `J_z`,
//!   then solves a small projected system for `dy`.
//! * [`solve_block_qr_blockdiag`] does the same with a block-diagonal `J_z`,
//!   factorizing each diagonal block independently and never materializing
//!   the full sparse `J`.
//!
//! For systems too large to factorize, [`solve_mixed_cg_direct`] builds the
//! small Schur complement `B_s` column-by-column with inner CG solves against
//! `B_zz` and finishes with dense Cholesky on the `y` block.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlockSolveError {
    #[error("singular system in {0} (lambda = 0); increase damping")]
    SingularSystem(String),
    #[error("operator is not positive definite on the probe space")]
    Indefinite,
    #[error("Schur complement B_s is not positive definite; increase damping")]
    SchurNotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// The damped block normal system `min |J dx + r|^2 + lambda |dx|^2` with
/// `J = [J_y | blkdiag(J_z_blocks)]`. Row block `k` of `J_y` and `r` pairs
/// with `j_z_blocks[k]`.
#[derive(Debug, Clone)]
pub struct BlockNormalSystem {
    pub j_y: DMatrix<f64>,
    pub j_z_blocks: Vec<DMatrix<f64>>,
    pub r: DVector<f64>,
    pub lambda: f64,
}

impl BlockNormalSystem {
    pub fn n_y(&self) -> usize {
        self.j_y.ncols()
    }

    pub fn n_z(&self) -> usize {
        self.j_z_blocks.iter().map(|b| b.ncols()).sum()
    }

    fn rows(&self) -> usize {
        self.j_y.nrows()
    }

    fn validate(&self) -> Result<(), BlockSolveError> {
        let block_rows: usize = self.j_z_blocks.iter().map(|b| b.nrows()).sum();
        if block_rows != self.rows() || self.r.len() != self.rows() {
            return Err(BlockSolveError::DimensionMismatch(format!(
                "j_y rows {}, j_z block rows {}, r len {}",
                self.rows(),
                block_rows,
                self.r.len()
            )));
        }
        if self.lambda < 0.0 {
            return Err(BlockSolveError::DimensionMismatch(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Dense stacked `[J_y | blkdiag(J_z)]` (for the full-QR oracle path).
    fn stacked(&self) -> DMatrix<f64> {
        let n_y = self.n_y();
        let n_z = self.n_z();
        let mut j = DMatrix::zeros(self.rows(), n_y + n_z);
        j.view_mut((0, 0), (self.rows(), n_y)).copy_from(&self.j_y);
        let mut row = 0;
        let mut col = n_y;
        for b in &self.j_z_blocks {
            j.view_mut((row, col), (b.nrows(), b.ncols())).copy_from(b);
            row += b.nrows();
            col += b.ncols();
        }
        j
    }
}

/// Thin Householder QR with the sign convention that `R` has a nonnegative
/// diagonal, so factors are deterministic across solvers.
pub fn thin_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for k in 0..r.nrows().min(r.ncols()) {
        if r[(k, k)] < 0.0 {
            for c in 0..r.ncols() {
                r[(k, c)] = -r[(k, c)];
            }
            for i in 0..q.nrows() {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    (q, r)
}

fn solve_upper(r: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>, BlockSolveError> {
    let n = r.ncols();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let max_diag = (0..n).map(|k| r[(k, k)].abs()).fold(0.0_f64, f64::max);
    for k in 0..n {
        if r[(k, k)].abs() <= 1e-13 * max_diag.max(1e-300) || max_diag == 0.0 {
            return Err(BlockSolveError::SingularSystem(what.to_string()));
        }
    }
    let mut x = rhs.clone();
    r.view((0, 0), (n, n))
        .solve_upper_triangular_mut(&mut x);
    Ok(x)
}

fn split_dx(dx: &DVector<f64>, n_y: usize) -> (DVector<f64>, DVector<f64>) {
    (
        DVector::from(dx.rows(0, n_y)),
        DVector::from(dx.rows(n_y, dx.len() - n_y)),
    )
}

/// Reference solver: QR of the lambda-augmented stacked dense `J`.
pub fn solve_full_qr(sys: &BlockNormalSystem) -> Result<(DVector<f64>, DVector<f64>), BlockSolveError> {
    sys.validate()?;
    let j = sys.stacked();
    let n = j.ncols();
    let (ja, ra) = if sys.lambda > 0.0 {
        let mut ja = DMatrix::zeros(j.nrows() + n, n);
        ja.view_mut((0, 0), (j.nrows(), n)).copy_from(&j);
        let s = sys.lambda.sqrt();
        for k in 0..n {
            ja[(j.nrows() + k, k)] = s;
        }
        let mut ra = DVector::zeros(j.nrows() + n);
        ra.rows_mut(0, j.nrows()).copy_from(&sys.r);
        (ja, ra)
    } else {
        (j, sys.r.clone())
    };
    let (q, r) = thin_qr(&ja);
    let dx = -solve_upper(&r, &(q.transpose() * &ra), "full QR")?;
    Ok(split_dx(&dx, sys.n_y()))
}

/// Block-decomposed QR for a single `J_z` block: QR of `J_z`, projected
/// system `J_s = J_y - Q_z Q_z^T J_y` for `dy`, back-substitution for `dz`.
pub fn solve_block_qr(sys: &BlockNormalSystem) -> Result<(DVector<f64>, DVector<f64>), BlockSolveError> {
    sys.validate()?;
    if sys.j_z_blocks.len() != 1 {
        return Err(BlockSolveError::DimensionMismatch(format!(
            "solve_block_qr expects a single j_z block, got {}",
            sys.j_z_blocks.len()
        )));
    }
    let single = BlockNormalSystem {
        j_y: sys.j_y.clone(),
        j_z_blocks: sys.j_z_blocks.clone(),
        r: sys.r.clone(),
        lambda: sys.lambda,
    };
    solve_block_qr_blockdiag(&single)
}

/// Block-decomposed QR with block-diagonal `J_z`: per-block QR and Schur
/// contribution, one stacked QR for `dy`, per-block back-substitution for
/// `dz`. The full sparse `J` is never formed.
pub fn solve_block_qr_blockdiag(
    sys: &BlockNormalSystem,
) -> Result<(DVector<f64>, DVector<f64>), BlockSolveError> {
    sys.validate()?;
    let n_y = sys.n_y();
    let n_blocks = sys.j_z_blocks.len();
    let s = sys.lambda.sqrt();
    let aug = sys.lambda > 0.0;

    // Per-block elimination factors, kept for the dz back-substitution.
    let mut rz = Vec::with_capacity(n_blocks);
    let mut ts = Vec::with_capacity(n_blocks); // T^(i) = Qz^T Jy^(i)
    let mut tvec = Vec::with_capacity(n_blocks); // t^(i) = Qz^T r^(i)
    let mut js_rows = Vec::with_capacity(n_blocks); // (J_s^(i), r^(i)) row stacks

    let mut row0 = 0;
    for block in &sys.j_z_blocks {
        let (m, c) = (block.nrows(), block.ncols());
        let jy_i = sys.j_y.rows(row0, m).clone_owned();
        let r_i = DVector::from(sys.r.rows(row0, m));
        row0 += m;
        if c == 0 {
            // block fully deleted by the active set: contributes raw rows
            rz.push(DMatrix::zeros(0, 0));
            ts.push(DMatrix::zeros(0, n_y));
            tvec.push(DVector::zeros(0));
            js_rows.push((jy_i, r_i));
            continue;
        }
        // lambda-augment this block: [J_z; sqrt(lambda) I_c], J_y rows are 0 there
        let (jz_a, jy_a, r_a) = if aug {
            let mut jz_a = DMatrix::zeros(m + c, c);
            jz_a.view_mut((0, 0), (m, c)).copy_from(block);
            for k in 0..c {
                jz_a[(m + k, k)] = s;
            }
            let mut jy_a = DMatrix::zeros(m + c, n_y);
            jy_a.view_mut((0, 0), (m, n_y)).copy_from(&jy_i);
            let mut r_a = DVector::zeros(m + c);
            r_a.rows_mut(0, m).copy_from(&r_i);
            (jz_a, jy_a, r_a)
        } else {
            (block.clone(), jy_i, r_i)
        };
        let (qz, rz_i) = thin_qr(&jz_a);
        // guard against rank deficiency before using the factor
        let max_diag = (0..c).map(|k| rz_i[(k, k)].abs()).fold(0.0_f64, f64::max);
        if (0..c).any(|k| rz_i[(k, k)].abs() <= 1e-13 * max_diag.max(1e-300)) || max_diag == 0.0 {
            return Err(BlockSolveError::SingularSystem(format!(
                "R_z in block {}",
                rz.len()
            )));
        }
        let t_i = qz.transpose() * &jy_a;
        let tv_i = qz.transpose() * &r_a;
        let js_i = &jy_a - &qz * &t_i;
        rz.push(rz_i);
        ts.push(t_i);
        tvec.push(tv_i);
        js_rows.push((js_i, r_a));
    }

    // Stack J_s over blocks, with the y-damping rows sqrt(lambda) I appended.
    let extra = if aug { n_y } else { 0 };
    let total_rows: usize = js_rows.iter().map(|(m, _)| m.nrows()).sum::<usize>() + extra;
    let mut js = DMatrix::zeros(total_rows, n_y);
    let mut rs = DVector::zeros(total_rows);
    let mut row = 0;
    for (m, r_i) in &js_rows {
        js.view_mut((row, 0), (m.nrows(), n_y)).copy_from(m);
        rs.rows_mut(row, r_i.len()).copy_from(r_i);
        row += m.nrows();
    }
    if aug {
        for k in 0..n_y {
            js[(row + k, k)] = s;
        }
    }

    let dy = if n_y > 0 {
        let (qs, rs_mat) = thin_qr(&js);
        -solve_upper(&rs_mat, &(qs.transpose() * &rs), "R_s")?
    } else {
        DVector::zeros(0)
    };

    // dz^(i) = -Rz^{-1} (t^(i) + T^(i) dy)
    let n_z = sys.n_z();
    let mut dz = DVector::zeros(n_z);
    let mut col = 0;
    for i in 0..n_blocks {
        let c = sys.j_z_blocks[i].ncols();
        if c == 0 {
            continue;
        }
        let rhs = &tvec[i] + &ts[i] * &dy;
        let dz_i = -solve_upper(&rz[i], &rhs, &format!("R_z in block {i}"))?;
        dz.rows_mut(col, c).copy_from(&dz_i);
        col += c;
    }
    Ok((dy, dz))
}

/// The 2x2 block Newton system in operator form: only matrix-vector products
/// with the four blocks are available.
pub struct BlockHessianOperator<'a> {
    pub n_y: usize,
    pub n_z: usize,
    /// `v (n_y) -> B_yy v (n_y)`
    pub byy: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + 'a>,
    /// `v (n_z) -> B_yz v (n_y)`
    pub byz: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + 'a>,
    /// `v (n_y) -> B_zy v (n_z)`
    pub bzy: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + 'a>,
    /// `v (n_z) -> B_zz v (n_z)`
    pub bzz: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + 'a>,
}

/// Result of one conjugate gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub iters: usize,
    pub relres: f64,
    pub converged: bool,
}

/// Preconditioned conjugate gradients from `x0 = 0` on a symmetric positive
/// semidefinite operator. `precond` holds the diagonal of the preconditioner
/// `M` (applied as `M^{-1} v`).
pub fn cg(
    op: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    rhs: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    precond: Option<&DVector<f64>>,
) -> Result<CgOutcome, BlockSolveError> {
    let n = rhs.len();
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok(CgOutcome { x: DVector::zeros(n), iters: 0, relres: 0.0, converged: true });
    }
    let apply_precond = |r: &DVector<f64>| -> DVector<f64> {
        match precond {
            Some(m) => DVector::from_fn(n, |i, _| r[i] / m[i]),
            None => r.clone(),
        }
    };
    let mut x = DVector::zeros(n);
    let mut r = rhs.clone();
    let mut z = apply_precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut relres = 1.0;
    for k in 0..max_iter {
        let ap = op(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(BlockSolveError::Indefinite);
        }
        let alpha = rz / pap;
        x += &p * alpha;
        r -= &ap * alpha;
        relres = r.norm() / rhs_norm;
        if relres <= tol {
            return Ok(CgOutcome { x, iters: k + 1, relres, converged: true });
        }
        z = apply_precond(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + &p * beta;
    }
    Ok(CgOutcome { x, iters: max_iter, relres, converged: false })
}

/// Statistics from one mixed CG/direct solve.
#[derive(Debug, Clone, Default)]
pub struct MixedSolveStats {
    /// Total inner CG iterations across all `B_zz` solves.
    pub cg_iters_total: usize,
    /// Number of inner solves that hit the iteration cap.
    pub cg_nonconverged: usize,
    /// Worst relative residual seen among inner solves.
    pub worst_relres: f64,
}

/// Mixed CG/direct solve of the block system `B dx = -g`: `B_s` is built
/// column-by-column with CG against `B_zz`, factorized by Cholesky, then `dz`
/// follows from one more CG solve. Non-converged inner solves proceed with
/// the best iterate (recorded in the stats); the outer damping absorbs the
/// inexactness.
pub fn solve_mixed_cg_direct(
    op: &BlockHessianOperator,
    g_y: &DVector<f64>,
    g_z: &DVector<f64>,
    cg_tol: f64,
    cg_max: usize,
) -> Result<(DVector<f64>, DVector<f64>, MixedSolveStats), BlockSolveError> {
    if g_y.len() != op.n_y || g_z.len() != op.n_z {
        return Err(BlockSolveError::DimensionMismatch(format!(
            "g_y len {} (want {}), g_z len {} (want {})",
            g_y.len(),
            op.n_y,
            g_z.len(),
            op.n_z
        )));
    }
    let mut stats = MixedSolveStats::default();
    let mut inner = |rhs: &DVector<f64>| -> Result<DVector<f64>, BlockSolveError> {
        let out = cg(op.bzz.as_ref(), rhs, cg_tol, cg_max, None)?;
        stats.cg_iters_total += out.iters;
        if !out.converged {
            stats.cg_nonconverged += 1;
        }
        stats.worst_relres = stats.worst_relres.max(out.relres);
        Ok(out.x)
    };

    let n_y = op.n_y;
    let dy = if n_y > 0 {
        // B_s columns: (B_s)_{:,i} = B_yy e_i - B_yz Bzz^{-1} B_zy e_i
        let mut bs = DMatrix::zeros(n_y, n_y);
        for i in 0..n_y {
            let mut e = DVector::zeros(n_y);
            e[i] = 1.0;
            let col = (op.byy)(&e) - (op.byz)(&inner(&(op.bzy)(&e))?);
            bs.set_column(i, &col);
        }
        // enforce exact symmetry before Cholesky
        let bs = (&bs + bs.transpose()) * 0.5;
        let g_r = g_y - (op.byz)(&inner(g_z)?);
        let chol = Cholesky::new(bs).ok_or(BlockSolveError::SchurNotPositiveDefinite)?;
        -chol.solve(&g_r)
    } else {
        DVector::zeros(0)
    };

    let rhs_z = if n_y > 0 { g_z + (op.bzy)(&dy) } else { g_z.clone() };
    let dz = -inner(&rhs_z)?;
    Ok((dy, dz, stats))
}

/// The CG-iteration threshold above which the mixed CG/direct route wins over
/// full CG: `N_y (t_y + k_z t_z) / (t_y + t_z)`. Diagnostic only.
pub fn mixed_crossover_threshold(t_y: f64, t_z: f64, k_z: f64, n_y: f64) -> f64 {
    n_y * (t_y + k_z * t_z) / (t_y + t_z)
}

//! Seeded generators and model definitions for the three benchmark problems:
//! Poisson exponential sum fitting with multiple measurement vectors,
//! multiframe semiblind deconvolution with a piecewise power-law PSF, and a
//! closed-form two-variable Huber toy problem.

use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::loss::LossModel;
use crate::model::{SeparableModel, SeparableProblem};
use crate::optimizer::BoundBox;

/// A generated benchmark instance: objective, bounds, start, truth, seed.
#[derive(Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub problem: SeparableProblem,
    pub bounds: BoundBox,
    pub x0: DVector<f64>,
    pub truth: Option<DVector<f64>>,
    pub seed: u64,
    /// Echo of the generating configuration, for reproducibility archives.
    pub config: serde_json::Value,
}

fn b64_vec(v: &DVector<f64>) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

impl ProblemInstance {
    /// JSON layout: config echo plus base64-encoded little-endian f64 arrays.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "seed": self.seed,
            "config": self.config,
            "n_y": self.problem.n_y(),
            "n_z": self.problem.n_z(),
            "data": {
                "b": b64_vec(self.problem.loss.data()),
                "x0": b64_vec(&self.x0),
                "truth": self.truth.as_ref().map(b64_vec),
                "lo": b64_vec(&self.bounds.lo),
                "up": b64_vec(&self.bounds.up),
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Exponential sum fitting
// ---------------------------------------------------------------------------

/// Sum-of-exponentials forward map: one block is `A(y)_{ij} = exp(-y_j t_i)`,
/// applied to `n_blocks` coefficient vectors (`I_n (x) A(y)`).
#[derive(Debug, Clone)]
pub struct ExpSumModel {
    t: DVector<f64>,
    c: usize,
    n_blocks: usize,
}

impl ExpSumModel {
    pub fn new(t: DVector<f64>, c: usize, n_blocks: usize) -> Self {
        Self { t, c, n_blocks }
    }

    pub fn time_grid(&self) -> &DVector<f64> {
        &self.t
    }

    fn column(&self, j: usize, y: &DVector<f64>) -> DVector<f64> {
        self.t.map(|t| (-y[j] * t).exp())
    }

    /// Exact Hessian of the least-squares objective `1/2 |A(y)z - b|^2` at
    /// `(y, z)`, given the residual `A(y)z - b`. Used by the reduced-Newton
    /// oracle; blocks are assembled densely.
    pub fn ls_hessian(&self, y: &DVector<f64>, z: &DVector<f64>, residual: &DVector<f64>) -> DMatrix<f64> {
        let (m, c, n) = (self.t.len(), self.c, self.n_blocks);
        let n_y = c;
        let n_z = c * n;
        let dim = n_y + n_z;
        let mut h = DMatrix::zeros(dim, dim);
        let a = self.dense_block(y).unwrap();
        // dmu/dy_j restricted to block k: -z_{kj} t .* a_j; second y-derivative
        // is diagonal in j: +z_{kj} t^2 .* a_j.
        for j in 0..n_y {
            for l in 0..n_y {
                let mut acc = 0.0;
                for k in 0..n {
                    for i in 0..m {
                        let dj = -z[k * c + j] * self.t[i] * a[(i, j)];
                        let dl = -z[k * c + l] * self.t[i] * a[(i, l)];
                        acc += dj * dl;
                        if j == l {
                            acc += residual[k * m + i] * z[k * c + j] * self.t[i] * self.t[i] * a[(i, j)];
                        }
                    }
                }
                h[(j, l)] = acc;
            }
        }
        for j in 0..n_y {
            for k in 0..n {
                for l in 0..c {
                    let col = n_y + k * c + l;
                    let mut acc = 0.0;
                    for i in 0..m {
                        let dj = -z[k * c + j] * self.t[i] * a[(i, j)];
                        acc += dj * a[(i, l)];
                        if j == l {
                            acc += residual[k * m + i] * (-self.t[i] * a[(i, j)]);
                        }
                    }
                    h[(j, col)] = acc;
                    h[(col, j)] = acc;
                }
            }
        }
        let gram = a.transpose() * &a;
        for k in 0..n {
            h.view_mut((n_y + k * c, n_y + k * c), (c, c)).copy_from(&gram);
        }
        h
    }
}

impl SeparableModel for ExpSumModel {
    fn n_y(&self) -> usize {
        self.c
    }
    fn n_blocks(&self) -> usize {
        self.n_blocks
    }
    fn cols_per_block(&self) -> usize {
        self.c
    }
    fn rows_per_block(&self) -> usize {
        self.t.len()
    }

    fn apply(&self, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let m = self.t.len();
        let mut out = DVector::zeros(m * self.n_blocks);
        for j in 0..self.c {
            let col = self.column(j, y);
            for k in 0..self.n_blocks {
                let zkj = z[k * self.c + j];
                if zkj != 0.0 {
                    for i in 0..m {
                        out[k * m + i] += zkj * col[i];
                    }
                }
            }
        }
        out
    }

    fn apply_da(&self, j: usize, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let m = self.t.len();
        let col = self.column(j, y);
        let mut out = DVector::zeros(m * self.n_blocks);
        for k in 0..self.n_blocks {
            let zkj = z[k * self.c + j];
            for i in 0..m {
                out[k * m + i] = -zkj * self.t[i] * col[i];
            }
        }
        out
    }

    fn apply_at(&self, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let m = self.t.len();
        let mut out = DVector::zeros(self.n_z());
        for j in 0..self.c {
            let col = self.column(j, y);
            for k in 0..self.n_blocks {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += col[i] * v[k * m + i];
                }
                out[k * self.c + j] = acc;
            }
        }
        out
    }

    fn apply_dat(&self, j: usize, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let m = self.t.len();
        let col = self.column(j, y);
        let mut out = DVector::zeros(self.n_z());
        for k in 0..self.n_blocks {
            let mut acc = 0.0;
            for i in 0..m {
                acc += -self.t[i] * col[i] * v[k * m + i];
            }
            out[k * self.c + j] = acc;
        }
        out
    }

    fn dense_block(&self, y: &DVector<f64>) -> Option<DMatrix<f64>> {
        let m = self.t.len();
        let mut a = DMatrix::zeros(m, self.c);
        for j in 0..self.c {
            a.set_column(j, &self.column(j, y));
        }
        Some(a)
    }
}

/// Which loss to attach to an exponential sum instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpSumLoss {
    Poisson,
    WeightedLs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpSumConfig {
    pub c: usize,
    pub rates_true: Vec<f64>,
    pub m: usize,
    pub t_end: f64,
    pub n: usize,
    pub weight_scale: f64,
    pub weight_spread: f64,
    pub loss: ExpSumLoss,
    /// Skip the Poisson sampling step and observe the exact intensities.
    pub noiseless: bool,
    /// Optional nonnegativity bound on the decay rates.
    pub nonneg_rates: bool,
    pub seed: u64,
}

impl ExpSumConfig {
    /// Full-scale setup: 4 rates (1,2,3,4), m = 1000 samples on [0,5], n = 100.
    pub fn paper(seed: u64) -> Self {
        Self {
            c: 4,
            rates_true: vec![1.0, 2.0, 3.0, 4.0],
            m: 1000,
            t_end: 5.0,
            n: 100,
            weight_scale: 10.0,
            weight_spread: 1.2,
            loss: ExpSumLoss::Poisson,
            noiseless: false,
            nonneg_rates: false,
            seed,
        }
    }

    /// Desk-scale setup: 2 rates (1,3), m = 200, n = 20.
    pub fn desk(seed: u64) -> Self {
        Self {
            c: 2,
            rates_true: vec![1.0, 3.0],
            m: 200,
            t_end: 5.0,
            n: 20,
            weight_scale: 10.0,
            weight_spread: 1.2,
            loss: ExpSumLoss::Poisson,
            noiseless: false,
            nonneg_rates: false,
            seed,
        }
    }
}

/// Standard normal draw via Box-Muller.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 > 0.0 {
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Poisson sample: inversion by sequential search for small means, normal
/// approximation with rejection of negatives above.
pub fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    assert!(mean >= 0.0, "poisson mean must be nonnegative");
    if mean == 0.0 {
        return 0;
    }
    if mean < 30.0 {
        let u: f64 = rng.random();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u64;
        while u > cdf && k < 10_000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k
    } else {
        loop {
            let x = mean + mean.sqrt() * standard_normal(rng);
            if x >= 0.0 {
                return x.round() as u64;
            }
        }
    }
}

pub fn gen_expsum(cfg: &ExpSumConfig) -> ProblemInstance {
    assert_eq!(cfg.rates_true.len(), cfg.c);
    let t = DVector::from_fn(cfg.m, |i, _| cfg.t_end * i as f64 / (cfg.m - 1) as f64);
    let model = ExpSumModel::new(t, cfg.c, cfg.n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let y_true = DVector::from_vec(cfg.rates_true.clone());
    let z_true = DVector::from_fn(cfg.c * cfg.n, |_, _| {
        cfg.weight_scale * (cfg.weight_spread * standard_normal(&mut rng)).exp()
    });
    let mu = model.apply(&y_true, &z_true);
    let b = if cfg.noiseless {
        mu.clone()
    } else {
        DVector::from_fn(mu.len(), |i, _| sample_poisson(&mut rng, mu[i]) as f64)
    };

    let loss = match cfg.loss {
        ExpSumLoss::Poisson => LossModel::poisson(b).unwrap(),
        ExpSumLoss::WeightedLs => LossModel::weighted_least_squares(b, 1.0).unwrap(),
    };

    let n_y = cfg.c;
    let n_z = cfg.c * cfg.n;
    let mut lo = DVector::from_element(n_y + n_z, f64::NEG_INFINITY);
    let up = DVector::from_element(n_y + n_z, f64::INFINITY);
    for i in 0..n_z {
        lo[n_y + i] = 0.0;
    }
    if cfg.nonneg_rates {
        for j in 0..n_y {
            lo[j] = 0.0;
        }
    }

    // start: rates evenly spaced in [0.5, c + 0.5], flat positive weights
    let mut x0 = DVector::zeros(n_y + n_z);
    for j in 0..n_y {
        x0[j] = if n_y == 1 {
            1.0
        } else {
            0.5 + j as f64 * cfg.c as f64 / (n_y - 1) as f64
        };
    }
    let mean_b = loss.data().mean().max(1.0);
    for i in 0..n_z {
        x0[n_y + i] = mean_b / cfg.c as f64;
    }

    let mut truth = DVector::zeros(n_y + n_z);
    truth.rows_mut(0, n_y).copy_from(&y_true);
    truth.rows_mut(n_y, n_z).copy_from(&z_true);

    ProblemInstance {
        name: "expsum".into(),
        problem: SeparableProblem::new(Arc::new(model), loss),
        bounds: BoundBox::new(lo, up).unwrap(),
        x0,
        truth: Some(truth),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).unwrap(),
    }
}

// ---------------------------------------------------------------------------
// Piecewise power-law PSF
// ---------------------------------------------------------------------------

/// Centered displacement coordinate of grid index `a` on a periodic axis.
fn centered(a: usize, side: usize) -> f64 {
    if a <= side / 2 {
        a as f64
    } else {
        a as f64 - side as f64
    }
}

/// Logarithmically spaced breakpoints from `r_0 = 1` to `r_S = sqrt(2)/2 * s`.
pub fn psf_breakpoints(segments: usize, side: usize) -> Vec<f64> {
    let r_max = (2.0_f64).sqrt() / 2.0 * side as f64;
    (0..=segments).map(|i| r_max.powf(i as f64 / segments as f64)).collect()
}

struct WingEval {
    /// Normalized wing profile, sums to 1 over the grid.
    p: DVector<f64>,
    /// d p / d beta_i for each segment.
    dp: Vec<DVector<f64>>,
}

/// Evaluates the radially symmetric piecewise power-law wing `p(r) ~ r^-beta_i`
/// with continuity across breakpoints, `p(0) = 0`, and unit grid sum.
fn wing_profile(beta: &DVector<f64>, side: usize) -> WingEval {
    let s_seg = beta.len();
    let breaks = psf_breakpoints(s_seg, side);
    // continuity constants: log C_1 = 0, log C_{k+1} = log C_k + (b_{k+1}-b_k) ln r_k
    let mut log_c = vec![0.0; s_seg + 1]; // 1-based
    for k in 1..s_seg {
        log_c[k + 1] = log_c[k] + (beta[k] - beta[k - 1]) * breaks[k].ln();
    }
    let n = side * side;
    let mut q = DVector::zeros(n);
    let mut seg_of = vec![0usize; n]; // 1-based segment, 0 = center pixel
    let mut logr = vec![0.0; n];
    for jx in 0..side {
        for ix in 0..side {
            let idx = jx * side + ix;
            let (vx, vy) = (centered(ix, side), centered(jx, side));
            let r = (vx * vx + vy * vy).sqrt();
            if r == 0.0 {
                continue;
            }
            // segment k with r in [r_{k-1}, r_k); last segment closed at r_S
            let mut k = 1;
            while k < s_seg && r >= breaks[k] {
                k += 1;
            }
            seg_of[idx] = k;
            logr[idx] = r.ln();
            q[idx] = (log_c[k] - beta[k - 1] * r.ln()).exp();
        }
    }
    let z: f64 = q.sum();
    let p = &q / z;

    // d log q / d beta_i on segment k:
    //   [2 <= i <= k] ln r_{i-1}  -  [i <= k-1] ln r_i  -  [i == k] ln r
    let mut dp = Vec::with_capacity(s_seg);
    for i in 1..=s_seg {
        let mut d = DVector::zeros(n);
        for idx in 0..n {
            let k = seg_of[idx];
            if k == 0 {
                continue;
            }
            let mut v = 0.0;
            if i >= 2 && i <= k {
                v += breaks[i - 1].ln();
            }
            if i <= k - 1 {
                v -= breaks[i].ln();
            }
            if i == k {
                v -= logr[idx];
            }
            d[idx] = v;
        }
        let mean_d: f64 = p.dot(&d);
        dp.push(DVector::from_fn(n, |idx, _| p[idx] * (d[idx] - mean_d)));
    }
    WingEval { p, dp }
}

/// Builds the PSF kernel `alpha * delta_0 + (1 - alpha) * wing` as a flat
/// column-major `side x side` array summing to 1.
pub fn psf_build(alpha: f64, beta: &DVector<f64>, side: usize) -> DVector<f64> {
    assert!(alpha > 0.5 && alpha <= 1.0, "alpha must lie in (1/2, 1]");
    let wing = wing_profile(beta, side);
    let mut h = wing.p * (1.0 - alpha);
    h[0] += alpha;
    h
}

// ---------------------------------------------------------------------------
// Multiframe deconvolution model
// ---------------------------------------------------------------------------

struct KernelCache {
    y: DVector<f64>,
    h_hat: Vec<Complex<f64>>,
    dh_hat: Vec<Vec<Complex<f64>>>,
}

/// Convolution-based forward map for multiframe semiblind deconvolution:
/// `y = (alpha, beta_1..beta_S)` parametrizes a shared PSF, and each block of
/// `z` is one frame convolved with it (periodic boundary). Operator-only:
/// no dense block is exposed.
pub struct DeconvModel {
    side: usize,
    n_frames: usize,
    segments: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    cache: Mutex<Option<Arc<KernelCache>>>,
}

impl DeconvModel {
    pub fn new(side: usize, n_frames: usize, segments: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(side);
        let ifft = planner.plan_fft_inverse(side);
        Self { side, n_frames, segments, fft, ifft, cache: Mutex::new(None) }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    fn fft2(&self, data: &mut [Complex<f64>], inverse: bool) {
        let s = self.side;
        let plan = if inverse { &self.ifft } else { &self.fft };
        // columns are contiguous in column-major layout
        for col in data.chunks_exact_mut(s) {
            plan.process(col);
        }
        let mut scratch = vec![Complex::new(0.0, 0.0); s];
        for i in 0..s {
            for j in 0..s {
                scratch[j] = data[j * s + i];
            }
            plan.process(&mut scratch);
            for j in 0..s {
                data[j * s + i] = scratch[j];
            }
        }
    }

    fn forward_hat(&self, img: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = img.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft2(&mut buf, false);
        buf
    }

    fn conv_with_hat(&self, hat: &[Complex<f64>], img: &[f64], conjugate: bool) -> DVector<f64> {
        let n = self.side * self.side;
        let mut buf = self.forward_hat(img);
        for i in 0..n {
            let h = if conjugate { hat[i].conj() } else { hat[i] };
            buf[i] *= h;
        }
        self.fft2(&mut buf, true);
        let scale = 1.0 / n as f64;
        DVector::from_fn(n, |i, _| buf[i].re * scale)
    }

    fn kernels(&self, y: &DVector<f64>) -> Arc<KernelCache> {
        let mut guard = self.cache.lock().unwrap();
        if let Some(cached) = guard.as_ref() {
            if cached.y == *y {
                return Arc::clone(cached);
            }
        }
        let alpha = y[0];
        let beta = DVector::from(y.rows(1, self.segments));
        let wing = wing_profile(&beta, self.side);
        let mut h = &wing.p * (1.0 - alpha);
        h[0] += alpha;
        let h_hat = self.forward_hat(h.as_slice());
        let mut dh_hat = Vec::with_capacity(1 + self.segments);
        // d h / d alpha = delta_0 - wing
        let mut da = -wing.p.clone();
        da[0] += 1.0;
        dh_hat.push(self.forward_hat(da.as_slice()));
        for i in 0..self.segments {
            let db = &wing.dp[i] * (1.0 - alpha);
            dh_hat.push(self.forward_hat(db.as_slice()));
        }
        let cache = Arc::new(KernelCache { y: y.clone(), h_hat, dh_hat });
        *guard = Some(Arc::clone(&cache));
        cache
    }

    fn per_frame(&self, hat: &[Complex<f64>], v: &DVector<f64>, conjugate: bool) -> DVector<f64> {
        let n = self.side * self.side;
        let mut out = DVector::zeros(n * self.n_frames);
        for k in 0..self.n_frames {
            let frame = v.as_slice();
            let res = self.conv_with_hat(hat, &frame[k * n..(k + 1) * n], conjugate);
            out.rows_mut(k * n, n).copy_from(&res);
        }
        out
    }
}

impl SeparableModel for DeconvModel {
    fn n_y(&self) -> usize {
        1 + self.segments
    }
    fn n_blocks(&self) -> usize {
        self.n_frames
    }
    fn cols_per_block(&self) -> usize {
        self.side * self.side
    }
    fn rows_per_block(&self) -> usize {
        self.side * self.side
    }

    fn apply(&self, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let k = self.kernels(y);
        self.per_frame(&k.h_hat, z, false)
    }

    fn apply_da(&self, j: usize, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let k = self.kernels(y);
        self.per_frame(&k.dh_hat[j], z, false)
    }

    fn apply_at(&self, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let k = self.kernels(y);
        self.per_frame(&k.h_hat, v, true)
    }

    fn apply_dat(&self, j: usize, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let k = self.kernels(y);
        self.per_frame(&k.dh_hat[j], v, true)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeconvConfig {
    pub side: usize,
    pub n_frames: usize,
    pub segments: usize,
    pub alpha_true: f64,
    /// Wing exponents; length must equal `segments`.
    pub beta_true: Vec<f64>,
    pub background: f64,
    /// Lunar-disk radius in pixels.
    pub disk_radius: f64,
    pub seed: u64,
}

impl DeconvConfig {
    fn default_beta(segments: usize) -> Vec<f64> {
        // gently steepening wing exponents in the 1.5..3.5 range
        (0..segments).map(|i| 1.5 + 2.0 * i as f64 / (segments.max(2) - 1) as f64).collect()
    }

    /// Full-scale setup: 256x256, 3 frames, 12 segments.
    pub fn paper(seed: u64) -> Self {
        Self {
            side: 256,
            n_frames: 3,
            segments: 12,
            alpha_true: 0.85,
            beta_true: Self::default_beta(12),
            background: 1000.0,
            disk_radius: 64.0,
            seed,
        }
    }

    /// Desk-scale setup: 64x64, 2 frames, 6 segments.
    pub fn desk(seed: u64) -> Self {
        Self {
            side: 64,
            n_frames: 2,
            segments: 6,
            alpha_true: 0.85,
            beta_true: Self::default_beta(6),
            background: 1000.0,
            disk_radius: 16.0,
            seed,
        }
    }
}

/// Per-frame lunar disk centers, cycling through the image corners.
fn disk_center(frame: usize, side: usize) -> (f64, f64) {
    let q = side as f64 / 4.0;
    match frame % 4 {
        0 => (q, q),
        1 => (3.0 * q, q),
        2 => (q, 3.0 * q),
        _ => (3.0 * q, 3.0 * q),
    }
}

pub fn gen_deconv(cfg: &DeconvConfig) -> ProblemInstance {
    assert!(
        cfg.alpha_true > 0.5 && cfg.alpha_true <= 1.0,
        "alpha_true must lie in (1/2, 1]"
    );
    assert_eq!(cfg.beta_true.len(), cfg.segments);
    let s = cfg.side;
    let n_px = s * s;
    let model = DeconvModel::new(s, cfg.n_frames, cfg.segments);
    let n_y = 1 + cfg.segments;
    let n_z = n_px * cfg.n_frames;

    // clean frames: flat background with one zeroed disk per frame
    let mut z_true = DVector::zeros(n_z);
    let mut masked = vec![false; n_z];
    for k in 0..cfg.n_frames {
        let (cx, cy) = disk_center(k, s);
        for jx in 0..s {
            for ix in 0..s {
                let idx = k * n_px + jx * s + ix;
                let d2 = (ix as f64 - cx).powi(2) + (jx as f64 - cy).powi(2);
                if d2 <= cfg.disk_radius * cfg.disk_radius {
                    masked[idx] = true;
                } else {
                    z_true[idx] = cfg.background;
                }
            }
        }
    }

    let mut y_true = DVector::zeros(n_y);
    y_true[0] = cfg.alpha_true;
    for i in 0..cfg.segments {
        y_true[1 + i] = cfg.beta_true[i];
    }
    // observations: exact convolution, no added noise
    let b = model.apply(&y_true, &z_true);

    let mut lo = DVector::zeros(n_y + n_z);
    let mut up = DVector::from_element(n_y + n_z, f64::INFINITY);
    lo[0] = 0.5 + 1e-3;
    up[0] = 1.0;
    // beta >= 0 (lo already 0); masked pixels pinned at zero via lo = up = 0
    for i in 0..n_z {
        if masked[i] {
            up[n_y + i] = 0.0;
        }
    }

    let mut x0 = DVector::zeros(n_y + n_z);
    x0[0] = 0.75;
    for i in 0..cfg.segments {
        x0[1 + i] = 1.0;
    }
    for i in 0..n_z {
        x0[n_y + i] = if masked[i] { 0.0 } else { b[i].max(0.0) };
    }

    let mut truth = DVector::zeros(n_y + n_z);
    truth.rows_mut(0, n_y).copy_from(&y_true);
    truth.rows_mut(n_y, n_z).copy_from(&z_true);

    ProblemInstance {
        name: "deconv".into(),
        problem: SeparableProblem::new(Arc::new(model), LossModel::least_squares(b)),
        bounds: BoundBox::new(lo, up).unwrap(),
        x0,
        truth: Some(truth),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).unwrap(),
    }
}

// ---------------------------------------------------------------------------
// Toy Huber problem
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Ratio of object support to signal size; the only free parameter.
    pub rho: f64,
    pub huber_t: f64,
    pub y_truth: f64,
    pub z_truth: f64,
}

impl ToyConfig {
    pub fn new(rho: f64) -> Self {
        assert!(rho > 0.0 && rho <= 1.0);
        Self { rho, huber_t: 0.3, y_truth: 0.7, z_truth: 1.0 }
    }

    fn q1(&self, y: f64, z: f64) -> f64 {
        y * z + (1.0 - y * z) * self.rho
    }

    fn q2(&self, y: f64, z: f64) -> f64 {
        (1.0 - y) * z * self.rho
    }
}

fn huber(x: f64, t: f64) -> f64 {
    if x.abs() <= t {
        0.5 * x * x
    } else {
        t * (x.abs() - 0.5 * t)
    }
}

fn huber_grad(x: f64, t: f64) -> f64 {
    x.clamp(-t, t)
}

/// Closed-form toy objective `rho * l(q1 - q1t) + (1 - rho) * l(q2 - q2t)`
/// (the overall m/2 factor is dropped) and its analytic gradient.
pub fn toy_objective(cfg: &ToyConfig, y: f64, z: f64) -> (f64, f64, f64) {
    let t = cfg.huber_t;
    let (q1t, q2t) = (cfg.q1(cfg.y_truth, cfg.z_truth), cfg.q2(cfg.y_truth, cfg.z_truth));
    let x1 = cfg.q1(y, z) - q1t;
    let x2 = cfg.q2(y, z) - q2t;
    let f = cfg.rho * huber(x1, t) + (1.0 - cfg.rho) * huber(x2, t);
    // dq1/dy = (1-rho) z, dq1/dz = (1-rho) y, dq2/dy = -rho z, dq2/dz = rho (1-y)
    let g1 = cfg.rho * huber_grad(x1, t);
    let g2 = (1.0 - cfg.rho) * huber_grad(x2, t);
    let g_y = g1 * (1.0 - cfg.rho) * z + g2 * (-cfg.rho * z);
    let g_z = g1 * (1.0 - cfg.rho) * y + g2 * cfg.rho * (1.0 - y);
    (f, g_y, g_z)
}

/// The toy problem as a separable model. The component weights rho and
/// (1 - rho) are folded into row scalings `sqrt(rho)`, `sqrt(1 - rho)`, which
/// requires per-component Huber thresholds scaled the same way; the constant
/// part of q1 moves into the data vector.
#[derive(Debug, Clone)]
pub struct ToyModel {
    rho: f64,
}

impl SeparableModel for ToyModel {
    fn n_y(&self) -> usize {
        1
    }
    fn n_blocks(&self) -> usize {
        1
    }
    fn cols_per_block(&self) -> usize {
        1
    }
    fn rows_per_block(&self) -> usize {
        2
    }

    fn apply(&self, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let (s1, s2) = (self.rho.sqrt(), (1.0 - self.rho).sqrt());
        DVector::from_column_slice(&[
            s1 * (1.0 - self.rho) * y[0] * z[0],
            s2 * self.rho * (1.0 - y[0]) * z[0],
        ])
    }

    fn apply_da(&self, _j: usize, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let _ = y;
        let (s1, s2) = (self.rho.sqrt(), (1.0 - self.rho).sqrt());
        DVector::from_column_slice(&[s1 * (1.0 - self.rho) * z[0], -s2 * self.rho * z[0]])
    }

    fn apply_at(&self, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (s1, s2) = (self.rho.sqrt(), (1.0 - self.rho).sqrt());
        DVector::from_element(
            1,
            s1 * (1.0 - self.rho) * y[0] * v[0] + s2 * self.rho * (1.0 - y[0]) * v[1],
        )
    }

    fn apply_dat(&self, _j: usize, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (s1, s2) = (self.rho.sqrt(), (1.0 - self.rho).sqrt());
        DVector::from_element(1, s1 * (1.0 - self.rho) * v[0] - s2 * self.rho * v[1])
    }

    fn dense_block(&self, y: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (s1, s2) = (self.rho.sqrt(), (1.0 - self.rho).sqrt());
        Some(DMatrix::from_column_slice(2, 1, &[
            s1 * (1.0 - self.rho) * y[0],
            s2 * self.rho * (1.0 - y[0]),
        ]))
    }
}

pub fn gen_toy(cfg: &ToyConfig) -> ProblemInstance {
    let (s1, s2) = (cfg.rho.sqrt(), (1.0 - cfg.rho).sqrt());
    let (q1t, q2t) = (cfg.q1(cfg.y_truth, cfg.z_truth), cfg.q2(cfg.y_truth, cfg.z_truth));
    // the rho constant in q1 is absorbed into the data so the map is linear in z
    let b = DVector::from_column_slice(&[s1 * (q1t - cfg.rho), s2 * q2t]);
    let thresholds = DVector::from_column_slice(&[s1 * cfg.huber_t, s2 * cfg.huber_t]);
    let loss = LossModel::huber_per_component(b, thresholds).unwrap();
    let model = ToyModel { rho: cfg.rho };
    let bounds = BoundBox::new(
        DVector::from_column_slice(&[0.0, 0.0]),
        DVector::from_column_slice(&[1.0, f64::INFINITY]),
    )
    .unwrap();
    ProblemInstance {
        name: "toy".into(),
        problem: SeparableProblem::new(Arc::new(model), loss),
        bounds,
        x0: DVector::from_column_slice(&[0.02, 0.02]),
        truth: Some(DVector::from_column_slice(&[cfg.y_truth, cfg.z_truth])),
        seed: 0,
        config: serde_json::to_value(cfg).unwrap(),
    }
}

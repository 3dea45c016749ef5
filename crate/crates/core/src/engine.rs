//! Block-diagonal LMM machinery: covariance assembly, GLS fixed effects,
//! and variance-component estimation by REML (ML optional).
//!
//! Everything works subject by subject; the N x N covariance is never
//! materialized. Per-subject blocks V_i = sigma_eps^2 I + sigma_delta^2 D_i
//! + Z_i H Z_i' are factored by Cholesky and only solves are used.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::completion::{partition_by_response, CompletedDesign};
use crate::error::{Error, Result};
use crate::optim::{maximize_simplex, polish_newton, SimplexOptions};

/// Estimation criterion for the variance components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Criterion {
    Reml,
    Ml,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Criterion::Reml => write!(f, "REML"),
            Criterion::Ml => write!(f, "ML"),
        }
    }
}

/// Variance components of the completed model:
/// Var(alpha_i) = G, Var(gamma_i) = sigma_gamma^2, extra error
/// sigma_delta^2 on D-marked occasions, and base error sigma_eps^2.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    pub g: DMatrix<f64>,
    pub sigma_gamma2: f64,
    pub sigma_delta2: f64,
    pub sigma_eps2: f64,
}

impl VarianceComponents {
    pub fn new(g: DMatrix<f64>, sigma_gamma2: f64, sigma_delta2: f64, sigma_eps2: f64) -> Self {
        Self { g, sigma_gamma2, sigma_delta2, sigma_eps2 }
    }

    /// Random-intercept model with no completion components.
    pub fn random_intercept(g: f64, sigma_eps2: f64) -> Self {
        Self::new(DMatrix::from_element(1, 1, g), 0.0, 0.0, sigma_eps2)
    }

    pub fn q(&self) -> usize {
        self.g.nrows()
    }

    /// H = blockdiag(G, sigma_gamma^2), the covariance of v_i = (alpha_i', gamma_i)'.
    pub fn h(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut h = DMatrix::zeros(q + 1, q + 1);
        h.view_mut((0, 0), (q, q)).copy_from(&self.g);
        h[(q, q)] = self.sigma_gamma2;
        h
    }

    /// Checks symmetry/PSD of G and nonnegativity of the scalar components.
    pub fn validate(&self) -> Result<()> {
        if self.g.nrows() != self.g.ncols() {
            return Err(Error::Numerical("G must be square".into()));
        }
        if !is_symmetric_psd(&self.g) {
            return Err(Error::Numerical("G is not symmetric PSD".into()));
        }
        if self.sigma_gamma2 < 0.0 || self.sigma_delta2 < 0.0 {
            return Err(Error::Numerical("negative variance component".into()));
        }
        if !(self.sigma_eps2 > 0.0) {
            return Err(Error::Numerical("sigma_eps^2 must be positive".into()));
        }
        Ok(())
    }
}

fn is_symmetric_psd(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    if n == 0 {
        return true;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * (1.0 + m[(i, i)].abs() + m[(j, j)].abs()) {
                return false;
            }
        }
    }
    let sym = m.clone().symmetric_eigen();
    let max = sym.eigenvalues.amax().max(1.0);
    sym.eigenvalues.iter().all(|&l| l >= -1e-12 * max)
}

/// V_i = sigma_eps^2 I + sigma_delta^2 D_i + Z_i H Z_i'.
pub fn assemble_v(vc: &VarianceComponents, z: &DMatrix<f64>, d_diag: &DVector<f64>) -> Result<DMatrix<f64>> {
    vc.validate()?;
    let n = z.nrows();
    if z.ncols() != vc.q() + 1 || d_diag.len() != n {
        return Err(Error::Numerical(format!(
            "assemble_v dimension mismatch: Z is {}x{}, q = {}, |D| = {}",
            n,
            z.ncols(),
            vc.q(),
            d_diag.len()
        )));
    }
    let h = vc.h();
    let mut v = z * h * z.transpose();
    for t in 0..n {
        v[(t, t)] += vc.sigma_eps2 + vc.sigma_delta2 * d_diag[t];
    }
    Ok(v)
}

/// GLS solution over per-subject blocks: b = (X'V^-1 X)^-1 X'V^-1 y and its
/// covariance (X'V^-1 X)^-1, accumulated without forming the N x N matrix.
pub fn gls(
    x_blocks: &[DMatrix<f64>],
    v_blocks: &[DMatrix<f64>],
    y_blocks: &[DVector<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    gls_named(x_blocks, v_blocks, y_blocks, None)
}

pub(crate) fn gls_named(
    x_blocks: &[DMatrix<f64>],
    v_blocks: &[DMatrix<f64>],
    y_blocks: &[DVector<f64>],
    names: Option<&[String]>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x_blocks.len() != v_blocks.len() || x_blocks.len() != y_blocks.len() {
        return Err(Error::Numerical("gls: block count mismatch".into()));
    }
    let k = x_blocks.first().map(|x| x.ncols()).unwrap_or(0);
    let mut info = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for ((x, v), y) in x_blocks.iter().zip(v_blocks).zip(y_blocks) {
        let chol = v
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("gls: V block not positive definite".into()))?;
        let vx = chol.solve(x);
        let vy = chol.solve(y);
        info.gemm_tr(1.0, x, &vx, 1.0);
        rhs.gemv_tr(1.0, x, &vy, 1.0);
    }
    let chol = chol_or_rank_error(&info, names)?;
    let b = chol.solve(&rhs);
    let cov = chol.inverse();
    Ok((b, cov))
}

/// Cholesky of a PSD information matrix; on failure, identifies the
/// dependent columns via pivot collapse.
fn chol_or_rank_error(
    info: &DMatrix<f64>,
    names: Option<&[String]>,
) -> Result<Cholesky<f64, Dyn>> {
    let k = info.nrows();
    if let Some(ch) = info.clone().cholesky() {
        // Guard against a "successful" factorization of a numerically
        // singular matrix: tiny pivots relative to the diagonal scale.
        let scale = info.diagonal().amax().max(f64::MIN_POSITIVE);
        let ok = (0..k).all(|j| {
            let l = ch.l_dirty()[(j, j)];
            l * l > 1e-12 * scale
        });
        if ok {
            return Ok(ch);
        }
    }
    // Unpivoted outer-product factorization, recording collapsed columns.
    let mut a = info.clone();
    let scale = info.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut dependent = Vec::new();
    for j in 0..k {
        let d = a[(j, j)];
        if d <= 1e-12 * scale {
            dependent.push(j);
            for i in j..k {
                a[(i, j)] = 0.0;
            }
            continue;
        }
        let root = d.sqrt();
        for i in j..k {
            a[(i, j)] /= root;
        }
        for c in (j + 1)..k {
            let f = a[(c, j)];
            for i in c..k {
                a[(i, c)] -= f * a[(i, j)];
            }
        }
    }
    let columns = dependent
        .iter()
        .map(|&j| match names {
            Some(n) if j < n.len() => n[j].clone(),
            _ => format!("column {j}"),
        })
        .collect();
    Err(Error::RankDeficient { columns })
}

/// Warning tags attached to a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// Some variance component was estimated at (or pinned to) zero, or the
    /// error variance sits on its floor.
    Boundary,
    /// Every fitted occasion carried the extra error, so sigma_delta^2 was
    /// merged into sigma_eps^2.
    MergedErrorVariances,
    /// Standard errors treat predicted responses as observed data.
    NaiveSe,
    NotConverged,
}

impl std::fmt::Display for FitFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FitFlag::Boundary => "boundary",
            FitFlag::MergedErrorVariances => "merged_error_variances",
            FitFlag::NaiveSe => "naive_se",
            FitFlag::NotConverged => "not_converged",
        };
        write!(f, "{s}")
    }
}

/// Optimizer settings exposed through the CLI config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub criterion: Criterion,
    pub variance_floor: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 500, criterion: Criterion::Reml, variance_floor: 1e-10 }
    }
}

/// Result of a (restricted) maximum-likelihood fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub b_hat: DVector<f64>,
    pub psi_hat: VarianceComponents,
    pub cov_b: DMatrix<f64>,
    pub se_b: DVector<f64>,
    pub loglik: f64,
    pub criterion: Criterion,
    pub converged: bool,
    pub iterations: usize,
    pub flags: BTreeSet<FitFlag>,
    pub term_names: Vec<String>,
}

/// Per-subject design blocks handed to the fitting engine. The last column
/// of each `z` block is the gamma-indicator column of the completed model;
/// the `q` leading columns carry the original random effects.
#[derive(Debug, Clone)]
pub struct FitBlocks {
    pub x: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub d_diag: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub q: usize,
    pub k: usize,
    pub term_names: Vec<String>,
}

impl FitBlocks {
    /// Blocks over the rows with observed responses (the observed-data
    /// sub-model). Subjects with no observed response are dropped.
    pub fn from_design_observed(design: &CompletedDesign) -> Result<Self> {
        let part = partition_by_response(design)?;
        let mut x = Vec::with_capacity(part.observed.len());
        let mut z = Vec::with_capacity(part.observed.len());
        let mut d_diag = Vec::with_capacity(part.observed.len());
        for p in &part.observed {
            x.push(p.x.clone());
            z.push(p.z.clone());
            d_diag.push(p.d_diag.clone());
        }
        Ok(Self {
            x,
            z,
            d_diag,
            y: part.y_obs.clone(),
            q: design.q,
            k: design.k(),
            term_names: design.term_names.clone(),
        })
    }

    /// Blocks over all rows with responses supplied per subject (used to
    /// refit after predicting missing responses).
    pub fn from_design_with_responses(
        design: &CompletedDesign,
        y: &[DVector<f64>],
    ) -> Result<Self> {
        if y.len() != design.subjects.len() {
            return Err(Error::Numerical("response block count mismatch".into()));
        }
        let mut xs = Vec::with_capacity(y.len());
        let mut zs = Vec::with_capacity(y.len());
        let mut ds = Vec::with_capacity(y.len());
        for (i, s) in design.subjects.iter().enumerate() {
            if y[i].len() != s.n() {
                return Err(Error::Numerical("response length mismatch".into()));
            }
            xs.push(design.x_block(i));
            zs.push(s.z.clone());
            ds.push(s.d_diag.clone());
        }
        Ok(Self {
            x: xs,
            z: zs,
            d_diag: ds,
            y: y.to_vec(),
            q: design.q,
            k: design.k(),
            term_names: design.term_names.clone(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.iter().map(|v| v.len()).sum()
    }

    fn gamma_active(&self) -> bool {
        let q = self.q;
        self.z.iter().any(|z| (0..z.nrows()).any(|r| z[(r, q)] != 0.0))
    }

    /// None / Some / All classification of the D diagonal.
    fn delta_presence(&self) -> (bool, bool) {
        let mut any = false;
        let mut all = true;
        for d in &self.d_diag {
            for &v in d.iter() {
                if v != 0.0 {
                    any = true;
                } else {
                    all = false;
                }
            }
        }
        (any, any && all)
    }
}

/// Which variance parameters are free, and how the unconstrained vector maps
/// onto them. Scalar variances are log-parameterized; G uses a log-Cholesky
/// factor (diagonal of L on log scale, off-diagonals raw).
#[derive(Debug, Clone)]
struct ParamMap {
    q: usize,
    g_free: bool,
    gamma_free: bool,
    delta_free: bool,
    merged_delta: bool,
    floor: f64,
}

impl ParamMap {
    fn dim(&self) -> usize {
        let g = if self.g_free { self.q * (self.q + 1) / 2 } else { 0 };
        g + usize::from(self.gamma_free) + usize::from(self.delta_free) + 1
    }

    fn vc(&self, theta: &[f64]) -> VarianceComponents {
        let mut idx = 0;
        let g = if self.g_free {
            let l = self.l_from_theta(theta);
            idx += self.q * (self.q + 1) / 2;
            &l * l.transpose()
        } else {
            DMatrix::zeros(self.q, self.q)
        };
        let sigma_gamma2 = if self.gamma_free {
            let v = theta[idx].exp();
            idx += 1;
            v
        } else {
            0.0
        };
        let sigma_delta2 = if self.delta_free {
            let v = theta[idx].exp();
            idx += 1;
            v
        } else {
            0.0
        };
        let sigma_eps2 = self.floor + theta[idx].exp();
        VarianceComponents::new(g, sigma_gamma2, sigma_delta2, sigma_eps2)
    }

    fn l_from_theta(&self, theta: &[f64]) -> DMatrix<f64> {
        let q = self.q;
        let mut l = DMatrix::zeros(q, q);
        let mut idx = 0;
        for b in 0..q {
            for a in b..q {
                l[(a, b)] = if a == b { theta[idx].exp() } else { theta[idx] };
                idx += 1;
            }
        }
        l
    }

    /// Starting point from known components, clamped away from log(0).
    fn theta_from_vc(&self, vc: &VarianceComponents, fallback: &MomentInit) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.dim());
        let small = (1e-4 * fallback.s2).max(1e-12);
        if self.g_free {
            let l = vc
                .g
                .clone()
                .cholesky()
                .map(|c| c.l())
                .unwrap_or_else(|| DMatrix::from_diagonal_element(self.q, self.q, small.sqrt()));
            for b in 0..self.q {
                for a in b..self.q {
                    if a == b {
                        theta.push(l[(a, b)].max(small.sqrt()).ln());
                    } else {
                        theta.push(l[(a, b)]);
                    }
                }
            }
        }
        if self.gamma_free {
            theta.push(vc.sigma_gamma2.max(small).ln());
        }
        if self.delta_free {
            theta.push(vc.sigma_delta2.max(small).ln());
        }
        theta.push((vc.sigma_eps2 - self.floor).max(small).ln());
        theta
    }

    /// Starting point from moment estimates.
    fn theta_init(&self, init: &MomentInit) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.dim());
        if self.g_free {
            for b in 0..self.q {
                for a in b..self.q {
                    if a == b {
                        let v = if a == 0 { init.g_diag } else { 0.1 * init.s2 };
                        theta.push(0.5 * v.max(1e-8).ln());
                    } else {
                        theta.push(0.0);
                    }
                }
            }
        }
        if self.gamma_free {
            theta.push((0.2 * init.s2).max(1e-8).ln());
        }
        if self.delta_free {
            theta.push((0.2 * init.s2).max(1e-8).ln());
        }
        theta.push((init.eps2 - self.floor).max(1e-8).ln());
        theta
    }
}

struct MomentInit {
    s2: f64,
    g_diag: f64,
    eps2: f64,
}

fn moment_init(blocks: &FitBlocks) -> MomentInit {
    // OLS residuals, split into between- and within-subject variation.
    let k = blocks.k;
    let mut info = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (x, y) in blocks.x.iter().zip(&blocks.y) {
        info.gemm_tr(1.0, x, x, 1.0);
        rhs.gemv_tr(1.0, x, y, 1.0);
    }
    for j in 0..k {
        info[(j, j)] += 1e-10 * (1.0 + info[(j, j)]);
    }
    let b = info
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(k));

    let n: usize = blocks.n_rows();
    let m = blocks.y.len();
    let mut ss = 0.0;
    let mut between = 0.0;
    let mut nbar = 0.0;
    for (x, y) in blocks.x.iter().zip(&blocks.y) {
        let r = y - x * &b;
        ss += r.dot(&r);
        let mean = r.mean();
        between += mean * mean;
        nbar += r.len() as f64;
    }
    nbar /= m.max(1) as f64;
    let dof = n.saturating_sub(k).max(1) as f64;
    let s2 = (ss / dof).max(1e-12);
    let vb = (between / m.max(1) as f64 - s2 / nbar.max(1.0)).max(0.05 * s2);
    let eps2 = (s2 - vb).max(0.1 * s2);
    MomentInit { s2, g_diag: vb, eps2 }
}

/// Evaluation context for the profiled (restricted) log-likelihood over the
/// unconstrained variance parameterization.
pub struct ProfileContext<'a> {
    blocks: &'a FitBlocks,
    map: ParamMap,
    criterion: Criterion,
}

struct EvalParts {
    loglik: f64,
    b_hat: DVector<f64>,
    info_chol: Cholesky<f64, Dyn>,
    info: DMatrix<f64>,
}

// Flat column-major kernels for the tiny per-subject blocks. The profiled
// likelihood is evaluated a few hundred times per fit over blocks of
// dimension n_i <= T, so this path avoids per-block matrix allocations.
mod small {
    /// In-place lower Cholesky of a full column-major n x n matrix.
    /// Returns the log-determinant of the matrix, or None when a pivot is
    /// not strictly positive.
    pub fn chol_in_place(a: &mut [f64], n: usize) -> Option<f64> {
        let mut logdet = 0.0;
        for j in 0..n {
            let mut d = a[j + j * n];
            for k in 0..j {
                let l = a[j + k * n];
                d -= l * l;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let root = d.sqrt();
            logdet += 2.0 * root.ln();
            a[j + j * n] = root;
            for i in (j + 1)..n {
                let mut s = a[i + j * n];
                for k in 0..j {
                    s -= a[i + k * n] * a[j + k * n];
                }
                a[i + j * n] = s / root;
            }
        }
        Some(logdet)
    }

    /// Solves (L L') X = B in place for `ncols` right-hand sides, where `l`
    /// holds the lower Cholesky factor (column-major, n x n).
    pub fn chol_solve_in_place(l: &[f64], n: usize, b: &mut [f64], ncols: usize) {
        for c in 0..ncols {
            let col = &mut b[c * n..(c + 1) * n];
            for i in 0..n {
                let mut s = col[i];
                for k in 0..i {
                    s -= l[i + k * n] * col[k];
                }
                col[i] = s / l[i + i * n];
            }
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in (i + 1)..n {
                    s -= l[k + i * n] * col[k];
                }
                col[i] = s / l[i + i * n];
            }
        }
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

impl<'a> ProfileContext<'a> {
    pub fn new(blocks: &'a FitBlocks, opts: &OptimizerOptions) -> Self {
        let (delta_any, delta_all) = blocks.delta_presence();
        let map = ParamMap {
            q: blocks.q,
            g_free: blocks.q > 0,
            gamma_free: blocks.gamma_active(),
            delta_free: delta_any && !delta_all,
            merged_delta: delta_all,
            floor: opts.variance_floor,
        };
        Self { blocks, map, criterion: opts.criterion }
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn vc_from_theta(&self, theta: &[f64]) -> VarianceComponents {
        self.map.vc(theta)
    }

    /// Profiled log-likelihood; `-inf` when the parameter point is
    /// numerically infeasible (Cholesky overflow or breakdown).
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        if theta.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let vc = self.map.vc(theta);
        match self.eval(&vc) {
            Some(parts) => parts.loglik,
            None => f64::NEG_INFINITY,
        }
    }

    fn eval(&self, vc: &VarianceComponents) -> Option<EvalParts> {
        if !vc.sigma_eps2.is_finite()
            || !vc.sigma_gamma2.is_finite()
            || !vc.sigma_delta2.is_finite()
            || vc.g.iter().any(|v| !v.is_finite())
        {
            return None;
        }
        let k = self.blocks.k;
        let q1 = self.blocks.q + 1;
        let h = vc.h();
        let h_flat = h.as_slice(); // column-major (q+1) x (q+1)
        let n_max = self.blocks.x.iter().map(|x| x.nrows()).max().unwrap_or(0);

        let mut info_flat = vec![0.0f64; k * k];
        let mut rhs = DVector::zeros(k);
        let mut logdet_v = 0.0;
        let mut yty = 0.0;
        let mut n_total = 0usize;

        // Per-call scratch, reused across subjects.
        let mut v_buf = vec![0.0f64; n_max * n_max];
        let mut zh_buf = vec![0.0f64; n_max * q1];
        let mut w_buf = vec![0.0f64; n_max * (k + 1)];

        for ((x, z), (d, y)) in self
            .blocks
            .x
            .iter()
            .zip(&self.blocks.z)
            .zip(self.blocks.d_diag.iter().zip(&self.blocks.y))
        {
            let n = x.nrows();
            n_total += n;
            let zs = z.as_slice();
            // zh = Z H, then V = zh Z' + (eps + delta d) I.
            for a in 0..q1 {
                for t in 0..n {
                    let mut s = 0.0;
                    for b in 0..q1 {
                        s += zs[t + b * n] * h_flat[b + a * q1];
                    }
                    zh_buf[t + a * n] = s;
                }
            }
            for t2 in 0..n {
                for t1 in 0..n {
                    let mut s = 0.0;
                    for a in 0..q1 {
                        s += zh_buf[t1 + a * n] * zs[t2 + a * n];
                    }
                    v_buf[t1 + t2 * n] = s;
                }
                v_buf[t2 + t2 * n] += vc.sigma_eps2 + vc.sigma_delta2 * d[t2];
            }
            logdet_v += small::chol_in_place(&mut v_buf[..n * n], n)?;

            // w = V^-1 [X | y].
            let xs = x.as_slice();
            w_buf[..n * k].copy_from_slice(&xs[..n * k]);
            w_buf[n * k..n * (k + 1)].copy_from_slice(y.as_slice());
            small::chol_solve_in_place(&v_buf[..n * n], n, &mut w_buf[..n * (k + 1)], k + 1);

            let wy = &w_buf[n * k..n * (k + 1)];
            for c2 in 0..k {
                let wc = &w_buf[c2 * n..(c2 + 1) * n];
                for c1 in 0..=c2 {
                    info_flat[c1 + c2 * k] += small::dot(&xs[c1 * n..(c1 + 1) * n], wc);
                }
                rhs[c2] += small::dot(&xs[c2 * n..(c2 + 1) * n], wy);
            }
            yty += small::dot(y.as_slice(), wy);
        }
        // Mirror the accumulated upper triangle.
        for c2 in 0..k {
            for c1 in (c2 + 1)..k {
                info_flat[c1 + c2 * k] = info_flat[c2 + c1 * k];
            }
        }
        let info = DMatrix::from_column_slice(k, k, &info_flat);

        let info_chol = info.clone().cholesky()?;
        let mut logdet_info = 0.0;
        for j in 0..k {
            let l = info_chol.l_dirty()[(j, j)];
            if !(l > 0.0) || !l.is_finite() {
                return None;
            }
            logdet_info += 2.0 * l.ln();
        }
        let b_hat = info_chol.solve(&rhs);
        let quad = yty - rhs.dot(&b_hat);
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let loglik = match self.criterion {
            Criterion::Reml => {
                -0.5 * ((n_total - k) as f64 * ln2pi + logdet_v + logdet_info + quad)
            }
            Criterion::Ml => -0.5 * (n_total as f64 * ln2pi + logdet_v + quad),
        };
        if !loglik.is_finite() {
            return None;
        }
        Some(EvalParts { loglik, b_hat, info_chol, info })
    }

    /// Analytic gradient of the profiled log-likelihood in the
    /// unconstrained parameterization. `None` at infeasible points.
    pub fn gradient(&self, theta: &[f64]) -> Option<Vec<f64>> {
        if theta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let vc = self.map.vc(theta);
        let parts = self.eval(&vc)?;
        let q = self.map.q;
        let k = self.blocks.k;
        let h = vc.h();
        let reml = self.criterion == Criterion::Reml;

        // Accumulators for each V-derivative family.
        let mut tr_eps = 0.0;
        let mut usq_eps = 0.0;
        let mut m_eps = 0.0; // tr(info^-1 sum Wx'Wx)
        let mut tr_del = 0.0;
        let mut usq_del = 0.0;
        let mut m_del = 0.0;
        let mut tr_gam = 0.0;
        let mut usq_gam = 0.0;
        let mut m_gam = 0.0;
        let mut s_g = DMatrix::zeros(q, q); // sum Za' V^-1 Za
        let mut a_g = DMatrix::zeros(q, q); // sum (Za'u)(Za'u)'
        let mut c_g = DMatrix::zeros(q, q); // sum B info^-1 B', B = Za'Wx

        for ((x, z), (d, y)) in self
            .blocks
            .x
            .iter()
            .zip(&self.blocks.z)
            .zip(self.blocks.d_diag.iter().zip(&self.blocks.y))
        {
            let n = x.nrows();
            let mut v = z * &h * z.transpose();
            for t in 0..n {
                v[(t, t)] += vc.sigma_eps2 + vc.sigma_delta2 * d[t];
            }
            let chol = v.cholesky()?;
            let vinv = chol.inverse();
            let wx = chol.solve(x);
            let r = y - x * &parts.b_hat;
            let u = chol.solve(&r);

            tr_eps += vinv.trace();
            usq_eps += u.dot(&u);
            tr_del += (0..n).map(|t| d[t] * vinv[(t, t)]).sum::<f64>();
            usq_del += (0..n).map(|t| d[t] * u[t] * u[t]).sum::<f64>();

            if reml {
                // tr(info^-1 Wx' V̇ Wx) terms.
                let iwx = parts.info_chol.solve(&wx.transpose()); // k x n
                for t1 in 0..n {
                    let dot: f64 = (0..k).map(|c| wx[(t1, c)] * iwx[(c, t1)]).sum();
                    m_eps += dot;
                    m_del += d[t1] * dot;
                }
                let gcol = z.column(q);
                // v_g = Wx' g; m_gam += v_g' info^-1 v_g
                let vg = wx.transpose() * gcol;
                m_gam += vg.dot(&parts.info_chol.solve(&vg));
                if q > 0 {
                    let za = z.columns(0, q);
                    let b_mat = za.transpose() * &wx; // q x k
                    let t_mat = parts.info_chol.solve(&b_mat.transpose()); // k x q
                    c_g.gemm(1.0, &b_mat, &t_mat, 1.0);
                }
            }

            let gcol = z.column(q);
            tr_gam += (gcol.transpose() * &vinv * gcol)[(0, 0)];
            let ug = u.dot(&gcol);
            usq_gam += ug * ug;

            if q > 0 {
                let za = z.columns(0, q).clone_owned();
                s_g += za.transpose() * &vinv * &za;
                let au = za.transpose() * &u;
                a_g += &au * au.transpose();
            }
        }

        // Natural-scale scores: dl/dpsi = -1/2 [tr(P V̇) - u' V̇ u].
        let score = |tr_v: f64, m_corr: f64, usq: f64| -> f64 {
            let trp = if reml { tr_v - m_corr } else { tr_v };
            -0.5 * (trp - usq)
        };

        let mut grad = Vec::with_capacity(self.map.dim());
        if self.map.g_free {
            let l = self.map.l_from_theta(theta);
            for b in 0..q {
                for a in b..q {
                    // dG = dL L' + L dL', dL = c E_ab with c = L_aa on the diagonal.
                    let c = if a == b { l[(a, b)] } else { 1.0 };
                    let mut dg = DMatrix::<f64>::zeros(q, q);
                    for j in 0..q {
                        dg[(a, j)] += c * l[(j, b)];
                        dg[(j, a)] += c * l[(j, b)];
                    }
                    let tr_v = (0..q)
                        .map(|i| (0..q).map(|j| dg[(i, j)] * s_g[(j, i)]).sum::<f64>())
                        .sum::<f64>();
                    let usq = (0..q)
                        .map(|i| (0..q).map(|j| dg[(i, j)] * a_g[(j, i)]).sum::<f64>())
                        .sum::<f64>();
                    let m_corr = (0..q)
                        .map(|i| (0..q).map(|j| dg[(i, j)] * c_g[(j, i)]).sum::<f64>())
                        .sum::<f64>();
                    grad.push(score(tr_v, m_corr, usq));
                }
            }
        }
        let mut idx = if self.map.g_free { q * (q + 1) / 2 } else { 0 };
        if self.map.gamma_free {
            grad.push(score(tr_gam, m_gam, usq_gam) * vc.sigma_gamma2);
            idx += 1;
        }
        if self.map.delta_free {
            grad.push(score(tr_del, m_del, usq_del) * vc.sigma_delta2);
            idx += 1;
        }
        let _ = idx;
        grad.push(score(tr_eps, m_eps, usq_eps) * (vc.sigma_eps2 - self.map.floor));
        if grad.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(grad)
    }
}

/// Maximizes the REML or ML criterion over the variance components and
/// returns the GLS fixed effects at the optimum.
pub fn reml_fit(blocks: &FitBlocks, opts: &OptimizerOptions) -> Result<FitResult> {
    reml_fit_warm(blocks, opts, None)
}

/// Same as [`reml_fit`] with an optional warm start for the variance
/// components (deterministic, so reports stay reproducible).
pub fn reml_fit_warm(
    blocks: &FitBlocks,
    opts: &OptimizerOptions,
    warm: Option<&VarianceComponents>,
) -> Result<FitResult> {
    if blocks.x.is_empty() {
        return Err(Error::NoObservedResponses);
    }
    let n = blocks.n_rows();
    if n < blocks.k + 1 {
        return Err(Error::RankDeficient { columns: Vec::new() });
    }

    let ctx = ProfileContext::new(blocks, opts);
    let mut flags: BTreeSet<FitFlag> = BTreeSet::new();
    if ctx.map.merged_delta {
        flags.insert(FitFlag::MergedErrorVariances);
    }

    let init = moment_init(blocks);
    let theta0 = match warm {
        Some(vc) => ctx.map.theta_from_vc(vc, &init),
        None => ctx.map.theta_init(&init),
    };
    let step = if warm.is_some() { 0.2 } else { 0.4 };
    let simplex_opts = SimplexOptions { tol: opts.tol, max_iter: opts.max_iter, step };
    let coarse = maximize_simplex(&theta0, &simplex_opts, |t| ctx.loglik(t));
    if !coarse.value.is_finite() {
        return Err(Error::Numerical(
            "likelihood not finite at any visited parameter point".into(),
        ));
    }
    let polished = polish_newton(&coarse.x, coarse.value, 25, |t| ctx.loglik(t), |t| {
        ctx.gradient(t).filter(|g| g.iter().all(|v| v.is_finite()))
    });

    let theta_hat = polished.x.clone();
    let mut vc = ctx.vc_from_theta(&theta_hat);
    let converged = coarse.converged || polished.grad_norm <= 1e-6 * (1.0 + polished.value.abs());
    let iterations = coarse.iterations + polished.iterations;

    // Boundary handling: components at (or below) the detection threshold
    // are pinned to exactly zero and the rest re-optimized.
    const BOUNDARY_TOL: f64 = 1e-10;
    let mut pin_g = false;
    let mut pin_gamma = false;
    let mut pin_delta = false;
    if ctx.map.g_free && blocks.q == 1 && vc.g[(0, 0)] < BOUNDARY_TOL {
        pin_g = true;
    }
    if ctx.map.gamma_free && vc.sigma_gamma2 < BOUNDARY_TOL {
        pin_gamma = true;
    }
    if ctx.map.delta_free && vc.sigma_delta2 < BOUNDARY_TOL {
        pin_delta = true;
    }
    if pin_g || pin_gamma || pin_delta {
        flags.insert(FitFlag::Boundary);
        let map2 = ParamMap {
            q: ctx.map.q,
            g_free: ctx.map.g_free && !pin_g,
            gamma_free: ctx.map.gamma_free && !pin_gamma,
            delta_free: ctx.map.delta_free && !pin_delta,
            merged_delta: ctx.map.merged_delta,
            floor: ctx.map.floor,
        };
        let ctx2 = ProfileContext { blocks, map: map2.clone(), criterion: opts.criterion };
        let theta2 = ctx2.map.theta_init(&init);
        let coarse2 = maximize_simplex(&theta2, &simplex_opts, |t| ctx2.loglik(t));
        let polished2 =
            polish_newton(&coarse2.x, coarse2.value, 25, |t| ctx2.loglik(t), |t| ctx2.gradient(t));
        if polished2.value.is_finite() && polished2.value >= polished.value - 1e-6 {
            vc = ctx2.vc_from_theta(&polished2.x);
            if ctx.map.g_free && !map2.g_free {
                vc.g = DMatrix::zeros(blocks.q, blocks.q);
            }
        }
    }
    if vc.sigma_eps2 <= opts.variance_floor * (1.0 + 1e-3) {
        flags.insert(FitFlag::Boundary);
    }
    if !converged {
        flags.insert(FitFlag::NotConverged);
    }

    // Final evaluation at the reported psi-hat; cov_b is exactly
    // (X'V(psi-hat)^-1 X)^-1.
    let final_ctx = ProfileContext::new(blocks, opts);
    let parts = final_ctx
        .eval(&vc)
        .ok_or_else(|| Error::Numerical("final evaluation failed at psi-hat".into()))?;
    // Re-derive the covariance through the rank-checked path so dependent
    // columns surface as a structured error.
    let _ = chol_or_rank_error(&parts.info, Some(&blocks.term_names))?;
    let cov_b = parts.info_chol.inverse();
    let se_b = DVector::from_iterator(blocks.k, (0..blocks.k).map(|j| cov_b[(j, j)].max(0.0).sqrt()));

    Ok(FitResult {
        b_hat: parts.b_hat,
        psi_hat: vc,
        cov_b,
        se_b,
        loglik: parts.loglik,
        criterion: opts.criterion,
        converged,
        iterations,
        flags,
        term_names: blocks.term_names.clone(),
    })
}

/// Fits the observed-response rows of a completed design.
pub fn reml_fit_design(design: &CompletedDesign, opts: &OptimizerOptions) -> Result<FitResult> {
    let blocks = FitBlocks::from_design_observed(design)?;
    reml_fit(&blocks, opts)
}

/// GLS fit at known variance components: only the fixed effects are
/// estimated. Used by the known-psi predictive mode and the theory checks.
pub fn gls_fit_at(
    blocks: &FitBlocks,
    vc: &VarianceComponents,
    criterion: Criterion,
) -> Result<FitResult> {
    vc.validate()?;
    let opts = OptimizerOptions { criterion, ..OptimizerOptions::default() };
    let ctx = ProfileContext::new(blocks, &opts);
    let parts = ctx
        .eval(vc)
        .ok_or_else(|| Error::Numerical("GLS evaluation failed at supplied psi".into()))?;
    let _ = chol_or_rank_error(&parts.info, Some(&blocks.term_names))?;
    let cov_b = parts.info_chol.inverse();
    let se_b = DVector::from_iterator(blocks.k, (0..blocks.k).map(|j| cov_b[(j, j)].max(0.0).sqrt()));
    Ok(FitResult {
        b_hat: parts.b_hat,
        psi_hat: vc.clone(),
        cov_b,
        se_b,
        loglik: parts.loglik,
        criterion,
        converged: true,
        iterations: 0,
        flags: BTreeSet::new(),
        term_names: blocks.term_names.clone(),
    })
}

//! Numerical checks of the asymptotic efficiency comparisons.
//!
//! The complete-records estimator has asymptotic covariance
//! Sigma_o = (sum_i X_io' V_io^-1 X_io)^-1; the completed-covariates
//! estimator has Sigma = A^-1 + A^-1 B (C - B'A^-1 B)^-1 B'A^-1 where
//! (A, B, C) are the blocks of the completed-model information. Efficiency
//! of the latter is the matrix ordering Sigma <= Sigma_o, checked here as a
//! minimum-eigenvalue condition on concrete designs.

use nalgebra::{DMatrix, DVector};

use crate::completion::{build_completed_design, partition_by_response, CompletedDesign};
use crate::data::{complete_records, missing_pattern, LongitudinalDataset};
use crate::completion::ZSpec;
use crate::engine::VarianceComponents;
use crate::error::{Error, Result};

/// Outcome of the covariance-ordering check.
#[derive(Debug, Clone)]
pub struct EfficiencyReport {
    /// Asymptotic covariance of the complete-records estimator (p x p).
    pub sigma_o: DMatrix<f64>,
    /// Asymptotic covariance of the completed-covariates estimator via the
    /// block-inversion identity.
    pub sigma_cc: DMatrix<f64>,
    /// The same matrix read off the directly inverted full information.
    pub sigma_cc_direct: DMatrix<f64>,
    /// Smallest eigenvalue of Sigma_o - Sigma.
    pub min_eig_diff: f64,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub inequality_holds: bool,
}

impl EfficiencyReport {
    /// Relative disagreement between the two routes to Sigma.
    pub fn route_consistency_error(&self) -> f64 {
        let denom = self.sigma_cc.norm().max(1e-300);
        (&self.sigma_cc - &self.sigma_cc_direct).norm() / denom
    }
}

const EIG_TOL: f64 = 1e-8;

fn v_block(vc: &VarianceComponents, z: &DMatrix<f64>, d_diag: &DVector<f64>) -> DMatrix<f64> {
    let h = vc.h();
    let n = z.nrows();
    let mut v = z * h * z.transpose();
    for t in 0..n {
        v[(t, t)] += vc.sigma_eps2 + vc.sigma_delta2 * d_diag[t];
    }
    v
}

/// Sigma_o over the complete records: the design must come from
/// `complete_records`, so its indicator block is empty and the V blocks
/// reduce to sigma_eps^2 I + Z G Z'.
pub fn sigma_cdoe(design: &CompletedDesign, vc: &VarianceComponents) -> Result<DMatrix<f64>> {
    vc.validate()?;
    if design.d != 0 {
        return Err(Error::Validation(
            "sigma_cdoe expects a complete-records design (d = 0)".into(),
        ));
    }
    let p = design.p;
    let mut info = DMatrix::zeros(p, p);
    for s in &design.subjects {
        let v = v_block(vc, &s.z, &s.d_diag);
        let chol = v
            .cholesky()
            .ok_or_else(|| Error::Numerical("V block not positive definite".into()))?;
        let vx = chol.solve(&s.x1);
        info.gemm_tr(1.0, &s.x1, &vx, 1.0);
    }
    info.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("CDOE asymptotics undefined: singular information".into()))
}

/// Efficiency comparison of the completed-covariates estimator against a
/// given Sigma_o, on the rows of the design with observed responses.
pub fn sigma_cce(
    design: &CompletedDesign,
    sigma_o: &DMatrix<f64>,
    vc: &VarianceComponents,
) -> Result<EfficiencyReport> {
    vc.validate()?;
    let p = design.p;
    let d = design.d;
    let part = partition_by_response(design)?;
    let mut a = DMatrix::zeros(p, p);
    let mut b = DMatrix::zeros(p, d);
    let mut c = DMatrix::zeros(d, d);
    for op in &part.observed {
        let v = v_block(vc, &op.z, &op.d_diag);
        let chol = v
            .cholesky()
            .ok_or_else(|| Error::Numerical("V block not positive definite".into()))?;
        let x1 = op.x.columns(0, p).clone_owned();
        let x2 = op.x.columns(p, d).clone_owned();
        let v_x1 = chol.solve(&x1);
        let v_x2 = chol.solve(&x2);
        a.gemm_tr(1.0, &x1, &v_x1, 1.0);
        b.gemm_tr(1.0, &x1, &v_x2, 1.0);
        c.gemm_tr(1.0, &x2, &v_x2, 1.0);
    }

    let (sigma, sigma_direct) = sigma_from_blocks(&a, &b, &c)?;

    let mut diff = sigma_o - &sigma;
    // Symmetrize before the eigenvalue read-off.
    let diff_t = diff.transpose();
    diff = (diff + diff_t) * 0.5;
    let min_eig_diff = diff.symmetric_eigen().eigenvalues.min();

    Ok(EfficiencyReport {
        sigma_o: sigma_o.clone(),
        sigma_cc: sigma,
        sigma_cc_direct: sigma_direct,
        min_eig_diff,
        a,
        b,
        c,
        inequality_holds: min_eig_diff >= -EIG_TOL,
    })
}

/// Sigma computed two ways from the information blocks: the block-inversion
/// identity A^-1 + A^-1 B (C - B'A^-1 B)^-1 B'A^-1, and the top-left block
/// of the directly inverted full information.
pub fn sigma_from_blocks(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = a.nrows();
    let d = c.nrows();
    let a_inv = a
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or_else(|| Error::Numerical("singular A block".into()))?;
    if d == 0 {
        return Ok((a_inv.clone(), a_inv));
    }
    let schur = c - b.transpose() * &a_inv * b;
    let schur_inv = schur
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or_else(|| Error::Numerical("singular Schur complement C - B'A^-1 B".into()))?;
    let sigma = &a_inv + &a_inv * b * schur_inv * b.transpose() * &a_inv;

    let k = p + d;
    let mut omega = DMatrix::zeros(k, k);
    omega.view_mut((0, 0), (p, p)).copy_from(a);
    omega.view_mut((0, p), (p, d)).copy_from(b);
    omega.view_mut((p, 0), (d, p)).copy_from(&b.transpose());
    omega.view_mut((p, p), (d, d)).copy_from(c);
    let omega_inv = omega
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or_else(|| Error::Numerical("singular completed-model information".into()))?;
    let direct = omega_inv.view((0, 0), (p, p)).clone_owned();
    Ok((sigma, direct))
}

/// Builds both designs from a dataset and runs the full comparison.
pub fn efficiency_report(
    data: &LongitudinalDataset,
    z_spec: &ZSpec,
    vc: &VarianceComponents,
) -> Result<EfficiencyReport> {
    let cr = complete_records(data)?;
    let cr_pattern = missing_pattern(&cr);
    let cr_design = build_completed_design(&cr, &cr_pattern, z_spec)?;
    let sigma_o = sigma_cdoe(&cr_design, vc)?;

    let pattern = missing_pattern(data);
    let design = build_completed_design(data, &pattern, z_spec)?;
    sigma_cce(&design, &sigma_o, vc)
}

/// Elementwise-expansion check of the weighted quadratic forms.
#[derive(Debug, Clone, Copy)]
pub struct QfExpansionReport {
    /// Largest absolute deviation between the matrix product and the
    /// elementwise double sum, over all subjects and block pairs.
    pub max_abs_err: f64,
    /// Largest asymmetry |w_{t1 t2} - w_{t2 t1}| of the weight matrices.
    pub max_w_asym: f64,
    pub ok: bool,
}

/// Verifies, for every subject, that X_r' V^-1 X_s equals
/// sum_{t1,t2} w_{t1 t2} x_{r,t1} x_{s,t2}' for every block pair (r, s),
/// and that the weight matrices are symmetric.
pub fn quadratic_form_expansion_check(
    design: &CompletedDesign,
    vc: &VarianceComponents,
) -> Result<QfExpansionReport> {
    vc.validate()?;
    let mut max_abs_err = 0.0f64;
    let mut max_w_asym = 0.0f64;

    for s in &design.subjects {
        let n = s.n();
        let v = v_block(vc, &s.z, &s.d_diag);
        let w = v
            .cholesky()
            .ok_or_else(|| Error::Numerical("V block not positive definite".into()))?
            .inverse();
        for t1 in 0..n {
            for t2 in (t1 + 1)..n {
                max_w_asym = max_w_asym.max((w[(t1, t2)] - w[(t2, t1)]).abs());
            }
        }
        let blocks: [&DMatrix<f64>; 2] = [&s.x1, &s.x2];
        for r in 0..2 {
            for c in 0..2 {
                let xr = blocks[r];
                let xs = blocks[c];
                if xr.ncols() == 0 || xs.ncols() == 0 {
                    continue;
                }
                let product = xr.transpose() * &w * xs;
                let mut expansion = DMatrix::zeros(xr.ncols(), xs.ncols());
                for t1 in 0..n {
                    for t2 in 0..n {
                        let wv = w[(t1, t2)];
                        for i in 0..xr.ncols() {
                            for j in 0..xs.ncols() {
                                expansion[(i, j)] += wv * xr[(t1, i)] * xs[(t2, j)];
                            }
                        }
                    }
                }
                max_abs_err = max_abs_err.max((product - expansion).amax());
            }
        }
    }
    Ok(QfExpansionReport {
        max_abs_err,
        max_w_asym,
        ok: max_abs_err <= 1e-10 && max_w_asym <= 1e-12,
    })
}

/// Rank of Var(y-tilde) in the known-psi predictive mode.
#[derive(Debug, Clone, Copy)]
pub struct YtildeReport {
    pub rank: usize,
    pub n_observed: usize,
    pub n_missing: usize,
    pub ok: bool,
}

/// Forms Var(y-tilde) = [[V_o, C'], [C, C V_o^-1 C']] and computes its
/// numerical rank; the appended rows are linear images of y_o, so the rank
/// can never exceed N_o.
pub fn ytilde_singularity_check(
    design: &CompletedDesign,
    vc: &VarianceComponents,
) -> Result<YtildeReport> {
    vc.validate()?;
    let part = partition_by_response(design)?;
    let n_o = part.n_observed;
    let n_m = part.n_missing;
    let h = vc.h();

    // Global V_o (block diagonal) and C (own-subject blocks only).
    let mut v_o = DMatrix::zeros(n_o, n_o);
    let mut col_of = std::collections::HashMap::new();
    let mut off = 0;
    for op in &part.observed {
        let n = op.z.nrows();
        v_o.view_mut((off, off), (n, n))
            .copy_from(&v_block(vc, &op.z, &op.d_diag));
        col_of.insert(op.subject_index, (off, n));
        off += n;
    }
    let mut c = DMatrix::zeros(n_m, n_o);
    let mut row = 0;
    for mp in &part.missing {
        let nm = mp.z.nrows();
        if let Some(&(col, ncols)) = col_of.get(&mp.subject_index) {
            let op = part
                .observed
                .iter()
                .find(|o| o.subject_index == mp.subject_index)
                .unwrap();
            let block = &mp.z * &h * op.z.transpose();
            c.view_mut((row, col), (nm, ncols)).copy_from(&block);
        }
        row += nm;
    }

    let chol = v_o
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("V_o not positive definite".into()))?;
    let vinv_ct = chol.solve(&c.transpose());
    let lower_right = &c * &vinv_ct;

    let n = n_o + n_m;
    let mut var = DMatrix::zeros(n, n);
    var.view_mut((0, 0), (n_o, n_o)).copy_from(&v_o);
    var.view_mut((0, n_o), (n_o, n_m)).copy_from(&c.transpose());
    var.view_mut((n_o, 0), (n_m, n_o)).copy_from(&c);
    var.view_mut((n_o, n_o), (n_m, n_m)).copy_from(&lower_right);

    let var_t = var.transpose();
    let eig = ((var + var_t) * 0.5).symmetric_eigen();
    let lmax = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let rank = eig.eigenvalues.iter().filter(|&&l| l > 1e-8 * lmax).count();

    Ok(YtildeReport { rank, n_observed: n_o, n_missing: n_m, ok: rank <= n_o })
}

//! Best prediction of missing responses and the four estimator pipelines.
//!
//! FULL fits the unmasked data (simulation reference). CDOE fits the
//! complete records only. CCE fits the completed model on the rows with
//! observed responses. CCPE takes the CCE fit, predicts the missing
//! responses by their empirical best predictor, and refits on the completed
//! response vector; its standard errors treat the predictions as data and
//! are flagged accordingly.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::completion::{build_completed_design, partition_by_response, CompletedDesign, ZSpec};
use crate::data::{complete_records, missing_pattern, LongitudinalDataset};
use crate::engine::{
    gls_fit_at, reml_fit, reml_fit_warm, Criterion, FitBlocks, FitFlag, FitResult,
    OptimizerOptions, VarianceComponents,
};
use crate::error::{Error, Result};

/// Estimator pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Full,
    Cdoe,
    Cce,
    Ccpe,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Full, Method::Cdoe, Method::Cce, Method::Ccpe];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Full => "FULL",
            Method::Cdoe => "CDOE",
            Method::Cce => "CCE",
            Method::Ccpe => "CCPE",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FULL" => Ok(Method::Full),
            "CDOE" => Ok(Method::Cdoe),
            "CCE" => Ok(Method::Cce),
            "CCPE" => Ok(Method::Ccpe),
            other => Err(Error::Validation(format!("unknown method `{other}`"))),
        }
    }
}

/// Options shared by the pipelines.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub optimizer: OptimizerOptions,
    pub z_spec: ZSpec,
    /// When set, variance components are taken as known and only the fixed
    /// effects are estimated (GLS).
    pub known_psi: Option<VarianceComponents>,
    /// Materialize the prediction matrix Q with y_m_hat = Q y_o.
    pub materialize_q: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerOptions::default(),
            z_spec: ZSpec::default(),
            known_psi: None,
            materialize_q: false,
        }
    }
}

/// Where a predicted response belongs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionLocation {
    pub subject_index: usize,
    pub subject_id: String,
    pub t: u32,
}

/// Best predictions of the missing responses, in subject-major row order.
#[derive(Debug, Clone)]
pub struct BestPrediction {
    pub y_m_hat: DVector<f64>,
    pub locations: Vec<PredictionLocation>,
}

/// Empirical best prediction output.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub y_m_hat: DVector<f64>,
    pub locations: Vec<PredictionLocation>,
    /// N_m x N_o prediction matrix, on request.
    pub q: Option<DMatrix<f64>>,
    /// Fit of the observed-data sub-model that supplied the parameters.
    pub source_fit: FitResult,
}

/// One estimator pipeline's output.
#[derive(Debug, Clone)]
pub struct EstimatorReport {
    pub method: Method,
    pub fit: FitResult,
    /// The leading p entries of b_hat (the beta block).
    pub beta_hat: DVector<f64>,
    pub se_beta: DVector<f64>,
}

impl EstimatorReport {
    fn from_fit(method: Method, fit: FitResult, p: usize) -> Self {
        let beta_hat = DVector::from_iterator(p, (0..p).map(|j| fit.b_hat[j]));
        let se_beta = DVector::from_iterator(p, (0..p).map(|j| fit.se_b[j]));
        Self { method, fit, beta_hat, se_beta }
    }
}

/// Best predictor of the missing responses at given fixed effects and
/// variance components:
/// y_m = X_m b + C_mo V_o^-1 (y_o - X_o b), computed subject by subject
/// (cross-subject covariance vanishes because Var(v) = I_m (x) H).
pub fn best_predictor(
    b: &DVector<f64>,
    vc: &VarianceComponents,
    design: &CompletedDesign,
) -> Result<BestPrediction> {
    vc.validate()?;
    if vc.q() != design.q {
        return Err(Error::Numerical("variance components have wrong q".into()));
    }
    let part = partition_by_response(design)?;
    let h = vc.h();

    let mut obs_of: HashMap<usize, usize> = HashMap::new();
    for (j, op) in part.observed.iter().enumerate() {
        obs_of.insert(op.subject_index, j);
    }

    let mut preds = Vec::with_capacity(part.n_missing);
    let mut locations = Vec::with_capacity(part.n_missing);
    for mp in &part.missing {
        let s = &design.subjects[mp.subject_index];
        let mean = &mp.x * b;
        let pred = match obs_of.get(&mp.subject_index) {
            Some(&j) => {
                let op = &part.observed[j];
                let y_o = &part.y_obs[j];
                let mut v_o = &op.z * &h * op.z.transpose();
                for t in 0..op.z.nrows() {
                    v_o[(t, t)] += vc.sigma_eps2 + vc.sigma_delta2 * op.d_diag[t];
                }
                let chol = v_o.cholesky().ok_or_else(|| {
                    Error::Numerical("V_o block singular in best predictor".into())
                })?;
                let resid = y_o - &op.x * b;
                let c_mo = &mp.z * &h * op.z.transpose();
                mean + c_mo * chol.solve(&resid)
            }
            // No observed response for this subject: no within-subject
            // information, predictor is the mean.
            None => mean,
        };
        for (out, &r) in mp.rows.iter().enumerate() {
            preds.push(pred[out]);
            locations.push(PredictionLocation {
                subject_index: mp.subject_index,
                subject_id: s.subject_id.clone(),
                t: s.occasions[r],
            });
        }
    }
    Ok(BestPrediction { y_m_hat: DVector::from_vec(preds), locations })
}

/// Materializes Q with y_m_hat = Q y_o for the known-psi predictive mode,
/// where the fixed effects are the GLS solution from y_o.
pub fn materialize_q(design: &CompletedDesign, vc: &VarianceComponents) -> Result<DMatrix<f64>> {
    vc.validate()?;
    let part = partition_by_response(design)?;
    let h = vc.h();
    let k = design.k();

    // Per observed block: Cholesky of V_o and V_o^-1 X_o; global information.
    let mut chols = Vec::with_capacity(part.observed.len());
    let mut vinv_x = Vec::with_capacity(part.observed.len());
    let mut info = DMatrix::zeros(k, k);
    let mut col_offset = Vec::with_capacity(part.observed.len());
    let mut off = 0;
    for op in &part.observed {
        let n = op.z.nrows();
        let mut v_o = &op.z * &h * op.z.transpose();
        for t in 0..n {
            v_o[(t, t)] += vc.sigma_eps2 + vc.sigma_delta2 * op.d_diag[t];
        }
        let chol = v_o
            .cholesky()
            .ok_or_else(|| Error::Numerical("V_o block singular".into()))?;
        let vx = chol.solve(&op.x);
        info.gemm_tr(1.0, &op.x, &vx, 1.0);
        chols.push(chol);
        vinv_x.push(vx);
        col_offset.push(off);
        off += n;
    }
    let n_o = off;
    let f = info
        .cholesky()
        .ok_or_else(|| Error::RankDeficient { columns: Vec::new() })?
        .inverse();

    let mut obs_of: HashMap<usize, usize> = HashMap::new();
    for (j, op) in part.observed.iter().enumerate() {
        obs_of.insert(op.subject_index, j);
    }

    let mut q_mat = DMatrix::zeros(part.n_missing, n_o);
    let mut row = 0;
    for mp in &part.missing {
        let nm = mp.x.nrows();
        // R_i = X_m - C_i V_o^-1 X_o for the own-subject block; X_m otherwise.
        let (r_i, own) = match obs_of.get(&mp.subject_index) {
            Some(&j) => {
                let op = &part.observed[j];
                let c_i = &mp.z * &h * op.z.transpose();
                let ci_vinv = chols[j].solve(&c_i.transpose()).transpose();
                (&mp.x - &ci_vinv * &op.x, Some((j, ci_vinv)))
            }
            None => (mp.x.clone(), None),
        };
        let rf = &r_i * &f; // nm x k
        for (j, op) in part.observed.iter().enumerate() {
            // rf * X_jo' V_jo^-1 = rf * (V_jo^-1 X_jo)'.
            let mut block = &rf * vinv_x[j].transpose();
            if let Some((own_j, ref ci_vinv)) = own {
                if own_j == j {
                    block += ci_vinv;
                }
            }
            let _ = op;
            q_mat
                .view_mut((row, col_offset[j]), (nm, block.ncols()))
                .copy_from(&block);
        }
        row += nm;
    }
    Ok(q_mat)
}

/// Empirical best predictor: fits the observed-data sub-model (or uses the
/// supplied known psi), then applies the best predictor to the missing rows.
pub fn ebp(design: &CompletedDesign, opts: &PipelineOptions) -> Result<PredictionResult> {
    let blocks = FitBlocks::from_design_observed(design)?;
    let fit = match &opts.known_psi {
        Some(vc) => gls_fit_at(&blocks, vc, opts.optimizer.criterion)?,
        None => reml_fit(&blocks, &opts.optimizer)?,
    };
    let bp = best_predictor(&fit.b_hat, &fit.psi_hat, design)?;
    let q = if opts.materialize_q {
        Some(materialize_q(design, &fit.psi_hat)?)
    } else {
        None
    };
    Ok(PredictionResult { y_m_hat: bp.y_m_hat, locations: bp.locations, q, source_fit: fit })
}

/// Runs one estimator pipeline on a dataset.
pub fn run_pipeline(
    method: Method,
    data: &LongitudinalDataset,
    opts: &PipelineOptions,
) -> Result<EstimatorReport> {
    let p = data.covariate_spec().p();
    match method {
        Method::Full => {
            if data.has_missing_covariates() || data.has_missing_responses() {
                return Err(Error::Infeasible(
                    "FULL requires the fully observed dataset (simulation mode only)".into(),
                ));
            }
            let report = fit_plain(data, opts)?;
            Ok(EstimatorReport::from_fit(Method::Full, report, p))
        }
        Method::Cdoe => {
            let cr = complete_records(data)?;
            let report = fit_plain(&cr, opts)?;
            Ok(EstimatorReport::from_fit(Method::Cdoe, report, p))
        }
        Method::Cce => {
            let pattern = missing_pattern(data);
            let design = build_completed_design(data, &pattern, &opts.z_spec)?;
            let fit = fit_design_observed(&design, opts)?;
            Ok(EstimatorReport::from_fit(Method::Cce, fit, p))
        }
        Method::Ccpe => {
            let pattern = missing_pattern(data);
            let design = build_completed_design(data, &pattern, &opts.z_spec)?;
            let pred = ebp(&design, opts)?;
            if pred.y_m_hat.is_empty() {
                // Nothing to predict: the CCE fit is the CCPE fit.
                let mut fit = pred.source_fit;
                fit.flags.insert(FitFlag::NaiveSe);
                return Ok(EstimatorReport::from_fit(Method::Ccpe, fit, p));
            }
            // Complete the response vector and refit over all rows. The
            // refit treats the predictions as observed data, so its
            // standard errors are deflated; the naive_se flag records that.
            let mut y_tilde: Vec<DVector<f64>> = design
                .subjects
                .iter()
                .map(|s| {
                    DVector::from_iterator(s.n(), s.y.iter().map(|v| v.unwrap_or(0.0)))
                })
                .collect();
            for (loc, value) in pred.locations.iter().zip(pred.y_m_hat.iter()) {
                let s = &design.subjects[loc.subject_index];
                let r = s.occasions.iter().position(|&t| t == loc.t).unwrap();
                y_tilde[loc.subject_index][r] = *value;
            }
            let blocks = FitBlocks::from_design_with_responses(&design, &y_tilde)?;
            let mut fit = match &opts.known_psi {
                Some(vc) => gls_fit_at(&blocks, vc, opts.optimizer.criterion)?,
                // Warm-started from the sub-model components.
                None => reml_fit_warm(&blocks, &opts.optimizer, Some(&pred.source_fit.psi_hat))?,
            };
            fit.flags.insert(FitFlag::NaiveSe);
            Ok(EstimatorReport::from_fit(Method::Ccpe, fit, p))
        }
    }
}

/// Fit of a dataset that must have no missing covariates (FULL and CDOE
/// paths): the completion transform is the identity there.
fn fit_plain(data: &LongitudinalDataset, opts: &PipelineOptions) -> Result<FitResult> {
    let pattern = missing_pattern(data);
    debug_assert!(pattern.all_observed());
    let design = build_completed_design(data, &pattern, &opts.z_spec)?;
    fit_design_observed(&design, opts)
}

fn fit_design_observed(design: &CompletedDesign, opts: &PipelineOptions) -> Result<FitResult> {
    let blocks = FitBlocks::from_design_observed(design)?;
    match &opts.known_psi {
        Some(vc) => gls_fit_at(&blocks, vc, opts.optimizer.criterion),
        None => reml_fit(&blocks, &opts.optimizer),
    }
}

/// Convenience: the criterion in use for a pipeline options value.
pub fn criterion_of(opts: &PipelineOptions) -> Criterion {
    opts.optimizer.criterion
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completion::SubjectDesign;
    use crate::data::{CovariateKind, CovariateSpec, Occasion, SubjectRecord};
    use crate::sim::{apply_mdm, generate_complete, SimConfig};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn two_row_design(y0: Option<f64>, y1: Option<f64>) -> CompletedDesign {
        let s = SubjectDesign {
            subject_id: "1".into(),
            occasions: vec![1, 2],
            x1: DMatrix::zeros(2, 1),
            x2: DMatrix::zeros(2, 0),
            z: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            d_diag: DVector::zeros(2),
            y: vec![y0, y1],
        };
        CompletedDesign {
            subjects: vec![s],
            p: 1,
            d: 0,
            q: 1,
            column_map: vec![],
            term_names: vec!["x".into()],
        }
    }

    #[test]
    fn bp_shrinkage_scalar_hand_value() {
        // One observed row with mean 0 and y_o = 1, one missing row with
        // mean 0: prediction = (0.09 / 0.10) * 1 = 0.9.
        let design = two_row_design(Some(1.0), None);
        let vc = VarianceComponents::random_intercept(0.09, 0.01);
        let b = DVector::from_vec(vec![0.0]);
        let bp = best_predictor(&b, &vc, &design).unwrap();
        assert_eq!(bp.y_m_hat.len(), 1);
        assert_relative_eq!(bp.y_m_hat[0], 0.9, epsilon = 1e-12);
        assert_eq!(bp.locations[0].t, 2);
    }

    #[test]
    fn bp_with_h_zero_is_mean() {
        let design = two_row_design(Some(1.0), None);
        let vc = VarianceComponents::new(DMatrix::zeros(1, 1), 0.0, 0.0, 0.01);
        let b = DVector::from_vec(vec![0.0]);
        let bp = best_predictor(&b, &vc, &design).unwrap();
        assert_relative_eq!(bp.y_m_hat[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn bp_subject_without_observed_rows_uses_mean_only() {
        // Subject 1 fully missing; subject 2 observed. Cross-subject
        // covariance is zero, so subject 1 predictions are X_m b.
        let s1 = SubjectDesign {
            subject_id: "1".into(),
            occasions: vec![1, 2],
            x1: DMatrix::from_column_slice(2, 1, &[2.0, 3.0]),
            x2: DMatrix::zeros(2, 0),
            z: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            d_diag: DVector::zeros(2),
            y: vec![None, None],
        };
        let s2 = SubjectDesign {
            subject_id: "2".into(),
            occasions: vec![1, 2],
            x1: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            x2: DMatrix::zeros(2, 0),
            z: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]),
            d_diag: DVector::zeros(2),
            y: vec![Some(5.0), Some(6.0)],
        };
        let design = CompletedDesign {
            subjects: vec![s1, s2],
            p: 1,
            d: 0,
            q: 1,
            column_map: vec![],
            term_names: vec!["x".into()],
        };
        let vc = VarianceComponents::random_intercept(0.5, 0.1);
        let b = DVector::from_vec(vec![1.5]);
        let bp = best_predictor(&b, &vc, &design).unwrap();
        assert_relative_eq!(bp.y_m_hat[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(bp.y_m_hat[1], 4.5, epsilon = 1e-12);
    }

    fn seeded_masked(m: usize, seed: u64) -> crate::data::LongitudinalDataset {
        let cfg = SimConfig::table2(m, 1, seed);
        let (full, _) = generate_complete(&cfg, 0);
        apply_mdm(&full, &cfg, 0).unwrap().0
    }

    #[test]
    fn ebp_empty_when_no_missing_responses() {
        let cfg = SimConfig::table1(20, 1, 3);
        let (full, _) = generate_complete(&cfg, 0);
        let (masked, _) = apply_mdm(&full, &cfg, 0).unwrap();
        let pattern = missing_pattern(&masked);
        let design = build_completed_design(&masked, &pattern, &ZSpec::default()).unwrap();
        let pred = ebp(&design, &PipelineOptions::default()).unwrap();
        assert!(pred.y_m_hat.is_empty());
        // The source fit is the CCE fit of the same data.
        let cce = run_pipeline(Method::Cce, &masked, &PipelineOptions::default()).unwrap();
        assert_relative_eq!(pred.source_fit.b_hat, cce.fit.b_hat, max_relative = 1e-12);
    }

    #[test]
    fn known_psi_prediction_matches_materialized_q() {
        let masked = seeded_masked(30, 9);
        let pattern = missing_pattern(&masked);
        let design = build_completed_design(&masked, &pattern, &ZSpec::default()).unwrap();
        let vc = SimConfig::table2(30, 1, 9).completion_vc();
        let opts = PipelineOptions {
            known_psi: Some(vc),
            materialize_q: true,
            ..PipelineOptions::default()
        };
        let pred = ebp(&design, &opts).unwrap();
        let q = pred.q.as_ref().expect("Q requested");
        // Stack observed responses in partition order.
        let part = partition_by_response(&design).unwrap();
        let mut y_o = Vec::new();
        for y in &part.y_obs {
            y_o.extend(y.iter().copied());
        }
        let y_o = DVector::from_vec(y_o);
        let lin = q * &y_o;
        assert_relative_eq!(pred.y_m_hat, lin, max_relative = 1e-10);
    }

    #[test]
    fn no_missing_data_all_pipelines_agree() {
        let cfg = SimConfig::table1(15, 1, 4);
        let (full, _) = generate_complete(&cfg, 0);
        let opts = PipelineOptions::default();
        let full_rep = run_pipeline(Method::Full, &full, &opts).unwrap();
        let cdoe = run_pipeline(Method::Cdoe, &full, &opts).unwrap();
        let cce = run_pipeline(Method::Cce, &full, &opts).unwrap();
        let ccpe = run_pipeline(Method::Ccpe, &full, &opts).unwrap();
        assert_relative_eq!(full_rep.beta_hat, cdoe.beta_hat, max_relative = 1e-10);
        assert_relative_eq!(full_rep.beta_hat, cce.beta_hat, max_relative = 1e-10);
        assert_relative_eq!(full_rep.beta_hat, ccpe.beta_hat, max_relative = 1e-10);
        assert!(ccpe.fit.flags.contains(&FitFlag::NaiveSe));
    }

    #[test]
    fn full_on_masked_data_is_infeasible() {
        let masked = seeded_masked(15, 5);
        let err = run_pipeline(Method::Full, &masked, &PipelineOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err}");
    }

    /// Pure fixed-effects model with missing responses only: the predictive
    /// refit reproduces the complete-data least-squares estimator.
    #[test]
    fn linear_regression_no_gain() {
        let spec = CovariateSpec::new(
            vec!["intercept".into(), "x".into()],
            vec![CovariateKind::TimeInvariant, CovariateKind::TimeVarying],
            vec![false, false],
        )
        .unwrap();
        let mut rng = crate::rng::keyed_rng(21, 0, 0);
        use rand::Rng;
        let mut subjects = Vec::new();
        for i in 0..10 {
            let occasions = (1..=4)
                .map(|t| {
                    let x = rng.gen::<f64>() * 3.0;
                    let y = 0.7 + 1.3 * x + 0.2 * (rng.gen::<f64>() - 0.5);
                    Occasion {
                        t,
                        // Every third row loses its response.
                        response: if (t as usize + i) % 3 == 0 { None } else { Some(y) },
                        covariates: vec![Some(1.0), Some(x)],
                    }
                })
                .collect();
            subjects.push(SubjectRecord { subject_id: format!("s{i}"), occasions });
        }
        let data = crate::data::LongitudinalDataset::new(subjects, spec, "y".into()).unwrap();

        let opts = PipelineOptions { z_spec: ZSpec::none(), ..PipelineOptions::default() };
        let ccpe = run_pipeline(Method::Ccpe, &data, &opts).unwrap();

        // Complete-data OLS over the observed rows.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in data.subjects() {
            for occ in &s.occasions {
                if let Some(y) = occ.response {
                    xs.push([1.0, occ.covariates[1].unwrap()]);
                    ys.push(y);
                }
            }
        }
        let n = ys.len();
        let x = DMatrix::from_fn(n, 2, |r, c| xs[r][c]);
        let y = DVector::from_vec(ys);
        let ols = (x.transpose() * &x)
            .cholesky()
            .unwrap()
            .solve(&(x.transpose() * &y));
        assert_relative_eq!(ccpe.beta_hat, ols, max_relative = 1e-8);
    }

    /// With known psi the whole CCPE pipeline is linear in the observed
    /// responses: superposition holds along random directions.
    #[test]
    fn ccpe_known_psi_is_linear_in_y() {
        let cfg = SimConfig::table2(15, 1, 77);
        let (full, _) = generate_complete(&cfg, 0);
        let (masked, mask) = apply_mdm(&full, &cfg, 0).unwrap();
        let vc = cfg.completion_vc();
        let opts = PipelineOptions { known_psi: Some(vc), ..PipelineOptions::default() };

        let perturb = |lambda: f64| {
            let mut rng = crate::rng::keyed_rng(78, 0, 0);
            use rand::Rng;
            let subjects: Vec<SubjectRecord> = masked
                .subjects()
                .iter()
                .enumerate()
                .map(|(i, s)| SubjectRecord {
                    subject_id: s.subject_id.clone(),
                    occasions: s
                        .occasions
                        .iter()
                        .enumerate()
                        .map(|(j, occ)| {
                            let u = rng.gen::<f64>() - 0.5;
                            let _ = (i, j);
                            Occasion {
                                t: occ.t,
                                response: occ.response.map(|y| y + lambda * u),
                                covariates: occ.covariates.clone(),
                            }
                        })
                        .collect(),
                })
                .collect();
            crate::data::LongitudinalDataset::new(
                subjects,
                masked.covariate_spec().clone(),
                "y".into(),
            )
            .unwrap()
        };
        assert!(mask.n_missing_responses() > 0);

        let b0 = run_pipeline(Method::Ccpe, &perturb(0.0), &opts).unwrap().beta_hat;
        let b1 = run_pipeline(Method::Ccpe, &perturb(1.0), &opts).unwrap().beta_hat;
        let b25 = run_pipeline(Method::Ccpe, &perturb(2.5), &opts).unwrap().beta_hat;
        let extrapolated = &b0 + (&b1 - &b0) * 2.5;
        assert_relative_eq!(b25, extrapolated, max_relative = 1e-9);
    }

    /// The CCE fit cannot depend on values that were masked out: datasets
    /// differing only at masked cells produce identical designs and fits.
    #[test]
    fn cce_ignores_values_behind_masked_cells() {
        let spec = SimConfig::covariate_spec();
        let build = |hidden: f64| {
            let subjects: Vec<SubjectRecord> = (0..12)
                .map(|i| SubjectRecord {
                    subject_id: format!("s{i}"),
                    occasions: (1..=5)
                        .map(|t| {
                            let x4 = if t == 2 { None } else { Some(0.3 * t as f64 + i as f64 * 0.1) };
                            let x1 = if i % 3 == 0 { None } else { Some(0.1 * i as f64) };
                            // `hidden` only enters cells that are masked.
                            let _ = hidden;
                            Occasion {
                                t,
                                response: Some(1.0 + 0.2 * t as f64 + 0.05 * i as f64),
                                covariates: vec![
                                    Some(1.0),
                                    x1,
                                    Some((i % 2) as f64),
                                    Some(t as f64),
                                    x4,
                                ],
                            }
                        })
                        .collect(),
                })
                .collect();
            crate::data::LongitudinalDataset::new(subjects, spec.clone(), "y".into()).unwrap()
        };
        let a = run_pipeline(Method::Cce, &build(0.0), &PipelineOptions::default()).unwrap();
        let b = run_pipeline(Method::Cce, &build(123.0), &PipelineOptions::default()).unwrap();
        assert_eq!(a.beta_hat, b.beta_hat);
    }
}

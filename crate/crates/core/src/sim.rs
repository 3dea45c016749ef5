//! Data generation and the Monte Carlo study harness.
//!
//! The generator follows the simulation design: five covariates
//! (intercept, x1, x2, t, x4) with subject-level x1 ~ U[0,1],
//! x2 ~ Bernoulli(0.5), time column t, and occasion-level x4 ~ N(1,1);
//! random intercepts alpha_i and errors eps_it are Gaussian. Missingness is
//! MAR: x1 masks whole subjects with probability expit(3 x2 - 2), x4 masks
//! cell (i,t) with probability q*t, and (optionally) responses mask with
//! probability expit(3 x2 + 2 x4 - 3).
//!
//! The published mechanism is written "logit(...)"; a logit of a linear
//! score is not a probability, so it is read as the inverse logit (expit)
//! throughout.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateKind, CovariateSpec, LongitudinalDataset, Occasion, SubjectRecord};
use crate::engine::VarianceComponents;
use crate::error::{Error, Result};
use crate::predict::{run_pipeline, Method, PipelineOptions};
use crate::rng::{stream_rng, Stream};

/// Inverse logit.
pub fn expit(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Configuration of one Monte Carlo study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub m: usize,
    pub t_max: u32,
    /// (beta_0, ..., beta_4) for (intercept, x1, x2, t, x4).
    pub beta: [f64; 5],
    pub sd_alpha: f64,
    pub sd_eps: f64,
    /// Slope of the x4 missing probability q*t.
    pub q_mdm: f64,
    /// (a, b) in expit(a*x2 + b) for subject-level x1 missingness.
    pub cov_mdm: (f64, f64),
    /// (a, b, c) in expit(a*x2 + b*x4 + c) for response missingness.
    pub resp_mdm: Option<(f64, f64, f64)>,
    /// Mask responses only at occasions whose x4 is observed. With the link
    /// above, selection then depends on observed data only (MAR for the
    /// fitted models); turned off, responses also drop where x4 itself is
    /// masked, the selection rides on unobserved values, and the
    /// completed-model estimators inherit a selection bias.
    #[serde(default = "default_true")]
    pub resp_mdm_observed_only: bool,
    pub n_sim: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
}

fn default_true() -> bool {
    true
}

impl SimConfig {
    /// Missing-covariates-only study design.
    pub fn table1(m: usize, n_sim: usize, seed: u64) -> Self {
        Self {
            m,
            t_max: 5,
            beta: [1.0, 0.5, 0.2, 0.2, 0.2],
            sd_alpha: 0.3,
            sd_eps: 0.1,
            q_mdm: 0.15,
            cov_mdm: (3.0, -2.0),
            resp_mdm: None,
            resp_mdm_observed_only: true,
            n_sim,
            seed,
            methods: vec![Method::Full, Method::Cdoe, Method::Cce],
        }
    }

    /// Missing covariates and responses study design.
    pub fn table2(m: usize, n_sim: usize, seed: u64) -> Self {
        Self {
            resp_mdm: Some((3.0, 2.0, -3.0)),
            methods: vec![Method::Full, Method::Cdoe, Method::Cce, Method::Ccpe],
            ..Self::table1(m, n_sim, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Validation("m must be positive".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Validation("t_max must be positive".into()));
        }
        if self.n_sim == 0 {
            return Err(Error::Validation("n_sim must be positive".into()));
        }
        if self.q_mdm < 0.0 || self.q_mdm * self.t_max as f64 > 1.0 {
            return Err(Error::Validation(format!(
                "q*t must lie in [0,1] for all t <= {}: got q = {}",
                self.t_max, self.q_mdm
            )));
        }
        if self.sd_alpha < 0.0 || self.sd_eps < 0.0 {
            return Err(Error::Validation("standard deviations must be nonnegative".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Validation("no methods requested".into()));
        }
        Ok(())
    }

    /// Covariate layout of the generator: time-invariant block first.
    pub fn covariate_spec() -> CovariateSpec {
        CovariateSpec::new(
            vec!["intercept".into(), "x1".into(), "x2".into(), "t".into(), "x4".into()],
            vec![
                CovariateKind::TimeInvariant,
                CovariateKind::TimeInvariant,
                CovariateKind::TimeInvariant,
                CovariateKind::TimeVarying,
                CovariateKind::TimeVarying,
            ],
            vec![false, true, false, false, true],
        )
        .unwrap()
    }

    /// Plug-in variance components implied by the generator for the
    /// completed model: Var(alpha), the within-missing-subject variance of
    /// beta_1 x1 for the gamma component, the variance of beta_4 x4 for the
    /// delta component, and Var(eps).
    pub fn completion_vc(&self) -> VarianceComponents {
        VarianceComponents::new(
            nalgebra::DMatrix::from_element(1, 1, self.sd_alpha * self.sd_alpha),
            self.beta[1] * self.beta[1] / 12.0,
            self.beta[4] * self.beta[4],
            self.sd_eps * self.sd_eps,
        )
    }
}

/// Echo of the generating parameters attached to a replication.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    pub beta: [f64; 5],
    pub sd_alpha: f64,
    pub sd_eps: f64,
}

/// Which cells a replication masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    /// Per subject: x1 masked for the whole subject.
    pub x1: Vec<bool>,
    /// Per subject, per occasion: x4 masked.
    pub x4: Vec<Vec<bool>>,
    /// Per subject, per occasion: response masked.
    pub y: Vec<Vec<bool>>,
}

impl MaskRecord {
    pub fn n_missing_responses(&self) -> usize {
        self.y.iter().map(|s| s.iter().filter(|&&b| b).count()).sum()
    }
}

/// Generates one fully observed replication. Deterministic in `(seed, rep)`.
pub fn generate_complete(cfg: &SimConfig, rep: u64) -> (LongitudinalDataset, TruthRecord) {
    let mut cov_rng = stream_rng(cfg.seed, rep, Stream::Covariates);
    let mut re_rng = stream_rng(cfg.seed, rep, Stream::RandomEffects);
    let mut err_rng = stream_rng(cfg.seed, rep, Stream::Errors);

    let t_count = cfg.t_max as usize;
    let mut subjects = Vec::with_capacity(cfg.m);
    for i in 0..cfg.m {
        let x1: f64 = cov_rng.gen::<f64>();
        let x2: f64 = if cov_rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let x4: Vec<f64> = (0..t_count)
            .map(|_| 1.0 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut cov_rng))
            .collect();
        let alpha = cfg.sd_alpha * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut re_rng);

        let mut occasions = Vec::with_capacity(t_count);
        for t in 1..=cfg.t_max {
            let x4_it = x4[(t - 1) as usize];
            let eps = cfg.sd_eps * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut err_rng);
            let y = cfg.beta[0]
                + cfg.beta[1] * x1
                + cfg.beta[2] * x2
                + cfg.beta[3] * t as f64
                + cfg.beta[4] * x4_it
                + alpha
                + eps;
            occasions.push(Occasion {
                t,
                response: Some(y),
                covariates: vec![Some(1.0), Some(x1), Some(x2), Some(t as f64), Some(x4_it)],
            });
        }
        subjects.push(SubjectRecord { subject_id: format!("{}", i + 1), occasions });
    }

    let data = LongitudinalDataset::new(subjects, SimConfig::covariate_spec(), "y".into())
        .expect("generated dataset is always valid");
    let truth = TruthRecord { beta: cfg.beta, sd_alpha: cfg.sd_alpha, sd_eps: cfg.sd_eps };
    (data, truth)
}

/// Applies the missing-data mechanisms to a fully observed replication.
/// Mask draws are independent of the generator streams, so the same
/// `(seed, rep)` always produces the same mask.
pub fn apply_mdm(
    data: &LongitudinalDataset,
    cfg: &SimConfig,
    rep: u64,
) -> Result<(LongitudinalDataset, MaskRecord)> {
    cfg.validate()?;
    let mut cov_rng = stream_rng(cfg.seed, rep, Stream::MaskCovariate);
    let mut resp_rng = stream_rng(cfg.seed, rep, Stream::MaskResponse);
    let spec = data.covariate_spec().clone();
    let x1_idx = spec.index_of("x1").ok_or_else(|| Error::Validation("no x1 column".into()))?;
    let x2_idx = spec.index_of("x2").ok_or_else(|| Error::Validation("no x2 column".into()))?;
    let x4_idx = spec.index_of("x4").ok_or_else(|| Error::Validation("no x4 column".into()))?;

    let mut x1_mask = Vec::with_capacity(data.n_subjects());
    let mut x4_mask = Vec::with_capacity(data.n_subjects());
    let mut y_mask = Vec::with_capacity(data.n_subjects());
    let mut subjects = Vec::with_capacity(data.n_subjects());

    for s in data.subjects() {
        let x2 = s.occasions[0].covariates[x2_idx]
            .ok_or_else(|| Error::Validation("x2 must be observed".into()))?;
        let p1 = expit(cfg.cov_mdm.0 * x2 + cfg.cov_mdm.1);
        let m_x1 = cov_rng.gen::<f64>() < p1;
        let mut m_x4 = Vec::with_capacity(s.occasions.len());
        for occ in &s.occasions {
            let p4 = cfg.q_mdm * occ.t as f64;
            m_x4.push(cov_rng.gen::<f64>() < p4);
        }
        let mut m_y = vec![false; s.occasions.len()];
        if let Some((a, b, c)) = cfg.resp_mdm {
            for (j, occ) in s.occasions.iter().enumerate() {
                let x4 = occ.covariates[x4_idx]
                    .ok_or_else(|| Error::Validation("apply_mdm needs fully observed data".into()))?;
                let r = expit(a * x2 + b * x4 + c);
                // The draw happens unconditionally so the stream stays
                // aligned whichever scope is configured.
                let hit = resp_rng.gen::<f64>() < r;
                m_y[j] = hit && !(cfg.resp_mdm_observed_only && m_x4[j]);
            }
        }

        let occasions = s
            .occasions
            .iter()
            .enumerate()
            .map(|(j, occ)| {
                let mut covs = occ.covariates.clone();
                if m_x1 {
                    covs[x1_idx] = None;
                }
                if m_x4[j] {
                    covs[x4_idx] = None;
                }
                Occasion {
                    t: occ.t,
                    response: if m_y[j] { None } else { occ.response },
                    covariates: covs,
                }
            })
            .collect();
        subjects.push(SubjectRecord { subject_id: s.subject_id.clone(), occasions });
        x1_mask.push(m_x1);
        x4_mask.push(m_x4);
        y_mask.push(m_y);
    }

    let masked = LongitudinalDataset::new(subjects, spec, data.response_name().to_string())?;
    Ok((masked, MaskRecord { x1: x1_mask, x4: x4_mask, y: y_mask }))
}

/// One aggregated cell of the Monte Carlo report.
#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub parameter: String,
    pub method: Method,
    pub mean: f64,
    pub sd: f64,
    pub mse: f64,
    pub n_ok: usize,
}

/// Monte Carlo results: per-replication estimates plus aggregates.
#[derive(Debug, Clone)]
pub struct McReport {
    pub config: SimConfig,
    pub params: Vec<String>,
    /// Per method: one entry per replication; `None` marks a failed
    /// replication (excluded from moments, counted below).
    pub estimates: BTreeMap<Method, Vec<Option<Vec<f64>>>>,
    pub failures: BTreeMap<Method, usize>,
}

impl McReport {
    pub fn rows(&self) -> Vec<McRow> {
        let truth = self.config.beta;
        let mut rows = Vec::new();
        for (pi, pname) in self.params.iter().enumerate() {
            for method in &self.config.methods {
                let ests: Vec<f64> = self.estimates[method]
                    .iter()
                    .filter_map(|e| e.as_ref().map(|v| v[pi]))
                    .collect();
                let n = ests.len();
                if n == 0 {
                    rows.push(McRow {
                        parameter: pname.clone(),
                        method: *method,
                        mean: f64::NAN,
                        sd: f64::NAN,
                        mse: f64::NAN,
                        n_ok: 0,
                    });
                    continue;
                }
                let mean = ests.iter().sum::<f64>() / n as f64;
                let sd = if n > 1 {
                    (ests.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                let mse =
                    ests.iter().map(|e| (e - truth[pi]) * (e - truth[pi])).sum::<f64>() / n as f64;
                rows.push(McRow { parameter: pname.clone(), method: *method, mean, sd, mse, n_ok: n });
            }
        }
        rows
    }

    /// CSV form: `parameter,method,mean,sd,mse,n_ok`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,method,mean,sd,mse,n_ok\n");
        for r in self.rows() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.parameter,
                r.method,
                fmt_sig6(r.mean),
                fmt_sig6(r.sd),
                fmt_sig6(r.mse),
                r.n_ok
            )
            .unwrap();
        }
        out
    }

    /// Text table in the study layout: MSE scaled by 10^3, then mean and SD.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<10} {:<6} {:>12} {:>12} {:>12} {:>6}", "Parameter", "Method", "MSE(10^-3)", "Mean", "SD", "n_ok").unwrap();
        for r in self.rows() {
            if r.n_ok == 0 {
                writeln!(out, "{:<10} {:<6} {:>12} {:>12} {:>12} {:>6}", r.parameter, r.method.to_string(), "infeasible", "-", "-", 0).unwrap();
            } else {
                writeln!(
                    out,
                    "{:<10} {:<6} {:>12} {:>12} {:>12} {:>6}",
                    r.parameter,
                    r.method.to_string(),
                    fmt_sig6(r.mse * 1e3),
                    fmt_sig6(r.mean),
                    fmt_sig6(r.sd),
                    r.n_ok
                )
                .unwrap();
            }
        }
        out
    }

    pub fn row(&self, method: Method, param_idx: usize) -> Option<McRow> {
        self.rows()
            .into_iter()
            .find(|r| r.method == method && r.parameter == self.params[param_idx])
    }
}

/// Formats with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if !x.is_finite() {
        return "NA".into();
    }
    if x == 0.0 {
        return "0.00000".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        format!("{x:.5e}")
    } else {
        let decimals = (5 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    }
}

/// Runs one replication and returns the beta estimates per method
/// (`None` when a method failed to produce estimates).
pub fn run_replication(
    cfg: &SimConfig,
    rep: u64,
    opts: &PipelineOptions,
) -> Result<BTreeMap<Method, Option<Vec<f64>>>> {
    let (full_data, _truth) = generate_complete(cfg, rep);
    let needs_mask = cfg.methods.iter().any(|m| *m != Method::Full);
    let masked = if needs_mask {
        Some(apply_mdm(&full_data, cfg, rep)?.0)
    } else {
        None
    };

    let mut out = BTreeMap::new();
    for method in &cfg.methods {
        let data = match method {
            Method::Full => &full_data,
            _ => masked.as_ref().unwrap(),
        };
        let est = run_pipeline(*method, data, opts)
            .ok()
            .map(|rep| rep.beta_hat.iter().copied().collect::<Vec<f64>>());
        out.insert(*method, est);
    }
    Ok(out)
}

/// Runs the full Monte Carlo study. Replications execute in parallel on the
/// current rayon pool; the aggregation is in replication order, so reports
/// are byte-identical for any thread count.
pub fn run_monte_carlo(cfg: &SimConfig) -> Result<McReport> {
    run_monte_carlo_with(cfg, &PipelineOptions::default())
}

pub fn run_monte_carlo_with(cfg: &SimConfig, opts: &PipelineOptions) -> Result<McReport> {
    cfg.validate()?;
    let reps: Vec<BTreeMap<Method, Option<Vec<f64>>>> = (0..cfg.n_sim as u64)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep, opts))
        .collect::<Result<Vec<_>>>()?;

    let mut estimates: BTreeMap<Method, Vec<Option<Vec<f64>>>> = BTreeMap::new();
    let mut failures: BTreeMap<Method, usize> = BTreeMap::new();
    for method in &cfg.methods {
        estimates.insert(*method, Vec::with_capacity(reps.len()));
        failures.insert(*method, 0);
    }
    for rep in &reps {
        for method in &cfg.methods {
            let e = rep.get(method).cloned().flatten();
            if e.is_none() {
                *failures.get_mut(method).unwrap() += 1;
            }
            estimates.get_mut(method).unwrap().push(e);
        }
    }

    Ok(McReport {
        config: cfg.clone(),
        params: (0..5).map(|k| format!("beta{k}")).collect(),
        estimates,
        failures,
    })
}

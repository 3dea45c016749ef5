//! The completed-covariates design transform.
//!
//! A dataset with missing covariates is rewritten as a new LMM with no
//! missing covariates: observed covariates are zero-filled at missing cells,
//! the missing contributions become indicator fixed effects (one subject-level
//! column plus one per occasion index), an extra subject random effect rides
//! on the any-missing indicator, and occasions with a missing time-varying
//! covariate carry an extra error variance through a diagonal 0/1 matrix.
//!
//! The transform is a deterministic function of the data and its missing
//! pattern; no randomness enters here.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, MissingPattern};
use crate::error::{Error, Result};

/// Random-effect design rule: which columns form z_it for each occasion.
///
/// The default is a random intercept (z_it = 1). Covariate-valued columns are
/// referenced by position in the covariate spec and must be observed at every
/// retained occasion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZSpec {
    pub intercept: bool,
    pub covariates: Vec<usize>,
}

impl Default for ZSpec {
    fn default() -> Self {
        Self { intercept: true, covariates: Vec::new() }
    }
}

impl ZSpec {
    /// Pure fixed-effects model: no random effects at all.
    pub fn none() -> Self {
        Self { intercept: false, covariates: Vec::new() }
    }

    /// Dimension q of z_it.
    pub fn q(&self) -> usize {
        usize::from(self.intercept) + self.covariates.len()
    }
}

/// Source of a retained indicator column, mapping back to the components of
/// the unpruned coefficient vector (mu_1, mu_{2,1}, ..., mu_{2,T}).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndicatorColumn {
    /// Subject-level column: 1 when the subject has a missing time-invariant
    /// covariate.
    SubjectLevel,
    /// Occasion-level column for occasion index t: 1 when a time-varying
    /// covariate is missing at t.
    OccasionLevel(u32),
}

impl IndicatorColumn {
    pub fn name(&self) -> String {
        match self {
            IndicatorColumn::SubjectLevel => "mu_1".to_string(),
            IndicatorColumn::OccasionLevel(t) => format!("mu_2_t{t}"),
        }
    }
}

/// Per-subject blocks of the completed design.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDesign {
    pub subject_id: String,
    /// Occasion indices t, ascending.
    pub occasions: Vec<u32>,
    /// n_i × p observed covariates, zero-filled at missing cells.
    pub x1: DMatrix<f64>,
    /// n_i × d pruned indicator block.
    pub x2: DMatrix<f64>,
    /// n_i × (q+1): the z_it columns followed by the any-missing indicator
    /// column that carries the extra random effect.
    pub z: DMatrix<f64>,
    /// Diagonal of D_i: 1 where a time-varying covariate is missing.
    pub d_diag: DVector<f64>,
    /// Responses; `None` marks a missing response.
    pub y: Vec<Option<f64>>,
}

impl SubjectDesign {
    pub fn n(&self) -> usize {
        self.occasions.len()
    }

    pub fn response_observed(&self) -> Vec<bool> {
        self.y.iter().map(Option::is_some).collect()
    }
}

/// The completed LMM design: fixed effects (beta, mu), augmented random
/// effects, heteroskedastic error structure.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedDesign {
    pub subjects: Vec<SubjectDesign>,
    /// Covariate dimension p (columns of X1).
    pub p: usize,
    /// Retained indicator columns d (columns of X2).
    pub d: usize,
    /// Dimension q of the original z_it.
    pub q: usize,
    /// Source of each retained X2 column.
    pub column_map: Vec<IndicatorColumn>,
    /// Fixed-effect names: covariate names then indicator names.
    pub term_names: Vec<String>,
}

impl CompletedDesign {
    /// Fixed-effect dimension p + d.
    pub fn k(&self) -> usize {
        self.p + self.d
    }

    pub fn n_rows(&self) -> usize {
        self.subjects.iter().map(SubjectDesign::n).sum()
    }

    pub fn n_observed_responses(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| s.y.iter().filter(|v| v.is_some()).count())
            .sum()
    }

    /// True when the gamma-indicator column is nonzero somewhere.
    pub fn gamma_active(&self) -> bool {
        let q = self.q;
        self.subjects
            .iter()
            .any(|s| (0..s.n()).any(|r| s.z[(r, q)] != 0.0))
    }

    /// Per-subject [X1 X2] blocks.
    pub fn x_block(&self, i: usize) -> DMatrix<f64> {
        let s = &self.subjects[i];
        let mut x = DMatrix::zeros(s.n(), self.k());
        x.view_mut((0, 0), (s.n(), self.p)).copy_from(&s.x1);
        if self.d > 0 {
            x.view_mut((0, self.p), (s.n(), self.d)).copy_from(&s.x2);
        }
        x
    }
}

/// Builds the completed design from a dataset and its missing pattern.
pub fn build_completed_design(
    data: &LongitudinalDataset,
    pattern: &MissingPattern,
    z_spec: &ZSpec,
) -> Result<CompletedDesign> {
    let p = data.covariate_spec().p();
    if pattern.p != p
        || pattern.p1 != data.covariate_spec().p1()
        || pattern.per_occasion.len() != data.n_subjects()
    {
        return Err(Error::Validation(
            "missing pattern does not match dataset".into(),
        ));
    }
    for c in &z_spec.covariates {
        if *c >= p {
            return Err(Error::Validation(format!(
                "z-spec covariate index {c} out of range (p = {p})"
            )));
        }
    }
    let q = z_spec.q();
    let t_max = data.t_max() as usize;

    // First pass: unpruned X2* with T+1 columns (mu_1, mu_{2,1}, ..., mu_{2,T}).
    let wide = t_max + 1;
    let mut col_nonzero = vec![false; wide];
    let mut raw: Vec<(SubjectDesign, DMatrix<f64>)> = Vec::with_capacity(data.n_subjects());

    for (i, s) in data.subjects().iter().enumerate() {
        let n = s.occasions.len();
        let mut x1 = DMatrix::zeros(n, p);
        let mut x2_wide = DMatrix::zeros(n, wide);
        let mut z = DMatrix::zeros(n, q + 1);
        let mut d_diag = DVector::zeros(n);
        let mut y = Vec::with_capacity(n);
        let m_i_nonempty = !pattern.subject_level[i].is_empty();

        for (r, occ) in s.occasions.iter().enumerate() {
            let m_it = &pattern.per_occasion[i][r];
            let m_it2 = &pattern.time_varying[i][r];
            for k in 0..p {
                if !m_it.contains(&k) {
                    x1[(r, k)] = occ.covariates[k].ok_or_else(|| {
                        Error::Validation(format!(
                            "pattern marks ({}, t={}) covariate {k} observed but value is missing",
                            s.subject_id, occ.t
                        ))
                    })?;
                }
            }
            if m_i_nonempty {
                x2_wide[(r, 0)] = 1.0;
                col_nonzero[0] = true;
            }
            if !m_it2.is_empty() {
                let c = occ.t as usize; // column t+1 in 1-based terms
                x2_wide[(r, c)] = 1.0;
                col_nonzero[c] = true;
                d_diag[r] = 1.0;
            }
            let mut zc = 0;
            if z_spec.intercept {
                z[(r, zc)] = 1.0;
                zc += 1;
            }
            for &cv in &z_spec.covariates {
                z[(r, zc)] = occ.covariates[cv].ok_or_else(|| {
                    Error::Validation(format!(
                        "z-spec covariate `{}` missing at ({}, t={})",
                        data.covariate_spec().names[cv],
                        s.subject_id,
                        occ.t
                    ))
                })?;
                zc += 1;
            }
            if m_i_nonempty || !m_it2.is_empty() {
                z[(r, q)] = 1.0;
            }
            y.push(occ.response);
        }

        raw.push((
            SubjectDesign {
                subject_id: s.subject_id.clone(),
                occasions: s.occasions.iter().map(|o| o.t).collect(),
                x1,
                x2: DMatrix::zeros(n, 0),
                z,
                d_diag,
                y,
            },
            x2_wide,
        ));
    }

    // Prune all-zero columns of the stacked X2*.
    let retained: Vec<usize> = (0..wide).filter(|&c| col_nonzero[c]).collect();
    let d = retained.len();
    let column_map: Vec<IndicatorColumn> = retained
        .iter()
        .map(|&c| {
            if c == 0 {
                IndicatorColumn::SubjectLevel
            } else {
                IndicatorColumn::OccasionLevel(c as u32)
            }
        })
        .collect();

    let any_missing = data.has_missing_covariates();
    if d == 0 && any_missing {
        return Err(Error::Validation(
            "internal consistency: missing covariates present but no indicator column survived"
                .into(),
        ));
    }

    let mut subjects = Vec::with_capacity(raw.len());
    for (mut sd, x2_wide) in raw {
        let n = sd.n();
        let mut x2 = DMatrix::zeros(n, d);
        for (j, &c) in retained.iter().enumerate() {
            x2.set_column(j, &x2_wide.column(c));
        }
        sd.x2 = x2;
        subjects.push(sd);
    }

    let mut term_names: Vec<String> = data.covariate_spec().names.clone();
    term_names.extend(column_map.iter().map(IndicatorColumn::name));

    let design = CompletedDesign { subjects, p, d, q, column_map, term_names };

    let n_obs = design.n_observed_responses();
    if n_obs == 0 {
        return Err(Error::NoObservedResponses);
    }
    if design.k() >= n_obs {
        return Err(Error::RankDeficient { columns: Vec::new() });
    }
    Ok(design)
}

/// Row-stacked form of a completed design.
#[derive(Debug, Clone)]
pub struct StackedDesign {
    /// N × (p+d) fixed-effect matrix [X1 X2], subjects in order.
    pub x: DMatrix<f64>,
    /// Diagonal of D, length N.
    pub d_diag: DVector<f64>,
    /// Responses in row order (`None` = missing).
    pub y: Vec<Option<f64>>,
    /// Row range of each subject block (Z is block-diagonal over these).
    pub subject_rows: Vec<std::ops::Range<usize>>,
}

/// Stacks the per-subject blocks in subject order.
pub fn stack_design(design: &CompletedDesign) -> StackedDesign {
    let n = design.n_rows();
    let k = design.k();
    let mut x = DMatrix::zeros(n, k);
    let mut d_diag = DVector::zeros(n);
    let mut y = Vec::with_capacity(n);
    let mut subject_rows = Vec::with_capacity(design.subjects.len());
    let mut row = 0;
    for (i, s) in design.subjects.iter().enumerate() {
        let ni = s.n();
        x.view_mut((row, 0), (ni, design.p)).copy_from(&s.x1);
        if design.d > 0 {
            x.view_mut((row, design.p), (ni, design.d)).copy_from(&s.x2);
        }
        d_diag.rows_mut(row, ni).copy_from(&s.d_diag);
        y.extend(s.y.iter().copied());
        subject_rows.push(row..row + ni);
        let _ = i;
        row += ni;
    }
    StackedDesign { x, d_diag, y, subject_rows }
}

/// One side of the observed/missing response split, held per subject so the
/// block-diagonal covariance structure is preserved.
#[derive(Debug, Clone)]
pub struct SubjectPart {
    pub subject_index: usize,
    /// Row positions within the subject block (order-preserving).
    pub rows: Vec<usize>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub d_diag: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ResponsePartition {
    /// Per subject with at least one observed response.
    pub observed: Vec<SubjectPart>,
    /// Observed responses, matching `observed` blocks row for row.
    pub y_obs: Vec<DVector<f64>>,
    /// Per subject with at least one missing response.
    pub missing: Vec<SubjectPart>,
    pub n_observed: usize,
    pub n_missing: usize,
}

/// Splits a completed design into observed- and missing-response parts.
/// The split is exact and order-preserving within each part.
pub fn partition_by_response(design: &CompletedDesign) -> Result<ResponsePartition> {
    let mut observed = Vec::new();
    let mut missing = Vec::new();
    let mut y_obs = Vec::new();
    let mut n_observed = 0;
    let mut n_missing = 0;

    for (i, s) in design.subjects.iter().enumerate() {
        let x_full = design.x_block(i);
        let obs_rows: Vec<usize> = (0..s.n()).filter(|&r| s.y[r].is_some()).collect();
        let mis_rows: Vec<usize> = (0..s.n()).filter(|&r| s.y[r].is_none()).collect();
        if !obs_rows.is_empty() {
            observed.push(take_rows(i, &obs_rows, &x_full, s));
            y_obs.push(DVector::from_iterator(
                obs_rows.len(),
                obs_rows.iter().map(|&r| s.y[r].unwrap()),
            ));
            n_observed += obs_rows.len();
        }
        if !mis_rows.is_empty() {
            missing.push(take_rows(i, &mis_rows, &x_full, s));
            n_missing += mis_rows.len();
        }
    }
    if n_observed == 0 {
        return Err(Error::NoObservedResponses);
    }
    Ok(ResponsePartition { observed, y_obs, missing, n_observed, n_missing })
}

fn take_rows(
    subject_index: usize,
    rows: &[usize],
    x_full: &DMatrix<f64>,
    s: &SubjectDesign,
) -> SubjectPart {
    let m = rows.len();
    let mut x = DMatrix::zeros(m, x_full.ncols());
    let mut z = DMatrix::zeros(m, s.z.ncols());
    let mut d_diag = DVector::zeros(m);
    for (out, &r) in rows.iter().enumerate() {
        x.row_mut(out).copy_from(&x_full.row(r));
        z.row_mut(out).copy_from(&s.z.row(r));
        d_diag[out] = s.d_diag[r];
    }
    SubjectPart { subject_index, rows: rows.to_vec(), x, z, d_diag }
}

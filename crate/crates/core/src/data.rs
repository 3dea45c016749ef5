//! Incomplete longitudinal data: subjects observed over occasions, with
//! per-cell missingness for responses and covariates.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a covariate varies over occasions within a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    TimeInvariant,
    TimeVarying,
}

/// Names, kinds, and missability of the p covariates.
///
/// Time-invariant covariates come first (positions `0..p1`); covariates that
/// are known by design (intercept, time, treatment arm) are declared
/// non-missable and reject NA tokens at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub names: Vec<String>,
    pub kinds: Vec<CovariateKind>,
    pub missable: Vec<bool>,
}

impl CovariateSpec {
    pub fn new(
        names: Vec<String>,
        kinds: Vec<CovariateKind>,
        missable: Vec<bool>,
    ) -> Result<Self> {
        if names.len() != kinds.len() || names.len() != missable.len() {
            return Err(Error::Validation(
                "covariate spec fields must have equal length".into(),
            ));
        }
        if names.is_empty() {
            return Err(Error::Validation("covariate spec is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(Error::Validation(format!("duplicate covariate name `{n}`")));
            }
        }
        // Time-invariant block must be a prefix.
        let p1 = kinds
            .iter()
            .take_while(|k| **k == CovariateKind::TimeInvariant)
            .count();
        if kinds[p1..].iter().any(|k| *k == CovariateKind::TimeInvariant) {
            return Err(Error::Validation(
                "time-invariant covariates must be listed before time-varying ones".into(),
            ));
        }
        Ok(Self { names, kinds, missable })
    }

    /// Total number of covariates p.
    pub fn p(&self) -> usize {
        self.names.len()
    }

    /// Number of time-invariant covariates p1 (a prefix of the list).
    pub fn p1(&self) -> usize {
        self.kinds
            .iter()
            .take_while(|k| **k == CovariateKind::TimeInvariant)
            .count()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// One measurement occasion of a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Occasion {
    /// Occasion index t (1-based in the data; gaps allowed).
    pub t: u32,
    pub response: Option<f64>,
    /// Length-p vector; `None` marks a missing cell.
    pub covariates: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub occasions: Vec<Occasion>,
}

/// Validated longitudinal dataset. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    covariate_spec: CovariateSpec,
    response_name: String,
    /// Rows dropped at load because every field was missing.
    dropped_empty_rows: usize,
}

impl LongitudinalDataset {
    /// Builds and validates a dataset from subject records.
    pub fn new(
        subjects: Vec<SubjectRecord>,
        covariate_spec: CovariateSpec,
        response_name: String,
    ) -> Result<Self> {
        Self::with_dropped(subjects, covariate_spec, response_name, 0)
    }

    fn with_dropped(
        subjects: Vec<SubjectRecord>,
        covariate_spec: CovariateSpec,
        response_name: String,
        dropped_empty_rows: usize,
    ) -> Result<Self> {
        let p = covariate_spec.p();
        let p1 = covariate_spec.p1();
        let mut ids = BTreeSet::new();
        for s in &subjects {
            if !ids.insert(s.subject_id.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate subject id `{}`",
                    s.subject_id
                )));
            }
            if s.occasions.is_empty() {
                return Err(Error::Validation(format!(
                    "subject `{}` has no occasions",
                    s.subject_id
                )));
            }
            let mut last_t: Option<u32> = None;
            for occ in &s.occasions {
                if occ.covariates.len() != p {
                    return Err(Error::Validation(format!(
                        "subject `{}` t={} has {} covariates, spec has {}",
                        s.subject_id,
                        occ.t,
                        occ.covariates.len(),
                        p
                    )));
                }
                if let Some(prev) = last_t {
                    if occ.t <= prev {
                        return Err(Error::Validation(format!(
                            "subject `{}`: occasion indices must be unique and ascending (t={} after t={prev})",
                            s.subject_id, occ.t
                        )));
                    }
                }
                last_t = Some(occ.t);
                if occ.response.is_none() && occ.covariates.iter().all(Option::is_none) {
                    return Err(Error::Validation(format!(
                        "subject `{}` t={}: no observed value in retained row",
                        s.subject_id, occ.t
                    )));
                }
                for (k, v) in occ.covariates.iter().enumerate() {
                    if v.is_none() && !covariate_spec.missable[k] {
                        return Err(Error::Validation(format!(
                            "subject `{}` t={}: covariate `{}` is not missable but is missing",
                            s.subject_id, occ.t, covariate_spec.names[k]
                        )));
                    }
                }
            }
            // Time-invariant covariates: identical value or identically missing.
            for k in 0..p1 {
                let first = s.occasions[0].covariates[k];
                for occ in &s.occasions[1..] {
                    let same = match (first, occ.covariates[k]) {
                        (None, None) => true,
                        (Some(a), Some(b)) => a == b,
                        _ => false,
                    };
                    if !same {
                        return Err(Error::Validation(format!(
                            "subject `{}`: time-invariant covariate `{}` varies across occasions",
                            s.subject_id, covariate_spec.names[k]
                        )));
                    }
                }
            }
        }
        Ok(Self {
            subjects,
            covariate_spec,
            response_name,
            dropped_empty_rows,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn covariate_spec(&self) -> &CovariateSpec {
        &self.covariate_spec
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn dropped_empty_rows(&self) -> usize {
        self.dropped_empty_rows
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Total number of occasions N.
    pub fn n_occasions(&self) -> usize {
        self.subjects.iter().map(|s| s.occasions.len()).sum()
    }

    /// Largest occasion index T over all subjects.
    pub fn t_max(&self) -> u32 {
        self.subjects
            .iter()
            .flat_map(|s| s.occasions.iter().map(|o| o.t))
            .max()
            .unwrap_or(0)
    }

    pub fn has_missing_covariates(&self) -> bool {
        self.subjects.iter().any(|s| {
            s.occasions
                .iter()
                .any(|o| o.covariates.iter().any(Option::is_none))
        })
    }

    pub fn has_missing_responses(&self) -> bool {
        self.subjects
            .iter()
            .any(|s| s.occasions.iter().any(|o| o.response.is_none()))
    }

    /// Serializes to long-format CSV (`subject,time,<response>,<cov...>`).
    pub fn to_csv_string(&self, na_token: &str) -> String {
        let mut out = String::new();
        out.push_str("subject,time,");
        out.push_str(&self.response_name);
        for n in &self.covariate_spec.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for s in &self.subjects {
            for occ in &s.occasions {
                write!(out, "{},{}", s.subject_id, occ.t).unwrap();
                match occ.response {
                    Some(v) => write!(out, ",{}", fmt_cell(v)).unwrap(),
                    None => write!(out, ",{na_token}").unwrap(),
                }
                for c in &occ.covariates {
                    match c {
                        Some(v) => write!(out, ",{}", fmt_cell(*v)).unwrap(),
                        None => write!(out, ",{na_token}").unwrap(),
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path, na_token: &str) -> Result<()> {
        std::fs::write(path, self.to_csv_string(na_token))?;
        Ok(())
    }
}

// Round-trippable float formatting for CSV cells.
fn fmt_cell(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Loads a long-format CSV into a dataset.
///
/// One occasion per row; cells equal to `na_token` become missing values.
/// Rows where the response and every covariate are missing are dropped and
/// counted, not treated as errors.
pub fn load_csv(path: &Path, spec: &CovariateSpec, na_token: &str) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, spec, na_token, "y")
}

/// Same as [`load_csv`] with an explicit response column name.
pub fn load_csv_named(
    path: &Path,
    spec: &CovariateSpec,
    na_token: &str,
    response_name: &str,
) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, spec, na_token, response_name)
}

pub fn load_csv_reader<R: std::io::Read>(
    reader: R,
    spec: &CovariateSpec,
    na_token: &str,
    response_name: &str,
) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("missing column `{name}` in header")))
    };
    let subj_col = col("subject")?;
    let time_col = col("time")?;
    let resp_col = col(response_name)?;
    let cov_cols: Vec<usize> = spec
        .names
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>>>()?;

    // Preserve first-appearance subject order.
    let mut order: Vec<String> = Vec::new();
    let mut by_subject: std::collections::HashMap<String, Vec<Occasion>> =
        std::collections::HashMap::new();
    let mut dropped = 0usize;

    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2; // header is line 1
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let get = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::Parse {
                line,
                msg: format!("row has {} fields, expected at least {}", rec.len(), c + 1),
            })
        };
        let subject = get(subj_col)?.to_string();
        let t: u32 = get(time_col)?.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("invalid time `{}`", get(time_col).unwrap_or("")),
        })?;
        let parse_cell = |c: usize| -> Result<Option<f64>> {
            let raw = get(c)?;
            if raw == na_token {
                return Ok(None);
            }
            raw.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                line,
                msg: format!("invalid numeric value `{raw}`"),
            })
        };
        let response = parse_cell(resp_col)?;
        let covariates: Vec<Option<f64>> = cov_cols
            .iter()
            .map(|&c| parse_cell(c))
            .collect::<Result<Vec<_>>>()?;

        if response.is_none() && covariates.iter().all(Option::is_none) {
            dropped += 1;
            continue;
        }
        for (k, v) in covariates.iter().enumerate() {
            if v.is_none() && !spec.missable[k] {
                return Err(Error::Validation(format!(
                    "line {line}: covariate `{}` is not missable but has NA",
                    spec.names[k]
                )));
            }
        }

        let occs = by_subject.entry(subject.clone()).or_insert_with(|| {
            order.push(subject.clone());
            Vec::new()
        });
        if occs.iter().any(|o| o.t == t) {
            return Err(Error::Validation(format!(
                "duplicate (subject={subject}, time={t})"
            )));
        }
        occs.push(Occasion { t, response, covariates });
    }

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut occs = by_subject.remove(&id).unwrap();
        occs.sort_by_key(|o| o.t);
        subjects.push(SubjectRecord { subject_id: id, occasions: occs });
    }
    if subjects.is_empty() {
        return Err(Error::Validation("no data rows".into()));
    }
    LongitudinalDataset::with_dropped(subjects, spec.clone(), response_name.to_string(), dropped)
}

/// Missing-covariate index sets per subject and occasion, plus response flags.
///
/// Indices are 0-based positions into the covariate spec. For subject i and
/// occasion t: `m_it` holds all missing covariates, `m_i` the missing
/// time-invariant ones (constant over t), and `m_it2` the missing
/// time-varying ones, so `m_it` is the disjoint union of `m_i` and `m_it2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingPattern {
    pub p: usize,
    pub p1: usize,
    /// Per subject: missing time-invariant covariates M_i.
    pub subject_level: Vec<BTreeSet<usize>>,
    /// Per subject, per occasion: all missing covariates M_it.
    pub per_occasion: Vec<Vec<BTreeSet<usize>>>,
    /// Per subject, per occasion: missing time-varying covariates M_it,2.
    pub time_varying: Vec<Vec<BTreeSet<usize>>>,
    /// Per subject, per occasion: response missing flag.
    pub response_missing: Vec<Vec<bool>>,
}

impl MissingPattern {
    pub fn all_observed(&self) -> bool {
        self.per_occasion
            .iter()
            .all(|s| s.iter().all(|m| m.is_empty()))
    }
}

/// Extracts the missing pattern of a dataset. Total on valid datasets.
pub fn missing_pattern(data: &LongitudinalDataset) -> MissingPattern {
    let p = data.covariate_spec().p();
    let p1 = data.covariate_spec().p1();
    let mut subject_level = Vec::with_capacity(data.n_subjects());
    let mut per_occasion = Vec::with_capacity(data.n_subjects());
    let mut time_varying = Vec::with_capacity(data.n_subjects());
    let mut response_missing = Vec::with_capacity(data.n_subjects());

    for s in data.subjects() {
        let mut m_i: BTreeSet<usize> = BTreeSet::new();
        let mut m_it_all = Vec::with_capacity(s.occasions.len());
        let mut m_it2_all = Vec::with_capacity(s.occasions.len());
        let mut resp = Vec::with_capacity(s.occasions.len());
        for occ in &s.occasions {
            let m_it: BTreeSet<usize> = occ
                .covariates
                .iter()
                .enumerate()
                .filter_map(|(k, v)| v.is_none().then_some(k))
                .collect();
            let m_it2: BTreeSet<usize> = m_it.iter().copied().filter(|&k| k >= p1).collect();
            m_i.extend(m_it.iter().copied().filter(|&k| k < p1));
            m_it_all.push(m_it);
            m_it2_all.push(m_it2);
            resp.push(occ.response.is_none());
        }
        // The dataset invariant (identically missing time-invariant cells)
        // makes M_i = M_it ∩ {1..p1} for every t.
        debug_assert!(m_it_all.iter().all(|m_it| {
            m_it.iter().copied().filter(|&k| k < p1).collect::<BTreeSet<_>>() == m_i
        }));
        subject_level.push(m_i);
        per_occasion.push(m_it_all);
        time_varying.push(m_it2_all);
        response_missing.push(resp);
    }

    MissingPattern {
        p,
        p1,
        subject_level,
        per_occasion,
        time_varying,
        response_missing,
    }
}

/// Keeps exactly the occasions with no missing covariate and an observed
/// response; subjects left with zero occasions are dropped.
pub fn complete_records(data: &LongitudinalDataset) -> Result<LongitudinalDataset> {
    let mut subjects = Vec::new();
    for s in data.subjects() {
        let occs: Vec<Occasion> = s
            .occasions
            .iter()
            .filter(|o| o.response.is_some() && o.covariates.iter().all(Option::is_some))
            .cloned()
            .collect();
        if !occs.is_empty() {
            subjects.push(SubjectRecord {
                subject_id: s.subject_id.clone(),
                occasions: occs,
            });
        }
    }
    if subjects.is_empty() {
        return Err(Error::NoCompleteRecords);
    }
    LongitudinalDataset::new(
        subjects,
        data.covariate_spec().clone(),
        data.response_name().to_string(),
    )
}

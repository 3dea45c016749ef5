//! Random-effects analysis of incomplete longitudinal data under linear
//! mixed models.
//!
//! A dataset with missing covariates is transformed into a completed LMM
//! whose indicator fixed effects, extra random effect, and heteroskedastic
//! errors absorb the missing contributions; missing responses are handled
//! by best prediction from the observed ones. The crate provides the
//! transform, a block-diagonal REML/GLS engine, the four estimator
//! pipelines (FULL, CDOE, CCE, CCPE), a Monte Carlo harness, and numerical
//! checks of the asymptotic efficiency comparisons.

pub mod completion;
pub mod data;
pub mod engine;
pub mod error;
mod optim;
pub mod predict;
pub mod rng;
pub mod sim;
pub mod theory;

pub use completion::{
    build_completed_design, partition_by_response, stack_design, CompletedDesign,
    IndicatorColumn, ZSpec,
};
pub use data::{
    complete_records, load_csv, load_csv_named, missing_pattern, CovariateKind, CovariateSpec,
    LongitudinalDataset, MissingPattern, Occasion, SubjectRecord,
};
pub use engine::{
    assemble_v, gls, reml_fit, reml_fit_design, Criterion, FitBlocks, FitFlag, FitResult,
    OptimizerOptions, ProfileContext, VarianceComponents,
};
pub use error::{Error, Result};
pub use predict::{best_predictor, ebp, run_pipeline, EstimatorReport, Method, PipelineOptions, PredictionResult};
pub use sim::{
    apply_mdm, expit, fmt_sig6, generate_complete, run_monte_carlo, run_monte_carlo_with,
    McReport, SimConfig,
};
pub use theory::{
    quadratic_form_expansion_check, sigma_cce, sigma_cdoe, ytilde_singularity_check,
    EfficiencyReport,
};

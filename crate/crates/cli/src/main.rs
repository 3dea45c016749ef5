//! Command-line surface: `fit`, `simulate`, `covcheck`, `predict`.
//!
//! Exit codes are a stable scripting contract:
//! 0 success, 2 config/validation error, 3 numerical failure,
//! 4 infeasible method.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use relmm::{fmt_sig6, Error as CoreError};

const EXIT_OK: i32 = 0;
const EXIT_CONFIG: i32 = 2;
const EXIT_NUMERICAL: i32 = 3;
const EXIT_INFEASIBLE: i32 = 4;

#[derive(Debug)]
struct CmdError {
    code: i32,
    msg: String,
}

impl CmdError {
    fn config(msg: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, msg: msg.into() }
    }
}

impl From<CoreError> for CmdError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Parse { .. } | CoreError::Validation(_) | CoreError::Io(_) => EXIT_CONFIG,
            CoreError::Numerical(_) | CoreError::RankDeficient { .. } => EXIT_NUMERICAL,
            CoreError::NoCompleteRecords
            | CoreError::NoObservedResponses
            | CoreError::Infeasible(_) => EXIT_INFEASIBLE,
        };
        Self { code, msg: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "relmm", version, about = "Linear mixed model analysis of incomplete longitudinal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Run configuration file (TOML); flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for result files and the config echo.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel replication (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one estimator to a CSV dataset and write the estimates table.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// Long-format CSV: subject,time,<response>,<covariates...>.
        #[arg(long)]
        data: PathBuf,
        /// Estimator: CDOE, CCE, or CCPE.
        #[arg(long, default_value = "CCE")]
        method: String,
    },
    /// Run a Monte Carlo study and write the aggregate report.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Study preset: table1 (missing covariates only) or table2
        /// (missing covariates and responses).
        #[arg(long, default_value = "table1")]
        preset: String,
        /// Number of subjects.
        #[arg(long)]
        m: Option<usize>,
        /// Number of replications.
        #[arg(long)]
        nsim: Option<usize>,
        /// Comma-separated methods, e.g. FULL,CDOE,CCE.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Check the asymptotic covariance ordering on designs.
    Covcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Design source preset (table1 or table2); ignored with --data.
        #[arg(long, default_value = "table1")]
        preset: String,
        #[arg(long)]
        m: Option<usize>,
        /// Number of seeded designs to check.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Check a user CSV instead of generated designs.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write empirical best predictions of the missing responses.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Fit { common, data, method } => with_pool(&common, |c| cmd_fit(c, &data, &method)),
        Command::Simulate { common, preset, m, nsim, methods } => {
            with_pool(&common, |c| cmd_simulate(c, &preset, m, nsim, methods.as_deref()))
        }
        Command::Covcheck { common, preset, m, seeds, data } => {
            with_pool(&common, |c| cmd_covcheck(c, &preset, m, seeds, data.as_deref()))
        }
        Command::Predict { common, data } => with_pool(&common, |c| cmd_predict(c, &data)),
    }
}

fn with_pool<F>(common: &CommonArgs, f: F) -> Result<(), CmdError>
where
    F: FnOnce(&CommonArgs) -> Result<(), CmdError> + Send,
{
    std::fs::create_dir_all(&common.out)
        .map_err(|e| CmdError::config(format!("cannot create output dir: {e}")))?;
    match common.jobs {
        None => f(common),
        Some(n) => {
            if n == 0 {
                return Err(CmdError::config("--jobs must be positive"));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CmdError::config(format!("cannot build thread pool: {e}")))?;
            pool.install(|| f(common))
        }
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), CmdError> {
    std::fs::write(dir.join(name), contents)
        .map_err(|e| CmdError::config(format!("cannot write {name}: {e}")))
}

fn echo_config<T: serde::Serialize>(dir: &Path, echo: &T) -> Result<(), CmdError> {
    let text = toml::to_string_pretty(echo)
        .map_err(|e| CmdError::config(format!("config echo serialization: {e}")))?;
    write_out(dir, "config_echo.toml", &text)
}

#[derive(serde::Serialize)]
struct FitEcho<'a> {
    command: &'a str,
    data: String,
    method: String,
    seed: Option<u64>,
    jobs: Option<usize>,
    config: config::FileConfig,
}

fn cmd_fit(common: &CommonArgs, data_path: &Path, method: &str) -> Result<(), CmdError> {
    let method: relmm::Method =
        method.parse().map_err(|e: CoreError| CmdError::config(e.to_string()))?;
    if method == relmm::Method::Full {
        return Err(CmdError {
            code: EXIT_INFEASIBLE,
            msg: "FULL is a simulation-only reference; use CDOE, CCE, or CCPE on data".into(),
        });
    }
    let file = config::FileConfig::load(common.config.as_deref()).map_err(CmdError::config)?;
    let spec = file.covariate_spec().map_err(CmdError::config)?;
    let z_spec = file.z_spec(&spec).map_err(CmdError::config)?;
    let optimizer = file.optimizer.to_options().map_err(CmdError::config)?;
    let data = relmm::load_csv_named(data_path, &spec, &file.data.na_token, &file.data.response)?;

    let opts = relmm::PipelineOptions { optimizer, z_spec, ..Default::default() };
    let report = relmm::run_pipeline(method, &data, &opts)?;

    let flags: Vec<String> = report.fit.flags.iter().map(|f| f.to_string()).collect();
    let flag_str = flags.join(";");
    let mut csv = String::from("term,estimate,se,flag\n");
    for (j, name) in report.fit.term_names.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{}",
            name,
            fmt_sig6(report.fit.b_hat[j]),
            fmt_sig6(report.fit.se_b[j]),
            flag_str
        )
        .unwrap();
    }
    write_out(&common.out, "estimates.csv", &csv)?;

    let psi = &report.fit.psi_hat;
    let mut summary = String::new();
    writeln!(summary, "method: {}", report.method).unwrap();
    writeln!(summary, "criterion: {}", report.fit.criterion).unwrap();
    writeln!(summary, "converged: {}", report.fit.converged).unwrap();
    writeln!(summary, "iterations: {}", report.fit.iterations).unwrap();
    writeln!(summary, "loglik: {}", fmt_sig6(report.fit.loglik)).unwrap();
    writeln!(summary, "sigma_alpha2 (G diag): {}", fmt_sig6(psi.g.diagonal().sum())).unwrap();
    writeln!(summary, "sigma_gamma2: {}", fmt_sig6(psi.sigma_gamma2)).unwrap();
    writeln!(summary, "sigma_delta2: {}", fmt_sig6(psi.sigma_delta2)).unwrap();
    writeln!(summary, "sigma_eps2: {}", fmt_sig6(psi.sigma_eps2)).unwrap();
    writeln!(summary, "flags: {flag_str}").unwrap();
    write_out(&common.out, "fit_summary.txt", &summary)?;

    echo_config(
        &common.out,
        &FitEcho {
            command: "fit",
            data: data_path.display().to_string(),
            method: method.to_string(),
            seed: common.seed,
            jobs: common.jobs,
            config: file,
        },
    )?;

    if !report.fit.converged {
        return Err(CmdError { code: EXIT_NUMERICAL, msg: "fit did not converge".into() });
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct SimulateEcho<'a> {
    command: &'a str,
    preset: String,
    jobs: Option<usize>,
    sim: relmm::SimConfig,
}

fn cmd_simulate(
    common: &CommonArgs,
    preset: &str,
    m: Option<usize>,
    nsim: Option<usize>,
    methods: Option<&str>,
) -> Result<(), CmdError> {
    let file = config::FileConfig::load(common.config.as_deref()).map_err(CmdError::config)?;
    let cfg = file
        .sim_config(preset, m, nsim, common.seed, methods)
        .map_err(CmdError::config)?;
    cfg.validate()?;
    let optimizer = file.optimizer.to_options().map_err(CmdError::config)?;
    let opts = relmm::PipelineOptions { optimizer, ..Default::default() };

    let report = relmm::run_monte_carlo_with(&cfg, &opts)?;
    write_out(&common.out, "mc_report.csv", &report.to_csv())?;
    write_out(&common.out, "mc_table.txt", &report.to_table())?;
    echo_config(
        &common.out,
        &SimulateEcho {
            command: "simulate",
            preset: preset.to_string(),
            jobs: common.jobs,
            sim: cfg,
        },
    )?;

    let failures: usize = report.failures.values().sum();
    if failures > 0 {
        eprintln!(
            "note: {failures} replication failures were dropped and counted (see mc_report.csv n_ok)"
        );
    }
    println!("{}", report.to_table());
    Ok(())
}

#[derive(serde::Serialize)]
struct CovcheckEcho<'a> {
    command: &'a str,
    preset: String,
    m: usize,
    seeds: u64,
    seed: Option<u64>,
    data: Option<String>,
}

fn cmd_covcheck(
    common: &CommonArgs,
    preset: &str,
    m: Option<usize>,
    seeds: u64,
    data: Option<&Path>,
) -> Result<(), CmdError> {
    let file = config::FileConfig::load(common.config.as_deref()).map_err(CmdError::config)?;
    let mut csv = String::from(
        "seed,m,min_eig_diff,inequality_holds,route_err,qf_max_err,qf_ok,ytilde_rank,ytilde_n_obs,rank_ok\n",
    );
    let mut all_ok = true;

    let mut run_one = |label: u64,
                       dataset: &relmm::LongitudinalDataset,
                       z_spec: &relmm::ZSpec,
                       vc: &relmm::VarianceComponents,
                       csv: &mut String,
                       all_ok: &mut bool|
     -> Result<(), CmdError> {
        let eff = relmm::theory::efficiency_report(dataset, z_spec, vc)?;
        let pattern = relmm::missing_pattern(dataset);
        let design = relmm::build_completed_design(dataset, &pattern, z_spec)?;
        let qf = relmm::quadratic_form_expansion_check(&design, vc)?;
        let yt = relmm::ytilde_singularity_check(&design, vc)?;
        let rank_ok = yt.rank == yt.n_observed;
        *all_ok &= eff.inequality_holds && qf.ok && rank_ok;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            label,
            dataset.n_subjects(),
            fmt_sig6(eff.min_eig_diff),
            eff.inequality_holds,
            fmt_sig6(eff.route_consistency_error()),
            fmt_sig6(qf.max_abs_err),
            qf.ok,
            yt.rank,
            yt.n_observed,
            rank_ok
        )
        .unwrap();
        Ok(())
    };

    let m_val;
    match data {
        Some(path) => {
            let spec = file.covariate_spec().map_err(CmdError::config)?;
            let z_spec = file.z_spec(&spec).map_err(CmdError::config)?;
            let optimizer = file.optimizer.to_options().map_err(CmdError::config)?;
            let dataset =
                relmm::load_csv_named(path, &spec, &file.data.na_token, &file.data.response)?;
            // Evaluate at the completed-model REML estimates from this data.
            let opts = relmm::PipelineOptions {
                optimizer,
                z_spec: z_spec.clone(),
                ..Default::default()
            };
            let cce = relmm::run_pipeline(relmm::Method::Cce, &dataset, &opts)?;
            m_val = dataset.n_subjects();
            run_one(0, &dataset, &z_spec, &cce.fit.psi_hat, &mut csv, &mut all_ok)?;
        }
        None => {
            let base_seed = common.seed.unwrap_or(1);
            let cfg = file
                .sim_config(preset, m, None, Some(base_seed), None)
                .map_err(CmdError::config)?;
            m_val = cfg.m;
            let vc = cfg.completion_vc();
            for s in 0..seeds {
                let mut c = cfg.clone();
                c.seed = base_seed.wrapping_add(s);
                let (full, _) = relmm::generate_complete(&c, 0);
                let (masked, _) = relmm::apply_mdm(&full, &c, 0)?;
                run_one(c.seed, &masked, &relmm::ZSpec::default(), &vc, &mut csv, &mut all_ok)?;
            }
        }
    }

    write_out(&common.out, "covcheck.csv", &csv)?;
    echo_config(
        &common.out,
        &CovcheckEcho {
            command: "covcheck",
            preset: preset.to_string(),
            m: m_val,
            seeds,
            seed: common.seed,
            data: data.map(|p| p.display().to_string()),
        },
    )?;

    if all_ok {
        println!("covcheck: PASS (all designs satisfy the covariance ordering)");
        Ok(())
    } else {
        println!("covcheck: FAIL (see covcheck.csv)");
        Err(CmdError { code: EXIT_NUMERICAL, msg: "covariance ordering violated".into() })
    }
}

#[derive(serde::Serialize)]
struct PredictEcho<'a> {
    command: &'a str,
    data: String,
    config: config::FileConfig,
}

fn cmd_predict(common: &CommonArgs, data_path: &Path) -> Result<(), CmdError> {
    let file = config::FileConfig::load(common.config.as_deref()).map_err(CmdError::config)?;
    let spec = file.covariate_spec().map_err(CmdError::config)?;
    let z_spec = file.z_spec(&spec).map_err(CmdError::config)?;
    let optimizer = file.optimizer.to_options().map_err(CmdError::config)?;
    let data = relmm::load_csv_named(data_path, &spec, &file.data.na_token, &file.data.response)?;

    let pattern = relmm::missing_pattern(&data);
    let design = relmm::build_completed_design(&data, &pattern, &z_spec)?;
    let opts = relmm::PipelineOptions { optimizer, z_spec, ..Default::default() };
    let pred = relmm::ebp(&design, &opts)?;

    let mut csv = String::from("subject,time,ebp\n");
    for (loc, v) in pred.locations.iter().zip(pred.y_m_hat.iter()) {
        writeln!(csv, "{},{},{}", loc.subject_id, loc.t, fmt_sig6(*v)).unwrap();
    }
    write_out(&common.out, "predictions.csv", &csv)?;
    echo_config(
        &common.out,
        &PredictEcho { command: "predict", data: data_path.display().to_string(), config: file },
    )?;
    println!("wrote {} predictions", pred.y_m_hat.len());
    Ok(())
}

//! TOML run configuration with CLI-flag overrides (flags win).

use std::path::Path;

use relmm::{Criterion, CovariateKind, CovariateSpec, Method, OptimizerOptions, SimConfig, ZSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default, rename = "covariate")]
    pub covariates: Vec<CovariateEntry>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub z: ZSection,
    #[serde(default)]
    pub sim: SimSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_response")]
    pub response: String,
    #[serde(default = "default_na")]
    pub na_token: String,
}

fn default_response() -> String {
    "y".into()
}

fn default_na() -> String {
    "NA".into()
}

impl Default for DataSection {
    fn default() -> Self {
        Self { response: default_response(), na_token: default_na() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateEntry {
    pub name: String,
    pub kind: CovariateKind,
    #[serde(default)]
    pub missable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_criterion")]
    pub criterion: String,
    #[serde(default = "default_floor")]
    pub variance_floor: f64,
}

fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    500
}
fn default_criterion() -> String {
    "REML".into()
}
fn default_floor() -> f64 {
    1e-10
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            criterion: default_criterion(),
            variance_floor: default_floor(),
        }
    }
}

impl OptimizerSection {
    pub fn to_options(&self) -> Result<OptimizerOptions, String> {
        let criterion = match self.criterion.to_ascii_uppercase().as_str() {
            "REML" => Criterion::Reml,
            "ML" => Criterion::Ml,
            other => return Err(format!("unknown criterion `{other}` (expected REML or ML)")),
        };
        Ok(OptimizerOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            criterion,
            variance_floor: self.variance_floor,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZSection {
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Covariate names carried into z_it.
    #[serde(default)]
    pub covariates: Vec<String>,
}

fn default_true() -> bool {
    true
}

impl Default for ZSection {
    fn default() -> Self {
        Self { intercept: true, covariates: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub m: Option<usize>,
    pub t_max: Option<u32>,
    pub beta: Option<[f64; 5]>,
    pub sd_alpha: Option<f64>,
    pub sd_eps: Option<f64>,
    pub q_mdm: Option<f64>,
    pub cov_mdm: Option<[f64; 2]>,
    pub resp_mdm: Option<[f64; 3]>,
    pub resp_mdm_observed_only: Option<bool>,
    pub n_sim: Option<usize>,
    pub seed: Option<u64>,
    pub methods: Option<Vec<String>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .map_err(|e| format!("cannot read config `{}`: {e}", p.display()))?;
                toml::from_str(&raw).map_err(|e| format!("config parse error: {e}"))
            }
        }
    }

    pub fn covariate_spec(&self) -> Result<CovariateSpec, String> {
        if self.covariates.is_empty() {
            return Err("config declares no [[covariate]] entries".into());
        }
        CovariateSpec::new(
            self.covariates.iter().map(|c| c.name.clone()).collect(),
            self.covariates.iter().map(|c| c.kind).collect(),
            self.covariates.iter().map(|c| c.missable).collect(),
        )
        .map_err(|e| e.to_string())
    }

    pub fn z_spec(&self, spec: &CovariateSpec) -> Result<ZSpec, String> {
        let mut covariates = Vec::new();
        for name in &self.z.covariates {
            let idx = spec
                .index_of(name)
                .ok_or_else(|| format!("z covariate `{name}` not in covariate spec"))?;
            covariates.push(idx);
        }
        Ok(ZSpec { intercept: self.z.intercept, covariates })
    }

    /// Simulation config from file plus overrides; the preset supplies the
    /// base values.
    pub fn sim_config(
        &self,
        preset: &str,
        m: Option<usize>,
        n_sim: Option<usize>,
        seed: Option<u64>,
        methods: Option<&str>,
    ) -> Result<SimConfig, String> {
        let mut cfg = match preset {
            "table1" => SimConfig::table1(100, 1000, 1),
            "table2" => SimConfig::table2(100, 1000, 1),
            other => return Err(format!("unknown preset `{other}` (expected table1 or table2)")),
        };
        let s = &self.sim;
        if let Some(v) = s.m {
            cfg.m = v;
        }
        if let Some(v) = s.t_max {
            cfg.t_max = v;
        }
        if let Some(v) = s.beta {
            cfg.beta = v;
        }
        if let Some(v) = s.sd_alpha {
            cfg.sd_alpha = v;
        }
        if let Some(v) = s.sd_eps {
            cfg.sd_eps = v;
        }
        if let Some(v) = s.q_mdm {
            cfg.q_mdm = v;
        }
        if let Some(v) = s.cov_mdm {
            cfg.cov_mdm = (v[0], v[1]);
        }
        if let Some(v) = s.resp_mdm {
            cfg.resp_mdm = Some((v[0], v[1], v[2]));
        }
        if let Some(v) = s.resp_mdm_observed_only {
            cfg.resp_mdm_observed_only = v;
        }
        if let Some(v) = s.n_sim {
            cfg.n_sim = v;
        }
        if let Some(v) = s.seed {
            cfg.seed = v;
        }
        if let Some(names) = &s.methods {
            cfg.methods = parse_methods_list(names.iter().map(String::as_str))?;
        }
        // Flags override the file.
        if let Some(v) = m {
            cfg.m = v;
        }
        if let Some(v) = n_sim {
            cfg.n_sim = v;
        }
        if let Some(v) = seed {
            cfg.seed = v;
        }
        if let Some(list) = methods {
            cfg.methods = parse_methods_list(list.split(','))?;
        }
        Ok(cfg)
    }
}

pub fn parse_methods_list<'a>(
    names: impl Iterator<Item = &'a str>,
) -> Result<Vec<Method>, String> {
    let mut out = Vec::new();
    for n in names {
        let trimmed = n.trim();
        if trimmed.is_empty() {
            continue;
        }
        out.push(trimmed.parse::<Method>().map_err(|e| e.to_string())?);
    }
    if out.is_empty() {
        return Err("empty method list".into());
    }
    Ok(out)
}

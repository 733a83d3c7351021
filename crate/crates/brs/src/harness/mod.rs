//! Configuration-driven study harness: replication orchestration over a
//! worker pool, Bias/RMSE/CP/AL aggregation, machine-readable outputs,
//! the empirical study, and a runtime validation suite.

pub mod empirical;
pub mod validate;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{build_standard_agents, predict_agents, AgentDesign, AgentSet};
use crate::datamodel::{standardize, AgentPredictive, Dataset};
use crate::dgp::{generate, SimId, SimSpec};
use crate::drposterior::{
    bootstrap_dr_posterior, combined_dr_inputs, dr_point_equal, ensemble_weights,
    influence_variance, DrInputs, EnsembleMethod,
};
use crate::error::{BrsError, Result};
use crate::rng::derive_seed;
use crate::synthesis::{run_binary_gibbs, run_continuous_gibbs, SynthesisConfig};

/// Current config/output schema version.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Sim1,
    Sim2,
    Sim3,
    Sim4,
    Empirical,
}

impl Study {
    pub fn label(&self) -> &'static str {
        match self {
            Study::Sim1 => "sim1",
            Study::Sim2 => "sim2",
            Study::Sim3 => "sim3",
            Study::Sim4 => "sim4",
            Study::Empirical => "empirical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Glm,
    Gqm,
    Gam,
    M1,
    M2,
    M3,
    Sa,
    Sic,
    Bma,
    Brs,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Glm => "GLM",
            Method::Gqm => "GQM",
            Method::Gam => "GAM",
            Method::M1 => "M1",
            Method::M2 => "M2",
            Method::M3 => "M3",
            Method::Sa => "SA",
            Method::Sic => "SIC",
            Method::Bma => "BMA",
            Method::Brs => "BRS",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_uppercase().as_str() {
            "GLM" => Ok(Method::Glm),
            "GQM" => Ok(Method::Gqm),
            "GAM" => Ok(Method::Gam),
            "M1" => Ok(Method::M1),
            "M2" => Ok(Method::M2),
            "M3" => Ok(Method::M3),
            "SA" => Ok(Method::Sa),
            "SIC" => Ok(Method::Sic),
            "BMA" => Ok(Method::Bma),
            "BRS" => Ok(Method::Brs),
            other => Err(BrsError::Config(format!("unknown method '{other}'"))),
        }
    }

    fn is_single_model(&self) -> bool {
        matches!(
            self,
            Method::Glm | Method::Gqm | Method::Gam | Method::M1 | Method::M2 | Method::M3
        )
    }

    fn sim3_only(&self) -> bool {
        matches!(self, Method::M1 | Method::M2 | Method::M3)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Sampler settings exposed through the config file. Seeds and wall-clock
/// budgets are always harness-controlled.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSettings {
    pub m: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub tau_prior_shape: f64,
    pub tau_prior_scale: f64,
    pub sigma_prior_shape: f64,
    pub sigma_prior_scale: f64,
    pub mh_step: f64,
    pub adapt_mh: bool,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        let c = SynthesisConfig::default();
        SynthesisSettings {
            m: c.m,
            n_iter: c.n_iter,
            burn_in: c.burn_in,
            tau_prior_shape: c.tau_prior_shape,
            tau_prior_scale: c.tau_prior_scale,
            sigma_prior_shape: c.sigma_prior_shape,
            sigma_prior_scale: c.sigma_prior_scale,
            mh_step: c.mh_step,
            adapt_mh: c.adapt_mh,
        }
    }
}

impl SynthesisSettings {
    pub fn to_config(&self, seed: u64, max_seconds: Option<f64>) -> SynthesisConfig {
        SynthesisConfig {
            m: self.m,
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            tau_prior_shape: self.tau_prior_shape,
            tau_prior_scale: self.tau_prior_scale,
            sigma_prior_shape: self.sigma_prior_shape,
            sigma_prior_scale: self.sigma_prior_scale,
            psi_bounds: None,
            mh_step: self.mh_step,
            adapt_mh: self.adapt_mh,
            store_latents: false,
            max_seconds,
            seed,
        }
    }
}

/// Column layout of an ingested data file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
}

impl SchemaConfig {
    pub fn to_schema(&self) -> crate::datamodel::TableSchema {
        crate::datamodel::TableSchema {
            outcome: self.outcome.clone(),
            treatment: self.treatment.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

fn default_parallelism() -> usize {
    1
}

fn default_timeout() -> f64 {
    600.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub format_version: u32,
    pub study: Study,
    #[serde(default)]
    pub n_list: Vec<usize>,
    /// Covariate count for Sim2/Sim4; None uses the study default.
    #[serde(default)]
    pub q: Option<usize>,
    /// Sim2 arms: run with and/or without the hidden-X3 confounding.
    #[serde(default)]
    pub omit_x3_list: Vec<bool>,
    /// Sim3 scenarios (1-4).
    #[serde(default)]
    pub scenario_list: Vec<u8>,
    pub replications: usize,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub synthesis: SynthesisSettings,
    pub base_seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub output_dir: PathBuf,
    /// Empirical study only: the birth-weight data file.
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    /// Empirical study only: column layout override for the data file.
    #[serde(default)]
    pub data_schema: Option<SchemaConfig>,
    #[serde(default = "default_timeout")]
    pub replication_timeout_seconds: f64,
    /// Fault injection for robustness tests: these replication indices
    /// fail deliberately.
    #[serde(default)]
    pub inject_failures: Vec<usize>,
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: StudyConfig =
            toml::from_str(text).map_err(|e| BrsError::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(BrsError::Config(format!(
                "unsupported format_version {}, expected {FORMAT_VERSION}",
                self.format_version
            )));
        }
        if self.methods.is_empty() {
            return Err(BrsError::Config("methods must be nonempty".into()));
        }
        if self.parallelism == 0 {
            return Err(BrsError::Config("parallelism must be >= 1".into()));
        }
        if self.replication_timeout_seconds <= 0.0 {
            return Err(BrsError::Config("replication timeout must be positive".into()));
        }
        for m in &self.methods {
            if m.sim3_only() != (self.study == Study::Sim3) && m.is_single_model() {
                return Err(BrsError::Config(format!(
                    "method {m} is not available for study {}",
                    self.study.label()
                )));
            }
        }
        if self.study == Study::Empirical {
            return Ok(());
        }
        if self.replications == 0 {
            return Err(BrsError::Config("replications must be >= 1".into()));
        }
        if self.n_list.is_empty() {
            return Err(BrsError::Config("n_list must be nonempty".into()));
        }
        if self.study == Study::Sim3 {
            if self.scenario_list.is_empty() {
                return Err(BrsError::Config("sim3 requires scenario_list".into()));
            }
            if self.scenario_list.iter().any(|s| !(1..=4).contains(s)) {
                return Err(BrsError::Config("scenarios must be in 1-4".into()));
            }
        } else if !self.scenario_list.is_empty() {
            return Err(BrsError::Config("scenario_list is sim3-only".into()));
        }
        if self.study != Study::Sim2 && !self.omit_x3_list.is_empty() {
            return Err(BrsError::Config("omit_x3_list is sim2-only".into()));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn q_effective(&self) -> usize {
        self.q.unwrap_or(match self.study {
            Study::Sim4 => 5,
            _ => 4,
        })
    }

    pub fn groups(&self) -> Vec<GroupKey> {
        let scenarios: Vec<Option<u8>> = if self.study == Study::Sim3 {
            self.scenario_list.iter().map(|&s| Some(s)).collect()
        } else {
            vec![None]
        };
        let omits: Vec<bool> = if self.study == Study::Sim2 && !self.omit_x3_list.is_empty() {
            self.omit_x3_list.clone()
        } else {
            vec![false]
        };
        let mut groups = Vec::new();
        for &n in &self.n_list {
            for &scenario in &scenarios {
                for &omit_x3 in &omits {
                    groups.push(GroupKey { n, scenario, omit_x3 });
                }
            }
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupKey {
    pub n: usize,
    pub scenario: Option<u8>,
    pub omit_x3: bool,
}

impl GroupKey {
    /// Scenario column in the outputs: "s{k}" for Sim3, "omit"/"full" for
    /// Sim2, "-" otherwise.
    pub fn scenario_label(&self, study: Study) -> String {
        match study {
            Study::Sim3 => format!("s{}", self.scenario.unwrap_or(0)),
            Study::Sim2 => if self.omit_x3 { "omit" } else { "full" }.to_string(),
            _ => "-".to_string(),
        }
    }

    pub fn seed_label(&self) -> String {
        format!(
            "n{}/s{}/o{}",
            self.n,
            self.scenario.unwrap_or(0),
            u8::from(self.omit_x3)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRecord {
    pub method: Method,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub group: GroupKey,
    pub r: usize,
    pub seed: u64,
    pub runtime_seconds: f64,
    pub result: std::result::Result<Vec<MethodRecord>, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub study: String,
    pub n: usize,
    pub scenario: String,
    pub method: String,
    pub bias: f64,
    pub rmse: f64,
    pub cp_percent: f64,
    pub al: f64,
    pub runtime_seconds: f64,
    pub r_effective: usize,
}

impl MetricsRow {
    pub fn validate(&self) -> Result<()> {
        if self.rmse < self.bias.abs() - 1e-12 {
            return Err(BrsError::Validation(format!(
                "rmse {} below |bias| {}",
                self.rmse, self.bias
            )));
        }
        if !(0.0..=100.0).contains(&self.cp_percent) {
            return Err(BrsError::Validation(format!(
                "coverage {}% outside [0, 100]",
                self.cp_percent
            )));
        }
        Ok(())
    }
}

pub fn replication_seed(base_seed: u64, group: GroupKey, r: usize) -> u64 {
    derive_seed(base_seed, &format!("rep/{}/{r}", group.seed_label()))
}

fn sim_id(study: Study) -> Result<SimId> {
    match study {
        Study::Sim1 => Ok(SimId::Sim1),
        Study::Sim2 => Ok(SimId::Sim2),
        Study::Sim3 => Ok(SimId::Sim3),
        Study::Sim4 => Ok(SimId::Sim4),
        Study::Empirical => Err(BrsError::Config(
            "the empirical study has no data generator".into(),
        )),
    }
}

fn wald_record(method: Method, inputs: &DrInputs) -> Result<MethodRecord> {
    let estimate = dr_point_equal(inputs)?;
    let se = (influence_variance(inputs)? / inputs.n() as f64).sqrt();
    Ok(MethodRecord {
        method,
        estimate,
        se,
        ci_lo: estimate - 1.96 * se,
        ci_hi: estimate + 1.96 * se,
    })
}

fn single_model_inputs(
    method: Method,
    agents: &AgentSet,
    predictives: &(AgentPredictive, AgentPredictive, AgentPredictive),
    data: &Dataset,
) -> Result<DrInputs> {
    let k = agents
        .labels
        .iter()
        .position(|l| l == method.label())
        .ok_or_else(|| {
            BrsError::Config(format!(
                "method {method} has no fitted agent (available: {:?})",
                agents.labels
            ))
        })?;
    let (mu1p, mu0p, pip) = predictives;
    let n = data.n();
    let take = |p: &AgentPredictive| DVector::from_fn(n, |i, _| p.means[(i, k)]);
    DrInputs::new(
        take(mu1p),
        take(mu0p),
        take(pip),
        data.outcomes.clone(),
        data.treatments.clone(),
    )
}

fn ensemble_inputs(method: Method, agents: &AgentSet, data: &Dataset) -> Result<DrInputs> {
    let em = match method {
        Method::Sa => EnsembleMethod::Sa,
        Method::Sic => EnsembleMethod::Sic,
        Method::Bma => EnsembleMethod::Bma,
        other => return Err(BrsError::Config(format!("{other} is not an ensemble"))),
    };
    let j = agents.n_models();
    // Outcome criteria sum the two arm fits (a joint outcome likelihood);
    // propensity criteria come from the propensity fits.
    let aic_out: Vec<f64> = (0..j)
        .map(|k| agents.outcome_treated[k].fit.aic + agents.outcome_control[k].fit.aic)
        .collect();
    let bic_out: Vec<f64> = (0..j)
        .map(|k| agents.outcome_treated[k].fit.bic + agents.outcome_control[k].fit.bic)
        .collect();
    let aic_pi: Vec<f64> = (0..j).map(|k| agents.propensity[k].fit.aic).collect();
    let bic_pi: Vec<f64> = (0..j).map(|k| agents.propensity[k].fit.bic).collect();
    let w_out = ensemble_weights(em, &aic_out, &bic_out)?;
    let w_pi = ensemble_weights(em, &aic_pi, &bic_pi)?;
    combined_dr_inputs(agents, &w_out, &w_pi, data)
}

fn brs_record(
    data: &Dataset,
    predictives: &(AgentPredictive, AgentPredictive, AgentPredictive),
    synth: &SynthesisSettings,
    seed: u64,
    start: Instant,
    budget: Option<f64>,
) -> Result<MethodRecord> {
    let xs = standardize(data);
    let (mu1p, mu0p, pip) = predictives;
    let treated: Vec<bool> = data.treatments.iter().map(|&z| z == 1).collect();
    let control: Vec<bool> = data.treatments.iter().map(|&z| z == 0).collect();
    let remaining = |start: Instant, budget: Option<f64>| {
        budget.map(|b| (b - start.elapsed().as_secs_f64()).max(1.0))
    };
    let cfg = |label: &str| synth.to_config(derive_seed(seed, label), remaining(start, budget));
    let d1 = run_continuous_gibbs(&data.outcomes, &treated, mu1p, &xs, &cfg("synthesis/mu1"))?;
    let d0 = run_continuous_gibbs(&data.outcomes, &control, mu0p, &xs, &cfg("synthesis/mu0"))?;
    let dp = run_binary_gibbs(&data.treatments, pip, &xs, &cfg("synthesis/pi"))?;
    let post = bootstrap_dr_posterior(
        &d1.fitted,
        &d0.fitted,
        &dp.propensity_draws(),
        data,
        derive_seed(seed, "bootstrap"),
    )?;
    Ok(MethodRecord {
        method: Method::Brs,
        estimate: post.point,
        se: post.sd(),
        ci_lo: post.interval.0,
        ci_hi: post.interval.1,
    })
}

/// Run every requested estimator on one dataset.
pub fn estimate_methods(
    data: &Dataset,
    design: AgentDesign,
    methods: &[Method],
    synth: &SynthesisSettings,
    seed: u64,
    budget: Option<f64>,
) -> Result<Vec<MethodRecord>> {
    let start = Instant::now();
    let agents = build_standard_agents(data, design)?;
    let predictives = predict_agents(&agents, &data.covariates)?;
    let mut records = Vec::with_capacity(methods.len());
    for &method in methods {
        if let Some(b) = budget {
            let elapsed = start.elapsed().as_secs_f64();
            if elapsed > b {
                return Err(BrsError::Timeout(elapsed));
            }
        }
        let record = if method.is_single_model() {
            wald_record(method, &single_model_inputs(method, &agents, &predictives, data)?)?
        } else if method == Method::Brs {
            brs_record(data, &predictives, synth, seed, start, budget)?
        } else {
            let mut rec = wald_record(method, &ensemble_inputs(method, &agents, data)?)?;
            rec.method = method;
            rec
        };
        records.push(record);
    }
    Ok(records)
}

/// One seeded replication: generate, fit, estimate. Failures are recorded,
/// not propagated, so a study survives individual bad draws.
pub fn run_replication(config: &StudyConfig, group: GroupKey, r: usize) -> ReplicationRecord {
    let seed = replication_seed(config.base_seed, group, r);
    let start = Instant::now();
    let result = (|| -> Result<Vec<MethodRecord>> {
        if config.inject_failures.contains(&r) {
            return Err(BrsError::Study(format!("injected fault at replication {r}")));
        }
        let spec = SimSpec {
            sim_id: sim_id(config.study)?,
            n: group.n,
            q: config.q_effective(),
            omit_x3: group.omit_x3,
            scenario: group.scenario,
            seed,
        };
        let gen = generate(&spec)?;
        let design = match config.study {
            Study::Sim3 => AgentDesign::Sim3(group.scenario.unwrap_or(1)),
            _ => AgentDesign::GlmGqmGam,
        };
        estimate_methods(
            &gen.data,
            design,
            &config.methods,
            &config.synthesis,
            seed,
            Some(config.replication_timeout_seconds),
        )
    })();
    ReplicationRecord {
        group,
        r,
        seed,
        runtime_seconds: start.elapsed().as_secs_f64(),
        result: result.map_err(|e| e.to_string()),
    }
}

/// Aggregate one group's replications into a metrics row per method.
/// Failed replications are excluded; at least one success is required.
pub fn aggregate_metrics(
    study: Study,
    group: GroupKey,
    records: &[ReplicationRecord],
    true_ate: f64,
) -> Result<Vec<MetricsRow>> {
    let successes: Vec<&ReplicationRecord> =
        records.iter().filter(|r| r.result.is_ok()).collect();
    if successes.is_empty() {
        return Err(BrsError::Study(format!(
            "no successful replications for group {}",
            group.seed_label()
        )));
    }
    let r_eff = successes.len();
    let mean_runtime = successes.iter().map(|r| r.runtime_seconds).sum::<f64>() / r_eff as f64;
    let methods: Vec<Method> = successes[0]
        .result
        .as_ref()
        .map(|recs| recs.iter().map(|m| m.method).collect())
        .unwrap_or_default();
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let mut bias = 0.0;
        let mut mse = 0.0;
        let mut covered = 0usize;
        let mut al = 0.0;
        for rep in &successes {
            let recs = rep.result.as_ref().expect("filtered to successes");
            let rec = recs
                .iter()
                .find(|m| m.method == method)
                .ok_or_else(|| BrsError::Study(format!("method {method} missing in r={}", rep.r)))?;
            let err = rec.estimate - true_ate;
            bias += err;
            mse += err * err;
            if rec.ci_lo <= true_ate && true_ate <= rec.ci_hi {
                covered += 1;
            }
            al += rec.ci_hi - rec.ci_lo;
        }
        let row = MetricsRow {
            study: study.label().to_string(),
            n: group.n,
            scenario: group.scenario_label(study),
            method: method.label().to_string(),
            bias: bias / r_eff as f64,
            rmse: (mse / r_eff as f64).sqrt(),
            cp_percent: 100.0 * covered as f64 / r_eff as f64,
            al: al / r_eff as f64,
            runtime_seconds: mean_runtime,
            r_effective: r_eff,
        };
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

fn run_tasks(config: &StudyConfig, tasks: &[(GroupKey, usize)]) -> Vec<ReplicationRecord> {
    let workers = config.parallelism.min(tasks.len()).max(1);
    if workers == 1 {
        return tasks
            .iter()
            .map(|&(group, r)| run_replication(config, group, r))
            .collect();
    }
    let mut out: Vec<Option<ReplicationRecord>> = vec![None; tasks.len()];
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel();
        for w in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || {
                let mut idx = w;
                while idx < tasks.len() {
                    let (group, r) = tasks[idx];
                    let _ = tx.send((idx, run_replication(config, group, r)));
                    idx += workers;
                }
            });
        }
        drop(tx);
        for (idx, record) in rx {
            out[idx] = Some(record);
        }
    });
    out.into_iter().map(|r| r.expect("all tasks completed")).collect()
}

pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".to_string()
    }
}

fn write_records_file(
    path: &Path,
    study: Study,
    records: &[ReplicationRecord],
) -> Result<()> {
    let mut text = String::from(
        "study,n,scenario,omit_x3,r,seed,method,estimate,se,ci_lo,ci_hi,status,error,runtime_seconds\n",
    );
    for rep in records {
        let prefix = format!(
            "{},{},{},{},{},{}",
            study.label(),
            rep.group.n,
            rep.group.scenario_label(study),
            u8::from(rep.group.omit_x3),
            rep.r,
            rep.seed
        );
        match &rep.result {
            Ok(methods) => {
                for m in methods {
                    text.push_str(&format!(
                        "{prefix},{},{},{},{},{},ok,,{}\n",
                        m.method,
                        fmt_f64(m.estimate),
                        fmt_f64(m.se),
                        fmt_f64(m.ci_lo),
                        fmt_f64(m.ci_hi),
                        fmt_f64(rep.runtime_seconds)
                    ));
                }
            }
            Err(message) => {
                let clean = message.replace([',', '\n'], ";");
                text.push_str(&format!(
                    "{prefix},-,nan,nan,nan,nan,failed,{clean},{}\n",
                    fmt_f64(rep.runtime_seconds)
                ));
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    if field == "nan" {
        return Ok(f64::NAN);
    }
    field.parse::<f64>().map_err(|e| BrsError::Parse {
        row: line,
        column: field.to_string(),
        message: e.to_string(),
    })
}

/// Re-parse a records file written by `write_records_file`.
pub fn read_records(path: &Path) -> Result<Vec<ReplicationRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or_default();
    if !header.starts_with("study,") {
        return Err(BrsError::Schema(format!("unexpected records header: {header}")));
    }
    let mut out: Vec<ReplicationRecord> = Vec::new();
    for (ln, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(BrsError::Parse {
                row: ln,
                column: line.to_string(),
                message: format!("expected 14 fields, got {}", f.len()),
            });
        }
        let group = GroupKey {
            n: f[1].parse().map_err(|_| BrsError::Schema(format!("bad n at line {ln}")))?,
            scenario: f[2].strip_prefix('s').and_then(|s| s.parse().ok()),
            omit_x3: f[3] == "1",
        };
        let r: usize = f[4].parse().map_err(|_| BrsError::Schema(format!("bad r at line {ln}")))?;
        let seed: u64 =
            f[5].parse().map_err(|_| BrsError::Schema(format!("bad seed at line {ln}")))?;
        let runtime = parse_f64(f[13], ln)?;
        let same_rep = out
            .last()
            .map(|prev: &ReplicationRecord| prev.group == group && prev.r == r)
            .unwrap_or(false);
        if f[11] == "failed" {
            out.push(ReplicationRecord {
                group,
                r,
                seed,
                runtime_seconds: runtime,
                result: Err(f[12].to_string()),
            });
            continue;
        }
        let record = MethodRecord {
            method: Method::parse(f[6])?,
            estimate: parse_f64(f[7], ln)?,
            se: parse_f64(f[8], ln)?,
            ci_lo: parse_f64(f[9], ln)?,
            ci_hi: parse_f64(f[10], ln)?,
        };
        if same_rep {
            if let Ok(methods) = out.last_mut().expect("nonempty").result.as_mut() {
                methods.push(record);
                continue;
            }
        }
        out.push(ReplicationRecord {
            group,
            r,
            seed,
            runtime_seconds: runtime,
            result: Ok(vec![record]),
        });
    }
    Ok(out)
}

fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(
        "study,n,scenario,method,bias,rmse,cp_percent,al,runtime_seconds,r_effective\n",
    );
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.study,
            row.n,
            row.scenario,
            row.method,
            fmt_f64(row.bias),
            fmt_f64(row.rmse),
            fmt_f64(row.cp_percent),
            fmt_f64(row.al),
            fmt_f64(row.runtime_seconds),
            row.r_effective
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Re-parse a metrics file written by `write_metrics_file`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or_default();
    if !header.starts_with("study,") {
        return Err(BrsError::Schema(format!("unexpected metrics header: {header}")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(BrsError::Parse {
                row: ln,
                column: line.to_string(),
                message: format!("expected 10 fields, got {}", f.len()),
            });
        }
        rows.push(MetricsRow {
            study: f[0].to_string(),
            n: f[1].parse().map_err(|_| BrsError::Schema(format!("bad n at line {ln}")))?,
            scenario: f[2].to_string(),
            method: f[3].to_string(),
            bias: parse_f64(f[4], ln)?,
            rmse: parse_f64(f[5], ln)?,
            cp_percent: parse_f64(f[6], ln)?,
            al: parse_f64(f[7], ln)?,
            runtime_seconds: parse_f64(f[8], ln)?,
            r_effective: f[9]
                .parse()
                .map_err(|_| BrsError::Schema(format!("bad r_effective at line {ln}")))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SeedEntry {
    pub group: String,
    pub r: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub parallelism: usize,
    pub seeds: Vec<SeedEntry>,
    pub records_file: String,
    pub metrics_file: String,
}

#[derive(Debug)]
pub struct StudySummary {
    pub records_path: PathBuf,
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
    pub metrics: Vec<MetricsRow>,
    pub total_replications: usize,
    pub successful_replications: usize,
}

impl StudySummary {
    pub fn success_fraction(&self) -> f64 {
        self.successful_replications as f64 / self.total_replications as f64
    }
}

/// Run all replications of a simulation study and write the records,
/// metrics, and manifest files. Aggregation is a deterministic reduce in
/// task order, so worker count never changes the estimates.
pub fn run_study(config: &StudyConfig) -> Result<StudySummary> {
    config.validate()?;
    if config.study == Study::Empirical {
        return Err(BrsError::Config(
            "the empirical study runs through run_empirical".into(),
        ));
    }
    fs::create_dir_all(&config.output_dir)?;

    let groups = config.groups();
    let mut tasks = Vec::new();
    for &group in &groups {
        for r in 0..config.replications {
            tasks.push((group, r));
        }
    }
    let records = run_tasks(config, &tasks);

    let mut metrics = Vec::new();
    for &group in &groups {
        let group_records: Vec<ReplicationRecord> = records
            .iter()
            .filter(|rec| rec.group == group)
            .cloned()
            .collect();
        // The generator reports the estimand; a minimal draw fetches it.
        let spec = SimSpec {
            sim_id: sim_id(config.study)?,
            n: 10,
            q: config.q_effective(),
            omit_x3: group.omit_x3,
            scenario: group.scenario,
            seed: 0,
        };
        let true_ate = generate(&spec)?.true_ate;
        metrics.extend(aggregate_metrics(config.study, group, &group_records, true_ate)?);
    }

    let records_path = config.output_dir.join("records.csv");
    let metrics_path = config.output_dir.join("metrics.csv");
    let manifest_path = config.output_dir.join("manifest.json");
    write_records_file(&records_path, config.study, &records)?;
    write_metrics_file(&metrics_path, &metrics)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.config_hash(),
        base_seed: config.base_seed,
        parallelism: config.parallelism,
        seeds: records
            .iter()
            .map(|rec| SeedEntry {
                group: rec.group.seed_label(),
                r: rec.r,
                seed: rec.seed,
            })
            .collect(),
        records_file: "records.csv".to_string(),
        metrics_file: "metrics.csv".to_string(),
    };
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    Ok(StudySummary {
        records_path,
        metrics_path,
        manifest_path,
        metrics,
        total_replications: records.len(),
        successful_replications: records.iter().filter(|r| r.result.is_ok()).count(),
    })
}

/// Diagnostics target for `dump-draws`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpTarget {
    Mu1,
    Mu0,
    Pi,
}

impl DumpTarget {
    pub fn parse(s: &str) -> Result<DumpTarget> {
        match s.to_ascii_lowercase().as_str() {
            "mu1" => Ok(DumpTarget::Mu1),
            "mu0" => Ok(DumpTarget::Mu0),
            "pi" => Ok(DumpTarget::Pi),
            other => Err(BrsError::Config(format!(
                "unknown dump target '{other}' (expected mu1, mu0, or pi)"
            ))),
        }
    }
}

/// Run one synthesis chain on the first replication's data and write the
/// retained draws as a whitespace-free columnar text file.
pub fn dump_draws(config: &StudyConfig, target: DumpTarget, out: &Path) -> Result<()> {
    config.validate()?;
    let group = *config
        .groups()
        .first()
        .ok_or_else(|| BrsError::Config("no study groups configured".into()))?;
    let seed = replication_seed(config.base_seed, group, 0);
    let spec = SimSpec {
        sim_id: sim_id(config.study)?,
        n: group.n,
        q: config.q_effective(),
        omit_x3: group.omit_x3,
        scenario: group.scenario,
        seed,
    };
    let gen = generate(&spec)?;
    let data = &gen.data;
    let design = match config.study {
        Study::Sim3 => AgentDesign::Sim3(group.scenario.unwrap_or(1)),
        _ => AgentDesign::GlmGqmGam,
    };
    let agents = build_standard_agents(data, design)?;
    let (mu1p, mu0p, pip) = predict_agents(&agents, &data.covariates)?;
    let xs = standardize(data);
    let label = match target {
        DumpTarget::Mu1 => "synthesis/mu1",
        DumpTarget::Mu0 => "synthesis/mu0",
        DumpTarget::Pi => "synthesis/pi",
    };
    let cfg = config
        .synthesis
        .to_config(derive_seed(seed, label), Some(config.replication_timeout_seconds));
    let draws = match target {
        DumpTarget::Mu1 => {
            let obs: Vec<bool> = data.treatments.iter().map(|&z| z == 1).collect();
            run_continuous_gibbs(&data.outcomes, &obs, &mu1p, &xs, &cfg)?
        }
        DumpTarget::Mu0 => {
            let obs: Vec<bool> = data.treatments.iter().map(|&z| z == 0).collect();
            run_continuous_gibbs(&data.outcomes, &obs, &mu0p, &xs, &cfg)?
        }
        DumpTarget::Pi => run_binary_gibbs(&data.treatments, &pip, &xs, &cfg)?,
    };

    let b = draws.n_retained();
    let j1 = draws.tau2.ncols();
    let n = draws.fitted.ncols();
    let mut text = String::from("draw");
    if !draws.sigma2.is_empty() {
        text.push_str(",sigma2");
    }
    for p in 0..j1 {
        text.push_str(&format!(",tau2_{p}"));
    }
    for p in 0..j1 {
        text.push_str(&format!(",psi_{p}"));
    }
    for i in 0..n {
        text.push_str(&format!(",fitted_{i}"));
    }
    text.push('\n');
    for it in 0..b {
        text.push_str(&format!("{it}"));
        if !draws.sigma2.is_empty() {
            text.push_str(&format!(",{}", fmt_f64(draws.sigma2[it])));
        }
        for p in 0..j1 {
            text.push_str(&format!(",{}", fmt_f64(draws.tau2[(it, p)])));
        }
        for p in 0..j1 {
            text.push_str(&format!(",{}", fmt_f64(draws.psi[(it, p)])));
        }
        for i in 0..n {
            text.push_str(&format!(",{}", fmt_f64(draws.fitted[(it, i)])));
        }
        text.push('\n');
    }
    fs::write(out, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml(output: &str) -> String {
        format!(
            r#"
format_version = 1
study = "sim1"
n_list = [50]
replications = 3
methods = ["GLM", "SA"]
base_seed = 7
output_dir = "{output}"
"#
        )
    }

    #[test]
    fn config_parses_with_defaults() {
        let config = StudyConfig::from_toml_str(&base_toml("/tmp/out")).unwrap();
        assert_eq!(config.parallelism, 1);
        assert_eq!(config.synthesis.n_iter, 2000);
        assert!(config.inject_failures.is_empty());
        assert_eq!(config.q_effective(), 4);
    }

    #[test]
    fn unknown_keys_and_bad_versions_fail_fast() {
        let text = base_toml("/tmp/out") + "surprise_key = 1\n";
        assert!(matches!(
            StudyConfig::from_toml_str(&text),
            Err(BrsError::Config(_))
        ));
        let text = base_toml("/tmp/out").replace("format_version = 1", "format_version = 9");
        assert!(matches!(
            StudyConfig::from_toml_str(&text),
            Err(BrsError::Config(_))
        ));
    }

    #[test]
    fn method_study_compatibility_is_enforced() {
        let text = base_toml("/tmp/out").replace("\"GLM\", \"SA\"", "\"M3\"");
        assert!(StudyConfig::from_toml_str(&text).is_err());

        let sim3 = r#"
format_version = 1
study = "sim3"
n_list = [200]
scenario_list = [1]
replications = 2
methods = ["GLM"]
base_seed = 7
output_dir = "/tmp/out"
"#;
        assert!(StudyConfig::from_toml_str(sim3).is_err());
        let ok = sim3.replace("\"GLM\"", "\"M1\", \"SA\"");
        assert!(StudyConfig::from_toml_str(&ok).is_ok());
    }

    #[test]
    fn replication_is_deterministic() {
        let config = StudyConfig::from_toml_str(&base_toml("/tmp/out")).unwrap();
        let group = GroupKey { n: 50, scenario: None, omit_x3: false };
        let a = run_replication(&config, group, 0);
        let b = run_replication(&config, group, 0);
        assert_eq!(a.result, b.result);
        assert_eq!(a.seed, b.seed);
    }

    #[test]
    fn aggregate_hand_arithmetic() {
        let group = GroupKey { n: 50, scenario: None, omit_x3: false };
        let rep = |r: usize, est: f64, lo: f64, hi: f64| ReplicationRecord {
            group,
            r,
            seed: r as u64,
            runtime_seconds: 1.0,
            result: Ok(vec![MethodRecord {
                method: Method::Glm,
                estimate: est,
                se: 1.0,
                ci_lo: lo,
                ci_hi: hi,
            }]),
        };
        let records = vec![rep(0, 1.0, 0.0, 4.0), rep(1, 2.0, 3.0, 5.0), rep(2, 3.0, 3.0, 5.0)];
        let rows = aggregate_metrics(Study::Sim1, group, &records, 2.0).unwrap();
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert!(row.bias.abs() < 1e-12);
        assert!((row.rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);

        let two = vec![rep(0, 2.0, 0.0, 4.0), rep(1, 2.0, 3.0, 5.0)];
        let rows = aggregate_metrics(Study::Sim1, group, &two, 2.0).unwrap();
        assert!((rows[0].cp_percent - 50.0).abs() < 1e-12);
        assert!((rows[0].al - 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_requires_a_success() {
        let group = GroupKey { n: 50, scenario: None, omit_x3: false };
        let records = vec![ReplicationRecord {
            group,
            r: 0,
            seed: 0,
            runtime_seconds: 0.1,
            result: Err("boom".into()),
        }];
        assert!(matches!(
            aggregate_metrics(Study::Sim1, group, &records, 0.0),
            Err(BrsError::Study(_))
        ));
    }

    fn strip_runtime(rows: &[MetricsRow]) -> Vec<MetricsRow> {
        rows.iter()
            .map(|r| MetricsRow { runtime_seconds: 0.0, ..r.clone() })
            .collect()
    }

    #[test]
    fn study_outputs_are_parallelism_invariant_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("p1");
        let d2 = dir.path().join("p2");
        let mut config =
            StudyConfig::from_toml_str(&base_toml(d1.to_str().unwrap())).unwrap();
        let s1 = run_study(&config).unwrap();
        config.output_dir = d2;
        config.parallelism = 4;
        let s2 = run_study(&config).unwrap();
        assert_eq!(strip_runtime(&s1.metrics), strip_runtime(&s2.metrics));

        // Round trips through the artifact's own readers.
        let metrics = read_metrics(&s1.metrics_path).unwrap();
        assert_eq!(metrics, s1.metrics);
        let records = read_records(&s1.records_path).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.result.is_ok()));
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&s1.manifest_path).unwrap()).unwrap();
        assert_eq!(manifest.base_seed, 7);
        assert_eq!(manifest.seeds.len(), 3);
        assert_eq!(manifest.config_hash.len(), 64);
    }

    #[test]
    fn injected_faults_are_excluded_from_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let clean_dir = dir.path().join("clean");
        let faulty_dir = dir.path().join("faulty");
        let mut config =
            StudyConfig::from_toml_str(&base_toml(clean_dir.to_str().unwrap())).unwrap();
        let clean = run_study(&config).unwrap();
        config.output_dir = faulty_dir;
        config.inject_failures = vec![1];
        let faulty = run_study(&config).unwrap();
        assert_eq!(faulty.successful_replications, 2);
        assert_eq!(faulty.total_replications, 3);
        assert!(faulty.metrics.iter().all(|m| m.r_effective == 2));
        // The failed replication contributes nothing: aggregates equal a
        // clean run over the surviving indices.
        let group = GroupKey { n: 50, scenario: None, omit_x3: false };
        let survivors: Vec<ReplicationRecord> = [0usize, 2]
            .iter()
            .map(|&r| run_replication(&StudyConfig { inject_failures: vec![], ..config.clone() }, group, r))
            .collect();
        let expected = aggregate_metrics(Study::Sim1, group, &survivors, 0.0).unwrap();
        assert_eq!(strip_runtime(&faulty.metrics), strip_runtime(&expected));
        let _ = clean;
    }

    #[test]
    fn sim2_groups_cover_the_cartesian_grid() {
        let text = r#"
format_version = 1
study = "sim2"
n_list = [200, 1000]
omit_x3_list = [false, true]
replications = 1
methods = ["GLM"]
base_seed = 3
output_dir = "/tmp/out"
"#;
        let config = StudyConfig::from_toml_str(text).unwrap();
        assert_eq!(config.groups().len(), 4);
    }

    #[test]
    fn brs_and_ensembles_run_end_to_end_small() {
        let gen = crate::dgp::gen_sim1(60, 11).unwrap();
        let synth = SynthesisSettings {
            n_iter: 120,
            burn_in: 40,
            ..SynthesisSettings::default()
        };
        let methods = [Method::Glm, Method::Sic, Method::Bma, Method::Brs];
        let records = estimate_methods(
            &gen.data,
            AgentDesign::GlmGqmGam,
            &methods,
            &synth,
            99,
            Some(300.0),
        )
        .unwrap();
        assert_eq!(records.len(), 4);
        for rec in &records {
            assert!(rec.estimate.is_finite());
            assert!(rec.ci_lo <= rec.estimate && rec.estimate <= rec.ci_hi);
            assert!(rec.se > 0.0);
        }
    }

    #[test]
    fn dump_draws_writes_columnar_file() {
        let dir = tempfile::tempdir().unwrap();
        let text = base_toml(dir.path().to_str().unwrap())
            + "[synthesis]\nn_iter = 60\nburn_in = 20\n";
        let config = StudyConfig::from_toml_str(&text).unwrap();
        let out = dir.path().join("draws.csv");
        dump_draws(&config, DumpTarget::Pi, &out).unwrap();
        let body = fs::read_to_string(&out).unwrap();
        let mut lines = body.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("draw,tau2_0"));
        assert_eq!(lines.count(), 40);
    }
}

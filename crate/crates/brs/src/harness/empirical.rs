//! Single-dataset empirical study on the birth-weight data: all seven
//! doubly robust estimators plus the naive group-mean difference.

use std::fs;
use std::path::Path;

use crate::agents::AgentDesign;
use crate::datamodel::{load_table, Dataset, TableSchema};
use crate::error::{BrsError, Result};
use crate::harness::{estimate_methods, fmt_f64, Method, StudyConfig};

/// Column layout of the public birth-weight file: outcome in grams,
/// 0/1 smoking indicator, and ten numeric covariates.
pub fn birthweight_schema() -> TableSchema {
    TableSchema {
        outcome: "bweight".into(),
        treatment: "mbsmoke".into(),
        covariates: vec![
            "mage".into(),
            "medu".into(),
            "fedu".into(),
            "nprenatal".into(),
            "monthslb".into(),
            "deadkids".into(),
            "mmarried".into(),
            "alcohol".into(),
            "mrace".into(),
            "fbaby".into(),
        ],
    }
}

fn schema_for(config: &StudyConfig) -> TableSchema {
    config
        .data_schema
        .as_ref()
        .map(|s| s.to_schema())
        .unwrap_or_else(birthweight_schema)
}

fn schema_help(schema: &TableSchema) -> String {
    format!(
        "expected a comma- or tab-delimited table with a header row and columns: \
         {} (grams), {} (0/1), {}",
        schema.outcome,
        schema.treatment,
        schema.covariates.join(", ")
    )
}

#[derive(Debug, Clone)]
pub struct EmpiricalRow {
    pub method: Method,
    pub estimate: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl EmpiricalRow {
    pub fn ci_length(&self) -> f64 {
        self.ci_hi - self.ci_lo
    }
}

#[derive(Debug, Clone)]
pub struct EmpiricalTable {
    pub rows: Vec<EmpiricalRow>,
    /// Simple difference of group means, reported for reference.
    pub naive_difference: f64,
    pub n: usize,
}

impl EmpiricalTable {
    pub fn row(&self, method: Method) -> Option<&EmpiricalRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

fn naive_difference(data: &Dataset) -> f64 {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for (i, &z) in data.treatments.iter().enumerate() {
        sums[z as usize] += data.outcomes[i];
        counts[z as usize] += 1;
    }
    sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64
}

/// Run the empirical study from a config whose `data_path` names the
/// birth-weight file. Methods default to all seven estimators.
pub fn run_empirical(config: &StudyConfig) -> Result<EmpiricalTable> {
    let schema = schema_for(config);
    let path = config.data_path.as_ref().ok_or_else(|| {
        BrsError::Config(format!(
            "the empirical study needs data_path; {}",
            schema_help(&schema)
        ))
    })?;
    if !path.exists() {
        return Err(BrsError::Schema(format!(
            "data file {} not found; {}",
            path.display(),
            schema_help(&schema)
        )));
    }
    let data = load_table(path, &schema)?;
    let methods: Vec<Method> = if config.methods.is_empty() {
        vec![
            Method::Glm,
            Method::Gqm,
            Method::Gam,
            Method::Sa,
            Method::Sic,
            Method::Bma,
            Method::Brs,
        ]
    } else {
        config.methods.clone()
    };
    let records = estimate_methods(
        &data,
        AgentDesign::GlmGqmGam,
        &methods,
        &config.synthesis,
        config.base_seed,
        Some(config.replication_timeout_seconds),
    )?;
    Ok(EmpiricalTable {
        rows: records
            .into_iter()
            .map(|r| EmpiricalRow {
                method: r.method,
                estimate: r.estimate,
                se: r.se,
                ci_lo: r.ci_lo,
                ci_hi: r.ci_hi,
            })
            .collect(),
        naive_difference: naive_difference(&data),
        n: data.n(),
    })
}

/// Write the estimates table as delimiter-separated text.
pub fn write_empirical_table(table: &EmpiricalTable, path: &Path) -> Result<()> {
    let mut text = String::from("method,estimate,se,ci_lo,ci_hi,ci_length\n");
    for row in &table.rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.method,
            fmt_f64(row.estimate),
            fmt_f64(row.se),
            fmt_f64(row.ci_lo),
            fmt_f64(row.ci_hi),
            fmt_f64(row.ci_length())
        ));
    }
    text.push_str(&format!("naive,{},,,,\n", fmt_f64(table.naive_difference)));
    fs::write(path, text)?;
    Ok(())
}

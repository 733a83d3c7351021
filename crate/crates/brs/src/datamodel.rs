//! Core data containers, validation, covariate standardization, and
//! tabular ingestion.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{BrsError, Result};

/// Propensity clipping constant applied to agent propensity means and to
/// synthesized propensity draws before they enter the DR estimator.
pub const CLIP_EPS: f64 = 0.01;

/// Clip a probability into [CLIP_EPS, 1 - CLIP_EPS].
pub fn clip_propensity(p: f64) -> f64 {
    p.clamp(CLIP_EPS, 1.0 - CLIP_EPS)
}

/// Observed triples (Y, X, Z), optionally with the known true ATE
/// (simulations only).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub outcomes: DVector<f64>,
    pub treatments: Vec<u8>,
    pub covariates: DMatrix<f64>,
    pub true_ate: Option<f64>,
    pub column_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        outcomes: DVector<f64>,
        treatments: Vec<u8>,
        covariates: DMatrix<f64>,
        true_ate: Option<f64>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let n = outcomes.len();
        if n < 2 {
            return Err(BrsError::Validation(format!("need at least 2 units, got {n}")));
        }
        if treatments.len() != n || covariates.nrows() != n {
            return Err(BrsError::Validation(format!(
                "length mismatch: {} outcomes, {} treatments, {} covariate rows",
                n,
                treatments.len(),
                covariates.nrows()
            )));
        }
        if column_names.len() != covariates.ncols() {
            return Err(BrsError::Validation(format!(
                "{} column names for {} covariate columns",
                column_names.len(),
                covariates.ncols()
            )));
        }
        for (i, &z) in treatments.iter().enumerate() {
            if z > 1 {
                return Err(BrsError::Validation(format!(
                    "treatment value {z} at row {i} is not in {{0, 1}}"
                )));
            }
        }
        for (i, y) in outcomes.iter().enumerate() {
            if !y.is_finite() {
                return Err(BrsError::Validation(format!("non-finite outcome at row {i}")));
            }
        }
        for i in 0..covariates.nrows() {
            for j in 0..covariates.ncols() {
                if !covariates[(i, j)].is_finite() {
                    return Err(BrsError::Validation(format!(
                        "non-finite covariate at row {i}, column {j}"
                    )));
                }
            }
        }
        let treated = treatments.iter().filter(|&&z| z == 1).count();
        if treated == 0 || treated == n {
            return Err(BrsError::Validation(
                "both treatment arms must be non-empty".into(),
            ));
        }
        Ok(Self {
            outcomes,
            treatments,
            covariates,
            true_ate,
            column_names,
        })
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn q(&self) -> usize {
        self.covariates.ncols()
    }

    /// Row indices of units in arm `z`.
    pub fn arm_indices(&self, z: u8) -> Vec<usize> {
        self.treatments
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == z)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Column-standardized covariates with stored centers and scales, so the
/// transform is invertible.
#[derive(Debug, Clone)]
pub struct StandardizedCovariates {
    pub values: DMatrix<f64>,
    pub centers: DVector<f64>,
    pub scales: DVector<f64>,
}

impl StandardizedCovariates {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Undo the standardization.
    pub fn destandardize(&self) -> DMatrix<f64> {
        let mut raw = self.values.clone();
        for j in 0..raw.ncols() {
            for i in 0..raw.nrows() {
                raw[(i, j)] = raw[(i, j)] * self.scales[j] + self.centers[j];
            }
        }
        raw
    }
}

/// Column-wise (x - mean) / sd with the sample-sd (n-1) convention.
/// Constant columns map to zeros with scale 1.
pub fn standardize(data: &Dataset) -> StandardizedCovariates {
    standardize_matrix(&data.covariates)
}

pub fn standardize_matrix(x: &DMatrix<f64>) -> StandardizedCovariates {
    let n = x.nrows();
    let q = x.ncols();
    let mut values = x.clone();
    let mut centers = DVector::zeros(q);
    let mut scales = DVector::from_element(q, 1.0);
    for j in 0..q {
        let col = x.column(j);
        let mean = col.sum() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let sd = if n > 1 { (ss / (n as f64 - 1.0)).sqrt() } else { 0.0 };
        centers[j] = mean;
        scales[j] = if sd > 0.0 { sd } else { 1.0 };
        for i in 0..n {
            values[(i, j)] = (x[(i, j)] - centers[j]) / scales[j];
        }
    }
    StandardizedCovariates {
        values,
        centers,
        scales,
    }
}

/// Which nuisance function an agent predictive targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictiveTarget {
    OutcomeTreated,
    OutcomeControl,
    Propensity,
}

/// Per-model, per-unit predictive means and variances: the h_j(f_j(X))
/// inputs to synthesis.
#[derive(Debug, Clone)]
pub struct AgentPredictive {
    pub target: PredictiveTarget,
    /// n x J matrix of predictive means a_ji.
    pub means: DMatrix<f64>,
    /// n x J matrix of predictive variances b_ji (strictly positive).
    pub variances: DMatrix<f64>,
    pub model_labels: Vec<String>,
}

impl AgentPredictive {
    pub fn validate(&self) -> Result<()> {
        if self.means.shape() != self.variances.shape() {
            return Err(BrsError::Validation("means/variances shape mismatch".into()));
        }
        for v in self.variances.iter() {
            if !(*v > 0.0) {
                return Err(BrsError::Validation("non-positive predictive variance".into()));
            }
        }
        if self.target == PredictiveTarget::Propensity {
            for m in self.means.iter() {
                if !(*m >= CLIP_EPS && *m <= 1.0 - CLIP_EPS) {
                    return Err(BrsError::Validation(format!(
                        "propensity mean {m} outside [{CLIP_EPS}, {}]",
                        1.0 - CLIP_EPS
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_models(&self) -> usize {
        self.means.ncols()
    }
}

/// Column-role mapping for tabular ingestion.
#[derive(Debug, Clone)]
pub struct TableSchema {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
}

/// Load a delimiter-separated text file (comma or tab, auto-detected) with
/// a header row, mapping columns to roles via `schema`.
pub fn load_table(path: &Path, schema: &TableSchema) -> Result<Dataset> {
    let content = fs::read_to_string(path).map_err(|e| {
        BrsError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    if schema.covariates.is_empty() {
        return Err(BrsError::Schema("schema names no covariate columns".into()));
    }
    let mut lines = content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| BrsError::Schema("empty file".into()))?;
    let delim = if header.matches('\t').count() > header.matches(',').count() {
        '\t'
    } else {
        ','
    };
    let names: Vec<String> = header
        .split(delim)
        .map(|s| s.trim().trim_matches('"').to_string())
        .collect();
    let col_index = |name: &str| -> Result<usize> {
        names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| BrsError::Schema(format!("missing column '{name}'")))
    };
    let y_idx = col_index(&schema.outcome)?;
    let z_idx = col_index(&schema.treatment)?;
    let x_idx: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let mut outcomes = Vec::new();
    let mut treatments = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(delim).map(|s| s.trim().trim_matches('"')).collect();
        if fields.len() != names.len() {
            return Err(BrsError::Parse {
                row: lineno,
                column: "<row>".into(),
                message: format!("expected {} fields, got {}", names.len(), fields.len()),
            });
        }
        let parse = |idx: usize| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| BrsError::Parse {
                row: lineno,
                column: names[idx].clone(),
                message: format!("non-numeric cell '{}'", fields[idx]),
            })
        };
        outcomes.push(parse(y_idx)?);
        let z = parse(z_idx)?;
        if z != 0.0 && z != 1.0 {
            return Err(BrsError::Validation(format!(
                "treatment value {z} at row {lineno} is not in {{0, 1}}"
            )));
        }
        treatments.push(z as u8);
        for &j in &x_idx {
            xs.push(parse(j)?);
        }
    }
    let n = outcomes.len();
    let q = x_idx.len();
    let covariates = DMatrix::from_row_slice(n, q, &xs);
    Dataset::new(
        DVector::from_vec(outcomes),
        treatments,
        covariates,
        None,
        schema.covariates.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::io::Write;

    fn toy_dataset() -> Dataset {
        Dataset::new(
            DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
            vec![0, 1, 0, 1],
            DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]),
            None,
            vec!["x1".into(), "x2".into()],
        )
        .unwrap()
    }

    #[test]
    fn standardize_symmetric_column() {
        let data = Dataset::new(
            DVector::from_vec(vec![0.0, 1.0, 0.0]),
            vec![0, 1, 1],
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            None,
            vec!["x".into()],
        )
        .unwrap();
        let s = standardize(&data);
        assert_relative_eq!(s.centers[0], 2.0);
        assert_relative_eq!(s.scales[0], 1.0);
        assert_relative_eq!(s.values[(0, 0)], -1.0);
        assert_relative_eq!(s.values[(1, 0)], 0.0);
        assert_relative_eq!(s.values[(2, 0)], 1.0);
    }

    #[test]
    fn standardize_constant_column_maps_to_zeros() {
        let s = standardize(&toy_dataset());
        for i in 0..4 {
            assert_eq!(s.values[(i, 1)], 0.0);
        }
        assert_eq!(s.scales[1], 1.0);
    }

    // Two points (0, 10): sample sd = 10/sqrt(2) = 7.0711, values +-0.7071.
    #[test]
    fn standardize_two_point_sample_sd_convention() {
        let s = standardize_matrix(&DMatrix::from_column_slice(2, 1, &[0.0, 10.0]));
        assert_relative_eq!(s.scales[0], 7.071067811865476, epsilon = 1e-12);
        assert_relative_eq!(s.values[(0, 0)], -0.7071067811865475, epsilon = 1e-12);
        assert_relative_eq!(s.values[(1, 0)], 0.7071067811865475, epsilon = 1e-12);
    }

    #[test]
    fn standardized_columns_have_unit_moments() {
        let mut rng = crate::rng::stream_rng(3, "test/standardize");
        use rand::Rng;
        let x = DMatrix::from_fn(50, 3, |_, _| rng.gen::<f64>() * 10.0 - 5.0);
        let s = standardize_matrix(&x);
        for j in 0..3 {
            let col = s.values.column(j);
            let mean = col.sum() / 50.0;
            let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 49.0;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn dataset_rejects_bad_treatment_and_nonfinite() {
        let bad_z = Dataset::new(
            DVector::from_vec(vec![1.0, 2.0]),
            vec![0, 2],
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            None,
            vec!["x".into()],
        );
        assert!(matches!(bad_z, Err(BrsError::Validation(_))));

        let bad_y = Dataset::new(
            DVector::from_vec(vec![f64::NAN, 2.0]),
            vec![0, 1],
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            None,
            vec!["x".into()],
        );
        assert!(matches!(bad_y, Err(BrsError::Validation(_))));

        let bad_x = Dataset::new(
            DVector::from_vec(vec![1.0, 2.0]),
            vec![0, 1],
            DMatrix::from_column_slice(2, 1, &[1.0, f64::INFINITY]),
            None,
            vec!["x".into()],
        );
        assert!(matches!(bad_x, Err(BrsError::Validation(_))));
    }

    #[test]
    fn dataset_rejects_single_arm() {
        let r = Dataset::new(
            DVector::from_vec(vec![1.0, 2.0]),
            vec![1, 1],
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            None,
            vec!["x".into()],
        );
        assert!(r.is_err());
    }

    #[test]
    fn load_table_small_csv() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "bweight,mbsmoke,mage").unwrap();
        writeln!(f, "3200,0,25").unwrap();
        writeln!(f, "2900,1,22").unwrap();
        writeln!(f, "3400,0,30").unwrap();
        let schema = TableSchema {
            outcome: "bweight".into(),
            treatment: "mbsmoke".into(),
            covariates: vec!["mage".into()],
        };
        let data = load_table(f.path(), &schema).unwrap();
        assert_eq!(data.n(), 3);
        assert_eq!(data.q(), 1);
        assert_eq!(data.treatments, vec![0, 1, 0]);
        assert_eq!(data.covariates[(2, 0)], 30.0);
    }

    #[test]
    fn load_table_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "y\tz\tx").unwrap();
        writeln!(f, "1.0\t2\t0.5").unwrap();
        writeln!(f, "2.0\t0\t0.7").unwrap();
        let schema = TableSchema {
            outcome: "y".into(),
            treatment: "z".into(),
            covariates: vec!["x".into()],
        };
        // treatment value 2 -> validation error
        assert!(matches!(
            load_table(f.path(), &schema),
            Err(BrsError::Validation(_))
        ));

        let missing = TableSchema {
            outcome: "y".into(),
            treatment: "z".into(),
            covariates: vec!["nope".into()],
        };
        let err = load_table(f.path(), &missing).unwrap_err();
        assert!(err.to_string().contains("nope"));

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "y,z,x").unwrap();
        writeln!(g, "1.0,0,abc").unwrap();
        writeln!(g, "2.0,1,0.7").unwrap();
        let schema2 = TableSchema {
            outcome: "y".into(),
            treatment: "z".into(),
            covariates: vec!["x".into()],
        };
        assert!(matches!(
            load_table(g.path(), &schema2),
            Err(BrsError::Parse { .. })
        ));
    }

    proptest! {
        // Round-trip: de-standardizing reproduces the raw matrix.
        #[test]
        fn standardize_round_trip(raw in proptest::collection::vec(-1e4f64..1e4, 12)) {
            let x = DMatrix::from_column_slice(6, 2, &raw);
            let s = standardize_matrix(&x);
            let back = s.destandardize();
            for (a, b) in x.iter().zip(back.iter()) {
                let tol = 1e-12 * a.abs().max(1.0);
                prop_assert!((a - b).abs() <= tol);
            }
        }
    }
}

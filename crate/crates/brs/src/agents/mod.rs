//! Candidate models ("agents"): per-arm outcome regressions and propensity
//! regressions, each with a stored feature map so fitted models can score
//! new covariate rows. Exports per-unit predictive means/variances.

pub mod gam;
pub mod glm;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::agents::gam::SplineDesign;
use crate::agents::glm::{logistic, RawFit};
use crate::datamodel::{clip_propensity, AgentPredictive, Dataset, PredictiveTarget};
use crate::error::{BrsError, Result};

/// Predictive variances are floored here before entering synthesis.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Scaling that makes the half-normal transform of a standard normal have
/// unit variance: u = |x| / sqrt(1 - 2/pi).
pub const HALF_NORMAL_SCALE: f64 = 0.6028102749890869;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LinearGaussian,
    LogisticBinomial,
}

/// A single derived feature column.
#[derive(Debug, Clone, Copy)]
pub enum ColumnTransform {
    Raw(usize),
    Square(usize),
    Cube(usize),
    Exp(usize),
    /// |x| / sqrt(1 - 2/pi).
    HalfNormScaled(usize),
}

impl ColumnTransform {
    fn source(&self) -> usize {
        match *self {
            ColumnTransform::Raw(c)
            | ColumnTransform::Square(c)
            | ColumnTransform::Cube(c)
            | ColumnTransform::Exp(c)
            | ColumnTransform::HalfNormScaled(c) => c,
        }
    }

    fn apply(&self, v: f64) -> f64 {
        match self {
            ColumnTransform::Raw(_) => v,
            ColumnTransform::Square(_) => v * v,
            ColumnTransform::Cube(_) => v * v * v,
            ColumnTransform::Exp(_) => v.exp(),
            ColumnTransform::HalfNormScaled(_) => v.abs() / HALF_NORMAL_SCALE,
        }
    }
}

/// How raw covariate rows become a model matrix (intercept always first).
#[derive(Debug, Clone)]
pub enum FeatureMap {
    Columns(Vec<ColumnTransform>),
    Spline(SplineDesign),
}

impl FeatureMap {
    pub fn n_coeffs(&self) -> usize {
        match self {
            FeatureMap::Columns(cols) => 1 + cols.len(),
            FeatureMap::Spline(design) => design.n_coeffs(),
        }
    }

    fn required_input_cols(&self, x_cols: usize) -> Result<()> {
        if let FeatureMap::Columns(cols) = self {
            for c in cols {
                if c.source() >= x_cols {
                    return Err(BrsError::Validation(format!(
                        "feature map references column {} but X has {x_cols} columns",
                        c.source()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.required_input_cols(x.ncols())?;
        match self {
            FeatureMap::Columns(cols) => {
                let n = x.nrows();
                let mut m = DMatrix::zeros(n, 1 + cols.len());
                for i in 0..n {
                    m[(i, 0)] = 1.0;
                    for (k, c) in cols.iter().enumerate() {
                        m[(i, 1 + k)] = c.apply(x[(i, c.source())]);
                    }
                }
                Ok(m)
            }
            FeatureMap::Spline(design) => Ok(design.design(x)),
        }
    }
}

/// Raw columns taken as-is: the GLM feature map.
pub fn raw_features(q: usize) -> FeatureMap {
    FeatureMap::Columns((0..q).map(ColumnTransform::Raw).collect())
}

#[derive(Debug, Clone)]
pub struct FittedRegression {
    pub kind: ModelKind,
    pub feature_map: FeatureMap,
    pub fit: RawFit,
}

impl FittedRegression {
    /// Predictive mean/variance per row of `x`. For logistic models the
    /// mean is on the probability scale with a delta-method variance
    /// (p(1-p))^2 * xt Sigma x; propensity clipping is the caller's job.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let design = self.feature_map.design(x)?;
        if design.ncols() != self.fit.coefficients.len() {
            return Err(BrsError::Validation(format!(
                "design has {} columns, model has {} coefficients",
                design.ncols(),
                self.fit.coefficients.len()
            )));
        }
        let n = design.nrows();
        let mut means = DVector::zeros(n);
        let mut vars = DVector::zeros(n);
        for i in 0..n {
            let row: RowDVector<f64> = design.row(i).into_owned();
            let lp = row.transpose().dot(&self.fit.coefficients);
            let quad = (&row * &self.fit.coef_covariance * row.transpose())[(0, 0)];
            match self.kind {
                ModelKind::LinearGaussian => {
                    means[i] = lp;
                    vars[i] = quad.max(VARIANCE_FLOOR);
                }
                ModelKind::LogisticBinomial => {
                    let p = logistic(lp);
                    means[i] = p;
                    let slope = p * (1.0 - p);
                    vars[i] = (slope * slope * quad).max(VARIANCE_FLOOR);
                }
            }
        }
        Ok((means, vars))
    }
}

/// J fitted models per nuisance target, label-aligned.
#[derive(Debug, Clone)]
pub struct AgentSet {
    pub outcome_treated: Vec<FittedRegression>,
    pub outcome_control: Vec<FittedRegression>,
    pub propensity: Vec<FittedRegression>,
    pub labels: Vec<String>,
}

impl AgentSet {
    pub fn n_models(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.labels.len();
        if self.outcome_treated.len() != j
            || self.outcome_control.len() != j
            || self.propensity.len() != j
        {
            return Err(BrsError::Validation(
                "agent lists and labels must share length".into(),
            ));
        }
        Ok(())
    }
}

fn predictive_for(
    models: &[FittedRegression],
    labels: &[String],
    x: &DMatrix<f64>,
    target: PredictiveTarget,
) -> Result<AgentPredictive> {
    let n = x.nrows();
    let j = models.len();
    let mut means = DMatrix::zeros(n, j);
    let mut vars = DMatrix::zeros(n, j);
    for (k, model) in models.iter().enumerate() {
        let (m, v) = model.predict(x)?;
        for i in 0..n {
            let mean = if target == PredictiveTarget::Propensity {
                clip_propensity(m[i])
            } else {
                m[i]
            };
            means[(i, k)] = mean;
            vars[(i, k)] = v[i];
        }
    }
    let pred = AgentPredictive {
        target,
        means,
        variances: vars,
        model_labels: labels.to_vec(),
    };
    pred.validate()?;
    Ok(pred)
}

/// Score all agents on (possibly new) covariate rows. Returns predictives
/// for (mu1, mu0, pi) in that order; propensity means are clipped and all
/// variances floored.
pub fn predict_agents(
    agents: &AgentSet,
    x: &DMatrix<f64>,
) -> Result<(AgentPredictive, AgentPredictive, AgentPredictive)> {
    agents.validate()?;
    Ok((
        predictive_for(&agents.outcome_treated, &agents.labels, x, PredictiveTarget::OutcomeTreated)?,
        predictive_for(&agents.outcome_control, &agents.labels, x, PredictiveTarget::OutcomeControl)?,
        predictive_for(&agents.propensity, &agents.labels, x, PredictiveTarget::Propensity)?,
    ))
}

/// Which candidate-model family to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentDesign {
    /// Linear/logistic, quadratic-augmented, and additive-spline models.
    GlmGqmGam,
    /// Three fixed feature variants around a half-normal confounder;
    /// the scenario (1-4) selects which variant is correctly specified.
    Sim3(u8),
}

fn distinct_values(x: &DMatrix<f64>, col: usize) -> usize {
    let mut v: Vec<f64> = x.column(col).iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v.len()
}

/// Quadratic feature map: raw columns plus squares of columns with enough
/// distinct values (squaring a 0/1 column only duplicates it).
fn gqm_features(x: &DMatrix<f64>) -> FeatureMap {
    let q = x.ncols();
    let mut cols: Vec<ColumnTransform> = (0..q).map(ColumnTransform::Raw).collect();
    for c in 0..q {
        if distinct_values(x, c) > 2 {
            cols.push(ColumnTransform::Square(c));
        }
    }
    FeatureMap::Columns(cols)
}

fn arm_data(data: &Dataset, arm: u8) -> (DVector<f64>, DMatrix<f64>) {
    let idx = data.arm_indices(arm);
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| data.outcomes[i]));
    let x = DMatrix::from_fn(idx.len(), data.q(), |r, c| data.covariates[(idx[r], c)]);
    (y, x)
}

fn check_arm_size(n_arm: usize, p: usize, label: &str, arm: u8) -> Result<()> {
    if n_arm < p + 2 {
        return Err(BrsError::Fit(format!(
            "{label}: arm Z={arm} has {n_arm} units, needs at least {}",
            p + 2
        )));
    }
    Ok(())
}

fn fit_outcome_linear(
    data: &Dataset,
    arm: u8,
    map: FeatureMap,
    label: &str,
) -> Result<FittedRegression> {
    let (y, x) = arm_data(data, arm);
    check_arm_size(y.len(), map.n_coeffs(), label, arm)?;
    let design = map.design(&x)?;
    let fit = glm::fit_linear_gaussian(&y, &design)
        .map_err(|e| BrsError::Fit(format!("{label} (Z={arm}): {e}")))?;
    Ok(FittedRegression {
        kind: ModelKind::LinearGaussian,
        feature_map: map,
        fit,
    })
}

fn fit_propensity_logistic(data: &Dataset, map: FeatureMap, label: &str) -> Result<FittedRegression> {
    let design = map.design(&data.covariates)?;
    let fit = glm::fit_logistic_irls(&data.treatments, &design)
        .map_err(|e| BrsError::Fit(format!("{label} (propensity): {e}")))?;
    Ok(FittedRegression {
        kind: ModelKind::LogisticBinomial,
        feature_map: map,
        fit,
    })
}

fn fit_outcome_gam(data: &Dataset, arm: u8, label: &str) -> Result<FittedRegression> {
    let (y, x) = arm_data(data, arm);
    // A full smooth per covariate is the widest this design can get.
    check_arm_size(y.len(), 1 + 4 * data.q(), label, arm)?;
    let (fit, design) = gam::fit_additive_gaussian(&y, &x)
        .map_err(|e| BrsError::Fit(format!("{label} (Z={arm}): {e}")))?;
    Ok(FittedRegression {
        kind: ModelKind::LinearGaussian,
        feature_map: FeatureMap::Spline(design),
        fit,
    })
}

fn fit_propensity_gam(data: &Dataset, label: &str) -> Result<FittedRegression> {
    let (fit, design) = gam::fit_additive_logistic(&data.treatments, &data.covariates)
        .map_err(|e| BrsError::Fit(format!("{label} (propensity): {e}")))?;
    Ok(FittedRegression {
        kind: ModelKind::LogisticBinomial,
        feature_map: FeatureMap::Spline(design),
        fit,
    })
}

fn raw_cols(cols: &[usize]) -> Vec<ColumnTransform> {
    cols.iter().map(|&c| ColumnTransform::Raw(c)).collect()
}

/// Feature maps for the three fixed-variant models: (propensity, outcome)
/// per model. The confounder transform u1 = |x1|/sqrt(1 - 2/pi) marks a
/// correctly specified block.
fn sim3_feature_maps(scenario: u8) -> Result<Vec<(FeatureMap, FeatureMap)>> {
    let all_exp = vec![
        ColumnTransform::Exp(0),
        ColumnTransform::Raw(1),
        ColumnTransform::Raw(2),
        ColumnTransform::Raw(3),
    ];
    let all_cube = vec![
        ColumnTransform::Cube(0),
        ColumnTransform::Raw(1),
        ColumnTransform::Raw(2),
        ColumnTransform::Raw(3),
    ];
    let u1 = ColumnTransform::HalfNormScaled(0);
    let prop_correct = vec![u1, ColumnTransform::Raw(1), ColumnTransform::Raw(2)];
    let out_correct = vec![u1, ColumnTransform::Raw(1), ColumnTransform::Raw(3)];
    let prop_wrong = raw_cols(&[0, 1, 2]);
    let out_wrong = raw_cols(&[0, 1, 3]);
    let (m3_prop, m3_out) = match scenario {
        1 => (prop_correct, out_correct),
        2 => (prop_correct, out_wrong),
        3 => (prop_wrong, out_correct),
        4 => (prop_wrong, out_wrong),
        s => {
            return Err(BrsError::Config(format!(
                "scenario must be 1-4, got {s}"
            )))
        }
    };
    Ok(vec![
        (FeatureMap::Columns(all_exp.clone()), FeatureMap::Columns(all_exp)),
        (FeatureMap::Columns(all_cube.clone()), FeatureMap::Columns(all_cube)),
        (FeatureMap::Columns(m3_prop), FeatureMap::Columns(m3_out)),
    ])
}

/// Fit the full candidate set: per-arm outcome regressions plus full-sample
/// propensity regressions, J = 3 in both designs.
pub fn build_standard_agents(data: &Dataset, design: AgentDesign) -> Result<AgentSet> {
    match design {
        AgentDesign::GlmGqmGam => {
            let q = data.q();
            let glm_map = raw_features(q);
            let gqm_map = gqm_features(&data.covariates);
            let agents = AgentSet {
                outcome_treated: vec![
                    fit_outcome_linear(data, 1, glm_map.clone(), "GLM")?,
                    fit_outcome_linear(data, 1, gqm_map.clone(), "GQM")?,
                    fit_outcome_gam(data, 1, "GAM")?,
                ],
                outcome_control: vec![
                    fit_outcome_linear(data, 0, glm_map.clone(), "GLM")?,
                    fit_outcome_linear(data, 0, gqm_map.clone(), "GQM")?,
                    fit_outcome_gam(data, 0, "GAM")?,
                ],
                propensity: vec![
                    fit_propensity_logistic(data, glm_map, "GLM")?,
                    fit_propensity_logistic(data, gqm_map, "GQM")?,
                    fit_propensity_gam(data, "GAM")?,
                ],
                labels: vec!["GLM".into(), "GQM".into(), "GAM".into()],
            };
            agents.validate()?;
            Ok(agents)
        }
        AgentDesign::Sim3(scenario) => {
            if data.q() != 4 {
                return Err(BrsError::Validation(format!(
                    "fixed-variant design expects 4 covariates, got {}",
                    data.q()
                )));
            }
            let maps = sim3_feature_maps(scenario)?;
            let labels = ["M1", "M2", "M3"];
            let mut outcome_treated = Vec::new();
            let mut outcome_control = Vec::new();
            let mut propensity = Vec::new();
            for (k, (prop_map, out_map)) in maps.into_iter().enumerate() {
                outcome_treated.push(fit_outcome_linear(data, 1, out_map.clone(), labels[k])?);
                outcome_control.push(fit_outcome_linear(data, 0, out_map, labels[k])?);
                propensity.push(fit_propensity_logistic(data, prop_map, labels[k])?);
            }
            let agents = AgentSet {
                outcome_treated,
                outcome_control,
                propensity,
                labels: labels.iter().map(|s| s.to_string()).collect(),
            };
            agents.validate()?;
            Ok(agents)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn constant_model(kind: ModelKind, beta0: f64, var: f64) -> FittedRegression {
        FittedRegression {
            kind,
            feature_map: FeatureMap::Columns(vec![]),
            fit: RawFit {
                coefficients: DVector::from_vec(vec![beta0]),
                coef_covariance: DMatrix::from_element(1, 1, var),
                dispersion: 1.0,
                loglik: 0.0,
                aic: 0.0,
                bic: 0.0,
                n_fit: 10,
                edf: 1.0,
                ridge_fallback: false,
                separation_flag: false,
            },
        }
    }

    #[test]
    fn intercept_only_gaussian_prediction_is_constant() {
        let model = constant_model(ModelKind::LinearGaussian, 5.0, 0.25);
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let (m, v) = model.predict(&x).unwrap();
        for i in 0..3 {
            assert_relative_eq!(m[i], 5.0);
            assert_relative_eq!(v[i], 0.25);
        }
    }

    // Logistic intercept 0 with Var 1: mean 0.5, delta variance 0.25^2.
    #[test]
    fn delta_method_variance_at_half() {
        let model = constant_model(ModelKind::LogisticBinomial, 0.0, 1.0);
        let x = DMatrix::zeros(2, 1);
        let (m, v) = model.predict(&x).unwrap();
        assert_relative_eq!(m[0], 0.5);
        assert_relative_eq!(v[0], 0.0625);
    }

    #[test]
    fn propensity_means_are_clipped() {
        let model = constant_model(ModelKind::LogisticBinomial, 10.0, 1e-6);
        let agents = AgentSet {
            outcome_treated: vec![constant_model(ModelKind::LinearGaussian, 1.0, 1.0)],
            outcome_control: vec![constant_model(ModelKind::LinearGaussian, 0.0, 1.0)],
            propensity: vec![model],
            labels: vec!["C".into()],
        };
        let x = DMatrix::zeros(4, 1);
        let (_, _, pi) = predict_agents(&agents, &x).unwrap();
        for i in 0..4 {
            assert_relative_eq!(pi.means[(i, 0)], 0.99);
        }
    }

    #[test]
    fn variances_respect_floor() {
        let model = constant_model(ModelKind::LinearGaussian, 1.0, 0.0);
        let x = DMatrix::zeros(5, 1);
        let (_, v) = model.predict(&x).unwrap();
        assert!(v.iter().all(|&b| b >= VARIANCE_FLOOR));
    }

    fn synthetic_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::stream_rng(seed, "test/agents/data");
        let x = DMatrix::from_fn(n, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z: Vec<u8> = (0..n)
            .map(|i| u8::from(rng.gen::<f64>() < logistic(0.5 * x[(i, 0)])))
            .collect();
        let y = DVector::from_fn(n, |i, _| {
            f64::from(z[i]) + x[(i, 0)] + 0.5 * x[(i, 1)]
                + rng.sample::<f64, _>(StandardNormal)
        });
        Dataset::new(
            y,
            z,
            x,
            Some(1.0),
            (1..=4).map(|k| format!("x{k}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn glm_gqm_gam_set_has_expected_shape() {
        let data = synthetic_dataset(300, 71);
        let agents = build_standard_agents(&data, AgentDesign::GlmGqmGam).unwrap();
        assert_eq!(agents.labels, vec!["GLM", "GQM", "GAM"]);
        // GQM appends a squared column per continuous covariate.
        assert_eq!(agents.outcome_treated[0].feature_map.n_coeffs(), 5);
        assert_eq!(agents.outcome_treated[1].feature_map.n_coeffs(), 9);
        let (mu1, mu0, pi) = predict_agents(&agents, &data.covariates).unwrap();
        assert_eq!(mu1.means.shape(), (300, 3));
        assert_eq!(mu0.means.shape(), (300, 3));
        for k in 0..3 {
            for i in 0..300 {
                let p = pi.means[(i, k)];
                assert!((0.01..=0.99).contains(&p));
                assert!(pi.variances[(i, k)] >= VARIANCE_FLOOR);
            }
        }
    }

    #[test]
    fn gqm_skips_squaring_binary_columns() {
        let mut rng = crate::rng::stream_rng(73, "test/agents/binary");
        let x = DMatrix::from_fn(50, 2, |_, c| {
            if c == 0 {
                rng.sample::<f64, _>(StandardNormal)
            } else if rng.gen::<bool>() {
                1.0
            } else {
                0.0
            }
        });
        let map = gqm_features(&x);
        // Intercept + 2 raw + square of the continuous column only.
        assert_eq!(map.n_coeffs(), 4);
    }

    #[test]
    fn sim3_variant_feature_maps() {
        let data = synthetic_dataset(400, 79);
        let agents = build_standard_agents(&data, AgentDesign::Sim3(1)).unwrap();
        assert_eq!(agents.labels, vec!["M1", "M2", "M3"]);
        // M1 transforms x1 by exp in both nuisance models.
        match &agents.propensity[0].feature_map {
            FeatureMap::Columns(cols) => {
                assert!(matches!(cols[0], ColumnTransform::Exp(0)));
                assert_eq!(cols.len(), 4);
            }
            FeatureMap::Spline(_) => panic!("expected column features"),
        }
        // Scenario 1's M3 uses the half-normal confounder and drops x4
        // (propensity) / x3 (outcome).
        match &agents.propensity[2].feature_map {
            FeatureMap::Columns(cols) => {
                assert!(matches!(cols[0], ColumnTransform::HalfNormScaled(0)));
                assert_eq!(cols.len(), 3);
            }
            FeatureMap::Spline(_) => panic!("expected column features"),
        }
        match &agents.outcome_treated[2].feature_map {
            FeatureMap::Columns(cols) => {
                assert!(matches!(cols[2], ColumnTransform::Raw(3)));
            }
            FeatureMap::Spline(_) => panic!("expected column features"),
        }
    }

    #[test]
    fn sim3_scenario_4_is_all_raw() {
        let data = synthetic_dataset(400, 83);
        let agents = build_standard_agents(&data, AgentDesign::Sim3(4)).unwrap();
        match &agents.propensity[2].feature_map {
            FeatureMap::Columns(cols) => {
                assert!(matches!(cols[0], ColumnTransform::Raw(0)));
            }
            FeatureMap::Spline(_) => panic!("expected column features"),
        }
        assert!(build_standard_agents(&data, AgentDesign::Sim3(5)).is_err());
    }

    #[test]
    fn tiny_arm_errors_name_the_model() {
        // 3 treated units cannot support a 5-coefficient GLM outcome fit.
        let mut data = synthetic_dataset(40, 89);
        for (i, z) in data.treatments.iter_mut().enumerate() {
            *z = u8::from(i < 3);
        }
        let err = build_standard_agents(&data, AgentDesign::GlmGqmGam).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("GLM"), "message was: {msg}");
    }

    #[test]
    fn half_normal_scale_matches_closed_form() {
        let expected = (1.0f64 - 2.0 / std::f64::consts::PI).sqrt();
        assert_relative_eq!(HALF_NORMAL_SCALE, expected, epsilon = 1e-15);
    }
}

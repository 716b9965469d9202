//! Control-variate variance reduction for ratio metrics.
//!
//! The per-unit outcome (by default the linearized metric) is regressed on a
//! set of mean-centered covariates fit on the pooled sample of both variants;
//! the fitted prediction is subtracted as a control variate and the z-test is
//! run on the residual metric.

use serde::{Deserialize, Serialize};

use crate::data::{Experiment, UnitRecord};
use crate::error::{Error, Result};
use crate::gbdt::{CrossFitter, FeatureMatrix, GbdtParams};
use crate::ratio::{delta_ratio_test, ratio_of_sums, LinearizationSource, RatioMetricSpec, RatioSummary};
use crate::stats::{covariance, summarize, Moments, TestResult};

pub const COL_PRE_NUMERATOR: &str = "M_N_pre";
pub const COL_PRE_DENOMINATOR: &str = "M_D_pre";
pub const COL_PRE_LINEARIZED: &str = "L_pre";
pub const COL_PRE_MISSING: &str = "pre_missing";
pub const COL_PRED_NUMERATOR: &str = "pred_N";
pub const COL_PRED_DENOMINATOR: &str = "pred_D";
pub const COL_PRED_LINEARIZED: &str = "pred_L";

/// Which covariates feed the control variate. `Raw` disables reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSet {
    #[serde(rename = "raw")]
    Raw,
    #[serde(rename = "pre")]
    PreOnly,
    #[serde(rename = "pred")]
    PredOnly,
    #[serde(rename = "union")]
    Union,
}

impl CovariateSet {
    pub fn label(self) -> &'static str {
        match self {
            CovariateSet::Raw => "raw",
            CovariateSet::PreOnly => "pre",
            CovariateSet::PredOnly => "pred",
            CovariateSet::Union => "union",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "raw" => Ok(CovariateSet::Raw),
            "pre" => Ok(CovariateSet::PreOnly),
            "pred" => Ok(CovariateSet::PredOnly),
            "union" => Ok(CovariateSet::Union),
            other => Err(Error::config(format!(
                "unknown method '{other}' (expected raw, pre, pred or union)"
            ))),
        }
    }

    fn uses_pre(self) -> bool {
        matches!(self, CovariateSet::PreOnly | CovariateSet::Union)
    }

    fn uses_predictions(self) -> bool {
        matches!(self, CovariateSet::PredOnly | CovariateSet::Union)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    LinearizedMetric,
    DeltaRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VrConfig {
    pub covariate_set: CovariateSet,
    pub outcome: Outcome,
    pub gbdt_params: GbdtParams,
    /// 0 disables cross-fitting (in-sample predictions).
    pub cross_fit_folds: usize,
    pub center_covariates: bool,
    /// Derive `pred_L` as `pred_N - c * pred_D` instead of fitting it.
    pub compose_pred_l: bool,
}

impl Default for VrConfig {
    fn default() -> Self {
        Self {
            covariate_set: CovariateSet::PredOnly,
            outcome: Outcome::LinearizedMetric,
            gbdt_params: GbdtParams::default(),
            cross_fit_folds: 5,
            center_covariates: true,
            compose_pred_l: false,
        }
    }
}

impl VrConfig {
    pub fn with_set(covariate_set: CovariateSet) -> Self {
        Self {
            covariate_set,
            ..Self::default()
        }
    }

    pub fn label(&self) -> &'static str {
        self.covariate_set.label()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cross_fit_folds == 1 {
            return Err(Error::config("cross_fit_folds must be 0 or at least 2"));
        }
        self.gbdt_params.validate()
    }
}

/// Named covariate columns over a sequence of units.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    pub unit_ids: Vec<String>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl CovariateMatrix {
    pub fn new(unit_ids: Vec<String>, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::LengthMismatch {
                left: names.len(),
                right: columns.len(),
            });
        }
        for col in &columns {
            if col.len() != unit_ids.len() {
                return Err(Error::LengthMismatch {
                    left: unit_ids.len(),
                    right: col.len(),
                });
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("covariate"));
            }
        }
        Ok(Self { unit_ids, names, columns })
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// Subtracts each column's pooled mean.
    pub fn center(&mut self) {
        for col in &mut self.columns {
            center_in_place(col);
        }
    }
}

fn center_in_place(values: &mut [f64]) {
    if let Some(mean) = values.iter().copied().collect::<Moments>().mean() {
        values.iter_mut().for_each(|v| *v -= mean);
    }
}

/// Pooled least-squares coefficients of the outcome on the covariates, no
/// intercept (covariates are centered).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub k: usize,
    pub n: usize,
    /// Whether the Gram matrix needed diagonal regularization.
    pub regularized: bool,
}

impl RegressionFit {
    pub fn predict(&self, covariates: &CovariateMatrix) -> Result<Vec<f64>> {
        if covariates.k() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: covariates.k(),
            });
        }
        let mut out = vec![0.0; covariates.n()];
        for (col, beta) in covariates.columns.iter().zip(&self.coefficients) {
            for (o, x) in out.iter_mut().zip(col) {
                *o += beta * x;
            }
        }
        Ok(out)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }
}

/// Classical CUPED coefficient `cov(M, M_pre) / var(M_pre)` on pooled data.
pub fn cuped_theta(metric: &[f64], pre_metric: &[f64]) -> Result<f64> {
    let var_pre = summarize(pre_metric)?.variance;
    if var_pre == 0.0 {
        return Err(Error::ConstantCovariate);
    }
    Ok(covariance(metric, pre_metric)? / var_pre)
}

pub fn apply_control_variate(metric: &[f64], cv: &[f64]) -> Result<Vec<f64>> {
    if metric.len() != cv.len() {
        return Err(Error::LengthMismatch {
            left: metric.len(),
            right: cv.len(),
        });
    }
    Ok(metric.iter().zip(cv).map(|(m, c)| m - c).collect())
}

/// In-place Cholesky factorization of a row-major `k x k` matrix. Fails when
/// a pivot is not clearly positive relative to its original diagonal entry.
fn cholesky(a: &mut [f64], k: usize) -> bool {
    for j in 0..k {
        let diag = a[j * k + j];
        let mut pivot = diag;
        for p in 0..j {
            pivot -= a[j * k + p] * a[j * k + p];
        }
        if !(pivot > 1e-12 * diag.abs()) || !(pivot > 0.0) {
            return false;
        }
        let l = pivot.sqrt();
        a[j * k + j] = l;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / l;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..k {
        for p in 0..i {
            y[i] -= l[i * k + p] * y[p];
        }
        y[i] /= l[i * k + i];
    }
    for i in (0..k).rev() {
        for p in i + 1..k {
            y[i] -= l[p * k + i] * y[p];
        }
        y[i] /= l[i * k + i];
    }
    y
}

/// Ordinary least squares via the normal equations on the pooled sample.
pub fn fit_pooled_regression(covariates: &CovariateMatrix, outcome: &[f64]) -> Result<RegressionFit> {
    let (n, k) = (covariates.n(), covariates.k());
    if outcome.len() != n {
        return Err(Error::LengthMismatch { left: n, right: outcome.len() });
    }
    if outcome.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("outcome"));
    }
    if n <= k {
        return Err(Error::Underdetermined { n, k });
    }
    let mut y = outcome.to_vec();
    center_in_place(&mut y);

    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for i in 0..k {
        let ci = &covariates.columns[i];
        rhs[i] = ci.iter().zip(&y).map(|(a, b)| a * b).sum();
        for j in 0..=i {
            let g: f64 = ci.iter().zip(&covariates.columns[j]).map(|(a, b)| a * b).sum();
            gram[i * k + j] = g;
            gram[j * k + i] = g;
        }
    }

    let mut factor = gram.clone();
    let mut regularized = false;
    if !cholesky(&mut factor, k) {
        let trace: f64 = (0..k).map(|i| gram[i * k + i]).sum();
        if !(trace > 0.0) {
            return Err(Error::ConstantCovariate);
        }
        let ridge = 1e-10 * trace / k as f64;
        factor = gram.clone();
        for i in 0..k {
            factor[i * k + i] += ridge;
        }
        if !cholesky(&mut factor, k) {
            return Err(Error::ConstantCovariate);
        }
        regularized = true;
    }
    let coefficients = if k == 0 { Vec::new() } else { cholesky_solve(&factor, k, &rhs) };
    Ok(RegressionFit {
        names: covariates.names.clone(),
        coefficients,
        k,
        n,
        regularized,
    })
}

/// z-test on `outcome` after subtracting its pooled regression on
/// `covariates`. `treatment[i]` marks treatment units.
pub fn regression_adjusted_test(
    label: &str,
    outcome: &[f64],
    treatment: &[bool],
    covariates: &CovariateMatrix,
) -> Result<(TestResult, Vec<f64>, RegressionFit)> {
    let fit = fit_pooled_regression(covariates, outcome)?;
    let cv = fit.predict(covariates)?;
    let reduced = apply_control_variate(outcome, &cv)?;
    let result = two_sample_test(label, &reduced, treatment)?;
    Ok((result, reduced, fit))
}

/// Welch z-test of per-unit values split by the treatment mask.
pub fn two_sample_test(label: &str, values: &[f64], treatment: &[bool]) -> Result<TestResult> {
    if values.len() != treatment.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: treatment.len(),
        });
    }
    let (mut a, mut b) = (Moments::new(), Moments::new());
    for (&v, &t) in values.iter().zip(treatment) {
        if t {
            a.push(v);
        } else {
            b.push(v);
        }
    }
    TestResult::from_stats(label, &a.stats()?, &b.stats()?)
}

/// GBDT predictions of the experiment-period metric components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedComponents {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
    pub linearized: Vec<f64>,
}

/// Resolved per-unit metric components of an experiment.
struct MetricData {
    numerator: Vec<f64>,
    denominator: Vec<f64>,
    treatment: Vec<bool>,
    c: f64,
}

impl MetricData {
    fn new(experiment: &Experiment, spec: &RatioMetricSpec) -> Result<Self> {
        spec.validate()?;
        let lookup = |u: &UnitRecord, field: &str| {
            u.field(field)
                .ok_or_else(|| Error::MissingField(format!("{field} (unit {})", u.unit_id)))
        };
        let mut numerator = Vec::with_capacity(experiment.units.len());
        let mut denominator = Vec::with_capacity(experiment.units.len());
        for u in &experiment.units {
            numerator.push(lookup(u, &spec.numerator_field)?);
            denominator.push(lookup(u, &spec.denominator_field)?);
        }
        let treatment = experiment.treatment_mask();
        let c = match spec.linearization_source {
            LinearizationSource::FixedConstant(c) => c,
            LinearizationSource::ControlMean => {
                let (cn, cd): (Vec<f64>, Vec<f64>) = numerator
                    .iter()
                    .zip(&denominator)
                    .zip(&treatment)
                    .filter(|(_, &t)| !t)
                    .map(|((&n, &d), _)| (n, d))
                    .unzip();
                ratio_of_sums(&cn, &cd)?
            }
        };
        Ok(Self { numerator, denominator, treatment, c })
    }

    fn linearized(&self) -> Vec<f64> {
        self.numerator
            .iter()
            .zip(&self.denominator)
            .map(|(n, d)| n - self.c * d)
            .collect()
    }

    fn summaries(&self, numerator: &[f64], denominator: &[f64]) -> Result<(RatioSummary, RatioSummary)> {
        let pick = |treated: bool| -> (Vec<f64>, Vec<f64>) {
            numerator
                .iter()
                .zip(denominator)
                .zip(&self.treatment)
                .filter(|(_, &t)| t == treated)
                .map(|((&n, &d), _)| (n, d))
                .unzip()
        };
        let (an, ad) = pick(true);
        let (bn, bd) = pick(false);
        Ok((
            RatioSummary::from_components(&an, &ad)?,
            RatioSummary::from_components(&bn, &bd)?,
        ))
    }
}

fn feature_matrix(units: &[UnitRecord]) -> Result<FeatureMatrix> {
    let d = units.first().map_or(0, |u| u.features.len());
    if d == 0 {
        return Err(Error::MissingField("features".into()));
    }
    let mut values = Vec::with_capacity(units.len() * d);
    for u in units {
        if u.features.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: u.features.len(),
            });
        }
        values.extend_from_slice(&u.features);
    }
    FeatureMatrix::new(values, units.len(), d)
}

/// Trains the GBDT predictors of the metric components from the pre-period
/// features, out-of-fold unless `cross_fit_folds` is 0.
pub fn predict_components(
    experiment: &Experiment,
    spec: &RatioMetricSpec,
    config: &VrConfig,
) -> Result<PredictedComponents> {
    config.validate()?;
    let data = MetricData::new(experiment, spec)?;
    let features = feature_matrix(&experiment.units)?;
    let fitter = CrossFitter::new(
        &features,
        &config.gbdt_params,
        config.cross_fit_folds,
        config.gbdt_params.seed,
    )?;
    let numerator = fitter.predict(&data.numerator)?;
    let denominator = fitter.predict(&data.denominator)?;
    let linearized = if config.compose_pred_l {
        numerator
            .iter()
            .zip(&denominator)
            .map(|(n, d)| n - data.c * d)
            .collect()
    } else {
        fitter.predict(&data.linearized())?
    };
    Ok(PredictedComponents {
        numerator,
        denominator,
        linearized,
    })
}

/// Assembles the covariate columns for the configured set. Reads only the
/// pre-period fields of the units, never their variant.
pub fn build_covariates(
    units: &[UnitRecord],
    config: &VrConfig,
    predictions: Option<&PredictedComponents>,
) -> Result<CovariateMatrix> {
    let set = config.covariate_set;
    let unit_ids: Vec<String> = units.iter().map(|u| u.unit_id.clone()).collect();
    let mut names: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();

    if set.uses_pre() {
        let present: Vec<bool> = units.iter().map(UnitRecord::has_pre_period).collect();
        let n_present = present.iter().filter(|&&p| p).count();
        if n_present == 0 {
            return Err(Error::MissingField("pre_numerator/pre_denominator".into()));
        }
        let pre_n: Vec<f64> = units.iter().map(|u| u.pre_numerator.unwrap_or(0.0)).collect();
        let pre_d: Vec<f64> = units.iter().map(|u| u.pre_denominator.unwrap_or(0.0)).collect();
        let c_pre = {
            let (sn, sd) = pre_n
                .iter()
                .zip(&pre_d)
                .zip(&present)
                .filter(|(_, &p)| p)
                .fold((0.0, 0.0), |(a, b), ((n, d), _)| (a + n, b + d));
            if sd > 0.0 {
                sn / sd
            } else {
                0.0
            }
        };
        let pre_l: Vec<f64> = pre_n.iter().zip(&pre_d).map(|(n, d)| n - c_pre * d).collect();
        for (name, mut col) in [
            (COL_PRE_NUMERATOR, pre_n),
            (COL_PRE_DENOMINATOR, pre_d),
            (COL_PRE_LINEARIZED, pre_l),
        ] {
            if n_present < units.len() {
                // missing units take the mean of the observed ones
                let mean = col
                    .iter()
                    .zip(&present)
                    .filter(|(_, &p)| p)
                    .map(|(v, _)| *v)
                    .collect::<Moments>()
                    .mean()
                    .unwrap_or(0.0);
                col.iter_mut().zip(&present).filter(|(_, &p)| !p).for_each(|(v, _)| *v = mean);
            }
            names.push(name.into());
            columns.push(col);
        }
        if n_present < units.len() {
            names.push(COL_PRE_MISSING.into());
            columns.push(present.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect());
        }
    }

    if set.uses_predictions() {
        let p = predictions.ok_or_else(|| Error::MissingField("GBDT predictions".into()))?;
        for (name, col) in [
            (COL_PRED_NUMERATOR, &p.numerator),
            (COL_PRED_DENOMINATOR, &p.denominator),
            (COL_PRED_LINEARIZED, &p.linearized),
        ] {
            if col.len() != units.len() {
                return Err(Error::LengthMismatch {
                    left: units.len(),
                    right: col.len(),
                });
            }
            names.push(name.into());
            columns.push(col.clone());
        }
    }

    let mut matrix = CovariateMatrix::new(unit_ids, names, columns)?;
    if config.center_covariates {
        matrix.center();
    }
    Ok(matrix)
}

/// Raw and variance-reduced tests of one experiment under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrOutcome {
    pub raw: TestResult,
    pub reduced: TestResult,
    /// Pooled per-unit variance of the linearized metric.
    pub pooled_variance_raw: f64,
    /// Pooled per-unit variance after subtracting the control variate.
    pub pooled_variance_reduced: f64,
    pub linearization_c: f64,
    pub fits: Vec<RegressionFit>,
}

pub fn run_vr_test(experiment: &Experiment, spec: &RatioMetricSpec, config: &VrConfig) -> Result<VrOutcome> {
    let predictions = if config.covariate_set.uses_predictions() {
        Some(predict_components(experiment, spec, config)?)
    } else {
        None
    };
    run_vr_test_with_predictions(experiment, spec, config, predictions.as_ref())
}

/// As [`run_vr_test`], reusing precomputed GBDT predictions.
pub fn run_vr_test_with_predictions(
    experiment: &Experiment,
    spec: &RatioMetricSpec,
    config: &VrConfig,
    predictions: Option<&PredictedComponents>,
) -> Result<VrOutcome> {
    config.validate()?;
    let data = MetricData::new(experiment, spec)?;
    if experiment.count(&experiment.treatment) == 0 {
        return Err(Error::EmptySample);
    }
    let (sum_a, sum_b) = data.summaries(&data.numerator, &data.denominator)?;
    let raw = delta_ratio_test("raw", &sum_a, &sum_b)?;
    let linearized = data.linearized();
    let pooled_variance_raw = summarize(&linearized)?.variance;

    if config.covariate_set == CovariateSet::Raw {
        return Ok(VrOutcome {
            reduced: raw.clone(),
            raw,
            pooled_variance_raw,
            pooled_variance_reduced: pooled_variance_raw,
            linearization_c: data.c,
            fits: Vec::new(),
        });
    }

    let covariates = build_covariates(&experiment.units, config, predictions)?;
    let label = config.label();
    let (reduced, pooled_variance_reduced, fits) = match config.outcome {
        Outcome::LinearizedMetric => {
            let (result, residual, fit) =
                regression_adjusted_test(label, &linearized, &data.treatment, &covariates)?;
            (result, summarize(&residual)?.variance, vec![fit])
        }
        Outcome::DeltaRatio => {
            let fit_n = fit_pooled_regression(&covariates, &data.numerator)?;
            let fit_d = fit_pooled_regression(&covariates, &data.denominator)?;
            let num = apply_control_variate(&data.numerator, &fit_n.predict(&covariates)?)?;
            let den = apply_control_variate(&data.denominator, &fit_d.predict(&covariates)?)?;
            let (a, b) = data.summaries(&num, &den)?;
            let result = delta_ratio_test(label, &a, &b)?;
            let lin: Vec<f64> = num.iter().zip(&den).map(|(n, d)| n - data.c * d).collect();
            (result, summarize(&lin)?.variance, vec![fit_n, fit_d])
        }
    };

    Ok(VrOutcome {
        raw,
        reduced,
        pooled_variance_raw,
        pooled_variance_reduced,
        linearization_c: data.c,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn matrix(columns: Vec<Vec<f64>>) -> CovariateMatrix {
        let n = columns[0].len();
        let names = (0..columns.len()).map(|i| format!("x{i}")).collect();
        let mut m = CovariateMatrix::new((0..n).map(|i| i.to_string()).collect(), names, columns).unwrap();
        m.center();
        m
    }

    #[test]
    fn theta_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pre = gaussian(&mut rng, 1000);
        assert!((cuped_theta(&pre, &pre).unwrap() - 1.0).abs() < 1e-12);

        let y: Vec<f64> = pre.iter().map(|x| 2.0 * x + 1e-6 * rng.random::<f64>()).collect();
        assert!((cuped_theta(&y, &pre).unwrap() - 2.0).abs() < 1e-3);

        let pre = gaussian(&mut rng, 100_000);
        let y = gaussian(&mut rng, 100_000);
        assert!(cuped_theta(&y, &pre).unwrap().abs() < 0.02);

        assert!(matches!(cuped_theta(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::ConstantCovariate)));
    }

    #[test]
    fn control_variate_examples() {
        let m = [1.0, 4.0, 2.0];
        assert_eq!(apply_control_variate(&m, &[0.0; 3]).unwrap(), m.to_vec());
        let mean = 7.0 / 3.0;
        let cv: Vec<f64> = m.iter().map(|x| x - mean).collect();
        let out = apply_control_variate(&m, &cv).unwrap();
        assert!(out.iter().all(|v| (v - mean).abs() < 1e-12));
        let pooled: f64 = out.iter().sum::<f64>() / 3.0;
        assert!((pooled - mean).abs() < 1e-12);
        assert!(apply_control_variate(&m, &[0.0]).is_err());
    }

    #[test]
    fn single_covariate_regression_is_cuped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, 5000);
        let y: Vec<f64> = x.iter().map(|v| 0.7 * v + rng.random::<f64>()).collect();
        let fit = fit_pooled_regression(&matrix(vec![x.clone()]), &y).unwrap();
        let theta = cuped_theta(&y, &x).unwrap();
        assert!((fit.coefficients[0] - theta).abs() < 1e-9);
        assert!(!fit.regularized);
    }

    #[test]
    fn exact_linear_outcome_has_no_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (gaussian(&mut rng, 2000), gaussian(&mut rng, 2000));
        let y: Vec<f64> = a.iter().zip(&b).map(|(u, v)| 3.0 * u - 0.5 * v + 10.0).collect();
        let m = matrix(vec![a, b]);
        let fit = fit_pooled_regression(&m, &y).unwrap();
        let resid = apply_control_variate(&y, &fit.predict(&m).unwrap()).unwrap();
        let var_y = summarize(&y).unwrap().variance;
        assert!(summarize(&resid).unwrap().variance < 1e-18 * var_y);
    }

    #[test]
    fn duplicated_column_is_regularized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(&mut rng, 3000);
        let y: Vec<f64> = x.iter().map(|v| 1.5 * v + rng.random::<f64>()).collect();
        let single = matrix(vec![x.clone()]);
        let double = matrix(vec![x.clone(), x]);
        let fit1 = fit_pooled_regression(&single, &y).unwrap();
        let fit2 = fit_pooled_regression(&double, &y).unwrap();
        assert!(fit2.regularized);
        let (p1, p2) = (fit1.predict(&single).unwrap(), fit2.predict(&double).unwrap());
        assert!(p1.iter().zip(&p2).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn regression_errors() {
        let m = matrix(vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(
            fit_pooled_regression(&m, &[1.0, 2.0]),
            Err(Error::Underdetermined { n: 2, k: 2 })
        ));
        let bad = CovariateMatrix::new(vec!["a".into()], vec!["x".into()], vec![vec![f64::NAN]]);
        assert!(matches!(bad, Err(Error::NonFinite(_))));
    }

    fn unit(id: usize, variant: &str, pre: Option<(f64, f64)>) -> UnitRecord {
        UnitRecord {
            unit_id: format!("u{id}"),
            variant: variant.into(),
            numerator: (id % 3) as f64,
            denominator: 3.0,
            pre_numerator: pre.map(|p| p.0),
            pre_denominator: pre.map(|p| p.1),
            features: vec![id as f64],
        }
    }

    fn units(n: usize) -> Vec<UnitRecord> {
        (0..n)
            .map(|i| unit(i, if i % 2 == 0 { "control" } else { "treatment" }, Some(((i % 4) as f64, 4.0 + (i % 3) as f64))))
            .collect()
    }

    fn fake_predictions(n: usize) -> PredictedComponents {
        PredictedComponents {
            numerator: (0..n).map(|i| (i % 5) as f64).collect(),
            denominator: (0..n).map(|i| (i % 7) as f64).collect(),
            linearized: (0..n).map(|i| (i % 11) as f64).collect(),
        }
    }

    #[test]
    fn covariate_sets_have_expected_width_and_are_centered() {
        let us = units(40);
        let pred = fake_predictions(40);
        let pre = build_covariates(&us, &VrConfig::with_set(CovariateSet::PreOnly), None).unwrap();
        assert_eq!(pre.names, vec![COL_PRE_NUMERATOR, COL_PRE_DENOMINATOR, COL_PRE_LINEARIZED]);
        let union = build_covariates(&us, &VrConfig::with_set(CovariateSet::Union), Some(&pred)).unwrap();
        assert_eq!(union.k(), 6);
        let only = build_covariates(&us, &VrConfig::with_set(CovariateSet::PredOnly), Some(&pred)).unwrap();
        assert_eq!(only.k(), 3);
        for col in &union.columns {
            assert!((col.iter().sum::<f64>() / 40.0).abs() < 1e-9);
        }
        assert!(build_covariates(&us, &VrConfig::with_set(CovariateSet::PredOnly), None).is_err());
    }

    #[test]
    fn missing_pre_period_adds_indicator() {
        let mut us = units(20);
        us[3].pre_numerator = None;
        us[3].pre_denominator = None;
        let m = build_covariates(&us, &VrConfig::with_set(CovariateSet::PreOnly), None).unwrap();
        assert_eq!(m.k(), 4);
        assert_eq!(m.names[3], COL_PRE_MISSING);
        // imputed at the observed mean, so zero after centering
        assert!(m.column(COL_PRE_NUMERATOR).unwrap()[3].abs() < 1e-9);
        assert!(m.column(COL_PRE_MISSING).unwrap()[0] < 0.0);
    }

    #[test]
    fn covariates_ignore_variant_labels() {
        let us = units(30);
        let mut flipped = us.clone();
        for u in &mut flipped {
            u.variant = if u.variant == "control" { "treatment".into() } else { "control".into() };
        }
        flipped[0].variant = "treatment".into();
        let pred = fake_predictions(30);
        let config = VrConfig::with_set(CovariateSet::Union);
        assert_eq!(
            build_covariates(&us, &config, Some(&pred)).unwrap(),
            build_covariates(&flipped, &config, Some(&pred)).unwrap()
        );
    }

    #[test]
    fn raw_method_reproduces_baseline() {
        let exp = Experiment::from_units("e", units(60), "control").unwrap();
        let out = run_vr_test(&exp, &RatioMetricSpec::retention(), &VrConfig::with_set(CovariateSet::Raw)).unwrap();
        assert_eq!(out.raw.p_value, out.reduced.p_value);
        assert_eq!(out.pooled_variance_raw, out.pooled_variance_reduced);
    }

    #[test]
    fn residual_variance_does_not_increase() {
        let exp = Experiment::from_units("e", units(90), "control").unwrap();
        let pred = fake_predictions(90);
        for outcome in [Outcome::LinearizedMetric, Outcome::DeltaRatio] {
            for set in [CovariateSet::PreOnly, CovariateSet::PredOnly, CovariateSet::Union] {
                let config = VrConfig { outcome, ..VrConfig::with_set(set) };
                let out = run_vr_test_with_predictions(&exp, &RatioMetricSpec::retention(), &config, Some(&pred)).unwrap();
                if outcome == Outcome::LinearizedMetric {
                    assert!(out.pooled_variance_reduced <= out.pooled_variance_raw + 1e-12);
                }
                assert_eq!(out.reduced.method_label, set.label());
            }
        }
    }
}

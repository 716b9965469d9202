//! Suite-level comparison of variance-reduction methods: variance reduction,
//! share of experiments with a lower p-value, median relative z, the implied
//! sample-size saving, and A/A type-I error.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Experiment;
use crate::error::{Error, Result};
use crate::ratio::RatioMetricSpec;
use crate::stats::{binomial_acceptance_region, clopper_pearson, TestResult};
use crate::io::ValidationReport;
use crate::vr::{
    predict_components, run_vr_test, run_vr_test_with_predictions, CovariateSet, PredictedComponents, RegressionFit,
    VrConfig, VrOutcome,
};
use crate::SCHEMA_VERSION;

/// Raw and variance-reduced tests of a single experiment, side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: String,
    pub experiment_id: String,
    pub metric: String,
    pub method: String,
    pub control: String,
    pub treatment: String,
    pub alpha: f64,
    pub raw: TestResult,
    pub reduced: TestResult,
    pub reject_raw: bool,
    pub reject_reduced: bool,
    pub variance_reduction_pct: f64,
    pub linearization_c: f64,
    pub regression: Vec<RegressionFit>,
    #[serde(default)]
    pub validation: Option<ValidationReport>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn analyze_experiment(
    experiment: &Experiment,
    spec: &RatioMetricSpec,
    config: &VrConfig,
    alpha: f64,
) -> Result<AnalysisReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("alpha must lie in (0, 1)"));
    }
    let outcome = run_vr_test(experiment, spec, config)?;
    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION.to_string(),
        experiment_id: experiment.id.clone(),
        metric: spec.name.clone(),
        method: config.label().to_string(),
        control: experiment.control.clone(),
        treatment: experiment.treatment.clone(),
        alpha,
        reject_raw: outcome.raw.p_value < alpha,
        reject_reduced: outcome.reduced.p_value < alpha,
        variance_reduction_pct: variance_reduction_pct(outcome.pooled_variance_raw, outcome.pooled_variance_reduced)?,
        linearization_c: outcome.linearization_c,
        regression: outcome.fits,
        raw: outcome.raw,
        reduced: outcome.reduced,
        validation: None,
    })
}

/// Confidence of the binomial intervals reported with type-I error.
pub const CALIBRATION_CONFIDENCE: f64 = 0.99;

/// Percent change of the variance; negative when reduced.
pub fn variance_reduction_pct(var_raw: f64, var_vr: f64) -> Result<f64> {
    if !(var_raw > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    Ok(100.0 * (var_vr - var_raw) / var_raw)
}

/// Share of `(p_raw, p_vr)` pairs where the reduced p-value is strictly lower.
pub fn frac_lower_pvalue(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    if pairs.iter().any(|&(a, b)| !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b)) {
        return Err(Error::config("p-values must lie in [0, 1]"));
    }
    let lower = pairs.iter().filter(|(raw, vr)| vr < raw).count();
    Ok(lower as f64 / pairs.len() as f64)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median over experiments of `|z_vr| / |z_raw|`.
pub fn median_relative_z(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    if pairs.iter().any(|&(raw, _)| raw == 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let mut ratios: Vec<f64> = pairs.iter().map(|(raw, vr)| vr.abs() / raw.abs()).collect();
    Ok(median(&mut ratios))
}

/// Fraction of units saved at constant confidence when z scales by
/// `median_rel_z`.
pub fn sample_size_reduction(median_rel_z: f64) -> Result<f64> {
    if !(median_rel_z > 0.0) || !median_rel_z.is_finite() {
        return Err(Error::config("relative z must be positive"));
    }
    Ok(1.0 - 1.0 / (median_rel_z * median_rel_z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeIError {
    pub alpha: f64,
    pub rejections: usize,
    pub trials: usize,
    pub rate: f64,
    /// Clopper-Pearson interval around the observed rate.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Central binomial region of the rate expected under a calibrated test.
    pub expected_low: f64,
    pub expected_high: f64,
    pub calibrated: bool,
}

pub fn type_i_error(aa_results: &[TestResult], alpha: f64) -> Result<TypeIError> {
    if aa_results.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("alpha must lie in (0, 1)"));
    }
    let trials = aa_results.len();
    let rejections = aa_results.iter().filter(|r| r.p_value < alpha).count();
    let (ci_low, ci_high) = clopper_pearson(rejections as u64, trials as u64, CALIBRATION_CONFIDENCE);
    let (lo, hi) = binomial_acceptance_region(trials as u64, alpha, CALIBRATION_CONFIDENCE);
    Ok(TypeIError {
        alpha,
        rejections,
        trials,
        rate: rejections as f64 / trials as f64,
        ci_low,
        ci_high,
        expected_low: lo as f64 / trials as f64,
        expected_high: hi as f64 / trials as f64,
        calibrated: (lo..=hi).contains(&(rejections as u64)),
    })
}

/// One experiment under one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub experiment_id: String,
    pub method: String,
    pub z_raw: f64,
    pub z_vr: f64,
    pub p_raw: f64,
    pub p_vr: f64,
    pub ate_raw: f64,
    pub ate_vr: f64,
    pub variance_raw: f64,
    pub variance_vr: f64,
    /// Reduced z has the opposite sign of the raw z.
    pub sign_flip: bool,
    pub true_effect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method_label: String,
    pub n_experiments: usize,
    /// Mean over experiments of the per-experiment percent change.
    pub variance_reduction_pct: f64,
    pub frac_lower_pvalue: f64,
    pub median_relative_z: f64,
    pub sample_size_reduction: Option<f64>,
    pub sign_flips: usize,
    pub type_i_error: Option<TypeIError>,
    pub details: Vec<DetailRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub metric: String,
    pub alpha: f64,
    pub n_ab_experiments: usize,
    pub n_aa_experiments: usize,
    pub rows: Vec<MethodComparison>,
}

fn detail(experiment: &Experiment, method: &str, outcome: &VrOutcome) -> DetailRow {
    DetailRow {
        experiment_id: experiment.id.clone(),
        method: method.to_string(),
        z_raw: outcome.raw.z,
        z_vr: outcome.reduced.z,
        p_raw: outcome.raw.p_value,
        p_vr: outcome.reduced.p_value,
        ate_raw: outcome.raw.ate,
        ate_vr: outcome.reduced.ate,
        variance_raw: outcome.pooled_variance_raw,
        variance_vr: outcome.pooled_variance_reduced,
        sign_flip: outcome.raw.z.signum() != outcome.reduced.z.signum(),
        true_effect: experiment.true_effect,
    }
}

/// Runs every method on one experiment, training each distinct GBDT
/// configuration once.
pub fn evaluate_experiment(
    experiment: &Experiment,
    spec: &RatioMetricSpec,
    methods: &[VrConfig],
) -> Result<Vec<VrOutcome>> {
    let mut cache: Vec<(&VrConfig, PredictedComponents)> = Vec::new();
    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let needs = matches!(method.covariate_set, CovariateSet::PredOnly | CovariateSet::Union);
        let predictions = if needs {
            let hit = cache.iter().position(|(c, _)| {
                c.gbdt_params == method.gbdt_params
                    && c.cross_fit_folds == method.cross_fit_folds
                    && c.compose_pred_l == method.compose_pred_l
            });
            let idx = match hit {
                Some(i) => i,
                None => {
                    cache.push((method, predict_components(experiment, spec, method)?));
                    cache.len() - 1
                }
            };
            Some(&cache[idx].1)
        } else {
            None
        };
        out.push(run_vr_test_with_predictions(experiment, spec, method, predictions)?);
    }
    Ok(out)
}

fn sorted_by_id(suite: &[Experiment]) -> Vec<&Experiment> {
    let mut v: Vec<&Experiment> = suite.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

fn evaluate_suite<'a>(
    suite: &'a [Experiment],
    spec: &RatioMetricSpec,
    methods: &[VrConfig],
) -> Result<Vec<(&'a Experiment, Vec<VrOutcome>)>> {
    sorted_by_id(suite)
        .into_par_iter()
        .map(|e| Ok((e, evaluate_experiment(e, spec, methods)?)))
        .collect()
}

/// Cross of methods over the A/B suite (and the A/A suite for type-I error),
/// one row per method.
pub fn run_table(
    suite_ab: &[Experiment],
    suite_aa: &[Experiment],
    methods: &[VrConfig],
    spec: &RatioMetricSpec,
    alpha: f64,
) -> Result<Report> {
    if suite_ab.is_empty() {
        return Err(Error::config("the A/B suite is empty"));
    }
    if methods.is_empty() {
        return Err(Error::config("no methods to evaluate"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("alpha must lie in (0, 1)"));
    }
    let ab = evaluate_suite(suite_ab, spec, methods)?;
    let aa = evaluate_suite(suite_aa, spec, methods)?;

    let rows = methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let label = method.label();
            let details: Vec<DetailRow> = ab.iter().map(|(e, outs)| detail(e, label, &outs[m])).collect();
            let vr_pct = details
                .iter()
                .map(|d| variance_reduction_pct(d.variance_raw, d.variance_vr))
                .collect::<Result<Vec<f64>>>()?;
            let p_pairs: Vec<(f64, f64)> = details.iter().map(|d| (d.p_raw, d.p_vr)).collect();
            let z_pairs: Vec<(f64, f64)> = details.iter().map(|d| (d.z_raw, d.z_vr)).collect();
            let median_z = median_relative_z(&z_pairs)?;
            let type_i = if aa.is_empty() {
                None
            } else {
                let results: Vec<TestResult> = aa.iter().map(|(_, outs)| outs[m].reduced.clone()).collect();
                Some(type_i_error(&results, alpha)?)
            };
            Ok(MethodComparison {
                method_label: label.to_string(),
                n_experiments: details.len(),
                variance_reduction_pct: vr_pct.iter().sum::<f64>() / vr_pct.len() as f64,
                frac_lower_pvalue: frac_lower_pvalue(&p_pairs)?,
                median_relative_z: median_z,
                sample_size_reduction: sample_size_reduction(median_z).ok(),
                sign_flips: details.iter().filter(|d| d.sign_flip).count(),
                type_i_error: type_i,
                details,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Report {
        schema_version: SCHEMA_VERSION.to_string(),
        metric: spec.name.clone(),
        alpha,
        n_ab_experiments: suite_ab.len(),
        n_aa_experiments: suite_aa.len(),
        rows,
    })
}

impl Report {
    pub fn row(&self, label: &str) -> Option<&MethodComparison> {
        self.rows.iter().find(|r| r.method_label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Aligned text table, one line per method.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>13} {:>12} {:>13} {:>22}",
            "Covariates", "Var. Red.", "P(p-value↓)", "med. rel. z", "Type-I Error", "99% expected region"
        );
        for row in &self.rows {
            let (t1, region) = match &row.type_i_error {
                Some(t) => (
                    format!("{:.1}%", 100.0 * t.rate),
                    format!("[{:.1}%, {:.1}%]", 100.0 * t.expected_low, 100.0 * t.expected_high),
                ),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{:<10} {:>9.2}% {:>12.2}% {:>12.2} {:>13} {:>22}",
                row.method_label,
                row.variance_reduction_pct,
                100.0 * row.frac_lower_pvalue,
                row.median_relative_z,
                t1,
                region
            );
        }
        let _ = writeln!(
            out,
            "({} A/B experiments, {} A/A experiments, alpha = {})",
            self.n_ab_experiments, self.n_aa_experiments, self.alpha
        );
        out
    }

    /// Per-experiment detail rows of every method as CSV.
    pub fn details_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "experiment_id", "method", "z_raw", "z_vr", "p_raw", "p_vr", "ate_raw", "ate_vr",
                "variance_raw", "variance_vr", "sign_flip", "true_effect",
            ])
            .map_err(|e| Error::config(e.to_string()))?;
        for row in &self.rows {
            for d in &row.details {
                writer
                    .write_record([
                        d.experiment_id.clone(),
                        d.method.clone(),
                        d.z_raw.to_string(),
                        d.z_vr.to_string(),
                        d.p_raw.to_string(),
                        d.p_vr.to_string(),
                        d.ate_raw.to_string(),
                        d.ate_vr.to_string(),
                        d.variance_raw.to_string(),
                        d.variance_vr.to_string(),
                        d.sign_flip.to_string(),
                        d.true_effect.map(|t| t.to_string()).unwrap_or_default(),
                    ])
                    .map_err(|e| Error::config(e.to_string()))?;
            }
        }
        let bytes = writer.into_inner().map_err(|e| Error::config(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_suite, EffectDistribution, SimConfig};

    #[test]
    fn variance_reduction_examples() {
        assert_eq!(variance_reduction_pct(2.0, 2.0).unwrap(), 0.0);
        assert!((variance_reduction_pct(1.0, 0.2753).unwrap() + 72.47).abs() < 1e-9);
        assert!((variance_reduction_pct(1.0, 0.5434).unwrap() + 45.66).abs() < 1e-9);
        assert!(variance_reduction_pct(0.0, 1.0).is_err());
    }

    #[test]
    fn frac_lower_examples() {
        let mut pairs = vec![(0.5, 0.1); 10];
        pairs.extend([(0.1, 0.5); 3]);
        assert!((frac_lower_pvalue(&pairs).unwrap() - 0.7692).abs() < 5e-5);
        assert_eq!(frac_lower_pvalue(&[(0.3, 0.3); 4]).unwrap(), 0.0);
        let mut pairs = vec![(0.5, 0.1); 2];
        pairs.extend([(0.1, 0.5); 11]);
        assert!((frac_lower_pvalue(&pairs).unwrap() - 0.1538).abs() < 5e-5);
        assert!(frac_lower_pvalue(&[]).is_err());
    }

    #[test]
    fn median_relative_z_examples() {
        assert_eq!(median_relative_z(&[(2.0, 2.0), (-1.0, -1.0)]).unwrap(), 1.0);
        assert_eq!(median_relative_z(&[(1.0, 0.5), (1.0, 1.0), (1.0, 2.0)]).unwrap(), 1.0);
        assert_eq!(median_relative_z(&[(1.0, 1.0), (1.0, 2.0)]).unwrap(), 1.5);
        assert!(median_relative_z(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn sample_size_examples() {
        assert!((sample_size_reduction(1.19).unwrap() - 0.2938).abs() < 1e-4);
        assert_eq!(sample_size_reduction(1.0).unwrap(), 0.0);
        assert_eq!(sample_size_reduction(2.0).unwrap(), 0.75);
        assert!(sample_size_reduction(0.0).is_err());
        assert!(sample_size_reduction(-1.0).is_err());
    }

    #[test]
    fn sample_size_reduction_monotone_above_one() {
        let xs: Vec<f64> = (0..100).map(|i| 1.0 + 0.02 * (i + 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| sample_size_reduction(x).unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[0] < w[1]));
    }

    fn aa(p: f64) -> TestResult {
        TestResult {
            method_label: "raw".into(),
            z: 0.0,
            p_value: p,
            ate: 0.0,
            variance_a: 1.0,
            variance_b: 1.0,
            n_a: 10,
            n_b: 10,
        }
    }

    #[test]
    fn type_i_examples() {
        let t = type_i_error(&[aa(0.5), aa(0.06)], 0.05).unwrap();
        assert_eq!(t.rate, 0.0);
        // evenly spaced p-values stand in for a uniform null
        let uniform: Vec<TestResult> = (0..2000).map(|i| aa((i as f64 + 0.5) / 2000.0)).collect();
        let t = type_i_error(&uniform, 0.05).unwrap();
        assert_eq!(t.rejections, 100);
        assert!(t.calibrated);
        assert!(t.ci_low < 0.05 && 0.05 < t.ci_high);
        assert!(type_i_error(&[], 0.05).is_err());
    }

    fn tiny_suite(n: usize, effect: f64, seed: u64) -> Vec<Experiment> {
        let template = SimConfig { n_users: 600, ..SimConfig::default() };
        generate_suite(n, &template, EffectDistribution::Fixed { value: effect }, seed)
            .unwrap()
            .into_iter()
            .map(|s| s.experiment)
            .collect()
    }

    #[test]
    fn raw_self_comparison() {
        let suite = tiny_suite(1, 0.0, 3);
        let report = run_table(&suite, &[], &[VrConfig::with_set(CovariateSet::Raw)], &RatioMetricSpec::retention(), 0.05).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.frac_lower_pvalue, 0.0);
        assert_eq!(row.variance_reduction_pct, 0.0);
        assert_eq!(row.median_relative_z, 1.0);
    }

    #[test]
    fn table_shape_and_order_invariance() {
        let ab = tiny_suite(4, 0.03, 1);
        let aa_suite = tiny_suite(3, 0.0, 2);
        let gbdt = crate::gbdt::GbdtParams { n_trees: 10, min_samples_leaf: 20, ..Default::default() };
        let methods: Vec<VrConfig> = [CovariateSet::PreOnly, CovariateSet::PredOnly, CovariateSet::Union]
            .into_iter()
            .map(|set| VrConfig { gbdt_params: gbdt.clone(), cross_fit_folds: 2, ..VrConfig::with_set(set) })
            .collect();
        let spec = RatioMetricSpec::retention();
        let report = run_table(&ab, &aa_suite, &methods, &spec, 0.05).unwrap();
        let labels: Vec<&str> = report.rows.iter().map(|r| r.method_label.as_str()).collect();
        assert_eq!(labels, ["pre", "pred", "union"]);
        assert!(report.rows.iter().all(|r| r.type_i_error.is_some() && r.details.len() == 4));

        let mut shuffled = ab.clone();
        shuffled.reverse();
        let again = run_table(&shuffled, &aa_suite, &methods, &spec, 0.05).unwrap();
        assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
        assert!(report.to_text().lines().count() >= 4);
        assert_eq!(report.details_csv().unwrap().lines().count(), 1 + 12);
    }
}

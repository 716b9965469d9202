//! Ratio metrics: per-unit components, the Delta-method variance of a ratio
//! of means, and linearization against the control ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{p_value, JointMoments, SampleStats, TestResult};

/// Tolerance below zero that is treated as rounding noise in the Delta
/// variance.
const DELTA_NEGATIVE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearizationSource {
    ControlMean,
    FixedConstant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioMetricSpec {
    pub name: String,
    pub numerator_field: String,
    pub denominator_field: String,
    #[serde(default = "default_linearization")]
    pub linearization_source: LinearizationSource,
    /// Require `numerator <= denominator` per unit (retention-style metrics).
    #[serde(default)]
    pub bounded: bool,
}

fn default_linearization() -> LinearizationSource {
    LinearizationSource::ControlMean
}

impl RatioMetricSpec {
    /// One-day retention: retained day pairs over active days.
    pub fn retention() -> Self {
        Self {
            name: "one_day_retention".into(),
            numerator_field: "numerator".into(),
            denominator_field: "denominator".into(),
            linearization_source: LinearizationSource::ControlMean,
            bounded: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.numerator_field == self.denominator_field {
            return Err(Error::config(
                "numerator and denominator must be different fields",
            ));
        }
        if let LinearizationSource::FixedConstant(c) = self.linearization_source {
            if !c.is_finite() {
                return Err(Error::config("linearization constant must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMetricComponents {
    pub unit_id: String,
    pub numerator: f64,
    pub denominator: f64,
}

/// Per-unit linearized metric `L = numerator - c * denominator`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedMetric {
    pub c: f64,
    pub values: Vec<f64>,
}

/// Daily activity flags of one unit over the experiment window.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyActivity {
    pub unit_id: String,
    pub active: Vec<bool>,
}

/// Retention components per unit: the denominator counts active days that
/// have a following day in the window, the numerator counts those followed
/// by an active day. Units with no eligible day are dropped.
pub fn compute_retention_components(activity: &[DailyActivity]) -> Result<Vec<UnitMetricComponents>> {
    let mut out = Vec::with_capacity(activity.len());
    for unit in activity {
        if unit.active.len() < 2 {
            return Err(Error::config(format!(
                "retention window for unit {} has {} day(s); need at least 2",
                unit.unit_id,
                unit.active.len()
            )));
        }
        let (retained, eligible) = retention_counts(&unit.active);
        if eligible > 0 {
            out.push(UnitMetricComponents {
                unit_id: unit.unit_id.clone(),
                numerator: retained as f64,
                denominator: eligible as f64,
            });
        }
    }
    Ok(out)
}

pub(crate) fn retention_counts(active: &[bool]) -> (u32, u32) {
    active.windows(2).fold((0, 0), |(retained, eligible), pair| {
        if pair[0] {
            (retained + pair[1] as u32, eligible + 1)
        } else {
            (retained, eligible)
        }
    })
}

pub(crate) fn ratio_of_sums(numerator: &[f64], denominator: &[f64]) -> Result<f64> {
    if numerator.is_empty() {
        return Err(Error::EmptySample);
    }
    let den: f64 = denominator.iter().sum();
    if den == 0.0 {
        return Err(Error::DeltaUndefined);
    }
    Ok(numerator.iter().sum::<f64>() / den)
}

pub fn ratio_point_estimate(components: &[UnitMetricComponents]) -> Result<f64> {
    let (num, den) = split(components);
    ratio_of_sums(&num, &den)
}

fn split(components: &[UnitMetricComponents]) -> (Vec<f64>, Vec<f64>) {
    components.iter().map(|c| (c.numerator, c.denominator)).unzip()
}

/// Per-unit Delta-method variance of the ratio of means.
///
/// Divide by the unit count to get the variance of the ratio estimate.
pub fn delta_variance(num: &SampleStats, den: &SampleStats, cov_nd: f64) -> Result<f64> {
    let (mn, md) = (num.mean, den.mean);
    if mn == 0.0 || md == 0.0 {
        return Err(Error::DeltaUndefined);
    }
    let v = (mn * mn) / (md * md)
        * (num.variance / (mn * mn) + den.variance / (md * md) - 2.0 * cov_nd / (mn * md));
    if v < -DELTA_NEGATIVE_SLACK {
        return Err(Error::InconsistentMoments(v));
    }
    Ok(v.max(0.0))
}

pub fn linearization_coefficient(control: &[UnitMetricComponents]) -> Result<f64> {
    ratio_point_estimate(control)
}

pub fn linearize(components: &[UnitMetricComponents], c: f64) -> LinearizedMetric {
    LinearizedMetric {
        c,
        values: components
            .iter()
            .map(|u| u.numerator - c * u.denominator)
            .collect(),
    }
}

/// Joint numerator/denominator moments of one variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub numerator: SampleStats,
    pub denominator: SampleStats,
    pub covariance: f64,
}

impl RatioSummary {
    pub fn from_components(numerator: &[f64], denominator: &[f64]) -> Result<Self> {
        if numerator.len() != denominator.len() {
            return Err(Error::LengthMismatch {
                left: numerator.len(),
                right: denominator.len(),
            });
        }
        let mut joint = JointMoments::new(["n", "d"]);
        for (&n, &d) in numerator.iter().zip(denominator) {
            if !(n.is_finite() && d.is_finite()) {
                return Err(Error::NonFinite("ratio components"));
            }
            joint.push(&[n, d])?;
        }
        Ok(Self {
            numerator: joint.stats("n")?,
            denominator: joint.stats("d")?,
            covariance: joint.covariance("n", "d")?,
        })
    }

    pub fn ratio(&self) -> Result<f64> {
        if self.denominator.mean == 0.0 {
            return Err(Error::DeltaUndefined);
        }
        Ok(self.numerator.mean / self.denominator.mean)
    }

    pub fn n(&self) -> usize {
        self.numerator.n
    }

    pub fn delta_variance(&self) -> Result<f64> {
        delta_variance(&self.numerator, &self.denominator, self.covariance)
    }
}

/// z-test on the ratio metric with Delta-method variances, treatment `a`
/// against control `b`.
pub fn delta_ratio_test(label: impl Into<String>, a: &RatioSummary, b: &RatioSummary) -> Result<TestResult> {
    let (ra, rb) = (a.ratio()?, b.ratio()?);
    let (va, vb) = (a.delta_variance()?, b.delta_variance()?);
    let se_sq = va / a.n() as f64 + vb / b.n() as f64;
    if !(se_sq > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let z = (ra - rb) / se_sq.sqrt();
    Ok(TestResult {
        method_label: label.into(),
        z,
        p_value: p_value(z),
        ate: ra - rb,
        variance_a: va,
        variance_b: vb,
        n_a: a.n(),
        n_b: b.n(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::summarize;
    use proptest::prelude::*;

    fn comp(n: f64, d: f64) -> UnitMetricComponents {
        UnitMetricComponents {
            unit_id: String::new(),
            numerator: n,
            denominator: d,
        }
    }

    fn days(flags: &[u8]) -> DailyActivity {
        DailyActivity {
            unit_id: "u".into(),
            active: flags.iter().map(|&f| f == 1).collect(),
        }
    }

    #[test]
    fn retention_examples() {
        let out = compute_retention_components(&[days(&[1, 1, 1])]).unwrap();
        assert_eq!((out[0].numerator, out[0].denominator), (2.0, 2.0));
        assert!(compute_retention_components(&[days(&[0, 0, 1])]).unwrap().is_empty());
        let out = compute_retention_components(&[days(&[1, 0, 0])]).unwrap();
        assert_eq!((out[0].numerator, out[0].denominator), (0.0, 1.0));
        assert!(compute_retention_components(&[days(&[1])]).is_err());
    }

    #[test]
    fn point_estimate_examples() {
        assert_eq!(ratio_point_estimate(&[comp(2.0, 2.0), comp(3.0, 3.0)]).unwrap(), 1.0);
        assert_eq!(ratio_point_estimate(&[comp(1.0, 2.0), comp(0.0, 2.0)]).unwrap(), 0.25);
        assert_eq!(ratio_point_estimate(&[comp(0.0, 2.0), comp(0.0, 1.0)]).unwrap(), 0.0);
        assert!(ratio_point_estimate(&[comp(0.0, 0.0)]).is_err());
    }

    #[test]
    fn delta_constant_denominator() {
        let num = SampleStats { n: 10, mean: 2.0, variance: 0.5 };
        let den = SampleStats { n: 10, mean: 4.0, variance: 0.0 };
        assert!((delta_variance(&num, &den, 0.0).unwrap() - 0.5 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn delta_constant_ratio_is_zero() {
        let k = 0.3;
        let den = SampleStats { n: 10, mean: 5.0, variance: 2.0 };
        let num = SampleStats { n: 10, mean: k * 5.0, variance: k * k * 2.0 };
        let v = delta_variance(&num, &den, k * 2.0).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn delta_errors() {
        let zero = SampleStats { n: 10, mean: 0.0, variance: 1.0 };
        let one = SampleStats { n: 10, mean: 1.0, variance: 1.0 };
        assert_eq!(
            delta_variance(&zero, &one, 0.0).unwrap_err().to_string(),
            "delta method undefined: zero component mean"
        );
        // |cov| > sd_n * sd_d cannot come from a real joint sample
        assert!(matches!(
            delta_variance(&one, &one, 5.0),
            Err(Error::InconsistentMoments(_))
        ));
    }

    #[test]
    fn linearization_examples() {
        assert_eq!(linearization_coefficient(&[comp(1.0, 2.0), comp(1.0, 2.0)]).unwrap(), 0.5);
        assert_eq!(linearization_coefficient(&[comp(3.0, 3.0), comp(1.0, 1.0)]).unwrap(), 1.0);
        assert!(linearization_coefficient(&[]).is_err());

        let units = [comp(3.0, 4.0), comp(1.0, 5.0)];
        assert_eq!(linearize(&units, 0.0).values, vec![3.0, 1.0]);
        assert_eq!(linearize(&units, 0.5).values[0], 1.0);

        let control = [comp(3.0, 4.0), comp(1.0, 5.0), comp(2.0, 2.0)];
        let c = linearization_coefficient(&control).unwrap();
        let mean: f64 = linearize(&control, c).values.iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
    }

    fn joint_sample() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.0f64..10.0, 0.5f64..10.0), 3..60)
    }

    proptest! {
        #[test]
        fn delta_variance_equals_linear_combination_variance(sample in joint_sample()) {
            let (num, den): (Vec<f64>, Vec<f64>) = sample.iter().copied().unzip();
            let s = RatioSummary::from_components(&num, &den).unwrap();
            prop_assume!(s.numerator.mean > 0.0);
            let v = s.delta_variance().unwrap();
            let (mn, md) = (s.numerator.mean, s.denominator.mean);
            let combo: Vec<f64> = num.iter().zip(&den).map(|(n, d)| n / md - mn / (md * md) * d).collect();
            let direct = summarize(&combo).unwrap().variance;
            prop_assert!(v >= 0.0);
            prop_assert!((v - direct).abs() <= 1e-9 * (1.0 + direct));
        }

        #[test]
        fn delta_variance_permutation_invariant(sample in joint_sample(), rot in 0usize..60) {
            let (num, den): (Vec<f64>, Vec<f64>) = sample.iter().copied().unzip();
            let mut rotated = sample.clone();
            rotated.rotate_left(rot % sample.len());
            rotated.reverse();
            let (num2, den2): (Vec<f64>, Vec<f64>) = rotated.into_iter().unzip();
            let a = RatioSummary::from_components(&num, &den).unwrap();
            let b = RatioSummary::from_components(&num2, &den2).unwrap();
            prop_assume!(a.numerator.mean > 0.0);
            let (va, vb) = (a.delta_variance().unwrap(), b.delta_variance().unwrap());
            prop_assert!((va - vb).abs() <= 1e-9 * (1.0 + va));
        }

        #[test]
        fn linearization_preserves_direction(
            den in prop::collection::vec(0.5f64..5.0, 2..40),
            fa in prop::collection::vec(0.0f64..1.0, 40),
            fb in prop::collection::vec(0.0f64..1.0, 40),
            c in -2.0f64..2.0,
        ) {
            // identical denominators in both variants
            let na: Vec<f64> = den.iter().zip(&fa).map(|(d, f)| d * f).collect();
            let nb: Vec<f64> = den.iter().zip(&fb).map(|(d, f)| d * f).collect();
            let ra = ratio_of_sums(&na, &den).unwrap();
            let rb = ratio_of_sums(&nb, &den).unwrap();
            let mean_l = |num: &[f64]| num.iter().zip(&den).map(|(n, d)| n - c * d).sum::<f64>() / den.len() as f64;
            let diff_l = mean_l(&na) - mean_l(&nb);
            prop_assume!((ra - rb).abs() > 1e-9);
            prop_assert_eq!(diff_l.signum(), (ra - rb).signum());
        }
    }
}

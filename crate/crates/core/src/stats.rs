//! Moments, covariances, the standard normal CDF and the two-sample z-test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Streaming mean/variance accumulator (Welford). Accumulators can be merged
/// pairwise, so per-shard accumulation followed by a fold gives the same
/// moments as a single pass up to rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        self.mean += delta * nb / n as f64;
        self.m2 += other.m2 + delta * delta * na * nb / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then_some(self.mean)
    }

    /// Unbiased variance; undefined below two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.n > 1).then(|| (self.m2 / (self.n - 1) as f64).max(0.0))
    }

    pub fn stats(&self) -> Result<SampleStats> {
        match self.n {
            0 => Err(Error::EmptySample),
            1 => Err(Error::UndefinedVariance(1)),
            n => Ok(SampleStats {
                n: n as usize,
                mean: self.mean,
                variance: (self.m2 / (n - 1) as f64).max(0.0),
            }),
        }
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::new();
        iter.into_iter().for_each(|x| m.push(x));
        m
    }
}

/// Streaming co-moment accumulator for a fixed set of named components
/// observed jointly per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMoments {
    names: Vec<String>,
    n: u64,
    mean: Vec<f64>,
    // row-major upper and lower triangle, kept symmetric
    comoment: Vec<f64>,
}

impl JointMoments {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let k = names.len();
        Self {
            names,
            n: 0,
            mean: vec![0.0; k],
            comoment: vec![0.0; k * k],
        }
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        let k = self.names.len();
        if row.len() != k {
            return Err(Error::LengthMismatch {
                left: k,
                right: row.len(),
            });
        }
        self.n += 1;
        let n = self.n as f64;
        let before: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&before) {
            *m += d / n;
        }
        for i in 0..k {
            let after_i = row[i] - self.mean[i];
            for j in 0..k {
                self.comoment[i * k + j] += after_i * before[j];
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &JointMoments) -> Result<()> {
        if self.names != other.names {
            return Err(Error::config("cannot merge joint moments over different components"));
        }
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            *self = other.clone();
            return Ok(());
        }
        let k = self.names.len();
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..k {
            for j in 0..k {
                self.comoment[i * k + j] +=
                    other.comoment[i * k + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * nb / n;
        }
        self.n += other.n;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingField(name.to_string()))
    }

    pub fn stats(&self, name: &str) -> Result<SampleStats> {
        let i = self.index(name)?;
        let k = self.names.len();
        match self.n {
            0 => Err(Error::EmptySample),
            1 => Err(Error::UndefinedVariance(1)),
            n => Ok(SampleStats {
                n: n as usize,
                mean: self.mean[i],
                variance: (self.comoment[i * k + i] / (n - 1) as f64).max(0.0),
            }),
        }
    }

    pub fn covariance(&self, a: &str, b: &str) -> Result<f64> {
        let (i, j) = (self.index(a)?, self.index(b)?);
        if self.n < 2 {
            return Err(Error::UndefinedVariance(self.n as usize));
        }
        let k = self.names.len();
        Ok(self.comoment[i * k + j] / (self.n - 1) as f64)
    }
}

/// Count, mean and unbiased variance of one metric component within one
/// variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
}

impl SampleStats {
    /// Variance of the sample mean.
    pub fn standard_error_sq(&self) -> f64 {
        self.variance / self.n as f64
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn summarize(values: &[f64]) -> Result<SampleStats> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    check_finite(values, "sample")?;
    values.iter().copied().collect::<Moments>().stats()
}

/// Unbiased sample covariance of two unit-paired sequences.
pub fn covariance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedVariance(x.len()));
    }
    check_finite(x, "covariance input")?;
    check_finite(y, "covariance input")?;
    let mut joint = JointMoments::new(["x", "y"]);
    for (&a, &b) in x.iter().zip(y) {
        joint.push(&[a, b])?;
    }
    joint.covariance("x", "y")
}

/// Pearson correlation of two unit-paired sequences.
pub fn correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    let cov = covariance(x, y)?;
    let vx = summarize(x)?.variance;
    let vy = summarize(y)?.variance;
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Standard normal CDF.
///
/// Hart's double-precision rational approximation (algorithm 5666) for
/// |z| < 7.07, with a continued-fraction tail beyond. Clamped to 0/1
/// outside [-8, 8].
pub fn std_normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z <= -8.0 {
        return 0.0;
    }
    if z >= 8.0 {
        return 1.0;
    }
    let x = z.abs();
    let exponential = (-x * x / 2.0).exp();
    let tail = if x < 7.071_067_811_865_47 {
        const NUM: [f64; 7] = [
            3.526_249_659_989_11e-2,
            0.700_383_064_443_688,
            6.373_962_203_531_65,
            33.912_866_078_383,
            112.079_291_497_871,
            221.213_596_169_931,
            220.206_867_912_376,
        ];
        const DEN: [f64; 8] = [
            8.838_834_764_831_84e-2,
            1.755_667_163_182_64,
            16.064_177_579_207,
            86.780_732_202_946_1,
            296.564_248_779_674,
            637.333_633_378_831,
            793.826_512_519_948,
            440.413_735_824_752,
        ];
        let horner = |coeffs: &[f64]| coeffs.iter().fold(0.0, |acc, c| acc * x + c);
        exponential * horner(&NUM) / horner(&DEN)
    } else {
        let mut cf = x + 0.65;
        cf = x + 4.0 / cf;
        cf = x + 3.0 / cf;
        cf = x + 2.0 / cf;
        cf = x + 1.0 / cf;
        exponential / cf / 2.506_628_274_631
    };
    if z > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Welch-form two-sample z-statistic for `A ≻ B`.
pub fn z_statistic(a: &SampleStats, b: &SampleStats) -> Result<f64> {
    if a.n < 2 || b.n < 2 {
        return Err(Error::UndefinedVariance(a.n.min(b.n)));
    }
    let se_sq = a.standard_error_sq() + b.standard_error_sq();
    if !(se_sq > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    Ok((a.mean - b.mean) / se_sq.sqrt())
}

/// Two-tailed p-value of a z-statistic.
pub fn p_value(z: f64) -> f64 {
    (2.0 * std_normal_cdf(-z.abs())).min(1.0)
}

/// Outcome of one two-sample z-test for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method_label: String,
    pub z: f64,
    pub p_value: f64,
    /// Mean difference of the tested metric, treatment minus control.
    pub ate: f64,
    pub variance_a: f64,
    pub variance_b: f64,
    pub n_a: usize,
    pub n_b: usize,
}

impl TestResult {
    /// z-test of per-unit metric summaries, `a` being the treatment.
    pub fn from_stats(label: impl Into<String>, a: &SampleStats, b: &SampleStats) -> Result<Self> {
        let z = z_statistic(a, b)?;
        Ok(TestResult {
            method_label: label.into(),
            z,
            p_value: p_value(z),
            ate: a.mean - b.mean,
            variance_a: a.variance,
            variance_b: b.variance,
            n_a: a.n,
            n_b: b.n,
        })
    }
}

// Binomial helpers used to judge type-I calibration.

fn binomial_log_pmf_table(n: u64, p: f64) -> Vec<f64> {
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut table = Vec::with_capacity(n as usize + 1);
    let mut log_choose = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        table.push(log_choose + k as f64 * lp + (n - k) as f64 * lq);
    }
    table
}

/// P(X ≤ k) for X ~ Binomial(n, p).
pub fn binomial_cdf(k: u64, n: u64, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let table = binomial_log_pmf_table(n, p);
    let max = table.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = table.iter().map(|l| (l - max).exp()).sum();
    let head: f64 = table[..=k as usize].iter().map(|l| (l - max).exp()).sum();
    (head / total).clamp(0.0, 1.0)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f is increasing in p with a root in [lo, hi]
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact (Clopper-Pearson) two-sided confidence interval for a binomial
/// proportion with `successes` out of `trials`.
pub fn clopper_pearson(successes: u64, trials: u64, confidence: f64) -> (f64, f64) {
    assert!(successes <= trials && trials > 0);
    let tail = (1.0 - confidence) / 2.0;
    let lower = if successes == 0 {
        0.0
    } else {
        // P(X >= x; p) rises with p
        bisect(0.0, 1.0, |p| (1.0 - binomial_cdf(successes - 1, trials, p)) - tail)
    };
    let upper = if successes == trials {
        1.0
    } else {
        // P(X <= x; p) falls with p
        bisect(0.0, 1.0, |p| tail - binomial_cdf(successes, trials, p))
    };
    (lower, upper)
}

/// Central acceptance region `[lo, hi]` (in counts) of Binomial(n, p0): each
/// tail outside the region carries at most `(1 - confidence) / 2`.
pub fn binomial_acceptance_region(trials: u64, p0: f64, confidence: f64) -> (u64, u64) {
    let tail = (1.0 - confidence) / 2.0;
    let mut lo = 0;
    while lo < trials && binomial_cdf(lo, trials, p0) <= tail {
        lo += 1;
    }
    let mut hi = trials;
    while hi > 0 && 1.0 - binomial_cdf(hi - 1, trials, p0) <= tail {
        hi -= 1;
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson_cdf(z: f64) -> f64 {
        // integrate the density from -12 to z
        let (a, n) = (-12.0, 20_000usize);
        let h = (z - a) / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(a) + pdf(z);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.variance), (1.0, 0.0));
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.variance), (2.0, 1.0));
        assert!(matches!(summarize(&[]), Err(Error::EmptySample)));
        assert_eq!(summarize(&[]).unwrap_err().to_string(), "empty sample");
        assert!(matches!(summarize(&[4.0]), Err(Error::UndefinedVariance(1))));
        assert!(matches!(summarize(&[1.0, f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn summarize_is_stable_for_large_offsets() {
        let values: Vec<f64> = (0..1000).map(|i| 1e6 + (i % 7) as f64 * 1e-3).collect();
        let s = summarize(&values).unwrap();
        let shifted: Vec<f64> = values.iter().map(|v| v - 1e6).collect();
        let reference = summarize(&shifted).unwrap();
        assert!((s.variance - reference.variance).abs() <= 1e-6 * reference.variance);
    }

    #[test]
    fn covariance_examples() {
        assert_eq!(covariance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(covariance(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!((covariance(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap() - 2.5).abs() < 1e-12);
        assert!(matches!(
            covariance(&[1.0, 2.0], &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(covariance(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn joint_moments_table() {
        let mut j = JointMoments::new(["n", "d"]);
        for (a, b) in [(1.0, 2.0), (2.0, 4.0), (3.0, 7.0)] {
            j.push(&[a, b]).unwrap();
        }
        let n = j.stats("n").unwrap();
        assert!((j.covariance("n", "n").unwrap() - n.variance).abs() < 1e-12);
        assert!((j.covariance("n", "d").unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(j.covariance("n", "d").unwrap(), j.covariance("d", "n").unwrap());
        assert!(j.stats("x").is_err());
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!((simpson_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert_eq!(std_normal_cdf(-9.0), 0.0);
        assert_eq!(std_normal_cdf(9.0), 1.0);
    }

    #[test]
    fn cdf_matches_quadrature_oracle() {
        let mut z = -8.0;
        while z <= 8.0 {
            let err = (std_normal_cdf(z) - simpson_cdf(z)).abs();
            assert!(err <= 1e-7, "z = {z}: error {err}");
            z += 0.05;
        }
    }

    #[test]
    fn cdf_monotone_on_grid() {
        let grid: Vec<f64> = (0..10_000).map(|i| -8.0 + 16.0 * i as f64 / 9_999.0).collect();
        let values: Vec<f64> = grid.iter().map(|&z| std_normal_cdf(z)).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn z_examples() {
        let a = SampleStats { n: 200, mean: 1.2, variance: 1.0 };
        let b = SampleStats { n: 200, mean: 1.0, variance: 1.0 };
        assert!((z_statistic(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(z_statistic(&a, &b).unwrap(), -z_statistic(&b, &a).unwrap());
        let same = SampleStats { mean: 1.0, ..a };
        assert_eq!(z_statistic(&same, &b).unwrap(), 0.0);
        let flat = SampleStats { n: 10, mean: 1.0, variance: 0.0 };
        assert_eq!(
            z_statistic(&flat, &flat).unwrap_err().to_string(),
            "degenerate variance"
        );
    }

    #[test]
    fn p_value_examples() {
        assert_eq!(p_value(0.0), 1.0);
        assert!((p_value(1.959964) - 0.05).abs() < 1e-5);
        assert_eq!(p_value(2.5), p_value(-2.5));
    }

    #[test]
    fn binomial_cdf_small_case() {
        // Binomial(3, 0.5): P(X <= 1) = 4/8
        assert!((binomial_cdf(1, 3, 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(binomial_cdf(3, 3, 0.5), 1.0);
    }

    #[test]
    fn clopper_pearson_brackets_estimate() {
        let (lo, hi) = clopper_pearson(100, 2000, 0.99);
        assert!(lo < 0.05 && 0.05 < hi);
        // tails at the bounds
        assert!((1.0 - binomial_cdf(99, 2000, lo) - 0.005).abs() < 1e-9);
        assert!((binomial_cdf(100, 2000, hi) - 0.005).abs() < 1e-9);
        assert_eq!(clopper_pearson(0, 10, 0.95).0, 0.0);
        assert_eq!(clopper_pearson(10, 10, 0.95).1, 1.0);
    }

    #[test]
    fn typical_type_i_values_inside_region() {
        let (lo, hi) = binomial_acceptance_region(220, 0.05, 0.95);
        for rate in [0.043, 0.048, 0.052] {
            let count = rate * 220.0;
            assert!(lo as f64 <= count && count <= hi as f64, "{rate} outside [{lo}, {hi}]");
        }
    }
}

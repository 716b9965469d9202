//! Synthetic retention experiments with correlated pre-period behavior.
//!
//! Each user carries two latent traits: a retention propensity (logit-normal
//! next-day retention probability) and an activity propensity (probability of
//! returning after an inactive day). Daily activity is a two-state Markov
//! chain driven by both. The pre-period runs the same chain on latents
//! correlated with the experiment-period ones; pre-experiment features are
//! noisy, nonlinear, monotone transforms of the experiment-period latents
//! mixed with pure-noise columns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Experiment, UnitRecord};
use crate::error::{Error, Result};
use crate::ratio::retention_counts;

pub const CONTROL: &str = "control";
pub const TREATMENT: &str = "treatment";

const PROB_FLOOR: f64 = 0.01;
const PROB_CEIL: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Expected users per variant (assignment is a fair coin per user).
    pub n_users: usize,
    pub window_days: usize,
    pub base_retention: f64,
    /// Standard deviation of the per-user retention logit.
    pub user_heterogeneity: f64,
    pub pre_post_correlation: f64,
    /// Additive shift of the treatment group's retention probability.
    pub effect: f64,
    pub n_features: usize,
    pub feature_signal_fraction: f64,
    /// Noise added to a latent before it is transformed into a feature.
    pub feature_noise: f64,
    /// Fraction of users without pre-period history.
    pub new_user_fraction: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_users: 10_000,
            window_days: 7,
            base_retention: 0.4,
            user_heterogeneity: 1.0,
            pre_post_correlation: 0.6,
            effect: 0.0,
            n_features: 6,
            feature_signal_fraction: 0.5,
            feature_noise: 0.3,
            new_user_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.n_users < 2 {
            return fail("n_users must be at least 2");
        }
        if self.window_days < 2 {
            return fail("window_days must be at least 2");
        }
        if !(self.base_retention > 0.0 && self.base_retention < 1.0) {
            return fail("base_retention must lie in (0, 1)");
        }
        if !(self.base_retention + self.effect.abs() < 1.0) {
            return fail("base_retention + |effect| must be below 1");
        }
        if !(self.user_heterogeneity >= 0.0 && self.user_heterogeneity.is_finite()) {
            return fail("user_heterogeneity must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.pre_post_correlation) {
            return fail("pre_post_correlation must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.feature_signal_fraction) {
            return fail("feature_signal_fraction must lie in [0, 1]");
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return fail("feature_noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.new_user_fraction) {
            return fail("new_user_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn n_signal_features(&self) -> usize {
        (self.n_features as f64 * self.feature_signal_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedExperiment {
    pub experiment: Experiment,
    pub seed: u64,
    /// Users whose retention probability had to be clamped.
    pub clamped_units: usize,
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Two-state activity chain: retained with `stay`, re-activated with `back`.
fn activity_chain(rng: &mut ChaCha8Rng, days: usize, start_active: bool, stay: f64, back: f64) -> Vec<bool> {
    let mut active = Vec::with_capacity(days);
    let mut today = start_active;
    active.push(today);
    for _ in 1..days {
        let p = if today { stay } else { back };
        today = rng.random::<f64>() < p;
        active.push(today);
    }
    active
}

/// Monotone nonlinear feature of a latent trait; the shape cycles with `j`.
fn signal_feature(j: usize, latent: f64) -> f64 {
    match j % 4 {
        0 => (1.5 * latent).tanh(),
        1 => latent.exp(),
        2 => {
            if latent > 0.5 {
                1.0
            } else {
                0.0
            }
        }
        _ => latent * latent * latent.signum(),
    }
}

pub fn generate_experiment(config: &SimConfig) -> Result<SimulatedExperiment> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rho = config.pre_post_correlation;
    let rho_c = (1.0 - rho * rho).sqrt();
    let base_logit = logit(config.base_retention);
    let back_logit = logit(0.3);
    let n_signal = config.n_signal_features();
    let noise = Normal::new(0.0, config.feature_noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(e.to_string()))?;

    let total = 2 * config.n_users;
    let mut units = Vec::with_capacity(total);
    let mut clamped_units = 0;
    for i in 0..total {
        let treated = rng.random::<bool>();
        let z = sample_normal(&mut rng);
        let a = sample_normal(&mut rng);

        let p = sigmoid(base_logit + config.user_heterogeneity * z);
        let shifted = p + if treated { config.effect } else { 0.0 };
        let stay = shifted.clamp(PROB_FLOOR, PROB_CEIL);
        if stay != shifted {
            clamped_units += 1;
        }
        let back = sigmoid(back_logit + 0.8 * a);
        let window = activity_chain(&mut rng, config.window_days, true, stay, back);
        let (numerator, denominator) = retention_counts(&window);

        let z_pre = rho * z + rho_c * sample_normal(&mut rng);
        let a_pre = rho * a + rho_c * sample_normal(&mut rng);
        let new_user = rng.random::<f64>() < config.new_user_fraction;
        let (pre_numerator, pre_denominator) = {
            let stay_pre = sigmoid(base_logit + config.user_heterogeneity * z_pre).clamp(PROB_FLOOR, PROB_CEIL);
            let back_pre = sigmoid(back_logit + 0.8 * a_pre);
            let start = rng.random::<f64>() < 0.8;
            let pre = activity_chain(&mut rng, config.window_days, start, stay_pre, back_pre);
            let (n, d) = retention_counts(&pre);
            if new_user {
                (None, None)
            } else {
                (Some(n as f64), Some(d as f64))
            }
        };

        let features = (0..config.n_features)
            .map(|j| {
                if j < n_signal {
                    let latent = if j % 2 == 0 { z } else { a };
                    signal_feature(j / 2, latent + noise.sample(&mut rng))
                } else {
                    sample_normal(&mut rng)
                }
            })
            .collect();

        units.push(UnitRecord {
            unit_id: format!("u{i:07}"),
            variant: if treated { TREATMENT } else { CONTROL }.to_string(),
            numerator: numerator as f64,
            denominator: denominator as f64,
            pre_numerator,
            pre_denominator,
            features,
        });
    }

    Ok(SimulatedExperiment {
        experiment: Experiment {
            id: format!("sim_{}", config.seed),
            control: CONTROL.into(),
            treatment: TREATMENT.into(),
            units,
            true_effect: Some(config.effect),
        },
        seed: config.seed,
        clamped_units,
    })
}

/// Distribution of per-experiment true effects in a suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectDistribution {
    Fixed { value: f64 },
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, sd: f64 },
}

impl EffectDistribution {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(match *self {
            EffectDistribution::Fixed { value } => value,
            EffectDistribution::Uniform { low, high } => {
                if !(low <= high) {
                    return Err(Error::config("uniform effect needs low <= high"));
                }
                low + (high - low) * rng.random::<f64>()
            }
            EffectDistribution::Normal { mean, sd } => {
                Normal::new(mean, sd).map_err(|e| Error::config(e.to_string()))?.sample(rng)
            }
        })
    }
}

pub(crate) fn derive_seed(master: u64, index: u64) -> u64 {
    let mut x = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-experiment generator configurations of a suite; effects and seeds
/// derive from `seed`.
pub fn suite_configs(
    n_experiments: usize,
    template: &SimConfig,
    effects: EffectDistribution,
    seed: u64,
) -> Result<Vec<SimConfig>> {
    if n_experiments == 0 {
        return Err(Error::config("a suite needs at least one experiment"));
    }
    template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_experiments)
        .map(|i| {
            Ok(SimConfig {
                effect: effects.draw(&mut rng)?,
                seed: derive_seed(seed, i as u64),
                ..template.clone()
            })
        })
        .collect()
}

/// Generates the `index`-th experiment of a suite from its configuration.
pub fn suite_experiment(index: usize, config: &SimConfig) -> Result<SimulatedExperiment> {
    let mut sim = generate_experiment(config)?;
    sim.experiment.id = format!("exp_{index:04}");
    Ok(sim)
}

/// Independent experiments whose seeds and effects derive from `seed`.
pub fn generate_suite(
    n_experiments: usize,
    template: &SimConfig,
    effects: EffectDistribution,
    seed: u64,
) -> Result<Vec<SimulatedExperiment>> {
    suite_configs(n_experiments, template, effects, seed)?
        .iter()
        .enumerate()
        .map(|(i, config)| suite_experiment(i, config))
        .collect()
}

/// A suite description that can be stored alongside results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub generator: SimConfig,
    pub effects: EffectDistribution,
    pub n_experiments: usize,
    pub seed: u64,
}

impl SuiteConfig {
    pub fn configs(&self) -> Result<Vec<SimConfig>> {
        suite_configs(self.n_experiments, &self.generator, self.effects, self.seed)
    }

    pub fn generate(&self) -> Result<Vec<SimulatedExperiment>> {
        generate_suite(self.n_experiments, &self.generator, self.effects, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::correlation;

    fn small(seed: u64) -> SimConfig {
        SimConfig {
            n_users: 2_000,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(small(0).validate().is_ok());
        assert!(SimConfig { window_days: 1, ..small(0) }.validate().is_err());
        assert!(SimConfig { base_retention: 0.9, effect: 0.2, ..small(0) }.validate().is_err());
        assert!(SimConfig { pre_post_correlation: 1.5, ..small(0) }.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_experiment(&small(5)).unwrap();
        let b = generate_experiment(&small(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_experiment(&small(6)).unwrap();
        assert_ne!(a.experiment.units, c.experiment.units);
    }

    #[test]
    fn components_respect_retention_bound() {
        let sim = generate_experiment(&SimConfig { effect: 0.05, ..small(1) }).unwrap();
        for u in &sim.experiment.units {
            assert!(u.numerator <= u.denominator);
            assert!(u.denominator >= 1.0);
            assert!(u.pre_numerator.unwrap() <= u.pre_denominator.unwrap());
            assert_eq!(u.features.len(), 6);
        }
        let treated = sim.experiment.count(TREATMENT);
        assert!((treated as f64 - 2000.0).abs() < 4.0 * (1000.0f64).sqrt());
    }

    #[test]
    fn uncorrelated_pre_period() {
        let sim = generate_experiment(&SimConfig {
            n_users: 25_000,
            pre_post_correlation: 0.0,
            ..small(2)
        })
        .unwrap();
        let (post, pre): (Vec<f64>, Vec<f64>) = sim
            .experiment
            .units
            .iter()
            .filter(|u| u.pre_denominator.unwrap() > 0.0)
            .map(|u| (u.numerator / u.denominator, u.pre_numerator.unwrap() / u.pre_denominator.unwrap()))
            .unzip();
        let r = correlation(&post, &pre).unwrap();
        assert!(r.abs() < 3.0 / (post.len() as f64).sqrt(), "r = {r}");
    }

    #[test]
    fn new_users_lack_pre_period() {
        let sim = generate_experiment(&SimConfig { new_user_fraction: 0.2, ..small(3) }).unwrap();
        let missing = sim.experiment.units.iter().filter(|u| !u.has_pre_period()).count();
        assert!(missing > 600 && missing < 1000);
    }

    #[test]
    fn suite_shapes_and_determinism() {
        let template = SimConfig { n_users: 200, ..SimConfig::default() };
        let aa = generate_suite(220, &template, EffectDistribution::Fixed { value: 0.0 }, 7).unwrap();
        assert_eq!(aa.len(), 220);
        assert!(aa.iter().all(|s| s.experiment.true_effect == Some(0.0)));
        let ab = generate_suite(13, &template, EffectDistribution::Fixed { value: 0.01 }, 7).unwrap();
        assert_eq!(ab.len(), 13);
        assert_eq!(ab, generate_suite(13, &template, EffectDistribution::Fixed { value: 0.01 }, 7).unwrap());
        assert!(generate_suite(0, &template, EffectDistribution::Fixed { value: 0.0 }, 7).is_err());
    }
}

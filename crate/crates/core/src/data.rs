use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratio::RatioMetricSpec;

/// One experimental unit (user).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub variant: String,
    pub numerator: f64,
    pub denominator: f64,
    #[serde(default)]
    pub pre_numerator: Option<f64>,
    #[serde(default)]
    pub pre_denominator: Option<f64>,
    #[serde(default)]
    pub features: Vec<f64>,
}

impl UnitRecord {
    /// Looks up a numeric field by its schema name (`f3` for feature 3).
    pub fn field(&self, name: &str) -> Option<f64> {
        match name {
            "numerator" => Some(self.numerator),
            "denominator" => Some(self.denominator),
            "pre_numerator" => self.pre_numerator,
            "pre_denominator" => self.pre_denominator,
            _ => name
                .strip_prefix('f')
                .and_then(|i| i.parse::<usize>().ok())
                .and_then(|i| self.features.get(i).copied()),
        }
    }

    pub fn has_pre_period(&self) -> bool {
        self.pre_numerator.is_some() && self.pre_denominator.is_some()
    }

    /// Checks the record against the schema and, when given, the metric's
    /// component bound. The message is the rejection reason.
    pub fn validate(&self, metric: Option<&RatioMetricSpec>) -> std::result::Result<(), String> {
        if self.unit_id.is_empty() {
            return Err("empty unit_id".into());
        }
        if self.variant.is_empty() {
            return Err("empty variant".into());
        }
        let reals = [Some(self.numerator), Some(self.denominator), self.pre_numerator, self.pre_denominator];
        if reals.iter().flatten().chain(&self.features).any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.numerator < 0.0 || self.denominator < 0.0 {
            return Err("negative component".into());
        }
        if let Some(spec) = metric {
            let num = self.field(&spec.numerator_field);
            let den = self.field(&spec.denominator_field);
            let (Some(num), Some(den)) = (num, den) else {
                return Err("metric field missing".into());
            };
            if spec.bounded && num > den {
                return Err("component bound violated".into());
            }
        }
        Ok(())
    }
}

/// A two-variant experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: String,
    pub control: String,
    pub treatment: String,
    pub units: Vec<UnitRecord>,
    /// Known effect on the retention probability, for simulated data.
    #[serde(default)]
    pub true_effect: Option<f64>,
}

impl Experiment {
    /// Builds an experiment from records carrying exactly two variant labels,
    /// one of which is `control`.
    ///
    /// Units are stored in `unit_id` order, so nothing downstream depends on
    /// the order of the input rows.
    pub fn from_units(id: impl Into<String>, mut units: Vec<UnitRecord>, control: &str) -> Result<Self> {
        units.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
        if let Some(pair) = units.windows(2).find(|w| w[0].unit_id == w[1].unit_id) {
            return Err(Error::config(format!("duplicate unit_id '{}'", pair[0].unit_id)));
        }
        let mut others: Vec<&str> = units
            .iter()
            .map(|u| u.variant.as_str())
            .filter(|v| *v != control)
            .collect();
        others.sort_unstable();
        others.dedup();
        if others.len() != 1 {
            return Err(Error::config(format!(
                "expected exactly one non-control variant besides '{control}', found {}",
                others.len()
            )));
        }
        let treatment = others[0].to_string();
        let exp = Experiment {
            id: id.into(),
            control: control.to_string(),
            treatment,
            units,
            true_effect: None,
        };
        if exp.count(&exp.control) == 0 {
            return Err(Error::config(format!("control variant '{control}' has no units")));
        }
        Ok(exp)
    }

    pub fn count(&self, variant: &str) -> usize {
        self.units.iter().filter(|u| u.variant == variant).count()
    }

    /// `true` for treatment units, in unit order.
    pub fn treatment_mask(&self) -> Vec<bool> {
        self.units.iter().map(|u| u.variant == self.treatment).collect()
    }

    pub fn n_features(&self) -> usize {
        self.units.first().map_or(0, |u| u.features.len())
    }
}

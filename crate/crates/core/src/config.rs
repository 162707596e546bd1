//! Run configuration: one TOML file fully determines a run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bayesopt::BoConfig;
use crate::ecsampling::EcSamplingConfig;
use crate::error::{Result, SgdaError};
use crate::metrics::{DtwFeature, TestSetConfig};
use crate::policy::{FeatureScales, TrainConfig};
use crate::simenv::{ExpertParams, ScenarioGeometry};
use crate::stp::{driving_properties, Partition, Property, DEFAULT_MAX_PROPERTIES, HARD_BRAKE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sgda,
    Uniform,
    SingleSpec,
    IndividualProps,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Sgda, Strategy::Uniform, Strategy::SingleSpec, Strategy::IndividualProps];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sgda => "sgda",
            Strategy::Uniform => "uniform",
            Strategy::SingleSpec => "single_spec",
            Strategy::IndividualProps => "individual_props",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SgdaError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| SgdaError::config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    /// Expert episodes in the initial dataset.
    pub initial_episodes: usize,
    pub rounds: usize,
    /// Environments sampled per round, seed samples included.
    pub samples: usize,
    /// Uniform samples opening each round's sampling step.
    pub seed_samples: usize,
    /// Environments the expert is queried on per round.
    pub selections: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self { initial_episodes: 40, rounds: 2, samples: 40, seed_samples: 10, selections: 20 }
    }
}

impl Budget {
    pub fn validate(&self) -> Result<()> {
        if self.initial_episodes == 0 {
            return Err(SgdaError::config("budget.initial_episodes must be at least 1"));
        }
        if self.selections > self.samples {
            return Err(SgdaError::config(format!(
                "budget.selections ({}) cannot exceed budget.samples ({})",
                self.selections, self.samples
            )));
        }
        if self.seed_samples > self.samples {
            return Err(SgdaError::config("budget.seed_samples cannot exceed budget.samples"));
        }
        if self.rounds > 0 && self.selections == 0 {
            return Err(SgdaError::config("budget.selections must be at least 1 when rounds are run"));
        }
        Ok(())
    }

    pub fn guided(&self) -> usize {
        self.samples - self.seed_samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub test_set: TestSetConfig,
    pub dtw_features: Vec<DtwFeature>,
    /// Specs rarer than this in the uniform part of the test set count as rare.
    pub rare_threshold: f64,
    pub brake_thresholds: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            test_set: TestSetConfig::default(),
            dtw_features: DtwFeature::DEFAULT.to_vec(),
            rare_threshold: 0.1,
            brake_thresholds: vec![0.2, 0.3, 0.4, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub max_properties: usize,
    pub properties: Vec<Property>,
    pub scenario: ScenarioGeometry,
    pub expert: ExpertParams,
    pub budget: Budget,
    pub training: TrainConfig,
    pub features: FeatureScales,
    pub bayesopt: BoConfig,
    pub sampling: EcSamplingConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Sgda,
            seed: 0,
            max_properties: DEFAULT_MAX_PROPERTIES,
            properties: driving_properties(HARD_BRAKE),
            scenario: ScenarioGeometry::default(),
            expert: ExpertParams::default(),
            budget: Budget::default(),
            training: TrainConfig { hidden_width: 32, epochs: 40, learning_rate: 3e-3, batch_size: 64, ..TrainConfig::default() },
            features: FeatureScales::default(),
            bayesopt: BoConfig::default(),
            sampling: EcSamplingConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SgdaError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SgdaError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SgdaError::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.properties.is_empty() {
            return Err(SgdaError::config("at least one property is required"));
        }
        let part = self.partition()?;
        self.scenario.validate()?;
        self.expert.validate()?;
        self.budget.validate()?;
        self.training.validate()?;
        self.bayesopt.validate()?;
        if !(self.sampling.ucb_c.is_finite() && self.sampling.ucb_c >= 0.0) {
            return Err(SgdaError::config("sampling.ucb_c must be finite and non-negative"));
        }
        let f = &self.features;
        if [f.position, f.speed, f.accel].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SgdaError::config("feature scales must be positive"));
        }
        let ev = &self.evaluation;
        ev.test_set.validate(part.len())?;
        if ev.dtw_features.is_empty() {
            return Err(SgdaError::config("evaluation.dtw_features must not be empty"));
        }
        if !(0.0..=1.0).contains(&ev.rare_threshold) {
            return Err(SgdaError::config("evaluation.rare_threshold must lie in [0, 1]"));
        }
        if ev.brake_thresholds.iter().any(|t| !t.is_finite()) {
            return Err(SgdaError::config("brake thresholds must be finite"));
        }
        Ok(())
    }

    pub fn partition(&self) -> Result<Partition> {
        Partition::build(self.properties.clone(), self.max_properties)
    }
}

use std::path::Path as FsPath;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{featurize, FeatureScales, FeatureVector, FEATURE_DIM};
use super::mlp::Mlp;
use super::Policy;
use crate::error::{Result, SgdaError};
use crate::seed;
use crate::simenv::{Action, State, Trajectory};

pub const CHECKPOINT_FORMAT: &str = "sgda-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            hidden_layers: 3,
            epochs: 100,
            learning_rate: 1e-4,
            batch_size: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.hidden_layers == 0 || self.batch_size == 0 {
            return Err(SgdaError::config("training widths, depth and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SgdaError::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(SgdaError::config("Adam betas must lie in [0, 1) and epsilon be positive"));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![FEATURE_DIM];
        sizes.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        sizes.push(1);
        sizes
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureVector,
    pub action: f64,
    pub episode: u64,
    /// Aggregation round that produced the pair; -1 for the initial data.
    pub round: i64,
}

/// Append-only collection of expert (state, action) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    episodes: u64,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every step of `traj` as one episode; returns the episode id.
    pub fn add_trajectory(&mut self, traj: &Trajectory, round: i64, scales: &FeatureScales) -> u64 {
        let episode = self.episodes;
        self.episodes += 1;
        self.samples.extend(traj.steps.iter().map(|step| Sample {
            features: featurize(&step.state, scales),
            action: step.action.longitudinal,
            episode,
            round,
        }));
        episode
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn push(&mut self, features: FeatureVector, action: f64) {
        let episode = self.episodes;
        self.episodes += 1;
        self.samples.push(Sample { features, action, episode, round: -1 });
    }
}

/// A trained behavioral-cloning policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub net: Mlp,
    pub scales: FeatureScales,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    scales: FeatureScales,
    config_hash: String,
    params: Vec<f64>,
}

impl MlpPolicy {
    pub fn predict(&self, features: &FeatureVector) -> f64 {
        self.net.forward(features)[0]
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layer_sizes: self.net.sizes().to_vec(),
            scales: self.scales,
            config_hash: self.config_hash.clone(),
            params: self.net.params().to_vec(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(SgdaError::input(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if ckpt.layer_sizes.first() != Some(&FEATURE_DIM) || ckpt.layer_sizes.last() != Some(&1) {
            return Err(SgdaError::input("checkpoint layer sizes do not match the feature layout"));
        }
        Ok(Self {
            net: Mlp::from_params(&ckpt.layer_sizes, ckpt.params)?,
            scales: ckpt.scales,
            config_hash: ckpt.config_hash,
        })
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Policy for MlpPolicy {
    fn act(&self, state: &State) -> Action {
        Action::new(self.predict(&featurize(state, &self.scales)))
    }
}

/// Behavioral cloning: minibatch Adam on the mean L1 loss, starting from a
/// fresh seeded initialization.
pub fn train_bc(data: &Dataset, config: &TrainConfig, scales: FeatureScales, seed: u64) -> Result<MlpPolicy> {
    train_bc_logged(data, config, scales, seed).map(|(p, _)| p)
}

/// As [`train_bc`], also returning the mean training loss of each epoch.
pub fn train_bc_logged(
    data: &Dataset,
    config: &TrainConfig,
    scales: FeatureScales,
    seed: u64,
) -> Result<(MlpPolicy, Vec<f64>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(SgdaError::input("cannot train on an empty dataset"));
    }
    let mut init_rng = seed::rng(seed, "bc-init", 0);
    let mut shuffle_rng = seed::rng(seed, "bc-shuffle", 0);
    let mut net = Mlp::init(&config.layer_sizes(), &mut init_rng)?;

    let n_params = net.params().len();
    let mut grad = vec![0.0; n_params];
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut inputs: Vec<&[f64]> = Vec::with_capacity(config.batch_size);
    let mut targets = Vec::with_capacity(config.batch_size);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        for batch in order.chunks(config.batch_size) {
            inputs.clear();
            targets.clear();
            for &i in batch {
                let s = &data.samples()[i];
                inputs.push(&s.features);
                targets.push(s.action);
            }
            let loss = net.l1_loss_and_grad(&inputs, &targets, &mut grad);
            weighted += loss * batch.len() as f64;
            if !loss.is_finite() {
                return Err(SgdaError::Numerical("training loss diverged".into()));
            }
            step += 1;
            let bc1 = 1.0 - config.beta1.powi(step);
            let bc2 = 1.0 - config.beta2.powi(step);
            for (((p, g), m), v) in net.params_mut().iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
                *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                *p -= config.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + config.epsilon);
            }
        }
        epoch_losses.push(weighted / data.len() as f64);
    }
    Ok((MlpPolicy { net, scales, config_hash: config.hash() }, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig { hidden_width: 16, epochs, learning_rate: 3e-3, batch_size: 32, ..TrainConfig::default() }
    }

    fn constant_dataset() -> Dataset {
        let mut d = Dataset::new();
        for i in 0..200 {
            let x = i as f64 / 200.0;
            d.push([x, 1.0 - x, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, x * x], 0.3);
        }
        d
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let err = train_bc(&Dataset::new(), &small_config(1), FeatureScales::default(), 0);
        assert!(matches!(err, Err(SgdaError::Input(_))));
    }

    #[test]
    fn learns_a_constant_target() {
        let data = constant_dataset();
        let policy = train_bc(&data, &small_config(150), FeatureScales::default(), 1).unwrap();
        for s in data.samples() {
            let y = policy.predict(&s.features);
            assert!((y - 0.3).abs() < 0.02, "prediction {y}");
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = constant_dataset();
        let a = train_bc(&data, &small_config(3), FeatureScales::default(), 9).unwrap();
        let b = train_bc(&data, &small_config(3), FeatureScales::default(), 9).unwrap();
        let c = train_bc(&data, &small_config(3), FeatureScales::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.net.params(), c.net.params());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let data = constant_dataset();
        let policy = train_bc(&data, &small_config(2), FeatureScales::default(), 4).unwrap();
        let back = MlpPolicy::from_json(&policy.to_json().unwrap()).unwrap();
        assert_eq!(policy, back);
        assert_eq!(back.config_hash, small_config(2).hash());
    }

    #[test]
    fn checkpoint_rejects_foreign_format() {
        let text = r#"{"format":"other","version":1,"layer_sizes":[10,1],"scales":{"position":50.0,"speed":15.0,"accel":10.0},"config_hash":"","params":[]}"#;
        assert!(MlpPolicy::from_json(text).is_err());
    }

    #[test]
    fn layer_sizes_follow_config() {
        let c = TrainConfig::default();
        assert_eq!(c.layer_sizes(), vec![10, 256, 256, 256, 1]);
    }
}

//! Policies and the behavioral-cloning learner.

mod features;
mod mlp;
mod train;

use crate::simenv::{Action, State};

pub use features::{featurize, FeatureScales, FeatureVector, FEATURE_DIM};
pub use mlp::Mlp;
pub use train::{train_bc, Dataset, MlpPolicy, Sample, TrainConfig, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

/// A controller mapping the current observation to a longitudinal command.
pub trait Policy: Send + Sync {
    fn act(&self, state: &State) -> Action;
}

/// Outputs the same command everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    fn act(&self, _state: &State) -> Action {
        Action::new(self.0)
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, state: &State) -> Action {
        (**self).act(state)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn act(&self, state: &State) -> Action {
        (**self).act(state)
    }
}

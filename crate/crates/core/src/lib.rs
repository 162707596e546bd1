//! Specification-guided data aggregation for imitation learning.
//!
//! A set of temporal-logic properties partitions trajectory space into
//! `2^l` specifications. Each aggregation round samples driving scenarios
//! with a UCB-scheduled Bayesian optimizer so that every specification gets
//! represented, selects the scenarios on which the learner and the expert
//! land in different specifications, queries the expert there, and retrains
//! a behavioral-cloning policy on the grown dataset.

pub mod bayesopt;
pub mod config;
pub mod ecsampling;
pub mod ecselect;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod report;
pub mod rundir;
pub mod seed;
pub mod sgda;
pub mod simenv;
pub mod stl;
pub mod stp;

pub use config::{RunConfig, Strategy};
pub use error::{Result, SgdaError};

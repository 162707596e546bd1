//! Environment-condition sampling: a UCB bandit over specifications decides
//! which spec the optimizer targets next, favouring specs with few landed
//! trajectories while still revisiting rarely tried ones.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bayesopt::{target_value, Sampler};
use crate::error::{Result, SgdaError};
use crate::simenv::{EnvCondition, ScenarioGeometry, Trajectory};
use crate::stp::Partition;

/// Rolls the learner out on a condition.
pub type Dynamics<'a> = dyn Fn(&EnvCondition) -> Result<Trajectory> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EcSamplingConfig {
    /// Weight of the exploration term.
    pub ucb_c: f64,
    /// Multiply the exploitation term by the partition's spec weights.
    pub use_spec_weights: bool,
}

impl Default for EcSamplingConfig {
    fn default() -> Self {
        Self { ucb_c: 1.0, use_spec_weights: false }
    }
}

/// `Q_j = max_i |phi_i| - |phi_j|`.
pub fn q_values(landed: &[usize]) -> Vec<f64> {
    let max = landed.iter().copied().max().unwrap_or(0);
    landed.iter().map(|&c| (max - c) as f64).collect()
}

/// Index maximizing `w_j Q_j / (max Q + eps) + c sqrt(2 ln(t + 2) / (N_j + 1))`,
/// lowest index on ties.
pub fn ucb_pick(q: &[f64], n: &[u64], t: u64, weights: &[f64], c: f64) -> Result<usize> {
    if q.is_empty() || q.len() != n.len() || q.len() != weights.len() {
        return Err(SgdaError::input("UCB inputs must be non-empty and of equal length"));
    }
    const EPS: f64 = 1e-9;
    let max_q = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_term = 2.0 * ((t + 2) as f64).ln();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..q.len() {
        let score = weights[j] * q[j] / (max_q + EPS) + c * (log_term / (n[j] + 1) as f64).sqrt();
        if score > best_score {
            best = j;
            best_score = score;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditState {
    pub t: u64,
    pub attempts: Vec<u64>,
    pub q: Vec<f64>,
    pub current: usize,
}

#[derive(Debug, Clone)]
pub struct Sampled {
    pub env: EnvCondition,
    pub trajectory: Trajectory,
    pub spec: usize,
}

/// One bandit iteration, as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t: u64,
    pub target: usize,
    pub env: EnvCondition,
    pub landed: usize,
    pub value: f64,
    pub q: Vec<f64>,
    pub attempts: Vec<u64>,
}

fn ucb_weights(part: &Partition, config: &EcSamplingConfig) -> Vec<f64> {
    if config.use_spec_weights {
        part.spec_weights().to_vec()
    } else {
        vec![1.0; part.len()]
    }
}

/// Uniform draws that seed every spec's surrogate and the landed stores
/// without touching attempt counts.
pub fn seed_phase<R: Rng + ?Sized>(
    part: &mut Partition,
    sampler: &mut Sampler,
    dynamics: &Dynamics,
    count: usize,
    geom: &ScenarioGeometry,
    rng: &mut R,
) -> Result<Vec<Sampled>> {
    let envs: Vec<EnvCondition> =
        (0..count).map(|_| EnvCondition::sample_uniform(&sampler.encoding().ranges, rng)).collect();
    let trajectories = roll_all(dynamics, &envs)?;
    let mut out = Vec::with_capacity(count);
    for (env, trajectory) in envs.into_iter().zip(trajectories) {
        let eval = part.evaluate(&trajectory, geom)?;
        for spec in part.specs() {
            let satisfied = spec.index == eval.spec;
            let value = target_value(
                spec.robustness(&eval.robustness),
                satisfied,
                &trajectory,
                part.landed(spec.index),
                sampler.config(),
            )?;
            sampler.observe(spec.index, &env, value)?;
        }
        part.record(eval.spec, env, trajectory.clone());
        out.push(Sampled { env, trajectory, spec: eval.spec });
    }
    Ok(out)
}

/// Rolls `dynamics` out on every condition in parallel, keeping order.
pub fn roll_all(dynamics: &Dynamics, envs: &[EnvCondition]) -> Result<Vec<Trajectory>> {
    use rayon::prelude::*;
    envs.par_iter().map(dynamics).collect()
}

/// `k` iterations of the bandit loop: propose for the current spec, roll
/// out, record where the trajectory landed, feed the spec-relative target
/// back to the current spec's surrogate, recompute `Q` and pick the next
/// spec.
pub fn ec_sampling<R: Rng + ?Sized>(
    part: &mut Partition,
    sampler: &mut Sampler,
    dynamics: &Dynamics,
    k: usize,
    geom: &ScenarioGeometry,
    config: &EcSamplingConfig,
    rng: &mut R,
) -> Result<(Vec<Sampled>, Vec<IterationRecord>)> {
    if k == 0 {
        return Err(SgdaError::input("EC-Sampling needs k >= 1"));
    }
    if sampler.num_targets() != part.len() {
        return Err(SgdaError::input("sampler targets must match the partition's specs"));
    }
    let weights = ucb_weights(part, config);
    let eligible: Vec<usize> = (0..part.len()).filter(|&j| weights[j] > 0.0).collect();
    if eligible.is_empty() {
        return Err(SgdaError::config("every specification has zero weight"));
    }
    let mut state = BanditState {
        t: 0,
        attempts: vec![0; part.len()],
        q: q_values(&part.landed_counts()),
        current: eligible[rng.random_range(0..eligible.len())],
    };
    let mut samples = Vec::with_capacity(k);
    let mut records = Vec::with_capacity(k);
    for t in 0..k as u64 {
        state.t = t;
        let target = state.current;
        let env = sampler.propose(target, rng)?;
        state.attempts[target] += 1;
        part.add_attempt(target);
        let trajectory = dynamics(&env)?;
        let eval = part.evaluate(&trajectory, geom)?;
        let robustness = part.specs()[target].robustness(&eval.robustness);
        let value = target_value(robustness, eval.spec == target, &trajectory, part.landed(target), sampler.config())?;
        sampler.observe(target, &env, value)?;
        part.record(eval.spec, env, trajectory.clone());
        state.q = q_values(&part.landed_counts());
        state.current = ucb_pick(&state.q, &state.attempts, t + 1, &weights, config.ucb_c)?;
        records.push(IterationRecord {
            t,
            target,
            env,
            landed: eval.spec,
            value,
            q: state.q.clone(),
            attempts: state.attempts.clone(),
        });
        samples.push(Sampled { env, trajectory, spec: eval.spec });
    }
    Ok((samples, records))
}

/// Per-iteration trace: `t, target, landed, value`, the condition, then
/// `q_j` and `n_j` for every spec.
pub fn write_trace<W: Write>(out: W, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let specs = records.first().map_or(0, |r| r.q.len());
    let mut header: Vec<String> = [
        "t",
        "target",
        "landed",
        "value",
        "ego_init_distance",
        "ado_side",
        "ado_maneuver",
        "ado_init_distance",
        "ado_min_speed",
        "ado_max_speed",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..specs).map(|j| format!("q{j}")));
    header.extend((0..specs).map(|j| format!("n{j}")));
    w.write_record(&header)?;
    for r in records {
        let e = &r.env;
        let mut record = vec![
            r.t.to_string(),
            r.target.to_string(),
            r.landed.to_string(),
            r.value.to_string(),
            e.ego_init_distance.to_string(),
            format!("{:?}", e.ado_side).to_lowercase(),
            format!("{:?}", e.ado_maneuver).to_lowercase(),
            e.ado_init_distance.to_string(),
            e.ado_min_speed.to_string(),
            e.ado_max_speed.to_string(),
        ];
        record.extend(r.q.iter().map(f64::to_string));
        record.extend(r.attempts.iter().map(u64::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

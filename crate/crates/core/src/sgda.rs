//! The aggregation loop: train on expert data, sample conditions, pick the
//! ones worth an expert query, aggregate, retrain. The sampling step is
//! pluggable so the baselines share every other part of the loop.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::bayesopt::{target_value, Sampler};
use crate::config::{RunConfig, Strategy};
use crate::ecsampling::{ec_sampling, roll_all, seed_phase, write_trace, Dynamics, IterationRecord, Sampled};
use crate::ecselect::{ec_select, selection_weights, write_report, OutcomePairTable};
use crate::error::{Result, SgdaError};
use crate::metrics::{
    brake_sweep, build_test_set, evaluate, write_brake_sweep_csv, write_dtw_csv, write_metrics_csv,
    write_per_outcome_csv, BrakeSweepRow, EntryResult, MetricsReport, TestSet,
};
use crate::policy::{train_bc, Dataset, MlpPolicy, Policy};
use crate::rundir::RunDir;
use crate::seed;
use crate::simenv::{rollout, EnvCondition, ScenarioGeometry, Trajectory};
use crate::stp::{Evaluation, Landed, Partition};

/// Where a pool member came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Uniform,
    Seed,
    Guided,
}

/// One sampled condition with the learner's outcome on it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolEntry {
    pub env: EnvCondition,
    pub spec: usize,
    pub source: Source,
    /// Spec or falsifier the optimizer was aiming at, for guided samples.
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub pool: Vec<PoolEntry>,
    /// Pool positions the expert was queried on, in selection order.
    pub selected: Vec<usize>,
    /// Selection weights in force; `None` means uniform selection.
    pub weights: Option<Vec<f64>>,
    pub expert_specs: Vec<usize>,
    pub pairs_added: usize,
    pub dataset_len: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial_policy: MlpPolicy,
    pub policy: MlpPolicy,
    pub dataset: Dataset,
    pub rounds: Vec<RoundSummary>,
}

/// What a falsifier drives toward violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FalsifyTarget {
    /// The conjunction of every property.
    AllTrue,
    Property(usize),
}

impl FalsifyTarget {
    /// Robustness of the target formula and whether it is violated.
    pub fn score(self, eval: &Evaluation, part: &Partition) -> (f64, bool) {
        match self {
            FalsifyTarget::AllTrue => (part.specs()[0].robustness(&eval.robustness), eval.spec != 0),
            FalsifyTarget::Property(p) => (eval.robustness[p], !eval.truth[p]),
        }
    }
}

/// Splits `total` into `parts` near-equal shares, the remainder going to the
/// lowest indices.
pub fn split_budget(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Falsification sampling: `seed_count` uniform draws shared by every
/// falsifier, then `budgets[t]` greedy proposals from falsifier `t`. Each
/// falsifier maximizes negated robustness plus the diversity bonus, the
/// bonus measured against the trajectories that falsifier has already
/// seen violate its target.
#[allow(clippy::too_many_arguments)]
pub fn falsify<R: Rng + ?Sized>(
    part: &mut Partition,
    sampler: &mut Sampler,
    targets: &[FalsifyTarget],
    budgets: &[usize],
    seed_count: usize,
    dynamics: &Dynamics,
    geom: &ScenarioGeometry,
    rng: &mut R,
) -> Result<Vec<PoolEntry>> {
    if targets.len() != budgets.len() || sampler.num_targets() != targets.len() {
        return Err(SgdaError::input("one budget and one sampler target per falsifier"));
    }
    let mut stores: Vec<Vec<Landed>> = vec![Vec::new(); targets.len()];
    let mut pool = Vec::new();

    let envs: Vec<EnvCondition> =
        (0..seed_count).map(|_| EnvCondition::sample_uniform(&sampler.encoding().ranges, rng)).collect();
    for (env, trajectory) in envs.iter().zip(roll_all(dynamics, &envs)?) {
        let eval = part.evaluate(&trajectory, geom)?;
        let mut falsified = Vec::new();
        for (t, target) in targets.iter().enumerate() {
            let (rho, violated) = target.score(&eval, part);
            let value = target_value(-rho, violated, &trajectory, &stores[t], sampler.config())?;
            sampler.observe(t, env, value)?;
            if violated {
                falsified.push(t);
            }
        }
        for t in falsified {
            stores[t].push(Landed { env: *env, trajectory: trajectory.clone() });
        }
        part.record(eval.spec, *env, trajectory);
        pool.push(PoolEntry { env: *env, spec: eval.spec, source: Source::Seed, target: None });
    }

    for (t, (&target, &budget)) in targets.iter().zip(budgets).enumerate() {
        for _ in 0..budget {
            let env = sampler.propose(t, rng)?;
            let trajectory = dynamics(&env)?;
            let eval = part.evaluate(&trajectory, geom)?;
            let (rho, violated) = target.score(&eval, part);
            let value = target_value(-rho, violated, &trajectory, &stores[t], sampler.config())?;
            sampler.observe(t, &env, value)?;
            if violated {
                stores[t].push(Landed { env, trajectory: trajectory.clone() });
            }
            part.record(eval.spec, env, trajectory);
            pool.push(PoolEntry { env, spec: eval.spec, source: Source::Guided, target: Some(t) });
        }
    }
    Ok(pool)
}

/// Output of one sampling step, before selection.
struct SamplingStep {
    pool: Vec<PoolEntry>,
    partition: Partition,
    sampler: Option<Sampler>,
    trace: Vec<IterationRecord>,
}

fn pool_from(samples: Vec<Sampled>, source: Source, targets: Option<&[IterationRecord]>) -> Vec<PoolEntry> {
    samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| PoolEntry { env: s.env, spec: s.spec, source, target: targets.map(|r| r[i].target) })
        .collect()
}

fn sampling_step<R: Rng + ?Sized>(
    cfg: &RunConfig,
    dynamics: &Dynamics,
    rng: &mut R,
) -> Result<SamplingStep> {
    let geom = &cfg.scenario;
    let budget = &cfg.budget;
    let mut part = cfg.partition()?;
    match cfg.strategy {
        Strategy::Sgda => {
            let mut sampler = Sampler::new(part.len(), geom.ranges.clone(), cfg.bayesopt.clone())?;
            let seeds = seed_phase(&mut part, &mut sampler, dynamics, budget.seed_samples, geom, rng)?;
            let mut pool = pool_from(seeds, Source::Seed, None);
            let mut trace = Vec::new();
            if budget.guided() > 0 {
                let (guided, records) =
                    ec_sampling(&mut part, &mut sampler, dynamics, budget.guided(), geom, &cfg.sampling, rng)?;
                pool.extend(pool_from(guided, Source::Guided, Some(&records)));
                trace = records;
            }
            Ok(SamplingStep { pool, partition: part, sampler: Some(sampler), trace })
        }
        Strategy::Uniform => {
            let envs: Vec<EnvCondition> =
                (0..budget.selections).map(|_| EnvCondition::sample_uniform(&geom.ranges, rng)).collect();
            let mut pool = Vec::with_capacity(envs.len());
            for (env, traj) in envs.iter().zip(roll_all(dynamics, &envs)?) {
                let spec = part.classify(&traj, geom)?;
                part.record(spec, *env, traj);
                pool.push(PoolEntry { env: *env, spec, source: Source::Uniform, target: None });
            }
            Ok(SamplingStep { pool, partition: part, sampler: None, trace: Vec::new() })
        }
        Strategy::SingleSpec | Strategy::IndividualProps => {
            let targets: Vec<FalsifyTarget> = if cfg.strategy == Strategy::SingleSpec {
                vec![FalsifyTarget::AllTrue]
            } else {
                (0..part.properties().len()).map(FalsifyTarget::Property).collect()
            };
            let budgets = split_budget(budget.guided(), targets.len());
            let mut sampler = Sampler::new(targets.len(), geom.ranges.clone(), cfg.bayesopt.clone())?;
            let pool = falsify(&mut part, &mut sampler, &targets, &budgets, budget.seed_samples, dynamics, geom, rng)?;
            Ok(SamplingStep { pool, partition: part, sampler: Some(sampler), trace: Vec::new() })
        }
    }
}

fn learner_dynamics<'a>(policy: &'a dyn Policy, geom: &'a ScenarioGeometry, noise_base: u64) -> Box<Dynamics<'a>> {
    Box::new(move |e: &EnvCondition| rollout(policy, e, geom, e.noise_seed(noise_base)))
}

/// Runs the configured strategy end to end and returns the final policy.
/// With a run directory, every round's artifacts are written as it
/// completes; a failing round leaves a `failure.txt` behind.
pub fn run(cfg: &RunConfig, expert: &dyn Policy, out: Option<&RunDir>) -> Result<RunOutput> {
    cfg.validate()?;
    let geom = &cfg.scenario;
    let noise_base = seed::derive(cfg.seed, "noise", 0);
    let num_specs = cfg.partition()?.len();

    let mut rng = seed::rng(cfg.seed, "initial", 0);
    let envs: Vec<EnvCondition> =
        (0..cfg.budget.initial_episodes).map(|_| EnvCondition::sample_uniform(&geom.ranges, &mut rng)).collect();
    let expert_dynamics = learner_dynamics(expert, geom, noise_base);
    let mut dataset = Dataset::new();
    for traj in roll_all(&*expert_dynamics, &envs)? {
        dataset.add_trajectory(&traj, -1, &cfg.features);
    }
    let initial_policy = train_bc(&dataset, &cfg.training, cfg.features, seed::derive(cfg.seed, "train", 0))?;
    if let Some(dir) = out {
        write_text(dir, "initial/policy.ckpt", &initial_policy.to_json()?)?;
    }

    let mut policy = initial_policy.clone();
    let mut previous = OutcomePairTable::default();
    let mut rounds = Vec::with_capacity(cfg.budget.rounds);
    for round in 0..cfg.budget.rounds {
        let result = run_round(cfg, expert, &policy, &previous, round, num_specs, noise_base, &mut dataset, out);
        match result {
            Ok((summary, next_policy, table)) => {
                policy = next_policy;
                previous = table;
                rounds.push(summary);
            }
            Err(e) => {
                if let Some(dir) = out {
                    let rel = format!("{}/failure.txt", RunDir::round_name(round));
                    if let Err(write_err) = write_text(dir, &rel, &format!("{e}\n")) {
                        log::error!("could not record failure of round {round}: {write_err}");
                    }
                }
                return Err(e);
            }
        }
    }
    Ok(RunOutput { initial_policy, policy, dataset, rounds })
}

#[allow(clippy::too_many_arguments)]
fn run_round(
    cfg: &RunConfig,
    expert: &dyn Policy,
    policy: &MlpPolicy,
    previous: &OutcomePairTable,
    round: usize,
    num_specs: usize,
    noise_base: u64,
    dataset: &mut Dataset,
    out: Option<&RunDir>,
) -> Result<(RoundSummary, MlpPolicy, OutcomePairTable)> {
    let geom = &cfg.scenario;
    let mut rng = seed::rng(cfg.seed, "sample", round as u64);
    let dynamics = learner_dynamics(policy, geom, noise_base);
    let step = sampling_step(cfg, &*dynamics, &mut rng)?;
    let pool_specs: Vec<usize> = step.pool.iter().map(|p| p.spec).collect();

    let mut select_rng = seed::rng(cfg.seed, "select", round as u64);
    let weights = if cfg.strategy == Strategy::Sgda && round > 0 {
        Some(selection_weights(previous, num_specs)?)
    } else {
        None
    };
    let selected = if cfg.strategy == Strategy::Uniform {
        (0..step.pool.len()).collect()
    } else {
        ec_select(&pool_specs, weights.as_deref(), cfg.budget.selections, &mut select_rng)?
    };

    let envs: Vec<EnvCondition> = selected.iter().map(|&i| step.pool[i].env).collect();
    let expert_dynamics = learner_dynamics(expert, geom, noise_base);
    let expert_trajs = roll_all(&*expert_dynamics, &envs)?;
    let expert_specs: Vec<usize> =
        expert_trajs.iter().map(|t| step.partition.classify(t, geom)).collect::<Result<_>>()?;
    let table = OutcomePairTable::new(
        selected.iter().zip(&expert_specs).map(|(&i, &expert_spec)| (expert_spec, step.pool[i].spec)).collect(),
    );

    let before = dataset.len();
    for traj in &expert_trajs {
        dataset.add_trajectory(traj, round as i64, &cfg.features);
    }
    let next = train_bc(dataset, &cfg.training, cfg.features, seed::derive(cfg.seed, "train", round as u64 + 1))?;

    let summary = RoundSummary {
        round,
        pool: step.pool,
        selected,
        weights,
        expert_specs,
        pairs_added: dataset.len() - before,
        dataset_len: dataset.len(),
    };
    if let Some(dir) = out {
        write_round(dir, &summary, &step.partition, step.sampler.as_ref(), &step.trace, previous, &next, dataset, before, &expert_trajs)?;
    }
    log::info!(
        "round {round}: pool {} selected {} dataset {} pairs",
        summary.pool.len(),
        summary.selected.len(),
        summary.dataset_len
    );
    Ok((summary, next, table))
}

fn write_text(dir: &RunDir, rel: &str, text: &str) -> Result<()> {
    let mut f = dir.create_file(rel)?;
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_round(
    dir: &RunDir,
    summary: &RoundSummary,
    part: &Partition,
    sampler: Option<&Sampler>,
    trace: &[IterationRecord],
    previous: &OutcomePairTable,
    policy: &MlpPolicy,
    dataset: &Dataset,
    first_new: usize,
    expert_trajs: &[Trajectory],
) -> Result<()> {
    let base = RunDir::round_name(summary.round);
    write_text(dir, &format!("{base}/policy.ckpt"), &policy.to_json()?)?;

    let mut f = dir.create_file(format!("{base}/pool.jsonl"))?;
    for entry in &summary.pool {
        serde_json::to_writer(&mut f, entry)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;

    let mut w = csv::Writer::from_writer(dir.create_file(format!("{base}/selected.csv"))?);
    w.write_record([
        "rank",
        "pool_index",
        "learner_spec",
        "expert_spec",
        "expert_steps",
        "ego_init_distance",
        "ado_side",
        "ado_maneuver",
        "ado_init_distance",
        "ado_min_speed",
        "ado_max_speed",
    ])?;
    for (rank, (&i, (&expert_spec, traj))) in
        summary.selected.iter().zip(summary.expert_specs.iter().zip(expert_trajs)).enumerate()
    {
        let e = &summary.pool[i].env;
        w.write_record([
            rank.to_string(),
            i.to_string(),
            summary.pool[i].spec.to_string(),
            expert_spec.to_string(),
            traj.len().to_string(),
            e.ego_init_distance.to_string(),
            format!("{:?}", e.ado_side).to_lowercase(),
            format!("{:?}", e.ado_maneuver).to_lowercase(),
            e.ado_init_distance.to_string(),
            e.ado_min_speed.to_string(),
            e.ado_max_speed.to_string(),
        ])?;
    }
    w.flush()?;

    let mut f = dir.create_file(format!("{base}/dataset_delta.jsonl"))?;
    for sample in &dataset.samples()[first_new..] {
        serde_json::to_writer(&mut f, sample)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;

    part.write_csv(dir.create_file(format!("{base}/partition.csv"))?)?;
    write_trace(dir.create_file(format!("{base}/bandit_trace.csv"))?, trace)?;
    let pool_specs: Vec<usize> = summary.pool.iter().map(|p| p.spec).collect();
    let weights = summary.weights.clone().unwrap_or_else(|| vec![1.0; part.len()]);
    write_report(dir.create_file(format!("{base}/selection.csv"))?, previous, &weights, &pool_specs, &summary.selected)?;
    if let Some(sampler) = sampler {
        sampler.write_log(dir.create_file(format!("{base}/sampler.csv"))?)?;
    }
    Ok(())
}

/// Final evaluation of one run on its held-out test set.
#[derive(Debug, Clone)]
pub struct FinalReport {
    pub test: TestSet,
    pub metrics: MetricsReport,
    pub results: Vec<EntryResult>,
    pub brake_sweep: Vec<BrakeSweepRow>,
}

/// The test set depends only on the expert, the scenario and the seed, so
/// runs of different strategies under one seed share it.
pub fn test_set_for(cfg: &RunConfig, expert: &dyn Policy) -> Result<TestSet> {
    build_test_set(expert, &cfg.partition()?, &cfg.scenario, &cfg.evaluation.test_set, seed::derive(cfg.seed, "test-set", 0))
}

/// Evaluates `policy` on `test` and, with a run directory, writes the
/// `final/` files.
pub fn finish(cfg: &RunConfig, policy: &dyn Policy, test: &TestSet, out: Option<&RunDir>) -> Result<FinalReport> {
    let part = cfg.partition()?;
    let (metrics, results) = evaluate(policy, test, &part, &cfg.scenario, &cfg.evaluation.dtw_features)?;
    let sweep = brake_sweep(&results, &cfg.evaluation.brake_thresholds)?;
    if let Some(dir) = out {
        let name = cfg.strategy.name().to_string();
        let rows = [(name.clone(), metrics.clone())];
        write_per_outcome_csv(dir.create_file("final/per_outcome.csv")?, &part, &rows)?;
        write_dtw_csv(dir.create_file("final/dtw.csv")?, &results)?;
        write_brake_sweep_csv(dir.create_file("final/brake_sweep.csv")?, &[(name, sweep.clone())])?;
        write_text(dir, "final/test_set.json", &serde_json::to_string(test)?)?;
        // written last: its presence marks the run complete
        write_metrics_csv(dir.create_file("final/metrics.csv")?, &rows)?;
    }
    Ok(FinalReport { test: test.clone(), metrics, results, brake_sweep: sweep })
}

/// `run` followed by `finish`, writing the config snapshot first.
pub fn run_to_dir(cfg: &RunConfig, expert: &dyn Policy, dir: &RunDir) -> Result<(RunOutput, FinalReport)> {
    dir.write_snapshot(cfg)?;
    let output = run(cfg, expert, Some(dir))?;
    write_text(dir, "final/policy.ckpt", &output.policy.to_json()?)?;
    let test = test_set_for(cfg, expert)?;
    let report = finish(cfg, &output.policy, &test, Some(dir))?;
    Ok((output, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_split_with_remainder_first() {
        assert_eq!(split_budget(100, 3), vec![34, 33, 33]);
        assert_eq!(split_budget(30, 3), vec![10, 10, 10]);
        assert_eq!(split_budget(5, 1), vec![5]);
        assert_eq!(split_budget(2, 3), vec![1, 1, 0]);
        assert!(split_budget(4, 0).is_empty());
    }
}

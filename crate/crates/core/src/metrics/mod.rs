//! Evaluation: held-out test sets, outcome matching, trajectory distance,
//! open-loop test loss and the brake-threshold sweep.

mod dtw;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgdaError};
use crate::policy::Policy;
use crate::seed;
use crate::simenv::{rollout, EnvCondition, ScenarioGeometry, Trajectory};
use crate::stp::Partition;

pub use dtw::{dtw, dtw_distance, feature_rows, DtwFeature};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestSetConfig {
    /// Uniform draws before any top-up.
    pub size: usize,
    /// Every spec is topped up to at least this fraction of `size`.
    pub floor_fraction: f64,
    /// Rejection-sampling attempts allowed per spec.
    pub attempt_cap: usize,
    /// Candidates rolled out together while topping up.
    pub batch: usize,
}

impl Default for TestSetConfig {
    fn default() -> Self {
        Self { size: 100, floor_fraction: 0.04, attempt_cap: 5000, batch: 64 }
    }
}

impl TestSetConfig {
    pub fn validate(&self, num_specs: usize) -> Result<()> {
        if self.size == 0 || self.batch == 0 {
            return Err(SgdaError::config("test set size and batch must be positive"));
        }
        if !(0.0..=1.0).contains(&self.floor_fraction) || self.floor_fraction * num_specs as f64 > 1.0 + 1e-12 {
            return Err(SgdaError::config(format!(
                "floor fraction {} cannot be met by all {num_specs} specs at once",
                self.floor_fraction
            )));
        }
        Ok(())
    }

    /// Entries each spec must end up with.
    pub fn floor(&self) -> usize {
        (self.floor_fraction * self.size as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestEntry {
    pub env: EnvCondition,
    pub seed: u64,
    pub spec: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestSet {
    pub entries: Vec<TestEntry>,
    /// Number of leading entries that came from the uniform draw.
    pub uniform_count: usize,
    /// Spec histogram of the uniform draw alone.
    pub uniform_histogram: Vec<usize>,
    pub top_ups: Vec<usize>,
    pub top_up_attempts: Vec<usize>,
    /// Entries still missing per spec when the attempt cap was hit.
    pub shortfall: Vec<usize>,
}

impl TestSet {
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.uniform_histogram.len()];
        for e in &self.entries {
            h[e.spec] += 1;
        }
        h
    }

    /// Specs whose share of the uniform draw is below `threshold`.
    pub fn rare_specs(&self, threshold: f64) -> Vec<usize> {
        let total = self.uniform_count.max(1) as f64;
        (0..self.uniform_histogram.len()).filter(|&j| (self.uniform_histogram[j] as f64) / total < threshold).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

fn roll_classified(
    policy: &dyn Policy,
    envs: &[EnvCondition],
    part: &Partition,
    geom: &ScenarioGeometry,
    noise_base: u64,
) -> Result<Vec<TestEntry>> {
    envs.par_iter()
        .map(|e| {
            let seed = e.noise_seed(noise_base);
            let trajectory = rollout(policy, e, geom, seed)?;
            let spec = part.classify(&trajectory, geom)?;
            Ok(TestEntry { env: *e, seed, spec, trajectory })
        })
        .collect()
}

/// Draws `size` uniform conditions, rolls out the expert on each, then
/// rejection-samples further uniform conditions for every spec below the
/// floor until it is met or the attempt cap runs out.
pub fn build_test_set(
    expert: &dyn Policy,
    part: &Partition,
    geom: &ScenarioGeometry,
    config: &TestSetConfig,
    seed: u64,
) -> Result<TestSet> {
    config.validate(part.len())?;
    let noise_base = seed::derive(seed, "test-noise", 0);
    let mut rng = seed::rng(seed, "test-uniform", 0);
    let envs: Vec<EnvCondition> = (0..config.size).map(|_| EnvCondition::sample_uniform(&geom.ranges, &mut rng)).collect();
    let mut entries = roll_classified(expert, &envs, part, geom, noise_base)?;
    let mut uniform_histogram = vec![0; part.len()];
    for e in &entries {
        uniform_histogram[e.spec] += 1;
    }

    let floor = config.floor();
    let n = part.len();
    let mut top_ups = vec![0; n];
    let mut top_up_attempts = vec![0; n];
    let mut shortfall = vec![0; n];
    for spec in 0..n {
        let mut have = uniform_histogram[spec];
        let mut rng = seed::rng(seed, "test-topup", spec as u64);
        while have < floor && top_up_attempts[spec] < config.attempt_cap {
            let chunk = config.batch.min(config.attempt_cap - top_up_attempts[spec]);
            let envs: Vec<EnvCondition> =
                (0..chunk).map(|_| EnvCondition::sample_uniform(&geom.ranges, &mut rng)).collect();
            for entry in roll_classified(expert, &envs, part, geom, noise_base)? {
                if have >= floor {
                    break;
                }
                top_up_attempts[spec] += 1;
                if entry.spec == spec {
                    have += 1;
                    top_ups[spec] += 1;
                    entries.push(entry);
                }
            }
        }
        if have < floor {
            shortfall[spec] = floor - have;
            log::warn!("spec {spec}: {have} of {floor} test entries after {} attempts", top_up_attempts[spec]);
        }
    }
    Ok(TestSet { entries, uniform_count: config.size, uniform_histogram, top_ups, top_up_attempts, shortfall })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecMatch {
    pub spec: usize,
    /// Test entries whose expert trajectory landed in this spec.
    pub count: usize,
    pub matched: usize,
}

impl SpecMatch {
    /// NaN when the spec has no entries.
    pub fn rate(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.matched as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryResult {
    pub expert_spec: usize,
    pub policy_spec: usize,
    pub dtw: f64,
    pub expert_max_brake: f64,
    pub policy_max_brake: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: usize,
    pub match_rate: f64,
    pub per_spec: Vec<SpecMatch>,
    pub mean_dtw: f64,
    pub median_dtw: f64,
    pub l1_loss: f64,
}

impl MetricsReport {
    /// Mean of the per-spec match rates over `specs`, skipping specs without
    /// entries. NaN when none remain.
    pub fn mean_rate_over(&self, specs: &[usize]) -> f64 {
        let rates: Vec<f64> = specs.iter().map(|&j| self.per_spec[j].rate()).filter(|r| !r.is_nan()).collect();
        if rates.is_empty() {
            f64::NAN
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    }
}

fn max_brake(traj: &Trajectory) -> f64 {
    traj.steps.iter().map(|s| s.action.brake_intensity()).fold(0.0, f64::max)
}

/// Rolls `policy` out on every test condition with the entry's noise seed and
/// compares it with the stored expert trajectory.
pub fn evaluate_entries(
    policy: &dyn Policy,
    test: &TestSet,
    part: &Partition,
    geom: &ScenarioGeometry,
    features: &[DtwFeature],
) -> Result<Vec<EntryResult>> {
    test.entries
        .par_iter()
        .map(|entry| {
            let traj = rollout(policy, &entry.env, geom, entry.seed)?;
            Ok(EntryResult {
                expert_spec: entry.spec,
                policy_spec: part.classify(&traj, geom)?,
                dtw: dtw_distance(&entry.trajectory, &traj, features)?,
                expert_max_brake: max_brake(&entry.trajectory),
                policy_max_brake: max_brake(&traj),
            })
        })
        .collect()
}

/// Overall rate and per-spec table, grouped by the expert's spec.
pub fn match_table(results: &[EntryResult], num_specs: usize) -> (f64, Vec<SpecMatch>) {
    let mut per_spec: Vec<SpecMatch> = (0..num_specs).map(|spec| SpecMatch { spec, count: 0, matched: 0 }).collect();
    for r in results {
        per_spec[r.expert_spec].count += 1;
        if r.expert_spec == r.policy_spec {
            per_spec[r.expert_spec].matched += 1;
        }
    }
    let matched: usize = per_spec.iter().map(|s| s.matched).sum();
    let rate = if results.is_empty() { f64::NAN } else { matched as f64 / results.len() as f64 };
    (rate, per_spec)
}

/// Fraction of test conditions on which `policy` lands in the expert's spec,
/// with the per-spec breakdown.
pub fn outcome_matching(
    policy: &dyn Policy,
    test: &TestSet,
    part: &Partition,
    geom: &ScenarioGeometry,
) -> Result<(f64, Vec<SpecMatch>)> {
    if test.entries.is_empty() {
        return Err(SgdaError::input("empty test set"));
    }
    let results = evaluate_entries(policy, test, part, geom, &DtwFeature::DEFAULT)?;
    Ok(match_table(&results, part.len()))
}

/// Mean absolute difference between the policy's command and the expert's
/// on the expert's own test states. No rollout is involved.
pub fn l1_test_loss(policy: &dyn Policy, test: &TestSet) -> Result<f64> {
    let per_entry: Vec<(f64, usize)> = test
        .entries
        .par_iter()
        .map(|e| {
            let sum = e
                .trajectory
                .steps
                .iter()
                .map(|s| (policy.act(&s.state).longitudinal - s.action.longitudinal).abs())
                .sum::<f64>();
            (sum, e.trajectory.steps.len())
        })
        .collect();
    let n: usize = per_entry.iter().map(|p| p.1).sum();
    if n == 0 {
        return Err(SgdaError::input("empty test set"));
    }
    Ok(per_entry.iter().map(|p| p.0).sum::<f64>() / n as f64)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Every metric for one policy on one test set.
pub fn evaluate(
    policy: &dyn Policy,
    test: &TestSet,
    part: &Partition,
    geom: &ScenarioGeometry,
    features: &[DtwFeature],
) -> Result<(MetricsReport, Vec<EntryResult>)> {
    if test.entries.is_empty() {
        return Err(SgdaError::input("empty test set"));
    }
    let results = evaluate_entries(policy, test, part, geom, features)?;
    let (match_rate, per_spec) = match_table(&results, part.len());
    let mut dtws: Vec<f64> = results.iter().map(|r| r.dtw).collect();
    let mean_dtw = dtws.iter().sum::<f64>() / dtws.len() as f64;
    let report = MetricsReport {
        entries: results.len(),
        match_rate,
        per_spec,
        mean_dtw,
        median_dtw: median(&mut dtws),
        l1_loss: l1_test_loss(policy, test)?,
    };
    Ok((report, results))
}

/// One threshold of the brake sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrakeSweepRow {
    pub threshold: f64,
    /// Share of test entries whose expert trajectory violates the brake
    /// property at this threshold.
    pub expert_violation_rate: f64,
    pub expert_violations: usize,
    /// Among those, the share where the policy violates it too. NaN when the
    /// expert never violates it.
    pub violation_match_rate: f64,
}

/// Re-evaluates the brake property at each threshold on already computed
/// entry results.
pub fn brake_sweep(results: &[EntryResult], thresholds: &[f64]) -> Result<Vec<BrakeSweepRow>> {
    if results.is_empty() {
        return Err(SgdaError::input("no entries to sweep"));
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        // G(brake <= threshold) fails exactly when the peak brake exceeds it
        let violates = |max_brake: f64| max_brake > threshold;
        let mut expert_violations = 0;
        let mut both = 0;
        for r in results {
            if violates(r.expert_max_brake) {
                expert_violations += 1;
                if violates(r.policy_max_brake) {
                    both += 1;
                }
            }
        }
        rows.push(BrakeSweepRow {
            threshold,
            expert_violation_rate: expert_violations as f64 / results.len() as f64,
            expert_violations,
            violation_match_rate: if expert_violations == 0 { f64::NAN } else { both as f64 / expert_violations as f64 },
        });
    }
    Ok(rows)
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "entries", "match_rate", "mean_dtw", "median_dtw", "l1_loss"])?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            r.entries.to_string(),
            r.match_rate.to_string(),
            r.mean_dtw.to_string(),
            r.median_dtw.to_string(),
            r.l1_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per spec: its sign pattern, the number of expert outcomes in it
/// and each strategy's match rate.
pub fn write_per_outcome_csv<W: Write>(out: W, part: &Partition, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["spec".to_string(), "pattern".to_string(), "outcomes".to_string()];
    header.extend(rows.iter().map(|(name, _)| name.clone()));
    w.write_record(&header)?;
    for spec in part.specs() {
        let outcomes = rows.first().map_or(0, |(_, r)| r.per_spec[spec.index].count);
        let mut record = vec![spec.index.to_string(), spec.pattern(), outcomes.to_string()];
        record.extend(rows.iter().map(|(_, r)| r.per_spec[spec.index].rate().to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dtw_csv<W: Write>(out: W, results: &[EntryResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["entry", "expert_spec", "policy_spec", "dtw"])?;
    for (i, r) in results.iter().enumerate() {
        w.write_record([i.to_string(), r.expert_spec.to_string(), r.policy_spec.to_string(), r.dtw.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_brake_sweep_csv<W: Write>(out: W, rows: &[(String, Vec<BrakeSweepRow>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "threshold", "expert_violation_rate", "expert_violations", "violation_match_rate"])?;
    for (name, sweep) in rows {
        for r in sweep {
            w.write_record([
                name.clone(),
                r.threshold.to_string(),
                r.expert_violation_rate.to_string(),
                r.expert_violations.to_string(),
                r.violation_match_rate.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

//! Comparison tables across finished runs.

use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Result, SgdaError};
use crate::metrics::TestSet;
use crate::rundir::RunDir;

/// One finished run, as read back from its directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub run: String,
    pub strategy: String,
    pub seed: u64,
    pub entries: usize,
    pub match_rate: f64,
    pub mean_dtw: f64,
    pub median_dtw: f64,
    pub l1_loss: f64,
    /// Mean match rate over the specs rarer than the configured threshold
    /// in the uniform part of the test set.
    pub rare_match_rate: f64,
    /// `(spec, pattern, outcomes, rate)` rows of the run's per-outcome table.
    pub per_outcome: Vec<(usize, String, usize, f64)>,
}

#[derive(Deserialize)]
struct MetricsLine {
    strategy: String,
    entries: usize,
    match_rate: f64,
    mean_dtw: f64,
    median_dtw: f64,
    l1_loss: f64,
}

pub fn read_run(dir: &RunDir) -> Result<RunRow> {
    if !dir.is_complete() {
        return Err(SgdaError::input(format!("{} has no final metrics", dir.root().display())));
    }
    let cfg = dir.config()?;
    let mut reader = csv::Reader::from_path(dir.path("final/metrics.csv"))?;
    let line: MetricsLine = reader
        .deserialize()
        .next()
        .ok_or_else(|| SgdaError::input("empty metrics.csv"))??;

    let mut reader = csv::Reader::from_path(dir.path("final/per_outcome.csv"))?;
    let mut per_outcome = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| record.get(i).ok_or_else(|| SgdaError::input("short per_outcome.csv row"));
        let parse_err = |e: std::num::ParseIntError| SgdaError::input(e.to_string());
        per_outcome.push((
            field(0)?.parse().map_err(parse_err)?,
            field(1)?.to_string(),
            field(2)?.parse().map_err(parse_err)?,
            field(3)?.parse::<f64>().map_err(|e| SgdaError::input(e.to_string()))?,
        ));
    }
    let test: TestSet = serde_json::from_reader(std::fs::File::open(dir.path("final/test_set.json"))?)?;
    let rare = test.rare_specs(cfg.evaluation.rare_threshold);
    let rates: Vec<f64> = per_outcome
        .iter()
        .filter(|(spec, _, _, rate)| rare.contains(spec) && !rate.is_nan())
        .map(|r| r.3)
        .collect();
    let rare_match_rate = if rates.is_empty() { f64::NAN } else { rates.iter().sum::<f64>() / rates.len() as f64 };
    Ok(RunRow {
        run: dir.root().display().to_string(),
        strategy: line.strategy,
        seed: cfg.seed,
        entries: line.entries,
        match_rate: line.match_rate,
        mean_dtw: line.mean_dtw,
        median_dtw: line.median_dtw,
        l1_loss: line.l1_loss,
        rare_match_rate,
        per_outcome,
    })
}

/// One row per run.
pub fn write_comparison<W: Write>(out: W, rows: &[RunRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run",
        "strategy",
        "seed",
        "entries",
        "match_rate",
        "rare_match_rate",
        "mean_dtw",
        "median_dtw",
        "l1_loss",
    ])?;
    for r in rows {
        w.write_record([
            r.run.clone(),
            r.strategy.clone(),
            r.seed.to_string(),
            r.entries.to_string(),
            r.match_rate.to_string(),
            r.rare_match_rate.to_string(),
            r.mean_dtw.to_string(),
            r.median_dtw.to_string(),
            r.l1_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-outcome match rates side by side, one column per run labelled
/// `strategy` or `strategy@seed` when a strategy appears more than once.
pub fn write_per_outcome<W: Write>(out: W, rows: &[RunRow]) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(SgdaError::input("no runs to merge"));
    };
    if rows.iter().any(|r| r.per_outcome.len() != first.per_outcome.len()) {
        return Err(SgdaError::input("runs disagree on the number of specifications"));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["spec".to_string(), "pattern".to_string(), "outcomes".to_string()];
    for r in rows {
        let repeated = rows.iter().filter(|o| o.strategy == r.strategy).count() > 1;
        header.push(if repeated { format!("{}@{}", r.strategy, r.seed) } else { r.strategy.clone() });
    }
    w.write_record(&header)?;
    for (i, (spec, pattern, outcomes, _)) in first.per_outcome.iter().enumerate() {
        let mut record = vec![spec.to_string(), pattern.clone(), outcomes.to_string()];
        record.extend(rows.iter().map(|r| r.per_outcome[i].3.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every run and writes `comparison.csv` and `per_outcome.csv` into `out`.
pub fn report(runs: &[RunDir], out: &Path) -> Result<Vec<RunRow>> {
    let rows: Vec<RunRow> = runs.iter().map(read_run).collect::<Result<_>>()?;
    std::fs::create_dir_all(out)?;
    write_comparison(std::fs::File::create(out.join("comparison.csv"))?, &rows)?;
    write_per_outcome(std::fs::File::create(out.join("per_outcome.csv"))?, &rows)?;
    Ok(rows)
}

//! `sgda`: run, evaluate and compare data-aggregation experiments.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sgda_core::config::{RunConfig, Strategy};
use sgda_core::metrics::{brake_sweep, evaluate, write_brake_sweep_csv, TestSet};
use sgda_core::policy::MlpPolicy;
use sgda_core::report::report;
use sgda_core::rundir::RunDir;
use sgda_core::sgda::{finish, run_to_dir, test_set_for};
use sgda_core::simenv::ScriptedExpert;
use sgda_core::SgdaError;

#[derive(Parser)]
#[command(name = "sgda", version, about = "Specification-guided data aggregation experiments")]
struct Cli {
    /// Threads used for rollouts; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with one strategy and evaluate the final policy.
    Run(RunArgs),
    /// Evaluate a finished run's final policy, writing into a new directory.
    Evaluate(EvaluateArgs),
    /// Merge finished runs into comparison tables.
    Report(ReportArgs),
    /// Expert brake-violation frequency per threshold, and how often the
    /// given runs' policies reproduce the violations.
    SweepBrakeThreshold(SweepArgs),
    /// Parse and check a config file.
    ValidateConfig { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the strategy in the config.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    /// Test set written by an earlier run; built from the run's config when absent.
    #[arg(long)]
    test_set: Option<PathBuf>,
    /// Seed for building the test set; defaults to the run's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated thresholds; defaults to the config's list.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Finished runs whose final policies are compared with the expert.
    #[arg(long, num_args = 0..)]
    runs: Vec<PathBuf>,
    /// Output CSV; printed to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> sgda_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn expert_for(cfg: &RunConfig) -> ScriptedExpert {
    ScriptedExpert::new(cfg.expert.clone(), &cfg.scenario)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.strategy {
        cfg.strategy = s;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let dir = RunDir::create(&args.out)?;
    let (output, final_report) = run_to_dir(&cfg, &expert_for(&cfg), &dir)?;
    let m = &final_report.metrics;
    println!(
        "{} seed {}: {} rounds, {} pairs; match {:.4}, mean DTW {:.3}, L1 {:.5}",
        cfg.strategy,
        cfg.seed,
        output.rounds.len(),
        output.dataset.len(),
        m.match_rate,
        m.mean_dtw,
        m.l1_loss
    );
    Ok(())
}

fn load_final_policy(dir: &RunDir) -> anyhow::Result<MlpPolicy> {
    let path = dir.path("final/policy.ckpt");
    MlpPolicy::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let run = RunDir::open(&args.run)?;
    let mut cfg = run.config()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let policy = load_final_policy(&run)?;
    let expert = expert_for(&cfg);
    let test = match &args.test_set {
        Some(p) => TestSet::load(p)?,
        None => test_set_for(&cfg, &expert)?,
    };
    let out = RunDir::create(&args.out)?;
    out.write_snapshot(&cfg)?;
    let r = finish(&cfg, &policy, &test, Some(&out))?;
    println!(
        "{}: match {:.4}, mean DTW {:.3}, median DTW {:.3}, L1 {:.5} over {} entries",
        args.run.display(),
        r.metrics.match_rate,
        r.metrics.mean_dtw,
        r.metrics.median_dtw,
        r.metrics.l1_loss,
        r.metrics.entries
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let runs: Vec<RunDir> = args.runs.iter().map(|p| RunDir::open(p)).collect::<Result<_, _>>()?;
    let rows = report(&runs, &args.out)?;
    for r in rows {
        println!(
            "{:18} seed {:4} match {:.4} rare {:.4} DTW {:.3} L1 {:.5}",
            r.strategy, r.seed, r.match_rate, r.rare_match_rate, r.mean_dtw, r.l1_loss
        );
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.thresholds {
        cfg.evaluation.brake_thresholds = t;
    }
    cfg.validate()?;
    if cfg.evaluation.brake_thresholds.is_empty() {
        bail!(SgdaError::config("no brake thresholds given"));
    }
    let expert = expert_for(&cfg);
    let test = test_set_for(&cfg, &expert)?;
    let part = cfg.partition()?;
    let mut rows = Vec::new();
    let (_, results) = evaluate(&expert, &test, &part, &cfg.scenario, &cfg.evaluation.dtw_features)?;
    rows.push(("expert".to_string(), brake_sweep(&results, &cfg.evaluation.brake_thresholds)?));
    for path in &args.runs {
        let run = RunDir::open(path)?;
        let policy = load_final_policy(&run)?;
        let (_, results) = evaluate(&policy, &test, &part, &cfg.scenario, &cfg.evaluation.dtw_features)?;
        let name = format!("{}@{}", run.config()?.strategy, path.display());
        rows.push((name, brake_sweep(&results, &cfg.evaluation.brake_thresholds)?));
    }
    match args.out {
        Some(p) => {
            let file = std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&p)
                .with_context(|| format!("creating {}", p.display()))?;
            write_brake_sweep_csv(file, &rows)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_brake_sweep_csv(&mut lock, &rows)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(path)?;
    let part = cfg.partition()?;
    println!(
        "{}: ok ({} properties, {} specifications, strategy {})",
        path.display(),
        part.properties().len(),
        part.len(),
        cfg.strategy
    );
    Ok(())
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<SgdaError>(),
            Some(SgdaError::Config(_) | SgdaError::Parse { .. } | SgdaError::UnknownSignal(_))
        )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SGDA_LOG", "warn")).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::SweepBrakeThreshold(a) => cmd_sweep(a),
        Command::ValidateConfig { path } => cmd_validate(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { 1 } else { 2 })
        }
    }
}

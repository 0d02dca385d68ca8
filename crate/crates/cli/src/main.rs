use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qifmeta::inference::nested_test;
use qifmeta::runtime::wire::read_message;
use qifmeta::runtime::{
    coordinate_files, export_replication, run_monolithic, worker_round1_files, worker_round2_files, write_outputs,
    Encoding, JobConfig, Mode, Payload, Report, THREADS_ENV,
};
use qifmeta::simgen::{run_study, SimDesign, StudyOptions};
use qifmeta::{ErrorClass, QifError};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_NONCONVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "qifmeta", version, about = "Distributed quadratic inference function meta-estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monolithic run: fit every source and combine in one process.
    Fit(FitArgs),
    /// Worker for one cohort: round 1 writes the summary, round 2 answers requests.
    Worker(WorkerArgs),
    /// Coordinator: combine summary files (and round-2 score files).
    Combine(CombineArgs),
    /// Monte Carlo study from a design file.
    Simulate(SimulateArgs),
    /// Nested partition test between two reports.
    Test(TestArgs),
    /// Dispatch on the job's mode (or --mode), discovering exchange files in --out.
    Run(RunArgs),
}

#[derive(Args)]
struct JobArgs {
    /// Job configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; also the message exchange directory for workers and coordinator.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Compute Q_N, which needs a second communication round.
    #[arg(long)]
    second_round: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    job: JobArgs,
}

#[derive(Args)]
struct WorkerArgs {
    #[command(flatten)]
    job: JobArgs,
    /// Cohort to process; defaults to the job's `cohort` field.
    #[arg(long)]
    cohort: Option<u32>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    round: u8,
    /// Round-2 request files; defaults to every request file in --out.
    #[arg(long = "request")]
    requests: Vec<PathBuf>,
    /// Write messages as JSON instead of binary.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CombineArgs {
    #[command(flatten)]
    job: JobArgs,
    /// Cohort summary files from round 1.
    summaries: Vec<PathBuf>,
    /// Round-2 score files.
    #[arg(long = "scores")]
    scores: Vec<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation design (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the design's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the design's replication count.
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    second_round: bool,
    /// Instead of a study, write this replication as CSV files plus job.toml.
    #[arg(long, value_name = "REP")]
    export: Option<usize>,
}

#[derive(Args)]
struct TestArgs {
    /// Report fitted under the finer partition.
    #[arg(long)]
    fine: PathBuf,
    /// Report fitted under the coarser partition.
    #[arg(long)]
    coarse: PathBuf,
    /// Write the test record here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Monolithic,
    Coordinator,
    Worker,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    job: JobArgs,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    cohort: Option<u32>,
    #[arg(long)]
    json: bool,
}

enum Failure {
    Error(QifError),
    NonConverged(String),
}

impl From<QifError> for Failure {
    fn from(e: QifError) -> Self {
        Failure::Error(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let result = match cli.command {
        Command::Fit(a) => fit(&a.job),
        Command::Worker(a) => worker(&a.job, a.cohort, a.round, &a.requests, a.json),
        Command::Combine(a) => combine(&a.job, &a.summaries, &a.scores, a.json),
        Command::Simulate(a) => simulate(&a),
        Command::Test(a) => test(&a),
        Command::Run(a) => run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NonConverged(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(EXIT_NONCONVERGED)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            })
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value.parse().map_err(|_| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn load_job(args: &JobArgs) -> Result<(JobConfig, PathBuf), QifError> {
    let mut cfg = JobConfig::load(&args.config)?;
    cfg.second_round |= args.second_round;
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    let out = cfg.output.clone();
    std::fs::create_dir_all(&out).map_err(|e| QifError::Config(format!("{}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn encoding(json: bool) -> Encoding {
    if json {
        Encoding::Json
    } else {
        Encoding::Binary
    }
}

fn finish_report(cfg: &JobConfig, report: &Report, out: &Path) -> Outcome {
    let path = write_outputs(cfg, report, out)?;
    println!("{}", path.display());
    if report.converged() {
        Ok(())
    } else {
        Err(Failure::NonConverged(format!(
            "sources did not converge: {:?}; report written anyway",
            report.diagnostics.nonconverged_sources
        )))
    }
}

fn fit(args: &JobArgs) -> Outcome {
    let (cfg, out) = load_job(args)?;
    let report = run_monolithic(&cfg)?;
    finish_report(&cfg, &report, &out)
}

fn worker(args: &JobArgs, cohort: Option<u32>, round: u8, requests: &[PathBuf], json: bool) -> Outcome {
    let (cfg, out) = load_job(args)?;
    let cohort = cohort
        .or(cfg.cohort)
        .ok_or_else(|| QifError::Config("worker needs --cohort or a `cohort` field in the job".into()))?;
    if !cfg.cohort_ids().contains(&cohort) {
        return Err(QifError::Config(format!("cohort {cohort} is not declared in the job")).into());
    }
    if round == 1 {
        let path = worker_round1_files(&cfg, cohort, &out, encoding(json))?;
        println!("{}", path.display());
        if let Payload::Summary(s) = read_message(&path)? {
            let bad: Vec<u32> = s.sources.iter().filter(|s| !s.converged).map(|s| s.block).collect();
            if !bad.is_empty() {
                return Err(Failure::NonConverged(format!("cohort {cohort}: blocks {bad:?} did not converge")));
            }
        }
        return Ok(());
    }
    let requests = if requests.is_empty() { discover(&out, "request-", ".qifm")? } else { requests.to_vec() };
    if requests.is_empty() {
        return Err(QifError::Config(format!("no round-2 request files in {}", out.display())).into());
    }
    for p in worker_round2_files(&cfg, cohort, &out, &requests, encoding(json))? {
        println!("{}", p.display());
    }
    Ok(())
}

fn combine(args: &JobArgs, summaries: &[PathBuf], scores: &[PathBuf], json: bool) -> Outcome {
    let (mut cfg, out) = load_job(args)?;
    cfg.mode = Mode::Coordinator;
    let result = coordinate_files(&cfg, summaries, scores, &out, encoding(json))?;
    if !result.requests.is_empty() {
        for p in &result.requests {
            println!("{}", p.display());
        }
        eprintln!(
            "round 2: wrote {} request file(s); rerun combine with the workers' score files",
            result.requests.len()
        );
        return Ok(());
    }
    finish_report(&cfg, &result.report, &out)
}

fn run(args: &RunArgs) -> Outcome {
    let (cfg, out) = load_job(&args.job)?;
    let mode = match args.mode {
        Some(ModeArg::Monolithic) => Mode::Monolithic,
        Some(ModeArg::Coordinator) => Mode::Coordinator,
        Some(ModeArg::Worker) => Mode::Worker,
        None => cfg.mode,
    };
    match mode {
        Mode::Monolithic => fit(&args.job),
        Mode::Worker => {
            // round 2 once the coordinator has posted requests
            let round = if cfg.second_round && !discover(&out, "request-", ".qifm")?.is_empty() { 2 } else { 1 };
            worker(&args.job, args.cohort, round, &[], args.json)
        }
        Mode::Coordinator => {
            let summaries = discover(&out, "cohort-", ".summary.qifm")?;
            let scores = discover(&out, "cohort-", ".qifm")?
                .into_iter()
                .filter(|p| file_name(p).contains(".scores-"))
                .collect::<Vec<_>>();
            combine(&args.job, &summaries, &scores, args.json)
        }
    }
}

fn file_name(p: &Path) -> &str {
    p.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

fn discover(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>, QifError> {
    let entries = std::fs::read_dir(dir).map_err(|e| QifError::Config(format!("{}: {e}", dir.display())))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = file_name(p);
            n.starts_with(prefix) && n.ends_with(suffix)
        })
        .collect();
    found.sort();
    Ok(found)
}

fn simulate(args: &SimulateArgs) -> Outcome {
    let mut design = SimDesign::load(&args.config)?;
    if let Some(seed) = args.seed {
        design.seed = seed;
    }
    std::fs::create_dir_all(&args.out).map_err(|e| QifError::Config(format!("{}: {e}", args.out.display())))?;
    if let Some(rep) = args.export {
        let cfg = export_replication(&design, rep, &args.out, args.second_round)?;
        println!("{}", args.out.join("job.toml").display());
        eprintln!("exported {} source files", cfg.sources.len());
        return Ok(());
    }
    let reps = args.replications.unwrap_or(design.replications);
    let opts = StudyOptions { second_round: args.second_round, ..StudyOptions::default() };
    let outcome = run_study(&design, reps, &opts)?;
    let csv = args.out.join("metrics.csv");
    let json = args.out.join("metrics.json");
    outcome.report.write_csv(&csv)?;
    outcome.report.write_json(&json)?;
    println!("{}", csv.display());
    println!("{}", json.display());
    eprintln!("{} of {} replications used", outcome.report.used, outcome.report.requested);
    Ok(())
}

fn test(args: &TestArgs) -> Outcome {
    let stat = |path: &Path| -> Result<_, QifError> {
        Report::load(path)?.fit.ok_or_else(|| {
            QifError::Config(format!("{} has no fit statistic; rerun with --second-round", path.display()))
        })
    };
    let result = nested_test(&stat(&args.fine)?, &stat(&args.coarse)?)?;
    let text = serde_json::to_string_pretty(&result).expect("test record serializes");
    if let Some(out) = &args.out {
        std::fs::write(out, format!("{text}\n")).map_err(|e| QifError::Config(format!("{}: {e}", out.display())))?;
    }
    println!("{text}");
    Ok(())
}

//! `tandem`: simulate calibration streams, sweep targets, audit and replay
//! run logs, check rule dominance, and serve the session API.
//!
//! Exit codes: 0 pass, 1 a check failed, 2 usage or I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tandem_core::harness::{self, RunConfig, SweepGrid};
use tandem_core::rules::{check_dominance, transcript_count, DEFAULT_ENUMERATION_CAP};
use tandem_core::runlog::LogError;
use tandem_core::{replay, LabelSpace, RuleRegistry, RunLog};

mod report;

/// Default output directory when `--out` is not given.
const OUT_DIR_ENV: &str = "TANDEM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "tandem",
    version,
    about = "Online calibration of AI prediction sets for human-AI collaboration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulated stream and write its log, summary and convergence CSV.
    Simulate(SimulateArgs),
    /// Run every (epsilon, delta, seed) cell of a grid as an independent stream.
    Sweep(SweepArgs),
    /// Check a run log against the finite-sample bounds, the threshold cap and replay.
    Audit(LogArgs),
    /// Recompute errors and thresholds from a run log's transcripts.
    Replay(LogArgs),
    /// Exhaustively check that rules are dominated by their online activation.
    CheckRules(CheckRulesArgs),
    /// Serve the HTTP session API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: $TANDEM_OUT_DIR, then the config's
    /// output_dir, then runs/<config name>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of days.
    #[arg(long)]
    days: Option<u64>,
    /// Override the step size.
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    jobs: Option<usize>,
    /// Harm targets, comma separated; overrides the config grid.
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// Complementarity targets, comma separated.
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct LogArgs {
    /// Run log (JSON lines).
    #[arg(long)]
    log: PathBuf,
    /// Also write the per-prefix audit table to this CSV file.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct CheckRulesArgs {
    /// Rule to check, e.g. ch_current_round or ch_intersection_window(2).
    /// Repeatable.
    #[arg(long = "rule", required_unless_present = "list")]
    rules: Vec<String>,
    /// Window parameter appended to every rule that takes one.
    #[arg(long)]
    param: Option<usize>,
    /// Size of the label space.
    #[arg(long, default_value_t = 3)]
    labels: usize,
    /// Longest transcript, in rounds.
    #[arg(long, default_value_t = 3)]
    rounds: usize,
    /// Largest human set enumerated [default: all subsets].
    #[arg(long)]
    max_set_size: Option<usize>,
    /// Refuse to enumerate more transcripts than this.
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
    cap: u128,
    /// Print the known rule names and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Service configuration (TOML) [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Listen port; overrides $TANDEM_PORT and the config.
    #[arg(long)]
    port: Option<u16>,
    /// Data directory; overrides $TANDEM_DATA_DIR and the config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

/// Usage or I/O failure; maps to exit code 2.
#[derive(Debug)]
struct Fatal(String);

impl<E: std::fmt::Display> From<E> for Fatal {
    fn from(e: E) -> Self {
        Fatal(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Audit(a) => audit(a),
        Command::Replay(a) => replay_log(a),
        Command::CheckRules(a) => check_rules(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Fatal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, PathBuf), Fatal> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(d) = args.days {
        config.days = d;
    }
    if let Some(eta) = args.eta {
        config.targets.eta = eta;
    }
    config.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| {
            let stem = args.config.file_stem().unwrap_or_default();
            Path::new("runs").join(stem)
        });
    Ok((config, out))
}

fn simulate(args: SimulateArgs) -> Result<bool, Fatal> {
    let (mut config, out) = load_run(&args.run)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let started = std::time::Instant::now();
    let (log, summary) = harness::run_stream(&config)?;
    let files = harness::write_outputs(&out, &log, &summary)?;
    report::summary(&summary);
    println!("elapsed      {:.2}s", started.elapsed().as_secs_f64());
    for f in files {
        println!("wrote        {}", f.display());
    }
    Ok(summary.audit_pass)
}

fn sweep(args: SweepArgs) -> Result<bool, Fatal> {
    let (config, out) = load_run(&args.run)?;
    let mut grid = config.sweep.clone().unwrap_or_default();
    if !args.epsilon.is_empty() {
        grid.epsilon = args.epsilon;
    }
    if !args.delta.is_empty() {
        grid.delta = args.delta;
    }
    if !args.seeds.is_empty() {
        grid.seeds = args.seeds;
    }
    let mut checked = config.clone();
    checked.sweep = Some(grid.clone());
    checked.validate()?;
    let cells = harness::sweep(&config, &grid, args.jobs)?;
    let rows = harness::aggregate(&cells);
    std::fs::create_dir_all(&out).map_err(|e| Fatal(format!("{}: {e}", out.display())))?;
    let cells_path = out.join("sweep_cells.csv");
    let rows_path = out.join("sweep.csv");
    report::write_cells(&cells_path, &cells)?;
    report::write_rows(&rows_path, &rows)?;
    report::sweep_table(&rows, &grid_size(&grid, &config));
    println!("wrote {}", cells_path.display());
    println!("wrote {}", rows_path.display());
    Ok(cells.iter().all(|c| c.summary.audit_pass))
}

fn grid_size(grid: &SweepGrid, config: &RunConfig) -> String {
    let n = |v: usize| v.max(1);
    format!(
        "{} epsilon x {} delta x {} seeds, {} days each",
        n(grid.epsilon.len()),
        n(grid.delta.len()),
        n(grid.seeds.len()),
        config.days
    )
}

fn read_log(path: &Path) -> Result<RunLog, Fatal> {
    let file = std::fs::File::open(path).map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
    RunLog::read_from(std::io::BufReader::new(file)).map_err(|e| match e {
        LogError::Parse { .. } | LogError::MixedParams { .. } => {
            Fatal(format!("{}: {e}", path.display()))
        }
        other => Fatal(other.to_string()),
    })
}

fn audit(args: LogArgs) -> Result<bool, Fatal> {
    let log = read_log(&args.log)?;
    if log.is_empty() {
        return Err(Fatal(format!("{}: log has no days", args.log.display())));
    }
    let summary = harness::summarize(&log)?;
    let trajectory = tandem_core::calibrator::check_trajectory(&log);
    let replayed = replay(&log, &RuleRegistry::default())?;
    report::summary(&summary);
    for v in trajectory.violations.iter().take(5) {
        println!("violation    day {}: {}", v.day_index, v.what);
    }
    report::replay(&replayed);
    if let Some(path) = &args.table {
        std::fs::write(path, harness::audit_table_csv(&log)?)
            .map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
        println!("wrote        {}", path.display());
    }
    Ok(summary.audit_pass && trajectory.ok() && replayed.matches())
}

fn replay_log(args: LogArgs) -> Result<bool, Fatal> {
    let log = read_log(&args.log)?;
    let replayed = replay(&log, &RuleRegistry::default())?;
    report::replay(&replayed);
    if let Some(path) = &args.table {
        std::fs::write(path, harness::audit_table_csv(&log)?)
            .map_err(|e| Fatal(format!("{}: {e}", path.display())))?;
    }
    Ok(replayed.matches())
}

fn check_rules(args: CheckRulesArgs) -> Result<bool, Fatal> {
    let registry = RuleRegistry::default();
    if args.list {
        for name in [
            "ch_current_round",
            "comp_final_round",
            "ch_ever_proposed",
            "ch_intersection_window(k)",
        ] {
            println!("{name}");
        }
        for name in registry.custom_names() {
            println!("{name}  (custom)");
        }
        return Ok(true);
    }
    if args.labels == 0 || args.rounds == 0 {
        return Err(Fatal("--labels and --rounds must be positive".into()));
    }
    let space = LabelSpace::new((0..args.labels).map(|i| format!("y{i}")))?;
    let max_set = args.max_set_size.unwrap_or(args.labels);
    let estimate = transcript_count(args.labels, args.rounds, max_set);
    if estimate > args.cap {
        let count = if estimate == u128::MAX {
            "more than 10^38".to_string()
        } else {
            estimate.to_string()
        };
        return Err(Fatal(format!(
            "{count} transcripts for {} labels, {} rounds, sets of at most {max_set} exceeds the cap of {}",
            args.labels, args.rounds, args.cap
        )));
    }
    let mut all_hold = true;
    for spec in &args.rules {
        let spec = match args.param {
            Some(k) if !spec.contains('(') && !spec.contains(':') && spec.contains("window") => {
                format!("{spec}({k})")
            }
            _ => spec.clone(),
        };
        let rule = registry.parse(&spec)?;
        let report = check_dominance(&rule, &space, args.rounds, max_set, args.cap)?;
        report::dominance(&report, args.labels, args.rounds, max_set);
        all_hold &= report.holds;
    }
    Ok(all_hold)
}

fn serve(args: ServeArgs) -> Result<bool, Fatal> {
    use tandem_service::ServiceConfig;
    let config = match &args.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    let mut config = config.with_env_overrides()?;
    if let Some(p) = args.port {
        config.port = p;
    }
    if let Some(d) = args.data_dir {
        config.data_dir = Some(d);
    }
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(tandem_service::serve(config))?;
    Ok(true)
}

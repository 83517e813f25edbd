//! Command-line front end: simulated experiments, fault injection, reports,
//! Graphviz export and live tracing.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

// stdout closed early (e.g. piped into head) is a normal exit.
macro_rules! out {
    ($($t:tt)*) => {
        if writeln!(std::io::stdout(), $($t)*).is_err() {
            std::process::exit(0);
        }
    };
}

use hbtrace::causality::export_dot;
use hbtrace::experiment::{run_loop, ExperimentConfig, ExperimentError};
use hbtrace::fault::{parse_fault_spec, FaultError, FaultRule};
use hbtrace::format::{read_trace, write_trace, FormatError};
use hbtrace::library::{coverage_k, LibraryError, RunLibrary};
use hbtrace::sim::{load_config, run_simulation, ConfigError, SeedPolicy, SimConfig, SimError};

#[derive(Parser)]
#[command(name = "hbtrace", version, about = "Happens-before tracing and run deduplication for networked programs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one execution and record it in the run library.
    Run(RunArgs),
    /// Simulate many executions and summarize the run distribution.
    Loop(LoopArgs),
    /// Simulate one execution under a fault specification.
    Inject(InjectArgs),
    /// Show the run distribution stored in a library.
    Report(ReportArgs),
    /// Write a stored run (or a trace file) as a Graphviz digraph.
    ExportDot(ExportArgs),
    /// Trace real processes.
    Trace(TraceArgs),
}

#[derive(Args)]
struct Common {
    /// Preset name or path to a system config file.
    #[arg(long)]
    config: String,
    /// Base seed (defaults to the config's).
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding one run library per config.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Fault specification file.
    #[arg(long)]
    faults: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Also write the trace to this file.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LoopArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    iterations: u64,
    /// Seed policy: fixed, sequential or random.
    #[arg(long)]
    seed_policy: Option<SeedPolicy>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print one line per iteration.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Config whose library to report on.
    #[arg(long)]
    config: String,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Write `rank count cumulative` rows here for plotting.
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Rows to print (0 for all).
    #[arg(long, default_value_t = 20)]
    top: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, requires = "run")]
    config: Option<String>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Run id (or a unique prefix) in the config's library.
    #[arg(long, conflicts_with = "trace")]
    run: Option<String>,
    /// Trace file to export instead.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// Trace real processes with ptrace.
    #[arg(long, required = true)]
    live: bool,
    /// Command line of one process; repeat in launch order.
    #[arg(long = "command", required = true)]
    commands: Vec<String>,
    /// Library name for recording the run.
    #[arg(long, default_value = "live")]
    name: String,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long)]
    faults: Option<PathBuf>,
    /// Declare quiescence after this long without syscalls.
    #[arg(long, default_value_t = 10_000)]
    idle_timeout_ms: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

enum Failure {
    /// Bad arguments, configs or inputs.
    Usage(String),
    /// A checked invariant did not hold.
    Internal(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<FaultError> for Failure {
    fn from(e: FaultError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<LibraryError> for Failure {
    fn from(e: LibraryError) -> Self {
        match e {
            LibraryError::AmbiguousFollow(..) | LibraryError::FollowDisagreement(_) => Failure::Internal(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => c.into(),
            SimError::Fault(f) => f.into(),
            SimError::BoundExceeded(_) => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::NoIterations => Failure::Usage(e.to_string()),
            ExperimentError::Sim(s) => s.into(),
            ExperimentError::Library(l) => l.into(),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn library_dir(runs_dir: &Path, config: &str) -> PathBuf {
    let safe: String = config.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    runs_dir.join(safe)
}

fn load_faults(path: Option<&Path>, library: Option<&RunLibrary>) -> Result<Vec<FaultRule>> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(parse_fault_spec(&text, library)?)
}

fn setup(common: &Common) -> Result<(SimConfig, RunLibrary, Vec<FaultRule>)> {
    let mut config = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        config.base_seed = seed;
    }
    let library = RunLibrary::open(library_dir(&common.runs_dir, &config.name), &config.name)?;
    let faults = load_faults(common.faults.as_deref(), Some(&library))?;
    Ok((config, library, faults))
}

fn save_trace(trace: &hbtrace::Trace, out: &Path) -> Result<()> {
    let file = fs::File::create(out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    let mut w = BufWriter::new(file);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

fn run_once(common: &Common, out: Option<&Path>, show_injections: bool) -> Result<()> {
    let (config, mut library, faults) = setup(common)?;
    let run = run_simulation(&config, config.base_seed, &faults, Some(&library))?;
    let termination = run.termination();
    let events = run.trace.len();
    if let Some(out) = out {
        save_trace(&run.trace, out)?;
    }
    if show_injections {
        for (rule, inj) in &run.injections {
            out!("injected {inj} (rule {rule})");
        }
    }
    let outcome = library.finalize_execution(&run.follower, run.trace)?;
    out!(
        "run_id={} novel={} termination={termination:?} events={events} seed={}",
        outcome.run_id(),
        outcome.is_novel(),
        config.base_seed
    );
    Ok(())
}

fn cmd_loop(a: &LoopArgs) -> Result<()> {
    let (config, mut library, faults) = setup(&a.common)?;
    let mut exp = ExperimentConfig::new(config, a.iterations);
    if let Some(p) = a.seed_policy {
        exp.seed_policy = p;
    }
    exp.faults = faults;
    exp.jobs = a.jobs;
    let summary = run_loop(&exp, &mut library, |r| {
        if a.verbose {
            out!(
                "iteration={} seed={} run_id={} novel={} termination={:?}",
                r.iteration,
                r.seed,
                r.run_id.short(),
                r.novel,
                r.termination
            );
        }
    })?;
    out!("{summary}");
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let name = match load_config(&a.config) {
        Ok(c) => c.name,
        Err(_) => a.config.clone(),
    };
    let dir = library_dir(&a.runs_dir, &name);
    if !dir.exists() {
        return Err(Failure::Usage(format!("no library at {}", dir.display())));
    }
    let library = RunLibrary::load(&dir)?;
    let report = library.distribution_report()?;
    let total = library.total_iterations();
    out!("{:>5}  {:<12}  {:>8}  {:>7}  {:>7}", "rank", "run", "count", "share", "cum");
    let shown = if a.top == 0 { report.len() } else { a.top.min(report.len()) };
    for row in &report[..shown] {
        out!(
            "{:>5}  {:<12}  {:>8}  {:>6.2}%  {:>6.2}%",
            row.rank,
            row.run_id.short(),
            row.count,
            100.0 * row.count as f64 / total as f64,
            100.0 * row.cumulative
        );
    }
    if shown < report.len() {
        out!("  ... {} more", report.len() - shown);
    }
    out!(
        "iterations={total} distinct={} top1={} k50={} k90={} k99={}",
        report.len(),
        report[0].count,
        coverage_k(&report, 0.5),
        coverage_k(&report, 0.9),
        coverage_k(&report, 0.99)
    );
    if let Some(path) = &a.histogram {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "rank\tcount\tcumulative")?;
        for row in &report {
            writeln!(w, "{}\t{}\t{:.6}", row.rank, row.count, row.cumulative)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let trace = match (&a.trace, &a.run, &a.config) {
        (Some(path), _, _) => {
            let file = fs::File::open(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            read_trace(BufReader::new(file))?
        }
        (None, Some(prefix), Some(config)) => {
            let name = load_config(config).map(|c| c.name).unwrap_or_else(|_| config.clone());
            let library = RunLibrary::load(library_dir(&a.runs_dir, &name))?;
            let matches: Vec<_> = library.runs().filter(|t| t.run_id().is_some_and(|id| id.0.starts_with(prefix.as_str()))).collect();
            match matches.as_slice() {
                [t] => (*t).clone(),
                [] => return Err(Failure::Usage(format!("no run {prefix} in library {name}"))),
                _ => return Err(Failure::Usage(format!("run prefix {prefix} is ambiguous"))),
            }
        }
        _ => return Err(Failure::Usage("give --trace FILE or --config NAME --run ID".into())),
    };
    let dot = export_dot(&trace);
    match &a.out {
        Some(path) => fs::write(path, dot)?,
        None => print!("{dot}"),
    }
    Ok(())
}

#[cfg(all(feature = "live", target_os = "linux", target_arch = "x86_64"))]
fn cmd_trace(a: &TraceArgs) -> Result<()> {
    use hbtrace::live::{trace_commands, LiveConfig, LiveError};

    let mut commands = Vec::new();
    for c in &a.commands {
        let words = shlex::split(c).filter(|w| !w.is_empty()).ok_or_else(|| Failure::Usage(format!("cannot parse command `{c}`")))?;
        commands.push(words);
    }
    let mut library = RunLibrary::open(library_dir(&a.runs_dir, &a.name), &a.name)?;
    let mut config = LiveConfig::new(commands);
    config.name = a.name.clone();
    config.idle_timeout = std::time::Duration::from_millis(a.idle_timeout_ms);
    config.faults = load_faults(a.faults.as_deref(), Some(&library))?;
    let run = trace_commands(&config, Some(&library)).map_err(|e| match e {
        LiveError::AttachDenied { .. } | LiveError::NoCommands | LiveError::Fault(_) => Failure::Usage(e.to_string()),
        _ => Failure::Internal(e.to_string()),
    })?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let termination = run.trace.meta().termination;
    let events = run.trace.len();
    if let Some(out) = &a.out {
        save_trace(&run.trace, out)?;
    }
    let outcome = library.finalize_execution(&run.follower, run.trace)?;
    out!("run_id={} novel={} termination={termination:?} events={events}", outcome.run_id(), outcome.is_novel());
    Ok(())
}

#[cfg(not(all(feature = "live", target_os = "linux", target_arch = "x86_64")))]
fn cmd_trace(_: &TraceArgs) -> Result<()> {
    Err(Failure::Usage("this build has no live tracing (enable the `live` feature on Linux x86_64)".into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Cmd::Run(a) => run_once(&a.common, a.out.as_deref(), false),
        Cmd::Inject(a) => {
            if a.common.faults.is_none() {
                Err(Failure::Usage("inject needs --faults".into()))
            } else {
                run_once(&a.common, a.out.as_deref(), true)
            }
        }
        Cmd::Loop(a) => cmd_loop(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::ExportDot(a) => cmd_export(a),
        Cmd::Trace(a) => cmd_trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

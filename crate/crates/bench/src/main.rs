use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use taurus_core::engine::CcMode;
use taurus_core::log_runtime::{DEFAULT_BUFFER_BYTES, DEFAULT_FLUSH_INTERVAL, DEFAULT_RHO};
use taurus_core::storage::DEFAULT_DELTA;
use taurus_bench::crash::{kill_after, KillOutcome};
use taurus_bench::runner::{run, ConfigError, Finish, LoggingKind, RunConfig};
use taurus_bench::sweep::sweep_rho;
use taurus_bench::verify::{recover_dir, recovery_options, truncate, verify};
use taurus_bench::workload::{WorkloadKind, WorkloadSpec};

#[derive(Parser)]
#[command(name = "bench", about = "Workloads, crash injection and recovery checks for the taurus engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload and print a report.
    Run(RunArgs),
    /// Simulate a crash.
    Crash {
        #[command(subcommand)]
        mode: CrashMode,
    },
    /// Rebuild the database from a log directory.
    Recover(RecoverArgs),
    /// Recover a directory and check it against the ledger and an independent log walk.
    Verify(RecoverArgs),
    /// Metadata bytes per record and recovery speed across anchor intervals.
    SweepRho(SweepArgs),
}

#[derive(Subcommand)]
enum CrashMode {
    /// Start `bench run` with the arguments after `--`, then SIGKILL it.
    KillNow {
        /// Milliseconds to let the run work before killing it.
        #[arg(long, default_value_t = 500)]
        after_ms: u64,
        #[arg(last = true, required = true)]
        run_args: Vec<String>,
    },
    /// Cut a log file at a byte offset.
    Truncate {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        log: usize,
        #[arg(long)]
        byte: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CcArg {
    #[value(name = "2pl")]
    TwoPl,
    Occ,
}

impl From<CcArg> for CcMode {
    fn from(c: CcArg) -> Self {
        match c {
            CcArg::TwoPl => CcMode::TwoPl,
            CcArg::Occ => CcMode::Occ,
        }
    }
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long, value_enum, default_value_t = WorkloadKind::Ycsb)]
    workload: WorkloadKind,
    #[arg(long, default_value_t = 100_000)]
    rows: u64,
    #[arg(long, default_value_t = 1000)]
    row_width: usize,
    #[arg(long, default_value_t = 0.6)]
    theta: f64,
    #[arg(long, default_value_t = 2)]
    txn_size: usize,
    #[arg(long, default_value_t = 0.5)]
    read_fraction: f64,
    #[arg(long, default_value_t = 80)]
    warehouses: u32,
    #[arg(long, default_value_t = 0.5)]
    payment_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl WorkloadArgs {
    fn spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            kind: self.workload,
            rows: self.rows,
            row_width: self.row_width,
            theta: self.theta,
            txn_size: self.txn_size,
            read_fraction: self.read_fraction,
            warehouses: self.warehouses,
            payment_fraction: self.payment_fraction,
            seed: self.seed,
            ..WorkloadSpec::default()
        }
    }
}

#[derive(Args, Clone)]
struct EngineArgs {
    #[arg(long, default_value = "bench-data")]
    dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    threads: usize,
    #[arg(long, default_value_t = 4)]
    logs: usize,
    /// Sets the thread count to logs * workers-per-log.
    #[arg(long)]
    workers_per_log: Option<usize>,
    #[arg(long, value_enum, default_value_t = LoggingKind::TaurusCommand)]
    logging: LoggingKind,
    #[arg(long, value_enum, default_value_t = CcArg::TwoPl)]
    cc: CcArg,
    #[arg(long, default_value_t = DEFAULT_RHO)]
    rho: u64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: u64,
    /// Seconds to run.
    #[arg(long)]
    duration: Option<f64>,
    /// Total transactions to run.
    #[arg(long)]
    txns: Option<u64>,
    /// fsync log flushes and ledger appends.
    #[arg(long)]
    sync: bool,
    #[arg(long, default_value_t = DEFAULT_BUFFER_BYTES / 1024)]
    buffer_kib: usize,
    /// Microseconds between group flushes.
    #[arg(long, default_value_t = DEFAULT_FLUSH_INTERVAL.as_micros() as u64)]
    flush_interval_us: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Check dependency coverage with a shadow conflict tracker.
    #[arg(long)]
    track_deps: bool,
    /// Skip the ledger and reservation trace.
    #[arg(long)]
    no_side_files: bool,
    /// End without flushing, dropping buffered log bytes.
    #[arg(long)]
    abandon: bool,
    /// Print `running` once the workers start.
    #[arg(long)]
    announce: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    serial: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Comma-separated anchor intervals (rho) in bytes.
    #[arg(long, value_delimiter = ',', default_values_t = [1_000u64, 10_000, 100_000, 1_000_000, 10_000_000, 100_000_000, 1_000_000_000])]
    rhos: Vec<u64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [LoggingKind::TaurusCommand, LoggingKind::TaurusData])]
    modes: Vec<LoggingKind>,
    #[arg(long, default_value_t = 4)]
    recovery_workers: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_config(w: &WorkloadArgs, e: &EngineArgs) -> anyhow::Result<RunConfig> {
    let mut c = RunConfig::new(&e.dir, w.spec());
    c.threads = match e.workers_per_log {
        Some(p) => e.logs * p,
        None => e.threads,
    };
    c.logs = e.logs;
    c.logging = e.logging;
    c.cc = e.cc.into();
    c.rho = e.rho;
    c.delta = e.delta;
    c.duration = match e.duration {
        Some(s) if !(s.is_finite() && s > 0.0) => return Err(ConfigError(format!("bad duration {s}")).into()),
        Some(s) => Some(Duration::from_secs_f64(s)),
        None => None,
    };
    c.txns = e.txns.or(if c.duration.is_none() { Some(10_000) } else { None });
    c.sync = e.sync;
    c.buffer_bytes = e.buffer_kib.saturating_mul(1024);
    c.flush_interval = Duration::from_micros(e.flush_interval_us);
    Ok(c)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> anyhow::Result<bool> {
    match cmd {
        Cmd::Run(a) => {
            let mut c = run_config(&a.workload, &a.engine)?;
            c.track_dependencies = a.track_deps;
            c.side_files = !a.no_side_files;
            c.announce = a.announce;
            c.finish = if a.abandon { Finish::Crash } else { Finish::Shutdown };
            let report = run(&c)?.report;
            emit(&report, a.out.as_deref())?;
            Ok(report.dependencies.is_none_or(|d| d.violations == 0))
        }
        Cmd::Crash { mode: CrashMode::KillNow { after_ms, run_args } } => {
            let mut cmd = Command::new(std::env::current_exe()?);
            cmd.arg("run").args(&run_args).arg("--announce");
            let outcome = kill_after(cmd, Duration::from_millis(after_ms))?;
            let killed = matches!(outcome, KillOutcome::Killed);
            emit(&serde_json::json!({ "killed": killed, "detail": format!("{outcome:?}") }), None)?;
            Ok(true)
        }
        Cmd::Crash { mode: CrashMode::Truncate { dir, log, byte } } => {
            let cut = truncate(&dir, log, byte)?;
            emit(&serde_json::json!({ "log": log, "byte": byte, "truncated": cut }), None)?;
            Ok(true)
        }
        Cmd::Recover(a) => {
            let (outcome, _) = recover_dir(&a.dir, &recovery_options(a.workers, a.serial))?;
            emit(&outcome, a.out.as_deref())?;
            Ok(true)
        }
        Cmd::Verify(a) => {
            let report = verify(&a.dir, &recovery_options(a.workers, a.serial))?;
            emit(&report, a.out.as_deref())?;
            Ok(report.pass)
        }
        Cmd::SweepRho(a) => {
            let base = run_config(&a.workload, &a.engine)?;
            base.validate().map_err(ConfigError)?;
            let series = sweep_rho(&a.engine.dir, &base, &a.modes, &a.rhos, a.recovery_workers)?;
            emit(&series, a.out.as_deref())?;
            Ok(true)
        }
    }
}

//! Drives a workload against an engine and reports what happened.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use taurus_core::engine::{CcMode, Engine, EngineConfig, EngineHooks, LoggingMode};
use taurus_core::log_runtime::{LogHooks, DEFAULT_BUFFER_BYTES, DEFAULT_FLUSH_INTERVAL, DEFAULT_RHO};
use taurus_core::manifest::Manifest;
use taurus_core::recovery::load_logs;
use taurus_core::storage::{Database, DEFAULT_DELTA};
use taurus_core::txn::TxnError;

use crate::ledger::{ledger_path, read_ledger, trace_path, LedgerWriter, TraceWriter};
use crate::oracle::{metadata, walk_all, MetadataStats};
use crate::tracker::{DependencyReport, Tracker};
use crate::workload::WorkloadSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LoggingKind {
    TaurusData,
    TaurusCommand,
    SerialData,
    SerialCommand,
}

impl LoggingKind {
    pub fn mode(self) -> LoggingMode {
        match self {
            LoggingKind::TaurusData | LoggingKind::SerialData => LoggingMode::Data,
            LoggingKind::TaurusCommand | LoggingKind::SerialCommand => LoggingMode::Command,
        }
    }

    /// Serial logging is a single stream shared by every worker.
    pub fn is_serial(self) -> bool {
        matches!(self, LoggingKind::SerialData | LoggingKind::SerialCommand)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Finish {
    /// Flush and acknowledge everything.
    Shutdown,
    /// Drop buffered log bytes, as a crash would.
    Crash,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dir: PathBuf,
    pub workload: WorkloadSpec,
    pub threads: usize,
    pub logs: usize,
    pub logging: LoggingKind,
    pub cc: CcMode,
    pub rho: u64,
    pub delta: u64,
    /// Stop after this much wall time.
    pub duration: Option<Duration>,
    /// Stop after this many generated transactions in total.
    pub txns: Option<u64>,
    pub sync: bool,
    pub buffer_bytes: usize,
    pub flush_interval: Duration,
    /// Write the acknowledgement ledger and reservation trace.
    pub side_files: bool,
    pub track_dependencies: bool,
    /// Print `running` on stdout once the workers start.
    pub announce: bool,
    pub finish: Finish,
}

impl RunConfig {
    pub fn new(dir: impl Into<PathBuf>, workload: WorkloadSpec) -> Self {
        RunConfig {
            dir: dir.into(),
            workload,
            threads: 8,
            logs: 4,
            logging: LoggingKind::TaurusCommand,
            cc: CcMode::TwoPl,
            rho: DEFAULT_RHO,
            delta: DEFAULT_DELTA,
            duration: None,
            txns: Some(10_000),
            sync: false,
            buffer_bytes: DEFAULT_BUFFER_BYTES,
            flush_interval: DEFAULT_FLUSH_INTERVAL,
            side_files: true,
            track_dependencies: false,
            announce: false,
            finish: Finish::Shutdown,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.workload.validate()?;
        if self.threads == 0 || self.threads > 1024 {
            return Err("threads must be in 1..=1024".into());
        }
        if self.logs == 0 || self.logs > taurus_core::lsn_vector::MAX_DIMS {
            return Err(format!("logs must be in 1..={}", taurus_core::lsn_vector::MAX_DIMS));
        }
        if self.duration.is_none() && self.txns.is_none() {
            return Err("either a duration or a transaction count is required".into());
        }
        if self.rho == 0 {
            return Err("rho must be positive".into());
        }
        if self.flush_interval.is_zero() {
            return Err("flush interval must be positive".into());
        }
        if self.buffer_bytes < 1 << 12 {
            return Err("log buffer must be at least 4 KiB".into());
        }
        Ok(())
    }

    /// `(log streams, workers per stream)`.
    pub fn geometry(&self) -> (usize, usize) {
        if self.logging.is_serial() {
            (1, self.threads)
        } else {
            let n = self.logs.min(self.threads);
            (n, self.threads.div_ceil(n))
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        let (n, p) = self.geometry();
        let mut cfg = EngineConfig::new(&self.dir, n, p);
        cfg.logging = self.logging.mode();
        cfg.cc = self.cc;
        cfg.delta = self.delta;
        cfg.log.rho = self.rho;
        cfg.log.sync = self.sync;
        cfg.log.buffer_bytes = self.buffer_bytes;
        cfg.log.flush_interval = self.flush_interval;
        cfg
    }

    pub fn manifest(&self) -> Manifest {
        let cfg = self.engine_config();
        Manifest {
            n_logs: cfg.log.n_logs,
            workers_per_log: cfg.log.workers_per_log,
            logging: cfg.logging,
            cc: cfg.cc,
            rho: cfg.log.rho,
            delta: cfg.delta,
            registry_version: self.workload.registry().version().into(),
            tables: self.workload.schemas(),
            workload: serde_json::to_value(&self.workload).expect("spec serializes"),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Phases {
    pub load_ms: f64,
    pub run_ms: f64,
    pub finish_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub workload: WorkloadSpec,
    pub logging: LoggingKind,
    pub cc: CcMode,
    pub threads: usize,
    pub logs: usize,
    pub workers_per_log: usize,
    pub committed: u64,
    pub user_aborts: u64,
    pub conflict_aborts: u64,
    pub abort_rate: f64,
    pub throughput: f64,
    pub phases: Phases,
    pub ledger_entries: Option<usize>,
    pub metadata: Option<MetadataStats>,
    pub dependencies: Option<DependencyReport>,
    pub digest: Option<String>,
}

/// A configuration rejected before anything ran.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub struct RunOutcome {
    pub report: RunReport,
    pub db: Arc<Database>,
}

/// Worker `t` of `threads` spread round-robin over the log streams.
fn worker_id(t: usize, n: usize, p: usize) -> usize {
    (t % n) * p + t / n
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<RunOutcome> {
    cfg.validate().map_err(ConfigError)?;
    std::fs::create_dir_all(&cfg.dir).with_context(|| format!("creating {}", cfg.dir.display()))?;
    let t0 = Instant::now();
    let db = Arc::new(cfg.workload.load());
    let registry = cfg.workload.registry();
    cfg.manifest().write(&cfg.dir)?;

    let mut hooks = EngineHooks::default();
    let mut log_hooks = LogHooks::default();
    if cfg.side_files {
        let ledger = Arc::new(LedgerWriter::create(&ledger_path(&cfg.dir), cfg.sync)?);
        let trace = Arc::new(TraceWriter::create(&trace_path(&cfg.dir))?);
        log_hooks.on_ack = Some(Arc::new(move |events| ledger.append(events).expect("ledger append")));
        log_hooks.on_reserve = Some(Arc::new(move |log, s, e| trace.record(log, s, e).expect("trace append")));
    }
    hooks.log = log_hooks;
    let tracker = cfg.track_dependencies.then(Tracker::new);
    hooks.on_commit = tracker.as_ref().map(|t| t.hook());
    let engine = Engine::start(cfg.engine_config(), db.clone(), registry, hooks)?;
    let load_ms = t0.elapsed().as_secs_f64() * 1e3;

    let (n, p) = cfg.geometry();
    let committed = AtomicU64::new(0);
    let user_aborts = AtomicU64::new(0);
    let conflicts = AtomicU64::new(0);
    let stop = AtomicBool::new(false);
    let failure: std::sync::Mutex<Option<TxnError>> = std::sync::Mutex::new(None);
    if cfg.announce {
        let mut out = std::io::stdout().lock();
        writeln!(out, "running")?;
        out.flush()?;
    }
    let t1 = Instant::now();
    let deadline = cfg.duration.map(|d| t1 + d);
    thread::scope(|s| {
        for t in 0..cfg.threads {
            let budget = cfg.txns.map(|total| total / cfg.threads as u64 + u64::from((t as u64) < total % cfg.threads as u64));
            let (engine, committed, user_aborts, conflicts, stop, failure) =
                (&engine, &committed, &user_aborts, &conflicts, &stop, &failure);
            let mut source = cfg.workload.source(t);
            s.spawn(move || {
                let mut w = engine.worker(worker_id(t, n, p));
                let mut done = 0u64;
                while budget.is_none_or(|b| done < b) && !stop.load(Ordering::Relaxed) {
                    if deadline.is_some_and(|d| Instant::now() >= d) {
                        break;
                    }
                    let (proc_id, params) = source.next_txn();
                    loop {
                        match w.execute(proc_id, &params) {
                            Ok(_) => {
                                committed.fetch_add(1, Ordering::Relaxed);
                                break;
                            }
                            Err(e) if e.is_retryable() => {
                                conflicts.fetch_add(1, Ordering::Relaxed);
                                if stop.load(Ordering::Relaxed) {
                                    return;
                                }
                                thread::yield_now();
                            }
                            Err(TxnError::User(_)) => {
                                user_aborts.fetch_add(1, Ordering::Relaxed);
                                break;
                            }
                            Err(e) => {
                                failure.lock().unwrap().get_or_insert(e);
                                stop.store(true, Ordering::Relaxed);
                                return;
                            }
                        }
                    }
                    done += 1;
                }
            });
        }
    });
    let run_secs = t1.elapsed().as_secs_f64();
    if let Some(e) = failure.lock().unwrap().take() {
        engine.crash();
        bail!("worker failed: {e}");
    }
    let t2 = Instant::now();
    let digest = match cfg.finish {
        Finish::Shutdown => {
            engine.shutdown()?;
            Some(db.digest())
        }
        Finish::Crash => {
            engine.crash();
            None
        }
    };
    let finish_ms = t2.elapsed().as_secs_f64() * 1e3;

    let (committed, user_aborts, conflict_aborts) =
        (committed.into_inner(), user_aborts.into_inner(), conflicts.into_inner());
    let metadata = match cfg.finish {
        Finish::Shutdown => Some(metadata(&walk_all(&load_logs(&cfg.dir, n)?))),
        Finish::Crash => None,
    };
    let report = RunReport {
        workload: cfg.workload.clone(),
        logging: cfg.logging,
        cc: cfg.cc,
        threads: cfg.threads,
        logs: n,
        workers_per_log: p,
        committed,
        user_aborts,
        conflict_aborts,
        abort_rate: conflict_aborts as f64 / (committed + conflict_aborts).max(1) as f64,
        throughput: committed as f64 / run_secs.max(1e-9),
        phases: Phases { load_ms, run_ms: run_secs * 1e3, finish_ms },
        ledger_entries: if cfg.side_files { Some(read_ledger(&ledger_path(&cfg.dir))?.len()) } else { None },
        metadata,
        dependencies: tracker.map(|t| t.analyze()),
        digest,
    };
    Ok(RunOutcome { report, db })
}

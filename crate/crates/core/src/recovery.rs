//! Crash recovery: admission of a consistent prefix of every log, pipelined
//! decoding into per-log pools, and replay gated by the recovered LSN vector.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::log_runtime::log_path;
use crate::lsn_vector::{AtomicLsnVector, LsnVector};
use crate::manifest::Manifest;
use crate::record::{decode_payload, intact_prefix_len, FrameError, LogEntry, LogReader, RecordKind, TxnBody, WriteOp};
use crate::storage::Database;
use crate::txn::{Registry, ReplayOps, TxnError};

#[derive(Debug, Error)]
pub enum RecoveryError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error("log {log} is corrupt at offset {offset}: {source}")]
    Corrupt {
        log: usize,
        offset: u64,
        #[source]
        source: FrameError,
    },
    #[error("replay of log {log} record ending at {end} failed: {source}")]
    Replay {
        log: usize,
        end: u64,
        #[source]
        source: TxnError,
    },
    #[error("replay made no progress for {0:?}; RLV {1:?}")]
    Stalled(Duration, Vec<u64>),
}

#[derive(Clone, Debug)]
pub struct RecoveryOptions {
    /// Replay threads in parallel mode.
    pub workers: usize,
    /// One thread decodes every log and then replays.
    pub serial: bool,
    /// Fail if no transaction is decoded or replayed for this long.
    pub stall_timeout: Option<Duration>,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions { workers: 1, serial: false, stall_timeout: Some(Duration::from_secs(60)) }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RecoveryReport {
    pub mode: &'static str,
    pub workers: usize,
    /// Byte length of each log's intact frame prefix.
    pub elv: Vec<u64>,
    /// Per-log admission boundary; records at or after it are ignored.
    pub admitted_lv: Vec<u64>,
    pub admitted: Vec<usize>,
    pub ignored: Vec<usize>,
    pub replayed: usize,
    pub rlv: Vec<u64>,
    pub scan_ms: f64,
    pub replay_ms: f64,
    pub wall_ms: f64,
}

/// Reads `log_0 .. log_{n-1}` from `dir`.
pub fn load_logs(dir: &Path, n_logs: usize) -> std::io::Result<Vec<Vec<u8>>> {
    (0..n_logs).map(|i| std::fs::read(log_path(dir, i))).collect()
}

/// Length of each log's intact prefix.
pub fn compute_elv(logs: &[Vec<u8>]) -> Vec<u64> {
    logs.iter().map(|l| intact_prefix_len(l) as u64).collect()
}

struct Scanned {
    /// `(start, prefix join of stored vectors through this record)`.
    txns: Vec<(u64, LsnVector)>,
}

fn scan_log(log: usize, buf: &[u8], limit: u64, dims: usize) -> Result<Scanned, RecoveryError> {
    let mut r = LogReader::new(buf, limit as usize, dims);
    let mut acc = LsnVector::zeros(dims);
    let mut txns = Vec::new();
    while let Some(entry) = r.next_entry() {
        let offset = r.position() as u64;
        match entry.map_err(|source| RecoveryError::Corrupt { log, offset, source })? {
            LogEntry::Txn { start, lv, .. } => {
                acc.join_assign(&lv);
                txns.push((start, acc.clone()));
            }
            LogEntry::Anchor { .. } => {}
        }
    }
    Ok(Scanned { txns })
}

/// Largest per-log boundary `E <= elv` such that every transaction record
/// before `E[i]` in log `i` has a stored vector `<= E`. Returns `E` and the
/// number of admitted transactions per log.
pub fn admission_frontier(logs: &[Vec<u8>], elv: &[u64]) -> Result<(Vec<u64>, Vec<usize>, Vec<usize>), RecoveryError> {
    let n = logs.len();
    let scanned: Vec<Scanned> = thread::scope(|s| {
        let handles: Vec<_> = (0..n).map(|i| s.spawn(move || scan_log(i, &logs[i], elv[i], n))).collect();
        handles.into_iter().map(|h| h.join().expect("scan thread panicked")).collect::<Result<_, _>>()
    })?;
    let totals: Vec<usize> = scanned.iter().map(|s| s.txns.len()).collect();
    let mut cut = totals.clone();
    let mut e = elv.to_vec();
    loop {
        let mut changed = false;
        for i in 0..n {
            let txns = &scanned[i].txns;
            while cut[i] > 0 && !txns[cut[i] - 1].1.leq_slice(&e) {
                cut[i] -= 1;
            }
            let bound = if cut[i] < txns.len() { txns[cut[i]].0 } else { elv[i] };
            if bound != e[i] {
                e[i] = bound;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let ignored = totals.iter().zip(&cut).map(|(t, c)| t - c).collect();
    Ok((e, cut, ignored))
}

struct Pending {
    start: u64,
    end: u64,
    lv: LsnVector,
    kind: RecordKind,
    payload_at: usize,
}

#[derive(Default)]
struct PoolInner {
    queue: VecDeque<Pending>,
    in_flight: BTreeSet<u64>,
    max_lsn: u64,
    decoded: bool,
}

impl PoolInner {
    /// Every record of this log ending at or before the returned offset has
    /// been replayed.
    fn frontier(&self) -> u64 {
        let head = self.queue.front().map(|p| p.start);
        let flying = self.in_flight.first().copied();
        match (head, flying) {
            (None, None) => self.max_lsn,
            (a, b) => a.unwrap_or(u64::MAX).min(b.unwrap_or(u64::MAX)),
        }
    }

    fn idle(&self) -> bool {
        self.decoded && self.queue.is_empty() && self.in_flight.is_empty()
    }
}

struct Session<'a> {
    logs: &'a [Vec<u8>],
    bounds: Vec<u64>,
    pools: Vec<Mutex<PoolInner>>,
    rlv: AtomicLsnVector,
    db: &'a Database,
    registry: &'a Registry,
    replayed: AtomicUsize,
    progress: AtomicU64,
    failed: AtomicBool,
    error: Mutex<Option<RecoveryError>>,
    stall_timeout: Option<Duration>,
}

impl Session<'_> {
    fn fail(&self, e: RecoveryError) {
        let mut slot = self.error.lock();
        if slot.is_none() {
            *slot = Some(e);
        }
        self.failed.store(true, Ordering::Release);
    }

    fn publish(&self, log: usize, pool: &PoolInner) {
        self.rlv.advance(log, pool.frontier());
    }

    fn decode_log(&self, log: usize) {
        let mut r = LogReader::new(&self.logs[log], self.bounds[log] as usize, self.logs.len());
        while let Some(entry) = r.next_entry() {
            if self.failed.load(Ordering::Acquire) {
                return;
            }
            let entry = match entry {
                Ok(e) => e,
                Err(source) => return self.fail(RecoveryError::Corrupt { log, offset: r.position() as u64, source }),
            };
            let mut pool = self.pools[log].lock();
            match entry {
                LogEntry::Txn { start, end, lv, kind, payload_at } => {
                    pool.queue.push_back(Pending { start, end, lv, kind, payload_at });
                    pool.max_lsn = end;
                }
                LogEntry::Anchor { end, .. } => pool.max_lsn = end,
            }
            self.publish(log, &pool);
            drop(pool);
            self.progress.fetch_add(1, Ordering::Relaxed);
        }
        let mut pool = self.pools[log].lock();
        pool.max_lsn = self.bounds[log];
        pool.decoded = true;
        self.publish(log, &pool);
    }

    fn is_done(&self) -> bool {
        self.pools.iter().all(|p| p.lock().idle())
    }

    /// Pops the head of pool `log` if its vector is covered by RLV.
    fn take_ready(&self, log: usize) -> Option<Pending> {
        let mut pool = self.pools[log].lock();
        if !self.rlv.dominates(&pool.queue.front()?.lv) {
            return None;
        }
        let p = pool.queue.pop_front().unwrap();
        pool.in_flight.insert(p.start);
        Some(p)
    }

    fn replay(&self, log: usize, p: &Pending) -> Result<(), RecoveryError> {
        let payload = &self.logs[log][p.payload_at..p.end as usize];
        let corrupt = |source| RecoveryError::Corrupt { log, offset: p.start, source };
        let replay_err = |source| RecoveryError::Replay { log, end: p.end, source };
        match decode_payload(p.kind, payload).map_err(corrupt)? {
            TxnBody::Data(writes) => {
                for w in writes {
                    let table = self.db.table(w.table).map_err(|e| replay_err(e.into()))?;
                    let res = match &w.op {
                        WriteOp::Put(bytes) => table.upsert(w.key, bytes),
                        WriteOp::Delete => table.index_remove(w.key),
                    };
                    res.map_err(|e| replay_err(e.into()))?;
                }
            }
            TxnBody::Command { proc_id, params } => {
                let proc = self.registry.get(proc_id).map_err(replay_err)?;
                proc.execute(&mut ReplayOps::new(self.db), &params).map_err(replay_err)?;
            }
        }
        Ok(())
    }

    fn replay_loop(&self, home: usize) {
        let n = self.pools.len();
        let mut spins = 0u32;
        let mut idle_since: Option<(u64, Instant)> = None;
        loop {
            if self.failed.load(Ordering::Acquire) {
                return;
            }
            let mut did = false;
            for off in 0..n {
                let log = (home + off) % n;
                let Some(p) = self.take_ready(log) else { continue };
                let res = self.replay(log, &p);
                let mut pool = self.pools[log].lock();
                pool.in_flight.remove(&p.start);
                self.publish(log, &pool);
                drop(pool);
                if let Err(e) = res {
                    return self.fail(e);
                }
                self.replayed.fetch_add(1, Ordering::Relaxed);
                self.progress.fetch_add(1, Ordering::Relaxed);
                did = true;
                break;
            }
            if did {
                spins = 0;
                idle_since = None;
                continue;
            }
            if self.is_done() {
                return;
            }
            if let Some(limit) = self.stall_timeout {
                let seen = self.progress.load(Ordering::Relaxed);
                match idle_since {
                    Some((p, t)) if p == seen => {
                        if t.elapsed() > limit {
                            return self.fail(RecoveryError::Stalled(limit, self.rlv.snapshot().as_slice().to_vec()));
                        }
                    }
                    _ => idle_since = Some((seen, Instant::now())),
                }
            }
            spins += 1;
            if spins < 64 {
                thread::yield_now();
            } else {
                thread::sleep(Duration::from_micros(50));
            }
        }
    }
}

/// Recovers the database in `dir` into `db`, which must hold the initial
/// state the logged run started from.
pub fn recover(dir: &Path, db: &Database, registry: &Registry, opts: &RecoveryOptions) -> Result<RecoveryReport, RecoveryError> {
    let manifest = Manifest::read(dir)?;
    check_manifest(&manifest, db, registry)?;
    let logs = load_logs(dir, manifest.n_logs)?;
    recover_logs(&logs, db, registry, opts)
}

pub fn check_manifest(m: &Manifest, db: &Database, registry: &Registry) -> Result<(), RecoveryError> {
    if m.registry_version != registry.version() {
        return Err(RecoveryError::Manifest(format!(
            "log written with procedures {:?}, recovering with {:?}",
            m.registry_version,
            registry.version()
        )));
    }
    if m.tables != db.schemas() {
        return Err(RecoveryError::Manifest("table schemas differ".into()));
    }
    Ok(())
}

pub fn recover_logs(logs: &[Vec<u8>], db: &Database, registry: &Registry, opts: &RecoveryOptions) -> Result<RecoveryReport, RecoveryError> {
    let t0 = Instant::now();
    let n = logs.len();
    let elv = compute_elv(logs);
    let (bounds, admitted, ignored) = admission_frontier(logs, &elv)?;
    let scan_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();

    let session = Session {
        logs,
        bounds: bounds.clone(),
        pools: (0..n).map(|_| Mutex::new(PoolInner::default())).collect(),
        rlv: AtomicLsnVector::zeros(n),
        db,
        registry,
        replayed: AtomicUsize::new(0),
        progress: AtomicU64::new(0),
        failed: AtomicBool::new(false),
        error: Mutex::new(None),
        stall_timeout: opts.stall_timeout,
    };
    let workers = if opts.serial { 1 } else { opts.workers.max(1) };
    if opts.serial {
        for i in 0..n {
            session.decode_log(i);
        }
        session.replay_loop(0);
    } else {
        thread::scope(|s| {
            let session = &session;
            for i in 0..n {
                thread::Builder::new()
                    .name(format!("decode-{i}"))
                    .spawn_scoped(s, move || session.decode_log(i))
                    .expect("spawn decoder");
            }
            for w in 0..workers {
                thread::Builder::new()
                    .name(format!("replay-{w}"))
                    .spawn_scoped(s, move || session.replay_loop(w % n.max(1)))
                    .expect("spawn replayer");
            }
        });
    }
    if let Some(e) = session.error.lock().take() {
        return Err(e);
    }
    let replayed = session.replayed.load(Ordering::Relaxed);
    debug_assert_eq!(replayed, admitted.iter().sum::<usize>());
    Ok(RecoveryReport {
        mode: if opts.serial { "serial" } else { "parallel" },
        workers,
        elv,
        admitted_lv: bounds,
        admitted,
        ignored,
        replayed,
        rlv: session.rlv.snapshot().as_slice().to_vec(),
        scan_ms,
        replay_ms: t1.elapsed().as_secs_f64() * 1e3,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

//! Engine assembly: database, lock table, log streams and workers.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cc_2pl::TwoPl;
use crate::cc_occ::Occ;
use crate::log_runtime::{AckCell, CommitEntry, CommitTicket, LogConfig, LogError, LogHooks, LogRuntime, LogStream};
use crate::lsn_vector::LsnVector;
use crate::record::{encode_txn, TxnBody};
use crate::storage::{Database, LockTable, DEFAULT_DELTA};
use crate::txn::{CommitInfo, Registry, TxnContext, TxnError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoggingMode {
    Data,
    Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CcMode {
    #[serde(rename = "2pl")]
    TwoPl,
    #[serde(rename = "occ")]
    Occ,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub log: LogConfig,
    pub logging: LoggingMode,
    pub cc: CcMode,
    pub delta: u64,
    pub lock_buckets: usize,
    /// Period of the background lock-table sweep; `None` relies on lazy
    /// eviction alone.
    pub sweep_interval: Option<Duration>,
}

impl EngineConfig {
    pub fn new(dir: impl AsRef<Path>, n_logs: usize, workers_per_log: usize) -> Self {
        EngineConfig {
            log: LogConfig::new(dir.as_ref(), n_logs, workers_per_log),
            logging: LoggingMode::Command,
            cc: CcMode::TwoPl,
            delta: DEFAULT_DELTA,
            lock_buckets: 1 << 16,
            sweep_interval: Some(Duration::from_millis(100)),
        }
    }

    pub fn n_workers(&self) -> usize {
        self.log.n_logs * self.log.workers_per_log
    }
}

pub type CommitHook = Arc<dyn Fn(&CommitInfo) + Send + Sync>;

#[derive(Clone, Default)]
pub struct EngineHooks {
    pub log: LogHooks,
    /// Called by the committing worker after its locks are released.
    pub on_commit: Option<CommitHook>,
}

/// Result of a successful commit. The transaction is durable once the
/// ticket reports acknowledgement.
pub struct CommitOutcome {
    pub ticket: CommitTicket,
    pub record: Option<(u64, u64)>,
    pub lv: LsnVector,
}

pub struct Engine {
    cfg: EngineConfig,
    db: Arc<Database>,
    locks: Arc<LockTable>,
    logs: Option<LogRuntime>,
    registry: Arc<Registry>,
    on_commit: Option<CommitHook>,
    claimed: Box<[AtomicBool]>,
    sweeper: Option<JoinHandle<()>>,
    sweep_stop: Arc<AtomicBool>,
}

impl Engine {
    /// Starts log managers and the lock-table sweeper.
    pub fn start(cfg: EngineConfig, db: Arc<Database>, registry: Arc<Registry>, hooks: EngineHooks) -> Result<Self, LogError> {
        let mut e = Self::start_manual(cfg, db, registry, hooks)?;
        e.logs.as_mut().unwrap().spawn_managers();
        if let Some(interval) = e.cfg.sweep_interval {
            let locks = e.locks.clone();
            let stop = e.sweep_stop.clone();
            e.sweeper = Some(
                thread::Builder::new()
                    .name("lock-sweeper".into())
                    .spawn(move || {
                        while !stop.load(Ordering::Acquire) {
                            thread::park_timeout(interval);
                            locks.sweep();
                        }
                    })
                    .expect("spawn sweeper"),
            );
        }
        Ok(e)
    }

    /// Creates the engine without background threads; flushing is driven
    /// through [`LogStream::tick`].
    pub fn start_manual(cfg: EngineConfig, db: Arc<Database>, registry: Arc<Registry>, hooks: EngineHooks) -> Result<Self, LogError> {
        let logs = LogRuntime::create(cfg.log.clone(), hooks.log)?;
        let locks = Arc::new(LockTable::new(cfg.lock_buckets, cfg.delta, logs.plv().clone()));
        Ok(Engine {
            claimed: (0..cfg.n_workers()).map(|_| AtomicBool::new(false)).collect(),
            cfg,
            db,
            locks,
            logs: Some(logs),
            registry,
            on_commit: hooks.on_commit,
            sweeper: None,
            sweep_stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn db(&self) -> &Arc<Database> {
        &self.db
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    pub fn logs(&self) -> &LogRuntime {
        self.logs.as_ref().expect("engine is running")
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn n_logs(&self) -> usize {
        self.cfg.log.n_logs
    }

    pub fn n_workers(&self) -> usize {
        self.cfg.n_workers()
    }

    /// Claims worker `id`, which writes to log `id / workers_per_log`.
    pub fn worker(&self, id: usize) -> Worker<'_> {
        assert!(!self.claimed[id].swap(true, Ordering::AcqRel), "worker {id} is already in use");
        let p = self.cfg.log.workers_per_log;
        Worker { eng: self, id, log: id / p, slot: id % p, seq: 0 }
    }

    pub(crate) fn stream(&self, log: usize) -> &LogStream {
        self.logs().stream(log)
    }

    pub(crate) fn emit_commit(&self, info: impl FnOnce() -> CommitInfo) {
        if let Some(hook) = &self.on_commit {
            hook(&info());
        }
    }

    pub(crate) fn tracking(&self) -> bool {
        self.on_commit.is_some()
    }

    /// Appends a transaction record whose vector is compressed against the
    /// log's current anchor.
    pub(crate) fn append_record(
        &self,
        log: usize,
        slot: usize,
        txn_id: u64,
        lv: &LsnVector,
        bytes: &[u8],
    ) -> Result<(u64, u64, Arc<AckCell>), TxnError> {
        let cell = Arc::new(AckCell::default());
        let (s, e) = self
            .stream(log)
            .append(slot, bytes, Some(CommitEntry { txn_id, lv, cell: cell.clone() }))
            .map_err(|e| TxnError::Log(e.to_string()))?;
        Ok((s, e, cell))
    }

    pub(crate) fn encode_record(&self, log: usize, lv: &LsnVector, body: &TxnBody) -> Vec<u8> {
        let compressed = lv.compress(&self.stream(log).lplv());
        let mut buf = Vec::with_capacity(64);
        encode_txn(&compressed, body, &mut buf);
        buf
    }

    fn stop_sweeper(&mut self) {
        self.sweep_stop.store(true, Ordering::Release);
        if let Some(h) = self.sweeper.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }

    /// Flushes and acknowledges everything, then stops background threads.
    pub fn shutdown(mut self) -> Result<(), LogError> {
        self.stop_sweeper();
        self.logs.take().unwrap().shutdown()
    }

    /// Stops background threads without flushing buffered log bytes.
    pub fn crash(mut self) {
        self.stop_sweeper();
        self.logs.take().unwrap().abandon();
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.stop_sweeper();
    }
}

/// A worker bound to one log stream and one reservation slot.
pub struct Worker<'e> {
    eng: &'e Engine,
    id: usize,
    log: usize,
    slot: usize,
    seq: u64,
}

impl<'e> Worker<'e> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn log_id(&self) -> usize {
        self.log
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn engine(&self) -> &'e Engine {
        self.eng
    }

    fn next_ctx(&mut self) -> TxnContext {
        self.seq += 1;
        TxnContext::new(((self.id as u64) << 40) | self.seq, self.id, self.log, self.eng.n_logs())
    }

    pub fn begin_2pl(&mut self) -> TwoPl<'e> {
        TwoPl::begin(self.eng, self.next_ctx(), self.slot)
    }

    pub fn begin_occ(&mut self) -> Occ<'e> {
        Occ::begin(self.eng, self.next_ctx(), self.slot)
    }

    /// Runs one stored procedure under the engine's concurrency control.
    /// Retryable errors leave no trace; the caller may run it again.
    pub fn execute(&mut self, proc_id: u32, params: &[u8]) -> Result<CommitOutcome, TxnError> {
        let proc = self.eng.registry.get(proc_id)?.clone();
        match self.eng.cfg.cc {
            CcMode::TwoPl => {
                let mut t = self.begin_2pl();
                t.set_command(proc_id, params);
                match proc.execute(&mut t, params) {
                    Ok(()) => t.commit(),
                    Err(e) => {
                        t.abort();
                        Err(e)
                    }
                }
            }
            CcMode::Occ => {
                let mut t = self.begin_occ();
                t.set_command(proc_id, params);
                match proc.execute(&mut t, params) {
                    Ok(()) => t.commit(),
                    Err(e) => {
                        t.abort();
                        Err(e)
                    }
                }
            }
        }
    }

    /// Writes an anchor if the record at `[start, end)` crossed a multiple
    /// of rho. Called after the transaction has released its locks.
    pub(crate) fn after_commit(eng: &Engine, log: usize, record: Option<(u64, u64)>) -> Result<(), TxnError> {
        if let Some((s, e)) = record {
            eng.stream(log).maybe_anchor(s, e).map_err(|e| TxnError::Log(e.to_string()))?;
        }
        Ok(())
    }
}

impl Drop for Worker<'_> {
    fn drop(&mut self) {
        self.eng.claimed[self.id].store(false, Ordering::Release);
    }
}

//! Parallel log streams.
//!
//! Each stream owns a ring buffer, a file, a reservation cursor (`log_lsn`)
//! and one `(allocated, filled)` slot pair per worker. Workers reserve bytes
//! with a fetch-and-add and copy concurrently; the stream's manager flushes
//! the longest prefix that no worker is still copying into, publishes it as
//! `PLV[i]`, and acknowledges queued commits in LSN order.
//!
//! Acknowledgement uses a second global vector, the committed-prefix vector
//! `CLV`. `CLV[k]` is the start of the oldest unacknowledged commit on log k
//! (or `PLV[k]` when nothing is pending), so every transaction record below
//! `CLV[k]` has been acknowledged. An entry on log i is acknowledged once its
//! own bytes are durable and its vector is below `CLV` on every other log.
//! Anchors carry a `CLV` snapshot, which keeps decompressed vectors inside the
//! acknowledged region.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::SeqCst};
use std::sync::Arc;
use std::thread::{self, JoinHandle, Thread};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use thiserror::Error;

use crate::lsn_vector::{AtomicLsnVector, LsnVector};
use crate::record::encode_anchor;

pub const DEFAULT_BUFFER_BYTES: usize = 16 << 20;
pub const DEFAULT_RHO: u64 = 1 << 20;
pub const DEFAULT_FLUSH_INTERVAL: Duration = Duration::from_millis(5);

pub fn log_file_name(i: usize) -> String {
    format!("log_{i}.taurus")
}

pub fn log_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(log_file_name(i))
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log I/O failed: {0}")]
    Io(#[from] io::Error),
    #[error("log {0} is in fail-stop state")]
    Failed(usize),
    #[error("record of {size} bytes exceeds the {cap}-byte log buffer")]
    TooLarge { size: usize, cap: usize },
}

#[derive(Clone, Debug)]
pub struct LogConfig {
    pub dir: PathBuf,
    pub n_logs: usize,
    pub workers_per_log: usize,
    pub buffer_bytes: usize,
    /// Bytes of log between anchors; `u64::MAX` disables anchors.
    pub rho: u64,
    pub flush_interval: Duration,
    /// Call `sync_data` after every flush.
    pub sync: bool,
}

impl LogConfig {
    pub fn new(dir: impl Into<PathBuf>, n_logs: usize, workers_per_log: usize) -> Self {
        LogConfig {
            dir: dir.into(),
            n_logs,
            workers_per_log,
            buffer_bytes: DEFAULT_BUFFER_BYTES,
            rho: DEFAULT_RHO,
            flush_interval: DEFAULT_FLUSH_INTERVAL,
            sync: true,
        }
    }
}

/// An acknowledged commit, as reported to the ack hook.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AckEvent {
    pub txn_id: u64,
    pub log: usize,
    pub start: u64,
    pub end: u64,
    pub lv: LsnVector,
}

pub type ReserveHook = Arc<dyn Fn(usize, u64, u64) + Send + Sync>;
pub type AckHook = Arc<dyn Fn(&[AckEvent]) + Send + Sync>;

#[derive(Clone, Default)]
pub struct LogHooks {
    /// Called with `(log, start, end)` after a reservation and before the
    /// bytes can become durable.
    pub on_reserve: Option<ReserveHook>,
    /// Called on the manager thread with each batch of acknowledgements.
    pub on_ack: Option<AckHook>,
}

#[derive(Default)]
pub struct AckCell(AtomicBool);

impl AckCell {
    pub fn is_set(&self) -> bool {
        self.0.load(SeqCst)
    }

    fn set(&self) {
        self.0.store(true, SeqCst)
    }
}

enum TicketState {
    Logged(Arc<AckCell>),
    ReadOnly { lv: LsnVector, clv: Arc<AtomicLsnVector> },
}

/// Handle a worker polls to learn whether its transaction is acknowledged.
pub struct CommitTicket(TicketState);

impl CommitTicket {
    pub fn logged(cell: Arc<AckCell>) -> Self {
        CommitTicket(TicketState::Logged(cell))
    }

    pub fn read_only(lv: LsnVector, clv: Arc<AtomicLsnVector>) -> Self {
        CommitTicket(TicketState::ReadOnly { lv, clv })
    }

    pub fn is_read_only(&self) -> bool {
        matches!(self.0, TicketState::ReadOnly { .. })
    }

    pub fn is_acked(&self) -> bool {
        match &self.0 {
            TicketState::Logged(cell) => cell.is_set(),
            TicketState::ReadOnly { lv, clv } => clv.dominates(lv),
        }
    }

    pub fn wait(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut spins = 0u32;
        while !self.is_acked() {
            if Instant::now() >= deadline {
                return false;
            }
            spins += 1;
            if spins < 64 {
                thread::yield_now();
            } else {
                thread::sleep(Duration::from_micros(200));
            }
        }
        true
    }
}

/// `(allocated, filled)` for one writer, readable as a consistent pair.
struct SlotPair {
    seq: AtomicU64,
    allocated: AtomicU64,
    filled: AtomicU64,
}

impl SlotPair {
    fn new() -> Self {
        SlotPair { seq: AtomicU64::new(0), allocated: AtomicU64::new(u64::MAX), filled: AtomicU64::new(0) }
    }

    fn publish_allocated(&self, v: u64) {
        self.seq.fetch_add(1, SeqCst);
        self.allocated.store(v, SeqCst);
        self.seq.fetch_add(1, SeqCst);
    }

    fn publish_filled(&self, v: u64) {
        self.seq.fetch_add(1, SeqCst);
        self.filled.store(v, SeqCst);
        self.seq.fetch_add(1, SeqCst);
    }

    fn read(&self) -> (u64, u64) {
        loop {
            let s1 = self.seq.load(SeqCst);
            if s1 & 1 == 1 {
                std::hint::spin_loop();
                continue;
            }
            let a = self.allocated.load(SeqCst);
            let f = self.filled.load(SeqCst);
            if self.seq.load(SeqCst) == s1 {
                return (a, f);
            }
        }
    }
}

/// Fixed-capacity byte ring addressed by absolute log offset.
struct Ring {
    ptr: *mut u8,
    cap: usize,
}

// Writers copy into disjoint reserved ranges; the manager reads only below
// the ready LSN, which no writer touches until it has been flushed.
unsafe impl Send for Ring {}
unsafe impl Sync for Ring {}

impl Ring {
    fn new(cap: usize) -> Self {
        let buf = vec![0u8; cap].into_boxed_slice();
        Ring { ptr: Box::into_raw(buf) as *mut u8, cap }
    }

    /// Safety: `[pos, pos + data.len())` must be reserved by the caller and
    /// fit in the ring without overwriting unflushed bytes.
    unsafe fn write(&self, pos: u64, data: &[u8]) {
        let off = (pos % self.cap as u64) as usize;
        let first = data.len().min(self.cap - off);
        std::ptr::copy_nonoverlapping(data.as_ptr(), self.ptr.add(off), first);
        std::ptr::copy_nonoverlapping(data.as_ptr().add(first), self.ptr, data.len() - first);
    }

    /// Safety: `[from, to)` must be fully copied and not concurrently written.
    unsafe fn slices(&self, from: u64, to: u64) -> [&[u8]; 2] {
        let len = (to - from) as usize;
        let off = (from % self.cap as u64) as usize;
        let first = len.min(self.cap - off);
        [
            std::slice::from_raw_parts(self.ptr.add(off), first),
            std::slice::from_raw_parts(self.ptr, len - first),
        ]
    }
}

impl Drop for Ring {
    fn drop(&mut self) {
        unsafe { drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(self.ptr, self.cap))) }
    }
}

struct Pending {
    txn_id: u64,
    start: u64,
    lv: LsnVector,
    cell: Arc<AckCell>,
}

/// Commit-queue metadata handed to [`LogStream::append`].
pub struct CommitEntry<'a> {
    pub txn_id: u64,
    /// The vector stored in the record; its own-log dimension is replaced by
    /// the record's end LSN in the queue.
    pub lv: &'a LsnVector,
    pub cell: Arc<AckCell>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TickStats {
    pub flushed_bytes: u64,
    pub acked: usize,
}

pub struct LogStream {
    id: usize,
    log_lsn: AtomicU64,
    slots: Box<[SlotPair]>,
    ring: Ring,
    flushed: AtomicU64,
    queue: Mutex<BTreeMap<u64, Pending>>,
    anchor_end: Mutex<u64>,
    lplv: Mutex<LsnVector>,
    file: Mutex<File>,
    plv: Arc<AtomicLsnVector>,
    clv: Arc<AtomicLsnVector>,
    rho: u64,
    sync: bool,
    failed: AtomicBool,
    manager: Mutex<Option<Thread>>,
    hooks: LogHooks,
}

impl LogStream {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn log_lsn(&self) -> u64 {
        self.log_lsn.load(SeqCst)
    }

    pub fn flushed(&self) -> u64 {
        self.flushed.load(SeqCst)
    }

    pub fn capacity(&self) -> usize {
        self.ring.cap
    }

    /// Anchor that records appended from now on are compressed against.
    pub fn lplv(&self) -> LsnVector {
        self.lplv.lock().clone()
    }

    pub fn is_failed(&self) -> bool {
        self.failed.load(SeqCst)
    }

    fn anchor_slot(&self) -> usize {
        self.slots.len() - 1
    }

    fn wake_manager(&self) {
        if let Some(t) = self.manager.lock().as_ref() {
            t.unpark();
        }
    }

    /// Reserves space for `bytes`, copies them into the ring and returns the
    /// record's `(start, end)` offsets. With `commit`, the record also enters
    /// the commit queue before it can become durable.
    pub fn append(&self, slot: usize, bytes: &[u8], commit: Option<CommitEntry<'_>>) -> Result<(u64, u64), LogError> {
        let size = bytes.len() as u64;
        if bytes.len() > self.ring.cap {
            return Err(LogError::TooLarge { size: bytes.len(), cap: self.ring.cap });
        }
        if self.is_failed() {
            return Err(LogError::Failed(self.id));
        }
        let pair = &self.slots[slot];
        pair.publish_allocated(self.log_lsn.load(SeqCst));
        let lsn = self.log_lsn.fetch_add(size, SeqCst);
        pair.publish_allocated(lsn);
        let end = lsn + size;
        if let Some(hook) = &self.hooks.on_reserve {
            hook(self.id, lsn, end);
        }
        let mut spins = 0u32;
        while end - self.flushed.load(SeqCst) > self.ring.cap as u64 {
            if self.is_failed() {
                return Err(LogError::Failed(self.id));
            }
            self.wake_manager();
            spins += 1;
            if spins < 32 {
                thread::yield_now();
            } else {
                thread::sleep(Duration::from_micros(100));
            }
        }
        unsafe { self.ring.write(lsn, bytes) };
        if let Some(c) = commit {
            let mut lv = c.lv.clone();
            lv.set(self.id, end);
            self.queue.lock().insert(end, Pending { txn_id: c.txn_id, start: lsn, lv, cell: c.cell });
        }
        pair.publish_filled(end);
        if end.saturating_sub(self.flushed.load(SeqCst)) > self.ring.cap as u64 / 2 {
            self.wake_manager();
        }
        Ok((lsn, end))
    }

    /// Writes an anchor holding the current committed-prefix vector. Without
    /// `blocking`, returns `Ok(false)` if another anchor is being written.
    pub fn write_anchor(&self, blocking: bool) -> Result<bool, LogError> {
        let mut guard = if blocking {
            self.anchor_end.lock()
        } else {
            match self.anchor_end.try_lock() {
                Some(g) => g,
                None => return Ok(false),
            }
        };
        let snap = self.clv.snapshot();
        let mut bytes = Vec::with_capacity(crate::record::FRAME_HEADER_LEN + 8 * snap.dims());
        encode_anchor(&snap, &mut bytes);
        let (_, end) = self.append(self.anchor_slot(), &bytes, None)?;
        *self.lplv.lock() = snap;
        *guard = end;
        Ok(true)
    }

    /// Emits an anchor when `[start, end)` crosses a multiple of rho.
    pub fn maybe_anchor(&self, start: u64, end: u64) -> Result<(), LogError> {
        if self.rho != u64::MAX && self.rho > 0 && start / self.rho != end / self.rho {
            self.write_anchor(false)?;
        }
        Ok(())
    }

    /// Largest offset below which every reserved byte has been copied.
    pub fn compute_ready_lsn(&self) -> u64 {
        let mut ready = self.log_lsn.load(SeqCst);
        for pair in self.slots.iter() {
            let (allocated, filled) = pair.read();
            if allocated >= filled {
                ready = ready.min(allocated);
            }
        }
        ready
    }

    fn deps_committed(&self, lv: &LsnVector) -> bool {
        lv.as_slice().iter().enumerate().all(|(k, &v)| k == self.id || self.clv.get(k) >= v)
    }

    /// One flush step: write the ready prefix, publish `PLV[i]`, acknowledge
    /// queued commits in order and advance `CLV[i]`.
    pub fn tick(&self) -> Result<TickStats, LogError> {
        let mut file = self.file.lock();
        if self.is_failed() {
            return Err(LogError::Failed(self.id));
        }
        let mut stats = TickStats::default();
        let ready = self.compute_ready_lsn();
        let flushed = self.flushed.load(SeqCst);
        if ready > flushed {
            let io = (|| -> io::Result<()> {
                for part in unsafe { self.ring.slices(flushed, ready) } {
                    file.write_all(part)?;
                }
                if self.sync {
                    file.sync_data()?;
                }
                Ok(())
            })();
            if let Err(e) = io {
                self.failed.store(true, SeqCst);
                log::error!("log {} failed: {e}", self.id);
                return Err(e.into());
            }
            self.flushed.store(ready, SeqCst);
            self.plv.advance(self.id, ready);
            stats.flushed_bytes = ready - flushed;
        }
        let plv = self.plv.get(self.id);
        let mut events = Vec::new();
        {
            let mut queue = self.queue.lock();
            while let Some(head) = queue.first_entry() {
                if *head.key() > plv || !self.deps_committed(&head.get().lv) {
                    break;
                }
                let end = *head.key();
                let p = head.remove();
                p.cell.set();
                stats.acked += 1;
                if self.hooks.on_ack.is_some() {
                    events.push(AckEvent { txn_id: p.txn_id, log: self.id, start: p.start, end, lv: p.lv });
                }
            }
            let frontier = queue.first_key_value().map_or(plv, |(_, p)| p.start.min(plv));
            self.clv.advance(self.id, frontier);
        }
        drop(file);
        if let (Some(hook), false) = (&self.hooks.on_ack, events.is_empty()) {
            hook(&events);
        }
        Ok(stats)
    }

    pub fn pending(&self) -> usize {
        self.queue.lock().len()
    }

    fn idle(&self) -> bool {
        self.flushed() == self.log_lsn() && self.pending() == 0
    }
}

/// All log streams plus the global persistent and committed-prefix vectors.
pub struct LogRuntime {
    streams: Vec<Arc<LogStream>>,
    plv: Arc<AtomicLsnVector>,
    clv: Arc<AtomicLsnVector>,
    cfg: LogConfig,
    stop: Arc<AtomicBool>,
    managers: Vec<JoinHandle<()>>,
}

impl LogRuntime {
    /// Creates (truncating) one file per log. Manager threads are started
    /// separately by [`LogRuntime::spawn_managers`]; without them the caller
    /// drives flushing through [`LogStream::tick`].
    pub fn create(cfg: LogConfig, hooks: LogHooks) -> Result<Self, LogError> {
        assert!(cfg.n_logs >= 1 && cfg.workers_per_log >= 1);
        std::fs::create_dir_all(&cfg.dir)?;
        let plv = Arc::new(AtomicLsnVector::zeros(cfg.n_logs));
        let clv = Arc::new(AtomicLsnVector::zeros(cfg.n_logs));
        let mut streams = Vec::with_capacity(cfg.n_logs);
        for id in 0..cfg.n_logs {
            let file = OpenOptions::new().create(true).write(true).truncate(true).open(log_path(&cfg.dir, id))?;
            streams.push(Arc::new(LogStream {
                id,
                log_lsn: AtomicU64::new(0),
                slots: (0..cfg.workers_per_log + 1).map(|_| SlotPair::new()).collect(),
                ring: Ring::new(cfg.buffer_bytes),
                flushed: AtomicU64::new(0),
                queue: Mutex::new(BTreeMap::new()),
                anchor_end: Mutex::new(0),
                lplv: Mutex::new(LsnVector::zeros(cfg.n_logs)),
                file: Mutex::new(file),
                plv: plv.clone(),
                clv: clv.clone(),
                rho: cfg.rho,
                sync: cfg.sync,
                failed: AtomicBool::new(false),
                manager: Mutex::new(None),
                hooks: hooks.clone(),
            }));
        }
        Ok(LogRuntime { streams, plv, clv, cfg, stop: Arc::new(AtomicBool::new(false)), managers: Vec::new() })
    }

    pub fn spawn_managers(&mut self) {
        for s_id in 0..self.streams.len() {
            let s = self.streams[s_id].clone();
            let stop = self.stop.clone();
            let interval = self.cfg.flush_interval;
            let handle = thread::Builder::new()
                .name(format!("log-manager-{}", s.id))
                .spawn(move || {
                    while !stop.load(SeqCst) {
                        thread::park_timeout(interval);
                        if s.tick().is_err() {
                            return;
                        }
                    }
                })
                .expect("spawn log manager");
            *self.streams[s_id].manager.lock() = Some(handle.thread().clone());
            self.managers.push(handle);
        }
    }

    pub fn config(&self) -> &LogConfig {
        &self.cfg
    }

    pub fn n_logs(&self) -> usize {
        self.streams.len()
    }

    pub fn stream(&self, i: usize) -> &Arc<LogStream> {
        &self.streams[i]
    }

    pub fn plv(&self) -> &Arc<AtomicLsnVector> {
        &self.plv
    }

    pub fn clv(&self) -> &Arc<AtomicLsnVector> {
        &self.clv
    }

    /// Writes a final anchor per log, flushes everything and acknowledges
    /// every queued commit, then stops the manager threads.
    pub fn shutdown(mut self) -> Result<(), LogError> {
        self.stop.store(true, SeqCst);
        for s in &self.streams {
            s.wake_manager();
        }
        for h in self.managers.drain(..) {
            let _ = h.join();
        }
        for s in &self.streams {
            s.write_anchor(true)?;
        }
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            for s in &self.streams {
                s.tick()?;
            }
            if self.streams.iter().all(|s| s.idle()) {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(LogError::Io(io::Error::other("commit queues did not drain at shutdown")));
            }
        }
    }

    /// Stops manager threads without flushing, as if the process died.
    pub fn abandon(mut self) {
        self.stop.store(true, SeqCst);
        for s in &self.streams {
            s.wake_manager();
        }
        for h in self.managers.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for LogRuntime {
    fn drop(&mut self) {
        self.stop.store(true, SeqCst);
        for s in &self.streams {
            s.wake_manager();
        }
        for h in self.managers.drain(..) {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::intact_prefix_len;

    fn runtime(dir: &Path, n: usize, p: usize, cap: usize) -> LogRuntime {
        let mut cfg = LogConfig::new(dir, n, p);
        cfg.buffer_bytes = cap;
        cfg.sync = false;
        cfg.rho = u64::MAX;
        LogRuntime::create(cfg, LogHooks::default()).unwrap()
    }

    fn lv(v: &[u64]) -> LsnVector {
        LsnVector::from_slice(v)
    }

    #[test]
    fn cumulative_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime(dir.path(), 1, 1, 1 << 12);
        let s = rt.stream(0);
        assert_eq!(s.append(0, &[1; 100], None).unwrap(), (0, 100));
        assert_eq!(s.append(0, &[2; 50], None).unwrap(), (100, 150));
        assert_eq!(s.compute_ready_lsn(), 150);
        s.tick().unwrap();
        assert_eq!(rt.plv().snapshot(), lv(&[150]));
        let bytes = std::fs::read(log_path(dir.path(), 0)).unwrap();
        assert_eq!(&bytes[..100], &[1; 100][..]);
        assert_eq!(&bytes[100..], &[2; 50][..]);
    }

    #[test]
    fn ready_lsn_stops_at_mid_write_worker() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime(dir.path(), 1, 2, 1 << 12);
        let s = rt.stream(0);
        assert_eq!(s.compute_ready_lsn(), 0, "idle workers never hold back ready");
        s.append(0, &[0; 200], None).unwrap();
        // simulate worker 1 between its reservation and its copy completing
        s.slots[1].publish_allocated(200);
        s.log_lsn.fetch_add(300, SeqCst);
        assert_eq!(s.compute_ready_lsn(), 200);
        s.slots[1].publish_filled(500);
        assert_eq!(s.compute_ready_lsn(), 500);
    }

    #[test]
    fn ring_wraps() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime(dir.path(), 1, 1, 64);
        let s = rt.stream(0);
        let mut expect = Vec::new();
        for i in 0..40u8 {
            let rec = vec![i; 1 + (i as usize % 23)];
            expect.extend_from_slice(&rec);
            s.append(0, &rec, None).unwrap();
            s.tick().unwrap();
        }
        assert_eq!(std::fs::read(log_path(dir.path(), 0)).unwrap(), expect);
    }

    #[test]
    fn writer_waits_for_space_while_manager_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = LogConfig::new(dir.path(), 1, 4);
        cfg.buffer_bytes = 256;
        cfg.sync = false;
        cfg.flush_interval = Duration::from_micros(200);
        let mut rt = LogRuntime::create(cfg, LogHooks::default()).unwrap();
        rt.spawn_managers();
        let s = rt.stream(0).clone();
        let intervals = Mutex::new(Vec::new());
        thread::scope(|scope| {
            for w in 0..4 {
                let s = &s;
                let intervals = &intervals;
                scope.spawn(move || {
                    for k in 0..500usize {
                        let len = 1 + (w * 7 + k * 13) % 97;
                        let r = s.append(w, &vec![w as u8; len], None).unwrap();
                        intervals.lock().push(r);
                    }
                });
            }
        });
        let total = s.log_lsn();
        rt.shutdown().unwrap();
        let mut iv = intervals.into_inner();
        iv.sort_unstable();
        let mut pos = 0;
        for (a, b) in &iv {
            assert_eq!(*a, pos, "reservations tile the log");
            pos = *b;
        }
        let file = std::fs::read(log_path(dir.path(), 0)).unwrap();
        assert!(file.len() as u64 >= total);
        for (a, b) in iv {
            let chunk = &file[a as usize..b as usize];
            assert!(chunk.iter().all(|&x| x == chunk[0]), "bytes of one record were interleaved");
        }
    }

    #[test]
    fn ack_requires_own_durability_and_committed_dependencies() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime(dir.path(), 2, 1, 1 << 12);
        let (l0, l1) = (rt.stream(0), rt.stream(1));
        l1.append(0, &[0; 7], None).unwrap();
        let c = Arc::new(AckCell::default());
        let entry = CommitEntry { txn_id: 1, lv: &lv(&[0, 7]), cell: c.clone() };
        assert_eq!(l0.append(0, &[0; 16], Some(entry)).unwrap(), (0, 16));
        l0.tick().unwrap();
        assert!(!c.is_set(), "log 1 not yet durable up to 7");
        l1.tick().unwrap();
        assert_eq!(rt.clv().snapshot(), lv(&[0, 7]));
        l0.tick().unwrap();
        assert!(c.is_set());
        assert_eq!(rt.clv().snapshot(), lv(&[16, 7]));
    }

    #[test]
    fn acknowledgement_is_in_lsn_order() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime(dir.path(), 2, 1, 1 << 12);
        let (l0, l1) = (rt.stream(0), rt.stream(1));
        let blocked = Arc::new(AckCell::default());
        let free = Arc::new(AckCell::default());
        l1.append(0, &[0; 50], None).unwrap();
        l0.append(0, &[0; 10], Some(CommitEntry { txn_id: 1, lv: &lv(&[0, 50]), cell: blocked.clone() })).unwrap();
        l0.append(0, &[0; 10], Some(CommitEntry { txn_id: 2, lv: &lv(&[0, 0]), cell: free.clone() })).unwrap();
        l0.tick().unwrap();
        assert!(!blocked.is_set() && !free.is_set());
        assert_eq!(rt.clv().get(0), 0);
        l1.tick().unwrap();
        l0.tick().unwrap();
        assert!(blocked.is_set() && free.is_set());
    }

    #[test]
    fn read_only_ticket_follows_committed_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime(dir.path(), 2, 1, 1 << 12);
        let t = CommitTicket::read_only(lv(&[16, 7]), rt.clv().clone());
        assert!(!t.is_acked());
        rt.stream(0).append(0, &[0; 16], None).unwrap();
        rt.stream(1).append(0, &[0; 7], None).unwrap();
        rt.stream(0).tick().unwrap();
        assert!(!t.is_acked());
        rt.stream(1).tick().unwrap();
        assert!(t.is_acked());
    }

    #[test]
    fn anchors_follow_rho_and_carry_committed_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = LogConfig::new(dir.path(), 2, 1);
        cfg.sync = false;
        cfg.rho = 100;
        let rt = LogRuntime::create(cfg, LogHooks::default()).unwrap();
        let s = rt.stream(0);
        rt.stream(1).append(0, &[0; 33], None).unwrap();
        rt.stream(1).tick().unwrap();
        let mut anchors = 0;
        for _ in 0..10 {
            let (a, b) = s.append(0, &[0; 30], None).unwrap();
            let before = s.log_lsn();
            s.maybe_anchor(a, b).unwrap();
            if s.log_lsn() != before {
                anchors += 1;
                assert_eq!(s.lplv().get(1), 33);
            }
        }
        assert_eq!(anchors, 3, "offsets 90..120, 180..210 and 270..300 cross a multiple of 100");
        s.tick().unwrap();
        let bytes = std::fs::read(log_path(dir.path(), 0)).unwrap();
        assert_eq!(bytes.len() as u64, s.log_lsn());
    }

    #[test]
    fn shutdown_leaves_only_whole_frames() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = runtime(dir.path(), 2, 1, 1 << 12);
        rt.spawn_managers();
        let mut rec = Vec::new();
        crate::record::encode_anchor(&lv(&[1, 2]), &mut rec);
        for _ in 0..10 {
            rt.stream(1).append(0, &rec, None).unwrap();
        }
        rt.shutdown().unwrap();
        let bytes = std::fs::read(log_path(dir.path(), 1)).unwrap();
        assert_eq!(intact_prefix_len(&bytes), bytes.len());
        assert_eq!(bytes.len(), 11 * rec.len());
    }
}

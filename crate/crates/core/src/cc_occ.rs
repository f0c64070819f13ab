//! Optimistic concurrency control.
//!
//! Execution takes consistent `(value, version, writeLV)` snapshots under the
//! tuple latch and buffers writes. Commit locks the write set in key order,
//! raises every read tuple's read vector without locking it, validates
//! versions, appends the record, installs the writes and releases.
//!
//! Readers advertise themselves on each read tuple (`pending_readers`) from
//! just before validation until they have published their final vector. A
//! writer that has locked a tuple waits for that count to drain before
//! reading the tuple's read vector, so it cannot miss a reader that
//! validated against the old value.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::Ordering::SeqCst;
use std::sync::Arc;
use std::thread;

use crate::engine::{CommitOutcome, Engine, LoggingMode, Worker};
use crate::log_runtime::CommitTicket;
use crate::lsn_vector::LsnVector;
use crate::record::{TxnBody, WriteImage, WriteOp};
use crate::storage::{fresh_version, LockMode, LockState, MetaHandle, Row, RowKey, StorageError, TableId};
use crate::txn::{CommitInfo, ScanNote, TxnContext, TxnError, TxnOps, TxnStatus};

/// Attempts at locking one write-set tuple before giving up.
const LOCK_SPINS: usize = 64;

struct ReadEntry {
    key: RowKey,
    meta: MetaHandle,
    row: Option<Arc<Row>>,
    /// Zero when the row was absent.
    version: u64,
    value: Option<Vec<u8>>,
}

#[derive(Clone, Debug)]
enum WriteKind {
    Put(Vec<u8>),
    Insert(Vec<u8>),
    Delete,
}

pub struct Occ<'e> {
    eng: &'e Engine,
    ctx: TxnContext,
    slot: usize,
    reads: Vec<ReadEntry>,
    read_idx: HashMap<RowKey, usize>,
    writes: BTreeMap<RowKey, WriteKind>,
    scans: Vec<ScanNote>,
}

impl<'e> Occ<'e> {
    pub(crate) fn begin(eng: &'e Engine, ctx: TxnContext, slot: usize) -> Self {
        Occ {
            eng,
            ctx,
            slot,
            reads: Vec::new(),
            read_idx: HashMap::new(),
            writes: BTreeMap::new(),
            scans: Vec::new(),
        }
    }

    pub fn context(&self) -> &TxnContext {
        &self.ctx
    }

    pub fn lv(&self) -> &LsnVector {
        &self.ctx.lv
    }

    pub fn set_command(&mut self, proc_id: u32, params: &[u8]) {
        self.ctx.command = Some((proc_id, params.to_vec()));
    }

    /// Snapshots `key` once per transaction and joins its write vector.
    pub fn access(&mut self, key: RowKey) -> Result<usize, TxnError> {
        if let Some(&idx) = self.read_idx.get(&key) {
            return Ok(idx);
        }
        let table = self.eng.db().table(key.table)?;
        let meta = self.eng.locks().get_or_insert_meta(key);
        let entry = {
            let st = meta.latch();
            self.ctx.lv.join_assign(&st.write_lv);
            let row = table.row(key.key);
            let (version, value) = match &row {
                Some(r) => (r.version(), Some(r.read())),
                None => (0, None),
            };
            drop(st);
            ReadEntry { key, meta, row, version, value }
        };
        self.reads.push(entry);
        self.read_idx.insert(key, self.reads.len() - 1);
        Ok(self.reads.len() - 1)
    }

    fn current(&mut self, key: RowKey) -> Result<Option<Vec<u8>>, TxnError> {
        match self.writes.get(&key) {
            Some(WriteKind::Put(p) | WriteKind::Insert(p)) => Ok(Some(p.clone())),
            Some(WriteKind::Delete) => Ok(None),
            None => {
                let idx = self.access(key)?;
                Ok(self.reads[idx].value.clone())
            }
        }
    }

    /// A missing or duplicate row seen through a stale snapshot says nothing
    /// about the data; report it as a validation failure so it is retried.
    fn observed(&self, err: TxnError) -> TxnError {
        let db = self.eng.db();
        let stale = self.reads.iter().find(|r| {
            let st = r.meta.latch();
            let version = db.table(r.key.table).ok().and_then(|t| t.row(r.key.key)).map_or(0, |row| row.version());
            version != r.version || st.locked_by_other(self.ctx.txn_id)
        });
        match stale {
            Some(r) => TxnError::Validation(r.key),
            None => err,
        }
    }

    fn build_body(&self) -> TxnBody {
        match (self.eng.config().logging, &self.ctx.command) {
            (LoggingMode::Command, Some((proc_id, params))) => TxnBody::Command { proc_id: *proc_id, params: params.clone() },
            _ => TxnBody::Data(
                self.writes
                    .iter()
                    .map(|(k, w)| WriteImage {
                        table: k.table,
                        key: k.key,
                        op: match w {
                            WriteKind::Put(p) | WriteKind::Insert(p) => WriteOp::Put(p.clone()),
                            WriteKind::Delete => WriteOp::Delete,
                        },
                    })
                    .collect(),
            ),
        }
    }

    fn meta_for(&self, key: RowKey) -> MetaHandle {
        match self.read_idx.get(&key) {
            Some(&i) => self.reads[i].meta.clone(),
            None => self.eng.locks().get_or_insert_meta(key),
        }
    }

    /// Commits with the engine's record format.
    pub fn commit(self) -> Result<CommitOutcome, TxnError> {
        self.commit_with(|eng, log, lv, body| eng.encode_record(log, lv, body))
    }

    pub fn commit_with(
        mut self,
        encode: impl FnOnce(&Engine, usize, &LsnVector, &TxnBody) -> Vec<u8>,
    ) -> Result<CommitOutcome, TxnError> {
        let txn = self.ctx.txn_id;
        let log = self.ctx.log_id;

        // lock the write set in key order
        let mut locked: Vec<(RowKey, MetaHandle)> = Vec::with_capacity(self.writes.len());
        let release_all = |locked: &[(RowKey, MetaHandle)]| {
            for (_, m) in locked {
                m.latch().release(txn, LockMode::Write);
            }
        };
        for &key in self.writes.keys() {
            let meta = self.meta_for(key);
            let mut acquired = false;
            for attempt in 0..LOCK_SPINS {
                if meta.latch().try_acquire(txn, LockMode::Write, None) {
                    acquired = true;
                    break;
                }
                if attempt > 8 {
                    thread::yield_now();
                }
            }
            if !acquired {
                release_all(&locked);
                self.ctx.status = TxnStatus::Aborted;
                return Err(TxnError::Conflict(key));
            }
            locked.push((key, meta));
        }
        for (_, meta) in &locked {
            while meta.pending_readers().load(SeqCst) > 0 {
                thread::yield_now();
            }
            let st = meta.latch();
            self.ctx.lv.join_assign(&st.write_lv);
            self.ctx.lv.join_assign(&meta.read_lv().snapshot());
        }

        // advertise and raise read vectors, then validate
        let read_only_keys: Vec<usize> =
            (0..self.reads.len()).filter(|&i| !self.writes.contains_key(&self.reads[i].key)).collect();
        for &i in &read_only_keys {
            let meta = &self.reads[i].meta;
            meta.pending_readers().fetch_add(1, SeqCst);
            meta.read_lv().join(&self.ctx.lv);
        }
        let finish_readers = |reads: &[ReadEntry], lv: Option<&LsnVector>| {
            for &i in &read_only_keys {
                if let Some(lv) = lv {
                    reads[i].meta.read_lv().join(lv);
                }
                reads[i].meta.pending_readers().fetch_sub(1, SeqCst);
            }
        };
        let mut failure = None;
        for r in &self.reads {
            let table = self.eng.db().table(r.key.table).expect("table checked at access time");
            let st = r.meta.latch();
            let version = table.row(r.key.key).map_or(0, |row| row.version());
            if version != r.version || st.locked_by_other(txn) {
                failure = Some(TxnError::Validation(r.key));
                break;
            }
        }
        if failure.is_none() {
            for note in &self.scans {
                if !note.still_valid(self.eng.db())? {
                    failure = Some(note.phantom());
                    break;
                }
            }
        }
        if let Some(err) = failure {
            finish_readers(&self.reads, None);
            release_all(&locked);
            self.ctx.status = TxnStatus::Aborted;
            return Err(err);
        }

        // log
        let stored_lv = self.ctx.lv.clone();
        let mut record = None;
        let mut cell = None;
        if !self.writes.is_empty() {
            let bytes = encode(self.eng, log, &self.ctx.lv, &self.build_body());
            match self.eng.append_record(log, self.slot, txn, &self.ctx.lv, &bytes) {
                Ok((s, e, c)) => {
                    self.ctx.lv.set(log, e);
                    record = Some((s, e));
                    cell = Some(c);
                }
                Err(err) => {
                    finish_readers(&self.reads, None);
                    release_all(&locked);
                    self.ctx.status = TxnStatus::Aborted;
                    return Err(err);
                }
            }
        }
        self.ctx.status = TxnStatus::Precommit;

        // install writes and release
        let lv = &self.ctx.lv;
        let mut written = Vec::with_capacity(locked.len());
        for (key, meta) in &locked {
            let table = self.eng.db().table(key.table).expect("table checked at access time");
            let mut st = meta.latch();
            let version = match &self.writes[key] {
                WriteKind::Put(p) => {
                    let row = table.row(key.key).expect("validated row exists");
                    row.overwrite(p);
                    row.bump_version()
                }
                WriteKind::Insert(p) => table.index_insert(key.key, p).map_err(unexpected)?.version(),
                WriteKind::Delete => {
                    table.index_remove(key.key).map_err(unexpected)?;
                    fresh_version()
                }
            };
            written.push((*key, version));
            st.write_lv.join_assign(lv);
            debug_assert_eq!(st.lock, LockState::Exclusive(txn));
            st.release(txn, LockMode::Write);
        }
        finish_readers(&self.reads, Some(lv));
        self.ctx.status = TxnStatus::Committed;

        if self.eng.tracking() {
            let reads = self.reads.iter().filter(|r| r.row.is_some()).map(|r| (r.key, r.version)).collect();
            let lv = if record.is_some() { stored_lv } else { self.ctx.lv.clone() };
            self.eng.emit_commit(|| CommitInfo { txn_id: txn, log, record, lv, reads, writes: written });
        }
        Worker::after_commit(self.eng, log, record)?;
        let ticket = match cell {
            Some(c) => CommitTicket::logged(c),
            None => CommitTicket::read_only(self.ctx.lv.clone(), self.eng.logs().clv().clone()),
        };
        Ok(CommitOutcome { ticket, record, lv: self.ctx.lv.clone() })
    }

    /// Discards buffered writes. Nothing is shared before commit.
    pub fn abort(&mut self) {
        self.writes.clear();
        self.reads.clear();
        self.read_idx.clear();
        self.ctx.status = TxnStatus::Aborted;
    }
}

fn unexpected(e: StorageError) -> TxnError {
    panic!("index changed under an exclusive lock: {e}")
}

impl TxnOps for Occ<'_> {
    fn read(&mut self, table: TableId, key: u64) -> Result<Vec<u8>, TxnError> {
        let k = RowKey::new(table, key);
        match self.current(k)? {
            Some(v) => Ok(v),
            None => Err(self.observed(TxnError::NotFound(k))),
        }
    }

    fn read_for_update(&mut self, table: TableId, key: u64) -> Result<Vec<u8>, TxnError> {
        self.read(table, key)
    }

    fn write(&mut self, table: TableId, key: u64, payload: &[u8]) -> Result<(), TxnError> {
        self.eng.db().table(table)?.check_width(payload)?;
        let k = RowKey::new(table, key);
        let next = match self.writes.get(&k) {
            Some(WriteKind::Insert(_)) => WriteKind::Insert(payload.to_vec()),
            Some(WriteKind::Put(_)) => WriteKind::Put(payload.to_vec()),
            Some(WriteKind::Delete) => return Err(self.observed(TxnError::NotFound(k))),
            None => {
                let idx = self.access(k)?;
                if self.reads[idx].value.is_none() {
                    return Err(self.observed(TxnError::NotFound(k)));
                }
                WriteKind::Put(payload.to_vec())
            }
        };
        self.writes.insert(k, next);
        Ok(())
    }

    fn insert(&mut self, table: TableId, key: u64, payload: &[u8]) -> Result<(), TxnError> {
        self.eng.db().table(table)?.check_width(payload)?;
        let k = RowKey::new(table, key);
        let next = match self.writes.get(&k) {
            Some(WriteKind::Delete) => WriteKind::Put(payload.to_vec()),
            Some(_) => return Err(self.observed(TxnError::Duplicate(k))),
            None => {
                let idx = self.access(k)?;
                if self.reads[idx].value.is_some() {
                    return Err(self.observed(TxnError::Duplicate(k)));
                }
                WriteKind::Insert(payload.to_vec())
            }
        };
        self.writes.insert(k, next);
        Ok(())
    }

    fn delete(&mut self, table: TableId, key: u64) -> Result<(), TxnError> {
        let k = RowKey::new(table, key);
        match self.writes.get(&k) {
            Some(WriteKind::Insert(_)) => {
                self.writes.remove(&k);
            }
            Some(WriteKind::Delete) => return Err(self.observed(TxnError::NotFound(k))),
            Some(WriteKind::Put(_)) => {
                self.writes.insert(k, WriteKind::Delete);
            }
            None => {
                let idx = self.access(k)?;
                if self.reads[idx].value.is_none() {
                    return Err(self.observed(TxnError::NotFound(k)));
                }
                self.writes.insert(k, WriteKind::Delete);
            }
        }
        Ok(())
    }

    fn scan(&mut self, table: TableId, low: u64, high: u64) -> Result<Vec<(u64, Vec<u8>)>, TxnError> {
        let keys = self.eng.db().table(table)?.range_scan(low, high);
        let mut rows = BTreeMap::new();
        let mut count = 0;
        for k in keys {
            let idx = self.access(RowKey::new(table, k))?;
            if let Some(v) = &self.reads[idx].value {
                count += 1;
                rows.insert(k, v.clone());
            }
        }
        for (key, w) in self.writes.range(RowKey::new(table, low)..=RowKey::new(table, high)) {
            match w {
                WriteKind::Put(p) | WriteKind::Insert(p) => rows.insert(key.key, p.clone()),
                WriteKind::Delete => rows.remove(&key.key),
            };
        }
        self.scans.push(ScanNote { table, low, high, count });
        Ok(rows.into_iter().collect())
    }
}

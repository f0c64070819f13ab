//! Strict two-phase locking with NO_WAIT conflict handling.
//!
//! Acquiring a lock joins the tuple's write vector into the transaction's
//! vector (and its read vector too, for exclusive locks). Writes go to the
//! row in place under the exclusive lock and are undone from before-images
//! on abort. At commit the record is appended first, then every tuple's
//! vectors are updated and its lock released under the tuple latch, before
//! the record is durable.

use std::collections::HashMap;
use std::sync::Arc;

use crate::engine::{CommitOutcome, Engine, LoggingMode, Worker};
use crate::log_runtime::CommitTicket;
use crate::lsn_vector::LsnVector;
use crate::record::{TxnBody, WriteImage, WriteOp};
use crate::storage::{fresh_version, LockMode, MetaHandle, Row, RowKey, StorageError, TableId};
use crate::txn::{CommitInfo, ScanNote, TxnContext, TxnError, TxnOps, TxnStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Read,
    Update,
    Insert,
    Delete,
}

struct Access {
    key: RowKey,
    meta: MetaHandle,
    held: LockMode,
    kind: Kind,
    /// The row as seen when the lock was taken.
    row: Option<Arc<Row>>,
    before: Option<Vec<u8>>,
    staged: Option<Vec<u8>>,
    read_version: Option<u64>,
}

pub struct TwoPl<'e> {
    eng: &'e Engine,
    ctx: TxnContext,
    slot: usize,
    accesses: Vec<Access>,
    index: HashMap<RowKey, usize>,
    scans: Vec<ScanNote>,
}

impl<'e> TwoPl<'e> {
    pub(crate) fn begin(eng: &'e Engine, ctx: TxnContext, slot: usize) -> Self {
        TwoPl { eng, ctx, slot, accesses: Vec::new(), index: HashMap::new(), scans: Vec::new() }
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

    /// Acquires `mode` on `key` and joins the tuple's vectors.
    pub fn lock(&mut self, key: RowKey, mode: LockMode) -> Result<usize, TxnError> {
        let txn = self.ctx.txn_id;
        if let Some(&idx) = self.index.get(&key) {
            let a = &mut self.accesses[idx];
            if mode == LockMode::Write && a.held == LockMode::Read {
                let mut st = a.meta.latch();
                if !st.try_acquire(txn, LockMode::Write, Some(LockMode::Read)) {
                    return Err(TxnError::Conflict(key));
                }
                self.ctx.lv.join_assign(&st.write_lv);
                self.ctx.lv.join_assign(&a.meta.read_lv().snapshot());
                a.held = LockMode::Write;
            }
            return Ok(idx);
        }
        let table = self.eng.db().table(key.table)?;
        let meta = self.eng.locks().get_or_insert_meta(key);
        {
            let mut st = meta.latch();
            if !st.try_acquire(txn, mode, None) {
                return Err(TxnError::Conflict(key));
            }
            self.ctx.lv.join_assign(&st.write_lv);
            if mode == LockMode::Write {
                self.ctx.lv.join_assign(&meta.read_lv().snapshot());
            }
        }
        let row = table.row(key.key);
        self.accesses.push(Access {
            key,
            meta,
            held: mode,
            kind: Kind::Read,
            row,
            before: None,
            staged: None,
            read_version: None,
        });
        self.index.insert(key, self.accesses.len() - 1);
        Ok(self.accesses.len() - 1)
    }

    fn read_at(&mut self, idx: usize) -> Result<Vec<u8>, TxnError> {
        let a = &mut self.accesses[idx];
        match a.kind {
            Kind::Delete => Err(TxnError::NotFound(a.key)),
            Kind::Insert => Ok(a.staged.clone().unwrap()),
            Kind::Read | Kind::Update => {
                let row = a.row.as_ref().ok_or(TxnError::NotFound(a.key))?;
                if a.kind == Kind::Read && a.read_version.is_none() {
                    a.read_version = Some(row.version());
                }
                Ok(row.read())
            }
        }
    }

    fn check_width(&self, table: TableId, payload: &[u8]) -> Result<(), TxnError> {
        Ok(self.eng.db().table(table)?.check_width(payload)?)
    }

    fn collect_reads_writes(&self, versions: &[Option<u64>]) -> (Vec<(RowKey, u64)>, Vec<(RowKey, u64)>) {
        let reads = self.accesses.iter().filter_map(|a| a.read_version.map(|v| (a.key, v))).collect();
        let writes = self.accesses.iter().zip(versions).filter_map(|(a, v)| v.map(|v| (a.key, v))).collect();
        (reads, writes)
    }

    fn build_body(&self) -> TxnBody {
        match (self.eng.config().logging, &self.ctx.command) {
            (LoggingMode::Command, Some((proc_id, params))) => TxnBody::Command { proc_id: *proc_id, params: params.clone() },
            _ => TxnBody::Data(
                self.accesses
                    .iter()
                    .filter_map(|a| {
                        let op = match a.kind {
                            Kind::Read => return None,
                            Kind::Update => WriteOp::Put(a.row.as_ref().unwrap().read()),
                            Kind::Insert => WriteOp::Put(a.staged.clone().unwrap()),
                            Kind::Delete => WriteOp::Delete,
                        };
                        Some(WriteImage { table: a.key.table, key: a.key.key, op })
                    })
                    .collect(),
            ),
        }
    }

    pub fn is_read_only(&self) -> bool {
        self.accesses.iter().all(|a| a.kind == Kind::Read)
    }

    /// Commits with the engine's record format.
    pub fn commit(self) -> Result<CommitOutcome, TxnError> {
        self.commit_with(|eng, log, lv, body| eng.encode_record(log, lv, body))
    }

    /// Commits, producing the log record with `encode(engine, log, lv, body)`.
    pub fn commit_with(
        mut self,
        encode: impl FnOnce(&Engine, usize, &LsnVector, &TxnBody) -> Vec<u8>,
    ) -> Result<CommitOutcome, TxnError> {
        for note in &self.scans {
            if !note.still_valid(self.eng.db())? {
                let err = note.phantom();
                self.abort();
                return Err(err);
            }
        }
        let log = self.ctx.log_id;
        let stored_lv = self.ctx.lv.clone();
        let mut record = None;
        let mut cell = None;
        if !self.is_read_only() {
            let bytes = encode(self.eng, log, &self.ctx.lv, &self.build_body());
            match self.eng.append_record(log, self.slot, self.ctx.txn_id, &self.ctx.lv, &bytes) {
                Ok((s, e, c)) => {
                    self.ctx.lv.set(log, e);
                    record = Some((s, e));
                    cell = Some(c);
                }
                Err(err) => {
                    self.abort();
                    return Err(err);
                }
            }
        }
        self.ctx.status = TxnStatus::Precommit;
        let lv = &self.ctx.lv;
        let txn = self.ctx.txn_id;
        let mut versions = vec![None; self.accesses.len()];
        for (a, version) in self.accesses.iter().zip(versions.iter_mut()) {
            let table = self.eng.db().table(a.key.table).expect("table checked at lock time");
            let mut st = a.meta.latch();
            match a.kind {
                Kind::Read => a.meta.read_lv().join(lv),
                Kind::Update => {
                    st.write_lv = lv.clone();
                    *version = Some(a.row.as_ref().unwrap().bump_version());
                }
                Kind::Insert => {
                    st.write_lv = lv.clone();
                    let row = table.index_insert(a.key.key, a.staged.as_ref().unwrap()).map_err(unexpected)?;
                    *version = Some(row.version());
                }
                Kind::Delete => {
                    st.write_lv = lv.clone();
                    table.index_remove(a.key.key).map_err(unexpected)?;
                    *version = Some(fresh_version());
                }
            }
            st.release(txn, a.held);
        }
        self.ctx.status = TxnStatus::Committed;
        if self.eng.tracking() {
            let (reads, writes) = self.collect_reads_writes(&versions);
            let lv = if record.is_some() { stored_lv } else { self.ctx.lv.clone() };
            self.eng.emit_commit(|| CommitInfo { txn_id: txn, log, record, lv, reads, writes });
        }
        Worker::after_commit(self.eng, log, record)?;
        let ticket = match cell {
            Some(c) => CommitTicket::logged(c),
            None => CommitTicket::read_only(self.ctx.lv.clone(), self.eng.logs().clv().clone()),
        };
        let lv = std::mem::replace(&mut self.ctx.lv, LsnVector::zeros(0));
        self.accesses.clear();
        Ok(CommitOutcome { ticket, record, lv })
    }

    /// Undoes in-place writes and releases every lock.
    pub fn abort(&mut self) {
        for a in self.accesses.iter().rev() {
            if let (Some(before), Some(row)) = (&a.before, &a.row) {
                row.overwrite(before);
            }
            a.meta.latch().release(self.ctx.txn_id, a.held);
        }
        self.accesses.clear();
        self.index.clear();
        self.ctx.status = TxnStatus::Aborted;
    }
}

fn unexpected(e: StorageError) -> TxnError {
    panic!("index changed under an exclusive lock: {e}")
}

impl Drop for TwoPl<'_> {
    fn drop(&mut self) {
        if !self.accesses.is_empty() {
            self.abort();
        }
    }
}

impl TxnOps for TwoPl<'_> {
    fn read(&mut self, table: TableId, key: u64) -> Result<Vec<u8>, TxnError> {
        let idx = self.lock(RowKey::new(table, key), LockMode::Read)?;
        self.read_at(idx)
    }

    fn read_for_update(&mut self, table: TableId, key: u64) -> Result<Vec<u8>, TxnError> {
        let idx = self.lock(RowKey::new(table, key), LockMode::Write)?;
        self.read_at(idx)
    }

    fn write(&mut self, table: TableId, key: u64, payload: &[u8]) -> Result<(), TxnError> {
        self.check_width(table, payload)?;
        let idx = self.lock(RowKey::new(table, key), LockMode::Write)?;
        let a = &mut self.accesses[idx];
        match a.kind {
            Kind::Insert => a.staged = Some(payload.to_vec()),
            Kind::Delete => return Err(TxnError::NotFound(a.key)),
            Kind::Read | Kind::Update => {
                let row = a.row.as_ref().ok_or(TxnError::NotFound(a.key))?;
                if a.before.is_none() {
                    a.before = Some(row.read());
                }
                row.overwrite(payload);
                a.kind = Kind::Update;
            }
        }
        Ok(())
    }

    fn insert(&mut self, table: TableId, key: u64, payload: &[u8]) -> Result<(), TxnError> {
        self.check_width(table, payload)?;
        let idx = self.lock(RowKey::new(table, key), LockMode::Write)?;
        let a = &mut self.accesses[idx];
        match a.kind {
            Kind::Delete => {
                let row = a.row.as_ref().unwrap();
                if a.before.is_none() {
                    a.before = Some(row.read());
                }
                row.overwrite(payload);
                a.kind = Kind::Update;
            }
            Kind::Insert => return Err(TxnError::Duplicate(a.key)),
            Kind::Read | Kind::Update if a.row.is_some() => return Err(TxnError::Duplicate(a.key)),
            Kind::Read | Kind::Update => {
                a.kind = Kind::Insert;
                a.staged = Some(payload.to_vec());
            }
        }
        Ok(())
    }

    fn delete(&mut self, table: TableId, key: u64) -> Result<(), TxnError> {
        let idx = self.lock(RowKey::new(table, key), LockMode::Write)?;
        let a = &mut self.accesses[idx];
        match a.kind {
            Kind::Insert => {
                a.kind = Kind::Read;
                a.staged = None;
            }
            Kind::Delete => return Err(TxnError::NotFound(a.key)),
            Kind::Read | Kind::Update => {
                if a.row.is_none() {
                    return Err(TxnError::NotFound(a.key));
                }
                a.kind = Kind::Delete;
            }
        }
        Ok(())
    }

    fn scan(&mut self, table: TableId, low: u64, high: u64) -> Result<Vec<(u64, Vec<u8>)>, TxnError> {
        let keys = self.eng.db().table(table)?.range_scan(low, high);
        let mut out = Vec::new();
        let mut count = 0;
        for k in keys {
            let idx = self.lock(RowKey::new(table, k), LockMode::Read)?;
            let a = &self.accesses[idx];
            if a.row.is_some() && a.kind != Kind::Insert {
                count += 1;
            }
            if matches!(a.kind, Kind::Read | Kind::Update) && a.row.is_some() {
                out.push((k, self.read_at(idx)?));
            }
        }
        for a in &self.accesses {
            if a.kind == Kind::Insert && a.key.table == table && (low..=high).contains(&a.key.key) {
                out.push((a.key.key, a.staged.clone().unwrap()));
            }
        }
        out.sort_by_key(|(k, _)| *k);
        self.scans.push(ScanNote { table, low, high, count });
        Ok(out)
    }
}

//! Transaction-facing interfaces shared by both concurrency-control modes,
//! recovery replay and the stored-procedure registry.

use std::sync::Arc;

use thiserror::Error;

use crate::lsn_vector::LsnVector;
use crate::storage::{Database, RowKey, StorageError, TableId};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum TxnError {
    #[error("lock conflict on {0:?}")]
    Conflict(RowKey),
    #[error("validation failed on {0:?}")]
    Validation(RowKey),
    #[error("phantom detected in table {table} range [{low}, {high}]")]
    Phantom { table: TableId, low: u64, high: u64 },
    #[error("no such row {0:?}")]
    NotFound(RowKey),
    #[error("duplicate key {0:?}")]
    Duplicate(RowKey),
    #[error("procedure aborted: {0}")]
    User(String),
    #[error("unknown procedure {0}")]
    UnknownProcedure(u32),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("log failure: {0}")]
    Log(String),
}

impl TxnError {
    /// Conflicts that may succeed if the whole transaction is retried.
    pub fn is_retryable(&self) -> bool {
        matches!(self, TxnError::Conflict(_) | TxnError::Validation(_) | TxnError::Phantom { .. })
    }
}

/// Row operations available to a stored procedure.
pub trait TxnOps {
    fn read(&mut self, table: TableId, key: u64) -> Result<Vec<u8>, TxnError>;
    /// Reads with the intent to write; 2PL takes the exclusive lock up front.
    fn read_for_update(&mut self, table: TableId, key: u64) -> Result<Vec<u8>, TxnError>;
    fn write(&mut self, table: TableId, key: u64, payload: &[u8]) -> Result<(), TxnError>;
    fn insert(&mut self, table: TableId, key: u64, payload: &[u8]) -> Result<(), TxnError>;
    fn delete(&mut self, table: TableId, key: u64) -> Result<(), TxnError>;
    /// Rows with keys in `[low, high]`, ascending.
    fn scan(&mut self, table: TableId, low: u64, high: u64) -> Result<Vec<(u64, Vec<u8>)>, TxnError>;
}

/// A deterministic transaction program. Replay re-executes it against the
/// recovering database, so its effects must depend only on `params` and the
/// rows it reads.
pub trait Procedure: Send + Sync {
    fn name(&self) -> &str;
    fn execute(&self, ops: &mut dyn TxnOps, params: &[u8]) -> Result<(), TxnError>;
}

#[derive(Clone)]
pub struct Registry {
    version: String,
    procs: Vec<Arc<dyn Procedure>>,
}

impl Registry {
    pub fn new(version: impl Into<String>) -> Self {
        Registry { version: version.into(), procs: Vec::new() }
    }

    pub fn register(&mut self, p: Arc<dyn Procedure>) -> u32 {
        self.procs.push(p);
        (self.procs.len() - 1) as u32
    }

    pub fn get(&self, id: u32) -> Result<&Arc<dyn Procedure>, TxnError> {
        self.procs.get(id as usize).ok_or(TxnError::UnknownProcedure(id))
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnStatus {
    Active,
    Aborted,
    Precommit,
    Committed,
}

/// Per-transaction state owned by one worker.
#[derive(Clone, Debug)]
pub struct TxnContext {
    pub txn_id: u64,
    pub worker_id: usize,
    pub log_id: usize,
    pub lv: LsnVector,
    pub command: Option<(u32, Vec<u8>)>,
    pub status: TxnStatus,
}

impl TxnContext {
    pub fn new(txn_id: u64, worker_id: usize, log_id: usize, dims: usize) -> Self {
        TxnContext { txn_id, worker_id, log_id, lv: LsnVector::zeros(dims), command: None, status: TxnStatus::Active }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ScanNote {
    pub table: TableId,
    pub low: u64,
    pub high: u64,
    pub count: usize,
}

impl ScanNote {
    pub fn still_valid(&self, db: &Database) -> Result<bool, TxnError> {
        Ok(db.table(self.table)?.range_scan(self.low, self.high).len() == self.count)
    }

    pub fn phantom(&self) -> TxnError {
        TxnError::Phantom { table: self.table, low: self.low, high: self.high }
    }
}

/// Description of a committed transaction, for dependency tracking.
#[derive(Clone, Debug)]
pub struct CommitInfo {
    pub txn_id: u64,
    pub log: usize,
    /// `(start, end)` of the transaction's record, if it wrote one.
    pub record: Option<(u64, u64)>,
    /// The vector stored in the record (the full vector when read-only).
    pub lv: LsnVector,
    /// `(row, version observed)` for every existing row read.
    pub reads: Vec<(RowKey, u64)>,
    /// `(row, version created)` for every write; deletes get a fresh version.
    pub writes: Vec<(RowKey, u64)>,
}

/// Direct, unsynchronized access used by replay. Safe only when the caller
/// guarantees no concurrent transaction touches the same rows.
pub struct ReplayOps<'a> {
    db: &'a Database,
}

impl<'a> ReplayOps<'a> {
    pub fn new(db: &'a Database) -> Self {
        ReplayOps { db }
    }
}

impl TxnOps for ReplayOps<'_> {
    fn read(&mut self, table: TableId, key: u64) -> Result<Vec<u8>, TxnError> {
        self.db.table(table)?.row(key).map(|r| r.read()).ok_or(TxnError::NotFound(RowKey::new(table, key)))
    }

    fn read_for_update(&mut self, table: TableId, key: u64) -> Result<Vec<u8>, TxnError> {
        self.read(table, key)
    }

    fn write(&mut self, table: TableId, key: u64, payload: &[u8]) -> Result<(), TxnError> {
        let t = self.db.table(table)?;
        t.check_width(payload)?;
        let row = t.row(key).ok_or(TxnError::NotFound(RowKey::new(table, key)))?;
        row.overwrite(payload);
        row.bump_version();
        Ok(())
    }

    fn insert(&mut self, table: TableId, key: u64, payload: &[u8]) -> Result<(), TxnError> {
        match self.db.table(table)?.index_insert(key, payload) {
            Err(StorageError::DuplicateKey(k)) => Err(TxnError::Duplicate(k)),
            other => other.map(|_| ()).map_err(Into::into),
        }
    }

    fn delete(&mut self, table: TableId, key: u64) -> Result<(), TxnError> {
        match self.db.table(table)?.index_remove(key) {
            Err(StorageError::NoSuchRow(k)) => Err(TxnError::NotFound(k)),
            other => other.map_err(Into::into),
        }
    }

    fn scan(&mut self, table: TableId, low: u64, high: u64) -> Result<Vec<(u64, Vec<u8>)>, TxnError> {
        let t = self.db.table(table)?;
        Ok(t.range_scan(low, high).into_iter().filter_map(|k| t.row(k).map(|r| (k, r.read()))).collect())
    }
}

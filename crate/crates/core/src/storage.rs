//! Memory-resident tables and the lock table.
//!
//! Rows live in per-table hash shards for point lookups, with an ordered key
//! set alongside for range scans. Concurrency-control metadata (lock state and
//! the read/write LSN vectors) lives in a separate [`LockTable`] that only
//! holds entries for recently active tuples; idle entries are evicted once
//! their vectors fall at least `delta` bytes behind the persistent vector.

use std::collections::{BTreeSet, HashMap};
use std::hash::{BuildHasher, Hash};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lsn_vector::{AtomicLsnVector, LsnVector};

pub type TableId = u32;
pub type TxnId = u64;

/// Default eviction distance: 4 MiB per dimension.
pub const DEFAULT_DELTA: u64 = 4 << 20;
/// Bucket length above which an access triggers eviction in that bucket.
pub const DEFAULT_CHAIN_LIMIT: usize = 8;

const ROW_SHARDS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub table: TableId,
    pub key: u64,
}

impl RowKey {
    pub const fn new(table: TableId, key: u64) -> Self {
        RowKey { table, key }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum StorageError {
    #[error("no such row {0:?}")]
    NoSuchRow(RowKey),
    #[error("duplicate key {0:?}")]
    DuplicateKey(RowKey),
    #[error("no such table {0}")]
    NoSuchTable(TableId),
    #[error("row for table {table} must be {expected} bytes, got {got}")]
    WidthMismatch { table: TableId, expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub id: TableId,
    pub name: String,
    pub row_width: usize,
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

/// A process-wide unique, increasing row version. Zero means "absent".
pub fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// One row: payload plus a version replaced on every committed write.
pub struct Row {
    version: AtomicU64,
    data: Mutex<Box<[u8]>>,
}

impl Row {
    fn new(payload: &[u8]) -> Self {
        Row { version: AtomicU64::new(fresh_version()), data: Mutex::new(payload.into()) }
    }

    pub fn version(&self) -> u64 {
        self.version.load(Ordering::Acquire)
    }

    pub fn bump_version(&self) -> u64 {
        let v = fresh_version();
        self.version.store(v, Ordering::Release);
        v
    }

    pub fn read(&self) -> Vec<u8> {
        self.data.lock().to_vec()
    }

    pub fn read_into(&self, out: &mut Vec<u8>) {
        out.clear();
        out.extend_from_slice(&self.data.lock());
    }

    /// Overwrites the payload. Width is checked by the owning table.
    pub fn overwrite(&self, payload: &[u8]) {
        self.data.lock().copy_from_slice(payload);
    }
}

pub struct Table {
    schema: TableSchema,
    shards: Box<[RwLock<HashMap<u64, Arc<Row>>>]>,
    ordered: RwLock<BTreeSet<u64>>,
}

impl Table {
    pub fn new(schema: TableSchema) -> Self {
        Table {
            schema,
            shards: (0..ROW_SHARDS).map(|_| RwLock::new(HashMap::new())).collect(),
            ordered: RwLock::new(BTreeSet::new()),
        }
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    fn rk(&self, key: u64) -> RowKey {
        RowKey::new(self.schema.id, key)
    }

    #[inline]
    fn shard(&self, key: u64) -> &RwLock<HashMap<u64, Arc<Row>>> {
        let h = key.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 58;
        &self.shards[h as usize % ROW_SHARDS]
    }

    pub fn check_width(&self, payload: &[u8]) -> Result<(), StorageError> {
        if payload.len() != self.schema.row_width {
            return Err(StorageError::WidthMismatch {
                table: self.schema.id,
                expected: self.schema.row_width,
                got: payload.len(),
            });
        }
        Ok(())
    }

    pub fn row(&self, key: u64) -> Option<Arc<Row>> {
        self.shard(key).read().get(&key).cloned()
    }

    pub fn contains(&self, key: u64) -> bool {
        self.shard(key).read().contains_key(&key)
    }

    pub fn read_row(&self, key: u64) -> Result<Vec<u8>, StorageError> {
        self.row(key).map(|r| r.read()).ok_or(StorageError::NoSuchRow(self.rk(key)))
    }

    pub fn write_row(&self, key: u64, payload: &[u8]) -> Result<(), StorageError> {
        self.check_width(payload)?;
        let row = self.row(key).ok_or(StorageError::NoSuchRow(self.rk(key)))?;
        row.overwrite(payload);
        Ok(())
    }

    /// Publishes a new row to point lookups and scans in one step.
    pub fn index_insert(&self, key: u64, payload: &[u8]) -> Result<Arc<Row>, StorageError> {
        self.check_width(payload)?;
        let mut ordered = self.ordered.write();
        let mut shard = self.shard(key).write();
        if shard.contains_key(&key) {
            return Err(StorageError::DuplicateKey(self.rk(key)));
        }
        let row = Arc::new(Row::new(payload));
        shard.insert(key, row.clone());
        ordered.insert(key);
        Ok(row)
    }

    pub fn index_remove(&self, key: u64) -> Result<(), StorageError> {
        let mut ordered = self.ordered.write();
        let mut shard = self.shard(key).write();
        if shard.remove(&key).is_none() {
            return Err(StorageError::NoSuchRow(self.rk(key)));
        }
        ordered.remove(&key);
        Ok(())
    }

    /// Insert-or-overwrite used by recovery and bulk loading.
    pub fn upsert(&self, key: u64, payload: &[u8]) -> Result<(), StorageError> {
        self.check_width(payload)?;
        if let Some(row) = self.row(key) {
            row.overwrite(payload);
            return Ok(());
        }
        match self.index_insert(key, payload) {
            Err(StorageError::DuplicateKey(_)) => self.write_row(key, payload),
            other => other.map(|_| ()),
        }
    }

    /// Keys in `[low, high]`, ascending, from one snapshot of the index.
    pub fn range_scan(&self, low: u64, high: u64) -> Vec<u64> {
        if low > high {
            return Vec::new();
        }
        self.ordered.read().range(low..=high).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.ordered.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A set of tables addressed by [`TableId`].
pub struct Database {
    tables: Vec<Table>,
}

impl Database {
    pub fn new(schemas: &[TableSchema]) -> Self {
        let mut schemas = schemas.to_vec();
        schemas.sort_by_key(|s| s.id);
        for (i, s) in schemas.iter().enumerate() {
            assert_eq!(s.id as usize, i, "table ids must be dense and start at 0");
        }
        Database { tables: schemas.into_iter().map(Table::new).collect() }
    }

    pub fn schemas(&self) -> Vec<TableSchema> {
        self.tables.iter().map(|t| t.schema.clone()).collect()
    }

    pub fn table(&self, id: TableId) -> Result<&Table, StorageError> {
        self.tables.get(id as usize).ok_or(StorageError::NoSuchTable(id))
    }

    pub fn tables(&self) -> &[Table] {
        &self.tables
    }

    /// SHA-256 over the sorted `(table, key, payload hash)` stream.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tables {
            let keys: Vec<u64> = t.ordered.read().iter().copied().collect();
            for key in keys {
                let Some(row) = t.row(key) else { continue };
                let payload_hash = Sha256::digest(&*row.data.lock());
                h.update(t.schema.id.to_le_bytes());
                h.update(key.to_le_bytes());
                h.update(payload_hash);
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockState {
    Free,
    Shared(u32),
    Exclusive(TxnId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockMode {
    Read,
    Write,
}

/// State guarded by the tuple latch.
pub struct MetaState {
    pub lock: LockState,
    pub write_lv: LsnVector,
}

impl MetaState {
    /// NO_WAIT acquisition. `held` is the mode this transaction already holds.
    pub fn try_acquire(&mut self, txn: TxnId, mode: LockMode, held: Option<LockMode>) -> bool {
        match (mode, held, self.lock) {
            (_, Some(LockMode::Write), LockState::Exclusive(o)) if o == txn => true,
            (LockMode::Read, Some(LockMode::Read), _) => true,
            (LockMode::Read, None, LockState::Free) => {
                self.lock = LockState::Shared(1);
                true
            }
            (LockMode::Read, None, LockState::Shared(n)) => {
                self.lock = LockState::Shared(n + 1);
                true
            }
            (LockMode::Write, None, LockState::Free) => {
                self.lock = LockState::Exclusive(txn);
                true
            }
            (LockMode::Write, Some(LockMode::Read), LockState::Shared(1)) => {
                self.lock = LockState::Exclusive(txn);
                true
            }
            _ => false,
        }
    }

    pub fn release(&mut self, txn: TxnId, held: LockMode) {
        self.lock = match (held, self.lock) {
            (LockMode::Read, LockState::Shared(n)) if n > 1 => LockState::Shared(n - 1),
            (LockMode::Read, LockState::Shared(1)) => LockState::Free,
            (LockMode::Write, LockState::Exclusive(o)) if o == txn => LockState::Free,
            (held, state) => panic!("txn {txn} releasing {held:?} but lock is {state:?}"),
        };
    }

    pub fn locked_by_other(&self, txn: TxnId) -> bool {
        matches!(self.lock, LockState::Exclusive(o) if o != txn)
    }
}

/// Lock-table entry for one tuple.
pub struct TupleMeta {
    state: Mutex<MetaState>,
    read_lv: AtomicLsnVector,
    pending_readers: AtomicU32,
}

impl TupleMeta {
    fn new(init: &LsnVector) -> Self {
        TupleMeta {
            state: Mutex::new(MetaState { lock: LockState::Free, write_lv: init.clone() }),
            read_lv: AtomicLsnVector::from_lv(init),
            pending_readers: AtomicU32::new(0),
        }
    }

    /// The tuple latch.
    pub fn latch(&self) -> MutexGuard<'_, MetaState> {
        self.state.lock()
    }

    pub fn read_lv(&self) -> &AtomicLsnVector {
        &self.read_lv
    }

    /// Readers that have raised this tuple's read vector but not yet
    /// published their final one (optimistic commit only).
    pub fn pending_readers(&self) -> &AtomicU32 {
        &self.pending_readers
    }
}

/// A pinned reference to a lock-table entry. Entries with live handles are
/// never evicted.
#[derive(Clone)]
pub struct MetaHandle(Arc<TupleMeta>);

impl std::ops::Deref for MetaHandle {
    type Target = TupleMeta;
    fn deref(&self) -> &TupleMeta {
        &self.0
    }
}

impl MetaHandle {
    pub fn pin_count(&self) -> usize {
        Arc::strong_count(&self.0) - 1
    }

    pub fn same_entry(&self, other: &MetaHandle) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

type Bucket = HashMap<RowKey, Arc<TupleMeta>>;

pub struct LockTable {
    buckets: Box<[Mutex<Bucket>]>,
    delta: u64,
    chain_limit: usize,
    plv: Arc<AtomicLsnVector>,
    hasher: std::collections::hash_map::RandomState,
}

impl LockTable {
    /// `delta == u64::MAX` disables eviction.
    pub fn new(buckets: usize, delta: u64, plv: Arc<AtomicLsnVector>) -> Self {
        LockTable {
            buckets: (0..buckets.max(1)).map(|_| Mutex::new(HashMap::new())).collect(),
            delta,
            chain_limit: DEFAULT_CHAIN_LIMIT,
            plv,
            hasher: Default::default(),
        }
    }

    pub fn with_chain_limit(mut self, limit: usize) -> Self {
        self.chain_limit = limit;
        self
    }

    pub fn delta(&self) -> u64 {
        self.delta
    }

    fn bucket(&self, key: &RowKey) -> &Mutex<Bucket> {
        &self.buckets[self.hasher.hash_one(key) as usize % self.buckets.len()]
    }

    /// Vector given to a tuple entering the table: `max(PLV - delta, 0)`.
    pub fn initial_lv(&self, plv: &LsnVector) -> LsnVector {
        LsnVector::from(plv.as_slice().iter().map(|&p| p.saturating_sub(self.delta)).collect::<Vec<_>>())
    }

    pub fn get_or_insert_meta(&self, key: RowKey) -> MetaHandle {
        let mut bucket = self.bucket(&key).lock();
        if let Some(meta) = bucket.get(&key) {
            return MetaHandle(meta.clone());
        }
        let plv = self.plv.snapshot();
        if bucket.len() >= self.chain_limit {
            bucket.retain(|_, m| !self.evictable(m, &plv));
        }
        let meta = Arc::new(TupleMeta::new(&self.initial_lv(&plv)));
        bucket.insert(key, meta.clone());
        MetaHandle(meta)
    }

    pub fn get_meta(&self, key: RowKey) -> Option<MetaHandle> {
        self.bucket(&key).lock().get(&key).cloned().map(MetaHandle)
    }

    fn evictable(&self, meta: &Arc<TupleMeta>, plv: &LsnVector) -> bool {
        if self.delta == u64::MAX {
            return false;
        }
        if Arc::strong_count(meta) > 1 || meta.pending_readers.load(Ordering::Acquire) > 0 {
            return false;
        }
        let Some(state) = meta.state.try_lock() else { return false };
        if state.lock != LockState::Free {
            return false;
        }
        let old_enough = |lv: &LsnVector| {
            plv.as_slice().iter().zip(lv.as_slice()).all(|(&p, &v)| {
                v.checked_add(self.delta).is_some_and(|bound| p >= bound)
            })
        };
        old_enough(&state.write_lv) && old_enough(&meta.read_lv.snapshot())
    }

    /// Removes `key`'s entry iff it is unlocked, unpinned and both of its
    /// vectors trail the persistent vector by at least `delta` on every dim.
    pub fn try_evict(&self, key: RowKey) -> bool {
        let mut bucket = self.bucket(&key).lock();
        let plv = self.plv.snapshot();
        match bucket.get(&key) {
            Some(meta) if self.evictable(meta, &plv) => {
                bucket.remove(&key);
                true
            }
            _ => false,
        }
    }

    /// One pass over every bucket; returns the number of evicted entries.
    pub fn sweep(&self) -> usize {
        let plv = self.plv.snapshot();
        let mut evicted = 0;
        for bucket in self.buckets.iter() {
            let mut bucket = bucket.lock();
            let before = bucket.len();
            bucket.retain(|_, m| !self.evictable(m, &plv));
            evicted += before - bucket.len();
        }
        evicted
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(|b| b.lock().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn lv(v: &[u64]) -> LsnVector {
        LsnVector::from_slice(v)
    }

    fn table() -> Table {
        Table::new(TableSchema { id: 0, name: "t".into(), row_width: 4 })
    }

    fn lock_table(plv: &[u64], delta: u64) -> (Arc<AtomicLsnVector>, LockTable) {
        let plv = Arc::new(AtomicLsnVector::from_lv(&lv(plv)));
        (plv.clone(), LockTable::new(16, delta, plv))
    }

    #[test]
    fn fresh_meta_starts_delta_below_plv() {
        let (_, lt) = lock_table(&[100, 200], 50);
        let m = lt.get_or_insert_meta(RowKey::new(0, 1));
        assert_eq!(m.latch().write_lv, lv(&[50, 150]));
        assert_eq!(m.read_lv().snapshot(), lv(&[50, 150]));

        let (_, lt) = lock_table(&[10, 10], 50);
        let m = lt.get_or_insert_meta(RowKey::new(0, 1));
        assert_eq!(m.latch().write_lv, lv(&[0, 0]));
    }

    #[test]
    fn present_meta_is_returned_unchanged() {
        let (plv, lt) = lock_table(&[100, 200], 50);
        let k = RowKey::new(0, 7);
        let a = lt.get_or_insert_meta(k);
        a.latch().write_lv = lv(&[120, 180]);
        plv.store(0, 1_000);
        let b = lt.get_or_insert_meta(k);
        assert!(a.same_entry(&b));
        assert_eq!(b.latch().write_lv, lv(&[120, 180]));
        assert_eq!(b.pin_count(), 2);
    }

    #[test]
    fn eviction_rules() {
        let k = RowKey::new(0, 1);
        let (_, lt) = lock_table(&[100, 100], 50);
        {
            let m = lt.get_or_insert_meta(k);
            m.latch().write_lv = lv(&[40, 40]);
            m.read_lv().join(&lv(&[40, 40]));
        }
        // initial LV was [50, 50]; read vector joined to [50, 50] too
        assert!(lt.try_evict(k));
        assert!(lt.get_meta(k).is_none());

        let (plv, lt) = lock_table(&[0, 0], 50);
        {
            let m = lt.get_or_insert_meta(k);
            m.latch().write_lv = lv(&[40, 40]);
            m.read_lv().join(&lv(&[60, 40]));
        }
        plv.store(0, 100);
        plv.store(1, 100);
        assert!(!lt.try_evict(k), "read vector dim 0 is only 40 behind");

        let held = lt.get_or_insert_meta(RowKey::new(0, 2));
        plv.store(0, 10_000);
        plv.store(1, 10_000);
        assert!(!lt.try_evict(RowKey::new(0, 2)), "pinned");
        assert!(held.latch().try_acquire(1, LockMode::Write, None));
        drop(held);
        assert!(!lt.try_evict(RowKey::new(0, 2)), "locked");
        lt.get_meta(RowKey::new(0, 2)).unwrap().latch().release(1, LockMode::Write);
        assert!(lt.try_evict(RowKey::new(0, 2)));
    }

    #[test]
    fn infinite_delta_never_evicts() {
        let (_, lt) = lock_table(&[u64::MAX, u64::MAX], u64::MAX);
        lt.get_or_insert_meta(RowKey::new(0, 1));
        assert!(!lt.try_evict(RowKey::new(0, 1)));
        assert_eq!(lt.sweep(), 0);
    }

    #[test]
    fn reinsertion_dominates_evicted_vectors() {
        let (plv, lt) = lock_table(&[0, 0], 10);
        let k = RowKey::new(0, 3);
        {
            let m = lt.get_or_insert_meta(k);
            m.latch().write_lv = lv(&[5, 7]);
        }
        plv.store(0, 40);
        plv.store(1, 40);
        assert!(lt.try_evict(k));
        plv.store(0, 41);
        let m = lt.get_or_insert_meta(k);
        let w = m.latch().write_lv.clone();
        assert!(lv(&[5, 7]).leq(&w));
        assert!(w.leq(&plv.snapshot()));
    }

    #[test]
    fn lock_modes() {
        let mut s = MetaState { lock: LockState::Free, write_lv: LsnVector::zeros(1) };
        assert!(s.try_acquire(1, LockMode::Read, None));
        assert!(s.try_acquire(2, LockMode::Read, None));
        assert!(!s.try_acquire(1, LockMode::Write, Some(LockMode::Read)), "upgrade with two readers");
        s.release(2, LockMode::Read);
        assert!(s.try_acquire(1, LockMode::Write, Some(LockMode::Read)));
        assert!(!s.try_acquire(3, LockMode::Read, None));
        assert!(s.locked_by_other(3));
        s.release(1, LockMode::Write);
        assert_eq!(s.lock, LockState::Free);
    }

    #[test]
    fn row_read_write() {
        let t = table();
        t.index_insert(1, b"aaaa").unwrap();
        t.write_row(1, b"bbbb").unwrap();
        assert_eq!(t.read_row(1).unwrap(), b"bbbb");
        t.write_row(1, b"cccc").unwrap();
        assert_eq!(t.read_row(1).unwrap(), b"cccc");
        assert_eq!(t.read_row(2), Err(StorageError::NoSuchRow(RowKey::new(0, 2))));
        assert!(matches!(t.write_row(1, b"x"), Err(StorageError::WidthMismatch { .. })));
    }

    #[test]
    fn index_insert_remove() {
        let t = table();
        t.index_insert(5, b"aaaa").unwrap();
        assert_eq!(t.range_scan(5, 5), vec![5]);
        assert_eq!(t.index_insert(5, b"aaaa").err(), Some(StorageError::DuplicateKey(RowKey::new(0, 5))));
        t.index_remove(5).unwrap();
        assert!(t.range_scan(5, 5).is_empty());
        assert_eq!(t.index_remove(5), Err(StorageError::NoSuchRow(RowKey::new(0, 5))));
    }

    #[test]
    fn range_scan_examples() {
        let t = table();
        for k in [1, 3, 5] {
            t.index_insert(k, b"xxxx").unwrap();
        }
        assert_eq!(t.range_scan(2, 5), vec![3, 5]);
        assert!(t.range_scan(6, 2).is_empty());
    }

    #[test]
    fn range_scan_matches_filter_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = table();
        let mut keys = Vec::new();
        while keys.len() < 1000 {
            let k = rng.random_range(0..100_000u64);
            if t.index_insert(k, b"zzzz").is_ok() {
                keys.push(k);
            }
        }
        for _ in 0..200 {
            let a = rng.random_range(0..100_000u64);
            let b = rng.random_range(0..100_000u64);
            let mut oracle: Vec<u64> = keys.iter().copied().filter(|&k| a <= k && k <= b).collect();
            oracle.sort_unstable();
            assert_eq!(t.range_scan(a, b), oracle);
        }
    }

    #[test]
    fn digest_depends_on_content_only() {
        let s = [TableSchema { id: 0, name: "t".into(), row_width: 2 }];
        let a = Database::new(&s);
        let b = Database::new(&s);
        a.table(0).unwrap().upsert(1, b"ab").unwrap();
        a.table(0).unwrap().upsert(2, b"cd").unwrap();
        b.table(0).unwrap().upsert(2, b"cd").unwrap();
        b.table(0).unwrap().upsert(1, b"xx").unwrap();
        assert_ne!(a.digest(), b.digest());
        b.table(0).unwrap().upsert(1, b"ab").unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}

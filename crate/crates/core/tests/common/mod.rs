#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use taurus_core::engine::{CcMode, Engine, EngineConfig, EngineHooks, LoggingMode};
use taurus_core::manifest::Manifest;
use taurus_core::storage::{Database, TableSchema};
use taurus_core::txn::{Procedure, Registry, TxnError, TxnOps};

pub const T: u32 = 0;

pub fn schema() -> Vec<TableSchema> {
    vec![TableSchema { id: T, name: "cells".into(), row_width: 8 }]
}

/// `rows` cells holding zero.
pub fn database(rows: u64) -> Arc<Database> {
    let db = Database::new(&schema());
    let t = db.table(T).unwrap();
    for k in 0..rows {
        t.index_insert(k, &0u64.to_le_bytes()).unwrap();
    }
    Arc::new(db)
}

pub fn get(ops: &mut dyn TxnOps, key: u64) -> Result<u64, TxnError> {
    Ok(u64::from_le_bytes(ops.read_for_update(T, key)?.try_into().unwrap()))
}

/// For each `(key, x)` in params: `cell = cell * 31 + x`. Order sensitive,
/// so a replay in the wrong order changes the result.
pub struct Mix;

impl Procedure for Mix {
    fn name(&self) -> &str {
        "mix"
    }

    fn execute(&self, ops: &mut dyn TxnOps, params: &[u8]) -> Result<(), TxnError> {
        for pair in params.chunks_exact(16) {
            let key = u64::from_le_bytes(pair[..8].try_into().unwrap());
            let x = u64::from_le_bytes(pair[8..].try_into().unwrap());
            let v = get(ops, key)?;
            ops.write(T, key, &v.wrapping_mul(31).wrapping_add(x).to_le_bytes())?;
        }
        Ok(())
    }
}

pub fn mix_params(pairs: &[(u64, u64)]) -> Vec<u8> {
    pairs.iter().flat_map(|(k, x)| k.to_le_bytes().into_iter().chain(x.to_le_bytes())).collect()
}

pub fn registry() -> Arc<Registry> {
    let mut r = Registry::new("test-1");
    r.register(Arc::new(Mix));
    Arc::new(r)
}

pub fn config(dir: &Path, n: usize, p: usize, cc: CcMode, logging: LoggingMode) -> EngineConfig {
    let mut cfg = EngineConfig::new(dir, n, p);
    cfg.cc = cc;
    cfg.logging = logging;
    cfg.log.sync = false;
    cfg.log.buffer_bytes = 1 << 16;
    cfg
}

pub fn manual(dir: &Path, n: usize, cc: CcMode, delta: u64) -> Engine {
    let mut cfg = config(dir, n, 1, cc, LoggingMode::Data);
    cfg.delta = delta;
    cfg.log.rho = u64::MAX;
    Engine::start_manual(cfg, database(16), registry(), EngineHooks::default()).unwrap()
}

pub fn write_manifest(dir: &Path, cfg: &EngineConfig, rows: u64) {
    Manifest {
        n_logs: cfg.log.n_logs,
        workers_per_log: cfg.log.workers_per_log,
        logging: cfg.logging,
        cc: cfg.cc,
        rho: cfg.log.rho,
        delta: cfg.delta,
        registry_version: registry().version().into(),
        tables: schema(),
        workload: serde_json::json!({ "rows": rows }),
    }
    .write(dir)
    .unwrap();
}

//! Workload descriptions and per-worker transaction generators.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use taurus_core::storage::{Database, TableSchema};
use taurus_core::txn::Registry;

use crate::{tpcc, ycsb};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    Ycsb,
    Tpcc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    /// YCSB table size.
    pub rows: u64,
    /// YCSB row width in bytes.
    pub row_width: usize,
    pub theta: f64,
    /// YCSB accesses per transaction.
    pub txn_size: usize,
    pub read_fraction: f64,
    pub warehouses: u32,
    /// Share of Payment in the TPC-C mix; the rest is New-Order.
    pub payment_fraction: f64,
    pub items: u32,
    pub customers_per_district: u32,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::Ycsb,
            rows: 100_000,
            row_width: 1000,
            theta: 0.6,
            txn_size: 2,
            read_fraction: 0.5,
            warehouses: 80,
            payment_fraction: 0.5,
            items: 10_000,
            customers_per_district: 300,
            seed: 1,
        }
    }
}

/// Produces the `(procedure, params)` stream of one worker.
pub trait TxnSource: Send {
    fn next_txn(&mut self) -> (u32, Vec<u8>);
}

impl WorkloadSpec {
    pub fn ycsb(rows: u64, theta: f64, seed: u64) -> Self {
        WorkloadSpec { rows, theta, seed, ..Default::default() }
    }

    pub fn tpcc(warehouses: u32, seed: u64) -> Self {
        WorkloadSpec { kind: WorkloadKind::Tpcc, warehouses, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let frac = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(format!("{name} must be in [0, 1], got {x}"))
            }
        };
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(format!("theta must be >= 0, got {}", self.theta));
        }
        frac("read fraction", self.read_fraction)?;
        frac("payment fraction", self.payment_fraction)?;
        match self.kind {
            WorkloadKind::Ycsb => {
                if self.rows == 0 || self.txn_size == 0 || self.txn_size as u64 > self.rows {
                    return Err("ycsb needs rows >= txn size >= 1".into());
                }
                if self.row_width < ycsb::MIN_ROW_WIDTH {
                    return Err(format!("row width must be at least {} bytes", ycsb::MIN_ROW_WIDTH));
                }
            }
            WorkloadKind::Tpcc => {
                if self.warehouses == 0 || self.warehouses >= 1 << 12 {
                    return Err("warehouses must be in 1..4096".into());
                }
                if self.items < 16 || self.items >= 1 << 20 || self.customers_per_district == 0 {
                    return Err("tpcc needs 16 <= items < 2^20 and at least one customer".into());
                }
            }
        }
        Ok(())
    }

    pub fn schemas(&self) -> Vec<TableSchema> {
        match self.kind {
            WorkloadKind::Ycsb => ycsb::schemas(self),
            WorkloadKind::Tpcc => tpcc::schemas(),
        }
    }

    pub fn registry(&self) -> Arc<Registry> {
        Arc::new(match self.kind {
            WorkloadKind::Ycsb => ycsb::registry(),
            WorkloadKind::Tpcc => tpcc::registry(),
        })
    }

    /// The initial database. Identical for identical specs.
    pub fn load(&self) -> Database {
        match self.kind {
            WorkloadKind::Ycsb => ycsb::load(self),
            WorkloadKind::Tpcc => tpcc::load(self),
        }
    }

    pub fn source(&self, worker: usize) -> Box<dyn TxnSource> {
        match self.kind {
            WorkloadKind::Ycsb => Box::new(ycsb::Generator::new(self, worker)),
            WorkloadKind::Tpcc => Box::new(tpcc::Generator::new(self, worker)),
        }
    }

    /// Workload-level consistency conditions on a database state.
    pub fn check(&self, db: &Database) -> Result<(), String> {
        match self.kind {
            WorkloadKind::Ycsb => Ok(()),
            WorkloadKind::Tpcc => tpcc::check(self, db),
        }
    }
}

pub(crate) fn put_u64(buf: &mut [u8], field: usize, v: u64) {
    buf[field * 8..field * 8 + 8].copy_from_slice(&v.to_le_bytes());
}

pub(crate) fn get_u64(buf: &[u8], field: usize) -> u64 {
    u64::from_le_bytes(buf[field * 8..field * 8 + 8].try_into().unwrap())
}

/// Little-endian `u64` parameter reader shared by the procedures.
pub(crate) struct Params<'a>(pub &'a [u8]);

impl Params<'_> {
    pub fn u64(&mut self) -> Result<u64, taurus_core::txn::TxnError> {
        if self.0.len() < 8 {
            return Err(taurus_core::txn::TxnError::User("truncated parameters".into()));
        }
        let (a, b) = self.0.split_at(8);
        self.0 = b;
        Ok(u64::from_le_bytes(a.try_into().unwrap()))
    }
}

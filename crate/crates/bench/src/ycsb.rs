//! YCSB-style single-table workload: each transaction reads or
//! read-modify-writes a few Zipf-distributed rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use std::sync::Arc;
use taurus_core::storage::{Database, TableSchema};
use taurus_core::txn::{Procedure, Registry, TxnError, TxnOps};

use crate::workload::{get_u64, put_u64, Params, TxnSource, WorkloadSpec};

pub const TABLE: u32 = 0;
pub const REGISTRY_VERSION: &str = "ycsb-1";
/// Counter plus last written value.
pub const MIN_ROW_WIDTH: usize = 16;

const OP_READ: u64 = 0;
const OP_UPDATE: u64 = 1;

pub fn schemas(spec: &WorkloadSpec) -> Vec<TableSchema> {
    vec![TableSchema { id: TABLE, name: "usertable".into(), row_width: spec.row_width }]
}

pub fn registry() -> Registry {
    let mut r = Registry::new(REGISTRY_VERSION);
    r.register(Arc::new(Access));
    r
}

pub fn load(spec: &WorkloadSpec) -> Database {
    let db = Database::new(&schemas(spec));
    let t = db.table(TABLE).unwrap();
    let mut row = vec![0u8; spec.row_width];
    for k in 0..spec.rows {
        put_u64(&mut row, 1, k);
        t.index_insert(k, &row).unwrap();
    }
    db
}

/// Params: repeated `(key, op, value)`. An update bumps the row's counter
/// and stores `value` in its second field.
pub struct Access;

impl Procedure for Access {
    fn name(&self) -> &str {
        "ycsb-access"
    }

    fn execute(&self, ops: &mut dyn TxnOps, params: &[u8]) -> Result<(), TxnError> {
        let mut p = Params(params);
        while !p.0.is_empty() {
            let (key, op, value) = (p.u64()?, p.u64()?, p.u64()?);
            if op == OP_READ {
                ops.read(TABLE, key)?;
            } else {
                let mut row = ops.read_for_update(TABLE, key)?;
                let n = get_u64(&row, 0);
                put_u64(&mut row, 0, n + 1);
                put_u64(&mut row, 1, value);
                ops.write(TABLE, key, &row)?;
            }
        }
        Ok(())
    }
}

pub struct Generator {
    rng: ChaCha8Rng,
    zipf: Zipf<f64>,
    txn_size: usize,
    read_fraction: f64,
    keys: Vec<u64>,
}

impl Generator {
    pub fn new(spec: &WorkloadSpec, worker: usize) -> Self {
        Generator {
            rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ worker as u64),
            zipf: Zipf::new(spec.rows as f64, spec.theta).expect("validated theta"),
            txn_size: spec.txn_size,
            read_fraction: spec.read_fraction,
            keys: Vec::with_capacity(spec.txn_size),
        }
    }

    pub fn key(&mut self) -> u64 {
        self.zipf.sample(&mut self.rng) as u64 - 1
    }
}

impl TxnSource for Generator {
    fn next_txn(&mut self) -> (u32, Vec<u8>) {
        self.keys.clear();
        while self.keys.len() < self.txn_size {
            let k = self.key();
            if !self.keys.contains(&k) {
                self.keys.push(k);
            }
        }
        let mut params = Vec::with_capacity(24 * self.txn_size);
        for i in 0..self.txn_size {
            let op = if self.rng.random::<f64>() < self.read_fraction { OP_READ } else { OP_UPDATE };
            let value = if op == OP_UPDATE { self.rng.random::<u64>() } else { 0 };
            for x in [self.keys[i], op, value] {
                params.extend_from_slice(&x.to_le_bytes());
            }
        }
        (0, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_keys_pass_chi_square() {
        let spec = WorkloadSpec { rows: 50, theta: 0.0, ..WorkloadSpec::default() };
        let mut g = Generator::new(&spec, 0);
        let n = 100_000;
        let mut hist = [0u64; 50];
        for _ in 0..n {
            hist[g.key() as usize] += 1;
        }
        let expect = n as f64 / 50.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expect).powi(2) / expect).sum();
        // 49 degrees of freedom; the 0.999 quantile is about 85.4
        assert!(chi2 < 85.4, "chi2 = {chi2}");
    }

    #[test]
    fn skew_concentrates_on_low_keys() {
        let spec = WorkloadSpec { rows: 10_000, theta: 0.99, ..WorkloadSpec::default() };
        let mut g = Generator::new(&spec, 0);
        let hot = (0..20_000).filter(|_| g.key() < 100).count();
        assert!(hot > 20_000 / 3, "{hot}");
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = WorkloadSpec::ycsb(1000, 0.8, 42);
        let a: Vec<_> = {
            let mut g = Generator::new(&spec, 3);
            (0..100).map(|_| g.next_txn()).collect()
        };
        let mut g = Generator::new(&spec, 3);
        assert!(a.into_iter().all(|t| t == g.next_txn()));
    }
}

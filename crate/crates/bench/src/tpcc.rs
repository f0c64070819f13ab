//! Desk-scale TPC-C with the Payment and New-Order transactions.
//!
//! Rows are fixed-width arrays of little-endian `u64` fields. There is no
//! initial order history, so every order, new-order and order-line row is
//! produced by a logged New-Order.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taurus_core::storage::{Database, TableSchema};
use taurus_core::txn::{Procedure, Registry, TxnError, TxnOps};

use crate::workload::{get_u64, put_u64, Params, TxnSource, WorkloadSpec};

pub const REGISTRY_VERSION: &str = "tpcc-1";

pub const WAREHOUSE: u32 = 0;
pub const DISTRICT: u32 = 1;
pub const CUSTOMER: u32 = 2;
pub const HISTORY: u32 = 3;
pub const NEW_ORDER: u32 = 4;
pub const ORDER: u32 = 5;
pub const ORDER_LINE: u32 = 6;
pub const ITEM: u32 = 7;
pub const STOCK: u32 = 8;

pub const DISTRICTS: u64 = 10;
pub const PAYMENT: u32 = 0;
pub const NEW_ORDER_TXN: u32 = 1;

const WAREHOUSE_YTD: u64 = 30_000_000;
const DISTRICT_YTD: u64 = 3_000_000;

// field indices
const W_YTD: usize = 0;
const W_TAX: usize = 1;
const D_YTD: usize = 0;
const D_TAX: usize = 1;
const D_NEXT_O_ID: usize = 2;
const D_PAYMENTS: usize = 3;
const C_BALANCE: usize = 0;
const C_YTD: usize = 1;
const C_PAYMENTS: usize = 2;
const C_DISCOUNT: usize = 3;
const O_CUSTOMER: usize = 0;
const O_LINES: usize = 1;
const I_PRICE: usize = 0;
const S_QUANTITY: usize = 0;
const S_YTD: usize = 1;
const S_ORDERS: usize = 2;
const S_REMOTE: usize = 3;

pub fn district_key(w: u64, d: u64) -> u64 {
    w * DISTRICTS + d
}

pub fn customer_key(district: u64, c: u64) -> u64 {
    (district << 16) | c
}

pub fn order_key(district: u64, o_id: u64) -> u64 {
    (district << 32) | o_id
}

pub fn order_line_key(district: u64, o_id: u64, line: u64) -> u64 {
    (district << 36) | (o_id << 4) | line
}

pub fn history_key(district: u64, n: u64) -> u64 {
    (district << 32) | n
}

pub fn stock_key(w: u64, item: u64) -> u64 {
    (w << 20) | item
}

pub fn schemas() -> Vec<TableSchema> {
    [
        (WAREHOUSE, "warehouse", 64),
        (DISTRICT, "district", 64),
        (CUSTOMER, "customer", 96),
        (HISTORY, "history", 48),
        (NEW_ORDER, "new_order", 16),
        (ORDER, "orders", 32),
        (ORDER_LINE, "order_line", 48),
        (ITEM, "item", 32),
        (STOCK, "stock", 64),
    ]
    .into_iter()
    .map(|(id, name, row_width)| TableSchema { id, name: name.into(), row_width })
    .collect()
}

fn width(t: u32) -> usize {
    schemas()[t as usize].row_width
}

pub fn registry() -> Registry {
    let mut r = Registry::new(REGISTRY_VERSION);
    r.register(Arc::new(Payment));
    r.register(Arc::new(NewOrder));
    r
}

pub fn load(spec: &WorkloadSpec) -> Database {
    let db = Database::new(&schemas());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7470_6363);
    let row = |t: u32, fields: &[(usize, u64)]| {
        let mut r = vec![0u8; width(t)];
        for &(f, v) in fields {
            put_u64(&mut r, f, v);
        }
        r
    };
    let items = db.table(ITEM).unwrap();
    for i in 0..spec.items as u64 {
        items.index_insert(i, &row(ITEM, &[(I_PRICE, rng.random_range(100..10_000))])).unwrap();
    }
    for w in 0..spec.warehouses as u64 {
        db.table(WAREHOUSE)
            .unwrap()
            .index_insert(w, &row(WAREHOUSE, &[(W_YTD, WAREHOUSE_YTD), (W_TAX, rng.random_range(0..2000))]))
            .unwrap();
        for d in 0..DISTRICTS {
            let dk = district_key(w, d);
            db.table(DISTRICT)
                .unwrap()
                .index_insert(
                    dk,
                    &row(DISTRICT, &[(D_YTD, DISTRICT_YTD), (D_TAX, rng.random_range(0..2000)), (D_NEXT_O_ID, 1)]),
                )
                .unwrap();
            for c in 0..spec.customers_per_district as u64 {
                db.table(CUSTOMER)
                    .unwrap()
                    .index_insert(customer_key(dk, c), &row(CUSTOMER, &[(C_DISCOUNT, rng.random_range(0..5000))]))
                    .unwrap();
            }
        }
        for i in 0..spec.items as u64 {
            db.table(STOCK)
                .unwrap()
                .index_insert(stock_key(w, i), &row(STOCK, &[(S_QUANTITY, rng.random_range(10..=100))]))
                .unwrap();
        }
    }
    db
}

fn bump(row: &mut [u8], field: usize, by: u64) {
    let v = get_u64(row, field).wrapping_add(by);
    put_u64(row, field, v);
}

/// Params: `w, d, customer w, customer d, customer id, amount`.
pub struct Payment;

impl Procedure for Payment {
    fn name(&self) -> &str {
        "payment"
    }

    fn execute(&self, ops: &mut dyn TxnOps, params: &[u8]) -> Result<(), TxnError> {
        let mut p = Params(params);
        let (w, d, cw, cd, c, amount) = (p.u64()?, p.u64()?, p.u64()?, p.u64()?, p.u64()?, p.u64()?);
        let mut wh = ops.read_for_update(WAREHOUSE, w)?;
        bump(&mut wh, W_YTD, amount);
        ops.write(WAREHOUSE, w, &wh)?;

        let dk = district_key(w, d);
        let mut dist = ops.read_for_update(DISTRICT, dk)?;
        bump(&mut dist, D_YTD, amount);
        let n = get_u64(&dist, D_PAYMENTS);
        put_u64(&mut dist, D_PAYMENTS, n + 1);
        ops.write(DISTRICT, dk, &dist)?;

        let ck = customer_key(district_key(cw, cd), c);
        let mut cust = ops.read_for_update(CUSTOMER, ck)?;
        bump(&mut cust, C_BALANCE, amount.wrapping_neg());
        bump(&mut cust, C_YTD, amount);
        bump(&mut cust, C_PAYMENTS, 1);
        ops.write(CUSTOMER, ck, &cust)?;

        let mut h = vec![0u8; width(HISTORY)];
        for (f, v) in [ck, amount, w, d].into_iter().enumerate() {
            put_u64(&mut h, f, v);
        }
        ops.insert(HISTORY, history_key(dk, n), &h)
    }
}

/// Params: `w, d, customer id, line count, then (item, supply w, quantity)`
/// per line. An item id equal to the item count is the rollback marker.
pub struct NewOrder;

impl Procedure for NewOrder {
    fn name(&self) -> &str {
        "new-order"
    }

    fn execute(&self, ops: &mut dyn TxnOps, params: &[u8]) -> Result<(), TxnError> {
        let mut p = Params(params);
        let (w, d, c, lines) = (p.u64()?, p.u64()?, p.u64()?, p.u64()?);
        let tax = get_u64(&ops.read(WAREHOUSE, w)?, W_TAX);
        let dk = district_key(w, d);
        let mut dist = ops.read_for_update(DISTRICT, dk)?;
        let o_id = get_u64(&dist, D_NEXT_O_ID);
        put_u64(&mut dist, D_NEXT_O_ID, o_id + 1);
        ops.write(DISTRICT, dk, &dist)?;
        let discount = get_u64(&ops.read(CUSTOMER, customer_key(dk, c))?, C_DISCOUNT);

        for line in 0..lines {
            let (item, supply, qty) = (p.u64()?, p.u64()?, p.u64()?);
            let price = match ops.read(ITEM, item) {
                Ok(r) => get_u64(&r, I_PRICE),
                Err(TxnError::NotFound(_)) => return Err(TxnError::User("invalid item".into())),
                Err(e) => return Err(e),
            };
            let sk = stock_key(supply, item);
            let mut st = ops.read_for_update(STOCK, sk)?;
            let q = get_u64(&st, S_QUANTITY);
            put_u64(&mut st, S_QUANTITY, if q >= qty + 10 { q - qty } else { q + 91 - qty });
            bump(&mut st, S_YTD, qty);
            bump(&mut st, S_ORDERS, 1);
            if supply != w {
                bump(&mut st, S_REMOTE, 1);
            }
            ops.write(STOCK, sk, &st)?;
            let amount = qty * price * (10_000 + tax) * (10_000 - discount) / 100_000_000;
            let mut ol = vec![0u8; width(ORDER_LINE)];
            for (f, v) in [item, supply, qty, amount].into_iter().enumerate() {
                put_u64(&mut ol, f, v);
            }
            ops.insert(ORDER_LINE, order_line_key(dk, o_id, line), &ol)?;
        }
        let ok = order_key(dk, o_id);
        let mut order = vec![0u8; width(ORDER)];
        put_u64(&mut order, O_CUSTOMER, c);
        put_u64(&mut order, O_LINES, lines);
        ops.insert(ORDER, ok, &order)?;
        let mut no = vec![0u8; width(NEW_ORDER)];
        put_u64(&mut no, 0, ok);
        ops.insert(NEW_ORDER, ok, &no)
    }
}

pub struct Generator {
    rng: ChaCha8Rng,
    warehouses: u64,
    items: u64,
    customers: u64,
    payment_fraction: f64,
}

impl Generator {
    pub fn new(spec: &WorkloadSpec, worker: usize) -> Self {
        Generator {
            rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ worker as u64),
            warehouses: spec.warehouses as u64,
            items: spec.items as u64,
            customers: spec.customers_per_district as u64,
            payment_fraction: spec.payment_fraction,
        }
    }

    fn other_warehouse(&mut self, w: u64) -> u64 {
        if self.warehouses == 1 {
            return w;
        }
        let o = self.rng.random_range(0..self.warehouses - 1);
        if o >= w {
            o + 1
        } else {
            o
        }
    }
}

impl TxnSource for Generator {
    fn next_txn(&mut self) -> (u32, Vec<u8>) {
        let w = self.rng.random_range(0..self.warehouses);
        let d = self.rng.random_range(0..DISTRICTS);
        let mut out = Vec::with_capacity(64);
        let push = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
        if self.rng.random::<f64>() < self.payment_fraction {
            let (cw, cd) = if self.rng.random_range(0..100) < 85 {
                (w, d)
            } else {
                (self.other_warehouse(w), self.rng.random_range(0..DISTRICTS))
            };
            let c = self.rng.random_range(0..self.customers);
            let amount = self.rng.random_range(100..=500_000);
            for v in [w, d, cw, cd, c, amount] {
                push(&mut out, v);
            }
            (PAYMENT, out)
        } else {
            let c = self.rng.random_range(0..self.customers);
            let lines = self.rng.random_range(5..=15u64);
            let rollback = self.rng.random_range(0..100) == 0;
            let mut chosen = Vec::with_capacity(lines as usize);
            while (chosen.len() as u64) < lines {
                let i = self.rng.random_range(0..self.items);
                if !chosen.contains(&i) {
                    chosen.push(i);
                }
            }
            if rollback {
                *chosen.last_mut().unwrap() = self.items;
            }
            let lines_spec: Vec<(u64, u64, u64)> = chosen
                .iter()
                .map(|&i| {
                    let supply = if self.rng.random_range(0..100) == 0 { self.other_warehouse(w) } else { w };
                    (i, supply, self.rng.random_range(1..=10))
                })
                .collect();
            for v in [w, d, c, lines] {
                push(&mut out, v);
            }
            for (i, s, q) in lines_spec {
                for v in [i, s, q] {
                    push(&mut out, v);
                }
            }
            (NEW_ORDER_TXN, out)
        }
    }
}

fn rows(db: &Database, table: u32, low: u64, high: u64) -> Vec<(u64, Vec<u8>)> {
    let t = db.table(table).unwrap();
    t.range_scan(low, high).into_iter().filter_map(|k| t.row(k).map(|r| (k, r.read()))).collect()
}

/// TPC-C style consistency conditions for the Payment/New-Order subset.
pub fn check(spec: &WorkloadSpec, db: &Database) -> Result<(), String> {
    let mut history_total = 0u64;
    for w in 0..spec.warehouses as u64 {
        let wh = db.table(WAREHOUSE).unwrap().read_row(w).map_err(|e| e.to_string())?;
        let mut district_ytd = 0u64;
        for d in 0..DISTRICTS {
            let dk = district_key(w, d);
            let dist = db.table(DISTRICT).unwrap().read_row(dk).map_err(|e| e.to_string())?;
            district_ytd += get_u64(&dist, D_YTD) - DISTRICT_YTD;
            let next = get_u64(&dist, D_NEXT_O_ID);
            let orders = rows(db, ORDER, order_key(dk, 0), order_key(dk, u32::MAX as u64));
            if orders.len() as u64 != next - 1 || orders.last().is_some_and(|(k, _)| *k != order_key(dk, next - 1)) {
                return Err(format!("district {dk}: next order id {next} but {} orders", orders.len()));
            }
            let new_orders = db.table(NEW_ORDER).unwrap().range_scan(order_key(dk, 0), order_key(dk, u32::MAX as u64));
            if new_orders.len() != orders.len() {
                return Err(format!("district {dk}: {} orders but {} new-orders", orders.len(), new_orders.len()));
            }
            let line_total: u64 = orders.iter().map(|(_, o)| get_u64(o, O_LINES)).sum();
            let lines = db.table(ORDER_LINE).unwrap().range_scan(order_line_key(dk, 0, 0), order_line_key(dk + 1, 0, 0) - 1);
            if lines.len() as u64 != line_total {
                return Err(format!("district {dk}: orders list {line_total} lines, found {}", lines.len()));
            }
            let payments = get_u64(&dist, D_PAYMENTS);
            let hist = db.table(HISTORY).unwrap().range_scan(history_key(dk, 0), history_key(dk, u32::MAX as u64));
            if hist.len() as u64 != payments {
                return Err(format!("district {dk}: {payments} payments but {} history rows", hist.len()));
            }
            history_total += payments;
        }
        if get_u64(&wh, W_YTD) - WAREHOUSE_YTD != district_ytd {
            return Err(format!("warehouse {w}: ytd does not match its districts"));
        }
    }
    let customer_payments: u64 = rows(db, CUSTOMER, 0, u64::MAX).iter().map(|(_, c)| get_u64(c, C_PAYMENTS)).sum();
    if customer_payments != history_total {
        return Err(format!("customers record {customer_payments} payments, history has {history_total}"));
    }
    Ok(())
}

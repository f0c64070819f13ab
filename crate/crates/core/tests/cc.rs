mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use common::*;
use taurus_core::engine::{CcMode, Engine, EngineHooks, LoggingMode};
use taurus_core::lsn_vector::LsnVector;
use taurus_core::storage::{LockMode, RowKey};
use taurus_core::txn::{TxnError, TxnOps};

fn lv(v: &[u64]) -> LsnVector {
    LsnVector::from_slice(v)
}

fn preset(eng: &Engine, key: u64, write: &[u64], read: &[u64]) {
    let m = eng.locks().get_or_insert_meta(RowKey::new(T, key));
    m.latch().write_lv = lv(write);
    m.read_lv().join(&lv(read));
}

fn cell(eng: &Engine, key: u64) -> u64 {
    u64::from_le_bytes(eng.db().table(T).unwrap().read_row(key).unwrap().try_into().unwrap())
}

#[test]
fn two_pl_shared_lock_joins_write_vector_only() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 2, CcMode::TwoPl, u64::MAX);
    preset(&eng, 1, &[4, 2], &[3, 7]);
    preset(&eng, 2, &[8, 6], &[5, 11]);
    let mut w = eng.worker(0);
    let mut t = w.begin_2pl();
    t.read(T, 1).unwrap();
    assert_eq!(t.lv(), &lv(&[4, 2]));
    t.lock(RowKey::new(T, 2), LockMode::Write).unwrap();
    assert_eq!(t.lv(), &lv(&[8, 11]));
    t.abort();
}

#[test]
fn two_pl_upgrade_joins_read_vector() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 2, CcMode::TwoPl, u64::MAX);
    preset(&eng, 3, &[1, 1], &[9, 2]);
    let mut w = eng.worker(0);
    let mut t = w.begin_2pl();
    t.read(T, 3).unwrap();
    assert_eq!(t.lv(), &lv(&[1, 1]));
    t.write(T, 3, &5u64.to_le_bytes()).unwrap();
    assert_eq!(t.lv(), &lv(&[9, 2]));
}

#[test]
fn two_pl_no_wait_and_abort_restores() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 2, CcMode::TwoPl, u64::MAX);
    let mut w0 = eng.worker(0);
    let mut w1 = eng.worker(1);
    let mut a = w0.begin_2pl();
    a.write(T, 4, &77u64.to_le_bytes()).unwrap();
    assert_eq!(cell(&eng, 4), 77);
    let mut b = w1.begin_2pl();
    assert_eq!(b.read(T, 4), Err(TxnError::Conflict(RowKey::new(T, 4))));
    b.abort();
    a.abort();
    assert_eq!(cell(&eng, 4), 0);
    let mut c = w1.begin_2pl();
    assert_eq!(get(&mut c, 4).unwrap(), 0);
    c.abort();
}

#[test]
fn two_pl_commit_stamps_tuples_and_acks_after_flush() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 2, CcMode::TwoPl, u64::MAX);
    let mut w = eng.worker(1);
    let mut t = w.begin_2pl();
    t.read(T, 0).unwrap();
    t.write(T, 5, &9u64.to_le_bytes()).unwrap();
    let out = t.commit().unwrap();
    let (s, e) = out.record.unwrap();
    assert_eq!(s, 0);
    assert_eq!(out.lv, lv(&[0, e]));
    let m5 = eng.locks().get_meta(RowKey::new(T, 5)).unwrap();
    assert_eq!(m5.latch().write_lv, out.lv);
    let m0 = eng.locks().get_meta(RowKey::new(T, 0)).unwrap();
    assert_eq!(m0.read_lv().snapshot(), out.lv);
    assert!(!out.ticket.is_acked());
    eng.logs().stream(0).tick().unwrap();
    assert!(!out.ticket.is_acked());
    eng.logs().stream(1).tick().unwrap();
    assert!(out.ticket.is_acked());
    assert_eq!(eng.logs().plv().snapshot(), lv(&[0, e]));
}

#[test]
fn two_pl_insert_and_delete() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 1, CcMode::TwoPl, u64::MAX);
    let mut w = eng.worker(0);
    let mut t = w.begin_2pl();
    t.insert(T, 100, &1u64.to_le_bytes()).unwrap();
    assert_eq!(t.insert(T, 3, &1u64.to_le_bytes()), Err(TxnError::Duplicate(RowKey::new(T, 3))));
    assert!(!eng.db().table(T).unwrap().contains(100));
    t.delete(T, 2).unwrap();
    assert_eq!(t.read(T, 2), Err(TxnError::NotFound(RowKey::new(T, 2))));
    let out = t.commit().unwrap();
    let table = eng.db().table(T).unwrap();
    assert!(table.contains(100) && !table.contains(2));
    let m = eng.locks().get_meta(RowKey::new(T, 100)).unwrap();
    assert_eq!(m.latch().write_lv, out.lv);

    let mut t = w.begin_2pl();
    t.insert(T, 101, &1u64.to_le_bytes()).unwrap();
    t.abort();
    assert!(!eng.db().table(T).unwrap().contains(101));
}

#[test]
fn two_pl_scan_detects_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 2, CcMode::TwoPl, u64::MAX);
    let mut w0 = eng.worker(0);
    let mut w1 = eng.worker(1);
    let mut scanner = w0.begin_2pl();
    assert_eq!(scanner.scan(T, 10, 30).unwrap().len(), 6);
    scanner.write(T, 0, &1u64.to_le_bytes()).unwrap();
    let mut ins = w1.begin_2pl();
    ins.insert(T, 20, &0u64.to_le_bytes()).unwrap();
    ins.commit().unwrap();
    assert!(matches!(scanner.commit(), Err(TxnError::Phantom { table: T, low: 10, high: 30 })));
    assert_eq!(cell(&eng, 0), 0);
}

#[test]
fn occ_validation_fails_after_concurrent_write() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 2, CcMode::Occ, u64::MAX);
    let mut w0 = eng.worker(0);
    let mut w1 = eng.worker(1);
    let mut a = w0.begin_occ();
    a.read(T, 1).unwrap();
    a.write(T, 2, &1u64.to_le_bytes()).unwrap();
    let mut b = w1.begin_occ();
    b.write(T, 1, &5u64.to_le_bytes()).unwrap();
    b.commit().unwrap();
    assert_eq!(a.commit().err(), Some(TxnError::Validation(RowKey::new(T, 1))));
    assert_eq!(cell(&eng, 2), 0);
    assert_eq!(cell(&eng, 1), 5);
}

#[test]
fn occ_duplicate_through_stale_snapshot_is_retryable() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 2, CcMode::Occ, u64::MAX);
    let mut w0 = eng.worker(0);
    let mut w1 = eng.worker(1);
    let mut a = w0.begin_occ();
    a.read(T, 1).unwrap();
    let mut b = w1.begin_occ();
    b.write(T, 1, &5u64.to_le_bytes()).unwrap();
    b.insert(T, 100, &1u64.to_le_bytes()).unwrap();
    b.commit().unwrap();
    let err = a.insert(T, 100, &2u64.to_le_bytes()).unwrap_err();
    assert_eq!(err, TxnError::Validation(RowKey::new(T, 1)));
    assert!(err.is_retryable());

    let mut c = w0.begin_occ();
    c.read(T, 1).unwrap();
    assert_eq!(c.insert(T, 100, &2u64.to_le_bytes()).err(), Some(TxnError::Duplicate(RowKey::new(T, 100))));
}

#[test]
fn occ_writes_are_invisible_until_commit() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 1, CcMode::Occ, u64::MAX);
    let mut w = eng.worker(0);
    let mut t = w.begin_occ();
    t.write(T, 3, &8u64.to_le_bytes()).unwrap();
    assert_eq!(get(&mut t, 3).unwrap(), 8);
    assert_eq!(cell(&eng, 3), 0);
    t.commit().unwrap();
    assert_eq!(cell(&eng, 3), 8);
}

#[test]
fn occ_reader_publishes_final_vector_and_writer_joins_it() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 2, CcMode::Occ, u64::MAX);
    let mut w0 = eng.worker(0);
    let mut w1 = eng.worker(1);
    let mut r = w0.begin_occ();
    r.read(T, 1).unwrap();
    r.write(T, 2, &1u64.to_le_bytes()).unwrap();
    let out = r.commit().unwrap();
    let (_, e) = out.record.unwrap();
    let m1 = eng.locks().get_meta(RowKey::new(T, 1)).unwrap();
    assert_eq!(m1.read_lv().snapshot(), lv(&[e, 0]));
    assert_eq!(m1.pending_readers().load(Ordering::SeqCst), 0);

    let mut wr = w1.begin_occ();
    wr.write(T, 1, &3u64.to_le_bytes()).unwrap();
    let out2 = wr.commit().unwrap();
    assert_eq!(out2.lv.get(0), e);
}

#[test]
fn occ_locked_tuple_blocks_writer_and_reader() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 1, CcMode::Occ, u64::MAX);
    let m = eng.locks().get_or_insert_meta(RowKey::new(T, 6));
    assert!(m.latch().try_acquire(u64::MAX, LockMode::Write, None));
    let mut w = eng.worker(0);
    let mut t = w.begin_occ();
    t.write(T, 6, &1u64.to_le_bytes()).unwrap();
    assert_eq!(t.commit().err(), Some(TxnError::Conflict(RowKey::new(T, 6))));
    let mut t = w.begin_occ();
    t.read(T, 6).unwrap();
    t.write(T, 7, &1u64.to_le_bytes()).unwrap();
    assert_eq!(t.commit().err(), Some(TxnError::Validation(RowKey::new(T, 6))));
    assert_eq!(m.pending_readers().load(Ordering::SeqCst), 0);
    m.latch().release(u64::MAX, LockMode::Write);
}

#[test]
fn read_only_ticket_waits_for_clv() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 2, CcMode::TwoPl, u64::MAX);
    let mut w0 = eng.worker(0);
    let mut w1 = eng.worker(1);
    let mut t = w1.begin_2pl();
    t.write(T, 1, &1u64.to_le_bytes()).unwrap();
    let (_, e) = t.commit().unwrap().record.unwrap();
    let mut r = w0.begin_2pl();
    r.read(T, 1).unwrap();
    let out = r.commit().unwrap();
    assert!(out.ticket.is_read_only() && out.record.is_none());
    assert_eq!(out.lv, lv(&[0, e]));
    assert!(!out.ticket.is_acked());
    eng.logs().stream(1).tick().unwrap();
    assert!(out.ticket.is_acked());
}

fn counters_under_contention(cc: CcMode) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2, 2, cc, LoggingMode::Command);
    let eng = Engine::start(cfg, database(4), registry(), EngineHooks::default()).unwrap();
    let committed = AtomicUsize::new(0);
    thread::scope(|s| {
        for id in 0..eng.n_workers() {
            let eng = &eng;
            let committed = &committed;
            s.spawn(move || {
                let mut w = eng.worker(id);
                let mut tickets = Vec::new();
                for i in 0..150u64 {
                    let params = mix_params(&[(i % 4, 1), ((i + id as u64) % 4, 0)]);
                    loop {
                        match w.execute(0, &params) {
                            Ok(out) => {
                                tickets.push(out.ticket);
                                break;
                            }
                            Err(e) if e.is_retryable() => thread::yield_now(),
                            Err(e) => panic!("{e}"),
                        }
                    }
                }
                for t in tickets {
                    assert!(t.wait(Duration::from_secs(20)));
                    committed.fetch_add(1, Ordering::Relaxed);
                }
            });
        }
    });
    assert_eq!(committed.load(Ordering::Relaxed), 4 * 150);
    eng.shutdown().unwrap();
}

#[test]
fn two_pl_concurrent_commits_all_ack() {
    counters_under_contention(CcMode::TwoPl);
}

#[test]
fn occ_concurrent_commits_all_ack() {
    counters_under_contention(CcMode::Occ);
}

#[test]
fn evicted_tuple_reenters_at_plv_minus_delta() {
    let dir = tempfile::tempdir().unwrap();
    let eng = manual(dir.path(), 1, CcMode::TwoPl, 4);
    let mut w = eng.worker(0);
    let mut t = w.begin_2pl();
    t.write(T, 1, &1u64.to_le_bytes()).unwrap();
    let e = t.commit().unwrap().lv.get(0);
    for _ in 0..3 {
        let mut t = w.begin_2pl();
        t.write(T, 2, &1u64.to_le_bytes()).unwrap();
        t.commit().unwrap();
    }
    eng.logs().stream(0).tick().unwrap();
    let plv = eng.logs().plv().get(0);
    assert!(eng.locks().try_evict(RowKey::new(T, 1)));
    let mut t = w.begin_2pl();
    t.read(T, 1).unwrap();
    assert_eq!(t.lv().get(0), plv - 4);
    assert!(t.lv().get(0) >= e);
}

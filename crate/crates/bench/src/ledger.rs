//! Side files written outside the engine while a workload runs.
//!
//! The ledger lists every acknowledged transaction and is appended only after
//! the acknowledgement. The trace lists every log reservation in the order
//! the reservations happened; its order is a valid serial order for the
//! logged transactions. Both are written with one `write` per event so their
//! contents survive a killed process.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use taurus_core::log_runtime::AckEvent;

pub const LEDGER_FILE: &str = "ledger.bin";
pub const TRACE_FILE: &str = "trace.bin";

pub fn ledger_path(dir: &Path) -> PathBuf {
    dir.join(LEDGER_FILE)
}

pub fn trace_path(dir: &Path) -> PathBuf {
    dir.join(TRACE_FILE)
}

/// One acknowledged transaction: `log u32 | dims u32 | txn u64 | start u64 |
/// end u64 | lv u64 * dims`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub txn_id: u64,
    pub log: usize,
    pub start: u64,
    pub end: u64,
    pub lv: Vec<u64>,
}

pub struct LedgerWriter {
    file: Mutex<File>,
    sync: bool,
}

impl LedgerWriter {
    pub fn create(path: &Path, sync: bool) -> io::Result<Self> {
        Ok(LedgerWriter { file: Mutex::new(File::create(path)?), sync })
    }

    pub fn append(&self, events: &[AckEvent]) -> io::Result<()> {
        let mut buf = Vec::with_capacity(events.len() * 64);
        for e in events {
            buf.extend_from_slice(&(e.log as u32).to_le_bytes());
            buf.extend_from_slice(&(e.lv.dims() as u32).to_le_bytes());
            for x in [e.txn_id, e.start, e.end] {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            for &x in e.lv.as_slice() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = self.file.lock().unwrap();
        f.write_all(&buf)?;
        if self.sync {
            f.sync_data()?;
        }
        Ok(())
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Reads a ledger, ignoring a torn final entry.
pub fn read_ledger(path: &Path) -> io::Result<Vec<LedgerEntry>> {
    let b = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + 32 <= b.len() {
        let dims = u32_at(&b, pos + 4) as usize;
        let len = 32 + 8 * dims;
        if pos + len > b.len() {
            break;
        }
        out.push(LedgerEntry {
            log: u32_at(&b, pos) as usize,
            txn_id: u64_at(&b, pos + 8),
            start: u64_at(&b, pos + 16),
            end: u64_at(&b, pos + 24),
            lv: (0..dims).map(|k| u64_at(&b, pos + 32 + 8 * k)).collect(),
        });
        pos += len;
    }
    Ok(out)
}

/// Reservation trace: `log u32 | start u64 | end u64` per append.
pub struct TraceWriter {
    file: Mutex<File>,
}

const TRACE_ENTRY: usize = 20;

impl TraceWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(TraceWriter { file: Mutex::new(OpenOptions::new().create(true).write(true).truncate(true).open(path)?) })
    }

    pub fn record(&self, log: usize, start: u64, end: u64) -> io::Result<()> {
        let mut e = [0u8; TRACE_ENTRY];
        e[..4].copy_from_slice(&(log as u32).to_le_bytes());
        e[4..12].copy_from_slice(&start.to_le_bytes());
        e[12..].copy_from_slice(&end.to_le_bytes());
        self.file.lock().unwrap().write_all(&e)
    }
}

pub fn read_trace(path: &Path) -> io::Result<Vec<(usize, u64, u64)>> {
    let b = std::fs::read(path)?;
    Ok(b.chunks_exact(TRACE_ENTRY).map(|c| (u32_at(c, 0) as usize, u64_at(c, 4), u64_at(c, 12))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use taurus_core::lsn_vector::LsnVector;

    #[test]
    fn ledger_round_trip_tolerates_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = ledger_path(dir.path());
        let w = LedgerWriter::create(&p, false).unwrap();
        let ev = |txn, log, s, e, lv: &[u64]| AckEvent { txn_id: txn, log, start: s, end: e, lv: LsnVector::from_slice(lv) };
        w.append(&[ev(1, 0, 0, 10, &[0, 4]), ev(2, 1, 4, 9, &[10, 0])]).unwrap();
        w.append(&[ev(3, 1, 9, 30, &[10, 9])]).unwrap();
        let all = read_ledger(&p).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[2], LedgerEntry { txn_id: 3, log: 1, start: 9, end: 30, lv: vec![10, 9] });
        let len = std::fs::metadata(&p).unwrap().len();
        OpenOptions::new().write(true).open(&p).unwrap().set_len(len - 3).unwrap();
        assert_eq!(read_ledger(&p).unwrap().len(), 2);
        assert!(read_ledger(&dir.path().join("missing")).unwrap().is_empty());
    }

    #[test]
    fn trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = trace_path(dir.path());
        let t = TraceWriter::create(&p).unwrap();
        t.record(2, 100, 150).unwrap();
        t.record(0, 0, 7).unwrap();
        assert_eq!(read_trace(&p).unwrap(), vec![(2, 100, 150), (0, 0, 7)]);
    }
}

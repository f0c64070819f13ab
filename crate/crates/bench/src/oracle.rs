//! Verification oracle, written against the on-disk format only.
//!
//! Nothing here calls the engine's decoder or recovery code: frames, LSN
//! vectors and anchors are parsed again, admission is computed by naive
//! iteration to a fixpoint, and the reference state is produced by replaying
//! admitted records one at a time in reservation-trace order.

use std::collections::HashMap;
use std::ops::Range;

use taurus_core::record::{decode_payload, RecordKind, TxnBody, WriteOp};
use taurus_core::storage::Database;
use taurus_core::txn::{Registry, ReplayOps};

use crate::ledger::LedgerEntry;

const HEADER: usize = 9;
const KIND_DATA: u8 = 1;
const KIND_COMMAND: u8 = 2;
const KIND_ANCHOR: u8 = 3;

#[derive(Clone, Debug)]
pub struct WalkedTxn {
    pub start: u64,
    pub end: u64,
    pub kind: u8,
    /// Vector after filling absent dimensions from the preceding anchor.
    pub lv: Vec<u64>,
    /// Encoded size of the compressed vector.
    pub lv_bytes: usize,
    pub payload: Range<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct WalkedLog {
    pub txns: Vec<WalkedTxn>,
    /// `(start, end, vector)` of every anchor.
    pub anchors: Vec<(u64, u64, Vec<u64>)>,
    /// Length of the prefix made of whole frames with valid checksums.
    pub intact: u64,
    /// Set when a checksum-valid frame could not be parsed.
    pub malformed: Option<String>,
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().unwrap())
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().unwrap())
}

/// Walks the frames of one log.
pub fn walk(buf: &[u8], dims: usize) -> WalkedLog {
    let mut out = WalkedLog::default();
    let mut anchor = vec![0u64; dims];
    let mut pos = 0usize;
    loop {
        if buf.len() - pos < HEADER {
            break;
        }
        let kind = buf[pos];
        let len = le_u32(&buf[pos + 1..]) as usize;
        let crc = le_u32(&buf[pos + 5..]);
        if !matches!(kind, KIND_DATA | KIND_COMMAND | KIND_ANCHOR) || buf.len() - pos - HEADER < len {
            break;
        }
        let body = &buf[pos + HEADER..pos + HEADER + len];
        if crc32fast::hash(body) != crc {
            break;
        }
        let (start, end) = (pos as u64, (pos + HEADER + len) as u64);
        if kind == KIND_ANCHOR {
            if len != 8 * dims {
                out.malformed = Some(format!("anchor at {start} has {len} bytes"));
                break;
            }
            anchor = body.chunks_exact(8).map(le_u64).collect();
            out.anchors.push((start, end, anchor.clone()));
        } else {
            if len < 9 {
                out.malformed = Some(format!("record at {start} too short for a vector"));
                break;
            }
            let count = body[0] as usize;
            let mask = le_u64(&body[1..]);
            let lv_bytes = 9 + 8 * count;
            if mask.count_ones() as usize != count || len < lv_bytes || (dims < 64 && mask >> dims != 0) {
                out.malformed = Some(format!("record at {start} has a bad vector header"));
                break;
            }
            let mut lv = anchor.clone();
            let mut at = 9;
            for (k, slot) in lv.iter_mut().enumerate() {
                if mask >> k & 1 == 1 {
                    *slot = le_u64(&body[at..]);
                    at += 8;
                }
            }
            out.txns.push(WalkedTxn {
                start,
                end,
                kind,
                lv,
                lv_bytes,
                payload: pos + HEADER + lv_bytes..pos + HEADER + len,
            });
        }
        pos += HEADER + len;
    }
    out.intact = pos as u64;
    out
}

pub fn walk_all(logs: &[Vec<u8>]) -> Vec<WalkedLog> {
    logs.iter().map(|l| walk(l, logs.len())).collect()
}

/// Admission boundary per log and admitted transaction count per log,
/// computed by rescanning every log until nothing changes.
pub fn admissible(walked: &[WalkedLog]) -> (Vec<u64>, Vec<usize>) {
    let mut e: Vec<u64> = walked.iter().map(|w| w.intact).collect();
    loop {
        let mut next = e.clone();
        for (i, w) in walked.iter().enumerate() {
            let first_bad = w.txns.iter().find(|t| t.end <= e[i] && t.lv.iter().zip(&e).any(|(a, b)| a > b));
            if let Some(t) = first_bad {
                next[i] = next[i].min(t.start);
            }
        }
        if next == e {
            break;
        }
        e = next;
    }
    let counts = walked.iter().zip(&e).map(|(w, &b)| w.txns.iter().filter(|t| t.end <= b).count()).collect();
    (e, counts)
}

/// Checks that the graph whose edges run from each record to the records
/// its vector covers, plus log order, has a topological order.
pub fn check_acyclic(walked: &[WalkedLog]) -> Result<usize, String> {
    let mut ids = HashMap::new();
    let mut nodes = Vec::new();
    for (i, w) in walked.iter().enumerate() {
        for (j, t) in w.txns.iter().enumerate() {
            ids.insert((i, j), nodes.len());
            nodes.push((i, j, t));
        }
    }
    let mut indegree = vec![0usize; nodes.len()];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (id, &(i, j, t)) in nodes.iter().enumerate() {
        let mut deps = Vec::new();
        if j > 0 {
            deps.push(ids[&(i, j - 1)]);
        }
        for (k, &bound) in t.lv.iter().enumerate() {
            // the last record of log k that ends at or before `bound`
            let n = walked[k].txns.partition_point(|r| r.end <= bound);
            if n > 0 && !(k == i && n > j) {
                deps.push(ids[&(k, n - 1)]);
            } else if k == i && n > j {
                return Err(format!("log {i} record at {} depends on itself or a later record", t.start));
            }
        }
        for d in deps {
            succ[d].push(id);
            indegree[id] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..nodes.len()).filter(|&n| indegree[n] == 0).collect();
    let mut seen = 0;
    while let Some(n) = ready.pop() {
        seen += 1;
        for &s in &succ[n] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(s);
            }
        }
    }
    if seen == nodes.len() {
        Ok(seen)
    } else {
        Err(format!("{} of {} records lie on a cycle", nodes.len() - seen, nodes.len()))
    }
}

/// Lowest offset per log at which a simulated torn write may cut without
/// destroying bytes that were already durable: past every acknowledged
/// record and every position some surviving anchor declares committed.
pub fn truncation_floor(walked: &[WalkedLog], ledger: &[LedgerEntry]) -> Vec<u64> {
    let mut floor = vec![0u64; walked.len()];
    for e in ledger {
        floor[e.log] = floor[e.log].max(e.end);
        for (k, &v) in e.lv.iter().enumerate() {
            floor[k] = floor[k].max(v);
        }
    }
    for w in walked {
        for (_, _, a) in &w.anchors {
            for (k, &v) in a.iter().enumerate() {
                floor[k] = floor[k].max(v);
            }
        }
    }
    floor
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct MetadataStats {
    pub records: usize,
    pub anchors: usize,
    pub lv_bytes: u64,
    pub anchor_bytes: u64,
    /// Vector bytes plus anchor bytes, per transaction record.
    pub bytes_per_record: f64,
}

pub fn metadata(walked: &[WalkedLog]) -> MetadataStats {
    let mut m = MetadataStats::default();
    for w in walked {
        m.records += w.txns.len();
        m.anchors += w.anchors.len();
        m.lv_bytes += w.txns.iter().map(|t| t.lv_bytes as u64).sum::<u64>();
        m.anchor_bytes += w.anchors.iter().map(|(s, e, _)| e - s).sum::<u64>();
    }
    if m.records > 0 {
        m.bytes_per_record = (m.lv_bytes + m.anchor_bytes) as f64 / m.records as f64;
    }
    m
}

/// Applies every admitted record to `db` in trace order.
pub fn serial_replay(
    db: &Database,
    registry: &Registry,
    logs: &[Vec<u8>],
    walked: &[WalkedLog],
    bounds: &[u64],
    trace: &[(usize, u64, u64)],
) -> Result<usize, String> {
    let mut by_start: Vec<HashMap<u64, &WalkedTxn>> = vec![HashMap::new(); walked.len()];
    for (i, w) in walked.iter().enumerate() {
        for t in w.txns.iter().filter(|t| t.end <= bounds[i]) {
            by_start[i].insert(t.start, t);
        }
    }
    let expected: usize = by_start.iter().map(|m| m.len()).sum();
    let mut applied = 0;
    for &(log, start, end) in trace {
        let Some(t) = by_start.get(log).and_then(|m| m.get(&start)) else { continue };
        if t.end != end {
            return Err(format!("trace says log {log} record at {start} ends at {end}, log says {}", t.end));
        }
        let kind = if t.kind == KIND_DATA { RecordKind::Data } else { RecordKind::Command };
        let body = decode_payload(kind, &logs[log][t.payload.clone()])
            .map_err(|e| format!("log {log} record at {start}: {e}"))?;
        match body {
            TxnBody::Data(writes) => {
                for w in writes {
                    let table = db.table(w.table).map_err(|e| e.to_string())?;
                    let res = match w.op {
                        WriteOp::Put(bytes) => table.upsert(w.key, &bytes),
                        WriteOp::Delete => table.index_remove(w.key),
                    };
                    res.map_err(|e| format!("log {log} record at {start}: {e}"))?;
                }
            }
            TxnBody::Command { proc_id, params } => {
                let proc = registry.get(proc_id).map_err(|e| e.to_string())?;
                proc.execute(&mut ReplayOps::new(db), &params)
                    .map_err(|e| format!("log {log} record at {start}: {e}"))?;
            }
        }
        applied += 1;
    }
    if applied != expected {
        return Err(format!("trace covers {applied} of {expected} admitted records"));
    }
    Ok(applied)
}

//! Shadow conflict tracker. Collects what every committed transaction read
//! and wrote, rebuilds the conflict graph from row versions, and checks that
//! each dependent's vector covers the log record of what it depends on.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use taurus_core::engine::CommitHook;
use taurus_core::storage::RowKey;
use taurus_core::txn::CommitInfo;

#[derive(Default)]
pub struct Tracker {
    commits: Mutex<Vec<CommitInfo>>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DependencyReport {
    pub transactions: usize,
    /// Edges whose source wrote a log record.
    pub checked_edges: usize,
    pub violations: usize,
    pub examples: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
enum Edge {
    WriteRead,
    WriteWrite,
    ReadWrite,
}

impl Tracker {
    pub fn new() -> Arc<Self> {
        Arc::new(Tracker::default())
    }

    pub fn hook(self: &Arc<Self>) -> CommitHook {
        let me = self.clone();
        Arc::new(move |info: &CommitInfo| me.commits.lock().unwrap().push(info.clone()))
    }

    pub fn analyze(&self) -> DependencyReport {
        let commits = self.commits.lock().unwrap();
        // per row: versions in creation order with their writer
        let mut versions: HashMap<RowKey, Vec<(u64, usize)>> = HashMap::new();
        for (idx, c) in commits.iter().enumerate() {
            for &(key, v) in &c.writes {
                versions.entry(key).or_default().push((v, idx));
            }
        }
        for list in versions.values_mut() {
            list.sort_unstable();
        }
        let mut report = DependencyReport { transactions: commits.len(), ..Default::default() };
        let mut check = |from: usize, to: usize, key: RowKey, kind: Edge| {
            if from == to {
                return;
            }
            let (a, b) = (&commits[from], &commits[to]);
            let Some((_, end)) = a.record else { return };
            report.checked_edges += 1;
            if b.lv.get(a.log) < end {
                report.violations += 1;
                if report.examples.len() < 8 {
                    report.examples.push(format!(
                        "{kind:?} on {key:?}: txn {:#x} (log {}, end {end}) -> txn {:#x} with lv {:?}",
                        a.txn_id,
                        a.log,
                        b.txn_id,
                        b.lv.as_slice()
                    ));
                }
            }
        };
        for (idx, c) in commits.iter().enumerate() {
            for &(key, v) in &c.reads {
                let Some(list) = versions.get(&key) else { continue };
                let pos = list.partition_point(|&(x, _)| x < v);
                if let Some(&(x, w)) = list.get(pos) {
                    if x == v {
                        check(w, idx, key, Edge::WriteRead);
                    }
                }
                // the first later version overwrote what this transaction saw
                let after = list.partition_point(|&(x, _)| x <= v);
                if let Some(&(_, w)) = list.get(after) {
                    check(idx, w, key, Edge::ReadWrite);
                }
            }
            for &(key, v) in &c.writes {
                let list = &versions[&key];
                let pos = list.partition_point(|&(x, _)| x < v);
                if pos > 0 {
                    check(list[pos - 1].1, idx, key, Edge::WriteWrite);
                }
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use taurus_core::lsn_vector::LsnVector;

    fn info(txn: u64, log: usize, record: Option<(u64, u64)>, lv: &[u64], reads: &[(u64, u64)], writes: &[(u64, u64)]) -> CommitInfo {
        let k = |x: u64| RowKey::new(0, x);
        CommitInfo {
            txn_id: txn,
            log,
            record,
            lv: LsnVector::from_slice(lv),
            reads: reads.iter().map(|&(a, v)| (k(a), v)).collect(),
            writes: writes.iter().map(|&(a, v)| (k(a), v)).collect(),
        }
    }

    #[test]
    fn detects_missing_coverage() {
        let t = Tracker::new();
        let h = t.hook();
        h(&info(1, 0, Some((0, 40)), &[0, 0], &[], &[(1, 100)]));
        h(&info(2, 1, Some((0, 30)), &[40, 0], &[(1, 100)], &[(2, 101)]));
        h(&info(3, 1, Some((30, 60)), &[0, 30], &[], &[(1, 102)]));
        let r = t.analyze();
        // 1->2 read, 1->3 overwrite (violated: lv[0] = 0 < 40), 2->3 read then overwrite of key 1
        assert_eq!(r.checked_edges, 3);
        assert_eq!(r.violations, 1);
        assert!(r.examples[0].contains("WriteWrite"));
    }

    #[test]
    fn read_only_sources_are_not_checked() {
        let t = Tracker::new();
        let h = t.hook();
        h(&info(1, 0, None, &[0, 0], &[(1, 5)], &[]));
        h(&info(2, 1, Some((0, 9)), &[0, 0], &[], &[(1, 6)]));
        assert_eq!(t.analyze().checked_edges, 0);
    }
}

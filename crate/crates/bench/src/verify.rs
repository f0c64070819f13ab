//! Recovery driver and the crash oracle.

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Duration;

use anyhow::Context;
use serde::Serialize;
use taurus_core::manifest::{Manifest, MANIFEST_FILE};
use taurus_core::recovery::{self, load_logs, RecoveryOptions, RecoveryReport};
use taurus_core::storage::Database;

use crate::ledger::{ledger_path, read_ledger, read_trace, trace_path};
use crate::oracle::{admissible, check_acyclic, serial_replay, walk_all};
use crate::workload::WorkloadSpec;

/// Logs with more records than this skip the cycle check.
pub const ACYCLIC_CHECK_LIMIT: usize = 10_000;

pub const STALL_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Serialize)]
pub struct RecoverOutcome {
    pub report: Option<RecoveryReport>,
    pub digest: String,
}

pub fn workload_of(m: &Manifest) -> anyhow::Result<WorkloadSpec> {
    let spec: WorkloadSpec = serde_json::from_value(m.workload.clone()).context("manifest workload")?;
    spec.validate().map_err(anyhow::Error::msg)?;
    Ok(spec)
}

/// Rebuilds the database recorded in `dir`. A directory with neither a
/// manifest nor logs recovers to the empty database.
pub fn recover_dir(dir: &Path, opts: &RecoveryOptions) -> anyhow::Result<(RecoverOutcome, Database)> {
    if !dir.join(MANIFEST_FILE).exists() {
        let empty = std::fs::read_dir(dir).map(|mut d| d.next().is_none()).unwrap_or(true);
        anyhow::ensure!(empty, "{} has no manifest", dir.display());
        let db = Database::new(&[]);
        return Ok((RecoverOutcome { report: None, digest: db.digest() }, db));
    }
    let m = Manifest::read(dir)?;
    let spec = workload_of(&m)?;
    let db = spec.load();
    let report = recovery::recover(dir, &db, &spec.registry(), opts)?;
    Ok((RecoverOutcome { report: Some(report), digest: db.digest() }, db))
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub ledger_entries: usize,
    pub recovered: usize,
    pub logged: usize,
    pub recovered_digest: String,
    pub oracle_digest: Option<String>,
    /// Cycle check outcome, absent when the logs are too large.
    pub acyclic: Option<bool>,
    pub failures: Vec<String>,
}

/// Checks a crashed run: every acknowledged transaction is recovered, the
/// recovered set equals what an independent walk admits, and replaying that
/// set serially in reservation order produces the same state.
pub fn verify(dir: &Path, opts: &RecoveryOptions) -> anyhow::Result<VerifyReport> {
    let m = Manifest::read(dir)?;
    let spec = workload_of(&m)?;
    let (outcome, db) = recover_dir(dir, opts)?;
    let report = outcome.report.expect("manifest present");
    let logs = load_logs(dir, m.n_logs)?;
    let walked = walk_all(&logs);
    let ledger = read_ledger(&ledger_path(dir))?;
    let mut failures = Vec::new();

    // (a) every acknowledged transaction is in the recovered prefix
    for e in &ledger {
        let on_disk = walked[e.log].txns.iter().any(|t| t.start == e.start && t.end == e.end);
        if !on_disk || e.end > report.admitted_lv[e.log] {
            failures.push(format!(
                "acknowledged txn {:#x} (log {}, {}..{}) not recovered: on disk {on_disk}, admitted up to {}",
                e.txn_id, e.log, e.start, e.end, report.admitted_lv[e.log]
            ));
            break;
        }
    }

    // (b) recovered set equals the independently admitted set
    let (bounds, counts) = admissible(&walked);
    if bounds != report.admitted_lv || counts != report.admitted {
        let log = (0..bounds.len()).find(|&i| bounds[i] != report.admitted_lv[i] || counts[i] != report.admitted[i]).unwrap_or(0);
        let culprit = walked[log]
            .txns
            .iter()
            .find(|t| (t.end <= bounds[log]) != (t.end <= report.admitted_lv[log]))
            .map(|t| format!("record {}..{}", t.start, t.end))
            .unwrap_or_else(|| "no single record".into());
        failures.push(format!(
            "log {log}: oracle admits up to {} ({} records), recovery up to {} ({} records); first difference at {culprit}",
            bounds[log], counts[log], report.admitted_lv[log], report.admitted[log]
        ));
    }

    // (c) serial replay of the oracle set in reservation order
    let oracle_digest = match read_trace(&trace_path(dir)) {
        Ok(trace) => {
            let fresh = spec.load();
            match serial_replay(&fresh, &spec.registry(), &logs, &walked, &bounds, &trace) {
                Ok(_) => Some(fresh.digest()),
                Err(e) => {
                    failures.push(format!("oracle replay failed: {e}"));
                    None
                }
            }
        }
        Err(e) => {
            failures.push(format!("reservation trace unreadable: {e}"));
            None
        }
    };
    if let Some(d) = &oracle_digest {
        if *d != outcome.digest {
            failures.push(format!("recovered digest {} differs from oracle digest {d}", outcome.digest));
        }
    }

    let logged: usize = walked.iter().map(|w| w.txns.len()).sum();
    let acyclic = (logged <= ACYCLIC_CHECK_LIMIT).then(|| match check_acyclic(&walked) {
        Ok(_) => true,
        Err(e) => {
            failures.push(format!("dependency graph: {e}"));
            false
        }
    });
    if let Err(e) = spec.check(&db) {
        failures.push(format!("workload consistency: {e}"));
    }

    Ok(VerifyReport {
        pass: failures.is_empty(),
        ledger_entries: ledger.len(),
        recovered: report.replayed,
        logged,
        recovered_digest: outcome.digest,
        oracle_digest,
        acyclic,
        failures,
    })
}

/// Cuts a log file at `byte`. Offsets at or beyond the end leave it alone.
pub fn truncate(dir: &Path, log: usize, byte: u64) -> std::io::Result<bool> {
    let path = taurus_core::log_runtime::log_path(dir, log);
    let f = OpenOptions::new().write(true).open(&path)?;
    if byte >= f.metadata()?.len() {
        return Ok(false);
    }
    f.set_len(byte)?;
    f.sync_all()?;
    Ok(true)
}

pub fn recovery_options(workers: usize, serial: bool) -> RecoveryOptions {
    RecoveryOptions { workers: workers.max(1), serial, stall_timeout: Some(STALL_TIMEOUT) }
}

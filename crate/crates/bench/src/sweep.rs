//! Metadata size and recovery speed as a function of the PLV flush interval.

use std::path::Path;

use serde::Serialize;

use crate::runner::{run, LoggingKind, RunConfig};
use crate::verify::{recover_dir, recovery_options};

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub rho: u64,
    pub records: usize,
    pub anchors: usize,
    pub bytes_per_record: f64,
    pub recovery_txns_per_sec: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSeries {
    pub logging: LoggingKind,
    pub points: Vec<SweepPoint>,
    pub min_rho: u64,
    pub min_bytes_per_record: f64,
    /// The minimum lies strictly between the smallest and largest ρ.
    pub interior_minimum: bool,
}

impl SweepSeries {
    fn new(logging: LoggingKind, points: Vec<SweepPoint>) -> Self {
        let (idx, best) = points
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.bytes_per_record.total_cmp(&b.1.bytes_per_record))
            .map(|(i, p)| (i, p.clone()))
            .expect("at least one point");
        SweepSeries {
            logging,
            interior_minimum: idx > 0 && idx + 1 < points.len(),
            min_rho: best.rho,
            min_bytes_per_record: best.bytes_per_record,
            points,
        }
    }
}

/// Runs `base` once per `(mode, ρ)` in a fresh subdirectory of `root` and
/// recovers each run with `recovery_workers` threads.
pub fn sweep_rho(
    root: &Path,
    base: &RunConfig,
    modes: &[LoggingKind],
    rhos: &[u64],
    recovery_workers: usize,
) -> anyhow::Result<Vec<SweepSeries>> {
    anyhow::ensure!(!rhos.is_empty(), "no rho values given");
    let mut out = Vec::new();
    for &mode in modes {
        let mut points = Vec::new();
        for &rho in rhos {
            let dir = root.join(format!("{mode:?}-{rho}").to_lowercase());
            let _ = std::fs::remove_dir_all(&dir);
            let cfg = RunConfig { dir: dir.clone(), logging: mode, rho, side_files: false, ..base.clone() };
            let meta = run(&cfg)?.report.metadata.expect("clean shutdown walks the logs");
            let (rec, _) = recover_dir(&dir, &recovery_options(recovery_workers, false))?;
            let rec = rec.report.expect("manifest written");
            points.push(SweepPoint {
                rho,
                records: meta.records,
                anchors: meta.anchors,
                bytes_per_record: meta.bytes_per_record,
                recovery_txns_per_sec: rec.replayed as f64 / (rec.wall_ms / 1e3).max(1e-9),
            });
            std::fs::remove_dir_all(&dir)?;
        }
        out.push(SweepSeries::new(mode, points));
    }
    Ok(out)
}

//! `manifest.json`: the settings a recovery run needs to interpret a log
//! directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{CcMode, LoggingMode};
use crate::storage::TableSchema;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_logs: usize,
    pub workers_per_log: usize,
    pub logging: LoggingMode,
    pub cc: CcMode,
    pub rho: u64,
    pub delta: u64,
    pub registry_version: String,
    pub tables: Vec<TableSchema>,
    /// Opaque description of how the initial database was populated.
    #[serde(default)]
    pub workload: serde_json::Value,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(MANIFEST_FILE), json)
    }

    pub fn read(dir: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(dir.join(MANIFEST_FILE))?;
        serde_json::from_slice(&bytes).map_err(std::io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            n_logs: 4,
            workers_per_log: 2,
            logging: LoggingMode::Data,
            cc: CcMode::Occ,
            rho: u64::MAX,
            delta: 1 << 22,
            registry_version: "ycsb-1".into(),
            tables: vec![TableSchema { id: 0, name: "usertable".into(), row_width: 64 }],
            workload: serde_json::json!({"kind": "ycsb"}),
        };
        m.write(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("\"cc\": \"occ\"") && text.contains("\"logging\": \"data\""));
    }
}

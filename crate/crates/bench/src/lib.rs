//! Workloads, crash harness and verification for the taurus engine.

pub mod crash;
pub mod ledger;
pub mod oracle;
pub mod runner;
pub mod sweep;
pub mod tpcc;
pub mod tracker;
pub mod verify;
pub mod workload;
pub mod ycsb;

pub mod cc_2pl;
pub mod cc_occ;
pub mod engine;
pub mod log_runtime;
pub mod lsn_vector;
pub mod manifest;
pub mod record;
pub mod recovery;
pub mod storage;
pub mod txn;

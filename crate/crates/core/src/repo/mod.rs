// SPDX-License-Identifier: Apache-2.0

//! Durable state: the flowfile write-ahead journal, the append-only content
//! store and the provenance event store.
//!
//! On-disk layout under a state directory:
//!
//! ```text
//! flowfile/snapshot          checkpoint of live flowfiles
//! flowfile/journal           committed transactions since the snapshot
//! content/<container>/<n>    append-only content sections
//! content-archive/ledger     archive / unarchive / purge log
//! provenance/segment-<n>     provenance events
//! ```

pub mod codec;
pub mod content;
pub mod flowfile;
pub mod frame;
pub mod provenance;

use std::io;

use thiserror::Error;

use crate::fault::CrashPoint;

pub use content::{ClaimLedgerEntry, ContentConfig, ContentRepository};
pub use flowfile::{FlowFileRecord, FlowFileRepository, FlowFileRepoConfig, RecordType};
pub use provenance::{Lineage, LineageEdge, ProvenanceConfig, ProvenanceQuery, ProvenanceRepository};

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("storage full")]
    StorageFull,
    #[error("i/o failure: {0}")]
    Io(io::Error),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("content claim not found")]
    ClaimNotFound,
    #[error("range {start}+{len} outside claim of length {claim_len}")]
    RangeOutOfBounds { start: u64, len: u64, claim_len: u64 },
    #[error("reference count underflow")]
    RefUnderflow,
    #[error("provenance invariant violated: {0}")]
    InvariantViolation(String),
    #[error("unknown flowfile uuid {0}")]
    UnknownUuid(String),
    #[error("query needs at least one filter or allow_all")]
    InvalidQuery,
    #[error("injected crash at {0}")]
    InjectedCrash(CrashPoint),
}

impl From<io::Error> for RepoError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            RepoError::StorageFull
        } else {
            RepoError::Io(e)
        }
    }
}

impl From<codec::DecodeError> for RepoError {
    fn from(e: codec::DecodeError) -> Self {
        RepoError::Io(io::Error::new(io::ErrorKind::InvalidData, e.0))
    }
}

pub type Result<T> = std::result::Result<T, RepoError>;

pub(crate) fn sync_dir(path: &std::path::Path) {
    if let Ok(d) = std::fs::File::open(path) {
        let _ = d.sync_all();
    }
}

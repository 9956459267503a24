// SPDX-License-Identifier: Apache-2.0

//! Crash injection. A test arms a [`CrashPoint`]; the next time execution
//! reaches it, the operation stops there and returns an injected-crash
//! error, leaving on-disk state exactly as a process death would.

use std::collections::HashSet;
use std::fmt;
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CrashPoint {
    /// Snapshot written to its temporary file but not yet swapped in.
    CheckpointBeforeSwap,
    /// Snapshot swapped in, journal not yet truncated.
    CheckpointBeforeTruncate,
    /// Session commit before the flowfile journal write.
    CommitBeforeJournal,
    /// Journal written, claims and queues untouched.
    CommitAfterJournal,
    /// Journal written and claims adjusted, nothing enqueued.
    CommitAfterClaims,
    /// Enqueued, provenance not yet recorded.
    CommitAfterEnqueue,
}

impl fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Default)]
pub struct FaultInjector {
    armed: Mutex<HashSet<CrashPoint>>,
}

impl FaultInjector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arm(&self, point: CrashPoint) {
        self.armed.lock().unwrap().insert(point);
    }

    pub fn disarm_all(&self) {
        self.armed.lock().unwrap().clear();
    }

    /// One-shot: returns true (and disarms) if `point` was armed.
    pub fn hit(&self, point: CrashPoint) -> bool {
        self.armed.lock().unwrap().remove(&point)
    }
}

// SPDX-License-Identifier: Apache-2.0

use serde::Serialize;

use crate::clock::Timestamp;
use crate::control::flow::RunState;
use crate::engine::connection::queue_full;
use crate::engine::stats::Counters;
use crate::engine::{Conservation, Engine};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessorStatus {
    pub id: String,
    pub type_name: String,
    pub state: RunState,
    pub active_sessions: usize,
    /// Totals over the trailing five minutes.
    #[serde(flatten)]
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConnectionStatus {
    pub id: String,
    pub source: String,
    pub relationship: String,
    pub destination: String,
    pub queued_count: u64,
    pub queued_bytes: u64,
    pub object_threshold: u64,
    pub size_threshold: u64,
    pub full: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatusSnapshot {
    pub timestamp: Timestamp,
    pub processors: Vec<ProcessorStatus>,
    pub connections: Vec<ConnectionStatus>,
    pub totals: Conservation,
    pub intake_halted: bool,
}

impl Engine {
    pub fn status(&self) -> StatusSnapshot {
        let now = self.clock().now_ms();
        let graph = self.graph();
        let processors = graph
            .processors()
            .map(|n| ProcessorStatus {
                id: n.id.clone(),
                type_name: n.type_name.clone(),
                state: if n.is_running() { RunState::Running } else { RunState::Stopped },
                active_sessions: n.active_sessions(),
                counters: n.counters(now),
            })
            .collect();
        let connections = graph
            .connections()
            .map(|c| {
                let cfg = c.config();
                let (count, bytes) = c.gauges();
                ConnectionStatus {
                    id: cfg.id.clone(),
                    source: cfg.source.clone(),
                    relationship: cfg.relationship.clone(),
                    destination: cfg.destination.clone(),
                    queued_count: count,
                    queued_bytes: bytes,
                    object_threshold: cfg.object_threshold,
                    size_threshold: cfg.size_threshold,
                    full: queue_full(count, bytes, cfg.object_threshold, cfg.size_threshold),
                }
            })
            .collect();
        StatusSnapshot {
            timestamp: now,
            processors,
            connections,
            totals: self.conservation(),
            intake_halted: self.intake_halted(),
        }
    }
}

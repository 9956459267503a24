// SPDX-License-Identifier: Apache-2.0

use std::cmp::Ordering as CmpOrdering;
use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::model::FlowFile;

pub const DEFAULT_OBJECT_THRESHOLD: u64 = 10_000;
pub const DEFAULT_SIZE_THRESHOLD: u64 = 1 << 30;
pub const PRIORITY_ATTR: &str = "priority";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Prioritizer {
    #[default]
    OldestFirst,
    NewestFirst,
    SmallestFirst,
    PriorityAttribute,
}

impl FromStr for Prioritizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "OLDEST_FIRST" => Ok(Prioritizer::OldestFirst),
            "NEWEST_FIRST" => Ok(Prioritizer::NewestFirst),
            "SMALLEST_FIRST" => Ok(Prioritizer::SmallestFirst),
            "PRIORITY_ATTRIBUTE" => Ok(Prioritizer::PriorityAttribute),
            other => Err(format!("unknown prioritizer '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TotalF64(f64);

impl PartialEq for TotalF64 {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == CmpOrdering::Equal
    }
}

impl Eq for TotalF64 {}

impl PartialOrd for TotalF64 {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for TotalF64 {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.0.total_cmp(&other.0)
    }
}

/// Variant order matters: numeric priorities sort before textual ones,
/// which sort before a missing attribute.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Rank {
    Unit,
    Size(u64),
    Number(TotalF64),
    Text(String),
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct QueueKey {
    rank: Rank,
    time: i64,
    uuid: String,
}

impl Prioritizer {
    fn key(self, ff: &FlowFile) -> QueueKey {
        let (rank, time) = match self {
            Prioritizer::OldestFirst => (Rank::Unit, ff.entry_timestamp),
            Prioritizer::NewestFirst => (Rank::Unit, ff.entry_timestamp.saturating_neg()),
            Prioritizer::SmallestFirst => (Rank::Size(ff.size()), ff.entry_timestamp),
            Prioritizer::PriorityAttribute => {
                let rank = match ff.attribute(PRIORITY_ATTR) {
                    None => Rank::Missing,
                    Some(v) => match v.trim().parse::<f64>() {
                        Ok(n) if n.is_finite() => Rank::Number(TotalF64(n)),
                        _ => Rank::Text(v.to_string()),
                    },
                };
                (rank, ff.entry_timestamp)
            }
        };
        QueueKey {
            rank,
            time,
            uuid: ff.uuid.clone(),
        }
    }
}

/// True iff either threshold is reached.
pub fn queue_full(count: u64, bytes: u64, object_threshold: u64, size_threshold: u64) -> bool {
    count >= object_threshold || bytes >= size_threshold
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionConfig {
    pub id: String,
    pub source: String,
    pub relationship: String,
    pub destination: String,
    pub object_threshold: u64,
    pub size_threshold: u64,
    pub prioritizer: Prioritizer,
}

impl ConnectionConfig {
    pub fn new(id: &str, source: &str, relationship: &str, destination: &str) -> Self {
        ConnectionConfig {
            id: id.to_string(),
            source: source.to_string(),
            relationship: relationship.to_string(),
            destination: destination.to_string(),
            object_threshold: DEFAULT_OBJECT_THRESHOLD,
            size_threshold: DEFAULT_SIZE_THRESHOLD,
            prioritizer: Prioritizer::OldestFirst,
        }
    }
}

#[derive(Default)]
struct Queue {
    items: BTreeMap<QueueKey, FlowFile>,
    bytes: u64,
}

/// Prioritized queue between two processors. Enqueue never rejects.
pub struct Connection {
    config: ConnectionConfig,
    queue: Mutex<Queue>,
    full: AtomicBool,
}

/// A fullness change caused by an enqueue or poll.
pub type FullTransition = Option<bool>;

impl Connection {
    pub fn new(config: ConnectionConfig) -> Self {
        Connection {
            config,
            queue: Mutex::new(Queue::default()),
            full: AtomicBool::new(false),
        }
    }

    pub fn config(&self) -> &ConnectionConfig {
        &self.config
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    fn transition(&self, q: &Queue) -> FullTransition {
        let now_full = queue_full(
            q.items.len() as u64,
            q.bytes,
            self.config.object_threshold,
            self.config.size_threshold,
        );
        (self.full.swap(now_full, Ordering::SeqCst) != now_full).then_some(now_full)
    }

    pub fn enqueue(&self, ff: FlowFile) -> FullTransition {
        let mut q = self.queue.lock().unwrap();
        q.bytes += ff.size();
        let key = self.config.prioritizer.key(&ff);
        if let Some(prev) = q.items.insert(key, ff) {
            q.bytes -= prev.size();
        }
        self.transition(&q)
    }

    /// Highest-priority flowfile whose penalty has expired.
    pub fn poll(&self, now: Timestamp) -> (Option<FlowFile>, FullTransition) {
        let mut q = self.queue.lock().unwrap();
        let key = q
            .items
            .iter()
            .find(|(_, ff)| !ff.is_penalized(now))
            .map(|(k, _)| k.clone());
        let Some(key) = key else {
            return (None, None);
        };
        let ff = q.items.remove(&key).unwrap();
        q.bytes -= ff.size();
        let t = self.transition(&q);
        (Some(ff), t)
    }

    pub fn queued_count(&self) -> u64 {
        self.queue.lock().unwrap().items.len() as u64
    }

    pub fn queued_bytes(&self) -> u64 {
        self.queue.lock().unwrap().bytes
    }

    /// `(count, bytes)` read under one lock.
    pub fn gauges(&self) -> (u64, u64) {
        let q = self.queue.lock().unwrap();
        (q.items.len() as u64, q.bytes)
    }

    pub fn is_full(&self) -> bool {
        let (count, bytes) = self.gauges();
        queue_full(count, bytes, self.config.object_threshold, self.config.size_threshold)
    }

    pub fn is_empty(&self) -> bool {
        self.queue.lock().unwrap().items.is_empty()
    }

    pub fn has_ready(&self, now: Timestamp) -> bool {
        self.queue
            .lock()
            .unwrap()
            .items
            .values()
            .any(|ff| !ff.is_penalized(now))
    }

    /// Queued flowfiles in poll order (penalized ones included).
    pub fn list(&self, limit: usize) -> Vec<FlowFile> {
        self.queue
            .lock()
            .unwrap()
            .items
            .values()
            .take(limit)
            .cloned()
            .collect()
    }
}

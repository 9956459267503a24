// SPDX-License-Identifier: Apache-2.0

//! Provenance repository: durable event log with in-memory indexes,
//! queries and lineage.
//!
//! Events go to `segment-<n>` files; a segment rolls at `segment_bytes` and
//! the oldest segments are dropped once the total exceeds
//! `max_total_bytes`. Indexes are rebuilt by scanning segments on open.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::codec::{DecodeError, Decoder, Encoder};
use super::{frame, RepoError, Result};
use crate::clock::Timestamp;
use crate::model::{ProvenanceEvent, ProvenanceEventType};

#[derive(Debug, Clone)]
pub struct ProvenanceConfig {
    pub segment_bytes: u64,
    pub max_total_bytes: u64,
    pub sync: bool,
}

impl Default for ProvenanceConfig {
    fn default() -> Self {
        ProvenanceConfig {
            segment_bytes: 8 * 1024 * 1024,
            max_total_bytes: 64 * 1024 * 1024,
            sync: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceQuery {
    pub flowfile_uuid: Option<String>,
    pub component_id: Option<String>,
    pub event_types: Option<BTreeSet<ProvenanceEventType>>,
    /// Inclusive `[from, to]`.
    pub time_range: Option<(Timestamp, Timestamp)>,
    pub limit: usize,
    pub allow_all: bool,
}

impl Default for ProvenanceQuery {
    fn default() -> Self {
        ProvenanceQuery {
            flowfile_uuid: None,
            component_id: None,
            event_types: None,
            time_range: None,
            limit: 1000,
            allow_all: false,
        }
    }
}

impl ProvenanceQuery {
    pub fn all() -> Self {
        ProvenanceQuery {
            allow_all: true,
            ..Default::default()
        }
    }

    pub fn by_uuid(uuid: impl Into<String>) -> Self {
        ProvenanceQuery {
            flowfile_uuid: Some(uuid.into()),
            ..Default::default()
        }
    }

    fn has_filter(&self) -> bool {
        self.flowfile_uuid.is_some()
            || self.component_id.is_some()
            || self.event_types.is_some()
            || self.time_range.is_some()
    }

    fn matches(&self, e: &ProvenanceEvent) -> bool {
        self.flowfile_uuid.as_ref().is_none_or(|u| &e.flowfile_uuid == u)
            && self.component_id.as_ref().is_none_or(|c| &e.component_id == c)
            && self.event_types.as_ref().is_none_or(|t| t.contains(&e.event_type))
            && self
                .time_range
                .is_none_or(|(from, to)| e.timestamp >= from && e.timestamp <= to)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub from: u64,
    pub to: u64,
    pub uuid: String,
}

/// Lineage DAG: events as nodes (ascending id), edges always point from a
/// lower to a higher event id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub root_uuid: String,
    pub nodes: Vec<ProvenanceEvent>,
    pub edges: Vec<LineageEdge>,
}

struct Segment {
    number: u64,
    bytes: u64,
    event_ids: Vec<u64>,
}

struct Inner {
    next_id: u64,
    events: BTreeMap<u64, ProvenanceEvent>,
    by_uuid: HashMap<String, Vec<u64>>,
    by_component: HashMap<String, Vec<u64>>,
    dropped: HashSet<String>,
    segments: VecDeque<Segment>,
    active: File,
}

pub struct ProvenanceRepository {
    dir: PathBuf,
    config: ProvenanceConfig,
    inner: Mutex<Inner>,
}

fn encode_event(e: &ProvenanceEvent) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.u64(e.event_id)
        .u8(e.event_type.code())
        .str(&e.flowfile_uuid)
        .strs(&e.parent_uuids)
        .strs(&e.child_uuids)
        .str(&e.component_id)
        .i64(e.timestamp)
        .attributes(&e.attributes_snapshot)
        .str(&e.details)
        .opt(e.claim.as_ref(), |enc, c| {
            enc.claim(c);
        })
        .opt(e.queue_id.as_deref(), |enc, q| {
            enc.str(q);
        })
        .opt(e.transit_uri.as_deref(), |enc, t| {
            enc.str(t);
        });
    enc.finish()
}

fn decode_event(data: &[u8]) -> std::result::Result<ProvenanceEvent, DecodeError> {
    let mut d = Decoder::new(data)?;
    Ok(ProvenanceEvent {
        event_id: d.u64()?,
        event_type: ProvenanceEventType::from_code(d.u8()?)
            .ok_or_else(|| DecodeError("bad event type".into()))?,
        flowfile_uuid: d.str()?,
        parent_uuids: d.strs()?,
        child_uuids: d.strs()?,
        component_id: d.str()?,
        timestamp: d.i64()?,
        attributes_snapshot: d.attributes()?,
        details: d.str()?,
        claim: d.opt(|d| d.claim())?,
        queue_id: d.opt(|d| d.str())?,
        transit_uri: d.opt(|d| d.str())?,
    })
}

fn segment_path(dir: &Path, n: u64) -> PathBuf {
    dir.join(format!("segment-{n}"))
}

impl Inner {
    fn index(&mut self, e: ProvenanceEvent) {
        let id = e.event_id;
        let related: BTreeSet<&str> = e.related_uuids().collect();
        for u in related {
            self.by_uuid.entry(u.to_string()).or_default().push(id);
        }
        self.by_component
            .entry(e.component_id.clone())
            .or_default()
            .push(id);
        if e.event_type == ProvenanceEventType::Drop {
            self.dropped.insert(e.flowfile_uuid.clone());
        }
        self.events.insert(id, e);
    }

    fn unindex(&mut self, id: u64) {
        let Some(e) = self.events.remove(&id) else {
            return;
        };
        for u in e.related_uuids() {
            if let Some(ids) = self.by_uuid.get_mut(u) {
                ids.retain(|x| *x != id);
                if ids.is_empty() {
                    self.by_uuid.remove(u);
                }
            }
        }
        if let Some(ids) = self.by_component.get_mut(&e.component_id) {
            ids.retain(|x| *x != id);
        }
    }
}

fn check_shape(e: &ProvenanceEvent) -> Result<()> {
    if !e.event_type.allows_parents() && !e.parent_uuids.is_empty() {
        return Err(RepoError::InvariantViolation(format!(
            "{} event cannot carry parents",
            e.event_type
        )));
    }
    if !e.event_type.allows_children() && !e.child_uuids.is_empty() {
        return Err(RepoError::InvariantViolation(format!(
            "{} event cannot carry children",
            e.event_type
        )));
    }
    if e.event_type.allows_parents() && e.parent_uuids.is_empty() {
        return Err(RepoError::InvariantViolation(format!(
            "{} event needs parents",
            e.event_type
        )));
    }
    Ok(())
}

impl ProvenanceRepository {
    pub fn open(dir: &Path, config: ProvenanceConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut numbers: Vec<u64> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()
                    .and_then(|s| s.strip_prefix("segment-"))
                    .and_then(|s| s.parse().ok())
            })
            .collect();
        numbers.sort_unstable();
        let active_number = numbers.last().map_or(1, |n| n + 1);
        let active = OpenOptions::new()
            .create(true)
            .append(true)
            .open(segment_path(dir, active_number))?;

        let mut inner = Inner {
            next_id: 1,
            events: BTreeMap::new(),
            by_uuid: HashMap::new(),
            by_component: HashMap::new(),
            dropped: HashSet::new(),
            segments: VecDeque::new(),
            active,
        };
        for n in &numbers {
            let path = segment_path(dir, *n);
            let data = frame::read_file(&path)?;
            let (frames, valid) = frame::scan(&data);
            let mut seg = Segment {
                number: *n,
                bytes: valid as u64,
                event_ids: Vec::new(),
            };
            for f in frames {
                let Ok(e) = decode_event(f) else { break };
                inner.next_id = inner.next_id.max(e.event_id + 1);
                seg.event_ids.push(e.event_id);
                inner.index(e);
            }
            if valid < data.len() {
                OpenOptions::new().write(true).open(&path)?.set_len(valid as u64)?;
            }
            inner.segments.push_back(seg);
        }
        inner.segments.push_back(Segment {
            number: active_number,
            bytes: 0,
            event_ids: Vec::new(),
        });
        Ok(ProvenanceRepository {
            dir: dir.to_path_buf(),
            config,
            inner: Mutex::new(inner),
        })
    }

    pub fn record(&self, event: ProvenanceEvent) -> Result<u64> {
        Ok(self.record_all(vec![event])?[0])
    }

    /// Records a batch in order. The batch is validated as a whole first;
    /// if any event is rejected nothing is written.
    pub fn record_all(&self, events: Vec<ProvenanceEvent>) -> Result<Vec<u64>> {
        let mut inner = self.inner.lock().unwrap();
        let mut newly_dropped = HashSet::new();
        for e in &events {
            check_shape(e)?;
            if inner.dropped.contains(&e.flowfile_uuid) || newly_dropped.contains(&e.flowfile_uuid) {
                return Err(RepoError::InvariantViolation(format!(
                    "{} event for {} after DROP",
                    e.event_type, e.flowfile_uuid
                )));
            }
            if e.event_type == ProvenanceEventType::Drop {
                newly_dropped.insert(e.flowfile_uuid.clone());
            }
        }
        let mut ids = Vec::with_capacity(events.len());
        let mut buf = Vec::new();
        let mut batch = Vec::with_capacity(events.len());
        for mut e in events {
            e.event_id = inner.next_id;
            inner.next_id += 1;
            ids.push(e.event_id);
            buf.extend(frame::encode(&encode_event(&e)));
            batch.push(e);
        }
        inner.active.write_all(&buf)?;
        if self.config.sync {
            inner.active.sync_data()?;
        }
        let seg = inner.segments.back_mut().unwrap();
        seg.bytes += buf.len() as u64;
        seg.event_ids.extend(&ids);
        for e in batch {
            inner.index(e);
        }
        self.roll(&mut inner)?;
        Ok(ids)
    }

    fn roll(&self, inner: &mut Inner) -> Result<()> {
        let active = inner.segments.back().unwrap();
        if active.bytes >= self.config.segment_bytes {
            let next = active.number + 1;
            inner.active = OpenOptions::new()
                .create(true)
                .append(true)
                .open(segment_path(&self.dir, next))?;
            inner.segments.push_back(Segment {
                number: next,
                bytes: 0,
                event_ids: Vec::new(),
            });
        }
        while inner.segments.len() > 1
            && inner.segments.iter().map(|s| s.bytes).sum::<u64>() > self.config.max_total_bytes
        {
            let old = inner.segments.pop_front().unwrap();
            for id in old.event_ids {
                inner.unindex(id);
            }
            fs::remove_file(segment_path(&self.dir, old.number))?;
        }
        Ok(())
    }

    pub fn get(&self, event_id: u64) -> Option<ProvenanceEvent> {
        self.inner.lock().unwrap().events.get(&event_id).cloned()
    }

    /// Events matching every supplied filter, ascending id, at most `limit`.
    pub fn query(&self, q: &ProvenanceQuery) -> Result<Vec<ProvenanceEvent>> {
        if !q.has_filter() && !q.allow_all {
            return Err(RepoError::InvalidQuery);
        }
        let inner = self.inner.lock().unwrap();
        let candidates: Box<dyn Iterator<Item = &ProvenanceEvent>> =
            if let Some(u) = &q.flowfile_uuid {
                Box::new(
                    inner
                        .by_uuid
                        .get(u)
                        .into_iter()
                        .flatten()
                        .filter_map(|id| inner.events.get(id)),
                )
            } else if let Some(c) = &q.component_id {
                Box::new(
                    inner
                        .by_component
                        .get(c)
                        .into_iter()
                        .flatten()
                        .filter_map(|id| inner.events.get(id)),
                )
            } else {
                Box::new(inner.events.values())
            };
        Ok(candidates
            .filter(|e| q.matches(e))
            .take(q.limit)
            .cloned()
            .collect())
    }

    /// Connected component of `uuid` through parent/child links, in both
    /// directions. Each uuid contributes a chain over its events in id order;
    /// an event with parents also gets an edge from each parent's latest
    /// earlier event.
    pub fn lineage(&self, uuid: &str) -> Result<Lineage> {
        let inner = self.inner.lock().unwrap();
        if !inner.by_uuid.contains_key(uuid) {
            return Err(RepoError::UnknownUuid(uuid.to_string()));
        }
        let mut seen_uuids: HashSet<String> = HashSet::new();
        let mut node_ids: BTreeSet<u64> = BTreeSet::new();
        let mut queue = VecDeque::from([uuid.to_string()]);
        seen_uuids.insert(uuid.to_string());
        while let Some(u) = queue.pop_front() {
            for id in inner.by_uuid.get(&u).into_iter().flatten() {
                if !node_ids.insert(*id) {
                    continue;
                }
                for r in inner.events[id].related_uuids() {
                    if seen_uuids.insert(r.to_string()) {
                        queue.push_back(r.to_string());
                    }
                }
            }
        }

        // per-uuid chains: events where the uuid is the subject or a child
        let mut chains: HashMap<&str, Vec<u64>> = HashMap::new();
        for id in &node_ids {
            let e = &inner.events[id];
            chains.entry(e.flowfile_uuid.as_str()).or_default().push(*id);
            for c in &e.child_uuids {
                if c != &e.flowfile_uuid {
                    chains.entry(c.as_str()).or_default().push(*id);
                }
            }
        }
        let mut edges = BTreeSet::new();
        for (u, ids) in &chains {
            for w in ids.windows(2) {
                edges.insert((w[0], w[1], u.to_string()));
            }
        }
        for id in &node_ids {
            let e = &inner.events[id];
            for p in &e.parent_uuids {
                if p == &e.flowfile_uuid {
                    continue;
                }
                if let Some(prev) = chains
                    .get(p.as_str())
                    .and_then(|ids| ids.iter().copied().filter(|x| x < id).max())
                {
                    edges.insert((prev, *id, p.clone()));
                }
            }
        }
        Ok(Lineage {
            root_uuid: uuid.to_string(),
            nodes: node_ids.iter().map(|id| inner.events[id].clone()).collect(),
            edges: edges
                .into_iter()
                .map(|(from, to, uuid)| LineageEdge { from, to, uuid })
                .collect(),
        })
    }

    pub fn event_count(&self) -> usize {
        self.inner.lock().unwrap().events.len()
    }

    pub fn max_event_id(&self) -> u64 {
        self.inner.lock().unwrap().next_id - 1
    }

    pub fn segment_count(&self) -> usize {
        self.inner.lock().unwrap().segments.len()
    }
}

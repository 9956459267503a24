// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use indexmap::IndexMap;
use thiserror::Error;

use super::connection::Connection;
use super::stats::Counters;
use super::{EngineShared, Graph, ProcessorNode};
use crate::clock::Timestamp;
use crate::fault::CrashPoint;
use crate::model::{Attributes, ContentClaim, FlowFile, ModelError, ProvenanceEvent, ProvenanceEventType as Ev};
use crate::repo::{FlowFileRecord, RepoError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("flowfile {0} was neither transferred nor removed")]
    UnaccountedFlowFile(String),
    #[error("flowfile {0} does not belong to this session")]
    UnknownFlowFile(String),
    #[error("relationship '{0}' is not declared")]
    UndeclaredRelationship(String),
    #[error("relationship '{0}' has no connection and is not auto-terminated")]
    NoConnection(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Repo(RepoError),
    #[error("injected crash at {0}")]
    InjectedCrash(CrashPoint),
}

impl From<RepoError> for SessionError {
    fn from(e: RepoError) -> Self {
        match e {
            RepoError::InjectedCrash(p) => SessionError::InjectedCrash(p),
            other => SessionError::Repo(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone)]
enum Origin {
    Create,
    Receive(String),
    Clone(String),
    Join(Vec<String>),
}

#[derive(Debug, Clone)]
enum Disposition {
    Transfer(String),
    Remove,
}

struct Tracked {
    source: Option<(Arc<Connection>, FlowFile)>,
    current: FlowFile,
    origin: Option<Origin>,
    attributes_modified: bool,
    content_modified: bool,
    disposition: Option<Disposition>,
}

/// Summary of a successful commit.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct CommitSummary {
    pub enqueued: usize,
    pub dropped: usize,
    pub events: usize,
}

/// Unit of work for one processor: flowfiles pulled or created here are
/// invisible elsewhere until [`ProcessSession::commit`].
pub struct ProcessSession {
    shared: Arc<EngineShared>,
    graph: Arc<Graph>,
    owner: Arc<ProcessorNode>,
    records: IndexMap<String, Tracked>,
    fresh: Vec<ContentClaim>,
    staged: Vec<ProvenanceEvent>,
    bytes_read: u64,
    bytes_written: u64,
    next_input: usize,
    dead: bool,
}

impl ProcessSession {
    pub(crate) fn new(shared: Arc<EngineShared>, owner: Arc<ProcessorNode>) -> Self {
        let graph = shared.graph();
        ProcessSession {
            shared,
            graph,
            owner,
            records: IndexMap::new(),
            fresh: Vec::new(),
            staged: Vec::new(),
            bytes_read: 0,
            bytes_written: 0,
            next_input: 0,
            dead: false,
        }
    }

    fn now(&self) -> Timestamp {
        self.shared.clock.now_ms()
    }

    pub fn owner(&self) -> &str {
        &self.owner.id
    }

    /// Number of flowfiles currently held by the session.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn tracked(&mut self, ff: &FlowFile) -> Result<&mut Tracked> {
        self.records
            .get_mut(&ff.uuid)
            .ok_or_else(|| SessionError::UnknownFlowFile(ff.uuid.clone()))
    }

    /// Pulls the next ready flowfile, rotating over incoming connections.
    pub fn get(&mut self) -> Option<FlowFile> {
        let inputs = self.graph.incoming(&self.owner.id);
        let now = self.now();
        for i in 0..inputs.len() {
            let conn = &inputs[(self.next_input + i) % inputs.len()];
            let (ff, transition) = conn.poll(now);
            self.shared.note_transition(conn, transition);
            if let Some(ff) = ff {
                self.next_input = (self.next_input + i + 1) % inputs.len();
                self.records.insert(
                    ff.uuid.clone(),
                    Tracked {
                        source: Some((conn.clone(), ff.clone())),
                        current: ff.clone(),
                        origin: None,
                        attributes_modified: false,
                        content_modified: false,
                        disposition: None,
                    },
                );
                return Some(ff);
            }
        }
        None
    }

    pub fn get_batch(&mut self, max: usize) -> Vec<FlowFile> {
        std::iter::from_fn(|| self.get()).take(max).collect()
    }

    fn track_new(&mut self, ff: FlowFile, origin: Origin) -> FlowFile {
        self.records.insert(
            ff.uuid.clone(),
            Tracked {
                source: None,
                current: ff.clone(),
                origin: Some(origin),
                attributes_modified: false,
                content_modified: false,
                disposition: None,
            },
        );
        ff
    }

    fn store(&mut self, bytes: &[u8]) -> Result<ContentClaim> {
        let claim = self.shared.content.write(bytes)?;
        self.fresh.push(claim.clone());
        self.bytes_written += bytes.len() as u64;
        Ok(claim)
    }

    /// New flowfile without content (CREATE).
    pub fn create(&mut self, attributes: Attributes) -> FlowFile {
        let ff = FlowFile::new(attributes, None, self.now());
        self.track_new(ff, Origin::Create)
    }

    /// New flowfile with content (CREATE).
    pub fn create_with_content(&mut self, attributes: Attributes, bytes: &[u8]) -> Result<FlowFile> {
        let claim = self.store(bytes)?;
        let ff = FlowFile::new(attributes, Some(claim), self.now());
        Ok(self.track_new(ff, Origin::Create))
    }

    /// New flowfile for data received from outside (RECEIVE).
    pub fn receive(&mut self, attributes: Attributes, bytes: &[u8], transit_uri: &str) -> Result<FlowFile> {
        let claim = self.store(bytes)?;
        let ff = FlowFile::new(attributes, Some(claim), self.now());
        Ok(self.track_new(ff, Origin::Receive(transit_uri.to_string())))
    }

    /// Copy sharing the parent's content (CLONE).
    pub fn clone_flowfile(&mut self, parent: &FlowFile) -> Result<FlowFile> {
        let now = self.now();
        let child = self.tracked(parent)?.current.clone_child(now);
        Ok(self.track_new(child, Origin::Clone(parent.uuid.clone())))
    }

    /// New flowfile derived from several parents (JOIN).
    pub fn join(&mut self, parents: &[FlowFile], attributes: Attributes, bytes: &[u8]) -> Result<FlowFile> {
        for p in parents {
            self.tracked(p)?;
        }
        let claim = self.store(bytes)?;
        let mut ff = FlowFile::new(attributes, Some(claim), self.now());
        if let Some(first) = parents.iter().map(|p| p.lineage_start).min() {
            ff.lineage_start = first;
        }
        let uuids = parents.iter().map(|p| p.uuid.clone()).collect();
        Ok(self.track_new(ff, Origin::Join(uuids)))
    }

    pub fn read(&mut self, ff: &FlowFile) -> Result<Vec<u8>> {
        let claim = self.tracked(ff)?.current.claim.clone();
        let Some(claim) = claim else {
            return Ok(Vec::new());
        };
        let bytes = self.shared.content.read(&claim, None)?;
        self.bytes_read += bytes.len() as u64;
        Ok(bytes)
    }

    /// Replaces the content; returns the updated flowfile.
    pub fn write(&mut self, ff: &FlowFile, bytes: &[u8]) -> Result<FlowFile> {
        self.tracked(ff)?;
        let claim = self.store(bytes)?;
        let t = self.tracked(ff)?;
        t.current.claim = Some(claim);
        t.content_modified = true;
        Ok(t.current.clone())
    }

    pub fn put_attributes(&mut self, ff: &FlowFile, updates: &Attributes) -> Result<FlowFile> {
        let t = self.tracked(ff)?;
        t.current = t.current.with_attributes(updates, &[])?;
        t.attributes_modified = true;
        Ok(t.current.clone())
    }

    pub fn put_attribute(&mut self, ff: &FlowFile, key: &str, value: &str) -> Result<FlowFile> {
        let mut a = Attributes::new();
        a.insert(key.to_string(), value.to_string());
        self.put_attributes(ff, &a)
    }

    pub fn remove_attributes(&mut self, ff: &FlowFile, keys: &[String]) -> Result<FlowFile> {
        let t = self.tracked(ff)?;
        t.current = t.current.with_attributes(&Attributes::new(), keys)?;
        t.attributes_modified = true;
        Ok(t.current.clone())
    }

    /// Holds the flowfile back from processing for the owner's penalty
    /// duration once it is queued again.
    pub fn penalize(&mut self, ff: &FlowFile) -> Result<FlowFile> {
        let until = self.now() + self.owner.penalty_ms;
        let t = self.tracked(ff)?;
        t.current.penalty_until = Some(until);
        Ok(t.current.clone())
    }

    /// Current state of a flowfile held by the session.
    pub fn current(&self, uuid: &str) -> Option<&FlowFile> {
        self.records.get(uuid).map(|t| &t.current)
    }

    pub fn transfer(&mut self, ff: &FlowFile, relationship: &str) -> Result<()> {
        if !self.owner.has_relationship(relationship) {
            return Err(SessionError::UndeclaredRelationship(relationship.to_string()));
        }
        self.tracked(ff)?.disposition = Some(Disposition::Transfer(relationship.to_string()));
        Ok(())
    }

    pub fn remove(&mut self, ff: &FlowFile) -> Result<()> {
        self.tracked(ff)?.disposition = Some(Disposition::Remove);
        Ok(())
    }

    /// Records that the content left the system for `transit_uri` (SEND).
    pub fn send(&mut self, ff: &FlowFile, transit_uri: &str) -> Result<()> {
        let now = self.now();
        let current = self.tracked(ff)?.current.clone();
        let mut e = ProvenanceEvent::new(Ev::Send, &current, &self.owner.id, now);
        e.transit_uri = Some(transit_uri.to_string());
        e.details = transit_uri.to_string();
        self.staged.push(e);
        Ok(())
    }

    /// Moves a flowfile, with its pending events and fresh content, into
    /// another session of the same processor.
    pub fn migrate(&mut self, ff: &FlowFile, to: &mut ProcessSession) -> Result<()> {
        let t = self
            .records
            .shift_remove(&ff.uuid)
            .ok_or_else(|| SessionError::UnknownFlowFile(ff.uuid.clone()))?;
        if let Some(claim) = &t.current.claim {
            if let Some(i) = self.fresh.iter().position(|c| c == claim) {
                to.fresh.push(self.fresh.remove(i));
            }
        }
        let (moved, kept) = std::mem::take(&mut self.staged)
            .into_iter()
            .partition(|e| e.flowfile_uuid == ff.uuid);
        self.staged = kept;
        to.staged.extend::<Vec<_>>(moved);
        to.records.insert(ff.uuid.clone(), t);
        Ok(())
    }

    /// Makes every change durable and visible. On error the session has been
    /// rolled back, except after an injected crash, which abandons it.
    pub fn commit(&mut self) -> Result<CommitSummary> {
        if self.dead {
            return Err(SessionError::InjectedCrash(CrashPoint::CommitBeforeJournal));
        }
        match self.commit_inner() {
            Ok(s) => Ok(s),
            Err(SessionError::InjectedCrash(p)) => {
                self.dead = true;
                self.shared.crashed.store(true, Ordering::SeqCst);
                self.records.clear();
                self.fresh.clear();
                self.staged.clear();
                Err(SessionError::InjectedCrash(p))
            }
            Err(e) => {
                self.rollback();
                Err(e)
            }
        }
    }

    fn crash_point(&self, p: CrashPoint) -> Result<()> {
        if self.shared.faults.hit(p) {
            Err(SessionError::InjectedCrash(p))
        } else {
            Ok(())
        }
    }

    fn commit_inner(&mut self) -> Result<CommitSummary> {
        if self.records.is_empty() && self.staged.is_empty() {
            self.release_fresh();
            return Ok(CommitSummary::default());
        }
        for (uuid, t) in &self.records {
            if t.disposition.is_none() {
                return Err(SessionError::UnaccountedFlowFile(uuid.clone()));
            }
        }
        let now = self.now();
        let owner = self.owner.id.clone();

        let mut enqueues: Vec<(Arc<Connection>, FlowFile, String)> = Vec::new();
        let mut fanout: Vec<(FlowFile, Vec<String>)> = Vec::new();
        let mut drops: Vec<(FlowFile, String)> = Vec::new();
        for t in self.records.values() {
            match t.disposition.as_ref().unwrap() {
                Disposition::Remove => drops.push((t.current.clone(), String::new())),
                Disposition::Transfer(rel) => {
                    let conns = self.graph.outgoing(&owner, rel);
                    if conns.is_empty() {
                        if self.graph.is_auto_terminated(&owner, rel) {
                            drops.push((t.current.clone(), format!("auto-terminated by relationship {rel}")));
                            continue;
                        }
                        return Err(SessionError::NoConnection(rel.clone()));
                    }
                    enqueues.push((conns[0].clone(), t.current.clone(), rel.clone()));
                    let mut children = Vec::new();
                    for c in &conns[1..] {
                        let child = t.current.clone_child(now);
                        children.push(child.uuid.clone());
                        enqueues.push((c.clone(), child, rel.clone()));
                    }
                    if !children.is_empty() {
                        fanout.push((t.current.clone(), children));
                    }
                }
            }
        }

        let mut wal: Vec<FlowFileRecord> = enqueues
            .iter()
            .map(|(c, ff, _)| FlowFileRecord::update(ff.clone(), c.id()))
            .collect();
        for (ff, _) in &drops {
            if self.records[&ff.uuid].source.is_some() {
                wal.push(FlowFileRecord::delete(ff.clone()));
            }
        }

        self.crash_point(CrashPoint::CommitBeforeJournal)?;
        if let Err(e) = self.shared.flowfiles.commit(&wal) {
            if matches!(e, RepoError::StorageFull) {
                self.shared.halt_intake();
            }
            return Err(e.into());
        }
        self.crash_point(CrashPoint::CommitAfterJournal)?;

        let content = &self.shared.content;
        let adjust = |claim: &ContentClaim, delta: i64| {
            if let Err(e) = content.adjust_ref(claim, delta) {
                log::error!("claim {claim:?} ref adjust {delta} failed: {e}");
            }
        };
        for (_, ff, _) in &enqueues {
            if let Some(c) = &ff.claim {
                adjust(c, 1);
            }
        }
        for t in self.records.values() {
            if let Some((_, orig)) = &t.source {
                if let Some(c) = &orig.claim {
                    adjust(c, -1);
                }
            }
        }
        for c in std::mem::take(&mut self.fresh) {
            adjust(&c, -1);
        }
        self.crash_point(CrashPoint::CommitAfterClaims)?;

        for (conn, ff, _) in &enqueues {
            let transition = conn.enqueue(ff.clone());
            self.shared.note_transition(conn, transition);
        }
        self.crash_point(CrashPoint::CommitAfterEnqueue)?;

        // queue each uuid occupied: where it came from, else where it went
        let mut queue_of: HashMap<String, String> = HashMap::new();
        for (conn, ff, _) in enqueues.iter().rev() {
            queue_of.insert(ff.uuid.clone(), conn.id().to_string());
        }
        for (uuid, t) in &self.records {
            if let Some((c, _)) = &t.source {
                queue_of.insert(uuid.clone(), c.id().to_string());
            }
        }

        let mut events = Vec::new();
        let event = |ty: Ev, ff: &FlowFile| ProvenanceEvent::new(ty, ff, &owner, now);
        let mut created = 0u64;
        for t in self.records.values() {
            let ff = &t.current;
            match &t.origin {
                Some(Origin::Create) => events.push(event(Ev::Create, ff)),
                Some(Origin::Receive(uri)) => {
                    let mut e = event(Ev::Receive, ff);
                    e.transit_uri = Some(uri.clone());
                    e.details = uri.clone();
                    events.push(e);
                }
                Some(Origin::Clone(parent)) => {
                    let p = self.records.get(parent).map(|p| &p.current);
                    let mut e = event(Ev::Clone, p.unwrap_or(ff));
                    e.flowfile_uuid = parent.clone();
                    e.parent_uuids = vec![parent.clone()];
                    e.child_uuids = vec![ff.uuid.clone()];
                    events.push(e);
                }
                Some(Origin::Join(parents)) => {
                    let mut e = event(Ev::Join, ff);
                    e.parent_uuids = parents.clone();
                    events.push(e);
                }
                None => {
                    if t.content_modified {
                        events.push(event(Ev::ModifyContent, ff));
                    }
                    if t.attributes_modified {
                        events.push(event(Ev::ModifyAttributes, ff));
                    }
                }
            }
            if t.origin.is_some() {
                created += 1;
            }
        }
        events.append(&mut self.staged);
        for (parent, children) in &fanout {
            let mut e = event(Ev::Clone, parent);
            e.parent_uuids = vec![parent.uuid.clone()];
            e.child_uuids = children.clone();
            events.push(e);
            created += children.len() as u64;
        }
        for (conn, ff, rel) in &enqueues {
            let mut e = event(Ev::Route, ff).with_details(rel.clone());
            e.queue_id = Some(conn.id().to_string());
            events.push(e);
        }
        for (ff, details) in &drops {
            events.push(event(Ev::Drop, ff).with_details(details.clone()));
        }
        for e in &mut events {
            if e.queue_id.is_none() {
                e.queue_id = queue_of.get(&e.flowfile_uuid).cloned();
            }
        }
        let event_count = events.len();
        if let Err(e) = self.shared.provenance.record_all(events) {
            log::error!("provenance for commit by {owner} not recorded: {e}");
            self.shared.provenance_failures.fetch_add(1, Ordering::Relaxed);
        }

        let mut counters = Counters {
            bytes_read: self.bytes_read,
            bytes_written: self.bytes_written,
            ..Default::default()
        };
        for t in self.records.values() {
            if let Some((_, orig)) = &t.source {
                counters.flowfiles_in += 1;
                counters.bytes_in += orig.size();
            }
        }
        counters.flowfiles_out = enqueues.len() as u64;
        counters.bytes_out = enqueues.iter().map(|(_, ff, _)| ff.size()).sum();
        self.owner.record_stats(now, counters);
        self.shared.created.fetch_add(created, Ordering::Relaxed);
        self.shared.dropped.fetch_add(drops.len() as u64, Ordering::Relaxed);

        let summary = CommitSummary {
            enqueued: enqueues.len(),
            dropped: drops.len(),
            events: event_count,
        };
        self.records.clear();
        self.bytes_read = 0;
        self.bytes_written = 0;
        Ok(summary)
    }

    fn release_fresh(&mut self) {
        for c in std::mem::take(&mut self.fresh) {
            if let Err(e) = self.shared.content.discard(&c) {
                log::warn!("discarding claim {c:?}: {e}");
            }
        }
    }

    /// Returns pulled flowfiles to their queues and discards anything
    /// created here.
    pub fn rollback(&mut self) {
        if self.dead {
            return;
        }
        for (_, t) in self.records.drain(..) {
            if let Some((conn, orig)) = t.source {
                let transition = conn.enqueue(orig);
                self.shared.note_transition(&conn, transition);
            }
        }
        self.release_fresh();
        self.staged.clear();
        self.bytes_read = 0;
        self.bytes_written = 0;
    }
}

impl Drop for ProcessSession {
    fn drop(&mut self) {
        if !self.records.is_empty() || !self.fresh.is_empty() {
            self.rollback();
        }
    }
}

// SPDX-License-Identifier: Apache-2.0

//! The flowfile data model shared by every other module: flowfiles, content
//! claims, provenance events and relationships.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;

pub type Attributes = BTreeMap<String, String>;

pub const UUID_ATTR: &str = "uuid";
pub const FILENAME_ATTR: &str = "filename";

/// Penalty applied when a processor penalizes a flowfile or fails a trigger.
pub const DEFAULT_PENALTY_MS: i64 = 30_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("the uuid attribute cannot be modified or removed")]
    AttemptToMutateUuid,
}

/// Reference to an immutable byte range in the content repository.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContentClaim {
    pub container: String,
    pub section: String,
    pub offset: u64,
    pub length: u64,
}

/// The unit of data in motion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowFile {
    pub uuid: String,
    pub attributes: Attributes,
    pub claim: Option<ContentClaim>,
    pub entry_timestamp: Timestamp,
    pub lineage_start: Timestamp,
    pub penalty_until: Option<Timestamp>,
}

fn fresh_uuid() -> String {
    uuid::Uuid::new_v4().hyphenated().to_string()
}

impl FlowFile {
    /// Creates a flowfile with a fresh v4 uuid. A caller-supplied `uuid`
    /// attribute is overwritten; `filename` defaults to the uuid.
    pub fn new(mut attributes: Attributes, claim: Option<ContentClaim>, now: Timestamp) -> Self {
        let uuid = fresh_uuid();
        attributes.insert(UUID_ATTR.to_string(), uuid.clone());
        attributes
            .entry(FILENAME_ATTR.to_string())
            .or_insert_with(|| uuid.clone());
        FlowFile {
            uuid,
            attributes,
            claim,
            entry_timestamp: now,
            lineage_start: now,
            penalty_until: None,
        }
    }

    /// Copy with a fresh uuid sharing the same content claim. A `filename`
    /// still holding the parent's default follows the new uuid. The caller
    /// is responsible for the CLONE provenance event and the claim reference.
    pub fn clone_child(&self, now: Timestamp) -> Self {
        let uuid = fresh_uuid();
        let mut attributes = self.attributes.clone();
        attributes.insert(UUID_ATTR.to_string(), uuid.clone());
        if self.filename() == self.uuid {
            attributes.insert(FILENAME_ATTR.to_string(), uuid.clone());
        }
        FlowFile {
            uuid,
            attributes,
            claim: self.claim.clone(),
            entry_timestamp: now,
            lineage_start: self.lineage_start,
            penalty_until: None,
        }
    }

    /// Applies `updates` then `removals`. Removing `filename` restores the
    /// uuid default so the mandatory attributes are always present.
    pub fn with_attributes(
        &self,
        updates: &Attributes,
        removals: &[String],
    ) -> Result<Self, ModelError> {
        if updates.get(UUID_ATTR).is_some_and(|v| v != &self.uuid)
            || removals.iter().any(|r| r == UUID_ATTR)
        {
            return Err(ModelError::AttemptToMutateUuid);
        }
        let mut next = self.clone();
        for (k, v) in updates {
            next.attributes.insert(k.clone(), v.clone());
        }
        for r in removals {
            if r == FILENAME_ATTR {
                next.attributes
                    .insert(FILENAME_ATTR.to_string(), self.uuid.clone());
            } else {
                next.attributes.remove(r);
            }
        }
        Ok(next)
    }

    pub fn size(&self) -> u64 {
        self.claim.as_ref().map_or(0, |c| c.length)
    }

    pub fn filename(&self) -> &str {
        self.attributes
            .get(FILENAME_ATTR)
            .map(String::as_str)
            .unwrap_or(&self.uuid)
    }

    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }

    pub fn is_penalized(&self, now: Timestamp) -> bool {
        self.penalty_until.is_some_and(|t| t > now)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProvenanceEventType {
    Create,
    Receive,
    Send,
    Route,
    Fork,
    Join,
    Clone,
    ModifyAttributes,
    ModifyContent,
    Drop,
    Replay,
}

impl ProvenanceEventType {
    pub const ALL: [ProvenanceEventType; 11] = [
        Self::Create,
        Self::Receive,
        Self::Send,
        Self::Route,
        Self::Fork,
        Self::Join,
        Self::Clone,
        Self::ModifyAttributes,
        Self::ModifyContent,
        Self::Drop,
        Self::Replay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Create => "CREATE",
            Self::Receive => "RECEIVE",
            Self::Send => "SEND",
            Self::Route => "ROUTE",
            Self::Fork => "FORK",
            Self::Join => "JOIN",
            Self::Clone => "CLONE",
            Self::ModifyAttributes => "MODIFY_ATTRIBUTES",
            Self::ModifyContent => "MODIFY_CONTENT",
            Self::Drop => "DROP",
            Self::Replay => "REPLAY",
        }
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|t| *t == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
    }

    /// Whether this event type may carry parent uuids.
    pub fn allows_parents(self) -> bool {
        matches!(self, Self::Fork | Self::Join | Self::Clone | Self::Replay)
    }

    pub fn allows_children(self) -> bool {
        matches!(self, Self::Fork | Self::Clone)
    }
}

impl fmt::Display for ProvenanceEventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Immutable record of one lifecycle event.
///
/// Parent/child conventions: FORK and CLONE name the parent as subject and in
/// `parent_uuids`, with the new flowfiles in `child_uuids`; JOIN and REPLAY
/// name the new flowfile as subject and its sources in `parent_uuids`.
///
/// `claim` and `queue_id` locate the content and the connection the
/// flowfile occupied at the time of the event; download and replay use them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEvent {
    pub event_id: u64,
    pub event_type: ProvenanceEventType,
    pub flowfile_uuid: String,
    pub parent_uuids: Vec<String>,
    pub child_uuids: Vec<String>,
    pub component_id: String,
    pub timestamp: Timestamp,
    pub attributes_snapshot: Attributes,
    pub details: String,
    pub claim: Option<ContentClaim>,
    pub queue_id: Option<String>,
    pub transit_uri: Option<String>,
}

impl ProvenanceEvent {
    /// An event with id 0; the provenance repository assigns the real id.
    pub fn new(
        event_type: ProvenanceEventType,
        ff: &FlowFile,
        component_id: &str,
        timestamp: Timestamp,
    ) -> Self {
        ProvenanceEvent {
            event_id: 0,
            event_type,
            flowfile_uuid: ff.uuid.clone(),
            parent_uuids: Vec::new(),
            child_uuids: Vec::new(),
            component_id: component_id.to_string(),
            timestamp,
            attributes_snapshot: ff.attributes.clone(),
            details: String::new(),
            claim: ff.claim.clone(),
            queue_id: None,
            transit_uri: None,
        }
    }

    pub fn with_details(mut self, details: impl Into<String>) -> Self {
        self.details = details.into();
        self
    }

    /// All uuids this event mentions: subject, parents and children.
    pub fn related_uuids(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.flowfile_uuid.as_str())
            .chain(self.parent_uuids.iter().map(String::as_str))
            .chain(self.child_uuids.iter().map(String::as_str))
    }

    /// Uuids whose existence begins with this event.
    pub fn originated_uuids(&self) -> Vec<&str> {
        match self.event_type {
            ProvenanceEventType::Create
            | ProvenanceEventType::Receive
            | ProvenanceEventType::Join
            | ProvenanceEventType::Replay => vec![self.flowfile_uuid.as_str()],
            ProvenanceEventType::Fork | ProvenanceEventType::Clone => {
                self.child_uuids.iter().map(String::as_str).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// Named output edge class of a processor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Relationship(String);

impl Relationship {
    pub fn new(name: impl Into<String>) -> Self {
        Relationship(name.into())
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Relationship {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Relationship {
    fn from(s: &str) -> Self {
        Relationship::new(s)
    }
}

pub mod rel {
    pub const SUCCESS: &str = "success";
    pub const FAILURE: &str = "failure";
    pub const DUPLICATE: &str = "duplicate";
    pub const NON_DUPLICATE: &str = "non-duplicate";
    pub const MATCHED: &str = "matched";
    pub const UNMATCHED: &str = "unmatched";
    pub const MERGED: &str = "merged";
    pub const ORIGINAL: &str = "original";
}

// SPDX-License-Identifier: Apache-2.0

//! Embedded partitioned topic log with consumer groups.
//!
//! Layout: `topics/<name>/meta` (JSON topic config) and
//! `topics/<name>/<partition>/segment-<base-offset>` holding records in the
//! same length-prefixed CRC framing as the flowfile journal. Committed group
//! offsets are appended to `topics/_offsets`.

mod group;
pub mod wire;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::repo::codec::{DecodeError, Decoder, Encoder};
use crate::repo::frame;

pub use group::{Assignment, GroupConsumer, TopicPartition};

#[derive(Debug, Error)]
pub enum TopicError {
    #[error("topic '{0}' already exists")]
    TopicExists(String),
    #[error("invalid topic name '{0}'")]
    InvalidName(String),
    #[error("invalid topic config: {0}")]
    InvalidConfig(String),
    #[error("unknown topic '{0}'")]
    UnknownTopic(String),
    #[error("unknown partition {partition} of '{topic}'")]
    UnknownPartition { topic: String, partition: u32 },
    #[error("offset trimmed by retention; head is {head}")]
    OffsetTrimmed { head: u64 },
    #[error("unknown consumer group '{0}'")]
    UnknownGroup(String),
    #[error("topic log unavailable")]
    Unavailable,
    #[error("storage full")]
    StorageFull,
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl TopicError {
    fn from_io(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::StorageFull {
            TopicError::StorageFull
        } else {
            TopicError::Io(e)
        }
    }
}

pub type Result<T> = std::result::Result<T, TopicError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub name: String,
    #[serde(default = "default_partitions")]
    pub partitions: u32,
    #[serde(default = "default_retention")]
    pub retention_bytes: u64,
    #[serde(default = "default_segment")]
    pub segment_bytes: u64,
}

fn default_partitions() -> u32 {
    3
}

fn default_retention() -> u64 {
    64 * 1024 * 1024
}

fn default_segment() -> u64 {
    1024 * 1024
}

impl TopicConfig {
    pub fn new(name: impl Into<String>) -> Self {
        TopicConfig {
            name: name.into(),
            partitions: default_partitions(),
            retention_bytes: default_retention(),
            segment_bytes: default_segment(),
        }
    }

    pub fn with_partitions(mut self, n: u32) -> Self {
        self.partitions = n;
        self
    }
}

pub fn valid_topic_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'_' | b'-'))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicRecord {
    pub topic: String,
    pub partition: u32,
    pub offset: u64,
    pub key: Option<Vec<u8>>,
    pub value: Vec<u8>,
    pub timestamp: Timestamp,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct PartSegment {
    base: u64,
    bytes: u64,
}

struct Partition {
    dir: PathBuf,
    segments: VecDeque<PartSegment>,
    active: File,
    records: VecDeque<TopicRecord>,
    head: u64,
    next: u64,
}

impl Partition {
    fn segment_path(&self, base: u64) -> PathBuf {
        self.dir.join(format!("segment-{base}"))
    }

    fn total_bytes(&self) -> u64 {
        self.segments.iter().map(|s| s.bytes).sum()
    }
}

struct Topic {
    config: TopicConfig,
    partitions: Vec<Mutex<Partition>>,
    round_robin: AtomicU64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionInfo {
    pub partition: u32,
    pub head: u64,
    pub tail: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TopicInfo {
    pub config: TopicConfig,
    pub partitions: Vec<PartitionInfo>,
}

pub struct TopicLog {
    dir: PathBuf,
    clock: Arc<dyn Clock>,
    sync: bool,
    topics: RwLock<BTreeMap<String, Arc<Topic>>>,
    coordinator: Mutex<group::Coordinator>,
    offsets_log: Mutex<File>,
    available: AtomicBool,
}

fn encode_record(r: &TopicRecord) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.u64(r.offset)
        .i64(r.timestamp)
        .opt(r.key.as_deref(), |e, k| {
            e.bytes(k);
        })
        .bytes(&r.value);
    enc.finish()
}

fn decode_record(topic: &str, partition: u32, data: &[u8]) -> std::result::Result<TopicRecord, DecodeError> {
    let mut d = Decoder::new(data)?;
    Ok(TopicRecord {
        topic: topic.to_string(),
        partition,
        offset: d.u64()?,
        timestamp: d.i64()?,
        key: d.opt(|d| d.bytes())?,
        value: d.bytes()?,
    })
}

fn open_append(path: &Path) -> std::io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

impl Topic {
    fn create(dir: &Path, config: TopicConfig) -> Result<Topic> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::to_vec_pretty(&config).expect("topic config serializes");
        fs::write(dir.join("meta"), meta)?;
        let mut partitions = Vec::new();
        for p in 0..config.partitions {
            let pdir = dir.join(p.to_string());
            fs::create_dir_all(&pdir)?;
            let active = open_append(&pdir.join("segment-0"))?;
            partitions.push(Mutex::new(Partition {
                dir: pdir,
                segments: VecDeque::from([PartSegment { base: 0, bytes: 0 }]),
                active,
                records: VecDeque::new(),
                head: 0,
                next: 0,
            }));
        }
        Ok(Topic {
            config,
            partitions,
            round_robin: AtomicU64::new(0),
        })
    }

    fn load(dir: &Path) -> Result<Topic> {
        let config: TopicConfig = serde_json::from_slice(&fs::read(dir.join("meta"))?)
            .map_err(|e| TopicError::InvalidConfig(e.to_string()))?;
        let mut partitions = Vec::new();
        for p in 0..config.partitions {
            let pdir = dir.join(p.to_string());
            fs::create_dir_all(&pdir)?;
            let mut bases: Vec<u64> = fs::read_dir(&pdir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    e.file_name()
                        .to_str()
                        .and_then(|s| s.strip_prefix("segment-"))
                        .and_then(|s| s.parse().ok())
                })
                .collect();
            bases.sort_unstable();
            let mut segments = VecDeque::new();
            let mut records = VecDeque::new();
            let mut next = bases.first().copied().unwrap_or(0);
            let head = next;
            for (i, base) in bases.iter().enumerate() {
                let path = pdir.join(format!("segment-{base}"));
                let data = frame::read_file(&path)?;
                let (frames, mut valid) = frame::scan(&data);
                let mut consumed = 0;
                for f in frames {
                    match decode_record(&config.name, p, f) {
                        Ok(r) if r.offset == next => {
                            next += 1;
                            consumed += frame::HEADER_LEN + f.len();
                            records.push_back(r);
                        }
                        _ => break,
                    }
                }
                valid = valid.min(consumed);
                if valid < data.len() {
                    OpenOptions::new().write(true).open(&path)?.set_len(valid as u64)?;
                }
                segments.push_back(PartSegment { base: *base, bytes: valid as u64 });
                if i + 1 < bases.len() && bases[i + 1] != next {
                    // a gap means later segments cannot be trusted
                    for stale in &bases[i + 1..] {
                        fs::remove_file(pdir.join(format!("segment-{stale}")))?;
                    }
                    break;
                }
            }
            if segments.is_empty() {
                segments.push_back(PartSegment { base: 0, bytes: 0 });
            }
            let active_base = segments.back().unwrap().base;
            let active = open_append(&pdir.join(format!("segment-{active_base}")))?;
            partitions.push(Mutex::new(Partition {
                dir: pdir,
                segments,
                active,
                records,
                head,
                next,
            }));
        }
        Ok(Topic {
            config,
            partitions,
            round_robin: AtomicU64::new(0),
        })
    }
}

impl TopicLog {
    /// Opens the log rooted at `dir` (normally `<state>/topics`).
    pub fn open(dir: &Path, clock: Arc<dyn Clock>, sync: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut topics = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.file_type()?.is_dir() && valid_topic_name(&name) && entry.path().join("meta").exists() {
                topics.insert(name, Arc::new(Topic::load(&entry.path())?));
            }
        }
        let offsets_path = dir.join("_offsets");
        let data = frame::read_file(&offsets_path)?;
        let (frames, valid) = frame::scan(&data);
        let mut coordinator = group::Coordinator::default();
        for f in frames {
            let Ok(mut d) = Decoder::new(f) else { break };
            let (Ok(g), Ok(t), Ok(p), Ok(o)) = (d.str(), d.str(), d.u32(), d.u64()) else {
                break;
            };
            coordinator.restore_commit(g, t, p, o);
        }
        let offsets_log = open_append(&offsets_path)?;
        offsets_log.set_len(valid as u64)?;
        Ok(TopicLog {
            dir: dir.to_path_buf(),
            clock,
            sync,
            topics: RwLock::new(topics),
            coordinator: Mutex::new(coordinator),
            offsets_log: Mutex::new(offsets_log),
            available: AtomicBool::new(true),
        })
    }

    pub fn create_topic(&self, config: TopicConfig) -> Result<()> {
        if !valid_topic_name(&config.name) {
            return Err(TopicError::InvalidName(config.name));
        }
        if config.partitions == 0 {
            return Err(TopicError::InvalidConfig("partitions must be at least 1".into()));
        }
        let mut topics = self.topics.write().unwrap();
        if topics.contains_key(&config.name) {
            return Err(TopicError::TopicExists(config.name));
        }
        let topic = Topic::create(&self.dir.join(&config.name), config.clone())?;
        topics.insert(config.name, Arc::new(topic));
        Ok(())
    }

    /// Creates the topic unless it already exists.
    pub fn ensure_topic(&self, config: TopicConfig) -> Result<()> {
        match self.create_topic(config) {
            Err(TopicError::TopicExists(_)) => Ok(()),
            other => other,
        }
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>> {
        self.topics
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| TopicError::UnknownTopic(name.to_string()))
    }

    pub fn has_topic(&self, name: &str) -> bool {
        self.topics.read().unwrap().contains_key(name)
    }

    pub fn partition_count(&self, name: &str) -> Result<u32> {
        Ok(self.topic(name)?.config.partitions)
    }

    /// Marks the log (un)available; while unavailable every produce fails.
    /// Models a broker outage.
    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    /// Appends a record; keyed records go to `fnv1a(key) % partitions`,
    /// keyless ones round-robin. Returns `(partition, offset)` after the
    /// record is written.
    pub fn produce(&self, topic: &str, key: Option<&[u8]>, value: &[u8]) -> Result<(u32, u64)> {
        if !self.is_available() {
            return Err(TopicError::Unavailable);
        }
        let t = self.topic(topic)?;
        let n = t.config.partitions as u64;
        let partition = match key {
            Some(k) => (fnv1a(k) % n) as u32,
            None => (t.round_robin.fetch_add(1, Ordering::Relaxed) % n) as u32,
        };
        let mut part = t.partitions[partition as usize].lock().unwrap();
        let record = TopicRecord {
            topic: topic.to_string(),
            partition,
            offset: part.next,
            key: key.map(<[u8]>::to_vec),
            value: value.to_vec(),
            timestamp: self.clock.now_ms(),
        };
        let framed = frame::encode(&encode_record(&record));
        if part.segments.back().unwrap().bytes >= t.config.segment_bytes {
            let base = part.next;
            part.active = open_append(&part.segment_path(base)).map_err(TopicError::from_io)?;
            part.segments.push_back(PartSegment { base, bytes: 0 });
        }
        if let Err(e) = part.active.write_all(&framed) {
            let len = part.segments.back().unwrap().bytes;
            let _ = part.active.set_len(len);
            return Err(TopicError::from_io(e));
        }
        if self.sync {
            part.active.sync_data()?;
        }
        part.segments.back_mut().unwrap().bytes += framed.len() as u64;
        part.next += 1;
        part.records.push_back(record.clone());

        while part.segments.len() > 1 && part.total_bytes() > t.config.retention_bytes {
            let old = part.segments.pop_front().unwrap();
            let path = part.segment_path(old.base);
            let _ = fs::remove_file(path);
            part.head = part.segments.front().unwrap().base;
            let head = part.head;
            while part.records.front().is_some_and(|r| r.offset < head) {
                part.records.pop_front();
            }
        }
        Ok((partition, record.offset))
    }

    /// Up to `max` records from `from` onward, in offset order.
    pub fn fetch(&self, topic: &str, partition: u32, from: u64, max: usize) -> Result<Vec<TopicRecord>> {
        let t = self.topic(topic)?;
        let part = t
            .partitions
            .get(partition as usize)
            .ok_or_else(|| TopicError::UnknownPartition {
                topic: topic.to_string(),
                partition,
            })?
            .lock()
            .unwrap();
        if from < part.head {
            return Err(TopicError::OffsetTrimmed { head: part.head });
        }
        let skip = (from - part.head) as usize;
        Ok(part.records.iter().skip(skip).take(max).cloned().collect())
    }

    /// `(head, tail)`: first retained offset and the next offset to be written.
    pub fn offsets(&self, topic: &str, partition: u32) -> Result<(u64, u64)> {
        let t = self.topic(topic)?;
        let part = t
            .partitions
            .get(partition as usize)
            .ok_or_else(|| TopicError::UnknownPartition {
                topic: topic.to_string(),
                partition,
            })?
            .lock()
            .unwrap();
        Ok((part.head, part.next))
    }

    pub fn topics(&self) -> Vec<TopicInfo> {
        let topics: Vec<Arc<Topic>> = self.topics.read().unwrap().values().cloned().collect();
        topics
            .iter()
            .map(|t| TopicInfo {
                config: t.config.clone(),
                partitions: t
                    .partitions
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let p = p.lock().unwrap();
                        PartitionInfo {
                            partition: i as u32,
                            head: p.head,
                            tail: p.next,
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn group_join(&self, group: &str, consumer: &str, topics: &[String]) -> Result<Assignment> {
        let mut counts = HashMap::new();
        for t in topics {
            counts.insert(t.clone(), self.partition_count(t)?);
        }
        Ok(self.coordinator.lock().unwrap().join(group, consumer, topics, &counts))
    }

    pub fn group_leave(&self, group: &str, consumer: &str) -> Result<Assignment> {
        self.coordinator
            .lock()
            .unwrap()
            .leave(group, consumer)
            .ok_or_else(|| TopicError::UnknownGroup(group.to_string()))
    }

    pub fn group_assignment(&self, group: &str) -> Result<(u64, Assignment)> {
        self.coordinator
            .lock()
            .unwrap()
            .assignment(group)
            .ok_or_else(|| TopicError::UnknownGroup(group.to_string()))
    }

    pub fn commit_offset(&self, group: &str, topic: &str, partition: u32, next_offset: u64) -> Result<()> {
        if partition >= self.partition_count(topic)? {
            return Err(TopicError::UnknownPartition {
                topic: topic.to_string(),
                partition,
            });
        }
        let mut coord = self.coordinator.lock().unwrap();
        if !coord.knows(group) {
            return Err(TopicError::UnknownGroup(group.to_string()));
        }
        let mut enc = Encoder::new();
        enc.str(group).str(topic).u32(partition).u64(next_offset);
        {
            let mut log = self.offsets_log.lock().unwrap();
            log.write_all(&frame::encode(&enc.finish()))
                .map_err(TopicError::from_io)?;
            if self.sync {
                log.sync_data()?;
            }
        }
        coord.restore_commit(group.to_string(), topic.to_string(), partition, next_offset);
        Ok(())
    }

    pub fn committed_offset(&self, group: &str, topic: &str, partition: u32) -> Option<u64> {
        self.coordinator
            .lock()
            .unwrap()
            .committed(group, topic, partition)
    }

    /// Where a group member starts reading: the committed offset, else the
    /// earliest retained offset.
    pub fn start_offset(&self, group: &str, topic: &str, partition: u32) -> Result<u64> {
        let (head, _) = self.offsets(topic, partition)?;
        Ok(self
            .committed_offset(group, topic, partition)
            .map_or(head, |c| c.max(head)))
    }
}

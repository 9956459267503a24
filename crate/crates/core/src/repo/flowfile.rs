// SPDX-License-Identifier: Apache-2.0

//! Write-ahead flowfile repository.
//!
//! Each committed session becomes one journal frame holding a transaction of
//! UPDATE/DELETE records. A checkpoint writes every live record to
//! `snapshot.tmp`, renames it over `snapshot` and truncates the journal.
//! The snapshot stores the last sequence it covers, so journal frames left
//! behind by a crash between swap and truncate are skipped on recovery.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::codec::{DecodeError, Decoder, Encoder};
use super::{frame, sync_dir, RepoError, Result};
use crate::clock::Timestamp;
use crate::fault::{CrashPoint, FaultInjector};
use crate::model::FlowFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordType {
    Update,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowFileRecord {
    pub flowfile: FlowFile,
    pub queue_id: String,
    pub record_type: RecordType,
}

impl FlowFileRecord {
    pub fn update(flowfile: FlowFile, queue_id: impl Into<String>) -> Self {
        FlowFileRecord {
            flowfile,
            queue_id: queue_id.into(),
            record_type: RecordType::Update,
        }
    }

    pub fn delete(flowfile: FlowFile) -> Self {
        FlowFileRecord {
            flowfile,
            queue_id: String::new(),
            record_type: RecordType::Delete,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowFileRepoConfig {
    /// Checkpoint once the journal grows past this many bytes.
    pub checkpoint_bytes: u64,
    /// ...or this long after the previous checkpoint.
    pub checkpoint_interval_ms: i64,
    /// fsync every commit. Off only in tests that do not simulate power loss.
    pub sync: bool,
}

impl Default for FlowFileRepoConfig {
    fn default() -> Self {
        FlowFileRepoConfig {
            checkpoint_bytes: 2 * 1024 * 1024,
            checkpoint_interval_ms: 60_000,
            sync: true,
        }
    }
}

struct Inner {
    journal: File,
    journal_len: u64,
    next_seq: u64,
    live: HashMap<String, FlowFileRecord>,
    last_checkpoint: Option<Timestamp>,
}

pub struct FlowFileRepository {
    dir: PathBuf,
    config: FlowFileRepoConfig,
    faults: Arc<FaultInjector>,
    inner: Mutex<Inner>,
}

fn encode_record(enc: &mut Encoder, r: &FlowFileRecord) {
    enc.u8(match r.record_type {
        RecordType::Update => 1,
        RecordType::Delete => 2,
    })
    .str(&r.queue_id)
    .flowfile(&r.flowfile);
}

fn decode_record(dec: &mut Decoder<'_>) -> std::result::Result<FlowFileRecord, DecodeError> {
    let record_type = match dec.u8()? {
        1 => RecordType::Update,
        2 => RecordType::Delete,
        t => return Err(DecodeError(format!("bad record type {t}"))),
    };
    Ok(FlowFileRecord {
        record_type,
        queue_id: dec.str()?,
        flowfile: dec.flowfile()?,
    })
}

fn decode_transaction(payload: &[u8]) -> std::result::Result<(u64, Vec<FlowFileRecord>), DecodeError> {
    let mut dec = Decoder::new(payload)?;
    let seq = dec.u64()?;
    let n = dec.u32()?;
    let records = (0..n)
        .map(|_| decode_record(&mut dec))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((seq, records))
}

fn apply(live: &mut HashMap<String, FlowFileRecord>, records: &[FlowFileRecord]) {
    for r in records {
        match r.record_type {
            RecordType::Update => {
                live.insert(r.flowfile.uuid.clone(), r.clone());
            }
            RecordType::Delete => {
                live.remove(&r.flowfile.uuid);
            }
        }
    }
}

impl FlowFileRepository {
    /// Opens (creating if needed) and recovers: snapshot, then journal
    /// frames up to the first torn or corrupt one. The torn tail is cut off
    /// so later appends start on a frame boundary.
    pub fn open(dir: &Path, config: FlowFileRepoConfig, faults: Arc<FaultInjector>) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut live = HashMap::new();
        let mut snapshot_seq = 0;

        let snap = frame::read_file(&dir.join("snapshot"))?;
        if !snap.is_empty() {
            let (frames, valid) = frame::scan(&snap);
            if frames.len() != 1 || valid != snap.len() {
                return Err(RepoError::CorruptSnapshot("bad frame".into()));
            }
            let (seq, records) =
                decode_transaction(frames[0]).map_err(|e| RepoError::CorruptSnapshot(e.0))?;
            snapshot_seq = seq;
            apply(&mut live, &records);
        }

        let journal_path = dir.join("journal");
        let data = frame::read_file(&journal_path)?;
        let (frames, mut valid) = frame::scan(&data);
        let mut last_seq = snapshot_seq;
        let mut consumed = 0usize;
        for f in &frames {
            let Ok((seq, records)) = decode_transaction(f) else {
                break;
            };
            consumed += frame::HEADER_LEN + f.len();
            if seq > snapshot_seq {
                apply(&mut live, &records);
            }
            last_seq = last_seq.max(seq);
        }
        valid = valid.min(consumed);

        let journal = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&journal_path)?;
        if (valid as u64) < data.len() as u64 {
            log::warn!(
                "flowfile journal: discarding {} bytes of torn tail",
                data.len() - valid
            );
            journal.set_len(valid as u64)?;
            journal.sync_all()?;
        }
        let _ = fs::remove_file(dir.join("snapshot.tmp"));

        Ok(FlowFileRepository {
            dir: dir.to_path_buf(),
            config,
            faults,
            inner: Mutex::new(Inner {
                journal,
                journal_len: valid as u64,
                next_seq: last_seq + 1,
                live,
                last_checkpoint: None,
            }),
        })
    }

    /// Appends one transaction; returns once it is on disk. All records of a
    /// transaction share a frame, so recovery sees all or none of them.
    pub fn commit(&self, records: &[FlowFileRecord]) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let mut enc = Encoder::new();
        enc.u64(inner.next_seq).u32(records.len() as u32);
        for r in records {
            encode_record(&mut enc, r);
        }
        let framed = frame::encode(&enc.finish());
        let before = inner.journal_len;
        let written = (|| -> std::io::Result<()> {
            use std::io::{Seek, SeekFrom};
            inner.journal.seek(SeekFrom::Start(before))?;
            inner.journal.write_all(&framed)?;
            if self.config.sync {
                inner.journal.sync_data()?;
            }
            Ok(())
        })();
        if let Err(e) = written {
            // keep the journal on a frame boundary for the next append
            let _ = inner.journal.set_len(before);
            return Err(e.into());
        }
        inner.journal_len += framed.len() as u64;
        inner.next_seq += 1;
        apply(&mut inner.live, records);
        Ok(())
    }

    pub fn checkpoint(&self, now: Timestamp) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let mut records: Vec<&FlowFileRecord> = inner.live.values().collect();
        records.sort_by(|a, b| a.flowfile.uuid.cmp(&b.flowfile.uuid));
        let mut enc = Encoder::new();
        enc.u64(inner.next_seq - 1).u32(records.len() as u32);
        for r in records {
            encode_record(&mut enc, r);
        }
        let framed = frame::encode(&enc.finish());

        let tmp = self.dir.join("snapshot.tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(&framed)?;
        f.sync_all()?;
        drop(f);
        if self.faults.hit(CrashPoint::CheckpointBeforeSwap) {
            return Err(RepoError::InjectedCrash(CrashPoint::CheckpointBeforeSwap));
        }
        fs::rename(&tmp, self.dir.join("snapshot"))?;
        sync_dir(&self.dir);
        if self.faults.hit(CrashPoint::CheckpointBeforeTruncate) {
            return Err(RepoError::InjectedCrash(CrashPoint::CheckpointBeforeTruncate));
        }
        inner.journal.set_len(0)?;
        inner.journal.sync_all()?;
        inner.journal_len = 0;
        inner.last_checkpoint = Some(now);
        Ok(())
    }

    /// Checkpoints when the journal is large or the interval has elapsed.
    pub fn maybe_checkpoint(&self, now: Timestamp) -> Result<bool> {
        let due = {
            let mut inner = self.inner.lock().unwrap();
            let last = *inner.last_checkpoint.get_or_insert(now);
            inner.journal_len > 0
                && (inner.journal_len >= self.config.checkpoint_bytes
                    || now - last >= self.config.checkpoint_interval_ms)
        };
        if due {
            self.checkpoint(now)?;
        }
        Ok(due)
    }

    /// Live flowfiles grouped by queue, each queue ordered by entry
    /// timestamp then uuid.
    pub fn recovered_queues(&self) -> BTreeMap<String, Vec<FlowFile>> {
        let inner = self.inner.lock().unwrap();
        let mut out: BTreeMap<String, Vec<FlowFile>> = BTreeMap::new();
        for r in inner.live.values() {
            out.entry(r.queue_id.clone())
                .or_default()
                .push(r.flowfile.clone());
        }
        for q in out.values_mut() {
            q.sort_by(|a, b| {
                (a.entry_timestamp, &a.uuid).cmp(&(b.entry_timestamp, &b.uuid))
            });
        }
        out
    }

    pub fn live_count(&self) -> usize {
        self.inner.lock().unwrap().live.len()
    }

    pub fn journal_len(&self) -> u64 {
        self.inner.lock().unwrap().journal_len
    }

    pub fn journal_path(&self) -> PathBuf {
        self.dir.join("journal")
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.dir.join("snapshot")
    }
}

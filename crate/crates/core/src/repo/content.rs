// SPDX-License-Identifier: Apache-2.0

//! Append-only content repository with a reference-counted claim ledger.
//!
//! Content is appended to numbered section files under
//! `content/<container>/`; a section rolls once it reaches
//! `max_section_bytes`. A claim whose count drops to zero is archived (still
//! readable until the retention period expires) or, with archiving off,
//! forgotten. A section file is deleted once no live or archived claim
//! points into it.
//!
//! Zero-length writes occupy a one-byte slot so that every claim has a
//! distinct `(section, offset)`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use super::codec::{Decoder, Encoder};
use super::{frame, RepoError, Result};
use crate::clock::{Clock, Timestamp};
use crate::model::ContentClaim;

#[derive(Debug, Clone)]
pub struct ContentConfig {
    pub container: String,
    pub max_section_bytes: u64,
    pub archive_enabled: bool,
    pub archive_retention_ms: i64,
    pub sync: bool,
}

impl Default for ContentConfig {
    fn default() -> Self {
        ContentConfig {
            container: "default".into(),
            max_section_bytes: 1024 * 1024,
            archive_enabled: true,
            archive_retention_ms: 12 * 60 * 60 * 1000,
            sync: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClaimLedgerEntry {
    pub claim: ContentClaim,
    pub ref_count: u64,
    pub archived: bool,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    ref_count: u64,
    archived_at: Option<Timestamp>,
}

struct Inner {
    active_section: u64,
    active: File,
    active_len: u64,
    ledger: HashMap<ContentClaim, Entry>,
    claims_per_section: HashMap<String, usize>,
    archive_log: File,
}

pub struct ContentRepository {
    dir: PathBuf,
    archive_dir: PathBuf,
    config: ContentConfig,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

const ARCHIVE: u8 = 1;
const UNARCHIVE: u8 = 2;
const PURGE: u8 = 3;

impl ContentRepository {
    /// `root` is the state directory; content lives in `root/content` and
    /// the archive ledger in `root/content-archive`. Reference counts start
    /// empty and are rebuilt by [`restore_ref`](Self::restore_ref) from
    /// recovered flowfiles; archived claims come back from the archive log.
    pub fn open(root: &Path, config: ContentConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        let dir = root.join("content").join(&config.container);
        let archive_dir = root.join("content-archive");
        fs::create_dir_all(&dir)?;
        fs::create_dir_all(&archive_dir)?;

        let mut max_section = 0;
        for entry in fs::read_dir(&dir)? {
            if let Some(n) = entry?.file_name().to_str().and_then(|s| s.parse::<u64>().ok()) {
                max_section = max_section.max(n);
            }
        }

        let mut ledger: HashMap<ContentClaim, Entry> = HashMap::new();
        let log_path = archive_dir.join("ledger");
        let data = frame::read_file(&log_path)?;
        let (frames, valid) = frame::scan(&data);
        for f in frames {
            let mut dec = Decoder::new(f)?;
            let op = dec.u8()?;
            let claim = dec.claim()?;
            let at = dec.i64()?;
            match op {
                ARCHIVE => {
                    ledger.insert(claim, Entry { ref_count: 0, archived_at: Some(at) });
                }
                UNARCHIVE | PURGE => {
                    ledger.remove(&claim);
                }
                _ => {}
            }
        }
        let archive_log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        archive_log.set_len(valid as u64)?;

        let mut claims_per_section = HashMap::new();
        for c in ledger.keys() {
            *claims_per_section.entry(c.section.clone()).or_insert(0) += 1;
        }

        // never append to a section that may end in a torn write
        let active_section = max_section + 1;
        let active = Self::open_section(&dir, active_section)?;
        Ok(ContentRepository {
            dir,
            archive_dir,
            config,
            clock,
            inner: Mutex::new(Inner {
                active_section,
                active,
                active_len: 0,
                ledger,
                claims_per_section,
                archive_log,
            }),
        })
    }

    fn open_section(dir: &Path, n: u64) -> Result<File> {
        Ok(OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(n.to_string()))?)
    }

    pub fn config(&self) -> &ContentConfig {
        &self.config
    }

    /// Appends `bytes`; the returned claim starts with a reference count of 1.
    pub fn write(&self, bytes: &[u8]) -> Result<ContentClaim> {
        let mut inner = self.inner.lock().unwrap();
        let slot = bytes.len().max(1) as u64;
        if inner.active_len > 0 && inner.active_len + slot > self.config.max_section_bytes {
            let next = inner.active_section + 1;
            inner.active = Self::open_section(&self.dir, next)?;
            let prev = inner.active_section;
            inner.active_section = next;
            inner.active_len = 0;
            self.remove_section_if_unused(&mut inner, &prev.to_string());
        }
        let offset = inner.active_len;
        let res = if bytes.is_empty() {
            inner.active.write_all(&[0])
        } else {
            inner.active.write_all(bytes)
        };
        if let Err(e) = res {
            let len = inner.active_len;
            let _ = inner.active.set_len(len);
            return Err(e.into());
        }
        if self.config.sync {
            inner.active.sync_data()?;
        }
        inner.active_len += slot;
        let claim = ContentClaim {
            container: self.config.container.clone(),
            section: inner.active_section.to_string(),
            offset,
            length: bytes.len() as u64,
        };
        inner.ledger.insert(claim.clone(), Entry { ref_count: 1, archived_at: None });
        *inner.claims_per_section.entry(claim.section.clone()).or_insert(0) += 1;
        Ok(claim)
    }

    /// Reads the whole claim, or `[start, start+len)` of it.
    pub fn read(&self, claim: &ContentClaim, range: Option<(u64, u64)>) -> Result<Vec<u8>> {
        {
            let inner = self.inner.lock().unwrap();
            if claim.container != self.config.container || !inner.ledger.contains_key(claim) {
                return Err(RepoError::ClaimNotFound);
            }
        }
        let (start, len) = range.unwrap_or((0, claim.length));
        if start.checked_add(len).is_none_or(|end| end > claim.length) {
            return Err(RepoError::RangeOutOfBounds {
                start,
                len,
                claim_len: claim.length,
            });
        }
        let mut buf = vec![0; len as usize];
        if len > 0 {
            let mut f = File::open(self.dir.join(&claim.section))?;
            f.seek(SeekFrom::Start(claim.offset + start))?;
            f.read_exact(&mut buf)?;
        }
        Ok(buf)
    }

    /// Adds `delta` (+1 or -1) to the claim's count and returns the new
    /// count. Incrementing an archived claim brings it back to life.
    pub fn adjust_ref(&self, claim: &ContentClaim, delta: i64) -> Result<u64> {
        self.adjust(claim, delta, self.config.archive_enabled)
    }

    /// Like `adjust_ref(claim, -1)` but never archives: for content written
    /// by a session that rolled back.
    pub fn discard(&self, claim: &ContentClaim) -> Result<u64> {
        self.adjust(claim, -1, false)
    }

    /// Re-registers a reference held by a recovered flowfile. Unknown
    /// claims (first reference after restart) are created with count 1.
    pub fn restore_ref(&self, claim: &ContentClaim) -> Result<u64> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.ledger.contains_key(claim) {
            if !self.dir.join(&claim.section).exists() {
                return Err(RepoError::ClaimNotFound);
            }
            inner.ledger.insert(claim.clone(), Entry { ref_count: 1, archived_at: None });
            *inner.claims_per_section.entry(claim.section.clone()).or_insert(0) += 1;
            return Ok(1);
        }
        drop(inner);
        self.adjust(claim, 1, self.config.archive_enabled)
    }

    fn adjust(&self, claim: &ContentClaim, delta: i64, archive: bool) -> Result<u64> {
        let mut inner = self.inner.lock().unwrap();
        let now = self.clock.now_ms();
        let entry = *inner.ledger.get(claim).ok_or(RepoError::ClaimNotFound)?;
        let count = entry.ref_count as i64 + delta;
        if count < 0 {
            return Err(RepoError::RefUnderflow);
        }
        if entry.archived_at.is_some() && count > 0 {
            self.log(&mut inner, UNARCHIVE, claim, now)?;
        }
        if count > 0 {
            inner.ledger.insert(claim.clone(), Entry { ref_count: count as u64, archived_at: None });
        } else if archive {
            if entry.archived_at.is_none() {
                self.log(&mut inner, ARCHIVE, claim, now)?;
                inner.ledger.insert(claim.clone(), Entry { ref_count: 0, archived_at: Some(now) });
            }
        } else {
            if entry.archived_at.is_some() {
                self.log(&mut inner, PURGE, claim, now)?;
            }
            self.forget(&mut inner, claim);
        }
        Ok(count as u64)
    }

    fn log(&self, inner: &mut Inner, op: u8, claim: &ContentClaim, at: Timestamp) -> Result<()> {
        let mut enc = Encoder::new();
        enc.u8(op).claim(claim).i64(at);
        inner.archive_log.write_all(&frame::encode(&enc.finish()))?;
        if self.config.sync {
            inner.archive_log.sync_data()?;
        }
        Ok(())
    }

    fn forget(&self, inner: &mut Inner, claim: &ContentClaim) {
        if inner.ledger.remove(claim).is_some() {
            let n = inner.claims_per_section.entry(claim.section.clone()).or_insert(1);
            *n -= 1;
            if *n == 0 {
                inner.claims_per_section.remove(&claim.section);
                self.remove_section_if_unused(inner, &claim.section);
            }
        }
    }

    fn remove_section_if_unused(&self, inner: &mut Inner, section: &str) {
        if section != inner.active_section.to_string()
            && !inner.claims_per_section.contains_key(section)
        {
            let _ = fs::remove_file(self.dir.join(section));
        }
    }

    /// Deletes archived claims whose retention expired. Returns how many.
    pub fn purge_expired(&self, now: Timestamp) -> Result<usize> {
        let mut inner = self.inner.lock().unwrap();
        let expired: Vec<ContentClaim> = inner
            .ledger
            .iter()
            .filter(|(_, e)| {
                e.archived_at
                    .is_some_and(|t| now - t >= self.config.archive_retention_ms)
            })
            .map(|(c, _)| c.clone())
            .collect();
        for c in &expired {
            self.log(&mut inner, PURGE, c, now)?;
            self.forget(&mut inner, c);
        }
        Ok(expired.len())
    }

    /// Removes section files with no live or archived claims. Called after
    /// references have been restored on startup.
    pub fn sweep_sections(&self) -> Result<usize> {
        let mut inner = self.inner.lock().unwrap();
        let mut removed = 0;
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.parse::<u64>().is_ok()
                && name != inner.active_section.to_string()
                && !inner.claims_per_section.contains_key(&name)
            {
                fs::remove_file(self.dir.join(&name))?;
                removed += 1;
            }
        }
        inner.claims_per_section.retain(|_, n| *n > 0);
        Ok(removed)
    }

    pub fn ledger_entry(&self, claim: &ContentClaim) -> Option<ClaimLedgerEntry> {
        let inner = self.inner.lock().unwrap();
        inner.ledger.get(claim).map(|e| ClaimLedgerEntry {
            claim: claim.clone(),
            ref_count: e.ref_count,
            archived: e.archived_at.is_some(),
        })
    }

    /// Every ledger entry, ordered by claim.
    pub fn ledger(&self) -> Vec<ClaimLedgerEntry> {
        let inner = self.inner.lock().unwrap();
        let sorted: BTreeMap<&ContentClaim, &Entry> = inner.ledger.iter().collect();
        sorted
            .into_iter()
            .map(|(c, e)| ClaimLedgerEntry {
                claim: c.clone(),
                ref_count: e.ref_count,
                archived: e.archived_at.is_some(),
            })
            .collect()
    }

    pub fn section_count(&self) -> usize {
        fs::read_dir(&self.dir).map(|d| d.count()).unwrap_or(0)
    }

    pub fn archive_dir(&self) -> &Path {
        &self.archive_dir
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use rand::{Rng, SeedableRng};

    fn repo(dir: &Path, archive: bool) -> (ContentRepository, Arc<VirtualClock>) {
        let clock = Arc::new(VirtualClock::new(0));
        let cfg = ContentConfig {
            archive_enabled: archive,
            archive_retention_ms: 1000,
            ..Default::default()
        };
        (ContentRepository::open(dir, cfg, clock.clone()).unwrap(), clock)
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (r, _) = repo(dir.path(), true);
        let c = r.write(b"abc").unwrap();
        assert_eq!(c.length, 3);
        assert_eq!(r.read(&c, None).unwrap(), b"abc");
        assert_eq!(r.read(&c, Some((1, 2))).unwrap(), b"bc");
        assert!(matches!(
            r.read(&c, Some((2, 2))),
            Err(RepoError::RangeOutOfBounds { .. })
        ));
        assert_eq!(r.ledger_entry(&c).unwrap().ref_count, 1);
    }

    #[test]
    fn zero_length_claims_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (r, _) = repo(dir.path(), true);
        let a = r.write(b"").unwrap();
        let b = r.write(b"").unwrap();
        assert_eq!(a.length, 0);
        assert_ne!(a, b);
        assert_eq!(r.read(&a, None).unwrap(), b"");
    }

    #[test]
    fn ref_counting_with_archive() {
        let dir = tempfile::tempdir().unwrap();
        let (r, clock) = repo(dir.path(), true);
        let c = r.write(b"abc").unwrap();
        assert_eq!(r.adjust_ref(&c, 1).unwrap(), 2);
        assert_eq!(r.adjust_ref(&c, -1).unwrap(), 1);
        assert_eq!(r.adjust_ref(&c, -1).unwrap(), 0);
        let e = r.ledger_entry(&c).unwrap();
        assert!(e.archived && e.ref_count == 0);
        assert_eq!(r.read(&c, None).unwrap(), b"abc");
        assert!(matches!(r.adjust_ref(&c, -1), Err(RepoError::RefUnderflow)));

        clock.set(999);
        assert_eq!(r.purge_expired(clock.now_ms()).unwrap(), 0);
        clock.set(1000);
        assert_eq!(r.purge_expired(clock.now_ms()).unwrap(), 1);
        assert!(matches!(r.read(&c, None), Err(RepoError::ClaimNotFound)));
    }

    #[test]
    fn ref_counting_without_archive() {
        let dir = tempfile::tempdir().unwrap();
        let (r, _) = repo(dir.path(), false);
        let c = r.write(b"abc").unwrap();
        assert_eq!(r.adjust_ref(&c, -1).unwrap(), 0);
        assert!(matches!(r.read(&c, None), Err(RepoError::ClaimNotFound)));
        assert!(r.ledger().is_empty());
    }

    #[test]
    fn increment_revives_archived_claim() {
        let dir = tempfile::tempdir().unwrap();
        let (r, clock) = repo(dir.path(), true);
        let c = r.write(b"abc").unwrap();
        r.adjust_ref(&c, -1).unwrap();
        assert_eq!(r.adjust_ref(&c, 1).unwrap(), 1);
        assert!(!r.ledger_entry(&c).unwrap().archived);
        clock.set(10_000);
        assert_eq!(r.purge_expired(10_000).unwrap(), 0);
        assert_eq!(r.read(&c, None).unwrap(), b"abc");
    }

    #[test]
    fn discard_skips_archive() {
        let dir = tempfile::tempdir().unwrap();
        let (r, _) = repo(dir.path(), true);
        let c = r.write(b"abc").unwrap();
        r.discard(&c).unwrap();
        assert!(r.ledger().is_empty());
    }

    #[test]
    fn archive_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let c = {
            let (r, _) = repo(dir.path(), true);
            let c = r.write(b"hello").unwrap();
            let gone = r.write(b"bye").unwrap();
            r.adjust_ref(&c, -1).unwrap();
            r.adjust_ref(&gone, -1).unwrap();
            r.purge_expired(5000).unwrap();
            let c2 = r.write(b"x").unwrap();
            r.adjust_ref(&c2, -1).unwrap();
            c2
        };
        let (r, _) = repo(dir.path(), true);
        assert_eq!(r.read(&c, None).unwrap(), b"x");
        assert_eq!(r.ledger().len(), 1);
    }

    #[test]
    fn sections_roll_and_are_removed_when_unused() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(VirtualClock::new(0));
        let cfg = ContentConfig {
            archive_enabled: false,
            max_section_bytes: 10,
            ..Default::default()
        };
        let r = ContentRepository::open(dir.path(), cfg, clock).unwrap();
        let a = r.write(b"0123456789").unwrap();
        let b = r.write(b"x").unwrap();
        assert_ne!(a.section, b.section);
        assert_eq!(r.section_count(), 2);
        r.adjust_ref(&a, -1).unwrap();
        assert_eq!(r.section_count(), 1);
        assert_eq!(r.read(&b, None).unwrap(), b"x");
    }

    #[test]
    fn restore_rebuilds_counts_and_sweeps() {
        let dir = tempfile::tempdir().unwrap();
        let (keep, _drop) = {
            let (r, _) = repo(dir.path(), false);
            (r.write(b"keep").unwrap(), r.write(b"drop").unwrap())
        };
        let (r, _) = repo(dir.path(), false);
        assert!(matches!(r.read(&keep, None), Err(RepoError::ClaimNotFound)));
        assert_eq!(r.restore_ref(&keep).unwrap(), 1);
        assert_eq!(r.restore_ref(&keep).unwrap(), 2);
        assert_eq!(r.sweep_sections().unwrap(), 0);
        assert_eq!(r.read(&keep, None).unwrap(), b"keep");
    }

    #[test]
    fn random_writes_do_not_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(VirtualClock::new(0));
        let cfg = ContentConfig {
            max_section_bytes: 4096,
            ..Default::default()
        };
        let r = ContentRepository::open(dir.path(), cfg, clock).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut by_section: HashMap<String, Vec<(u64, u64)>> = HashMap::new();
        let mut claims = Vec::new();
        for i in 0..10_000u32 {
            let len = rng.gen_range(0..64);
            let data: Vec<u8> = (0..len).map(|j| (i as u8).wrapping_add(j)).collect();
            let c = r.write(&data).unwrap();
            by_section
                .entry(c.section.clone())
                .or_default()
                .push((c.offset, c.length.max(1)));
            claims.push((c, data));
        }
        for ranges in by_section.values_mut() {
            ranges.sort();
            for w in ranges.windows(2) {
                assert!(w[0].0 + w[0].1 <= w[1].0);
            }
        }
        for (c, data) in claims.iter().step_by(97) {
            assert_eq!(&r.read(c, None).unwrap(), data);
        }
    }
}

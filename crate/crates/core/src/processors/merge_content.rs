// SPDX-License-Identifier: Apache-2.0

//! Bins inputs and emits one merged flowfile per bin. Binned flowfiles stay
//! in a session owned by the processor until the bin flushes; stopping the
//! processor returns them to the input queue.

use std::sync::{Arc, Mutex};

use super::{unescape, BATCH};
use crate::clock::Timestamp;
use crate::engine::processor::{
    parse_property, ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties, PropertyDescriptor,
};
use crate::engine::session::ProcessSession;
use crate::model::{rel, Attributes, FlowFile, FILENAME_ATTR, UUID_ATTR};

pub const MERGE_COUNT_ATTR: &str = "merge.count";

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "MergeContent",
        relationships: vec![rel::MERGED, rel::ORIGINAL, rel::FAILURE],
        properties: vec![
            PropertyDescriptor::optional("min_entries", Some("1")),
            PropertyDescriptor::optional("max_entries", Some("1000")),
            PropertyDescriptor::optional("max_bin_bytes", Some("1048576")),
            PropertyDescriptor::optional("max_bin_age_ms", None),
            PropertyDescriptor::optional("demarcator", Some("")),
        ],
        dynamic_relationships: false,
        trigger_when_empty: true,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeConfig {
    pub min_entries: usize,
    pub max_entries: usize,
    pub max_bin_bytes: u64,
    pub max_bin_age_ms: Option<i64>,
    pub demarcator: Vec<u8>,
}

struct Bin {
    session: ProcessSession,
    items: Vec<FlowFile>,
    bytes: u64,
    opened_at: Timestamp,
}

pub struct MergeContent {
    config: MergeConfig,
    bin: Mutex<Option<Bin>>,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    let min_entries: usize = parse_property(props, "min_entries")?.unwrap_or(1);
    let max_entries: usize = parse_property(props, "max_entries")?.unwrap_or(1000);
    let max_bin_bytes: u64 = parse_property(props, "max_bin_bytes")?.unwrap_or(1 << 20);
    let max_bin_age_ms: Option<i64> = parse_property(props, "max_bin_age_ms")?;
    if min_entries == 0 {
        return Err(ConfigError::new("min_entries must be at least 1"));
    }
    if max_entries < min_entries {
        return Err(ConfigError::new("max_entries must be at least min_entries"));
    }
    if max_bin_bytes == 0 {
        return Err(ConfigError::new("max_bin_bytes must be positive"));
    }
    if max_bin_age_ms.is_some_and(|a| a < 0) {
        return Err(ConfigError::new("max_bin_age_ms must not be negative"));
    }
    Ok(Arc::new(MergeContent {
        config: MergeConfig {
            min_entries,
            max_entries,
            max_bin_bytes,
            max_bin_age_ms,
            demarcator: unescape(props.get("demarcator").map(String::as_str).unwrap_or("")).into_bytes(),
        },
        bin: Mutex::new(None),
    }))
}

/// Attributes shared with the same value by every input, without the
/// per-flowfile identity attributes.
fn common_attributes(items: &[FlowFile]) -> Attributes {
    let mut common = items[0].attributes.clone();
    common.remove(UUID_ATTR);
    common.remove(FILENAME_ATTR);
    for ff in &items[1..] {
        common.retain(|k, v| ff.attributes.get(k) == Some(v));
    }
    common
}

impl MergeContent {
    fn flush(&self, mut bin: Bin) -> Result<(), ProcessError> {
        let mut content = Vec::with_capacity(bin.bytes as usize);
        for (i, ff) in bin.items.iter().enumerate() {
            if i > 0 {
                content.extend_from_slice(&self.config.demarcator);
            }
            content.extend(bin.session.read(ff)?);
        }
        let mut attrs = common_attributes(&bin.items);
        attrs.insert(MERGE_COUNT_ATTR.into(), bin.items.len().to_string());
        let merged = bin.session.join(&bin.items, attrs, &content)?;
        bin.session.transfer(&merged, rel::MERGED)?;
        for ff in &bin.items {
            bin.session.transfer(ff, rel::ORIGINAL)?;
        }
        bin.session.commit()?;
        Ok(())
    }

    fn age_due(&self, bin: &Bin, now: Timestamp) -> bool {
        self.config
            .max_bin_age_ms
            .is_some_and(|age| now - bin.opened_at >= age && bin.items.len() >= self.config.min_entries)
    }
}

impl Processor for MergeContent {
    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let now = ctx.now();
        let mut slot = self.bin.lock().unwrap();
        for ff in session.get_batch(BATCH) {
            let size = ff.size();
            if size > self.config.max_bin_bytes {
                session.transfer(&ff, rel::FAILURE)?;
                continue;
            }
            if slot
                .as_ref()
                .is_some_and(|b| b.bytes + size > self.config.max_bin_bytes)
            {
                self.flush(slot.take().unwrap())?;
            }
            let bin = slot.get_or_insert_with(|| Bin {
                session: ctx.new_session(),
                items: Vec::new(),
                bytes: 0,
                opened_at: now,
            });
            session.migrate(&ff, &mut bin.session)?;
            bin.items.push(ff);
            bin.bytes += size;
            if bin.items.len() >= self.config.max_entries || bin.bytes >= self.config.max_bin_bytes {
                self.flush(slot.take().unwrap())?;
            }
        }
        if slot.as_ref().is_some_and(|b| self.age_due(b, now)) {
            self.flush(slot.take().unwrap())?;
        }
        match (slot.as_ref(), self.config.max_bin_age_ms) {
            (Some(b), Some(age)) if b.items.len() >= self.config.min_entries => ctx.idle_until(b.opened_at + age),
            _ => ctx.idle_until(i64::MAX),
        }
        Ok(())
    }

    fn on_stopped(&self, _ctx: &ProcessContext) {
        if let Some(mut bin) = self.bin.lock().unwrap().take() {
            bin.session.rollback();
        }
    }
}

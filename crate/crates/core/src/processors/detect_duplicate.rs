// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use super::{eval, BATCH};
use crate::clock::Timestamp;
use crate::engine::processor::{
    compile_property, parse_property, ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties,
    PropertyDescriptor,
};
use crate::engine::session::ProcessSession;
use crate::expr::CompiledExpression;
use crate::model::rel;

pub const DEFAULT_CAPACITY: usize = 100_000;

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "DetectDuplicate",
        relationships: vec![rel::DUPLICATE, rel::NON_DUPLICATE, rel::FAILURE],
        properties: vec![
            PropertyDescriptor::required("key_expression").expression(),
            PropertyDescriptor::optional("cache_capacity", Some("100000")),
            PropertyDescriptor::optional("age_off_ms", None),
        ],
        dynamic_relationships: false,
        trigger_when_empty: false,
    }
}

struct Entry {
    cached_at: Timestamp,
    tick: u64,
}

/// Bounded LRU of seen keys with optional age-off measured from when the
/// key was cached.
pub struct SeenCache {
    capacity: usize,
    age_off_ms: Option<i64>,
    entries: HashMap<String, Entry>,
    by_recency: BTreeMap<u64, String>,
    tick: u64,
}

impl SeenCache {
    pub fn new(capacity: usize, age_off_ms: Option<i64>) -> Self {
        SeenCache {
            capacity,
            age_off_ms,
            entries: HashMap::new(),
            by_recency: BTreeMap::new(),
            tick: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records a sighting; true if the key was already cached and fresh.
    pub fn check_and_insert(&mut self, key: &str, now: Timestamp) -> bool {
        self.tick += 1;
        let tick = self.tick;
        if let Some(e) = self.entries.get_mut(key) {
            let expired = self.age_off_ms.is_some_and(|age| now - e.cached_at > age);
            self.by_recency.remove(&e.tick);
            if !expired {
                e.tick = tick;
                self.by_recency.insert(tick, key.to_string());
                return true;
            }
            self.entries.remove(key);
        }
        while self.entries.len() >= self.capacity {
            let Some((_, oldest)) = self.by_recency.pop_first() else { break };
            self.entries.remove(&oldest);
        }
        self.entries.insert(key.to_string(), Entry { cached_at: now, tick });
        self.by_recency.insert(tick, key.to_string());
        false
    }
}

pub struct DetectDuplicate {
    key: CompiledExpression,
    cache: Mutex<SeenCache>,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    let key = compile_property(props, "key_expression")?.ok_or_else(|| ConfigError::new("key_expression is required"))?;
    let capacity: usize = parse_property(props, "cache_capacity")?.unwrap_or(DEFAULT_CAPACITY);
    if capacity == 0 {
        return Err(ConfigError::new("cache_capacity must be at least 1"));
    }
    let age_off: Option<i64> = parse_property(props, "age_off_ms")?;
    if age_off.is_some_and(|a| a < 0) {
        return Err(ConfigError::new("age_off_ms must not be negative"));
    }
    Ok(Arc::new(DetectDuplicate {
        key,
        cache: Mutex::new(SeenCache::new(capacity, age_off)),
    }))
}

impl Processor for DetectDuplicate {
    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let now = ctx.now();
        let mut cache = self.cache.lock().unwrap();
        for ff in session.get_batch(BATCH) {
            let route = match eval(&self.key, &ff, now) {
                Ok(key) if cache.check_and_insert(&key, now) => rel::DUPLICATE,
                Ok(_) => rel::NON_DUPLICATE,
                Err(e) => {
                    log::debug!("dedup key for {}: {e}", ff.uuid);
                    rel::FAILURE
                }
            };
            session.transfer(&ff, route)?;
        }
        Ok(())
    }
}

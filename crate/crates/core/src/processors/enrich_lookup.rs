// SPDX-License-Identifier: Apache-2.0

//! Adds an attribute from a `key<TAB>value` table file. The table is
//! reloaded whenever its modification time or length changes.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use super::{eval, BATCH};
use crate::engine::processor::{
    compile_property, ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties,
    PropertyDescriptor,
};
use crate::engine::session::ProcessSession;
use crate::expr::CompiledExpression;
use crate::model::rel;

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "EnrichLookup",
        relationships: vec![rel::MATCHED, rel::UNMATCHED, rel::FAILURE],
        properties: vec![
            PropertyDescriptor::required("table_path"),
            PropertyDescriptor::required("key_expression").expression(),
            PropertyDescriptor::required("target_attribute"),
            PropertyDescriptor::optional("on_miss", Some("unmatched")),
        ],
        dynamic_relationships: false,
        trigger_when_empty: false,
    }
}

/// Parses table text. Blank lines and lines starting with `#` are ignored;
/// the value is everything after the first tab.
pub fn parse_table(text: &str) -> Result<HashMap<String, String>, String> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected key<TAB>value", i + 1))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

type Stamp = (Option<SystemTime>, u64);

struct Table {
    stamp: Option<Stamp>,
    entries: HashMap<String, String>,
}

pub struct EnrichLookup {
    path: PathBuf,
    key: CompiledExpression,
    target: String,
    pass_on_miss: bool,
    table: Mutex<Table>,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    let pass_on_miss = match props.get("on_miss").map(String::as_str).unwrap_or("unmatched") {
        "unmatched" => false,
        "pass" => true,
        other => return Err(ConfigError::new(format!("on_miss must be 'unmatched' or 'pass', got '{other}'"))),
    };
    let target = props.get("target_attribute").cloned().unwrap_or_default();
    if target.is_empty() || target == crate::model::UUID_ATTR {
        return Err(ConfigError::new("target_attribute must name a writable attribute"));
    }
    Ok(Arc::new(EnrichLookup {
        path: PathBuf::from(props.get("table_path").cloned().unwrap_or_default()),
        key: compile_property(props, "key_expression")?.ok_or_else(|| ConfigError::new("key_expression is required"))?,
        target,
        pass_on_miss,
        table: Mutex::new(Table {
            stamp: None,
            entries: HashMap::new(),
        }),
    }))
}

impl EnrichLookup {
    fn stamp(&self) -> std::io::Result<Stamp> {
        let m = fs::metadata(&self.path)?;
        Ok((m.modified().ok(), m.len()))
    }

    fn load(&self, table: &mut Table) -> Result<(), String> {
        let stamp = self.stamp().map_err(|e| format!("{}: {e}", self.path.display()))?;
        if table.stamp == Some(stamp) {
            return Ok(());
        }
        let text = fs::read_to_string(&self.path).map_err(|e| format!("{}: {e}", self.path.display()))?;
        table.entries = parse_table(&text).map_err(|e| format!("{}: {e}", self.path.display()))?;
        table.stamp = Some(stamp);
        Ok(())
    }
}

impl Processor for EnrichLookup {
    fn on_scheduled(&self, _ctx: &ProcessContext) -> Result<(), ProcessError> {
        let mut t = self.table.lock().unwrap();
        t.stamp = None;
        self.load(&mut t).map_err(ProcessError::Other)
    }

    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let now = ctx.now();
        let mut table = self.table.lock().unwrap();
        if let Err(e) = self.load(&mut table) {
            log::warn!("keeping previous lookup table: {e}");
        }
        for ff in session.get_batch(BATCH) {
            let key = match eval(&self.key, &ff, now) {
                Ok(k) => k,
                Err(_) => {
                    session.transfer(&ff, rel::FAILURE)?;
                    continue;
                }
            };
            match table.entries.get(&key) {
                Some(v) => {
                    let ff = session.put_attribute(&ff, &self.target, v)?;
                    session.transfer(&ff, rel::MATCHED)?;
                }
                None if self.pass_on_miss => session.transfer(&ff, rel::MATCHED)?,
                None => session.transfer(&ff, rel::UNMATCHED)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_format() {
        let t = parse_table("# sources\nnyt\tNew York Times\n\nbbc\tBBC\tNews\r\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t["nyt"], "New York Times");
        assert_eq!(t["bbc"], "BBC\tNews");
        assert!(parse_table("no tab here").unwrap_err().contains("line 1"));
    }
}

// SPDX-License-Identifier: Apache-2.0

//! Single-processor harness: `src` (stopped) feeds the processor under test
//! through connection `in`; each of its relationships goes to `out_<rel>`,
//! read by a stopped `sink`.

#![allow(dead_code)]

use std::sync::Arc;

use flowforge_core::clock::VirtualClock;
use flowforge_core::control::flow::Schedule;
use flowforge_core::control::FlowDefinition;
use flowforge_core::engine::{Engine, EngineConfig};
use flowforge_core::model::{Attributes, FlowFile};
use flowforge_core::processors::builtin_registry;
use tempfile::TempDir;

pub const T0: i64 = 1_600_000_000_000;

pub struct Harness {
    pub dir: TempDir,
    pub clock: Arc<VirtualClock>,
    pub engine: Engine,
}

pub fn flow(type_name: &str, props: &[(&str, &str)], rels: &[&str], schedule: &str) -> FlowDefinition {
    let mut yaml = format!(
        "processors:
  - {{id: src, type: GenerateNews, state: STOPPED}}
  - {{id: p, type: {type_name}, schedule: {schedule}}}
  - {{id: sink, type: ControlRate, properties: {{max_per_sec: 1}}, state: STOPPED}}
connections:
  - {{id: in, source: {{processor: src, relationship: success}}, destination: p}}
"
    );
    for r in rels {
        yaml.push_str(&format!(
            "  - {{id: out_{r}, source: {{processor: p, relationship: {r}}}, destination: sink}}\n"
        ));
    }
    yaml.push_str("auto_terminate:\n  sink: [success]\n");
    let mut f = FlowDefinition::from_yaml(&yaml).unwrap();
    for (k, v) in props {
        f.processors[1].properties.insert(k.to_string(), v.to_string());
    }
    f
}

impl Harness {
    pub fn new(type_name: &str, props: &[(&str, &str)], rels: &[&str]) -> Harness {
        Harness::with_flow(flow(type_name, props, rels, "event_driven"))
    }

    pub fn with_flow(flow: FlowDefinition) -> Harness {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(VirtualClock::new(T0));
        let cfg = EngineConfig::new(dir.path().join("state")).with_clock(clock.clone());
        let engine = Engine::open(cfg, Arc::new(builtin_registry()), flow).unwrap();
        Harness { dir, clock, engine }
    }

    /// Timer-scheduled variant. With `source` the processor under test has
    /// no incoming connection.
    pub fn timer(type_name: &str, props: &[(&str, &str)], rels: &[&str], source: bool) -> Harness {
        let mut f = flow(type_name, props, rels, "timer");
        f.processors[1].schedule = Schedule::Timer { period_ms: 0 };
        if source {
            f.connections.retain(|c| c.id != "in");
            f.auto_terminate.insert("src".into(), vec!["success".into()]);
        }
        Harness::with_flow(f)
    }

    pub fn push(&self, content: &str, attrs: &[(&str, &str)]) -> FlowFile {
        self.push_many(&[(content, attrs)]).remove(0)
    }

    pub fn push_many(&self, items: &[(&str, &[(&str, &str)])]) -> Vec<FlowFile> {
        let mut s = self.engine.session("src").unwrap();
        let mut out = Vec::new();
        for (content, attrs) in items {
            let a: Attributes = attrs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
            let ff = s.create_with_content(a, content.as_bytes()).unwrap();
            s.transfer(&ff, "success").unwrap();
            out.push(ff);
        }
        s.commit().unwrap();
        out
    }

    pub fn run(&self) -> usize {
        self.engine.run_until_idle(10_000).unwrap()
    }

    pub fn out(&self, rel: &str) -> Vec<FlowFile> {
        let conn = self.engine.graph().connection(&format!("out_{rel}")).unwrap().clone();
        conn.list(usize::MAX)
    }

    pub fn queued(&self, id: &str) -> u64 {
        self.engine.graph().connection(id).unwrap().queued_count()
    }

    pub fn text(&self, ff: &FlowFile) -> String {
        match &ff.claim {
            None => String::new(),
            Some(c) => String::from_utf8(self.engine.content().read(c, None).unwrap()).unwrap(),
        }
    }

    pub fn texts(&self, rel: &str) -> Vec<String> {
        self.out(rel).iter().map(|f| self.text(f)).collect()
    }
}

// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::distribution::{valid_topic_name, TopicConfig};
use crate::engine::connection::{Prioritizer, DEFAULT_OBJECT_THRESHOLD, DEFAULT_SIZE_THRESHOLD};
use crate::engine::processor::{with_defaults, Properties, Registry};
use crate::model::DEFAULT_PENALTY_MS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Run whenever the previous trigger is at least `period_ms` old.
    Timer { period_ms: u64 },
    /// Run only when an incoming queue holds data.
    EventDriven,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Timer { period_ms: 0 }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawSchedule {
    Word(String),
    Timer { timer_ms: u64 },
}

impl Serialize for Schedule {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Schedule::EventDriven => RawSchedule::Word("event_driven".into()),
            Schedule::Timer { period_ms } => RawSchedule::Timer { timer_ms: *period_ms },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Schedule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match RawSchedule::deserialize(d)? {
            RawSchedule::Word(w) if w == "event_driven" => Ok(Schedule::EventDriven),
            RawSchedule::Word(w) if w == "timer" => Ok(Schedule::default()),
            RawSchedule::Word(w) => Err(serde::de::Error::custom(format!(
                "schedule must be 'event_driven' or {{timer_ms: N}}, got '{w}'"
            ))),
            RawSchedule::Timer { timer_ms } => Ok(Schedule::Timer { period_ms: timer_ms }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    #[default]
    Running,
    Stopped,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Scalar {
    Text(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    List(Vec<Scalar>),
}

impl Scalar {
    fn render(self) -> String {
        match self {
            Scalar::Text(s) => s,
            Scalar::Int(i) => i.to_string(),
            Scalar::Float(f) => f.to_string(),
            Scalar::Bool(b) => b.to_string(),
            Scalar::List(items) => items.into_iter().map(Scalar::render).collect::<Vec<_>>().join("\n"),
        }
    }
}

/// Property values may be written as YAML scalars or lists; lists become
/// newline-separated text.
fn deserialize_properties<'de, D: Deserializer<'de>>(d: D) -> Result<Properties, D::Error> {
    let raw: Option<IndexMap<String, Scalar>> = Option::deserialize(d)?;
    Ok(raw
        .unwrap_or_default()
        .into_iter()
        .map(|(k, v)| (k, v.render()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessorDef {
    pub id: String,
    #[serde(rename = "type")]
    pub type_name: String,
    #[serde(default, deserialize_with = "deserialize_properties")]
    pub properties: Properties,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "one")]
    pub concurrency: usize,
    #[serde(default)]
    pub state: RunState,
    #[serde(default = "default_penalty")]
    pub penalty_ms: i64,
}

fn one() -> usize {
    1
}

fn default_penalty() -> i64 {
    DEFAULT_PENALTY_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRef {
    pub processor: String,
    pub relationship: String,
}

/// Byte count written as an integer or a string with a binary unit
/// (`B`, `KB`, `MB`, `GB`; `1 GB` is 2^30 bytes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteSize(pub i64);

impl ByteSize {
    pub fn parse(s: &str) -> Option<i64> {
        let s = s.trim();
        let split = s.find(|c: char| !(c.is_ascii_digit() || c == '-')).unwrap_or(s.len());
        let (num, unit) = s.split_at(split);
        let n: i64 = num.trim().parse().ok()?;
        let mult: i64 = match unit.trim().to_ascii_uppercase().as_str() {
            "" | "B" => 1,
            "KB" | "KIB" => 1 << 10,
            "MB" | "MIB" => 1 << 20,
            "GB" | "GIB" => 1 << 30,
            _ => return None,
        };
        n.checked_mul(mult)
    }
}

impl Serialize for ByteSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(self.0)
    }
}

impl<'de> Deserialize<'de> for ByteSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Scalar::deserialize(d)? {
            Scalar::Int(i) => Ok(ByteSize(i)),
            Scalar::Text(t) => ByteSize::parse(&t)
                .map(ByteSize)
                .ok_or_else(|| serde::de::Error::custom(format!("invalid byte size '{t}'"))),
            _ => Err(serde::de::Error::custom("byte size must be an integer or a string like '1 GB'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionDef {
    pub id: String,
    pub source: SourceRef,
    pub destination: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_threshold: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_threshold: Option<ByteSize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prioritizer: Option<Prioritizer>,
}

impl ConnectionDef {
    pub fn object_threshold(&self) -> u64 {
        self.object_threshold.map_or(DEFAULT_OBJECT_THRESHOLD, |v| v.max(0) as u64)
    }

    pub fn size_threshold(&self) -> u64 {
        self.size_threshold.map_or(DEFAULT_SIZE_THRESHOLD, |v| v.0.max(0) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDefinition {
    #[serde(default)]
    pub processors: Vec<ProcessorDef>,
    #[serde(default)]
    pub connections: Vec<ConnectionDef>,
    #[serde(default)]
    pub auto_terminate: IndexMap<String, Vec<String>>,
    /// Topics created (if missing) when the flow loads.
    #[serde(default)]
    pub topics: Vec<TopicConfig>,
}

impl FlowDefinition {
    pub fn from_yaml(text: &str) -> Result<Self, String> {
        serde_yaml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("flow serializes")
    }

    pub fn processor(&self, id: &str) -> Option<&ProcessorDef> {
        self.processors.iter().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub component: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        match &self.component {
            Some(c) => write!(f, "{sev}: {c}: {}", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

/// Checks a flow against the registry. Errors block loading; warnings do not.
pub fn validate_flow(def: &FlowDefinition, registry: &Registry) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut err = |component: Option<&str>, message: String| {
        out.push(Diagnostic {
            severity: Severity::Error,
            component: component.map(str::to_string),
            message,
        })
    };

    let mut relationships: HashMap<&str, BTreeSet<String>> = HashMap::new();
    let mut seen = BTreeSet::new();
    for p in &def.processors {
        if !seen.insert(p.id.as_str()) {
            err(Some(&p.id), "duplicate processor id".into());
            continue;
        }
        if p.concurrency == 0 {
            err(Some(&p.id), "concurrency must be at least 1".into());
        }
        if p.penalty_ms < 0 {
            err(Some(&p.id), "penalty_ms must not be negative".into());
        }
        let Some(ty) = registry.get(&p.type_name) else {
            err(Some(&p.id), format!("unknown processor type '{}'", p.type_name));
            continue;
        };
        let problems = ty.spec.check(&p.properties);
        let clean = problems.is_empty();
        for m in problems {
            err(Some(&p.id), m);
        }
        if clean {
            if let Err(e) = (ty.build)(&with_defaults(&ty.spec, &p.properties)) {
                err(Some(&p.id), e.0);
            }
        }
        relationships.insert(&p.id, ty.spec.relationships(&p.properties));
    }

    let mut seen = BTreeSet::new();
    let mut connected: BTreeSet<(&str, &str)> = BTreeSet::new();
    for c in &def.connections {
        if !seen.insert(c.id.as_str()) {
            err(Some(&c.id), "duplicate connection id".into());
        }
        match relationships.get(c.source.processor.as_str()) {
            None => err(Some(&c.id), format!("unknown source processor '{}'", c.source.processor)),
            Some(rels) if !rels.contains(&c.source.relationship) => err(
                Some(&c.id),
                format!(
                    "processor '{}' has no relationship '{}'",
                    c.source.processor, c.source.relationship
                ),
            ),
            Some(_) => {
                connected.insert((&c.source.processor, &c.source.relationship));
            }
        }
        if def.processor(&c.destination).is_none() {
            err(Some(&c.id), format!("unknown destination processor '{}'", c.destination));
        }
        if c.object_threshold.is_some_and(|v| v <= 0) {
            err(Some(&c.id), "object_threshold must be positive".into());
        }
        if c.size_threshold.is_some_and(|v| v.0 <= 0) {
            err(Some(&c.id), "size_threshold must be positive".into());
        }
    }

    for (pid, rels) in &def.auto_terminate {
        match relationships.get(pid.as_str()) {
            None if def.processor(pid).is_none() => err(Some(pid), "auto_terminate names an unknown processor".into()),
            None => {}
            Some(declared) => {
                for r in rels {
                    if !declared.contains(r) {
                        err(Some(pid), format!("cannot auto-terminate undeclared relationship '{r}'"));
                    }
                }
            }
        }
    }

    for p in &def.processors {
        let Some(rels) = relationships.get(p.id.as_str()) else { continue };
        let terminated = def.auto_terminate.get(&p.id);
        for r in rels {
            let auto = terminated.is_some_and(|t| t.contains(r));
            if !auto && !connected.contains(&(p.id.as_str(), r.as_str())) {
                err(
                    Some(&p.id),
                    format!("relationship '{r}' is neither connected nor auto-terminated"),
                );
            }
        }
    }

    for t in &def.topics {
        if !valid_topic_name(&t.name) {
            err(None, format!("invalid topic name '{}'", t.name));
        } else if t.partitions == 0 {
            err(None, format!("topic '{}' needs at least one partition", t.name));
        }
    }

    out.extend(graph_warnings(def));
    out
}

fn graph_warnings(def: &FlowDefinition) -> Vec<Diagnostic> {
    let mut edges: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut has_input: BTreeSet<&str> = BTreeSet::new();
    for c in &def.connections {
        edges.entry(&c.source.processor).or_default().insert(&c.destination);
        has_input.insert(&c.destination);
    }
    let mut out = Vec::new();

    // cycle detection: iterative three-colour DFS
    let mut colour: HashMap<&str, u8> = HashMap::new();
    let mut cyclic: BTreeSet<&str> = BTreeSet::new();
    for p in &def.processors {
        if colour.contains_key(p.id.as_str()) {
            continue;
        }
        let mut stack: Vec<(&str, Vec<&str>)> = vec![(&p.id, edges.get(p.id.as_str()).map(|s| s.iter().copied().collect()).unwrap_or_default())];
        colour.insert(&p.id, 1);
        while let Some((node, pending)) = stack.last_mut() {
            let node = *node;
            match pending.pop() {
                Some(next) => match colour.get(next) {
                    Some(1) => {
                        cyclic.insert(next);
                    }
                    Some(_) => {}
                    None => {
                        colour.insert(next, 1);
                        let succ = edges.get(next).map(|s| s.iter().copied().collect()).unwrap_or_default();
                        stack.push((next, succ));
                    }
                },
                None => {
                    colour.insert(node, 2);
                    stack.pop();
                }
            }
        }
    }
    for id in cyclic {
        out.push(Diagnostic {
            severity: Severity::Warning,
            component: Some(id.to_string()),
            message: "processor is part of a cycle".into(),
        });
    }

    let mut reached: BTreeSet<&str> = BTreeSet::new();
    let mut frontier: Vec<&str> = def
        .processors
        .iter()
        .map(|p| p.id.as_str())
        .filter(|id| !has_input.contains(id))
        .collect();
    while let Some(n) = frontier.pop() {
        if reached.insert(n) {
            if let Some(s) = edges.get(n) {
                frontier.extend(s.iter().copied());
            }
        }
    }
    for p in &def.processors {
        if !reached.contains(p.id.as_str()) {
            out.push(Diagnostic {
                severity: Severity::Warning,
                component: Some(p.id.clone()),
                message: "processor is unreachable from any source".into(),
            });
        }
    }
    out
}

// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use indexmap::IndexMap;
use thiserror::Error;

use super::session::{ProcessSession, SessionError};
use super::{EngineShared, ProcessorNode};
use crate::clock::Timestamp;
use crate::distribution::{TopicError, TopicLog};
use crate::expr::{self, CompiledExpression};
use crate::repo::RepoError;

/// Property name to raw value, in declaration order.
pub type Properties = IndexMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error("{0}")]
    Other(String),
}

impl ProcessError {
    pub fn other(msg: impl Into<String>) -> Self {
        ProcessError::Other(msg.into())
    }
}

#[derive(Debug, Clone)]
pub struct PropertyDescriptor {
    pub name: &'static str,
    pub required: bool,
    pub default: Option<&'static str>,
    pub expression: bool,
}

impl PropertyDescriptor {
    pub const fn required(name: &'static str) -> Self {
        PropertyDescriptor {
            name,
            required: true,
            default: None,
            expression: false,
        }
    }

    pub const fn optional(name: &'static str, default: Option<&'static str>) -> Self {
        PropertyDescriptor {
            name,
            required: false,
            default,
            expression: false,
        }
    }

    pub const fn expression(mut self) -> Self {
        self.expression = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ProcessorSpec {
    pub type_name: &'static str,
    pub relationships: Vec<&'static str>,
    pub properties: Vec<PropertyDescriptor>,
    /// Properties outside the schema each declare a relationship of the
    /// same name whose value is an expression.
    pub dynamic_relationships: bool,
    /// Trigger even when every incoming queue is empty.
    pub trigger_when_empty: bool,
}

impl ProcessorSpec {
    pub fn descriptor(&self, name: &str) -> Option<&PropertyDescriptor> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn relationships(&self, props: &Properties) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.relationships.iter().map(|r| r.to_string()).collect();
        if self.dynamic_relationships {
            out.extend(props.keys().filter(|k| self.descriptor(k).is_none()).cloned());
        }
        out
    }

    /// Checks required properties and expression syntax; returns one message
    /// per problem.
    pub fn check(&self, props: &Properties) -> Vec<String> {
        let mut out = Vec::new();
        for d in &self.properties {
            match props.get(d.name) {
                None if d.required => out.push(format!("missing required property '{}'", d.name)),
                Some(v) if d.expression => {
                    if let Err(e) = expr::parse(v) {
                        out.push(format!("property '{}': {e}", d.name));
                    }
                }
                _ => {}
            }
        }
        for (k, v) in props {
            if self.descriptor(k).is_some() {
                continue;
            }
            if self.dynamic_relationships {
                if let Err(e) = expr::parse(v) {
                    out.push(format!("route '{k}': {e}"));
                }
            } else {
                out.push(format!("unknown property '{k}'"));
            }
        }
        out
    }
}

/// Per-trigger view of the engine handed to processor bodies.
#[derive(Clone)]
pub struct ProcessContext {
    pub(crate) shared: Arc<EngineShared>,
    pub(crate) node: Arc<ProcessorNode>,
}

impl ProcessContext {
    pub fn id(&self) -> &str {
        &self.node.id
    }

    pub fn now(&self) -> Timestamp {
        self.shared.clock.now_ms()
    }

    pub fn topics(&self) -> &Arc<TopicLog> {
        &self.shared.topics
    }

    /// A session owned by this processor that outlives the current trigger.
    pub fn new_session(&self) -> ProcessSession {
        ProcessSession::new(self.shared.clone(), self.node.clone())
    }

    /// Skip scheduling this processor until `until`.
    pub fn yield_until(&self, until: Timestamp) {
        let mut st = self.node.state.lock().unwrap();
        st.yielded_until = st.yielded_until.max(until);
    }

    /// While no input is ready, skip scheduling until `until`. Arriving
    /// input cancels the wait.
    pub fn idle_until(&self, until: Timestamp) {
        self.node.state.lock().unwrap().idle_until = until;
    }

    pub fn has_queued_input(&self) -> bool {
        self.shared
            .graph()
            .incoming(&self.node.id)
            .iter()
            .any(|c| !c.is_empty())
    }
}

pub trait Processor: Send + Sync {
    /// Called once when the processor starts; an error keeps it stopped.
    fn on_scheduled(&self, _ctx: &ProcessContext) -> Result<(), ProcessError> {
        Ok(())
    }

    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError>;

    /// Called after the last trigger once the processor stops.
    fn on_stopped(&self, _ctx: &ProcessContext) {}
}

pub type BuildFn = fn(&Properties) -> Result<Arc<dyn Processor>, ConfigError>;

#[derive(Clone)]
pub struct ProcessorType {
    pub spec: ProcessorSpec,
    pub build: BuildFn,
}

/// Processor types available to flow definitions.
#[derive(Clone, Default)]
pub struct Registry {
    types: BTreeMap<String, ProcessorType>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn register(&mut self, spec: ProcessorSpec, build: BuildFn) {
        self.types
            .insert(spec.type_name.to_string(), ProcessorType { spec, build });
    }

    pub fn get(&self, type_name: &str) -> Option<&ProcessorType> {
        self.types.get(type_name)
    }

    pub fn type_names(&self) -> impl Iterator<Item = &str> {
        self.types.keys().map(String::as_str)
    }
}

/// Fills in schema defaults for absent properties.
pub fn with_defaults(spec: &ProcessorSpec, props: &Properties) -> Properties {
    let mut out = props.clone();
    for d in &spec.properties {
        if let (None, Some(def)) = (out.get(d.name), d.default) {
            out.insert(d.name.to_string(), def.to_string());
        }
    }
    out
}

/// Parses an expression-bearing property for use in a build function.
pub fn compile_property(props: &Properties, name: &str) -> Result<Option<CompiledExpression>, ConfigError> {
    props
        .get(name)
        .map(|v| expr::parse(v).map_err(|e| ConfigError(format!("property '{name}': {e}"))))
        .transpose()
}

pub fn parse_property<T: std::str::FromStr>(props: &Properties, name: &str) -> Result<Option<T>, ConfigError> {
    props
        .get(name)
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| ConfigError(format!("property '{name}': invalid value '{v}'")))
        })
        .transpose()
}

// SPDX-License-Identifier: Apache-2.0

//! Publishes content to the topic log, then drops the flowfile. The record
//! is written before the session commits, so a crash in between yields a
//! duplicate record rather than a loss.

use std::sync::Arc;

use super::eval;
use crate::distribution::TopicConfig;
use crate::engine::processor::{
    compile_property, parse_property, ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties,
    PropertyDescriptor,
};
use crate::engine::session::ProcessSession;
use crate::expr::CompiledExpression;
use crate::model::rel;

const PER_TRIGGER: usize = 100;

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "PublishTopic",
        relationships: vec![rel::FAILURE],
        properties: vec![
            PropertyDescriptor::required("topic"),
            PropertyDescriptor::optional("key_expression", None).expression(),
            PropertyDescriptor::optional("auto_create", Some("true")),
            PropertyDescriptor::optional("partitions", Some("3")),
        ],
        dynamic_relationships: false,
        trigger_when_empty: false,
    }
}

pub struct PublishTopic {
    topic: String,
    key: Option<CompiledExpression>,
    auto_create: bool,
    partitions: u32,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    let topic = props.get("topic").cloned().unwrap_or_default();
    if !crate::distribution::valid_topic_name(&topic) {
        return Err(ConfigError::new(format!("invalid topic name '{topic}'")));
    }
    let partitions: u32 = parse_property(props, "partitions")?.unwrap_or(3);
    if partitions == 0 {
        return Err(ConfigError::new("partitions must be at least 1"));
    }
    Ok(Arc::new(PublishTopic {
        topic,
        key: compile_property(props, "key_expression")?,
        auto_create: parse_property(props, "auto_create")?.unwrap_or(true),
        partitions,
    }))
}

impl Processor for PublishTopic {
    fn on_scheduled(&self, ctx: &ProcessContext) -> Result<(), ProcessError> {
        let log = ctx.topics();
        if self.auto_create {
            log.ensure_topic(TopicConfig::new(&self.topic).with_partitions(self.partitions))?;
        } else if !log.has_topic(&self.topic) {
            return Err(ProcessError::other(format!("topic '{}' does not exist", self.topic)));
        }
        Ok(())
    }

    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let now = ctx.now();
        for ff in session.get_batch(PER_TRIGGER) {
            let key = match &self.key {
                None => None,
                Some(e) => match eval(e, &ff, now) {
                    Ok(k) => Some(k),
                    Err(err) => {
                        log::debug!("publish key for {}: {err}", ff.uuid);
                        session.transfer(&ff, rel::FAILURE)?;
                        continue;
                    }
                },
            };
            let value = session.read(&ff)?;
            match ctx.topics().produce(&self.topic, key.as_deref().map(str::as_bytes), &value) {
                Ok((p, o)) => {
                    session.send(&ff, &format!("topic://{}/{p}/{o}", self.topic))?;
                    session.remove(&ff)?;
                }
                Err(e) => {
                    log::warn!("publish to '{}' failed: {e}", self.topic);
                    let ff = session.penalize(&ff)?;
                    session.transfer(&ff, rel::FAILURE)?;
                }
            }
        }
        Ok(())
    }
}

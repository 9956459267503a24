// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use super::{eval_bool, BATCH};
use crate::engine::processor::{
    compile_property, ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties,
    PropertyDescriptor,
};
use crate::engine::session::ProcessSession;
use crate::expr::CompiledExpression;
use crate::model::rel;

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "FilterArticles",
        relationships: vec![rel::MATCHED, rel::UNMATCHED, rel::FAILURE],
        properties: vec![PropertyDescriptor::required("predicate_expression").expression()],
        dynamic_relationships: false,
        trigger_when_empty: false,
    }
}

pub struct FilterArticles {
    predicate: CompiledExpression,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    Ok(Arc::new(FilterArticles {
        predicate: compile_property(props, "predicate_expression")?
            .ok_or_else(|| ConfigError::new("predicate_expression is required"))?,
    }))
}

impl Processor for FilterArticles {
    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let now = ctx.now();
        for ff in session.get_batch(BATCH) {
            let route = match eval_bool(&self.predicate, &ff, now) {
                Ok(true) => rel::MATCHED,
                Ok(false) => rel::UNMATCHED,
                Err(_) => rel::FAILURE,
            };
            session.transfer(&ff, route)?;
        }
        Ok(())
    }
}

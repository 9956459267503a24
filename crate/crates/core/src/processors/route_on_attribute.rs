// SPDX-License-Identifier: Apache-2.0

//! Each non-schema property is a route: its name is the relationship and
//! its value a predicate. Predicates run in declaration order.

use std::sync::Arc;

use super::{eval_bool, BATCH};
use crate::engine::processor::{ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties};
use crate::engine::session::ProcessSession;
use crate::expr::{self, CompiledExpression};
use crate::model::rel;

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "RouteOnAttribute",
        relationships: vec![rel::UNMATCHED, rel::FAILURE],
        properties: vec![],
        dynamic_relationships: true,
        trigger_when_empty: false,
    }
}

pub struct RouteOnAttribute {
    routes: Vec<(String, CompiledExpression)>,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    let mut routes = Vec::new();
    for (name, value) in props {
        if name == rel::UNMATCHED || name == rel::FAILURE || name.is_empty() {
            return Err(ConfigError::new(format!("'{name}' cannot be used as a route name")));
        }
        let e = expr::parse(value).map_err(|e| ConfigError::new(format!("route '{name}': {e}")))?;
        routes.push((name.clone(), e));
    }
    Ok(Arc::new(RouteOnAttribute { routes }))
}

impl Processor for RouteOnAttribute {
    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let now = ctx.now();
        for ff in session.get_batch(BATCH) {
            let mut route = rel::UNMATCHED;
            for (name, predicate) in &self.routes {
                match eval_bool(predicate, &ff, now) {
                    Ok(true) => {
                        route = name;
                        break;
                    }
                    Ok(false) => {}
                    Err(_) => {
                        route = rel::FAILURE;
                        break;
                    }
                }
            }
            session.transfer(&ff, route)?;
        }
        Ok(())
    }
}

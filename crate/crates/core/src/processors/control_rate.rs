// SPDX-License-Identifier: Apache-2.0

//! Passes at most `max_per_sec` flowfiles in any 1 s window. Each pass holds
//! a token that returns exactly 1 s later, so a full bucket drains at once
//! after an idle second and never refills faster than it drained.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use crate::clock::Timestamp;
use crate::engine::processor::{
    parse_property, ConfigError, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties, PropertyDescriptor,
};
use crate::engine::session::ProcessSession;
use crate::model::rel;

const WINDOW_MS: i64 = 1_000;

pub fn spec() -> ProcessorSpec {
    ProcessorSpec {
        type_name: "ControlRate",
        relationships: vec![rel::SUCCESS],
        properties: vec![PropertyDescriptor::required("max_per_sec")],
        dynamic_relationships: false,
        trigger_when_empty: false,
    }
}

/// Pass times within the trailing window `(now - 1000, now]`.
pub struct RateWindow {
    max: usize,
    passes: VecDeque<Timestamp>,
}

impl RateWindow {
    pub fn new(max: usize) -> Self {
        RateWindow {
            max,
            passes: VecDeque::new(),
        }
    }

    pub fn available(&mut self, now: Timestamp) -> usize {
        while self.passes.front().is_some_and(|t| *t <= now - WINDOW_MS) {
            self.passes.pop_front();
        }
        self.max - self.passes.len()
    }

    pub fn take(&mut self, now: Timestamp) {
        self.passes.push_back(now);
    }

    /// When the next token returns, if all are in use.
    pub fn next_free(&self) -> Option<Timestamp> {
        (self.passes.len() >= self.max).then(|| self.passes.front().unwrap() + WINDOW_MS)
    }
}

pub struct ControlRate {
    window: Mutex<RateWindow>,
}

pub fn build(props: &Properties) -> Result<Arc<dyn Processor>, ConfigError> {
    let max: usize = parse_property(props, "max_per_sec")?.ok_or_else(|| ConfigError::new("max_per_sec is required"))?;
    if max == 0 {
        return Err(ConfigError::new("max_per_sec must be positive"));
    }
    Ok(Arc::new(ControlRate {
        window: Mutex::new(RateWindow::new(max)),
    }))
}

impl Processor for ControlRate {
    fn on_trigger(&self, ctx: &ProcessContext, session: &mut ProcessSession) -> Result<(), ProcessError> {
        let now = ctx.now();
        let mut w = self.window.lock().unwrap();
        let n = w.available(now);
        for ff in session.get_batch(n) {
            w.take(now);
            session.transfer(&ff, rel::SUCCESS)?;
        }
        if let Some(t) = w.next_free() {
            ctx.yield_until(t);
        }
        Ok(())
    }
}

// SPDX-License-Identifier: Apache-2.0

pub mod clock;
pub mod control;
pub mod distribution;
pub mod engine;
pub mod expr;
pub mod fault;
pub mod model;
pub mod processors;
pub mod repo;

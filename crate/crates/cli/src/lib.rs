// SPDX-License-Identifier: Apache-2.0

//! Command-line front end and HTTP control plane for the dataflow engine.

pub mod api;
pub mod client;
pub mod commands;

// SPDX-License-Identifier: Apache-2.0

//! Flow definitions, validation and status reporting.

pub mod flow;
pub mod status;

pub use flow::{validate_flow, Diagnostic, FlowDefinition, Severity};
pub use status::{ConnectionStatus, ProcessorStatus, StatusSnapshot};

// SPDX-License-Identifier: Apache-2.0

//! Built-in processor library.

pub mod control_rate;
pub mod detect_duplicate;
pub mod enrich_lookup;
pub mod filter_articles;
pub mod generate_news;
pub mod listen_lines;
pub mod merge_content;
pub mod publish_topic;
pub mod put_file_store;
pub mod route_on_attribute;

use crate::engine::processor::Registry;
use crate::expr::{CompiledExpression, EvalContext, EvalError};
use crate::model::FlowFile;

/// Flowfiles a routing processor handles per trigger.
pub const BATCH: usize = 100;

pub const SOURCE_NAME_ATTR: &str = "source.name";
pub const MIME_TYPE_ATTR: &str = "mime.type";

pub fn builtin_registry() -> Registry {
    let mut r = Registry::new();
    r.register(generate_news::spec(), generate_news::build);
    r.register(listen_lines::spec(), listen_lines::build);
    r.register(detect_duplicate::spec(), detect_duplicate::build);
    r.register(filter_articles::spec(), filter_articles::build);
    r.register(enrich_lookup::spec(), enrich_lookup::build);
    r.register(merge_content::spec(), merge_content::build);
    r.register(route_on_attribute::spec(), route_on_attribute::build);
    r.register(control_rate::spec(), control_rate::build);
    r.register(publish_topic::spec(), publish_topic::build);
    r.register(put_file_store::spec(), put_file_store::build);
    r
}

pub(crate) fn eval(expr: &CompiledExpression, ff: &FlowFile, now: i64) -> Result<String, EvalError> {
    expr.evaluate(&EvalContext::new(&ff.attributes, now))
}

pub(crate) fn eval_bool(expr: &CompiledExpression, ff: &FlowFile, now: i64) -> Result<bool, EvalError> {
    expr.evaluate_boolean(&EvalContext::new(&ff.attributes, now))
}

/// Splits a list-valued property: one item per line when the value spans
/// lines, otherwise on `sep`. Items are trimmed; blanks are skipped.
pub(crate) fn split_list(value: &str, sep: char) -> Vec<String> {
    let items: Vec<&str> = if value.contains('\n') {
        value.lines().collect()
    } else {
        value.split(sep).collect()
    };
    items
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// `\n`, `\t`, `\r` and `\\` escapes in a property value.
pub(crate) fn unescape(value: &str) -> String {
    let mut out = String::new();
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}


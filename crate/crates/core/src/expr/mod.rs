// SPDX-License-Identifier: Apache-2.0

//! Attribute expression language.
//!
//! An expression is literal text with embedded `${subject:fn(args):fn()...}`
//! blocks. The subject is an attribute name or a quoted literal; each call
//! receives the running value as its implicit first argument. Every value is
//! a string; numeric and boolean functions convert on demand.
//!
//! ```text
//! expression  := ( literal | embedded )*
//! embedded    := '${' subject call* '}'
//! subject     := attrName | quoted
//! call        := ':' ident '(' arglist? ')'
//! arglist     := arg ( ',' arg )*
//! arg         := quoted | number | embedded
//! attrName    := [A-Za-z_][A-Za-z0-9_.-]*
//! quoted      := '\'' chars-with-\'-escape '\''
//! number      := '-'? digits ( '.' digits )?
//! literal     := any run of chars not starting '${' ; '$$' escapes a literal '$'
//! ```
//!
//! Regular expressions (`matches`) use the `regex` crate dialect and must
//! match the whole subject. Character classes, anchors, quantifiers and
//! alternation are supported; look-around and backreferences are not.

mod eval;
mod parser;

use std::fmt;

use thiserror::Error;

use crate::clock::Timestamp;
use crate::model::Attributes;

pub use eval::format_number;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{function}: '{value}' is not a number")]
    NotANumber { function: &'static str, value: String },
    #[error("{function}: division by zero")]
    DivideByZero { function: &'static str },
    #[error("{function}: result is not a finite number")]
    NonFinite { function: &'static str },
    #[error("invalid regex '{pattern}': {message}")]
    InvalidRegex { pattern: String, message: String },
}

/// Parsed expression; immutable and shareable.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CompiledExpression {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Embedded(Embedded),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Embedded {
    pub subject: Subject,
    pub calls: Vec<Call>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Subject {
    Attribute(String),
    Literal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Call {
    pub function: Function,
    pub args: Vec<Arg>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arg {
    Quoted(String),
    /// Number literal kept in its source spelling.
    Number(String),
    Embedded(Embedded),
}

macro_rules! functions {
    ($($variant:ident => $name:literal / $arity:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Function {
            $($variant),*
        }

        impl Function {
            pub const ALL: &'static [Function] = &[$(Function::$variant),*];

            pub fn name(self) -> &'static str {
                match self {
                    $(Function::$variant => $name),*
                }
            }

            /// Number of explicit arguments (the subject is implicit).
            pub fn arity(self) -> usize {
                match self {
                    $(Function::$variant => $arity),*
                }
            }

            pub fn lookup(name: &str) -> Option<Function> {
                match name {
                    $($name => Some(Function::$variant),)*
                    _ => None,
                }
            }
        }
    };
}

functions! {
    ToUpper => "toUpper" / 0,
    ToLower => "toLower" / 0,
    Trim => "trim" / 0,
    Length => "length" / 0,
    IsEmpty => "isEmpty" / 0,
    Equals => "equals" / 1,
    NotEquals => "notEquals" / 1,
    Contains => "contains" / 1,
    StartsWith => "startsWith" / 1,
    EndsWith => "endsWith" / 1,
    Matches => "matches" / 1,
    Replace => "replace" / 2,
    Substring => "substring" / 2,
    Append => "append" / 1,
    Prepend => "prepend" / 1,
    ToNumber => "toNumber" / 0,
    Plus => "plus" / 1,
    Minus => "minus" / 1,
    Multiply => "multiply" / 1,
    Divide => "divide" / 1,
    Mod => "mod" / 1,
    Gt => "gt" / 1,
    Ge => "ge" / 1,
    Lt => "lt" / 1,
    Le => "le" / 1,
    And => "and" / 1,
    Or => "or" / 1,
    Not => "not" / 0,
    IfElse => "ifElse" / 2,
}

/// Inputs to evaluation. `now` is carried for future time functions; no
/// current function reads it, so evaluation is a pure function of the
/// attributes.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub attributes: &'a Attributes,
    pub now: Timestamp,
}

impl<'a> EvalContext<'a> {
    pub fn new(attributes: &'a Attributes, now: Timestamp) -> Self {
        EvalContext { attributes, now }
    }
}

pub fn parse(text: &str) -> Result<CompiledExpression, ParseError> {
    parser::parse(text)
}

impl CompiledExpression {
    pub fn evaluate(&self, ctx: &EvalContext<'_>) -> Result<String, EvalError> {
        eval::evaluate(self, ctx)
    }

    /// True iff the expression evaluates to exactly `"true"`.
    pub fn evaluate_boolean(&self, ctx: &EvalContext<'_>) -> Result<bool, EvalError> {
        Ok(self.evaluate(ctx)? == "true")
    }

    /// True when the expression has no embedded blocks.
    pub fn is_literal(&self) -> bool {
        self.segments
            .iter()
            .all(|s| matches!(s, Segment::Literal(_)))
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("'")?;
    for c in s.chars() {
        match c {
            '\'' => f.write_str("\\'")?,
            '\\' => f.write_str("\\\\")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("'")
}

impl fmt::Display for Embedded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("${")?;
        match &self.subject {
            Subject::Attribute(name) => f.write_str(name)?,
            Subject::Literal(s) => write_quoted(f, s)?,
        }
        for call in &self.calls {
            write!(f, ":{}(", call.function.name())?;
            for (i, arg) in call.args.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                match arg {
                    Arg::Quoted(s) => write_quoted(f, s)?,
                    Arg::Number(n) => f.write_str(n)?,
                    Arg::Embedded(e) => write!(f, "{e}")?,
                }
            }
            f.write_str(")")?;
        }
        f.write_str("}")
    }
}

/// Serializes back to source text; re-parsing yields an equal tree.
impl fmt::Display for CompiledExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => f.write_str(&s.replace('$', "$$"))?,
                Segment::Embedded(e) => write!(f, "{e}")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;

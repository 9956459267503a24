// SPDX-License-Identifier: Apache-2.0

use std::cell::RefCell;
use std::collections::HashMap;

use regex::Regex;

use super::{Arg, CompiledExpression, Embedded, EvalContext, EvalError, Function, Segment, Subject};

pub(super) fn evaluate(expr: &CompiledExpression, ctx: &EvalContext<'_>) -> Result<String, EvalError> {
    let mut out = String::new();
    for seg in &expr.segments {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Embedded(e) => out.push_str(&eval_embedded(e, ctx)?),
        }
    }
    Ok(out)
}

fn eval_embedded(e: &Embedded, ctx: &EvalContext<'_>) -> Result<String, EvalError> {
    let mut value = match &e.subject {
        Subject::Attribute(name) => ctx.attributes.get(name).cloned().unwrap_or_default(),
        Subject::Literal(s) => s.clone(),
    };
    for call in &e.calls {
        let args = call
            .args
            .iter()
            .map(|a| match a {
                Arg::Quoted(s) | Arg::Number(s) => Ok(s.clone()),
                Arg::Embedded(inner) => eval_embedded(inner, ctx),
            })
            .collect::<Result<Vec<_>, _>>()?;
        value = apply(call.function, &value, &args)?;
    }
    Ok(value)
}

fn boolean(b: bool) -> String {
    if b { "true" } else { "false" }.to_string()
}

fn number(function: Function, s: &str) -> Result<f64, EvalError> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(EvalError::NotANumber {
            function: function.name(),
            value: s.to_string(),
        }),
    }
}

/// Renders a number, dropping the fractional part when it is integral.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn numeric_result(function: Function, v: f64) -> Result<String, EvalError> {
    if v.is_finite() {
        Ok(format_number(v))
    } else {
        Err(EvalError::NonFinite {
            function: function.name(),
        })
    }
}

thread_local! {
    static REGEX_CACHE: RefCell<HashMap<String, Regex>> = RefCell::new(HashMap::new());
}

fn full_match(pattern: &str, subject: &str) -> Result<bool, EvalError> {
    REGEX_CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        if !cache.contains_key(pattern) {
            let re = Regex::new(&format!("^(?:{pattern})$")).map_err(|e| EvalError::InvalidRegex {
                pattern: pattern.to_string(),
                message: e.to_string(),
            })?;
            if cache.len() >= 128 {
                cache.clear();
            }
            cache.insert(pattern.to_string(), re);
        }
        Ok(cache[pattern].is_match(subject))
    })
}

fn apply(f: Function, s: &str, args: &[String]) -> Result<String, EvalError> {
    use Function::*;
    let arg = |i: usize| args[i].as_str();
    Ok(match f {
        ToUpper => s.to_uppercase(),
        ToLower => s.to_lowercase(),
        Trim => s.trim().to_string(),
        Length => s.chars().count().to_string(),
        IsEmpty => boolean(s.trim().is_empty()),
        Equals => boolean(s == arg(0)),
        NotEquals => boolean(s != arg(0)),
        Contains => boolean(s.contains(arg(0))),
        StartsWith => boolean(s.starts_with(arg(0))),
        EndsWith => boolean(s.ends_with(arg(0))),
        Matches => boolean(full_match(arg(0), s)?),
        Replace => {
            if arg(0).is_empty() {
                s.to_string()
            } else {
                s.replace(arg(0), arg(1))
            }
        }
        Substring => {
            let chars: Vec<char> = s.chars().collect();
            let clamp = |v: f64| (v.max(0.0) as usize).min(chars.len());
            let start = clamp(number(f, arg(0))?);
            let end = clamp(number(f, arg(1))?);
            if start >= end {
                String::new()
            } else {
                chars[start..end].iter().collect()
            }
        }
        Append => format!("{s}{}", arg(0)),
        Prepend => format!("{}{s}", arg(0)),
        ToNumber => numeric_result(f, number(f, s)?)?,
        Plus => numeric_result(f, number(f, s)? + number(f, arg(0))?)?,
        Minus => numeric_result(f, number(f, s)? - number(f, arg(0))?)?,
        Multiply => numeric_result(f, number(f, s)? * number(f, arg(0))?)?,
        Divide | Mod => {
            let lhs = number(f, s)?;
            let rhs = number(f, arg(0))?;
            if rhs == 0.0 {
                return Err(EvalError::DivideByZero { function: f.name() });
            }
            numeric_result(f, if f == Divide { lhs / rhs } else { lhs % rhs })?
        }
        Gt => boolean(number(f, s)? > number(f, arg(0))?),
        Ge => boolean(number(f, s)? >= number(f, arg(0))?),
        Lt => boolean(number(f, s)? < number(f, arg(0))?),
        Le => boolean(number(f, s)? <= number(f, arg(0))?),
        And => boolean(s == "true" && arg(0) == "true"),
        Or => boolean(s == "true" || arg(0) == "true"),
        Not => boolean(s != "true"),
        IfElse => {
            if s == "true" {
                arg(0).to_string()
            } else {
                arg(1).to_string()
            }
        }
    })
}

// SPDX-License-Identifier: Apache-2.0

use super::{Arg, Call, CompiledExpression, Embedded, Function, ParseError, Segment, Subject};

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

pub(super) fn parse(text: &str) -> Result<CompiledExpression, ParseError> {
    let mut p = Parser { src: text, pos: 0 };
    let mut segments = Vec::new();
    let mut literal = String::new();
    while p.pos < p.src.len() {
        let rest = p.rest();
        if rest.starts_with("$$") {
            literal.push('$');
            p.pos += 2;
        } else if rest.starts_with("${") {
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Embedded(p.embedded()?));
        } else {
            let c = rest.chars().next().unwrap();
            literal.push(c);
            p.pos += c.len_utf8();
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(CompiledExpression { segments })
}

impl<'a> Parser<'a> {
    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            offset,
            message: message.into(),
        })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn embedded(&mut self) -> Result<Embedded, ParseError> {
        let open = self.pos;
        debug_assert!(self.rest().starts_with("${"));
        self.pos += 2;
        let subject = match self.peek() {
            Some('\'') => Subject::Literal(self.quoted()?),
            Some(c) if c.is_ascii_alphabetic() || c == '_' => Subject::Attribute(self.attr_name()),
            None => return self.err(open, "unterminated '${'"),
            Some(c) => return self.err(self.pos, format!("expected attribute name, found '{c}'")),
        };
        let mut calls = Vec::new();
        loop {
            match self.peek() {
                Some('}') => {
                    self.pos += 1;
                    return Ok(Embedded { subject, calls });
                }
                Some(':') => {
                    self.pos += 1;
                    calls.push(self.call()?);
                }
                None => return self.err(open, "unterminated '${'"),
                Some(c) => return self.err(self.pos, format!("unexpected '{c}'")),
            }
        }
    }

    fn attr_name(&mut self) -> String {
        let start = self.pos;
        let len = self
            .rest()
            .find(|c: char| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')))
            .unwrap_or(self.rest().len());
        self.pos += len;
        self.src[start..self.pos].to_string()
    }

    fn call(&mut self) -> Result<Call, ParseError> {
        let start = self.pos;
        let len = self
            .rest()
            .find(|c: char| !c.is_ascii_alphanumeric())
            .unwrap_or(self.rest().len());
        let name = &self.src[start..start + len];
        if name.is_empty() {
            return self.err(start, "expected function name after ':'");
        }
        let Some(function) = Function::lookup(name) else {
            return self.err(start, format!("unknown function '{name}'"));
        };
        self.pos += len;
        if !self.eat('(') {
            return self.err(self.pos, format!("expected '(' after '{name}'"));
        }
        let mut args = Vec::new();
        if !self.eat(')') {
            loop {
                if self.peek().is_none() {
                    return self.err(start, format!("unterminated call to '{name}'"));
                }
                args.push(self.arg()?);
                if self.eat(',') {
                    continue;
                }
                if self.eat(')') {
                    break;
                }
                match self.peek() {
                    None => return self.err(start, format!("unterminated call to '{name}'")),
                    Some(c) => return self.err(self.pos, format!("unexpected '{c}' in arguments")),
                }
            }
        }
        if args.len() != function.arity() {
            return self.err(
                start,
                format!(
                    "'{name}' takes {} argument(s), got {}",
                    function.arity(),
                    args.len()
                ),
            );
        }
        Ok(Call { function, args })
    }

    fn arg(&mut self) -> Result<Arg, ParseError> {
        match self.peek() {
            Some('\'') => Ok(Arg::Quoted(self.quoted()?)),
            Some('$') if self.rest().starts_with("${") => Ok(Arg::Embedded(self.embedded()?)),
            Some(c) if c == '-' || c.is_ascii_digit() => Ok(Arg::Number(self.number()?)),
            Some(c) => self.err(self.pos, format!("unexpected '{c}', expected argument")),
            None => self.err(self.pos, "expected argument"),
        }
    }

    fn digits(&mut self) -> usize {
        let n = self
            .rest()
            .find(|c: char| !c.is_ascii_digit())
            .unwrap_or(self.rest().len());
        self.pos += n;
        n
    }

    fn number(&mut self) -> Result<String, ParseError> {
        let start = self.pos;
        self.eat('-');
        if self.digits() == 0 {
            return self.err(start, "malformed number");
        }
        if self.eat('.') && self.digits() == 0 {
            return self.err(start, "malformed number");
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn quoted(&mut self) -> Result<String, ParseError> {
        let start = self.pos;
        self.pos += 1;
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '\'' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, '\'')) => out.push('\''),
                    Some((_, '\\')) => out.push('\\'),
                    Some((_, other)) => {
                        out.push('\\');
                        out.push(other);
                    }
                    None => break,
                },
                c => out.push(c),
            }
        }
        self.err(start, "unterminated quoted string")
    }
}

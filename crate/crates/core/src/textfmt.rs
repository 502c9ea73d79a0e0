// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-oriented reader/writer shared by the trace, checkpoint and manifest
//! files.
//!
//! Every file is a sequence of header lines made of `key=value` fields,
//! followed by labeled tensors. A tensor label sits alone on its line
//! (`attention:`) and the values follow as whitespace-separated floats,
//! one matrix row per line. Floats are written with `{:?}`, which is the
//! shortest representation that parses back to the identical `f64`.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

/// Append `values` to `out`, breaking lines every `row_len` values.
pub fn write_values(out: &mut String, values: &[f64], row_len: usize) {
    let row_len = row_len.max(1);
    for row in values.chunks(row_len) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
}

/// A cursor over the non-empty lines of a text file. Lines starting with `#`
/// are comments and are collected separately so callers can inspect them.
pub struct LineCursor<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
    pub comments: Vec<(usize, &'a str)>,
}

impl<'a> LineCursor<'a> {
    pub fn new(text: &'a str) -> Self {
        let mut lines = Vec::new();
        let mut comments = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                comments.push((i + 1, c.trim()));
                continue;
            }
            lines.push((i + 1, line));
        }
        Self {
            lines,
            pos: 0,
            comments,
        }
    }

    pub fn peek(&self) -> Option<(usize, &'a str)> {
        self.lines.get(self.pos).copied()
    }

    pub fn next_line(&mut self) -> Option<(usize, &'a str)> {
        let l = self.peek();
        if l.is_some() {
            self.pos += 1;
        }
        l
    }

    /// Line number used in diagnostics when the input ends early.
    pub fn eof_line(&self) -> usize {
        self.lines.last().map_or(1, |(n, _)| n + 1)
    }

    /// Consume a line that must start with `keyword`, returning its fields.
    pub fn expect_record(&mut self, keyword: &str) -> Result<Record<'a>, ParseError> {
        match self.next_line() {
            None => Err(ParseError::new(
                self.eof_line(),
                format!("unexpected end of file, missing `{keyword}` line"),
            )),
            Some((n, line)) => {
                let mut parts = line.split_whitespace();
                if parts.next() != Some(keyword) {
                    return Err(ParseError::new(n, format!("expected `{keyword}` line, found `{line}`")));
                }
                let mut fields = Vec::new();
                for p in parts {
                    let (k, v) = p
                        .split_once('=')
                        .ok_or_else(|| ParseError::new(n, format!("malformed field `{p}` (expected key=value)")))?;
                    fields.push((k, v));
                }
                Ok(Record { line: n, fields })
            }
        }
    }

    /// Consume a labeled tensor of exactly `count` values.
    pub fn expect_tensor(&mut self, label: &str, count: usize) -> Result<Vec<f64>, ParseError> {
        let want = format!("{label}:");
        let (n, line) = self.next_line().ok_or_else(|| {
            ParseError::new(
                self.eof_line(),
                format!("unexpected end of file, missing field `{label}`"),
            )
        })?;
        let rest = line
            .strip_prefix(&want)
            .ok_or_else(|| ParseError::new(n, format!("missing field `{label}` (found `{line}`)")))?;
        let mut values = Vec::with_capacity(count);
        push_floats(rest, n, &mut values)?;
        while values.len() < count {
            match self.peek() {
                Some((m, l)) if starts_numeric(l) => {
                    self.pos += 1;
                    push_floats(l, m, &mut values)?;
                }
                _ => {
                    return Err(ParseError::new(
                        self.peek().map_or(self.eof_line(), |(m, _)| m),
                        format!(
                            "field `{label}` truncated: expected {count} values, found {}",
                            values.len()
                        ),
                    ))
                }
            }
        }
        if values.len() != count {
            return Err(ParseError::new(
                n,
                format!("field `{label}` has {} values, expected {count}", values.len()),
            ));
        }
        Ok(values)
    }
}

fn starts_numeric(line: &str) -> bool {
    line.chars()
        .next()
        .is_some_and(|c| c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'N' | 'i'))
        && !line.contains(':')
        && !line.contains('=')
}

fn push_floats(text: &str, line: usize, out: &mut Vec<f64>) -> Result<(), ParseError> {
    for tok in text.split_whitespace() {
        let v: f64 = tok
            .parse()
            .map_err(|_| ParseError::new(line, format!("invalid number `{tok}`")))?;
        out.push(v);
    }
    Ok(())
}

/// The `key=value` fields of one header line.
pub struct Record<'a> {
    pub line: usize,
    fields: Vec<(&'a str, &'a str)>,
}

impl<'a> Record<'a> {
    pub fn raw(&self, key: &str) -> Result<&'a str, ParseError> {
        self.fields
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| ParseError::new(self.line, format!("missing field `{key}`")))
    }

    pub fn int(&self, key: &str) -> Result<i64, ParseError> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| ParseError::new(self.line, format!("field `{key}`: invalid integer `{v}`")))
    }

    pub fn count(&self, key: &str) -> Result<usize, ParseError> {
        let v = self.int(key)?;
        usize::try_from(v)
            .map_err(|_| ParseError::new(self.line, format!("field `{key}` must be nonnegative, got {v}")))
    }

    pub fn float(&self, key: &str) -> Result<f64, ParseError> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| ParseError::new(self.line, format!("field `{key}`: invalid number `{v}`")))
    }
}

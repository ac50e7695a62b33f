//! Trace serialization: one record per line, `key=value` fields in fixed
//! order, floats at 9 significant digits. The format is append-only and
//! deterministic so identical runs produce byte-identical files.
//!
//! ```text
//! # loopstack trace v1
//! meta scenario=nominal_orbit seed=42 ...
//! t=0 ph=1 kind=signal node=world name=env illumination=1.00000000e0 ...
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const HEADER: &str = "# loopstack trace v1";

/// Fixed-width float rendering: 9 significant digits, exponent form.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.8e}")
}

/// Sanitize a free-form token so the line format stays parseable.
pub fn token(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_whitespace() || c == '=' { '_' } else { c })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Signal,
    Transition,
    Message,
    Event,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RowKind::Signal => "signal",
            RowKind::Transition => "transition",
            RowKind::Message => "message",
            RowKind::Event => "event",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "signal" => RowKind::Signal,
            "transition" => RowKind::Transition,
            "message" => RowKind::Message,
            "event" => RowKind::Event,
            other => return Err(Error::Parse(format!("unknown row kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub tick: u64,
    pub phase: u8,
    pub kind: RowKind,
    pub node: String,
    pub name: String,
    pub fields: Vec<(String, String)>,
}

impl TraceRow {
    pub fn field(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.field(key).and_then(|v| v.parse().ok())
    }
}

pub struct TraceWriter<W: Write> {
    sink: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut sink: W) -> Result<Self> {
        writeln!(sink, "{HEADER}")?;
        Ok(TraceWriter { sink })
    }

    pub fn meta(&mut self, pairs: &[(&str, String)]) -> Result<()> {
        let mut line = String::from("meta");
        for (k, v) in pairs {
            line.push(' ');
            line.push_str(k);
            line.push('=');
            line.push_str(&token(v));
        }
        writeln!(self.sink, "{line}")?;
        Ok(())
    }

    pub fn row(
        &mut self,
        tick: u64,
        phase: u8,
        kind: RowKind,
        node: &str,
        name: &str,
        fields: &[(&str, String)],
    ) -> Result<()> {
        let mut line = format!(
            "t={tick} ph={phase} kind={} node={} name={}",
            kind.as_str(),
            token(node),
            token(name)
        );
        for (k, v) in fields {
            line.push(' ');
            line.push_str(k);
            line.push('=');
            line.push_str(&token(v));
        }
        writeln!(self.sink, "{line}")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrace {
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<TraceRow>,
}

impl ParsedTrace {
    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn rows_of(&self, kind: RowKind) -> impl Iterator<Item = &TraceRow> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }
}

pub fn parse(reader: impl BufRead) -> Result<ParsedTrace> {
    let mut out = ParsedTrace::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(' ');
        let first = parts.next().unwrap_or_default();
        if first == "meta" {
            for kv in parts {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Parse(format!("line {lineno}: bad meta field {kv}")))?;
                out.meta.insert(k.to_string(), v.to_string());
            }
            continue;
        }

        let mut pairs: Vec<(String, String)> = Vec::new();
        for kv in std::iter::once(first).chain(parts) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {lineno}: bad field {kv}")))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        let mut take = |key: &str| -> Result<String> {
            let pos = pairs
                .iter()
                .position(|(k, _)| k == key)
                .ok_or_else(|| Error::Parse(format!("line {lineno}: missing {key}")))?;
            Ok(pairs.remove(pos).1)
        };
        let tick: u64 = take("t")?
            .parse()
            .map_err(|_| Error::Parse(format!("line {lineno}: bad tick")))?;
        let phase: u8 = take("ph")?
            .parse()
            .map_err(|_| Error::Parse(format!("line {lineno}: bad phase")))?;
        let kind = RowKind::parse(&take("kind")?)?;
        let node = take("node")?;
        let name = take("name")?;
        out.rows.push(TraceRow {
            tick,
            phase,
            kind,
            node,
            name,
            fields: pairs,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_float_format() {
        assert_eq!(fmt_f64(1.0), "1.00000000e0");
        assert_eq!(fmt_f64(0.35), "3.50000000e-1");
        assert_eq!(fmt_f64(-2.5e-7), "-2.50000000e-7");
        assert_eq!(fmt_f64(0.0), "0.00000000e0");
    }

    #[test]
    fn round_trips_rows() {
        let mut buf = Vec::new();
        {
            let mut w = TraceWriter::new(&mut buf).unwrap();
            w.meta(&[("scenario", "x".into()), ("seed", "42".into())]).unwrap();
            w.row(
                3,
                5,
                RowKind::Signal,
                "power/generation",
                "loop",
                &[("r", fmt_f64(1.0)), ("e_r", fmt_f64(0.25))],
            )
            .unwrap();
            w.row(4, 4, RowKind::Transition, "power", "CLOSED->OPEN_FAULT", &[("sscc", "survival".into())])
                .unwrap();
        }
        let parsed = parse(&buf[..]).unwrap();
        assert_eq!(parsed.meta["scenario"], "x");
        assert_eq!(parsed.rows.len(), 2);
        assert_eq!(parsed.rows[0].f64("e_r"), Some(0.25));
        assert_eq!(parsed.rows[1].kind, RowKind::Transition);
        assert_eq!(parsed.rows[1].name, "CLOSED->OPEN_FAULT");
    }

    #[test]
    fn tokens_are_sanitized() {
        assert_eq!(token("a b=c"), "a_b_c");
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        let text = format!("{HEADER}\nt=0 ph=1 kind=signal node=x\n");
        assert!(parse(text.as_bytes()).is_err());
    }
}

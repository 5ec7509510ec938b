//! Line-delimited metrics log.
//!
//! The first line is a header echoing the full scenario, then periodic
//! records and operator inputs, and last a summary whose `checksum` is the
//! SHA-256 of every line before it (each terminated by `\n`).

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const LOG_FORMAT: &str = concat!("rovermesh-metrics/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("log has no header")]
    NoHeader,
    #[error("log has no summary")]
    NoSummary,
    #[error("log was written by {found}, this is {expected}")]
    VersionMismatch { found: String, expected: String },
    #[error("checksum mismatch: recorded {recorded}, computed {computed}")]
    Checksum { recorded: String, computed: String },
}

#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    lines: Vec<String>,
    hasher: Sha256,
    checksum: Option<String>,
}

fn with_type(kind: &str, record: Value) -> Value {
    let mut m = match record {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    };
    m.insert("type".into(), Value::String(kind.into()));
    Value::Object(m)
}

impl MetricsLog {
    pub fn new(header: Value) -> MetricsLog {
        let mut log = MetricsLog::default();
        let mut h = with_type("header", header);
        h.as_object_mut().expect("object").insert("format".into(), json!(LOG_FORMAT));
        log.append(h);
        log
    }

    fn append(&mut self, v: Value) {
        let line = v.to_string();
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.lines.push(line);
    }

    pub fn push(&mut self, kind: &str, record: Value) {
        assert!(self.checksum.is_none(), "log already finished");
        self.append(with_type(kind, record));
    }

    /// Appends the summary with the checksum and seals the log.
    pub fn finish(&mut self, summary: Value) {
        if self.checksum.is_some() {
            return;
        }
        let digest = hex::encode(self.hasher.clone().finalize());
        let mut s = with_type("summary", summary);
        s.as_object_mut().expect("object").insert("checksum".into(), json!(digest));
        self.lines.push(s.to_string());
        self.checksum = Some(digest);
    }

    pub fn checksum(&self) -> Option<&str> {
        self.checksum.as_deref()
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn records(&self, kind: &str) -> impl Iterator<Item = Value> + '_ {
        let kind = kind.to_string();
        self.lines
            .iter()
            .filter_map(|l| serde_json::from_str::<Value>(l).ok())
            .filter(move |v| v["type"] == kind.as_str())
    }

    pub fn header(&self) -> Option<Value> {
        self.records("header").next()
    }

    pub fn summary(&self) -> Option<Value> {
        self.records("summary").last()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    /// Parses a log and checks its format version. See [`MetricsLog::verify`].
    pub fn parse(text: &str) -> Result<MetricsLog, LogError> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut values = Vec::with_capacity(lines.len());
        for (i, l) in lines.iter().enumerate() {
            let v: Value =
                serde_json::from_str(l).map_err(|e| LogError::Malformed { line: i + 1, message: e.to_string() })?;
            values.push(v);
        }
        let first = values.first().ok_or(LogError::NoHeader)?;
        if first["type"] != "header" {
            return Err(LogError::NoHeader);
        }
        let found = first["format"].as_str().unwrap_or("").to_string();
        if found != LOG_FORMAT {
            return Err(LogError::VersionMismatch { found, expected: LOG_FORMAT.into() });
        }
        let last = values.last().expect("non-empty");
        if last["type"] != "summary" {
            return Err(LogError::NoSummary);
        }
        let recorded = last["checksum"].as_str().unwrap_or("").to_string();
        let mut hasher = Sha256::new();
        for l in &lines[..lines.len() - 1] {
            hasher.update(l.as_bytes());
            hasher.update(b"\n");
        }
        Ok(MetricsLog { lines: lines.iter().map(|l| l.to_string()).collect(), hasher, checksum: Some(recorded) })
    }

    /// Recomputes the checksum over everything before the summary.
    pub fn verify(&self) -> Result<(), LogError> {
        let recorded = self.checksum.clone().unwrap_or_default();
        let computed = hex::encode(self.hasher.clone().finalize());
        if computed != recorded {
            return Err(LogError::Checksum { recorded, computed });
        }
        Ok(())
    }
}

/// First line where two logs differ, 1-based, with both versions.
pub fn first_divergence(a: &MetricsLog, b: &MetricsLog) -> Option<(usize, String, String)> {
    let n = a.lines.len().max(b.lines.len());
    (0..n).find_map(|i| {
        let x = a.lines.get(i).cloned().unwrap_or_default();
        let y = b.lines.get(i).cloned().unwrap_or_default();
        (x != y).then_some((i + 1, x, y))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsLog {
        let mut log = MetricsLog::new(json!({"seed": 3}));
        log.push("metrics", json!({"t": 60.0, "coverage": 0.25}));
        log.finish(json!({"coverage": 0.25}));
        log
    }

    #[test]
    fn round_trip_keeps_checksum() {
        let log = sample();
        let back = MetricsLog::parse(&log.to_text()).unwrap();
        back.verify().unwrap();
        assert_eq!(back.checksum(), log.checksum());
        assert!(first_divergence(&log, &back).is_none());
    }

    #[test]
    fn flipped_byte_is_detected() {
        let text = sample().to_text().replace("\"t\":60.0", "\"t\":61.0");
        let log = MetricsLog::parse(&text).unwrap();
        assert!(matches!(log.verify(), Err(LogError::Checksum { .. })));
    }

    #[test]
    fn foreign_version_is_refused() {
        let text = sample().to_text().replace(LOG_FORMAT, "rovermesh-metrics/0.0.0");
        assert!(matches!(MetricsLog::parse(&text), Err(LogError::VersionMismatch { .. })));
    }
}

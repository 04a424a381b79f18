//! Line-oriented report: `key=value` records in insertion order, closed by
//! a `summary=` line holding the same records as one JSON object. Values
//! that parse as numbers appear as JSON numbers.

use std::fmt;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{HarnessError, Result};

pub const FORMAT: &str = "cvgl-report/1";
pub const SUMMARY_KEY: &str = "summary";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    records: Vec<(String, String)>,
}

impl Report {
    pub fn new(kind: &str) -> Self {
        let mut r = Self::default();
        r.push("format", FORMAT);
        r.push("kind", kind);
        r
    }

    /// Appends a record. Keys may not contain `=` or line breaks.
    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        let key = key.into();
        let value = value.to_string();
        assert!(
            !key.contains(['=', '\n']) && key != SUMMARY_KEY && !value.contains('\n'),
            "invalid report record {key:?}"
        );
        self.records.push((key, value));
    }

    pub fn records(&self) -> &[(String, String)] {
        &self.records
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.records.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    /// Appends every record of `other` except its format and kind, with
    /// keys prefixed by `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Report) {
        for (k, v) in other.records.iter().filter(|(k, _)| k != "format" && k != "kind") {
            self.push(format!("{prefix}.{k}"), v);
        }
    }

    pub fn summary(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in &self.records {
            let value = if let Ok(n) = v.parse::<i64>() {
                Value::from(n)
            } else {
                match v.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                    Some(n) => Value::Number(n),
                    None => Value::String(v.clone()),
                }
            };
            map.insert(k.clone(), value);
        }
        Value::Object(map)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut report = Self::default();
        let mut summary = None;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::format(origin, format!("line {}: no '='", i + 1)))?;
            if k == SUMMARY_KEY {
                summary = Some(
                    serde_json::from_str::<Value>(v)
                        .map_err(|e| HarnessError::format(origin, format!("summary: {e}")))?,
                );
            } else if summary.is_some() {
                return Err(HarnessError::format(origin, "records after the summary line"));
            } else {
                report.records.push((k.to_string(), v.to_string()));
            }
        }
        let summary = summary.ok_or_else(|| HarnessError::format(origin, "missing summary line"))?;
        if summary != report.summary() {
            return Err(HarnessError::format(origin, "summary disagrees with the records"));
        }
        if report.get("format") != Some(FORMAT) {
            return Err(HarnessError::format(origin, "unknown report format"));
        }
        Ok(report)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.records {
            writeln!(f, "{k}={v}")?;
        }
        writeln!(f, "{SUMMARY_KEY}={}", self.summary())
    }
}

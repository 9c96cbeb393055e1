use std::fmt;
use std::path::Path;

use super::{read_text, write_bytes, IoError};

/// One line of a result file: `kind key=value key=value ...`.
///
/// Keys keep insertion order. Values hold no whitespace or `=`; absent numbers
/// are written `none`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

/// Shortest decimal that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v}")
}

impl Record {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        let v = value.to_string();
        debug_assert!(!v.is_empty() && !v.contains(char::is_whitespace) && !v.contains('='));
        self.fields.push((key.to_string(), v));
        self
    }

    pub fn with_f64(self, key: &str, value: f64) -> Self {
        self.with(key, format_f64(value))
    }

    pub fn with_opt(self, key: &str, value: Option<f64>) -> Self {
        match value {
            Some(v) => self.with_f64(key, v),
            None => self.with(key, "none"),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Numeric field; `none` reads as `None`.
    pub fn get_f64(&self, key: &str) -> Result<Option<f64>, IoError> {
        match self.get(key) {
            None => Err(IoError::Content(format!(
                "{} record has no {key}",
                self.kind
            ))),
            Some("none") => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                IoError::Content(format!("{} record: {key}={v} is not a number", self.kind))
            }),
        }
    }

    pub fn parse(line: &str, line_no: usize) -> Result<Self, IoError> {
        let mut parts = line.split_whitespace();
        let kind = parts.next().ok_or(IoError::Syntax {
            line: line_no,
            msg: "empty record".into(),
        })?;
        let mut rec = Record::new(kind);
        for p in parts {
            let (k, v) = p.split_once('=').ok_or(IoError::Syntax {
                line: line_no,
                msg: format!("expected key=value, got {p:?}"),
            })?;
            rec.fields.push((k.to_string(), v.to_string()));
        }
        Ok(rec)
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.kind)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

pub fn write_records(records: &[Record], path: &Path) -> Result<(), IoError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

/// Reads a record file; blank lines and `#` comments are skipped.
pub fn read_records(path: &Path) -> Result<Vec<Record>, IoError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(Record::parse(t, i + 1)?);
    }
    Ok(out)
}

//! Raw log ingestion: header stripping and template mining.

mod drain;

pub use drain::{similarity, DrainParams, EventTemplate, TemplateStore, WILDCARD};

use regex::Regex;

use crate::error::{Error, Result};

/// Header layout of the HDFS logs: `date time pid level component: content`.
pub const HDFS_HEADER: &str =
    r"^(?P<date>\d{6}) (?P<time>\d{6}) (?P<pid>\d+) (?P<level>[A-Z]+) (?P<component>[^:\s]+): (?P<content>.*)$";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub line_no: usize,
    pub timestamp: Option<String>,
    pub content: String,
    pub raw: String,
}

/// Compiled header pattern.
///
/// A non-empty pattern must define a `content` group. Optional `timestamp`,
/// or `date` and `time`, groups populate [`LogRecord::timestamp`]. Lines the
/// pattern does not match keep their raw text as content.
#[derive(Debug, Clone)]
pub struct HeaderPattern {
    regex: Option<Regex>,
}

impl HeaderPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        if pattern.is_empty() {
            return Ok(Self { regex: None });
        }
        let regex = Regex::new(pattern).map_err(|e| Error::Config(format!("invalid header pattern: {e}")))?;
        if !regex.capture_names().any(|n| n == Some("content")) {
            return Err(Error::Config(
                "header pattern must define a named `content` group".into(),
            ));
        }
        Ok(Self { regex: Some(regex) })
    }

    pub fn none() -> Self {
        Self { regex: None }
    }

    /// Splits a raw line into header and content. Returns `None` for lines
    /// whose content is empty; callers skip those.
    pub fn strip(&self, line_no: usize, raw: &str) -> Option<LogRecord> {
        let raw = raw.trim_end_matches(['\r', '\n']);
        let (timestamp, content) = match self.regex.as_ref().and_then(|re| re.captures(raw)) {
            Some(caps) => {
                let ts = caps.name("timestamp").map(|m| m.as_str().to_string()).or_else(|| {
                    match (caps.name("date"), caps.name("time")) {
                        (Some(d), Some(t)) => Some(format!("{} {}", d.as_str(), t.as_str())),
                        (Some(d), None) => Some(d.as_str().to_string()),
                        _ => None,
                    }
                });
                (ts, caps.name("content").map_or("", |m| m.as_str()))
            }
            None => (None, raw),
        };
        if content.trim().is_empty() {
            return None;
        }
        Some(LogRecord {
            line_no,
            timestamp,
            content: content.to_string(),
            raw: raw.to_string(),
        })
    }
}

//! Newline-delimited JSON traces: a header line with the resolved config,
//! one line per round, and an optional trailing error line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::RoundRecord;
use crate::error::{Error, ErrorKind, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// SHA-256 of the compact JSON form of `config`. Object keys serialize in
/// sorted order, so equal configs hash equally.
pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("a JSON value always serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub version: String,
}

impl TraceHeader {
    pub fn new(config: serde_json::Value) -> Self {
        let config_hash = config_hash(&config);
        Self { config, config_hash, version: VERSION.to_string() }
    }
}

/// Diagnostic line written when a run aborts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub error: String,
    pub kind: String,
    pub rounds_completed: usize,
}

impl ErrorRecord {
    pub fn new(error: &Error, rounds_completed: usize) -> Self {
        let kind = match error.kind() {
            ErrorKind::Config => "config",
            ErrorKind::Backend => "backend",
            ErrorKind::Numerical => "numerical",
            ErrorKind::Io => "io",
        };
        Self { error: error.to_string(), kind: kind.into(), rounds_completed }
    }
}

pub fn write_trace<W: Write>(
    mut out: W,
    header: &TraceHeader,
    records: &[RoundRecord],
    error: Option<&ErrorRecord>,
) -> Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    if let Some(e) = error {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<RoundRecord>,
    pub error: Option<ErrorRecord>,
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Trace> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::InvalidConfig("empty trace".into()))??;
    let header: TraceHeader = serde_json::from_str(&first)?;
    let mut records = Vec::new();
    let mut error = None;
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if error.is_some() {
            return Err(Error::InvalidConfig("trace continues after its error line".into()));
        }
        let value: serde_json::Value = serde_json::from_str(&line)?;
        if value.get("error").is_some() {
            error = Some(serde_json::from_value(value)?);
        } else {
            records.push(serde_json::from_value(value)?);
        }
    }
    Ok(Trace { header, records, error })
}

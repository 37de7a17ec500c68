//! Metrics store and the JSONL record stream.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Who a metric belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Server,
    Client(u32),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Server => f.write_str("server"),
            Scope::Client(id) => write!(f, "{id}"),
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "server" {
            return Ok(Scope::Server);
        }
        s.parse()
            .map(Scope::Client)
            .map_err(|_| Error::InvalidInput(format!("bad metric scope `{s}`")))
    }
}

/// A single written value, in write order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub scope: Scope,
    pub round: u32,
    pub name: String,
    pub value: f64,
}

/// Metrics keyed scope -> round -> name.
///
/// Writes overwrite per key; every write is also queued for the JSONL
/// stream. Reads of absent keys return `None`, never a default.
#[derive(Debug, Clone, Default)]
pub struct MetricsStore {
    values: BTreeMap<Scope, BTreeMap<u32, BTreeMap<String, f64>>>,
    pending: Vec<MetricEntry>,
}

impl MetricsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, scope: Scope, round: u32, name: &str, value: f64) {
        if !value.is_finite() {
            log::warn!("dropping non-finite metric {name}={value} for {scope} round {round}");
            return;
        }
        self.values
            .entry(scope)
            .or_default()
            .entry(round)
            .or_default()
            .insert(name.to_string(), value);
        self.pending.push(MetricEntry { scope, round, name: name.to_string(), value });
    }

    pub fn get(&self, scope: Scope, round: u32, name: &str) -> Option<f64> {
        self.values.get(&scope)?.get(&round)?.get(name).copied()
    }

    /// Everything recorded for one scope and round.
    pub fn round_values(&self, scope: Scope, round: u32) -> Option<&BTreeMap<String, f64>> {
        self.values.get(&scope)?.get(&round)
    }

    /// Current value of every `(scope, round, name)` key carrying `name`.
    pub fn find(&self, name: &str) -> Vec<(Scope, u32, f64)> {
        let mut out = Vec::new();
        for (scope, rounds) in &self.values {
            for (round, names) in rounds {
                if let Some(v) = names.get(name) {
                    out.push((*scope, *round, *v));
                }
            }
        }
        out
    }

    /// Adds `delta` to the current value (absent counts as zero).
    pub fn increment(&mut self, scope: Scope, round: u32, name: &str, delta: f64) {
        let current = self.get(scope, round, name).unwrap_or(0.0);
        self.set(scope, round, name, current + delta);
    }

    /// Writes not yet handed to a sink, oldest first.
    pub fn take_pending(&mut self) -> Vec<MetricEntry> {
        std::mem::take(&mut self.pending)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Wall-clock timestamps in deployment, simulated seconds in simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Timestamp {
    Sim(f64),
    Wall(String),
}

impl Timestamp {
    pub fn wall_now() -> Self {
        Timestamp::Wall(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub ts: Timestamp,
    pub round: u32,
    pub scope: String,
    pub name: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn from_entry(entry: &MetricEntry, ts: Timestamp) -> Self {
        Self { ts, round: entry.round, scope: entry.scope.to_string(), name: entry.name.clone(), value: entry.value }
    }
}

/// Destination of metric records.
pub trait MetricsSink: Send {
    fn write(&mut self, records: &[MetricRecord]) -> Result<()>;
}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct MemorySink(pub Vec<MetricRecord>);

impl MetricsSink for MemorySink {
    fn write(&mut self, records: &[MetricRecord]) -> Result<()> {
        self.0.extend_from_slice(records);
        Ok(())
    }
}

/// Appends one JSON object per line, flushing after every batch.
pub struct JsonlWriter<W: Write + Send> {
    out: W,
}

impl JsonlWriter<std::io::BufWriter<std::fs::File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { out: std::io::BufWriter::new(std::fs::File::create(path)?) })
    }
}

impl<W: Write + Send> JsonlWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> MetricsSink for JsonlWriter<W> {
    fn write(&mut self, records: &[MetricRecord]) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut self.out, r).map_err(|e| Error::Internal(e.to_string()))?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Parses a metrics file; every line must be a complete record.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_reads_are_none() {
        let mut m = MetricsStore::new();
        assert_eq!(m.get(Scope::Client(0), 0, "test_acc"), None);
        m.set(Scope::Client(0), 0, "test_acc", 0.5);
        assert_eq!(m.get(Scope::Client(0), 0, "test_acc"), Some(0.5));
        assert_eq!(m.get(Scope::Client(0), 1, "test_acc"), None);
        m.set(Scope::Client(0), 0, "test_acc", 0.75);
        assert_eq!(m.get(Scope::Client(0), 0, "test_acc"), Some(0.75));
        assert_eq!(m.take_pending().len(), 2);
        assert!(m.take_pending().is_empty());
    }

    #[test]
    fn increment_counts() {
        let mut m = MetricsStore::new();
        m.increment(Scope::Server, 2, "hook_error_count", 1.0);
        m.increment(Scope::Server, 2, "hook_error_count", 1.0);
        assert_eq!(m.get(Scope::Server, 2, "hook_error_count"), Some(2.0));
    }

    #[test]
    fn jsonl_lines_have_five_fields() {
        let mut w = JsonlWriter::new(Vec::new());
        let recs = [
            MetricRecord { ts: Timestamp::Sim(1.5), round: 0, scope: "server".into(), name: "loss".into(), value: 0.25 },
            MetricRecord { ts: Timestamp::Wall("2026-01-01T00:00:00.000Z".into()), round: 1, scope: "3".into(), name: "test_acc".into(), value: 1.0 },
        ];
        w.write(&recs).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for (line, rec) in lines.iter().zip(&recs) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v.as_object().unwrap().len(), 5);
            assert_eq!(&serde_json::from_str::<MetricRecord>(line).unwrap(), rec);
        }
    }

    #[test]
    fn scope_round_trip() {
        for s in [Scope::Server, Scope::Client(0), Scope::Client(17)] {
            assert_eq!(s.to_string().parse::<Scope>().unwrap(), s);
        }
        assert!("srv".parse::<Scope>().is_err());
    }
}

//! JSON Lines logs of exchanges and training metrics.
//!
//! Each party writes two files into the run's log directory:
//! `<run_id>.<party>.events.jsonl` (one [`EventRecord`] per send/recv) and
//! `<run_id>.<party>.metrics.jsonl` (one [`MetricRecord`] per metric point).
//! Every record is written with a single `write_all` of one line while
//! holding the file lock, so lines never interleave.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::PartyId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot open log file {path}: {source}")]
    Open {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("write to log failed: {0}")]
    Write(#[from] std::io::Error),
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Send,
    Recv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub ts_unix_micros: u64,
    pub party: PartyId,
    pub direction: Direction,
    pub peer: PartyId,
    pub method: String,
    pub payload_bytes: u64,
    pub duration_micros: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Loss,
    Accuracy,
    Auc,
    MatchedRows,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Loss => "loss",
            MetricName::Accuracy => "accuracy",
            MetricName::Auc => "auc",
            MetricName::MatchedRows => "matched_rows",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub ts_unix_micros: u64,
    pub party: PartyId,
    pub epoch: u64,
    pub name: MetricName,
    pub value: f64,
}

pub fn now_micros() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

pub fn events_path(dir: &Path, run_id: &str, party: PartyId) -> PathBuf {
    dir.join(format!("{run_id}.{party}.events.jsonl"))
}

pub fn metrics_path(dir: &Path, run_id: &str, party: PartyId) -> PathBuf {
    dir.join(format!("{run_id}.{party}.metrics.jsonl"))
}

#[derive(Default)]
struct Recorded {
    events: Vec<EventRecord>,
    metrics: Vec<MetricRecord>,
}

/// Per-party log writer. Records are also kept in memory so tests and the
/// runner can inspect them without re-reading the files.
pub struct MetricsSink {
    files: Option<(Mutex<File>, Mutex<File>)>,
    recorded: Mutex<Recorded>,
}

impl MetricsSink {
    /// Creates (truncating) both log files. Failure here is the only place
    /// an unwritable log directory is reported.
    pub fn open(dir: &Path, run_id: &str, party: PartyId) -> Result<Self, MetricsError> {
        std::fs::create_dir_all(dir).map_err(|source| MetricsError::Open {
            path: dir.to_path_buf(),
            source,
        })?;
        let open = |path: PathBuf| {
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|source| MetricsError::Open { path, source })
        };
        let events = open(events_path(dir, run_id, party))?;
        let metrics = open(metrics_path(dir, run_id, party))?;
        Ok(MetricsSink {
            files: Some((Mutex::new(events), Mutex::new(metrics))),
            recorded: Mutex::default(),
        })
    }

    pub fn memory() -> Self {
        MetricsSink {
            files: None,
            recorded: Mutex::default(),
        }
    }

    pub fn log_event(&self, r: EventRecord) -> Result<(), MetricsError> {
        if let Some((events, _)) = &self.files {
            write_line(events, &r)?;
        }
        self.recorded.lock().unwrap().events.push(r);
        Ok(())
    }

    pub fn log_metric(&self, r: MetricRecord) -> Result<(), MetricsError> {
        if let Some((_, metrics)) = &self.files {
            write_line(metrics, &r)?;
        }
        self.recorded.lock().unwrap().metrics.push(r);
        Ok(())
    }

    pub fn events(&self) -> Vec<EventRecord> {
        self.recorded.lock().unwrap().events.clone()
    }

    pub fn metrics(&self) -> Vec<MetricRecord> {
        self.recorded.lock().unwrap().metrics.clone()
    }
}

fn write_line<T: Serialize>(file: &Mutex<File>, record: &T) -> Result<(), MetricsError> {
    let mut line = serde_json::to_vec(record).map_err(std::io::Error::other)?;
    line.push(b'\n');
    let mut f = file.lock().unwrap();
    f.write_all(&line)?;
    f.flush()?;
    Ok(())
}

/// Aggregated view over one or more log files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Keyed by `"<sender>-><receiver>"`, counting only `send` events.
    pub total_bytes_sent: BTreeMap<String, u64>,
    pub mean_duration_micros: BTreeMap<String, f64>,
    /// Keyed by `"<party>/<metric>"`, as `(epoch, value)` in log order.
    pub metric_series: BTreeMap<String, Vec<(u64, f64)>>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>14}", "pair", "bytes_sent");
        for (pair, bytes) in &self.total_bytes_sent {
            let _ = writeln!(out, "{pair:<28} {bytes:>14}");
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<28} {:>14}", "method", "mean_us");
        for (method, mean) in &self.mean_duration_micros {
            let _ = writeln!(out, "{method:<28} {mean:>14.1}");
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<28} {:>6} {:>14}", "series", "epoch", "value");
        for (name, points) in &self.metric_series {
            for (epoch, value) in points {
                let _ = writeln!(out, "{name:<28} {epoch:>6} {value:>14.6}");
            }
        }
        out
    }
}

/// Aggregates event and metric files. A file is treated as an events log
/// if its name ends in `.events.jsonl` and as a metrics log otherwise.
pub fn summarize(paths: &[PathBuf]) -> Result<Report, MetricsError> {
    let mut report = Report::default();
    let mut durations: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for path in paths {
        let is_events = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(".events.jsonl"));
        let file = File::open(path).map_err(|source| MetricsError::Open {
            path: path.clone(),
            source,
        })?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |e: serde_json::Error| MetricsError::Malformed {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            };
            if is_events {
                let ev: EventRecord = serde_json::from_str(&line).map_err(malformed)?;
                if ev.direction == Direction::Send {
                    *report
                        .total_bytes_sent
                        .entry(format!("{}->{}", ev.party, ev.peer))
                        .or_default() += ev.payload_bytes;
                }
                let slot = durations.entry(ev.method).or_default();
                slot.0 += ev.duration_micros;
                slot.1 += 1;
            } else {
                let m: MetricRecord = serde_json::from_str(&line).map_err(malformed)?;
                report
                    .metric_series
                    .entry(format!("{}/{}", m.party, m.name.as_str()))
                    .or_default()
                    .push((m.epoch, m.value));
            }
        }
    }
    report.mean_duration_micros = durations
        .into_iter()
        .map(|(method, (total, count))| (method, total as f64 / count as f64))
        .collect();
    Ok(report)
}

/// All log files of `run_id` inside `dir`, in name order.
pub fn run_log_files(dir: &Path, run_id: &str) -> std::io::Result<Vec<PathBuf>> {
    let prefix = format!("{run_id}.");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| {
                n.starts_with(&prefix)
                    && (n.ends_with(".events.jsonl") || n.ends_with(".metrics.jsonl"))
            })
        })
        .collect();
    files.sort();
    Ok(files)
}

//! Runs a configured experiment, either with every party as a thread in
//! one process or as a single networked agent.
//!
//! Each party leaves two files in the log directory next to its event and
//! metric logs: `<run_id>.<party>.transcript.jsonl` (the timing-free
//! message sequence) and `<run_id>.<party>.model.json` (final parameters).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::json;
use thiserror::Error;

use crate::comms::LocalHub;
use crate::comms::wire::{self, WireConfig};
use crate::comms::{CommError, PartyId, Transcript};
use crate::config::{ConfigError, RunConfig};
use crate::data::{load_party_csv, DataError, PartyDataset};
use crate::matching::MatchError;
use crate::metrics::{MetricsError, MetricsSink};
use crate::protocols::{run_party, PartyOutcome, ProtocolError};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_TRANSPORT: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{party}: {source}")]
    Data { party: PartyId, source: DataError },
    #[error(transparent)]
    Log(#[from] MetricsError),
    #[error("{party}: {source}")]
    Comm { party: PartyId, source: CommError },
    #[error("{party}: {source}")]
    Party { party: PartyId, source: ProtocolError },
    #[error("{0} panicked")]
    Panic(PartyId),
    #[error("{0} is not part of this run")]
    UnknownParty(PartyId),
}

fn comm_exit_code(e: &CommError) -> i32 {
    match e {
        CommError::Transport { .. }
        | CommError::Timeout { .. }
        | CommError::Gather { .. }
        | CommError::Aborted(_)
        | CommError::Bind { .. } => EXIT_TRANSPORT,
        CommError::Config(_) | CommError::Log(_) => EXIT_CONFIG,
        CommError::Frame(_) | CommError::InvalidMessage(_) | CommError::Addressing(_) => EXIT_PROTOCOL,
    }
}

impl RunError {
    /// Process exit status: 1 for configuration and data problems, 2 for
    /// transport failures and timeouts, 3 for protocol violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io { .. } | RunError::Data { .. } | RunError::Log(_) => EXIT_CONFIG,
            RunError::UnknownParty(_) => EXIT_CONFIG,
            RunError::Comm { source, .. } => comm_exit_code(source),
            RunError::Panic(_) => EXIT_PROTOCOL,
            RunError::Party { source, .. } => match source {
                ProtocolError::Comm(e) | ProtocolError::Match(MatchError::Comm(e)) => comm_exit_code(e),
                ProtocolError::Config(_)
                | ProtocolError::Topology(_)
                | ProtocolError::Data(_)
                | ProtocolError::Log(_)
                | ProtocolError::Match(MatchError::Log(_))
                | ProtocolError::Match(MatchError::Duplicate { .. })
                | ProtocolError::Match(MatchError::InvalidId { .. }) => EXIT_CONFIG,
                _ => EXIT_PROTOCOL,
            },
        }
    }
}

/// One party's result together with the messages it saw.
#[derive(Debug, Clone)]
pub struct PartyRun {
    pub outcome: PartyOutcome,
    pub transcript: Transcript,
}

pub fn transcript_path(dir: &Path, run_id: &str, party: PartyId) -> PathBuf {
    dir.join(format!("{run_id}.{party}.transcript.jsonl"))
}

pub fn model_path(dir: &Path, run_id: &str, party: PartyId) -> PathBuf {
    dir.join(format!("{run_id}.{party}.model.json"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_data(cfg: &RunConfig, party: PartyId) -> Result<Option<PartyDataset>, RunError> {
    let spec = cfg.spec(party).ok_or(RunError::UnknownParty(party))?;
    spec.data
        .as_ref()
        .map(|d| load_party_csv(&d.path, &d.id_column, d.label_column.as_deref()))
        .transpose()
        .map_err(|source| RunError::Data { party, source })
}

fn write_transcript(path: &Path, transcript: &Transcript) -> Result<(), RunError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for entry in transcript {
        let line = serde_json::to_string(entry).expect("transcript entries serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// JSON form of a party's trained model.
pub fn model_json(cfg: &RunConfig, outcome: &PartyOutcome) -> serde_json::Value {
    let params: BTreeMap<String, serde_json::Value> = outcome
        .model
        .parameters()
        .into_iter()
        .map(|(name, t)| (name, json!({ "rows": t.rows(), "cols": t.cols(), "data": t.data() })))
        .collect();
    json!({
        "run_id": cfg.run_id,
        "party": outcome.party.to_string(),
        "protocol": cfg.train.protocol,
        "matched_rows": outcome.matched_rows,
        "final_loss": outcome.final_loss,
        "params": params,
    })
}

fn write_outputs(cfg: &RunConfig, run: &PartyRun) -> Result<(), RunError> {
    let party = run.outcome.party;
    write_transcript(&transcript_path(&cfg.log_dir, &cfg.run_id, party), &run.transcript)?;
    let path = model_path(&cfg.log_dir, &cfg.run_id, party);
    let text = serde_json::to_string_pretty(&model_json(cfg, &run.outcome)).expect("model serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

fn prepare(cfg: &RunConfig, party: PartyId) -> Result<(Option<PartyDataset>, Arc<MetricsSink>), RunError> {
    let data = load_data(cfg, party)?;
    let sink = Arc::new(MetricsSink::open(&cfg.log_dir, &cfg.run_id, party)?);
    Ok((data, sink))
}

/// Runs every party as a thread of this process over in-memory channels.
///
/// On the first failure the remaining parties are aborted; the error
/// returned is that of the party that failed first.
pub fn run_local(cfg: &RunConfig) -> Result<Vec<PartyRun>, RunError> {
    fs::create_dir_all(&cfg.log_dir).map_err(io_err(&cfg.log_dir))?;
    let parties = cfg.party_ids();
    let prepared = parties
        .iter()
        .map(|&p| prepare(cfg, p))
        .collect::<Result<Vec<_>, _>>()?;
    let hub = LocalHub::new(parties.iter().copied());
    let failures: Mutex<Vec<(PartyId, ProtocolError)>> = Mutex::default();

    let results: Vec<Option<PartyRun>> = thread::scope(|s| {
        let handles: Vec<_> = parties
            .iter()
            .zip(&prepared)
            .map(|(&party, (data, sink))| {
                let hub = &hub;
                let failures = &failures;
                let handle = s.spawn(move || {
                    let comm = hub
                        .communicator(party, Arc::clone(sink), cfg.recv_timeout)
                        .expect("hub built from the same party list");
                    match run_party(&comm, data.as_ref(), &cfg.train) {
                        Ok(outcome) => Some(PartyRun {
                            outcome,
                            transcript: comm.transcript(),
                        }),
                        Err(e) => {
                            let reason = format!("{party} failed: {e}");
                            failures.lock().unwrap().push((party, e));
                            hub.abort(&reason);
                            None
                        }
                    }
                });
                (party, handle)
            })
            .collect();
        handles
            .into_iter()
            .map(|(party, h)| {
                h.join().unwrap_or_else(|_| {
                    hub.abort(&format!("{party} panicked"));
                    None
                })
            })
            .collect()
    });

    if let Some((party, source)) = failures.into_inner().unwrap().into_iter().next() {
        return Err(RunError::Party { party, source });
    }
    let mut runs = Vec::with_capacity(results.len());
    for (party, result) in parties.iter().zip(results) {
        let run = result.ok_or(RunError::Panic(*party))?;
        write_outputs(cfg, &run)?;
        runs.push(run);
    }
    Ok(runs)
}

/// Runs one party as a networked agent using the addresses in the config.
pub fn run_agent(cfg: &RunConfig, party: PartyId) -> Result<PartyRun, RunError> {
    fs::create_dir_all(&cfg.log_dir).map_err(io_err(&cfg.log_dir))?;
    let topology = cfg.topology()?;
    let (data, sink) = prepare(cfg, party)?;
    let comm = wire::connect(
        WireConfig {
            me: party,
            topology,
            recv_timeout: cfg.recv_timeout,
        },
        sink,
    )
    .map_err(|source| RunError::Comm { party, source })?;
    let result = run_party(&comm, data.as_ref(), &cfg.train);
    let transcript = comm.transcript();
    drop(comm);
    match result {
        Ok(outcome) => {
            let run = PartyRun { outcome, transcript };
            write_outputs(cfg, &run)?;
            Ok(run)
        }
        Err(source) => {
            write_transcript(&transcript_path(&cfg.log_dir, &cfg.run_id, party), &transcript)?;
            Err(RunError::Party { party, source })
        }
    }
}

//! Training protocols: the message sequences each party runs.
//!
//! | protocol     | parties                     | per-iteration methods |
//! |--------------|-----------------------------|-----------------------|
//! | `linreg`     | master + members            | `batch`, `partial_pred`, `residual` |
//! | `logreg`     | master + members            | `batch`, `partial_pred`, `residual` |
//! | `he_logreg`  | master + members + arbiter  | `batch`, `enc_partial`, `enc_residual`, `masked_enc_grad`, `masked_grad` |
//! | `split_mlp`  | master + members            | `batch`, `activations`, `act_grad` |
//!
//! The master owns the labels, draws the batch order and broadcasts it as
//! explicit index lists into the matched row order.

mod eval;
mod he;
mod linear;
mod split;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::comms::{CommError, Communicator, PartyId, Role, Transcript};
use crate::data::PartyDataset;
use crate::matching::{self, MatchError};
use crate::metrics::MetricsError;
use crate::models::{Init, LinearBlock, MlpBottom, MlpHead, ModelError, DEFAULT_HIDDEN};
use crate::paillier::HeError;
use crate::rng::{self, Purpose};
use crate::tensor::{Tensor, TensorError};

pub use eval::{accuracy, auc, log_loss, EvalMetrics};
pub use he::{run_he_logreg, taylor_residual, TAYLOR_INTERCEPT, TAYLOR_SLOPE};
pub use linear::{run_linreg, run_logreg};
pub use split::run_split_mlp;

pub type ProtocolTranscript = Transcript;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Linreg,
    Logreg,
    HeLogreg,
    SplitMlp,
}

impl ProtocolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolKind::Linreg => "linreg",
            ProtocolKind::Logreg => "logreg",
            ProtocolKind::HeLogreg => "he_logreg",
            ProtocolKind::SplitMlp => "split_mlp",
        }
    }

    pub fn is_classification(self) -> bool {
        self != ProtocolKind::Linreg
    }

    /// Distinct message methods exchanged in one training iteration.
    pub fn iteration_methods(self) -> &'static [&'static str] {
        match self {
            ProtocolKind::Linreg | ProtocolKind::Logreg => &["batch", "partial_pred", "residual"],
            ProtocolKind::HeLogreg => &["batch", "enc_partial", "enc_residual", "masked_enc_grad", "masked_grad"],
            ProtocolKind::SplitMlp => &["batch", "activations", "act_grad"],
        }
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linreg" => Ok(ProtocolKind::Linreg),
            "logreg" => Ok(ProtocolKind::Logreg),
            "he_logreg" => Ok(ProtocolKind::HeLogreg),
            "split_mlp" => Ok(ProtocolKind::SplitMlp),
            other => Err(format!(
                "unknown protocol '{other}' (expected linreg, logreg, he_logreg or split_mlp)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeSettings {
    pub key_bits: u64,
    pub insecure_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub protocol: ProtocolKind,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub he: Option<HeSettings>,
    pub eval_every: u64,
    /// Hidden width per party for `split_mlp`.
    pub hidden: usize,
    pub init: Init,
}

impl TrainConfig {
    pub fn new(protocol: ProtocolKind, epochs: u64, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            protocol,
            epochs,
            batch_size,
            learning_rate,
            seed,
            he: None,
            eval_every: 1,
            hidden: DEFAULT_HIDDEN,
            init: Init::Uniform,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.eval_every == 0 {
            return Err("eval_every must be at least 1".into());
        }
        if self.hidden == 0 {
            return Err("hidden must be at least 1".into());
        }
        match (self.protocol, self.he) {
            (ProtocolKind::HeLogreg, None) => Err("he_logreg needs an [he] section".into()),
            (ProtocolKind::HeLogreg, Some(_)) => Ok(()),
            (p, Some(_)) => Err(format!("[he] settings given but protocol {p} does not use encryption")),
            (_, None) => Ok(()),
        }
    }

    pub fn is_eval_epoch(&self, epoch: u64) -> bool {
        (epoch + 1) % self.eval_every == 0 || epoch + 1 == self.epochs
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("matching failed: {0}")]
    Match(#[from] MatchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("encryption: {0}")]
    He(#[from] HeError),
    #[error(transparent)]
    Log(#[from] MetricsError),
    #[error("topology error: {0}")]
    Topology(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("unexpected payload in '{method}': {reason}")]
    Payload { method: String, reason: String },
}

impl ProtocolError {
    /// The communication error at the root of this failure, if any.
    pub fn comm_error(&self) -> Option<&CommError> {
        match self {
            ProtocolError::Comm(e) | ProtocolError::Match(MatchError::Comm(e)) => Some(e),
            _ => None,
        }
    }
}

/// A party's trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Linear(LinearBlock),
    Split {
        bottom: Option<MlpBottom>,
        head: Option<MlpHead>,
    },
    /// The arbiter holds no parameters.
    Keyholder,
}

impl TrainedModel {
    /// Parameters by name, for dumps and comparisons.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        match self {
            TrainedModel::Linear(b) => vec![("w".into(), b.weights.clone())],
            TrainedModel::Split { bottom, head } => {
                let mut out = Vec::new();
                if let Some(b) = bottom {
                    out.push(("w1".into(), b.w1.clone()));
                    out.push(("b1".into(), b.b1.clone()));
                }
                if let Some(h) = head {
                    out.push(("w2".into(), h.w2.clone()));
                    out.push(("b2".into(), Tensor::column(&[h.b2])));
                }
                out
            }
            TrainedModel::Keyholder => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartyOutcome {
    pub party: PartyId,
    pub model: TrainedModel,
    /// Last evaluated loss (master only).
    pub final_loss: Option<f64>,
    pub matched_rows: usize,
}

/// A party's data after matching: rows in shared order.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedData {
    pub features: Tensor,
    pub labels: Option<Tensor>,
}

impl AlignedData {
    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub(crate) fn labels(&self) -> Result<&Tensor, ProtocolError> {
        self.labels
            .as_ref()
            .ok_or_else(|| ProtocolError::Data("master has no label column".into()))
    }
}

/// Row permutation for one epoch, cut into consecutive batches.
pub fn batch_schedule(seed: u64, epoch: u64, rows: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Shuffle { epoch }, PartyId::master()));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn batches_per_epoch(rows: usize, batch_size: usize) -> usize {
    rows.div_ceil(batch_size.max(1))
}

pub(crate) fn encode_indices(idx: &[usize]) -> Vec<u8> {
    idx.iter().flat_map(|&i| (i as u32).to_le_bytes()).collect()
}

pub(crate) fn decode_indices(bytes: &[u8], rows: usize) -> Result<Vec<usize>, ProtocolError> {
    let bad = |reason: String| ProtocolError::Payload {
        method: "batch".into(),
        reason,
    };
    if bytes.len() % 4 != 0 {
        return Err(bad(format!("{} bytes is not a whole number of u32 indices", bytes.len())));
    }
    bytes
        .chunks_exact(4)
        .map(|c| {
            let i = u32::from_le_bytes(c.try_into().unwrap()) as usize;
            if i < rows {
                Ok(i)
            } else {
                Err(bad(format!("index {i} out of range for {rows} rows")))
            }
        })
        .collect()
}

/// Sums member partials in ascending member order, then adds the master's.
pub(crate) fn aggregate(partials: &[&Tensor], own: &Tensor) -> Result<Tensor, TensorError> {
    let mut parts = partials.iter().copied().chain(std::iter::once(own));
    let mut z = parts.next().expect("own is always present").clone();
    for p in parts {
        z = z.add(p)?;
    }
    Ok(z)
}

/// Appends the constant column that carries the intercept on the master.
pub fn with_bias(features: &Tensor) -> Tensor {
    Tensor::hcat(&[features, &Tensor::filled(features.rows(), 1, 1.0)]).expect("same row count")
}

pub(crate) fn expect_shape(method: &str, t: &Tensor, shape: (usize, usize)) -> Result<(), ProtocolError> {
    if t.shape() != shape {
        return Err(ProtocolError::Payload {
            method: method.into(),
            reason: format!("expected shape {shape:?}, got {:?}", t.shape()),
        });
    }
    Ok(())
}

/// Gathers one tensor per sender, in sender order, checking its shape.
pub(crate) fn gather_tensors(
    comm: &Communicator,
    from: &[PartyId],
    method: &str,
    name: &str,
    rows: usize,
    cols: Option<usize>,
) -> Result<Vec<Tensor>, ProtocolError> {
    comm.gather(from, method)?
        .into_iter()
        .map(|msg| {
            let t = msg.tensor(name)?.clone();
            expect_shape(method, &t, (rows, cols.unwrap_or(t.cols())))?;
            Ok(t)
        })
        .collect()
}

/// Receives the master's batch indices for this step.
pub(crate) fn recv_batch(comm: &Communicator, rows: usize) -> Result<Vec<usize>, ProtocolError> {
    let msg = comm.recv(PartyId::master(), "batch")?;
    decode_indices(msg.blob("idx")?, rows)
}

fn check_topology(comm: &Communicator, cfg: &TrainConfig) -> Result<(), ProtocolError> {
    if !comm.parties().any(|p| p == PartyId::master()) {
        return Err(ProtocolError::Topology("no master in the run".into()));
    }
    let members = comm.members();
    if members.is_empty() {
        return Err(ProtocolError::Topology("at least one member is required".into()));
    }
    if let Some(gap) = members.iter().enumerate().find(|(i, p)| p.index != *i as u32) {
        return Err(ProtocolError::Topology(format!("member indices are not contiguous at {}", gap.1)));
    }
    match (cfg.protocol, comm.has_arbiter()) {
        (ProtocolKind::HeLogreg, false) => Err(ProtocolError::Topology("he_logreg requires an arbiter".into())),
        (ProtocolKind::HeLogreg, true) => Ok(()),
        (p, true) => Err(ProtocolError::Topology(format!("protocol {p} does not use an arbiter"))),
        (_, false) => Ok(()),
    }
}

fn align(data: &PartyDataset, index: &matching::RowIndex) -> Result<AlignedData, ProtocolError> {
    let rows = index.local_rows();
    Ok(AlignedData {
        features: data.features.select_rows(&rows)?,
        labels: data.labels.as_ref().map(|l| l.select_rows(&rows)).transpose()?,
    })
}

/// Runs matching followed by the configured protocol for this party.
///
/// `data` is `None` only for the arbiter.
pub fn run_party(comm: &Communicator, data: Option<&PartyDataset>, cfg: &TrainConfig) -> Result<PartyOutcome, ProtocolError> {
    cfg.validate().map_err(ProtocolError::Config)?;
    check_topology(comm, cfg)?;
    let me = comm.me();
    if me.role == Role::Arbiter {
        let shared = matching::await_shared_order(comm)?;
        return he::run_arbiter(comm, shared.len(), cfg);
    }
    let data = data.ok_or_else(|| ProtocolError::Data(format!("{me} has no dataset")))?;
    if me.role == Role::Master {
        let labels = data
            .labels
            .as_ref()
            .ok_or_else(|| ProtocolError::Data("master has no label column".into()))?;
        if cfg.protocol.is_classification() && labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(ProtocolError::Data(format!("{} needs labels in {{0, 1}}", cfg.protocol)));
        }
    }
    let index = matching::run_matching(comm, &data.ids)?;
    let aligned = align(data, &index)?;
    match cfg.protocol {
        ProtocolKind::Linreg => run_linreg(comm, &aligned, cfg),
        ProtocolKind::Logreg => run_logreg(comm, &aligned, cfg),
        ProtocolKind::HeLogreg => run_he_logreg(comm, &aligned, cfg),
        ProtocolKind::SplitMlp => run_split_mlp(comm, &aligned, cfg),
    }
}

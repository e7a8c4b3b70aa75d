//! MPI-like messaging between parties.
//!
//! A [`Communicator`] gives one party `send`/`recv`/`broadcast`/`gather`
//! over a pluggable [`Transport`]. Two transports exist: [`LocalHub`] moves
//! messages between threads of one process, [`wire`] moves encoded frames
//! over TCP. Protocol code is written once against `Communicator` and runs
//! unchanged on either.

mod frame;
mod inbox;
mod local;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{now_micros, Direction, EventRecord, MetricsError, MetricsSink};
use crate::tensor::Tensor;

pub use frame::{decode_frame, encode_frame, FrameError, MAGIC, MAX_HEADER_BYTES, MAX_PAYLOAD_BYTES};
pub use inbox::Inbox;
pub use local::LocalHub;

pub const MAX_METHOD_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Master,
    Member,
    Arbiter,
}

/// Identity of one party. Orders as master < members (by index) < arbiter,
/// which is the order `broadcast` and `gather` walk receivers in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartyId {
    pub role: Role,
    pub index: u32,
}

impl PartyId {
    pub const fn master() -> Self {
        PartyId {
            role: Role::Master,
            index: 0,
        }
    }

    pub const fn member(index: u32) -> Self {
        PartyId {
            role: Role::Member,
            index,
        }
    }

    pub const fn arbiter() -> Self {
        PartyId {
            role: Role::Arbiter,
            index: 0,
        }
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::Master => write!(f, "master"),
            Role::Member => write!(f, "member{}", self.index),
            Role::Arbiter => write!(f, "arbiter"),
        }
    }
}

impl FromStr for PartyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "master" => Ok(PartyId::master()),
            "arbiter" => Ok(PartyId::arbiter()),
            _ => s
                .strip_prefix("member")
                .filter(|digits| !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
                .and_then(|digits| digits.parse().ok())
                .map(PartyId::member)
                .ok_or_else(|| format!("invalid party name '{s}'")),
        }
    }
}

/// An addressed envelope of named tensors and byte blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub method: String,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub seq: u64,
    pub tensors: BTreeMap<String, Tensor>,
    pub blobs: BTreeMap<String, Vec<u8>>,
    pub meta: BTreeMap<String, String>,
}

impl Message {
    /// A message for `receiver`. Sender and sequence number are filled in
    /// by [`Communicator::send`].
    pub fn to(receiver: PartyId, method: impl Into<String>) -> Self {
        Message {
            method: method.into(),
            sender: receiver,
            receiver,
            seq: 0,
            tensors: BTreeMap::new(),
            blobs: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_tensor(mut self, name: impl Into<String>, t: Tensor) -> Self {
        self.tensors.insert(name.into(), t);
        self
    }

    pub fn with_blob(mut self, name: impl Into<String>, bytes: Vec<u8>) -> Self {
        self.blobs.insert(name.into(), bytes);
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CommError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CommError::InvalidMessage(format!("'{}' has no tensor '{name}'", self.method)))
    }

    pub fn blob(&self, name: &str) -> Result<&[u8], CommError> {
        self.blobs
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| CommError::InvalidMessage(format!("'{}' has no blob '{name}'", self.method)))
    }

    pub fn validate(&self) -> Result<(), CommError> {
        if self.method.is_empty() || self.method.len() > MAX_METHOD_BYTES || !self.method.is_ascii() {
            return Err(CommError::InvalidMessage(format!(
                "method tag must be 1..={MAX_METHOD_BYTES} ASCII bytes, got {:?}",
                self.method
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CommError {
    #[error("unknown receiver {0}")]
    Addressing(PartyId),
    #[error("transport error with {peer} at {addr}: {reason}")]
    Transport {
        peer: PartyId,
        addr: String,
        reason: String,
    },
    #[error("timed out waiting for '{method}' from {from}")]
    Timeout { from: PartyId, method: String },
    #[error("gather of '{method}' failed: nothing from {missing}")]
    Gather { missing: PartyId, method: String },
    #[error("protocol error: {0}")]
    Frame(#[from] FrameError),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("communicator config: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Log(#[from] MetricsError),
}

/// Moves an already-addressed message to its receiver.
pub trait Transport: Send + Sync {
    /// `frame` is `encode_frame(msg)`; backends may ship either.
    fn deliver(&self, msg: &Message, frame: &[u8]) -> Result<(), CommError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Matching,
    Setup,
    Train,
    Eval,
}

/// One message as seen by one party, without timing information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub phase: Phase,
    pub step: u64,
    pub direction: Direction,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub method: String,
    pub seq: u64,
    pub payload_bytes: u64,
}

pub type Transcript = Vec<TranscriptEntry>;

pub struct Communicator {
    me: PartyId,
    parties: BTreeSet<PartyId>,
    transport: Box<dyn Transport>,
    inbox: Arc<Inbox>,
    seqs: Mutex<HashMap<(PartyId, String), u64>>,
    sink: Arc<MetricsSink>,
    transcript: Mutex<Transcript>,
    position: Mutex<(Phase, u64)>,
    recv_timeout: Duration,
}

impl Communicator {
    pub fn new(
        me: PartyId,
        parties: impl IntoIterator<Item = PartyId>,
        transport: Box<dyn Transport>,
        inbox: Arc<Inbox>,
        sink: Arc<MetricsSink>,
        recv_timeout: Duration,
    ) -> Self {
        Communicator {
            me,
            parties: parties.into_iter().collect(),
            transport,
            inbox,
            seqs: Mutex::default(),
            sink,
            transcript: Mutex::default(),
            position: Mutex::new((Phase::Setup, 0)),
            recv_timeout,
        }
    }

    pub fn me(&self) -> PartyId {
        self.me
    }

    /// Every party of the run, ascending.
    pub fn parties(&self) -> impl Iterator<Item = PartyId> + '_ {
        self.parties.iter().copied()
    }

    pub fn members(&self) -> Vec<PartyId> {
        self.parties.iter().copied().filter(|p| p.role == Role::Member).collect()
    }

    pub fn has_arbiter(&self) -> bool {
        self.parties.contains(&PartyId::arbiter())
    }

    pub fn recv_timeout(&self) -> Duration {
        self.recv_timeout
    }

    pub fn sink(&self) -> &Arc<MetricsSink> {
        &self.sink
    }

    /// Tags subsequent transcript entries.
    pub fn set_position(&self, phase: Phase, step: u64) {
        *self.position.lock().unwrap() = (phase, step);
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().unwrap().clone()
    }

    pub fn send(&self, mut msg: Message) -> Result<(), CommError> {
        let started = Instant::now();
        if msg.receiver == self.me || !self.parties.contains(&msg.receiver) {
            return Err(CommError::Addressing(msg.receiver));
        }
        msg.sender = self.me;
        msg.validate()?;
        // Held across delivery so seq order equals wire order per stream.
        let mut seqs = self.seqs.lock().unwrap();
        let counter = seqs.entry((msg.receiver, msg.method.clone())).or_insert(0);
        msg.seq = *counter;
        let frame = encode_frame(&msg)?;
        self.transport.deliver(&msg, &frame)?;
        *counter += 1;
        drop(seqs);
        self.record(Direction::Send, &msg, frame.len(), started)
    }

    pub fn recv(&self, from: PartyId, method: &str) -> Result<Message, CommError> {
        self.recv_until(from, method, Instant::now() + self.recv_timeout)
    }

    pub fn recv_timeout_ms(&self, from: PartyId, method: &str, timeout_ms: u64) -> Result<Message, CommError> {
        self.recv_until(from, method, Instant::now() + Duration::from_millis(timeout_ms))
    }

    fn recv_until(&self, from: PartyId, method: &str, deadline: Instant) -> Result<Message, CommError> {
        let started = Instant::now();
        let envelope = self.inbox.take(from, method, deadline)?;
        self.record(Direction::Recv, &envelope.msg, envelope.frame_len, started)?;
        Ok(envelope.msg)
    }

    /// Sends a copy of `template` to each receiver in ascending order.
    pub fn broadcast(&self, template: &Message, receivers: &[PartyId]) -> Result<(), CommError> {
        let mut ordered = receivers.to_vec();
        ordered.sort();
        for receiver in ordered {
            let mut msg = template.clone();
            msg.receiver = receiver;
            self.send(msg)?;
        }
        Ok(())
    }

    /// One message per party, in ascending party order.
    pub fn gather(&self, from: &[PartyId], method: &str) -> Result<Vec<Message>, CommError> {
        self.gather_until(from, method, Instant::now() + self.recv_timeout)
    }

    pub fn gather_timeout_ms(&self, from: &[PartyId], method: &str, timeout_ms: u64) -> Result<Vec<Message>, CommError> {
        self.gather_until(from, method, Instant::now() + Duration::from_millis(timeout_ms))
    }

    fn gather_until(&self, from: &[PartyId], method: &str, deadline: Instant) -> Result<Vec<Message>, CommError> {
        let mut ordered = from.to_vec();
        ordered.sort();
        ordered
            .into_iter()
            .map(|p| match self.recv_until(p, method, deadline) {
                Err(CommError::Timeout { from, method }) => Err(CommError::Gather { missing: from, method }),
                other => other,
            })
            .collect()
    }

    fn record(&self, direction: Direction, msg: &Message, frame_len: usize, started: Instant) -> Result<(), CommError> {
        let (phase, step) = *self.position.lock().unwrap();
        let peer = match direction {
            Direction::Send => msg.receiver,
            Direction::Recv => msg.sender,
        };
        self.transcript.lock().unwrap().push(TranscriptEntry {
            phase,
            step,
            direction,
            sender: msg.sender,
            receiver: msg.receiver,
            method: msg.method.clone(),
            seq: msg.seq,
            payload_bytes: frame_len as u64,
        });
        self.sink.log_event(EventRecord {
            ts_unix_micros: now_micros(),
            party: self.me,
            direction,
            peer,
            method: msg.method.clone(),
            payload_bytes: frame_len as u64,
            duration_micros: started.elapsed().as_micros() as u64,
        })?;
        Ok(())
    }
}

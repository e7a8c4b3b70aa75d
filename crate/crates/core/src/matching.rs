//! Record matching: intersect the parties' ID lists and fix one shared row
//! order (lexicographic) that every later batch indexes into.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::comms::{CommError, Communicator, Message, PartyId, Phase, Role};
use crate::metrics::{now_micros, MetricName, MetricRecord, MetricsError};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("intersection needs at least two id lists, got {0}")]
    TooFewLists(usize),
    #[error("{party} has duplicate id '{id}'")]
    Duplicate { party: PartyId, id: String },
    #[error("{party} has invalid id {id:?} (ids must be non-empty and contain no newline)")]
    InvalidId { party: PartyId, id: String },
    #[error("shared id '{0}' is missing from the local data")]
    Missing(String),
    #[error("no record ids are shared by all parties")]
    EmptyIntersection,
    #[error("ids blob is not valid UTF-8")]
    Encoding,
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Log(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RecordIdList {
    pub ids: Vec<String>,
}

impl RecordIdList {
    pub fn new(ids: Vec<String>) -> Self {
        RecordIdList { ids }
    }

    pub fn validate(&self, party: PartyId) -> Result<(), MatchError> {
        let mut seen = HashSet::with_capacity(self.ids.len());
        for id in &self.ids {
            if id.is_empty() || id.contains('\n') {
                return Err(MatchError::InvalidId {
                    party,
                    id: id.clone(),
                });
            }
            if !seen.insert(id.as_str()) {
                return Err(MatchError::Duplicate {
                    party,
                    id: id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn to_blob(&self) -> Vec<u8> {
        encode_ids(&self.ids)
    }
}

fn encode_ids(ids: &[String]) -> Vec<u8> {
    ids.join("\n").into_bytes()
}

fn decode_ids(blob: &[u8]) -> Result<Vec<String>, MatchError> {
    if blob.is_empty() {
        return Ok(Vec::new());
    }
    let text = std::str::from_utf8(blob).map_err(|_| MatchError::Encoding)?;
    Ok(text.split('\n').map(str::to_owned).collect())
}

/// Maps the shared order onto one party's local rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowIndex {
    pub shared_order: Vec<String>,
    pub local_pos: HashMap<String, usize>,
}

impl RowIndex {
    /// Local row numbers in shared order, ready for `select_rows`.
    pub fn local_rows(&self) -> Vec<usize> {
        self.shared_order.iter().map(|id| self.local_pos[id]).collect()
    }

    pub fn len(&self) -> usize {
        self.shared_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared_order.is_empty()
    }
}

/// IDs present in every list, sorted by byte order.
pub fn intersect(lists: &[(PartyId, &RecordIdList)]) -> Result<Vec<String>, MatchError> {
    if lists.len() < 2 {
        return Err(MatchError::TooFewLists(lists.len()));
    }
    for (party, list) in lists {
        list.validate(*party)?;
    }
    let (_, first) = lists[0];
    let rest: Vec<HashSet<&str>> = lists[1..]
        .iter()
        .map(|(_, l)| l.ids.iter().map(String::as_str).collect())
        .collect();
    let mut shared: Vec<String> = first
        .ids
        .iter()
        .filter(|id| rest.iter().all(|s| s.contains(id.as_str())))
        .cloned()
        .collect();
    shared.sort();
    Ok(shared)
}

pub fn build_row_index(shared: &[String], local: &RecordIdList) -> Result<RowIndex, MatchError> {
    let positions: HashMap<&str, usize> = local
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut local_pos = HashMap::with_capacity(shared.len());
    for id in shared {
        let pos = positions
            .get(id.as_str())
            .ok_or_else(|| MatchError::Missing(id.clone()))?;
        local_pos.insert(id.clone(), *pos);
    }
    Ok(RowIndex {
        shared_order: shared.to_vec(),
        local_pos,
    })
}

/// Runs the matching exchange for a party that holds data.
///
/// Members send `ids` to the master; the master intersects and broadcasts
/// `shared_ids` to everyone else (the arbiter included). An empty
/// intersection is broadcast too, so every party fails together.
pub fn run_matching(comm: &Communicator, local: &RecordIdList) -> Result<RowIndex, MatchError> {
    comm.set_position(Phase::Matching, 0);
    let me = comm.me();
    local.validate(me)?;
    match me.role {
        Role::Master => {
            let members = comm.members();
            let replies = comm.gather(&members, "ids")?;
            let mut lists = vec![(me, local.clone())];
            for msg in replies {
                lists.push((msg.sender, RecordIdList::new(decode_ids(msg.blob("ids")?)?)));
            }
            let refs: Vec<(PartyId, &RecordIdList)> = lists.iter().map(|(p, l)| (*p, l)).collect();
            let shared = intersect(&refs)?;
            let others: Vec<PartyId> = comm.parties().filter(|p| *p != me).collect();
            comm.broadcast(
                &Message::to(me, "shared_ids").with_blob("ids", encode_ids(&shared)),
                &others,
            )?;
            comm.sink().log_metric(MetricRecord {
                ts_unix_micros: now_micros(),
                party: me,
                epoch: 0,
                name: MetricName::MatchedRows,
                value: shared.len() as f64,
            })?;
            if shared.is_empty() {
                return Err(MatchError::EmptyIntersection);
            }
            build_row_index(&shared, local)
        }
        _ => {
            comm.send(Message::to(PartyId::master(), "ids").with_blob("ids", local.to_blob()))?;
            let shared = await_shared_order(comm)?;
            build_row_index(&shared, local)
        }
    }
}

/// The arbiter's side of matching: it holds no data and only learns the
/// shared order.
pub fn await_shared_order(comm: &Communicator) -> Result<Vec<String>, MatchError> {
    comm.set_position(Phase::Matching, 0);
    let msg = comm.recv(PartyId::master(), "shared_ids")?;
    let shared = decode_ids(msg.blob("ids")?)?;
    if shared.is_empty() {
        return Err(MatchError::EmptyIntersection);
    }
    Ok(shared)
}

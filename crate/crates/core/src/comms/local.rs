use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use super::{CommError, Communicator, Inbox, Message, PartyId, Transport};
use crate::metrics::MetricsSink;

/// In-process switchboard: one inbox per party, shared by every party's
/// communicator. Messages move by value; the frame is encoded only so the
/// logged size matches the wire backend.
pub struct LocalHub {
    inboxes: BTreeMap<PartyId, Arc<Inbox>>,
}

struct LocalTransport {
    hub: Arc<LocalHub>,
}

impl LocalHub {
    pub fn new(parties: impl IntoIterator<Item = PartyId>) -> Arc<Self> {
        Arc::new(LocalHub {
            inboxes: parties.into_iter().map(|p| (p, Arc::new(Inbox::new()))).collect(),
        })
    }

    pub fn communicator(
        self: &Arc<Self>,
        me: PartyId,
        sink: Arc<MetricsSink>,
        recv_timeout: Duration,
    ) -> Result<Communicator, CommError> {
        let inbox = self
            .inboxes
            .get(&me)
            .cloned()
            .ok_or(CommError::Addressing(me))?;
        Ok(Communicator::new(
            me,
            self.inboxes.keys().copied(),
            Box::new(LocalTransport { hub: Arc::clone(self) }),
            inbox,
            sink,
            recv_timeout,
        ))
    }

    /// Wakes every blocked receiver with an abort error.
    pub fn abort(&self, reason: &str) {
        for inbox in self.inboxes.values() {
            inbox.abort(reason);
        }
    }
}

impl Transport for LocalTransport {
    fn deliver(&self, msg: &Message, frame: &[u8]) -> Result<(), CommError> {
        let inbox = self
            .hub
            .inboxes
            .get(&msg.receiver)
            .ok_or(CommError::Addressing(msg.receiver))?;
        inbox.push(msg.clone(), frame.len());
        Ok(())
    }
}

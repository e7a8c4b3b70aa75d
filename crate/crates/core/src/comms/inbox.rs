use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use super::{CommError, FrameError, Message, PartyId};

pub(crate) struct Envelope {
    pub msg: Message,
    pub frame_len: usize,
}

enum Failure {
    Frame(FrameError),
    Aborted(String),
}

#[derive(Default)]
struct State {
    pending: VecDeque<Envelope>,
    failure: Option<Failure>,
}

/// Unbounded buffer of delivered messages with selective receive by
/// `(sender, method)`.
#[derive(Default)]
pub struct Inbox {
    state: Mutex<State>,
    ready: Condvar,
}

impl Inbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&self, msg: Message, frame_len: usize) {
        self.state
            .lock()
            .unwrap()
            .pending
            .push_back(Envelope { msg, frame_len });
        self.ready.notify_all();
    }

    /// A malformed frame poisons the inbox: later receives report it.
    pub(crate) fn fail(&self, err: FrameError) {
        let mut st = self.state.lock().unwrap();
        st.failure.get_or_insert(Failure::Frame(err));
        self.ready.notify_all();
    }

    pub fn abort(&self, reason: &str) {
        let mut st = self.state.lock().unwrap();
        st.failure.get_or_insert(Failure::Aborted(reason.to_string()));
        self.ready.notify_all();
    }

    pub(crate) fn take(&self, from: PartyId, method: &str, deadline: Instant) -> Result<Envelope, CommError> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(pos) = st
                .pending
                .iter()
                .position(|e| e.msg.sender == from && e.msg.method == method)
            {
                return Ok(st.pending.remove(pos).expect("position is valid"));
            }
            match &st.failure {
                Some(Failure::Frame(e)) => return Err(CommError::Frame(e.clone())),
                Some(Failure::Aborted(r)) => return Err(CommError::Aborted(r.clone())),
                None => {}
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(CommError::Timeout {
                    from,
                    method: method.to_string(),
                });
            }
            st = self.ready.wait_timeout(st, deadline - now).unwrap().0;
        }
    }
}

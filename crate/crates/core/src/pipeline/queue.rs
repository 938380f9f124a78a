use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::GenerationRequest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueued {
    Accepted,
    /// An unstarted request was replaced; carries its round id.
    Coalesced { replaced: u64 },
}

#[derive(Debug)]
pub struct QueuedRequest {
    pub request: GenerationRequest,
    pub queue_wait: Duration,
}

#[derive(Debug, Default)]
struct State {
    pending: Option<(GenerationRequest, Instant)>,
    in_flight: bool,
    closed: bool,
    last_round_id: Option<u64>,
}

/// Single-slot, latest-wins input queue for one session.
///
/// At most one request waits; a newer request replaces it. The consumer
/// takes a request with [`next`](Self::next) and must call
/// [`finish`](Self::finish) before the next one is handed out, so at most
/// one round is in flight.
#[derive(Debug, Default)]
pub struct RoundQueue {
    state: Mutex<State>,
    changed: Condvar,
}

impl RoundQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Round ids must increase across calls.
    pub fn enqueue(&self, request: GenerationRequest) -> Result<Enqueued> {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return Err(Error::contract("queue is closed"));
        }
        if st.last_round_id.is_some_and(|last| request.round_id <= last) {
            return Err(Error::contract(format!(
                "round id {} does not follow {}",
                request.round_id,
                st.last_round_id.unwrap()
            )));
        }
        st.last_round_id = Some(request.round_id);
        let replaced = st.pending.replace((request, Instant::now()));
        self.changed.notify_all();
        Ok(match replaced {
            Some((old, _)) => Enqueued::Coalesced { replaced: old.round_id },
            None => Enqueued::Accepted,
        })
    }

    /// Blocks until a request can start or the queue is closed and drained.
    pub fn next(&self) -> Option<QueuedRequest> {
        let mut st = self.state.lock().unwrap();
        loop {
            if !st.in_flight {
                if let Some((request, at)) = st.pending.take() {
                    st.in_flight = true;
                    return Some(QueuedRequest {
                        request,
                        queue_wait: at.elapsed(),
                    });
                }
                if st.closed {
                    return None;
                }
            }
            st = self.changed.wait(st).unwrap();
        }
    }

    /// Non-blocking [`next`](Self::next).
    pub fn try_next(&self) -> Option<QueuedRequest> {
        let mut st = self.state.lock().unwrap();
        if st.in_flight {
            return None;
        }
        let (request, at) = st.pending.take()?;
        st.in_flight = true;
        Some(QueuedRequest {
            request,
            queue_wait: at.elapsed(),
        })
    }

    pub fn finish(&self) {
        self.state.lock().unwrap().in_flight = false;
        self.changed.notify_all();
    }

    /// Stops accepting requests and drops any pending one. Returns the
    /// dropped request's round id.
    pub fn close(&self) -> Option<u64> {
        let mut st = self.state.lock().unwrap();
        st.closed = true;
        let dropped = st.pending.take().map(|(r, _)| r.round_id);
        self.changed.notify_all();
        dropped
    }

    pub fn pending_round(&self) -> Option<u64> {
        self.state.lock().unwrap().pending.as_ref().map(|(r, _)| r.round_id)
    }

    pub fn is_in_flight(&self) -> bool {
        self.state.lock().unwrap().in_flight
    }
}

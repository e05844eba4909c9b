use std::collections::HashMap;
use std::time::Duration;

use crate::kernel::SimTime;
use crate::packet::FlowKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeState {
    SynSeen,
    SynAckSeen,
    Established,
}

/// Minimal three-way handshake detector. Only the SYN -> SYN-ACK -> ACK
/// progression is recognised; anything else leaves the state untouched.
#[derive(Debug, Default)]
pub struct HandshakeTracker {
    partial: HashMap<FlowKey, (HandshakeState, SimTime)>,
}

impl HandshakeTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self, key: &FlowKey) -> Option<HandshakeState> {
        self.partial.get(key).map(|(s, _)| *s)
    }

    pub fn len(&self) -> usize {
        self.partial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partial.is_empty()
    }

    /// A SYN (re)starts tracking for the flow.
    pub fn on_syn(&mut self, key: FlowKey, now: SimTime) {
        self.partial.insert(key, (HandshakeState::SynSeen, now));
    }

    pub fn on_synack(&mut self, key: &FlowKey, now: SimTime) {
        if let Some(slot) = self.partial.get_mut(key) {
            if slot.0 == HandshakeState::SynSeen {
                *slot = (HandshakeState::SynAckSeen, now);
            }
        }
    }

    /// Returns `Established` when this ACK completes a handshake. Completed
    /// flows are forgotten; the flow table owns them from here on.
    pub fn on_ack(&mut self, key: &FlowKey) -> Option<HandshakeState> {
        match self.partial.get(key) {
            Some((HandshakeState::SynAckSeen, _)) => {
                self.partial.remove(key);
                Some(HandshakeState::Established)
            }
            _ => None,
        }
    }

    /// Drops partial handshakes idle for at least `ttl`.
    pub fn expire(&mut self, now: SimTime, ttl: Duration) -> usize {
        let before = self.partial.len();
        self.partial.retain(|_, (_, at)| now.since(*at) < ttl);
        before - self.partial.len()
    }
}

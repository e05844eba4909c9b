//! Multi-queue NIC: classify, steer, ring buffer, interrupt; plus the
//! transmit path that feeds descriptors to the flow table.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow_table::{
    search_time, FlowTable, FlowTableConfig, FlowTableError, HeldPacket, SteerDecision, UpdateOutcome,
};
use crate::kernel::SimTime;
use crate::packet::{FlowKey, Packet};
use crate::rss::{RssEngine, RssError};

pub use crate::packet::TransmitDescriptor;

#[derive(Debug, Error, PartialEq)]
pub enum NicError {
    #[error("invalid NIC configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Rss(#[from] RssError),
    #[error(transparent)]
    Table(#[from] FlowTableError),
    #[error("descriptor names core {core_id} but only {num_queues} queues exist")]
    InvalidCore { core_id: u8, num_queues: usize },
    #[error("descriptor key does not match the packet header")]
    DescriptorMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NicMode {
    Rss,
    Atfn,
}

impl std::str::FromStr for NicMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rss" => Ok(NicMode::Rss),
            "atfn" => Ok(NicMode::Atfn),
            other => Err(format!("unknown NIC mode '{other}' (expected rss or atfn)")),
        }
    }
}

impl std::fmt::Display for NicMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NicMode::Rss => "rss",
            NicMode::Atfn => "atfn",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NicConfig {
    /// One queue per core; queue `i` interrupts core `i`.
    pub num_queues: usize,
    pub ring_capacity: usize,
    pub mode: NicMode,
    /// Charge flow-table search time to a serial classification pipeline.
    pub latency_accounting: bool,
    pub link_latency: Duration,
}

impl Default for NicConfig {
    fn default() -> Self {
        NicConfig {
            num_queues: 2,
            ring_capacity: 256,
            mode: NicMode::Atfn,
            latency_accounting: false,
            link_latency: Duration::from_micros(10),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    /// Push attempts from direct steering.
    pub offered: u64,
    /// Push attempts from transition flushes.
    pub flushed: u64,
    pub queued: u64,
    pub dropped: u64,
    pub interrupts: u64,
    pub max_depth: usize,
}

/// Fixed-capacity FIFO with tail drop.
#[derive(Debug, Clone)]
pub struct RingBuffer {
    queue_id: u16,
    capacity: usize,
    occupants: VecDeque<Packet>,
    stats: QueueStats,
}

impl RingBuffer {
    pub fn new(queue_id: u16, capacity: usize) -> Self {
        RingBuffer {
            queue_id,
            capacity,
            occupants: VecDeque::with_capacity(capacity),
            stats: QueueStats::default(),
        }
    }

    pub fn queue_id(&self) -> u16 {
        self.queue_id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.occupants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupants.is_empty()
    }

    pub fn stats(&self) -> &QueueStats {
        &self.stats
    }

    /// Returns the depth after the push, or the packet back if the ring is full.
    pub fn push(&mut self, packet: Packet) -> Result<usize, Packet> {
        if self.occupants.len() >= self.capacity {
            self.stats.dropped += 1;
            return Err(packet);
        }
        self.occupants.push_back(packet);
        self.stats.queued += 1;
        self.stats.max_depth = self.stats.max_depth.max(self.occupants.len());
        Ok(self.occupants.len())
    }

    pub fn pop(&mut self) -> Option<Packet> {
        self.occupants.pop_front()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RxPlacement {
    /// In the ring. `raise_interrupt` is set on an empty -> non-empty edge.
    Queued {
        queue: u16,
        depth: usize,
        raise_interrupt: bool,
    },
    /// Classified; the ring push happens at `ready_at` once the lookup
    /// pipeline has finished (latency accounting only).
    Pipelined { queue: u16, ready_at: SimTime },
    HeldByTable,
    Dropped { queue: u16 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushPlacement {
    pub core_id: u8,
    pub placed: Vec<(HeldPacket, RxPlacement)>,
}

#[derive(Debug)]
pub struct Nic {
    config: NicConfig,
    rss: RssEngine,
    rings: Vec<RingBuffer>,
    table: Option<FlowTable>,
    pipeline_free_at: SimTime,
}

impl Nic {
    pub fn new(config: NicConfig, rss: RssEngine, table: Option<FlowTableConfig>) -> Result<Self, NicError> {
        if config.num_queues == 0 || config.num_queues > 256 {
            return Err(NicError::Config(format!(
                "num_queues must be in 1..=256, got {}",
                config.num_queues
            )));
        }
        if config.ring_capacity == 0 {
            return Err(NicError::Config("ring_capacity must be at least 1".into()));
        }
        if rss.num_queues() != config.num_queues {
            return Err(NicError::Config(format!(
                "RSS engine covers {} queues but the NIC has {}",
                rss.num_queues(),
                config.num_queues
            )));
        }
        let table = match (config.mode, table) {
            (NicMode::Atfn, Some(cfg)) => Some(FlowTable::new(cfg)?),
            (NicMode::Atfn, None) => {
                return Err(NicError::Config("flow-table mode needs a flow table configuration".into()))
            }
            (NicMode::Rss, _) => None,
        };
        let rings = (0..config.num_queues)
            .map(|q| RingBuffer::new(q as u16, config.ring_capacity))
            .collect();
        Ok(Nic {
            config,
            rss,
            rings,
            table,
            pipeline_free_at: SimTime::ZERO,
        })
    }

    pub fn config(&self) -> &NicConfig {
        &self.config
    }

    pub fn mode(&self) -> NicMode {
        self.config.mode
    }

    pub fn rss(&self) -> &RssEngine {
        &self.rss
    }

    pub fn table(&self) -> Option<&FlowTable> {
        self.table.as_ref()
    }

    pub fn table_mut(&mut self) -> Option<&mut FlowTable> {
        self.table.as_mut()
    }

    pub fn ring(&self, queue: u16) -> &RingBuffer {
        &self.rings[usize::from(queue)]
    }

    pub fn rings(&self) -> &[RingBuffer] {
        &self.rings
    }

    fn rss_queue(&self, key: &FlowKey) -> u16 {
        self.rss.classify(key)
    }

    /// Receive pipeline for one arriving packet.
    pub fn rx(&mut self, packet: Packet, now: SimTime) -> RxPlacement {
        let fallback = self.rss_queue(&packet.flow_key());
        let Some(table) = self.table.as_mut() else {
            self.rings[usize::from(fallback)].stats.offered += 1;
            return self.enqueue(fallback, packet);
        };
        table.track_connection(&packet, now, fallback as u8);
        let (target, searched) = match table.steer(&packet, now) {
            SteerDecision::Direct { core_id, position } => (Some(u16::from(core_id)), position),
            SteerDecision::Held { position } => (None, position),
            SteerDecision::Fallback { searched } => (Some(fallback), searched.max(1)),
        };
        let ready_at = if self.config.latency_accounting {
            let start = self.pipeline_free_at.max(now);
            self.pipeline_free_at = start + search_time(searched);
            self.pipeline_free_at
        } else {
            now
        };
        match target {
            None => RxPlacement::HeldByTable,
            Some(queue) => {
                self.rings[usize::from(queue)].stats.offered += 1;
                if ready_at > now {
                    RxPlacement::Pipelined { queue, ready_at }
                } else {
                    self.enqueue(queue, packet)
                }
            }
        }
    }

    /// Pushes into a ring. Callers have already counted the attempt.
    pub fn enqueue(&mut self, queue: u16, packet: Packet) -> RxPlacement {
        let ring = &mut self.rings[usize::from(queue)];
        match ring.push(packet) {
            Ok(depth) => {
                let raise_interrupt = depth == 1;
                if raise_interrupt {
                    ring.stats.interrupts += 1;
                }
                RxPlacement::Queued {
                    queue,
                    depth,
                    raise_interrupt,
                }
            }
            Err(_) => RxPlacement::Dropped { queue },
        }
    }

    /// Transmit path. Returns the flow-table update in flow-table mode and
    /// `None` in plain RSS mode.
    pub fn tx(
        &mut self,
        packet: &Packet,
        desc: &TransmitDescriptor,
        now: SimTime,
    ) -> Result<Option<UpdateOutcome>, NicError> {
        if usize::from(desc.core_id) >= self.config.num_queues {
            return Err(NicError::InvalidCore {
                core_id: desc.core_id,
                num_queues: self.config.num_queues,
            });
        }
        if desc.key != packet.key {
            return Err(NicError::DescriptorMismatch);
        }
        let fallback = self.rss_queue(&packet.flow_key()) as u8;
        let Some(table) = self.table.as_mut() else {
            return Ok(None);
        };
        table.track_connection(packet, now, fallback);
        Ok(Some(table.observe_tx(desc, now)))
    }

    /// Pops the head of a ring; `None` once it is empty.
    pub fn drain(&mut self, queue: u16) -> Option<Packet> {
        self.rings[usize::from(queue)].pop()
    }

    /// Ends a flow's transition and queues its held packets on the new core.
    pub fn expire_transition(&mut self, key: &FlowKey, now: SimTime) -> Result<FlushPlacement, NicError> {
        let table = self
            .table
            .as_mut()
            .ok_or_else(|| NicError::Config("no flow table in RSS mode".into()))?;
        let flush = table.on_timer_expire(key, now)?;
        let queue = u16::from(flush.core_id);
        let mut placed = Vec::with_capacity(flush.packets.len());
        for held in flush.packets {
            self.rings[usize::from(queue)].stats.flushed += 1;
            let placement = self.enqueue(queue, held.packet);
            placed.push((held, placement));
        }
        Ok(FlushPlacement {
            core_id: flush.core_id,
            placed,
        })
    }

    pub fn age(&mut self, now: SimTime) -> Vec<FlowKey> {
        self.table.as_mut().map(|t| t.age(now)).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{Direction, PacketKind};
    use crate::rss::{HashType, IndirectionTable, QueueMapping, RssKey};
    use std::net::Ipv4Addr;

    fn rss(queues: usize) -> RssEngine {
        let qs: Vec<u16> = (0..queues as u16).collect();
        let table = IndirectionTable::round_robin(&qs, 128, queues).unwrap();
        RssEngine::new(RssKey::default(), HashType::FOUR_TUPLE, QueueMapping::Indirection(table), queues).unwrap()
    }

    fn nic(mode: NicMode, ring_capacity: usize) -> Nic {
        let cfg = NicConfig {
            num_queues: 2,
            ring_capacity,
            mode,
            ..Default::default()
        };
        Nic::new(cfg, rss(2), Some(FlowTableConfig::default())).unwrap()
    }

    fn key(port: u16) -> FlowKey {
        FlowKey::tcp(Ipv4Addr::new(10, 0, 0, 1).into(), port, Ipv4Addr::new(10, 0, 0, 2).into(), 5001)
    }

    fn data(port: u16, seq: u64) -> Packet {
        Packet {
            id: seq,
            key: key(port),
            direction: Direction::Rx,
            kind: PacketKind::Data,
            seq,
            arrival: SimTime::ZERO,
            size_bytes: 1500,
        }
    }

    fn ack_out(port: u16, core_id: u8) -> (Packet, TransmitDescriptor) {
        let p = Packet {
            id: 0,
            key: key(port).reversed(),
            direction: Direction::Tx,
            kind: PacketKind::Ack,
            seq: 0,
            arrival: SimTime::ZERO,
            size_bytes: 64,
        };
        (p, TransmitDescriptor { key: p.key, core_id })
    }

    fn now(ns: u64) -> SimTime {
        SimTime::from_nanos(ns)
    }

    #[test]
    fn direct_steering_to_entry_core() {
        let mut n = nic(NicMode::Atfn, 8);
        n.table_mut().unwrap().insert(key(1), 1, now(0)).unwrap();
        assert_eq!(
            n.rx(data(1, 0), now(1)),
            RxPlacement::Queued {
                queue: 1,
                depth: 1,
                raise_interrupt: true
            }
        );
        assert!(matches!(
            n.rx(data(1, 1), now(2)),
            RxPlacement::Queued {
                queue: 1,
                depth: 2,
                raise_interrupt: false
            }
        ));
        assert_eq!(n.ring(1).stats().interrupts, 1);
    }

    #[test]
    fn transition_holds_packets() {
        let mut n = nic(NicMode::Atfn, 8);
        n.table_mut().unwrap().insert(key(1), 0, now(0)).unwrap();
        let (p, d) = ack_out(1, 1);
        assert!(matches!(
            n.tx(&p, &d, now(10)).unwrap(),
            Some(UpdateOutcome::TransitionStarted { .. })
        ));
        assert_eq!(n.rx(data(1, 0), now(11)), RxPlacement::HeldByTable);
        assert!(n.ring(0).is_empty() && n.ring(1).is_empty());
    }

    #[test]
    fn full_ring_drops() {
        let mut n = nic(NicMode::Rss, 2);
        let q = n.rss().classify(&key(1));
        n.rx(data(1, 0), now(0));
        n.rx(data(1, 1), now(0));
        assert_eq!(n.rx(data(1, 2), now(0)), RxPlacement::Dropped { queue: q });
        let s = n.ring(q).stats();
        assert_eq!(s.dropped, 1);
        assert_eq!(s.dropped, s.offered + s.flushed - s.queued);
    }

    #[test]
    fn rss_mode_tx_has_no_table_effect() {
        let mut n = nic(NicMode::Rss, 8);
        assert!(n.table().is_none());
        let (p, d) = ack_out(1, 1);
        assert_eq!(n.tx(&p, &d, now(0)).unwrap(), None);
    }

    #[test]
    fn tx_for_unknown_flow_is_no_entry() {
        let mut n = nic(NicMode::Atfn, 8);
        let (p, d) = ack_out(77, 1);
        assert_eq!(n.tx(&p, &d, now(0)).unwrap(), Some(UpdateOutcome::NoEntry));
    }

    #[test]
    fn tx_validates_descriptor() {
        let mut n = nic(NicMode::Atfn, 8);
        let (p, mut d) = ack_out(1, 5);
        assert!(matches!(n.tx(&p, &d, now(0)), Err(NicError::InvalidCore { .. })));
        d.core_id = 0;
        d.key = key(2);
        assert_eq!(n.tx(&p, &d, now(0)), Err(NicError::DescriptorMismatch));
    }

    #[test]
    fn drain_is_fifo_and_empty_returns_none() {
        let mut n = nic(NicMode::Rss, 8);
        let q = n.rss().classify(&key(1));
        for s in 0..3 {
            n.rx(data(1, s), now(s));
        }
        let order: Vec<u64> = std::iter::from_fn(|| n.drain(q)).map(|p| p.seq).collect();
        assert_eq!(order, vec![0, 1, 2]);
        assert_eq!(n.drain(q), None);
    }

    // Hand trace: entry on core 0, migrate to core 1, two packets held, flush
    // at the deadline, then a direct arrival. Queue 1 must read 5, 6, 7.
    #[test]
    fn flushed_packets_precede_later_direct_arrivals() {
        let mut n = nic(NicMode::Atfn, 8);
        n.table_mut().unwrap().insert(key(1), 0, now(0)).unwrap();
        let (p, d) = ack_out(1, 1);
        let Some(UpdateOutcome::TransitionStarted { deadline }) = n.tx(&p, &d, now(100)).unwrap() else {
            panic!("expected a transition");
        };
        n.rx(data(1, 5), now(200));
        n.rx(data(1, 6), now(300));
        let flush = n.expire_transition(&key(1), deadline).unwrap();
        assert_eq!(flush.core_id, 1);
        assert!(matches!(
            flush.placed[0].1,
            RxPlacement::Queued {
                raise_interrupt: true,
                ..
            }
        ));
        n.rx(data(1, 7), deadline + Duration::from_nanos(1));
        let order: Vec<u64> = std::iter::from_fn(|| n.drain(1)).map(|p| p.seq).collect();
        assert_eq!(order, vec![5, 6, 7]);
        assert_eq!(n.ring(1).stats().flushed, 2);
    }

    #[test]
    fn latency_accounting_serialises_lookups() {
        let cfg = NicConfig {
            num_queues: 2,
            latency_accounting: true,
            ..Default::default()
        };
        let mut n = Nic::new(cfg, rss(2), Some(FlowTableConfig::default())).unwrap();
        n.table_mut().unwrap().insert(key(1), 1, now(0)).unwrap();
        assert_eq!(
            n.rx(data(1, 0), now(1000)),
            RxPlacement::Pipelined {
                queue: 1,
                ready_at: now(1260)
            }
        );
        assert_eq!(
            n.rx(data(1, 1), now(1000)),
            RxPlacement::Pipelined {
                queue: 1,
                ready_at: now(1520)
            }
        );
    }

    #[test]
    fn atfn_without_table_config_is_rejected() {
        let cfg = NicConfig::default();
        assert!(Nic::new(cfg, rss(2), None).is_err());
        let cfg = NicConfig {
            num_queues: 4,
            ..Default::default()
        };
        assert!(Nic::new(cfg, rss(2), Some(FlowTableConfig::default())).is_err());
    }
}

//! The flow-to-core table: a chained hash table of receive-direction flow
//! keys, each mapped to the core that should receive the flow.
//!
//! Entries are created when a three-way handshake completes and are updated
//! by transmit descriptors. When a descriptor names a different core, the
//! entry enters a transition state for `t_timer`; packets arriving meanwhile
//! are held in the entry and released to the new core when the timer expires,
//! which keeps per-flow delivery in order across the queue switch.

mod tracker;

use std::collections::VecDeque;
use std::net::IpAddr;
use std::time::Duration;

use thiserror::Error;

pub use tracker::{HandshakeState, HandshakeTracker};

use crate::kernel::SimTime;
use crate::packet::{Direction, FlowKey, Packet, PacketKind, TransmitDescriptor};
use crate::rss::HashType;

/// Bytes needed to store one IPv4 entry.
pub const ENTRY_BYTES_V4: u64 = 20;
/// IPv6 entries carry 24 extra address bytes.
pub const ENTRY_BYTES_V6: u64 = ENTRY_BYTES_V4 + 24;
/// Lookup cost of the first list element, hashing and locking included.
pub const FIRST_LOOKUP_NS: u64 = 260;
/// Additional cost per further list element.
pub const NEXT_LOOKUP_NS: u64 = 150;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlowTableError {
    #[error("invalid flow table configuration: {0}")]
    InvalidConfig(String),
    #[error("no entry for flow {0}")]
    UnknownFlow(FlowKey),
    #[error("timer expired for flow {0}, which is not in transition")]
    NotInTransition(FlowKey),
    #[error("timer for flow {key} fired at {now} but the entry deadline is {deadline:?}")]
    DeadlineMismatch {
        key: FlowKey,
        now: SimTime,
        deadline: Option<SimTime>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTableConfig {
    pub num_buckets: usize,
    pub max_list_size: usize,
    pub max_entries: usize,
    pub t_timer: Duration,
    pub t_delete: Duration,
    /// Shorter idle timeout used once occupancy reaches `pressure_threshold`.
    pub t_delete_pressure: Duration,
    /// Fraction of `max_entries`.
    pub pressure_threshold: f64,
    /// Fields folded into the bucket hash.
    pub bucket_fields: HashType,
}

impl Default for FlowTableConfig {
    fn default() -> Self {
        FlowTableConfig {
            num_buckets: 256,
            max_list_size: 6,
            max_entries: 10_000,
            t_timer: Duration::from_micros(100),
            t_delete: Duration::from_secs(10),
            t_delete_pressure: Duration::from_secs(1),
            pressure_threshold: 0.9,
            bucket_fields: HashType::all(),
        }
    }
}

impl FlowTableConfig {
    pub fn validate(&self) -> Result<(), FlowTableError> {
        let bad = |msg: &str| Err(FlowTableError::InvalidConfig(msg.to_string()));
        if self.num_buckets == 0 {
            return bad("num_buckets must be at least 1");
        }
        if self.max_list_size == 0 {
            return bad("max_list_size must be at least 1");
        }
        if self.max_entries == 0 {
            return bad("max_entries must be at least 1");
        }
        if self.t_delete_pressure > self.t_delete {
            return bad("t_delete_pressure must not exceed t_delete");
        }
        if !(self.pressure_threshold > 0.0 && self.pressure_threshold <= 1.0) {
            return bad("pressure_threshold must lie in (0, 1]");
        }
        if self.bucket_fields.is_empty() {
            return bad("bucket_fields must enable at least one field");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeldPacket {
    pub packet: Packet,
    pub held_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEntry {
    pub key: FlowKey,
    pub core_id: u8,
    pub transition: bool,
    pub held: VecDeque<HeldPacket>,
    pub timer_deadline: Option<SimTime>,
    pub last_activity: SimTime,
}

impl FlowEntry {
    fn new(key: FlowKey, core_id: u8, now: SimTime) -> Self {
        FlowEntry {
            key,
            core_id,
            transition: false,
            held: VecDeque::new(),
            timer_deadline: None,
            last_activity: now,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    BucketFull,
    TableFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackOutcome {
    /// Not a handshake step (or not TCP).
    Ignored,
    /// Handshake advanced but is not complete yet.
    Progress,
    Admitted { core_id: u8 },
    Rejected(Rejection),
    AlreadyPresent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    NoEntry,
    SameCore,
    /// Core changed; arrivals are held until `deadline`.
    TransitionStarted { deadline: SimTime },
    /// Core changed while already in transition; the pending timer stands.
    Retargeted,
    /// Core changed with `t_timer == 0`: no hold, the switch is immediate.
    Switched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteerDecision {
    /// Deliver to the queue pinned to `core_id`. `position` is the entry's
    /// 1-based place in its bucket list.
    Direct { core_id: u8, position: usize },
    Held { position: usize },
    /// No entry; the caller classifies with RSS. `searched` is the length of
    /// the list that was scanned.
    Fallback { searched: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flush {
    pub core_id: u8,
    pub packets: Vec<HeldPacket>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowTableStats {
    pub handshakes_completed: u64,
    pub admitted: u64,
    pub rejected_bucket_full: u64,
    pub rejected_table_full: u64,
    pub evictions: u64,
    pub peak_occupancy: usize,
    pub peak_held_bytes: u64,
    pub held_packets: u64,
    pub transitions: u64,
    pub retargets: u64,
    pub switches: u64,
}

impl FlowTableStats {
    pub fn rejected(&self) -> u64 {
        self.rejected_bucket_full + self.rejected_table_full
    }
}

fn fold_addr(addr: &IpAddr) -> u32 {
    match addr {
        IpAddr::V4(a) => u32::from_be_bytes(a.octets()),
        IpAddr::V6(a) => a
            .octets()
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .fold(0, |acc, w| acc ^ w),
    }
}

// murmur3 finalizer
fn fmix32(mut h: u32) -> u32 {
    h ^= h >> 16;
    h = h.wrapping_mul(0x85eb_ca6b);
    h ^= h >> 13;
    h = h.wrapping_mul(0xc2b2_ae35);
    h ^= h >> 16;
    h
}

/// Bucket of `key`: the selected fields XOR-folded into 32 bits (port pair in
/// the two halves, addresses on top) and then avalanched.
pub fn bucket_index(key: &FlowKey, fields: HashType, num_buckets: usize) -> usize {
    assert!(num_buckets >= 1, "at least one bucket is required");
    let mut h = 0u32;
    if fields.contains(HashType::SRC_PORT) {
        h ^= u32::from(key.src_port) << 16;
    }
    if fields.contains(HashType::DST_PORT) {
        h ^= u32::from(key.dst_port);
    }
    if fields.contains(HashType::SRC_ADDR) {
        h ^= fold_addr(&key.src_addr);
    }
    if fields.contains(HashType::DST_ADDR) {
        h ^= fold_addr(&key.dst_addr).rotate_left(16);
    }
    if fields.contains(HashType::PROTOCOL) {
        h ^= u32::from(key.protocol) << 8;
    }
    (u64::from(fmix32(h)) % num_buckets as u64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpVersion {
    V4,
    V6,
}

/// Table memory: entry storage plus whatever is currently held.
pub fn memory_estimate(n_entries: u64, ip_version: IpVersion, held_bytes: u64) -> u64 {
    let per_entry = match ip_version {
        IpVersion::V4 => ENTRY_BYTES_V4,
        IpVersion::V6 => ENTRY_BYTES_V6,
    };
    n_entries * per_entry + held_bytes
}

/// Upper bound on held bytes: everything a link of `link_bps` can deliver
/// during one transition window.
pub fn held_buffer_bound(link_bps: u64, t_timer: Duration) -> u64 {
    (u128::from(link_bps) * t_timer.as_nanos() / 8 / 1_000_000_000) as u64
}

/// Virtual lookup latency of the entry at 1-based `position` in its list.
pub fn search_time(position: usize) -> Duration {
    assert!(position >= 1, "list positions are 1-based");
    Duration::from_nanos(FIRST_LOOKUP_NS + NEXT_LOOKUP_NS * (position as u64 - 1))
}

#[derive(Debug)]
pub struct FlowTable {
    config: FlowTableConfig,
    buckets: Vec<Vec<FlowEntry>>,
    len: usize,
    tracker: HandshakeTracker,
    held_bytes: u64,
    stats: FlowTableStats,
}

impl FlowTable {
    pub fn new(config: FlowTableConfig) -> Result<Self, FlowTableError> {
        config.validate()?;
        let buckets = vec![Vec::new(); config.num_buckets];
        Ok(FlowTable {
            config,
            buckets,
            len: 0,
            tracker: HandshakeTracker::new(),
            held_bytes: 0,
            stats: FlowTableStats::default(),
        })
    }

    pub fn config(&self) -> &FlowTableConfig {
        &self.config
    }

    pub fn stats(&self) -> &FlowTableStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn held_bytes(&self) -> u64 {
        self.held_bytes
    }

    pub fn tracker(&self) -> &HandshakeTracker {
        &self.tracker
    }

    pub fn bucket_of(&self, key: &FlowKey) -> usize {
        bucket_index(key, self.config.bucket_fields, self.config.num_buckets)
    }

    pub fn bucket_len(&self, bucket: usize) -> usize {
        self.buckets[bucket].len()
    }

    pub fn longest_list(&self) -> usize {
        self.buckets.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = &FlowEntry> {
        self.buckets.iter().flatten()
    }

    pub fn get(&self, key: &FlowKey) -> Option<&FlowEntry> {
        self.buckets[self.bucket_of(key)].iter().find(|e| &e.key == key)
    }

    fn locate(&self, key: &FlowKey) -> (usize, Option<usize>) {
        let b = self.bucket_of(key);
        (b, self.buckets[b].iter().position(|e| &e.key == key))
    }

    /// Inserts an established flow. Returns the entry's 1-based position.
    pub fn insert(&mut self, key: FlowKey, core_id: u8, now: SimTime) -> Result<usize, Rejection> {
        let b = self.bucket_of(&key);
        if self.len >= self.config.max_entries {
            self.stats.rejected_table_full += 1;
            return Err(Rejection::TableFull);
        }
        if self.buckets[b].len() >= self.config.max_list_size {
            self.stats.rejected_bucket_full += 1;
            return Err(Rejection::BucketFull);
        }
        self.buckets[b].push(FlowEntry::new(key, core_id, now));
        self.len += 1;
        self.stats.admitted += 1;
        self.stats.peak_occupancy = self.stats.peak_occupancy.max(self.len);
        Ok(self.buckets[b].len())
    }

    /// Feeds one packet (either direction) to the handshake detector and
    /// admits the flow when the handshake completes. `fallback_core` is the
    /// core RSS would pick for the flow; new entries start there.
    pub fn track_connection(&mut self, packet: &Packet, now: SimTime, fallback_core: u8) -> TrackOutcome {
        if !packet.key.is_tcp() {
            return TrackOutcome::Ignored;
        }
        let key = packet.flow_key();
        match (packet.direction, packet.kind) {
            (Direction::Rx, PacketKind::Syn) => {
                self.tracker.on_syn(key, now);
                TrackOutcome::Progress
            }
            (Direction::Tx, PacketKind::SynAck) => {
                self.tracker.on_synack(&key, now);
                TrackOutcome::Progress
            }
            (Direction::Rx, PacketKind::Ack) => match self.tracker.on_ack(&key) {
                Some(HandshakeState::Established) => {
                    self.stats.handshakes_completed += 1;
                    if self.get(&key).is_some() {
                        return TrackOutcome::AlreadyPresent;
                    }
                    match self.insert(key, fallback_core, now) {
                        Ok(_) => TrackOutcome::Admitted {
                            core_id: fallback_core,
                        },
                        Err(r) => TrackOutcome::Rejected(r),
                    }
                }
                _ => TrackOutcome::Ignored,
            },
            _ => TrackOutcome::Ignored,
        }
    }

    /// Applies a transmit descriptor to the entry of its flow.
    pub fn observe_tx(&mut self, desc: &TransmitDescriptor, now: SimTime) -> UpdateOutcome {
        let key = desc.key.reversed();
        let (b, pos) = self.locate(&key);
        let Some(pos) = pos else {
            return UpdateOutcome::NoEntry;
        };
        let t_timer = self.config.t_timer;
        let entry = &mut self.buckets[b][pos];
        entry.last_activity = now;
        if desc.core_id == entry.core_id {
            return UpdateOutcome::SameCore;
        }
        entry.core_id = desc.core_id;
        if entry.transition {
            // Everything since the transition began is held, so the queue
            // being abandoned holds none of this flow; the original deadline
            // still covers the first old queue.
            self.stats.retargets += 1;
            UpdateOutcome::Retargeted
        } else if t_timer.is_zero() {
            self.stats.switches += 1;
            UpdateOutcome::Switched
        } else {
            let deadline = now + t_timer;
            entry.transition = true;
            entry.timer_deadline = Some(deadline);
            self.stats.transitions += 1;
            UpdateOutcome::TransitionStarted { deadline }
        }
    }

    /// Chooses where an incoming packet goes. Held packets are copied into
    /// the entry.
    pub fn steer(&mut self, packet: &Packet, now: SimTime) -> SteerDecision {
        let key = packet.flow_key();
        let (b, pos) = self.locate(&key);
        let Some(pos) = pos else {
            return SteerDecision::Fallback {
                searched: self.buckets[b].len(),
            };
        };
        let entry = &mut self.buckets[b][pos];
        entry.last_activity = now;
        if entry.transition {
            entry.held.push_back(HeldPacket {
                packet: *packet,
                held_at: now,
            });
            self.held_bytes += u64::from(packet.size_bytes);
            self.stats.held_packets += 1;
            self.stats.peak_held_bytes = self.stats.peak_held_bytes.max(self.held_bytes);
            SteerDecision::Held { position: pos + 1 }
        } else {
            SteerDecision::Direct {
                core_id: entry.core_id,
                position: pos + 1,
            }
        }
    }

    /// Ends a transition: clears the state and hands back the held packets
    /// in arrival order, to be queued for the entry's (new) core.
    pub fn on_timer_expire(&mut self, key: &FlowKey, now: SimTime) -> Result<Flush, FlowTableError> {
        let (b, pos) = self.locate(key);
        let pos = pos.ok_or(FlowTableError::UnknownFlow(*key))?;
        let entry = &mut self.buckets[b][pos];
        if !entry.transition {
            return Err(FlowTableError::NotInTransition(*key));
        }
        if entry.timer_deadline != Some(now) {
            return Err(FlowTableError::DeadlineMismatch {
                key: *key,
                now,
                deadline: entry.timer_deadline,
            });
        }
        entry.transition = false;
        entry.timer_deadline = None;
        let packets: Vec<HeldPacket> = entry.held.drain(..).collect();
        let bytes: u64 = packets.iter().map(|h| u64::from(h.packet.size_bytes)).sum();
        self.held_bytes -= bytes;
        Ok(Flush {
            core_id: entry.core_id,
            packets,
        })
    }

    /// Idle timeout currently in force.
    pub fn effective_t_delete(&self) -> Duration {
        let threshold = self.config.pressure_threshold * self.config.max_entries as f64;
        if self.len as f64 >= threshold {
            self.config.t_delete_pressure
        } else {
            self.config.t_delete
        }
    }

    /// Evicts idle entries (never those in transition) and stale partial
    /// handshakes. Returns the evicted keys in bucket order.
    pub fn age(&mut self, now: SimTime) -> Vec<FlowKey> {
        let ttl = self.effective_t_delete();
        let mut evicted = Vec::new();
        for bucket in &mut self.buckets {
            bucket.retain(|e| {
                let idle = now.since(e.last_activity) >= ttl;
                if idle && !e.transition {
                    evicted.push(e.key);
                    false
                } else {
                    true
                }
            });
        }
        self.len -= evicted.len();
        self.stats.evictions += evicted.len() as u64;
        self.tracker.expire(now, self.config.t_delete);
        evicted
    }

    /// Entry memory at peak occupancy plus peak held bytes.
    pub fn peak_memory(&self, ip_version: IpVersion) -> u64 {
        memory_estimate(self.stats.peak_occupancy as u64, ip_version, self.stats.peak_held_bytes)
    }
}

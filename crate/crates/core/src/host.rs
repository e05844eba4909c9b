//! Multicore receiver: per-core softirq processing, socket ownership with a
//! deferred backlog, application threads that borrow their process context
//! for TCP processing, and a periodic scheduler that may migrate them.
//!
//! The host never touches the event queue directly. Work that must happen
//! later is returned as [`HostEffect`]s and scheduled by the caller.

use std::collections::{HashMap, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::SimTime;
use crate::nic::Nic;
use crate::packet::{Direction, FlowKey, Packet, PacketKind, TransmitDescriptor};

pub type CoreId = usize;
pub type Pid = usize;
pub type SocketId = usize;

/// Host-generated packet ids live in the upper half of the id space.
const HOST_PACKET_ID_BASE: u64 = 1 << 63;
const CONTROL_BYTES: u32 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum HostError {
    #[error("invalid host configuration: {0}")]
    Config(String),
    #[error("core {core} does not exist (host has {num_cores})")]
    NoSuchCore { core: CoreId, num_cores: usize },
    #[error("core {core} is outside the allowed set of the process")]
    NotAllowed { core: CoreId },
    #[error("flow {0} already has a socket")]
    DuplicateFlow(FlowKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub processors: usize,
    pub cores_per_processor: usize,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            processors: 2,
            cores_per_processor: 2,
        }
    }
}

impl Topology {
    pub fn num_cores(&self) -> usize {
        self.processors * self.cores_per_processor
    }

    pub fn processor_of(&self, core: CoreId) -> usize {
        core / self.cores_per_processor
    }

    pub fn cores_of(&self, processor: usize) -> impl Iterator<Item = CoreId> {
        let per = self.cores_per_processor;
        processor * per..(processor + 1) * per
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    Interrupt,
    Process,
}

/// One TCP-processed data packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub packet_id: u64,
    pub socket: SocketId,
    pub pid: Pid,
    pub seq: u64,
    pub at: SimTime,
    pub core: CoreId,
    pub context: Context,
}

/// An interrupt-context arrival that found its socket owned by a thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockConflict {
    pub at: SimTime,
    pub core: CoreId,
    pub owner_core: CoreId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Migration {
    pub at: SimTime,
    pub pid: Pid,
    pub from: CoreId,
    pub to: CoreId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pinning {
    Pinned(CoreId),
    /// May run on any of these cores.
    Free(Vec<CoreId>),
}

impl Pinning {
    pub fn allows(&self, core: CoreId) -> bool {
        match self {
            Pinning::Pinned(c) => *c == core,
            Pinning::Free(set) => set.contains(&core),
        }
    }

    pub fn is_free(&self) -> bool {
        matches!(self, Pinning::Free(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadState {
    /// Between receive calls; arrivals are processed in interrupt context.
    UserWork,
    /// Blocked in a receive call waiting for data.
    Sleeping,
    /// Has deferred packets to process, waiting for its core.
    Runnable,
    /// Processing its backlog; the socket is owned by the user.
    Running,
    /// Never calls receive.
    Detached,
}

impl ThreadState {
    fn on_run_queue(self) -> bool {
        matches!(self, ThreadState::UserWork | ThreadState::Runnable | ThreadState::Running)
    }
}

#[derive(Debug, Clone)]
pub struct AppProcess {
    pub pid: Pid,
    pub core: CoreId,
    pub pinning: Pinning,
    pub state: ThreadState,
    pub socket: SocketId,
}

#[derive(Debug, Clone)]
pub struct SocketModel {
    pub key: FlowKey,
    pub owner: Pid,
    pub owned_by_user: bool,
    /// Backlog and prequeue merged into one FIFO.
    pub backlog: VecDeque<Packet>,
    since_ack: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SchedulerMode {
    Pinned,
    PeakPerformance,
    PowerSaving,
    Cpuset { partition: Vec<CoreId> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HostConfig {
    pub topology: Topology,
    /// Stack service rate per core, packets per second.
    pub service_rate_pps: f64,
    /// One ACK per this many processed data packets.
    pub ack_every: u32,
    /// Most packets one receive call processes before yielding the core.
    pub recv_batch: usize,
    /// Gap between a receive call returning and the next one.
    pub user_work: Duration,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            topology: Topology::default(),
            service_rate_pps: 3.0e6,
            ack_every: 2,
            recv_batch: 16,
            user_work: Duration::from_micros(10),
        }
    }
}

/// Follow-up work the caller must schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostEffect {
    CoreStep { core: CoreId, at: SimTime },
    BatchDone { pid: Pid, at: SimTime },
    RecvCall { pid: Pid, at: SimTime },
    Transmit {
        at: SimTime,
        packet: Packet,
        desc: TransmitDescriptor,
    },
}

#[derive(Debug, Clone, Default)]
struct CoreState {
    softirq_active: bool,
    busy_until: SimTime,
    step_pending: bool,
    runq: VecDeque<Pid>,
}

#[derive(Debug)]
pub struct Host {
    config: HostConfig,
    service: Duration,
    cores: Vec<CoreState>,
    threads: Vec<AppProcess>,
    sockets: Vec<SocketModel>,
    by_key: HashMap<FlowKey, SocketId>,
    initial_cores: Vec<CoreId>,
    deliveries: Vec<Delivery>,
    conflicts: Vec<LockConflict>,
    migrations: Vec<Migration>,
    deferred: u64,
    unknown_flow: u64,
    next_packet_id: u64,
}

impl Host {
    pub fn new(config: HostConfig) -> Result<Self, HostError> {
        if config.topology.num_cores() == 0 {
            return Err(HostError::Config("topology has no cores".into()));
        }
        if config.topology.num_cores() > 256 {
            return Err(HostError::Config("at most 256 cores fit a one-byte core id".into()));
        }
        if !(config.service_rate_pps > 0.0 && config.service_rate_pps.is_finite()) {
            return Err(HostError::Config("service_rate_pps must be positive".into()));
        }
        if config.ack_every == 0 {
            return Err(HostError::Config("ack_every must be at least 1".into()));
        }
        if config.recv_batch == 0 {
            return Err(HostError::Config("recv_batch must be at least 1".into()));
        }
        let service = service_time(config.service_rate_pps);
        let cores = vec![CoreState::default(); config.topology.num_cores()];
        Ok(Host {
            config,
            service,
            cores,
            threads: Vec::new(),
            sockets: Vec::new(),
            by_key: HashMap::new(),
            initial_cores: Vec::new(),
            deliveries: Vec::new(),
            conflicts: Vec::new(),
            migrations: Vec::new(),
            deferred: 0,
            unknown_flow: 0,
            next_packet_id: HOST_PACKET_ID_BASE,
        })
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    pub fn topology(&self) -> Topology {
        self.config.topology
    }

    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }

    /// Virtual time charged per packet of stack processing.
    pub fn service_time(&self) -> Duration {
        self.service
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    pub fn conflicts(&self) -> &[LockConflict] {
        &self.conflicts
    }

    pub fn migrations(&self) -> &[Migration] {
        &self.migrations
    }

    pub fn threads(&self) -> &[AppProcess] {
        &self.threads
    }

    pub fn sockets(&self) -> &[SocketModel] {
        &self.sockets
    }

    pub fn socket_of(&self, key: &FlowKey) -> Option<SocketId> {
        self.by_key.get(key).copied()
    }

    /// Packets handed to a backlog instead of being processed on arrival.
    pub fn deferred(&self) -> u64 {
        self.deferred
    }

    /// Data packets for which no socket existed.
    pub fn unknown_flow_packets(&self) -> u64 {
        self.unknown_flow
    }

    pub fn placement_timeline(&self) -> PlacementTimeline {
        PlacementTimeline::new(&self.initial_cores, &self.migrations)
    }

    /// Creates a socket for `key` (receive direction) and the thread that
    /// reads it. Threads that never receive leave all processing to
    /// interrupt context.
    pub fn add_flow(
        &mut self,
        key: FlowKey,
        pinning: Pinning,
        initial_core: CoreId,
        receives: bool,
    ) -> Result<(SocketId, Pid), HostError> {
        self.check_core(initial_core)?;
        if let Pinning::Free(set) = &pinning {
            for &c in set {
                self.check_core(c)?;
            }
        }
        if !pinning.allows(initial_core) {
            return Err(HostError::NotAllowed { core: initial_core });
        }
        if self.by_key.contains_key(&key) {
            return Err(HostError::DuplicateFlow(key));
        }
        let sid = self.sockets.len();
        let pid = self.threads.len();
        self.sockets.push(SocketModel {
            key,
            owner: pid,
            owned_by_user: false,
            backlog: VecDeque::new(),
            since_ack: 0,
        });
        self.threads.push(AppProcess {
            pid,
            core: initial_core,
            pinning,
            state: if receives {
                ThreadState::Sleeping
            } else {
                ThreadState::Detached
            },
            socket: sid,
        });
        self.initial_cores.push(initial_core);
        self.by_key.insert(key, sid);
        Ok((sid, pid))
    }

    fn check_core(&self, core: CoreId) -> Result<(), HostError> {
        if core >= self.cores.len() {
            return Err(HostError::NoSuchCore {
                core,
                num_cores: self.cores.len(),
            });
        }
        Ok(())
    }

    fn kick(&mut self, core: CoreId, now: SimTime, fx: &mut Vec<HostEffect>) {
        let c = &mut self.cores[core];
        if !c.step_pending {
            c.step_pending = true;
            fx.push(HostEffect::CoreStep {
                core,
                at: now.max(c.busy_until),
            });
        }
    }

    fn occupy(&mut self, core: CoreId, until: SimTime, fx: &mut Vec<HostEffect>) {
        let c = &mut self.cores[core];
        c.busy_until = until;
        c.step_pending = true;
        fx.push(HostEffect::CoreStep { core, at: until });
    }

    /// Network interrupt for the queue pinned to `core`: schedules the
    /// softnet handler.
    pub fn raise_interrupt(&mut self, core: CoreId, now: SimTime, fx: &mut Vec<HostEffect>) {
        self.cores[core].softirq_active = true;
        self.kick(core, now, fx);
    }

    /// One scheduling decision on `core`. Softirq work has priority; a
    /// receive batch runs to completion once started.
    pub fn core_step(&mut self, core: CoreId, now: SimTime, nic: &mut Nic, fx: &mut Vec<HostEffect>) {
        // Stays set while this step runs so wake-ups on the same core do not
        // schedule a second step.
        self.cores[core].step_pending = true;
        debug_assert!(now >= self.cores[core].busy_until);
        if self.cores[core].softirq_active {
            if let Some(packet) = nic.drain(core as u16) {
                self.softirq_packet(core, packet, now, fx);
                self.occupy(core, now + self.service, fx);
                return;
            }
            self.cores[core].softirq_active = false;
        }
        while let Some(pid) = self.cores[core].runq.pop_front() {
            let t = &self.threads[pid];
            if t.core != core || t.state != ThreadState::Runnable {
                continue;
            }
            let end = self.run_batch(pid, core, now, fx);
            fx.push(HostEffect::BatchDone { pid, at: end });
            self.occupy(core, end, fx);
            return;
        }
        self.cores[core].step_pending = false;
    }

    /// Interrupt-context handling of one packet taken from the ring.
    fn softirq_packet(&mut self, core: CoreId, packet: Packet, now: SimTime, fx: &mut Vec<HostEffect>) {
        match packet.kind {
            PacketKind::Syn => {
                let reply = self.control_packet(packet.key.reversed(), PacketKind::SynAck, now);
                fx.push(HostEffect::Transmit {
                    at: now + self.service,
                    packet: reply,
                    desc: TransmitDescriptor {
                        key: reply.key,
                        core_id: core as u8,
                    },
                });
                return;
            }
            PacketKind::Data => {}
            _ => return,
        }
        let Some(&sid) = self.by_key.get(&packet.key) else {
            self.unknown_flow += 1;
            return;
        };
        let pid = self.sockets[sid].owner;
        let owner_core = self.threads[pid].core;
        if self.sockets[sid].owned_by_user {
            self.sockets[sid].backlog.push_back(packet);
            self.deferred += 1;
            self.conflicts.push(LockConflict {
                at: now,
                core,
                owner_core,
            });
            return;
        }
        match self.threads[pid].state {
            ThreadState::Sleeping => {
                self.sockets[sid].backlog.push_back(packet);
                self.deferred += 1;
                self.threads[pid].state = ThreadState::Runnable;
                self.cores[owner_core].runq.push_back(pid);
                self.kick(owner_core, now, fx);
            }
            ThreadState::Runnable => {
                self.sockets[sid].backlog.push_back(packet);
                self.deferred += 1;
            }
            _ => self.deliver(sid, pid, &packet, core, Context::Interrupt, now, fx),
        }
    }

    fn control_packet(&mut self, key: FlowKey, kind: PacketKind, now: SimTime) -> Packet {
        let id = self.next_packet_id;
        self.next_packet_id += 1;
        Packet {
            id,
            key,
            direction: Direction::Tx,
            kind,
            seq: 0,
            arrival: now,
            size_bytes: CONTROL_BYTES,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deliver(
        &mut self,
        sid: SocketId,
        pid: Pid,
        packet: &Packet,
        core: CoreId,
        context: Context,
        at: SimTime,
        fx: &mut Vec<HostEffect>,
    ) {
        self.deliveries.push(Delivery {
            packet_id: packet.id,
            socket: sid,
            pid,
            seq: packet.seq,
            at,
            core,
            context,
        });
        self.sockets[sid].since_ack += 1;
        if self.sockets[sid].since_ack >= self.config.ack_every {
            self.send_ack(sid, core, at + self.service, fx);
        }
    }

    fn send_ack(&mut self, sid: SocketId, core: CoreId, at: SimTime, fx: &mut Vec<HostEffect>) {
        self.sockets[sid].since_ack = 0;
        let ack = self.control_packet(self.sockets[sid].key.reversed(), PacketKind::Ack, at);
        fx.push(HostEffect::Transmit {
            at,
            packet: ack,
            desc: TransmitDescriptor {
                key: ack.key,
                core_id: core as u8,
            },
        });
    }

    /// Process-context processing of up to `recv_batch` backlog packets.
    /// Returns when the core is released.
    fn run_batch(&mut self, pid: Pid, core: CoreId, now: SimTime, fx: &mut Vec<HostEffect>) -> SimTime {
        let sid = self.threads[pid].socket;
        self.threads[pid].state = ThreadState::Running;
        self.sockets[sid].owned_by_user = true;
        let k = self.config.recv_batch.min(self.sockets[sid].backlog.len());
        let mut at = now;
        for _ in 0..k {
            let packet = self.sockets[sid].backlog.pop_front().expect("k bounded by backlog length");
            self.deliver(sid, pid, &packet, core, Context::Process, at, fx);
            at = at + self.service;
        }
        at
    }

    /// End of a receive batch: release the socket, acknowledge whatever the
    /// read consumed, then either continue with the remaining backlog or
    /// return to user work.
    pub fn batch_done(&mut self, pid: Pid, now: SimTime, fx: &mut Vec<HostEffect>) {
        let sid = self.threads[pid].socket;
        self.sockets[sid].owned_by_user = false;
        if self.sockets[sid].since_ack > 0 {
            self.send_ack(sid, self.threads[pid].core, now, fx);
        }
        if self.sockets[sid].backlog.is_empty() {
            self.threads[pid].state = ThreadState::UserWork;
            fx.push(HostEffect::RecvCall {
                pid,
                at: now + self.config.user_work,
            });
        } else {
            self.make_runnable(pid, now, fx);
        }
    }

    fn make_runnable(&mut self, pid: Pid, now: SimTime, fx: &mut Vec<HostEffect>) {
        let core = self.threads[pid].core;
        self.threads[pid].state = ThreadState::Runnable;
        self.cores[core].runq.push_back(pid);
        self.kick(core, now, fx);
    }

    /// The thread enters its next receive call.
    pub fn recv_call(&mut self, pid: Pid, now: SimTime, fx: &mut Vec<HostEffect>) {
        if self.threads[pid].state != ThreadState::UserWork {
            return;
        }
        let sid = self.threads[pid].socket;
        if self.sockets[sid].backlog.is_empty() {
            self.threads[pid].state = ThreadState::Sleeping;
        } else {
            self.make_runnable(pid, now, fx);
        }
    }

    fn move_thread(&mut self, pid: Pid, to: CoreId, now: SimTime, fx: &mut Vec<HostEffect>) -> Migration {
        let from = self.threads[pid].core;
        if self.threads[pid].state == ThreadState::Runnable {
            self.cores[from].runq.retain(|&p| p != pid);
            self.cores[to].runq.push_back(pid);
            self.kick(to, now, fx);
        }
        self.threads[pid].core = to;
        let m = Migration { at: now, pid, from, to };
        self.migrations.push(m);
        m
    }

    fn assigned(&self, core: CoreId) -> usize {
        self.threads.iter().filter(|t| t.core == core).count()
    }

    /// Periodic load balancing. Running threads are never moved.
    pub fn scheduler_tick(&mut self, mode: &SchedulerMode, now: SimTime, fx: &mut Vec<HostEffect>) -> Vec<Migration> {
        match mode {
            SchedulerMode::Pinned => Vec::new(),
            SchedulerMode::PeakPerformance => self.balance(now, fx),
            SchedulerMode::PowerSaving => {
                let home: Vec<CoreId> = self.config.topology.cores_of(0).collect();
                self.consolidate(&home, now, fx)
            }
            SchedulerMode::Cpuset { partition } => {
                let part: Vec<CoreId> = partition.iter().copied().filter(|&c| c < self.cores.len()).collect();
                self.consolidate(&part, now, fx)
            }
        }
    }

    fn balance(&mut self, now: SimTime, fx: &mut Vec<HostEffect>) -> Vec<Migration> {
        let mut moved = Vec::new();
        for _ in 0..self.threads.len() {
            let mut load = vec![0usize; self.cores.len()];
            for t in &self.threads {
                if t.state.on_run_queue() {
                    load[t.core] += 1;
                }
            }
            let src = (0..load.len())
                .max_by_key(|&c| (load[c], std::cmp::Reverse(c)))
                .expect("at least one core");
            let mut targets: Vec<CoreId> = (0..load.len()).collect();
            targets.sort_by_key(|&c| (load[c], c));
            let choice = targets
                .into_iter()
                .take_while(|&dst| load[src] >= load[dst] + 2)
                .find_map(|dst| {
                    self.threads
                        .iter()
                        .find(|t| {
                            t.core == src
                                && t.pinning.is_free()
                                && t.pinning.allows(dst)
                                && matches!(t.state, ThreadState::Runnable | ThreadState::UserWork)
                        })
                        .map(|t| (t.pid, dst))
                });
            match choice {
                Some((pid, dst)) => moved.push(self.move_thread(pid, dst, now, fx)),
                None => break,
            }
        }
        moved
    }

    /// Moves free threads sitting outside `home` onto the least loaded
    /// allowed core of `home`.
    fn consolidate(&mut self, home: &[CoreId], now: SimTime, fx: &mut Vec<HostEffect>) -> Vec<Migration> {
        let mut moved = Vec::new();
        if home.is_empty() {
            return moved;
        }
        for pid in 0..self.threads.len() {
            let t = &self.threads[pid];
            if !t.pinning.is_free() || t.state == ThreadState::Running || home.contains(&t.core) {
                continue;
            }
            let allowed: Vec<CoreId> = home.iter().copied().filter(|&c| t.pinning.allows(c)).collect();
            let candidates = if allowed.is_empty() { home.to_vec() } else { allowed };
            let dst = candidates
                .into_iter()
                .min_by_key(|&c| (self.assigned(c), c))
                .expect("home is non-empty");
            moved.push(self.move_thread(pid, dst, now, fx));
        }
        moved
    }
}

/// Ceil of one second divided by the rate, in whole nanoseconds.
pub fn service_time(rate_pps: f64) -> Duration {
    Duration::from_nanos((1e9 / rate_pps).ceil() as u64)
}

/// Where each thread ran over time.
#[derive(Debug, Clone, Default)]
pub struct PlacementTimeline {
    per_pid: Vec<Vec<(SimTime, CoreId)>>,
}

impl PlacementTimeline {
    pub fn new(initial: &[CoreId], migrations: &[Migration]) -> Self {
        let mut per_pid: Vec<Vec<(SimTime, CoreId)>> =
            initial.iter().map(|&c| vec![(SimTime::ZERO, c)]).collect();
        for m in migrations {
            per_pid[m.pid].push((m.at, m.to));
        }
        PlacementTimeline { per_pid }
    }

    /// Core of `pid` at `at`; a migration at exactly `at` already applies.
    pub fn core_at(&self, pid: Pid, at: SimTime) -> CoreId {
        let hist = &self.per_pid[pid];
        let idx = hist.partition_point(|(t, _)| *t <= at);
        hist[idx.saturating_sub(1)].1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ContentionProxies {
    /// Packets processed on a core other than the owning thread's.
    pub cross_core_packets: u64,
    /// Subset of the above where the two cores sit on different processors.
    pub cross_processor_packets: u64,
    /// Consecutive deliveries of one flow on different cores.
    pub alternations: u64,
    pub lock_conflict_events: u64,
    pub cross_processor_conflicts: u64,
}

/// Contention stand-ins computed over deliveries at or after `since`.
pub fn contention_proxy(
    deliveries: &[Delivery],
    timeline: &PlacementTimeline,
    conflicts: &[LockConflict],
    topology: &Topology,
    since: SimTime,
) -> ContentionProxies {
    let mut p = ContentionProxies::default();
    let mut last_core: HashMap<SocketId, CoreId> = HashMap::new();
    for d in deliveries.iter().filter(|d| d.at >= since) {
        let app = timeline.core_at(d.pid, d.at);
        if d.core != app {
            p.cross_core_packets += 1;
            if topology.processor_of(d.core) != topology.processor_of(app) {
                p.cross_processor_packets += 1;
            }
        }
        if let Some(prev) = last_core.insert(d.socket, d.core) {
            if prev != d.core {
                p.alternations += 1;
            }
        }
    }
    for c in conflicts.iter().filter(|c| c.at >= since) {
        p.lock_conflict_events += 1;
        if topology.processor_of(c.core) != topology.processor_of(c.owner_core) {
            p.cross_processor_conflicts += 1;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_table::FlowTableConfig;
    use crate::nic::{NicConfig, NicMode, RxPlacement};
    use crate::rss::{HashType, IndirectionTable, QueueMapping, RssEngine, RssKey};
    use std::net::Ipv4Addr;

    const RATE: f64 = 1.0e6; // 1000 ns per packet

    fn key(port: u16) -> FlowKey {
        FlowKey::tcp(Ipv4Addr::new(10, 0, 0, 1).into(), port, Ipv4Addr::new(10, 0, 0, 2).into(), 5001)
    }

    fn nic_all_to(queue: u16, cores: usize) -> Nic {
        let table = IndirectionTable::new(vec![queue; 8], cores).unwrap();
        let rss = RssEngine::new(RssKey::default(), HashType::FOUR_TUPLE, QueueMapping::Indirection(table), cores)
            .unwrap();
        let cfg = NicConfig {
            num_queues: cores,
            mode: NicMode::Rss,
            ..Default::default()
        };
        Nic::new(cfg, rss, Some(FlowTableConfig::default())).unwrap()
    }

    fn host(processors: usize, per: usize) -> Host {
        Host::new(HostConfig {
            topology: Topology {
                processors,
                cores_per_processor: per,
            },
            service_rate_pps: RATE,
            ack_every: 2,
            recv_batch: 16,
            user_work: Duration::from_micros(5),
        })
        .unwrap()
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

    /// Minimal driver: runs host effects in time order until quiescent.
    fn settle(h: &mut Host, nic: &mut Nic, mut fx: Vec<HostEffect>) -> Vec<(SimTime, Packet, TransmitDescriptor)> {
        let mut q: crate::kernel::EventQueue<HostEffect> = crate::kernel::EventQueue::new();
        let mut sent = Vec::new();
        loop {
            for e in fx.drain(..) {
                let at = match e {
                    HostEffect::CoreStep { at, .. }
                    | HostEffect::BatchDone { at, .. }
                    | HostEffect::RecvCall { at, .. }
                    | HostEffect::Transmit { at, .. } => at,
                };
                q.schedule(at, e).unwrap();
            }
            let Some(ev) = q.pop_due(SimTime::MAX) else { break };
            let now = ev.fire_time;
            match ev.action {
                HostEffect::CoreStep { core, .. } => h.core_step(core, now, nic, &mut fx),
                HostEffect::BatchDone { pid, .. } => h.batch_done(pid, now, &mut fx),
                HostEffect::RecvCall { pid, .. } => h.recv_call(pid, now, &mut fx),
                HostEffect::Transmit { packet, desc, .. } => sent.push((now, packet, desc)),
            }
        }
        sent
    }

    fn enqueue_all(nic: &mut Nic, pkts: impl IntoIterator<Item = Packet>) -> bool {
        let mut raise = false;
        for p in pkts {
            if let RxPlacement::Queued { raise_interrupt, .. } = nic.rx(p, SimTime::ZERO) {
                raise |= raise_interrupt;
            }
        }
        raise
    }

    #[test]
    fn unowned_socket_processes_in_interrupt_context() {
        let mut h = host(1, 2);
        let mut nic = nic_all_to(0, 2);
        h.add_flow(key(1), Pinning::Pinned(1), 1, false).unwrap();
        assert!(enqueue_all(&mut nic, (0..5).map(|s| data(1, s))));
        let mut fx = Vec::new();
        h.raise_interrupt(0, SimTime::ZERO, &mut fx);
        let acks = settle(&mut h, &mut nic, fx);
        let d = h.deliveries();
        assert_eq!(d.len(), 5);
        assert!(d.iter().all(|d| d.core == 0 && d.context == Context::Interrupt));
        assert_eq!(d.last().unwrap().at, SimTime::from_nanos(4000));
        assert_eq!(acks.len(), 2);
        assert!(acks.iter().all(|(_, _, desc)| desc.core_id == 0));
    }

    #[test]
    fn sleeping_reader_gets_packets_in_process_context() {
        let mut h = host(1, 2);
        let mut nic = nic_all_to(0, 2);
        h.add_flow(key(1), Pinning::Pinned(1), 1, true).unwrap();
        enqueue_all(&mut nic, (0..4).map(|s| data(1, s)));
        let mut fx = Vec::new();
        h.raise_interrupt(0, SimTime::ZERO, &mut fx);
        let acks = settle(&mut h, &mut nic, fx);
        let d = h.deliveries();
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|d| d.core == 1 && d.context == Context::Process));
        assert_eq!(d.iter().map(|d| d.seq).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(acks.iter().all(|(_, _, desc)| desc.core_id == 1));
        assert_eq!(h.deferred(), 4);
    }

    #[test]
    fn owned_socket_defers_and_counts_conflict() {
        let mut h = host(1, 2);
        let mut nic = nic_all_to(0, 2);
        h.add_flow(key(1), Pinning::Pinned(1), 1, true).unwrap();
        let sid = h.socket_of(&key(1)).unwrap();
        h.sockets[sid].owned_by_user = true;
        h.threads[0].state = ThreadState::Running;
        enqueue_all(&mut nic, [data(1, 0), data(1, 1)]);
        let mut fx = Vec::new();
        h.raise_interrupt(0, SimTime::ZERO, &mut fx);
        settle(&mut h, &mut nic, fx);
        assert!(h.deliveries().is_empty());
        assert_eq!(h.sockets()[sid].backlog.len(), 2);
        assert_eq!(h.conflicts().len(), 2);
    }

    #[test]
    fn empty_queue_interrupt_exits_immediately() {
        let mut h = host(1, 1);
        let mut nic = nic_all_to(0, 1);
        let mut fx = Vec::new();
        h.raise_interrupt(0, SimTime::ZERO, &mut fx);
        settle(&mut h, &mut nic, fx);
        assert!(h.deliveries().is_empty());
        assert!(!h.cores[0].softirq_active);
    }

    #[test]
    fn syn_is_answered_from_processing_core() {
        let mut h = host(1, 2);
        let mut nic = nic_all_to(1, 2);
        let mut syn = data(1, 0);
        syn.kind = PacketKind::Syn;
        enqueue_all(&mut nic, [syn]);
        let mut fx = Vec::new();
        h.raise_interrupt(1, SimTime::ZERO, &mut fx);
        let sent = settle(&mut h, &mut nic, fx);
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].1.kind, PacketKind::SynAck);
        assert_eq!(sent[0].1.key, key(1).reversed());
        assert_eq!(sent[0].2.core_id, 1);
    }

    #[test]
    fn rss_style_alternation_between_interrupt_and_app_cores() {
        // Interrupts on core 0, reader on core 1. Arrivals while the reader
        // is in user work are processed on core 0, the rest on core 1.
        let mut h = host(1, 2);
        let mut nic = nic_all_to(0, 2);
        h.add_flow(key(1), Pinning::Pinned(1), 1, true).unwrap();
        let mut q: crate::kernel::EventQueue<HostEffect> = crate::kernel::EventQueue::new();
        let mut fx = Vec::new();
        for s in 0..40u64 {
            let t = SimTime::from_nanos(s * 3_000);
            // Drive pending effects up to t.
            loop {
                for e in fx.drain(..) {
                    let at = match e {
                        HostEffect::CoreStep { at, .. }
                        | HostEffect::BatchDone { at, .. }
                        | HostEffect::RecvCall { at, .. }
                        | HostEffect::Transmit { at, .. } => at,
                    };
                    q.schedule(at, e).unwrap();
                }
                let Some(ev) = q.pop_due(t) else { break };
                let now = ev.fire_time;
                match ev.action {
                    HostEffect::CoreStep { core, .. } => h.core_step(core, now, &mut nic, &mut fx),
                    HostEffect::BatchDone { pid, .. } => h.batch_done(pid, now, &mut fx),
                    HostEffect::RecvCall { pid, .. } => h.recv_call(pid, now, &mut fx),
                    HostEffect::Transmit { .. } => {}
                }
            }
            q.run_until(t, |_, _, _| unreachable!()).unwrap();
            if let RxPlacement::Queued { raise_interrupt: true, .. } = nic.rx(data(1, s), t) {
                h.raise_interrupt(0, t, &mut fx);
            }
        }
        settle(&mut h, &mut nic, fx);
        let cores: std::collections::BTreeSet<_> = h.deliveries().iter().map(|d| d.core).collect();
        assert_eq!(cores.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        let tl = h.placement_timeline();
        let p = contention_proxy(h.deliveries(), &tl, h.conflicts(), &h.topology(), SimTime::ZERO);
        assert!(p.alternations > 0);
        assert!(p.cross_core_packets > 0);
        assert_eq!(h.deliveries().len(), 40);
    }

    #[test]
    fn pinned_mode_never_migrates() {
        let mut h = host(1, 2);
        h.add_flow(key(1), Pinning::Free(vec![0, 1]), 0, true).unwrap();
        h.add_flow(key(2), Pinning::Free(vec![0, 1]), 0, true).unwrap();
        h.threads[0].state = ThreadState::UserWork;
        h.threads[1].state = ThreadState::UserWork;
        let mut fx = Vec::new();
        assert!(h.scheduler_tick(&SchedulerMode::Pinned, SimTime::ZERO, &mut fx).is_empty());
    }

    #[test]
    fn peak_performance_balances_run_queues() {
        let mut h = host(1, 2);
        h.add_flow(key(1), Pinning::Free(vec![0, 1]), 0, true).unwrap();
        h.add_flow(key(2), Pinning::Free(vec![0, 1]), 0, true).unwrap();
        h.threads[0].state = ThreadState::UserWork;
        h.threads[1].state = ThreadState::UserWork;
        let mut fx = Vec::new();
        let moved = h.scheduler_tick(&SchedulerMode::PeakPerformance, SimTime::from_nanos(7), &mut fx);
        assert_eq!(
            moved,
            vec![Migration {
                at: SimTime::from_nanos(7),
                pid: 0,
                from: 0,
                to: 1
            }]
        );
        assert!(h
            .scheduler_tick(&SchedulerMode::PeakPerformance, SimTime::from_nanos(8), &mut fx)
            .is_empty());
    }

    #[test]
    fn peak_performance_ignores_pinned_and_sleeping() {
        let mut h = host(1, 2);
        h.add_flow(key(1), Pinning::Pinned(0), 0, true).unwrap();
        h.add_flow(key(2), Pinning::Free(vec![0, 1]), 0, true).unwrap();
        h.add_flow(key(3), Pinning::Free(vec![0, 1]), 0, true).unwrap();
        h.threads[0].state = ThreadState::UserWork;
        h.threads[1].state = ThreadState::UserWork;
        // pid 2 sleeps: load is 2 vs 0, pid 1 is the only movable thread.
        let mut fx = Vec::new();
        let moved = h.scheduler_tick(&SchedulerMode::PeakPerformance, SimTime::ZERO, &mut fx);
        assert_eq!(moved.len(), 1);
        assert_eq!(moved[0].pid, 1);
    }

    #[test]
    fn power_saving_pulls_toward_first_processor() {
        let mut h = host(2, 2);
        h.add_flow(key(1), Pinning::Free(vec![0, 1, 2, 3]), 0, true).unwrap();
        h.add_flow(key(2), Pinning::Free(vec![0, 1, 2, 3]), 2, true).unwrap();
        let mut fx = Vec::new();
        let moved = h.scheduler_tick(&SchedulerMode::PowerSaving, SimTime::ZERO, &mut fx);
        assert_eq!(moved.len(), 1);
        assert_eq!((moved[0].pid, moved[0].from, moved[0].to), (1, 2, 1));
    }

    #[test]
    fn cpuset_enforces_partition() {
        let mut h = host(2, 2);
        h.add_flow(key(1), Pinning::Free(vec![0, 1, 2, 3]), 0, true).unwrap();
        h.add_flow(key(2), Pinning::Pinned(1), 1, true).unwrap();
        let mut fx = Vec::new();
        let mode = SchedulerMode::Cpuset { partition: vec![2, 3] };
        let moved = h.scheduler_tick(&mode, SimTime::ZERO, &mut fx);
        assert_eq!(moved.len(), 1);
        assert_eq!(moved[0].to, 2);
        assert_eq!(h.threads()[1].core, 1);
    }

    #[test]
    fn placement_timeline_lookup() {
        let tl = PlacementTimeline::new(
            &[0, 1],
            &[Migration {
                at: SimTime::from_nanos(100),
                pid: 0,
                from: 0,
                to: 1,
            }],
        );
        assert_eq!(tl.core_at(0, SimTime::from_nanos(99)), 0);
        assert_eq!(tl.core_at(0, SimTime::from_nanos(100)), 1);
        assert_eq!(tl.core_at(1, SimTime::from_nanos(5)), 1);
    }

    #[test]
    fn single_core_proxies_are_zero() {
        let mut h = host(1, 1);
        let mut nic = nic_all_to(0, 1);
        h.add_flow(key(1), Pinning::Pinned(0), 0, true).unwrap();
        enqueue_all(&mut nic, (0..10).map(|s| data(1, s)));
        let mut fx = Vec::new();
        h.raise_interrupt(0, SimTime::ZERO, &mut fx);
        settle(&mut h, &mut nic, fx);
        let p = contention_proxy(h.deliveries(), &h.placement_timeline(), h.conflicts(), &h.topology(), SimTime::ZERO);
        assert_eq!(p, ContentionProxies::default());
    }

    #[test]
    fn config_and_flow_validation() {
        assert!(Host::new(HostConfig {
            service_rate_pps: 0.0,
            ..Default::default()
        })
        .is_err());
        let mut h = host(1, 2);
        assert!(matches!(
            h.add_flow(key(1), Pinning::Pinned(0), 1, true),
            Err(HostError::NotAllowed { core: 1 })
        ));
        assert!(matches!(
            h.add_flow(key(1), Pinning::Pinned(5), 5, true),
            Err(HostError::NoSuchCore { .. })
        ));
        h.add_flow(key(1), Pinning::Pinned(0), 0, true).unwrap();
        assert!(matches!(
            h.add_flow(key(1), Pinning::Pinned(0), 0, true),
            Err(HostError::DuplicateFlow(_))
        ));
        assert_eq!(service_time(3.0e6), Duration::from_nanos(334));
    }
}

//! Event loop tying the sender, the NIC and the receiver host together.

use std::collections::HashMap;
use std::time::Duration;

use thiserror::Error;

use crate::flow_table::{FlowTableStats, IpVersion, UpdateOutcome};
use crate::host::{
    Delivery, Host, HostEffect, HostError, LockConflict, Migration, Pid, PlacementTimeline, SchedulerMode, Topology,
};
use crate::kernel::{rng_from_seed, EventQueue, KernelError, SimRng, SimTime};
use crate::nic::{Nic, NicError, QueueStats, RxPlacement};
use crate::packet::{Direction, FlowKey, Packet, PacketKind, TransmitDescriptor};
use crate::workload::{
    adversarial_fig8_schedule, jitter, spawn_streams, Link, Scenario, ScriptAction, ScriptKind, StreamSource,
    WorkloadError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Nic(#[from] NicError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    StreamOpen(usize),
    StreamTrain(usize),
    Arrive(Packet),
    RingPush { queue: u16, packet: Packet },
    CoreStep(usize),
    BatchDone(Pid),
    RecvCall(Pid),
    NicTx { packet: Packet, desc: TransmitDescriptor },
    TransitionExpire(FlowKey),
    PeerReceive(Packet),
    SchedulerTick,
    AgeTick,
}

/// A packet that waited in a flow-table entry during a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeldRecord {
    pub key: FlowKey,
    pub packet_id: u64,
    pub held_at: SimTime,
    pub flushed_at: SimTime,
}

impl HeldRecord {
    pub fn delay(&self) -> Duration {
        self.flushed_at.since(self.held_at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropRecord {
    pub at: SimTime,
    pub queue: u16,
    pub packet_id: u64,
    pub key: FlowKey,
    pub kind: PacketKind,
}

/// Everything a finished run leaves behind for the metrics.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario: Scenario,
    pub topology: Topology,
    /// Receive-direction key of each socket, indexed by socket id.
    pub socket_keys: Vec<FlowKey>,
    pub deliveries: Vec<Delivery>,
    pub timeline: PlacementTimeline,
    pub conflicts: Vec<LockConflict>,
    pub migrations: Vec<Migration>,
    pub held: Vec<HeldRecord>,
    pub drops: Vec<DropRecord>,
    pub queue_stats: Vec<QueueStats>,
    pub table_stats: Option<FlowTableStats>,
    pub peak_table_memory: u64,
    pub data_sent: u64,
    pub data_packet_ids: Vec<u64>,
    pub total_flows: usize,
    pub unknown_flow_packets: u64,
    pub deferred: u64,
    pub events: u64,
    pub end_time: SimTime,
    pub warmup_end: SimTime,
    pub t_timer: Duration,
}

struct Sim {
    sc: Scenario,
    q: EventQueue<Action>,
    nic: Nic,
    host: Host,
    rng: SimRng,
    link: Link,
    sources: Vec<StreamSource>,
    by_key: HashMap<FlowKey, usize>,
    end: SimTime,
    wire_data: Duration,
    wire_control: Duration,
    train_gap: Duration,
    sched: SchedulerMode,
    next_id: u64,
    held: Vec<HeldRecord>,
    drops: Vec<DropRecord>,
    data_ids: Vec<u64>,
    fx: Vec<HostEffect>,
}

impl Sim {
    fn new(sc: &Scenario) -> Result<Self, SimError> {
        sc.validate()?;
        let nic = Nic::new(sc.nic_config(), sc.rss_engine()?, Some(sc.flow_table_config()))?;
        let host = Host::new(sc.host_config()?)?;
        let train_gap = sc.stream_interval() * sc.traffic.burst;
        Ok(Sim {
            q: EventQueue::new(),
            nic,
            host,
            rng: rng_from_seed(sc.seed),
            link: Link::new(Duration::from_nanos((sc.nic.link_latency_us * 1e3).round() as u64)),
            sources: Vec::new(),
            by_key: HashMap::new(),
            end: SimTime::ZERO + sc.duration(),
            wire_data: sc.wire_time(sc.traffic.packet_bytes),
            wire_control: sc.wire_time(64),
            train_gap,
            sched: sc.scheduler_mode(),
            next_id: 0,
            held: Vec::new(),
            drops: Vec::new(),
            data_ids: Vec::new(),
            fx: Vec::new(),
            sc: sc.clone(),
        })
    }

    fn at(&mut self, t: SimTime, a: Action) -> Result<(), SimError> {
        self.q.schedule(t, a)?;
        Ok(())
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn setup_streams(&mut self) -> Result<(), SimError> {
        let streams = spawn_streams(&self.sc, &mut self.rng)?;
        let receives = self.sc.traffic.receive;
        for s in &streams {
            self.host.add_flow(s.key, s.pinning.clone(), s.initial_core, receives)?;
            self.by_key.insert(s.key, self.sources.len());
            self.sources.push(StreamSource::new(s.key));
            self.at(s.open_at, Action::StreamOpen(s.index))?;
        }
        let tick = self.sc.scheduler_tick();
        if self.sched != SchedulerMode::Pinned && SimTime::ZERO + tick < self.end {
            self.at(SimTime::ZERO + tick, Action::SchedulerTick)?;
        }
        let age = self.sc.age_interval();
        if SimTime::ZERO + age < self.end {
            self.at(SimTime::ZERO + age, Action::AgeTick)?;
        }
        Ok(())
    }

    fn setup_fig8(&mut self) -> Result<(), SimError> {
        let script = adversarial_fig8_schedule(self.sc.nic.ring_capacity, self.sc.host.service_rate_pps)?;
        for (key, core) in script.preinstalled() {
            self.host
                .add_flow(key, crate::host::Pinning::Pinned(core), core, false)?;
            if let Some(table) = self.nic.table_mut() {
                table
                    .insert(key, core as u8, SimTime::ZERO)
                    .map_err(|r| WorkloadError::Invalid(format!("cannot preinstall {key}: {r:?}")))?;
            }
        }
        for step in &script.steps {
            match step.action {
                ScriptAction::Arrive(p) => {
                    self.data_ids.push(p.id);
                    self.at(step.at, Action::Arrive(p))?;
                }
                ScriptAction::Descriptor(desc) => {
                    let packet = Packet {
                        id: u64::MAX,
                        key: desc.key,
                        direction: Direction::Tx,
                        kind: PacketKind::Ack,
                        seq: 0,
                        arrival: step.at,
                        size_bytes: 64,
                    };
                    self.at(step.at, Action::NicTx { packet, desc })?;
                }
            }
        }
        self.next_id = script.steps.len() as u64 + 1;
        Ok(())
    }

    fn send(&mut self, now: SimTime, packet: Packet, wire: Duration) -> Result<(), SimError> {
        let arrival = self.link.send(now, wire);
        let mut p = packet;
        p.arrival = arrival;
        self.at(arrival, Action::Arrive(p))
    }

    fn flush_effects(&mut self) -> Result<(), SimError> {
        let fx = std::mem::take(&mut self.fx);
        for e in &fx {
            match *e {
                HostEffect::CoreStep { core, at } => self.at(at, Action::CoreStep(core))?,
                HostEffect::BatchDone { pid, at } => self.at(at, Action::BatchDone(pid))?,
                HostEffect::RecvCall { pid, at } => self.at(at, Action::RecvCall(pid))?,
                HostEffect::Transmit { at, packet, desc } => self.at(at, Action::NicTx { packet, desc })?,
            }
        }
        self.fx = fx;
        self.fx.clear();
        Ok(())
    }

    fn placed(&mut self, placement: RxPlacement, packet: &Packet, now: SimTime) -> Result<(), SimError> {
        match placement {
            RxPlacement::Queued {
                queue,
                raise_interrupt: true,
                ..
            } => self.host.raise_interrupt(usize::from(queue), now, &mut self.fx),
            RxPlacement::Queued { .. } | RxPlacement::HeldByTable => {}
            RxPlacement::Pipelined { queue, ready_at } => {
                self.at(ready_at, Action::RingPush { queue, packet: *packet })?
            }
            RxPlacement::Dropped { queue } => self.drops.push(DropRecord {
                at: now,
                queue,
                packet_id: packet.id,
                key: packet.key,
                kind: packet.kind,
            }),
        }
        Ok(())
    }

    fn handle(&mut self, now: SimTime, action: Action) -> Result<(), SimError> {
        match action {
            Action::StreamOpen(i) => {
                let id = self.fresh_id();
                let syn = self.sources[i].control(id, PacketKind::Syn, now);
                self.send(now, syn, self.wire_control)?;
            }
            Action::StreamTrain(i) => {
                if now >= self.end {
                    return Ok(());
                }
                for _ in 0..self.sc.traffic.burst {
                    let id = self.fresh_id();
                    let p = self.sources[i].next_data(id, self.sc.traffic.packet_bytes, now);
                    self.data_ids.push(id);
                    self.send(now, p, self.wire_data)?;
                }
                let gap = self.train_gap.mul_f64(jitter(&mut self.rng));
                self.at(now + gap, Action::StreamTrain(i))?;
            }
            Action::Arrive(p) => {
                let placement = self.nic.rx(p, now);
                self.placed(placement, &p, now)?;
            }
            Action::RingPush { queue, packet } => {
                let placement = self.nic.enqueue(queue, packet);
                self.placed(placement, &packet, now)?;
            }
            Action::CoreStep(core) => self.host.core_step(core, now, &mut self.nic, &mut self.fx),
            Action::BatchDone(pid) => self.host.batch_done(pid, now, &mut self.fx),
            Action::RecvCall(pid) => self.host.recv_call(pid, now, &mut self.fx),
            Action::NicTx { packet, desc } => {
                if let Some(UpdateOutcome::TransitionStarted { deadline }) = self.nic.tx(&packet, &desc, now)? {
                    self.at(deadline, Action::TransitionExpire(packet.flow_key()))?;
                }
                let back = self.link_latency();
                self.at(now + back, Action::PeerReceive(packet))?;
            }
            Action::TransitionExpire(key) => {
                let flush = self.nic.expire_transition(&key, now)?;
                for (held, placement) in flush.placed {
                    self.held.push(HeldRecord {
                        key,
                        packet_id: held.packet.id,
                        held_at: held.held_at,
                        flushed_at: now,
                    });
                    self.placed(placement, &held.packet, now)?;
                }
            }
            Action::PeerReceive(p) => {
                if p.kind != PacketKind::SynAck {
                    return Ok(());
                }
                let Some(&i) = self.by_key.get(&p.flow_key()) else {
                    return Ok(());
                };
                if self.sources[i].established {
                    return Ok(());
                }
                self.sources[i].established = true;
                let id = self.fresh_id();
                let ack = self.sources[i].control(id, PacketKind::Ack, now);
                self.send(now, ack, self.wire_control)?;
                if now < self.end {
                    self.at(now, Action::StreamTrain(i))?;
                }
            }
            Action::SchedulerTick => {
                let mode = self.sched.clone();
                self.host.scheduler_tick(&mode, now, &mut self.fx);
                let next = now + self.sc.scheduler_tick();
                if next < self.end {
                    self.at(next, Action::SchedulerTick)?;
                }
            }
            Action::AgeTick => {
                self.nic.age(now);
                let next = now + self.sc.age_interval();
                if next < self.end {
                    self.at(next, Action::AgeTick)?;
                }
            }
        }
        self.flush_effects()
    }

    fn link_latency(&self) -> Duration {
        self.nic.config().link_latency
    }

    fn run(mut self) -> Result<RunOutput, SimError> {
        while let Some(ev) = self.q.pop_due(SimTime::MAX) {
            self.handle(ev.fire_time, ev.action)?;
        }
        let end_time = self.q.now();
        let table_stats = self.nic.table().map(|t| *t.stats());
        let ip = if self.sc.traffic.receiver_addr.is_ipv6() {
            IpVersion::V6
        } else {
            IpVersion::V4
        };
        let peak_table_memory = self.nic.table().map(|t| t.peak_memory(ip)).unwrap_or(0);
        let data_sent = self.data_ids.len() as u64;
        Ok(RunOutput {
            topology: self.host.topology(),
            socket_keys: self.host.sockets().iter().map(|s| s.key).collect(),
            deliveries: self.host.deliveries().to_vec(),
            timeline: self.host.placement_timeline(),
            conflicts: self.host.conflicts().to_vec(),
            migrations: self.host.migrations().to_vec(),
            held: self.held,
            drops: self.drops,
            queue_stats: self.nic.rings().iter().map(|r| *r.stats()).collect(),
            table_stats,
            peak_table_memory,
            data_sent,
            data_packet_ids: self.data_ids,
            total_flows: self.host.sockets().len(),
            unknown_flow_packets: self.host.unknown_flow_packets(),
            deferred: self.host.deferred(),
            events: self.q.fired(),
            end_time,
            warmup_end: SimTime::ZERO + self.sc.warmup(),
            t_timer: self.sc.t_timer(),
            scenario: self.sc,
        })
    }
}

/// Runs one scenario to quiescence.
pub fn run_scenario(sc: &Scenario) -> Result<RunOutput, SimError> {
    let mut sim = Sim::new(sc)?;
    match sc.script {
        Some(ScriptKind::Fig8) => sim.setup_fig8()?,
        None => sim.setup_streams()?,
    }
    sim.flush_effects()?;
    sim.run()
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::nic::NicMode;
    use crate::workload::PlacementRule;

    fn small() -> Scenario {
        let mut sc = Scenario::default();
        sc.duration_ms = 5.0;
        sc.warmup_ms = 1.0;
        sc.traffic.streams = 4;
        sc.placement = vec![
            PlacementRule { port: 5001, cores: vec![0] },
            PlacementRule { port: 6001, cores: vec![1] },
        ];
        sc
    }

    #[test]
    fn every_sent_packet_is_delivered_or_dropped() {
        let out = run_scenario(&small()).unwrap();
        assert!(out.data_sent > 100);
        let dropped = out.drops.iter().filter(|d| d.kind == PacketKind::Data).count() as u64;
        assert_eq!(out.deliveries.len() as u64 + dropped, out.data_sent);
        assert_eq!(out.table_stats.unwrap().admitted, 4);
        assert_eq!(out.unknown_flow_packets, 0);
    }

    #[test]
    fn rss_mode_has_no_table() {
        let mut sc = small();
        sc.nic.mode = NicMode::Rss;
        let out = run_scenario(&sc).unwrap();
        assert!(out.table_stats.is_none());
        assert!(out.held.is_empty());
    }

    #[test]
    fn zero_duration_is_handshakes_only() {
        let mut sc = small();
        sc.duration_ms = 0.0;
        let out = run_scenario(&sc).unwrap();
        assert_eq!(out.data_sent, 0);
        assert!(out.deliveries.is_empty());
        assert_eq!(out.table_stats.unwrap().handshakes_completed, 4);
    }

    #[test]
    fn same_seed_same_trace() {
        let a = run_scenario(&small()).unwrap();
        let b = run_scenario(&small()).unwrap();
        assert_eq!(a.deliveries, b.deliveries);
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn fig8_script_runs() {
        let mut sc = small();
        sc.script = Some(ScriptKind::Fig8);
        sc.flow_table.t_timer_us = 0.0;
        let out = run_scenario(&sc).unwrap();
        assert_eq!(out.deliveries.len(), 255 + 2);
    }
}

//! Scenario files and traffic generation: parallel TCP streams from one
//! sender, application placement, and the scripted adversarial migration.

use std::collections::HashSet;
use std::net::{IpAddr, Ipv4Addr};
use std::path::Path;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow_table::FlowTableConfig;
use crate::host::{service_time, CoreId, HostConfig, Pinning, SchedulerMode, Topology};
use crate::kernel::{SimRng, SimTime};
use crate::nic::{NicConfig, NicMode};
use crate::packet::{Direction, FlowKey, Packet, PacketKind, TransmitDescriptor};
use crate::rss::{HashType, IndirectionTable, QueueMapping, RssEngine, RssKey};

pub const SCENARIO_VERSION: u32 = 1;
pub const EPHEMERAL_LOW: u16 = 32768;
/// Exclusive upper end of the randomized ephemeral range.
pub const EPHEMERAL_HIGH: u16 = 61000;
const CONTROL_BYTES: u32 = 64;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario does not serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("duplicate source port {0}")]
    DuplicatePort(u16),
    #[error("{wanted} streams do not fit the ephemeral port range ({available} ports)")]
    PortsExhausted { wanted: usize, available: usize },
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, WorkloadError> {
    Err(WorkloadError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashField {
    SrcAddr,
    DstAddr,
    SrcPort,
    DstPort,
    Protocol,
}

impl HashField {
    fn flag(self) -> HashType {
        match self {
            HashField::SrcAddr => HashType::SRC_ADDR,
            HashField::DstAddr => HashType::DST_ADDR,
            HashField::SrcPort => HashType::SRC_PORT,
            HashField::DstPort => HashType::DST_PORT,
            HashField::Protocol => HashType::PROTOCOL,
        }
    }
}

pub fn hash_type_of(fields: &[HashField]) -> HashType {
    fields.iter().fold(HashType::empty(), |acc, f| acc | f.flag())
}

fn four_tuple_fields() -> Vec<HashField> {
    vec![HashField::SrcAddr, HashField::DstAddr, HashField::SrcPort, HashField::DstPort]
}

fn all_fields() -> Vec<HashField> {
    let mut v = four_tuple_fields();
    v.push(HashField::Protocol);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostSection {
    pub service_rate_pps: f64,
    pub ack_every: u32,
    pub recv_batch: usize,
    pub user_work_us: f64,
}

impl Default for HostSection {
    fn default() -> Self {
        let d = HostConfig::default();
        HostSection {
            service_rate_pps: d.service_rate_pps,
            ack_every: d.ack_every,
            recv_batch: d.recv_batch,
            user_work_us: d.user_work.as_secs_f64() * 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Steering {
    /// Masked hash bits index this queue list (length a power of two).
    Indirection { table: Vec<u16> },
    /// Hash modulo the queue count.
    DirectMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NicSection {
    pub mode: NicMode,
    pub ring_capacity: usize,
    pub latency_accounting: bool,
    pub link_latency_us: f64,
    pub steering: Steering,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rss_key: Option<String>,
    pub hash_fields: Vec<HashField>,
}

impl Default for NicSection {
    fn default() -> Self {
        NicSection {
            mode: NicMode::Atfn,
            ring_capacity: 256,
            latency_accounting: false,
            link_latency_us: 10.0,
            steering: Steering::Indirection { table: vec![0, 1] },
            rss_key: None,
            hash_fields: four_tuple_fields(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTableSection {
    pub num_buckets: usize,
    pub max_list_size: usize,
    pub max_entries: usize,
    pub t_timer_us: f64,
    pub t_delete_ms: f64,
    pub t_delete_pressure_ms: f64,
    pub pressure_threshold: f64,
    pub age_interval_ms: f64,
    pub bucket_fields: Vec<HashField>,
}

impl Default for FlowTableSection {
    fn default() -> Self {
        FlowTableSection {
            num_buckets: 256,
            max_list_size: 6,
            max_entries: 10_000,
            t_timer_us: 100.0,
            t_delete_ms: 10_000.0,
            t_delete_pressure_ms: 1_000.0,
            pressure_threshold: 0.9,
            age_interval_ms: 100.0,
            bucket_fields: all_fields(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Pinned,
    PeakPerformance,
    PowerSaving,
    Cpuset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub mode: SchedulerKind,
    pub tick_ms: f64,
    /// Cores of the cpuset partition; used by `cpuset` only.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub partition: Vec<CoreId>,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        SchedulerSection {
            mode: SchedulerKind::Pinned,
            tick_ms: 1.0,
            partition: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortMode {
    Sequential,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficSection {
    /// Total streams, spread round-robin over `ports`.
    pub streams: usize,
    pub ports: Vec<u16>,
    pub packet_bytes: u32,
    /// Framing overhead added to each packet on the wire.
    pub wire_overhead_bytes: u32,
    pub link_gbps: f64,
    /// Fraction of link capacity offered, split equally among streams.
    pub offered_load: f64,
    /// Packets sent back to back per train.
    pub burst: u32,
    pub sender_addr: IpAddr,
    pub receiver_addr: IpAddr,
    pub ephemeral_ports: PortMode,
    /// Whether applications call receive at all.
    pub receive: bool,
    /// Connection opens are spread uniformly over this window.
    pub start_spread_ms: f64,
}

impl Default for TrafficSection {
    fn default() -> Self {
        TrafficSection {
            streams: 40,
            ports: vec![5001, 6001],
            packet_bytes: 1500,
            wire_overhead_bytes: 38,
            link_gbps: 20.0,
            offered_load: 0.9,
            burst: 2,
            sender_addr: IpAddr::V4(Ipv4Addr::new(192, 168, 1, 1)),
            receiver_addr: IpAddr::V4(Ipv4Addr::new(192, 168, 1, 2)),
            ephemeral_ports: PortMode::Sequential,
            receive: true,
            start_spread_ms: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementRule {
    pub port: u16,
    /// One core pins the application; several leave it free to migrate
    /// among them.
    pub cores: Vec<CoreId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub total_streams: Vec<usize>,
    pub max_list_size: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    /// Scripted worst-case migration; ring capacity and service rate come
    /// from the `nic` and `host` sections.
    Fig8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration_ms: f64,
    /// Deliveries before this instant are excluded from affinity and
    /// contention scores.
    #[serde(default)]
    pub warmup_ms: f64,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub host: HostSection,
    #[serde(default)]
    pub nic: NicSection,
    #[serde(default)]
    pub flow_table: FlowTableSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub traffic: TrafficSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub placement: Vec<PlacementRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<ScriptKind>,
}

fn ms(v: f64) -> Duration {
    Duration::from_nanos((v * 1e6).round() as u64)
}

fn us(v: f64) -> Duration {
    Duration::from_nanos((v * 1e3).round() as u64)
}

fn non_negative(name: &str, v: f64) -> Result<(), WorkloadError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        invalid(format!("{name} must be a finite non-negative number, got {v}"))
    }
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            version: SCENARIO_VERSION,
            name: String::new(),
            seed: 1,
            duration_ms: 50.0,
            warmup_ms: 5.0,
            topology: Topology::default(),
            host: HostSection::default(),
            nic: NicSection::default(),
            flow_table: FlowTableSection::default(),
            scheduler: SchedulerSection::default(),
            traffic: TrafficSection::default(),
            placement: Vec::new(),
            sweep: None,
            script: None,
        }
    }
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self, WorkloadError> {
        let sc: Scenario = toml::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml_string(&self) -> Result<String, WorkloadError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        let text = std::fs::read_to_string(path).map_err(|source| WorkloadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorkloadError> {
        let text = self.to_toml_string()?;
        std::fs::write(path, text).map_err(|source| WorkloadError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn duration(&self) -> Duration {
        ms(self.duration_ms)
    }

    pub fn warmup(&self) -> Duration {
        ms(self.warmup_ms)
    }

    pub fn scheduler_tick(&self) -> Duration {
        ms(self.scheduler.tick_ms)
    }

    pub fn age_interval(&self) -> Duration {
        ms(self.flow_table.age_interval_ms)
    }

    pub fn t_timer(&self) -> Duration {
        us(self.flow_table.t_timer_us)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.version != SCENARIO_VERSION {
            return invalid(format!(
                "unsupported scenario version {} (expected {SCENARIO_VERSION})",
                self.version
            ));
        }
        non_negative("duration_ms", self.duration_ms)?;
        non_negative("warmup_ms", self.warmup_ms)?;
        non_negative("host.user_work_us", self.host.user_work_us)?;
        non_negative("nic.link_latency_us", self.nic.link_latency_us)?;
        non_negative("flow_table.t_timer_us", self.flow_table.t_timer_us)?;
        non_negative("flow_table.t_delete_ms", self.flow_table.t_delete_ms)?;
        non_negative("flow_table.t_delete_pressure_ms", self.flow_table.t_delete_pressure_ms)?;
        non_negative("traffic.start_spread_ms", self.traffic.start_spread_ms)?;
        if !(self.scheduler.tick_ms.is_finite() && self.scheduler.tick_ms > 0.0) {
            return invalid("scheduler.tick_ms must be positive");
        }
        if !(self.flow_table.age_interval_ms.is_finite() && self.flow_table.age_interval_ms > 0.0) {
            return invalid("flow_table.age_interval_ms must be positive");
        }
        let t = &self.traffic;
        if self.script.is_none() {
            if t.streams == 0 {
                return invalid("traffic.streams must be at least 1");
            }
            if t.ports.is_empty() {
                return invalid("traffic.ports must not be empty");
            }
        }
        if t.packet_bytes == 0 || t.burst == 0 {
            return invalid("traffic.packet_bytes and traffic.burst must be positive");
        }
        if !(t.link_gbps.is_finite() && t.link_gbps > 0.0) {
            return invalid("traffic.link_gbps must be positive");
        }
        if !(t.offered_load.is_finite() && t.offered_load > 0.0) {
            return invalid("traffic.offered_load must be positive");
        }
        let cores = self.topology.num_cores();
        for rule in &self.placement {
            if rule.cores.is_empty() {
                return invalid(format!("placement for port {} lists no cores", rule.port));
            }
            if let Some(c) = rule.cores.iter().find(|&&c| c >= cores) {
                return invalid(format!("placement for port {} names core {c} of {cores}", rule.port));
            }
        }
        if self.scheduler.mode == SchedulerKind::Cpuset
            && (self.scheduler.partition.is_empty() || self.scheduler.partition.iter().any(|&c| c >= cores))
        {
            return invalid("scheduler.partition must list existing cores");
        }
        if let Some(sw) = &self.sweep {
            if sw.total_streams.is_empty() || sw.max_list_size.is_empty() {
                return invalid("sweep lists must not be empty");
            }
        }
        if self.script == Some(ScriptKind::Fig8) && cores < 2 {
            return invalid("the fig8 script needs at least two cores");
        }
        self.host_config()
            .and_then(|h| crate::host::Host::new(h).map_err(|e| WorkloadError::Invalid(e.to_string())))?;
        self.flow_table_config()
            .validate()
            .map_err(|e| WorkloadError::Invalid(e.to_string()))?;
        self.rss_engine()?;
        Ok(())
    }

    pub fn host_config(&self) -> Result<HostConfig, WorkloadError> {
        Ok(HostConfig {
            topology: self.topology,
            service_rate_pps: self.host.service_rate_pps,
            ack_every: self.host.ack_every,
            recv_batch: self.host.recv_batch,
            user_work: us(self.host.user_work_us),
        })
    }

    pub fn nic_config(&self) -> NicConfig {
        NicConfig {
            num_queues: self.topology.num_cores(),
            ring_capacity: self.nic.ring_capacity,
            mode: self.nic.mode,
            latency_accounting: self.nic.latency_accounting,
            link_latency: us(self.nic.link_latency_us),
        }
    }

    pub fn flow_table_config(&self) -> FlowTableConfig {
        let f = &self.flow_table;
        FlowTableConfig {
            num_buckets: f.num_buckets,
            max_list_size: f.max_list_size,
            max_entries: f.max_entries,
            t_timer: us(f.t_timer_us),
            t_delete: ms(f.t_delete_ms),
            t_delete_pressure: ms(f.t_delete_pressure_ms),
            pressure_threshold: f.pressure_threshold,
            bucket_fields: hash_type_of(&f.bucket_fields),
        }
    }

    pub fn rss_engine(&self) -> Result<RssEngine, WorkloadError> {
        let n = self.topology.num_cores();
        let key = match &self.nic.rss_key {
            Some(hex) => RssKey::from_hex(hex).map_err(|e| WorkloadError::Invalid(e.to_string()))?,
            None => RssKey::default(),
        };
        let mapping = match &self.nic.steering {
            Steering::Indirection { table } => QueueMapping::Indirection(
                IndirectionTable::new(table.clone(), n).map_err(|e| WorkloadError::Invalid(e.to_string()))?,
            ),
            Steering::DirectMap => QueueMapping::DirectMap,
        };
        RssEngine::new(key, hash_type_of(&self.nic.hash_fields), mapping, n)
            .map_err(|e| WorkloadError::Invalid(e.to_string()))
    }

    pub fn scheduler_mode(&self) -> SchedulerMode {
        match self.scheduler.mode {
            SchedulerKind::Pinned => SchedulerMode::Pinned,
            SchedulerKind::PeakPerformance => SchedulerMode::PeakPerformance,
            SchedulerKind::PowerSaving => SchedulerMode::PowerSaving,
            SchedulerKind::Cpuset => SchedulerMode::Cpuset {
                partition: self.scheduler.partition.clone(),
            },
        }
    }

    /// Wire time of one data packet.
    pub fn wire_time(&self, bytes: u32) -> Duration {
        let bits = f64::from(bytes + self.traffic.wire_overhead_bytes) * 8.0;
        Duration::from_nanos((bits / self.traffic.link_gbps).round() as u64)
    }

    /// Mean gap between consecutive packets of one stream.
    pub fn stream_interval(&self) -> Duration {
        let t = &self.traffic;
        let wire_bits = f64::from(t.packet_bytes + t.wire_overhead_bytes) * 8.0;
        let per_stream_bps = t.offered_load * t.link_gbps * 1e9 / t.streams.max(1) as f64;
        Duration::from_nanos((wire_bits / per_stream_bps * 1e9).round() as u64)
    }

    /// The same scenario at one point of its sweep.
    pub fn at_sweep_point(&self, total_streams: usize, max_list_size: usize) -> Scenario {
        let mut s = self.clone();
        s.traffic.streams = total_streams;
        s.flow_table.max_list_size = max_list_size;
        s.sweep = None;
        s
    }
}

/// One generated TCP stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSpec {
    pub index: usize,
    /// Receive-direction key (sender to receiver).
    pub key: FlowKey,
    pub pinning: Pinning,
    pub initial_core: CoreId,
    /// When the SYN leaves the sender.
    pub open_at: SimTime,
}

/// Builds the stream set: unique source ports, app placement and open
/// times. Ports come from 32768 upward, or a seeded uniform sample of the
/// ephemeral range.
pub fn spawn_streams(sc: &Scenario, rng: &mut SimRng) -> Result<Vec<StreamSpec>, WorkloadError> {
    let t = &sc.traffic;
    let n = t.streams;
    let ports: Vec<u16> = match t.ephemeral_ports {
        PortMode::Sequential => {
            let available = usize::from(u16::MAX - EPHEMERAL_LOW) + 1;
            if n > available {
                return Err(WorkloadError::PortsExhausted { wanted: n, available });
            }
            (0..n).map(|i| EPHEMERAL_LOW + i as u16).collect()
        }
        PortMode::Random => {
            let available = usize::from(EPHEMERAL_HIGH - EPHEMERAL_LOW);
            if n > available {
                return Err(WorkloadError::PortsExhausted { wanted: n, available });
            }
            rand::seq::index::sample(rng, available, n)
                .into_iter()
                .map(|i| EPHEMERAL_LOW + i as u16)
                .collect()
        }
    };
    let mut seen = HashSet::with_capacity(n);
    if let Some(dup) = ports.iter().find(|&&p| !seen.insert(p)) {
        return Err(WorkloadError::DuplicatePort(*dup));
    }
    let all: Vec<CoreId> = (0..sc.topology.num_cores()).collect();
    let spread = ms(t.start_spread_ms).as_nanos() as u64;
    let mut per_port_count = vec![0usize; t.ports.len()];
    let mut out = Vec::with_capacity(n);
    for (i, &sport) in ports.iter().enumerate() {
        let slot = i % t.ports.len();
        let dport = t.ports[slot];
        let cores = sc
            .placement
            .iter()
            .find(|r| r.port == dport)
            .map(|r| r.cores.clone())
            .unwrap_or_else(|| all.clone());
        let nth = per_port_count[slot];
        per_port_count[slot] += 1;
        let initial_core = cores[nth % cores.len()];
        let pinning = if cores.len() == 1 {
            Pinning::Pinned(cores[0])
        } else {
            Pinning::Free(cores)
        };
        let open_at = SimTime::from_nanos(if spread == 0 { 0 } else { rng.gen_range(0..spread) });
        out.push(StreamSpec {
            index: i,
            key: FlowKey::tcp(t.sender_addr, sport, t.receiver_addr, dport),
            pinning,
            initial_core,
            open_at,
        });
    }
    Ok(out)
}

/// Sender-side state of one stream.
#[derive(Debug, Clone)]
pub struct StreamSource {
    pub key: FlowKey,
    next_seq: u64,
    pub established: bool,
}

impl StreamSource {
    pub fn new(key: FlowKey) -> Self {
        StreamSource {
            key,
            next_seq: 0,
            established: false,
        }
    }

    /// Data packets sent so far.
    pub fn sent(&self) -> u64 {
        self.next_seq
    }

    pub fn next_data(&mut self, id: u64, bytes: u32, now: SimTime) -> Packet {
        let seq = self.next_seq;
        self.next_seq += 1;
        Packet {
            id,
            key: self.key,
            direction: Direction::Rx,
            kind: PacketKind::Data,
            seq,
            arrival: now,
            size_bytes: bytes,
        }
    }

    pub fn control(&self, id: u64, kind: PacketKind, now: SimTime) -> Packet {
        Packet {
            id,
            key: self.key,
            direction: Direction::Rx,
            kind,
            seq: 0,
            arrival: now,
            size_bytes: CONTROL_BYTES,
        }
    }
}

/// Serialized sender link: one packet on the wire at a time.
#[derive(Debug, Clone)]
pub struct Link {
    free_at: SimTime,
    latency: Duration,
}

impl Link {
    pub fn new(latency: Duration) -> Self {
        Link {
            free_at: SimTime::ZERO,
            latency,
        }
    }

    /// Sends at `now` (or when the wire frees up); returns the arrival time
    /// at the receiver NIC.
    pub fn send(&mut self, now: SimTime, wire_time: Duration) -> SimTime {
        let done = now.max(self.free_at) + wire_time;
        self.free_at = done;
        done + self.latency
    }
}

/// Multiplier for a jittered train gap, uniform in [0.5, 1.5).
pub fn jitter(rng: &mut SimRng) -> f64 {
    rng.gen_range(0.5..1.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptAction {
    Arrive(Packet),
    Descriptor(TransmitDescriptor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptStep {
    pub at: SimTime,
    pub action: ScriptAction,
}

/// Worst-case migration: the old queue is full when the victim's
/// descriptor moves it to another core.
#[derive(Debug, Clone, PartialEq)]
pub struct Fig8Script {
    pub victim: FlowKey,
    pub filler: FlowKey,
    pub old_core: CoreId,
    pub new_core: CoreId,
    pub migrate_at: SimTime,
    /// Smallest hold that keeps the victim in order.
    pub safe_t_timer: Duration,
    pub steps: Vec<ScriptStep>,
}

impl Fig8Script {
    /// Flows that must exist on `old_core` before the script starts.
    pub fn preinstalled(&self) -> [(FlowKey, CoreId); 2] {
        [(self.victim, self.old_core), (self.filler, self.old_core)]
    }

    pub fn victim_seq(&self) -> u64 {
        VICTIM_SEQ
    }
}

const EPSILON: Duration = Duration::from_nanos(1);
const VICTIM_SEQ: u64 = 1;

/// Builds the scripted migration for ring capacity `d` and per-core service
/// rate `r_service`: `d - 1` filler packets at T-2ε, victim packet S at
/// T-ε, the descriptor moving the victim to core 1 at T, and S+1 at T+ε.
pub fn adversarial_fig8_schedule(d: usize, r_service: f64) -> Result<Fig8Script, WorkloadError> {
    if d < 2 {
        return invalid(format!("ring capacity must be at least 2, got {d}"));
    }
    if !(r_service.is_finite() && r_service > 0.0) {
        return invalid("service rate must be positive");
    }
    let sender = IpAddr::V4(Ipv4Addr::new(192, 168, 1, 1));
    let receiver = IpAddr::V4(Ipv4Addr::new(192, 168, 1, 2));
    let victim = FlowKey::tcp(sender, EPHEMERAL_LOW, receiver, 5001);
    let filler = FlowKey::tcp(sender, EPHEMERAL_LOW + 1, receiver, 5001);
    let migrate_at = SimTime::from_nanos(1_000);
    let mut steps = Vec::with_capacity(d + 2);
    let mut id = 0u64;
    let mut data = |key: FlowKey, seq: u64, at: SimTime| {
        id += 1;
        ScriptStep {
            at,
            action: ScriptAction::Arrive(Packet {
                id,
                key,
                direction: Direction::Rx,
                kind: PacketKind::Data,
                seq,
                arrival: at,
                size_bytes: 1500,
            }),
        }
    };
    let fill_at = migrate_at - EPSILON - EPSILON;
    for seq in 0..(d - 1) as u64 {
        steps.push(data(filler, seq, fill_at));
    }
    steps.push(data(victim, VICTIM_SEQ, migrate_at - EPSILON));
    steps.push(ScriptStep {
        at: migrate_at,
        action: ScriptAction::Descriptor(TransmitDescriptor {
            key: victim.reversed(),
            core_id: 1,
        }),
    });
    steps.push(data(victim, VICTIM_SEQ + 1, migrate_at + EPSILON));
    let safe_t_timer = service_time(r_service) * (d as u32 - 1);
    Ok(Fig8Script {
        victim,
        filler,
        old_core: 0,
        new_core: 1,
        migrate_at,
        safe_t_timer,
        steps,
    })
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::kernel::rng_from_seed;

    #[test]
    fn forty_streams_forty_keys() {
        let sc = Scenario::default();
        let streams = spawn_streams(&sc, &mut rng_from_seed(1)).unwrap();
        assert_eq!(streams.len(), 40);
        let keys: HashSet<_> = streams.iter().map(|s| s.key).collect();
        assert_eq!(keys.len(), 40);
        assert_eq!(streams.iter().filter(|s| s.key.dst_port == 5001).count(), 20);
    }

    #[test]
    fn two_streams_have_distinct_ports() {
        let mut sc = Scenario::default();
        sc.traffic.streams = 2;
        let s = spawn_streams(&sc, &mut rng_from_seed(3)).unwrap();
        assert_ne!(s[0].key.src_port, s[1].key.src_port);
        assert_ne!(s[0].key, s[1].key);
        assert_eq!(s[0].key.src_port, EPHEMERAL_LOW);
    }

    #[test]
    fn random_ports_are_unique_and_in_range() {
        let mut sc = Scenario::default();
        sc.traffic.streams = 2000;
        sc.traffic.ephemeral_ports = PortMode::Random;
        let s = spawn_streams(&sc, &mut rng_from_seed(9)).unwrap();
        let ports: HashSet<_> = s.iter().map(|s| s.key.src_port).collect();
        assert_eq!(ports.len(), 2000);
        assert!(ports.iter().all(|&p| (EPHEMERAL_LOW..EPHEMERAL_HIGH).contains(&p)));
    }

    #[test]
    fn too_many_streams_is_an_error() {
        let mut sc = Scenario::default();
        sc.traffic.streams = 40_000;
        assert!(matches!(
            spawn_streams(&sc, &mut rng_from_seed(1)),
            Err(WorkloadError::PortsExhausted { .. })
        ));
    }

    #[test]
    fn placement_rules_pin_or_free() {
        let mut sc = Scenario::default();
        sc.placement = vec![
            PlacementRule { port: 5001, cores: vec![0] },
            PlacementRule {
                port: 6001,
                cores: vec![0, 2],
            },
        ];
        let s = spawn_streams(&sc, &mut rng_from_seed(1)).unwrap();
        assert_eq!(s[0].pinning, Pinning::Pinned(0));
        assert_eq!(s[1].pinning, Pinning::Free(vec![0, 2]));
        assert_eq!((s[1].initial_core, s[3].initial_core), (0, 2));
    }

    #[test]
    fn scenario_round_trips() {
        let mut sc = Scenario::default();
        sc.name = "rt".into();
        sc.nic.rss_key = Some(RssKey::default().to_hex());
        sc.placement = vec![PlacementRule { port: 5001, cores: vec![1] }];
        sc.sweep = Some(Sweep {
            total_streams: vec![40, 200],
            max_list_size: vec![1, 6],
        });
        sc.scheduler = SchedulerSection {
            mode: SchedulerKind::Cpuset,
            tick_ms: 2.5,
            partition: vec![2, 3],
        };
        let text = sc.to_toml_string().unwrap();
        let back = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(back, sc);
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let sc = Scenario::from_toml_str("version = 1\nseed = 7\nduration_ms = 10\n").unwrap();
        assert_eq!(sc.seed, 7);
        assert_eq!(sc.traffic.streams, 40);
        assert_eq!(sc.t_timer(), Duration::from_micros(100));
    }

    #[test]
    fn rejects_bad_values() {
        let neg = "version = 1\nseed = 1\nduration_ms = 10\n[flow_table]\nt_timer_us = -1\n";
        assert!(matches!(Scenario::from_toml_str(neg), Err(WorkloadError::Invalid(_))));
        let unknown = "version = 1\nseed = 1\nduration_ms = 10\nbogus = 3\n";
        assert!(matches!(Scenario::from_toml_str(unknown), Err(WorkloadError::Parse(_))));
        let version = "version = 2\nseed = 1\nduration_ms = 10\n";
        assert!(Scenario::from_toml_str(version).is_err());
        let zero = "version = 1\nseed = 1\nduration_ms = 10\n[traffic]\nstreams = 0\n";
        assert!(Scenario::from_toml_str(zero).is_err());
        let core = "version = 1\nseed = 1\nduration_ms = 10\n[[placement]]\nport = 5001\ncores = [9]\n";
        assert!(Scenario::from_toml_str(core).is_err());
    }

    #[test]
    fn stream_rate_splits_the_link() {
        let sc = Scenario::default();
        // 1538 B * 8 / (0.9 * 20 Gb/s / 40) = 27.342 us
        assert_eq!(sc.stream_interval(), Duration::from_nanos(27_342));
        assert_eq!(sc.wire_time(1500), Duration::from_nanos(615));
    }

    #[test]
    fn link_serializes_packets() {
        let mut l = Link::new(Duration::from_nanos(100));
        let w = Duration::from_nanos(10);
        assert_eq!(l.send(SimTime::ZERO, w), SimTime::from_nanos(110));
        assert_eq!(l.send(SimTime::ZERO, w), SimTime::from_nanos(120));
        assert_eq!(l.send(SimTime::from_nanos(50), w), SimTime::from_nanos(160));
    }

    #[test]
    fn stream_sequence_is_gapless() {
        let mut s = StreamSource::new(FlowKey::default());
        let seqs: Vec<u64> = (0..5).map(|i| s.next_data(i, 1500, SimTime::ZERO).seq).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.sent(), 5);
    }

    #[test]
    fn fig8_minimal_script() {
        let s = adversarial_fig8_schedule(2, 3e6).unwrap();
        let arrivals: Vec<_> = s
            .steps
            .iter()
            .filter_map(|st| match st.action {
                ScriptAction::Arrive(p) => Some((st.at.as_nanos(), p.key, p.seq)),
                ScriptAction::Descriptor(_) => None,
            })
            .collect();
        assert_eq!(
            arrivals,
            vec![(998, s.filler, 0), (999, s.victim, 1), (1001, s.victim, 2)]
        );
        assert_eq!(s.safe_t_timer, Duration::from_nanos(334));
        assert!(adversarial_fig8_schedule(1, 3e6).is_err());
    }

    #[test]
    fn fig8_full_ring() {
        let s = adversarial_fig8_schedule(256, 3e6).unwrap();
        assert_eq!(s.steps.len(), 255 + 3);
        assert_eq!(s.safe_t_timer, Duration::from_nanos(255 * 334));
        assert!(s.safe_t_timer <= Duration::from_micros(100));
    }
}

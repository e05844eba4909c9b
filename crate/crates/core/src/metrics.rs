//! Post-run numbers: reordering, table admission, affinity, contention and
//! held-packet delay.

use std::collections::HashMap;
use std::hash::Hash;
use std::time::Duration;

use serde::Serialize;

use crate::flow_table::FlowTableStats;
use crate::host::{contention_proxy, ContentionProxies, Context, CoreId, Delivery, PlacementTimeline, SocketId};
use crate::kernel::SimTime;
use crate::simulation::{HeldRecord, RunOutput};

/// Fraction of delivered packets whose sequence number is below one
/// already delivered for the same flow. Takes `(flow, seq)` in delivery
/// order.
pub fn reordering_ratio<K: Hash + Eq>(log: impl IntoIterator<Item = (K, u64)>) -> f64 {
    let (late, total) = count_reordered(log);
    if total == 0 {
        0.0
    } else {
        late as f64 / total as f64
    }
}

/// `(out_of_order, total)` for the same definition as [`reordering_ratio`].
pub fn count_reordered<K: Hash + Eq>(log: impl IntoIterator<Item = (K, u64)>) -> (u64, u64) {
    let mut highest: HashMap<K, u64> = HashMap::new();
    let mut late = 0;
    let mut total = 0;
    for (flow, seq) in log {
        total += 1;
        match highest.get_mut(&flow) {
            Some(max) if seq < *max => late += 1,
            Some(max) => *max = seq,
            None => {
                highest.insert(flow, seq);
            }
        }
    }
    (late, total)
}

/// Admitted flows over flows that completed a handshake.
pub fn admitted_fraction(stats: &FlowTableStats, total_flows: usize) -> f64 {
    if total_flows == 0 {
        return 0.0;
    }
    (stats.admitted.min(total_flows as u64)) as f64 / total_flows as f64
}

/// `(flow_affinity, data_affinity)` over deliveries at or after `since`.
///
/// Flow affinity is the share of each flow's packets processed on that
/// flow's most used core, averaged over flows. Data affinity is the share of
/// packets processed on the core their application occupied at that moment.
/// Both are 1.0 when nothing qualifies.
pub fn affinity_scores(deliveries: &[Delivery], timeline: &PlacementTimeline, since: SimTime) -> (f64, f64) {
    let mut per_flow: HashMap<SocketId, HashMap<CoreId, u64>> = HashMap::new();
    let mut on_app = 0u64;
    let mut total = 0u64;
    for d in deliveries.iter().filter(|d| d.at >= since) {
        *per_flow.entry(d.socket).or_default().entry(d.core).or_default() += 1;
        total += 1;
        if timeline.core_at(d.pid, d.at) == d.core {
            on_app += 1;
        }
    }
    if total == 0 {
        return (1.0, 1.0);
    }
    let mut flows: Vec<_> = per_flow.into_iter().collect();
    flows.sort_by_key(|(s, _)| *s);
    let flow_affinity = flows
        .iter()
        .map(|(_, cores)| {
            let n: u64 = cores.values().sum();
            let modal = cores.values().copied().max().unwrap_or(0);
            modal as f64 / n as f64
        })
        .sum::<f64>()
        / flows.len() as f64;
    (flow_affinity, on_app as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Histogram {
    pub bin_width: Duration,
    /// `counts[i]` holds delays in `[i*w, (i+1)*w)`.
    pub counts: Vec<u64>,
    pub max: Duration,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// Delay from hold to flush for each held packet.
pub fn held_delay_histogram(records: &[HeldRecord], bin_width: Duration) -> Histogram {
    let w = bin_width.as_nanos().max(1) as u64;
    let mut counts: Vec<u64> = Vec::new();
    let mut max = Duration::ZERO;
    for r in records {
        let d = r.delay();
        max = max.max(d);
        let bin = (d.as_nanos() as u64 / w) as usize;
        if counts.len() <= bin {
            counts.resize(bin + 1, 0);
        }
        counts[bin] += 1;
    }
    Histogram {
        bin_width: Duration::from_nanos(w),
        counts,
        max,
    }
}

/// One run, flattened for reporting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub mode: String,
    pub t_timer_us: f64,
    pub max_list_size: usize,
    pub total_streams: usize,
    pub data_sent: u64,
    pub delivered: u64,
    pub delivered_interrupt: u64,
    pub delivered_process: u64,
    pub process_fraction: f64,
    pub reordered_packets: u64,
    pub reordering_ratio: f64,
    pub admitted_fraction: f64,
    pub flow_affinity: f64,
    pub data_affinity: f64,
    pub proxies: ContentionProxies,
    pub migrations: u64,
    pub transitions: u64,
    pub held_packets: u64,
    pub held_delay_max_ns: u64,
    pub held_delay_mean_ns: f64,
    pub peak_held_bytes: u64,
    pub peak_table_memory: u64,
    pub drops: u64,
    pub events: u64,
}

impl RunReport {
    pub fn from_output(out: &RunOutput) -> Self {
        let since = out.warmup_end;
        let log = out.deliveries.iter().map(|d| (d.socket, d.seq));
        let (reordered, delivered) = count_reordered(log);
        let interrupt = out
            .deliveries
            .iter()
            .filter(|d| d.context == Context::Interrupt)
            .count() as u64;
        let (flow_affinity, data_affinity) = affinity_scores(&out.deliveries, &out.timeline, since);
        let proxies = contention_proxy(&out.deliveries, &out.timeline, &out.conflicts, &out.topology, since);
        let stats = out.table_stats.unwrap_or_default();
        let held_total: u128 = out.held.iter().map(|h| h.delay().as_nanos()).sum();
        let sc = &out.scenario;
        RunReport {
            seed: sc.seed,
            mode: sc.nic.mode.to_string(),
            t_timer_us: sc.flow_table.t_timer_us,
            max_list_size: sc.flow_table.max_list_size,
            total_streams: out.total_flows,
            data_sent: out.data_sent,
            delivered,
            delivered_interrupt: interrupt,
            delivered_process: delivered - interrupt,
            process_fraction: if delivered == 0 {
                0.0
            } else {
                (delivered - interrupt) as f64 / delivered as f64
            },
            reordered_packets: reordered,
            reordering_ratio: if delivered == 0 {
                0.0
            } else {
                reordered as f64 / delivered as f64
            },
            admitted_fraction: if out.table_stats.is_some() {
                admitted_fraction(&stats, out.total_flows)
            } else {
                0.0
            },
            flow_affinity,
            data_affinity,
            proxies,
            migrations: out.migrations.len() as u64,
            transitions: stats.transitions,
            held_packets: out.held.len() as u64,
            held_delay_max_ns: out.held.iter().map(|h| h.delay().as_nanos() as u64).max().unwrap_or(0),
            held_delay_mean_ns: if out.held.is_empty() {
                0.0
            } else {
                held_total as f64 / out.held.len() as f64
            },
            peak_held_bytes: stats.peak_held_bytes,
            peak_table_memory: out.peak_table_memory,
            drops: out.drops.len() as u64,
            events: out.events,
        }
    }

    /// Numeric metrics in report column order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let p = &self.proxies;
        vec![
            ("data_sent", self.data_sent as f64),
            ("delivered", self.delivered as f64),
            ("delivered_interrupt", self.delivered_interrupt as f64),
            ("delivered_process", self.delivered_process as f64),
            ("process_fraction", self.process_fraction),
            ("reordered_packets", self.reordered_packets as f64),
            ("reordering_ratio", self.reordering_ratio),
            ("admitted_fraction", self.admitted_fraction),
            ("flow_affinity", self.flow_affinity),
            ("data_affinity", self.data_affinity),
            ("cross_core_packets", p.cross_core_packets as f64),
            ("cross_processor_packets", p.cross_processor_packets as f64),
            ("alternations", p.alternations as f64),
            ("lock_conflict_events", p.lock_conflict_events as f64),
            ("cross_processor_conflicts", p.cross_processor_conflicts as f64),
            ("migrations", self.migrations as f64),
            ("transitions", self.transitions as f64),
            ("held_packets", self.held_packets as f64),
            ("held_delay_max_ns", self.held_delay_max_ns as f64),
            ("held_delay_mean_ns", self.held_delay_mean_ns),
            ("peak_held_bytes", self.peak_held_bytes as f64),
            ("peak_table_memory", self.peak_table_memory as f64),
            ("drops", self.drops as f64),
            ("events", self.events as f64),
        ]
    }
}

/// Which way a metric should move to count as an improvement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Higher,
    Lower,
    Neutral,
}

pub fn better_direction(metric: &str) -> Better {
    match metric {
        "process_fraction" | "admitted_fraction" | "flow_affinity" | "data_affinity" | "delivered" => Better::Higher,
        "reordered_packets"
        | "reordering_ratio"
        | "cross_core_packets"
        | "cross_processor_packets"
        | "alternations"
        | "lock_conflict_events"
        | "cross_processor_conflicts"
        | "held_delay_max_ns"
        | "held_delay_mean_ns"
        | "peak_held_bytes"
        | "peak_table_memory"
        | "drops" => Better::Lower,
        _ => Better::Neutral,
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for n < 2).
pub fn mean_stddev(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::Migration;
    use crate::packet::FlowKey;

    #[test]
    fn in_order_log_has_zero_ratio() {
        assert_eq!(reordering_ratio((0..10u64).map(|s| (1, s))), 0.0);
        assert_eq!(reordering_ratio(std::iter::empty::<(u8, u64)>()), 0.0);
    }

    #[test]
    fn one_inversion_in_ten() {
        let seqs = [0u64, 1, 3, 2, 4, 5, 6, 7, 8, 9];
        assert!((reordering_ratio(seqs.iter().map(|&s| (0, s))) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn flows_are_independent() {
        let log = [(1, 5u64), (2, 0), (2, 1), (1, 6)];
        assert_eq!(reordering_ratio(log), 0.0);
    }

    #[test]
    fn admitted_fraction_bounds() {
        let stats = FlowTableStats {
            admitted: 40,
            ..Default::default()
        };
        assert_eq!(admitted_fraction(&stats, 40), 1.0);
        assert_eq!(admitted_fraction(&stats, 80), 0.5);
        assert_eq!(admitted_fraction(&stats, 0), 0.0);
    }

    fn delivery(socket: usize, core: usize, at: u64) -> Delivery {
        Delivery {
            packet_id: at,
            socket,
            pid: socket,
            seq: at,
            at: SimTime::from_nanos(at),
            core,
            context: Context::Interrupt,
        }
    }

    #[test]
    fn affinity_single_core_per_flow() {
        let log: Vec<_> = (0..10).map(|i| delivery(0, 1, i)).collect();
        let tl = PlacementTimeline::new(&[1], &[]);
        assert_eq!(affinity_scores(&log, &tl, SimTime::ZERO), (1.0, 1.0));
    }

    #[test]
    fn affinity_alternating_cores() {
        let log: Vec<_> = (0..10).map(|i| delivery(0, (i % 2) as usize, i)).collect();
        let tl = PlacementTimeline::new(&[0], &[]);
        let (flow, data) = affinity_scores(&log, &tl, SimTime::ZERO);
        assert_eq!(flow, 0.5);
        assert_eq!(data, 0.5);
    }

    #[test]
    fn affinity_follows_migrations_and_warmup() {
        let log: Vec<_> = (0..10).map(|i| delivery(0, if i < 5 { 0 } else { 1 }, i)).collect();
        let tl = PlacementTimeline::new(
            &[0],
            &[Migration {
                at: SimTime::from_nanos(5),
                pid: 0,
                from: 0,
                to: 1,
            }],
        );
        let (flow, data) = affinity_scores(&log, &tl, SimTime::ZERO);
        assert_eq!((flow, data), (0.5, 1.0));
        assert_eq!(affinity_scores(&log, &tl, SimTime::from_nanos(5)), (1.0, 1.0));
    }

    #[test]
    fn histogram_mass_and_max() {
        assert!(held_delay_histogram(&[], Duration::from_micros(10)).is_empty());
        let rec = |held: u64, flushed: u64| HeldRecord {
            key: FlowKey::default(),
            packet_id: 0,
            held_at: SimTime::from_nanos(held),
            flushed_at: SimTime::from_nanos(flushed),
        };
        let h = held_delay_histogram(&[rec(0, 5), rec(0, 15), rec(3, 13)], Duration::from_nanos(10));
        assert_eq!(h.counts, vec![1, 2]);
        assert_eq!(h.total(), 3);
        assert_eq!(h.max, Duration::from_nanos(15));
    }

    #[test]
    fn sample_statistics() {
        assert_eq!(mean_stddev(&[]), (0.0, 0.0));
        assert_eq!(mean_stddev(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_stddev(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - 1.2909944487358056).abs() < 1e-12);
    }
}

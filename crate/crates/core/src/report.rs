//! CSV and text outputs, aggregation across seeds, and run comparison.
//!
//! Every CSV starts with a `schema_version` column. Files:
//! * `runs.csv`: one row per run with every metric of [`RunReport::metrics`].
//! * `queues.csv`: per-run, per-queue ring counters.
//! * `aggregate.csv`: long format, one row per (sweep point, metric) with
//!   mean and sample standard deviation across seeds.
//! * `summary.txt`: the headline numbers for people.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::host::{SchedulerMode, Topology};
use crate::metrics::{better_direction, mean_stddev, Better, RunReport};
use crate::nic::QueueStats;
use crate::workload::{HostSection, PlacementRule, Scenario, ScriptKind, Sweep, TrafficSection};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path} uses schema version {found}, expected {SCHEMA_VERSION}")]
    Schema { path: String, found: u32 },
    #[error("scenario hash mismatch: {a} vs {b} (runs of different workloads)")]
    ScenarioMismatch { a: String, b: String },
    #[error("{0} has no aggregate rows")]
    Empty(String),
}

#[derive(Serialize)]
struct WorkloadView<'a> {
    version: u32,
    duration_ms: f64,
    warmup_ms: f64,
    topology: &'a Topology,
    host: &'a HostSection,
    scheduler: SchedulerMode,
    traffic: &'a TrafficSection,
    placement: &'a [PlacementRule],
    sweep: &'a Option<Sweep>,
    script: &'a Option<ScriptKind>,
    ring_capacity: usize,
    link_latency_us: f64,
}

/// SHA-256 over the parts of a scenario that define the workload. Steering
/// mode, flow-table parameters and seed are excluded so runs differing only
/// in those can be compared.
pub fn scenario_hash(sc: &Scenario) -> String {
    let view = WorkloadView {
        version: sc.version,
        duration_ms: sc.duration_ms,
        warmup_ms: sc.warmup_ms,
        topology: &sc.topology,
        host: &sc.host,
        scheduler: sc.scheduler_mode(),
        traffic: &sc.traffic,
        placement: &sc.placement,
        sweep: &sc.sweep,
        script: &sc.script,
        ring_capacity: sc.nic.ring_capacity,
        link_latency_us: sc.nic.link_latency_us,
    };
    let text = toml::to_string(&view).expect("workload view serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// One finished run and its per-queue counters.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub report: RunReport,
    pub queues: Vec<QueueStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub schema_version: u32,
    pub scenario_hash: String,
    pub total_streams: usize,
    pub max_list_size: usize,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub stddev: f64,
}

/// Groups runs by sweep point (in first-seen order) and summarizes every
/// metric.
pub fn aggregate(hash: &str, runs: &[RunRecord]) -> Vec<AggregateRow> {
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut groups: BTreeMap<(usize, usize), Vec<&RunReport>> = BTreeMap::new();
    for r in runs {
        let k = (r.report.total_streams, r.report.max_list_size);
        if !groups.contains_key(&k) {
            order.push(k);
        }
        groups.entry(k).or_default().push(&r.report);
    }
    let mut rows = Vec::new();
    for k in order {
        let reports = &groups[&k];
        let names: Vec<&str> = reports[0].metrics().iter().map(|(n, _)| *n).collect();
        for (i, name) in names.iter().enumerate() {
            let values: Vec<f64> = reports.iter().map(|r| r.metrics()[i].1).collect();
            let (mean, stddev) = mean_stddev(&values);
            rows.push(AggregateRow {
                schema_version: SCHEMA_VERSION,
                scenario_hash: hash.to_string(),
                total_streams: k.0,
                max_list_size: k.1,
                metric: name.to_string(),
                runs: values.len(),
                mean,
                stddev,
            });
        }
    }
    rows
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_runs_csv(path: &Path, hash: &str, runs: &[RunRecord]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<String> = [
        "schema_version",
        "scenario_hash",
        "seed",
        "mode",
        "t_timer_us",
        "max_list_size",
        "total_streams",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if let Some(first) = runs.first() {
        header.extend(first.report.metrics().iter().map(|(n, _)| n.to_string()));
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for r in runs {
        let rep = &r.report;
        let mut row = vec![
            SCHEMA_VERSION.to_string(),
            hash.to_string(),
            rep.seed.to_string(),
            rep.mode.clone(),
            num(rep.t_timer_us),
            rep.max_list_size.to_string(),
            rep.total_streams.to_string(),
        ];
        row.extend(rep.metrics().iter().map(|(_, v)| num(*v)));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_queues_csv(path: &Path, runs: &[RunRecord]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "schema_version",
        "seed",
        "total_streams",
        "max_list_size",
        "queue",
        "offered",
        "flushed",
        "queued",
        "dropped",
        "interrupts",
        "max_depth",
    ])
    .map_err(csv_err(path))?;
    for r in runs {
        for (q, s) in r.queues.iter().enumerate() {
            w.write_record([
                SCHEMA_VERSION.to_string(),
                r.report.seed.to_string(),
                r.report.total_streams.to_string(),
                r.report.max_list_size.to_string(),
                q.to_string(),
                s.offered.to_string(),
                s.flushed.to_string(),
                s.queued.to_string(),
                s.dropped.to_string(),
                s.interrupts.to_string(),
                s.max_depth.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>, ReportError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for row in r.deserialize() {
        let row: AggregateRow = row.map_err(csv_err(path))?;
        if row.schema_version != SCHEMA_VERSION {
            return Err(ReportError::Schema {
                path: path.display().to_string(),
                found: row.schema_version,
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

const HEADLINE: [&str; 9] = [
    "reordering_ratio",
    "admitted_fraction",
    "flow_affinity",
    "data_affinity",
    "process_fraction",
    "cross_core_packets",
    "lock_conflict_events",
    "held_delay_max_ns",
    "drops",
];

pub fn summary_text(name: &str, hash: &str, mode: &str, rows: &[AggregateRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {name}");
    let _ = writeln!(s, "scenario hash: {hash}");
    let _ = writeln!(s, "mode: {mode}");
    let mut last = None;
    for row in rows {
        let k = (row.total_streams, row.max_list_size);
        if last != Some(k) {
            let _ = writeln!(
                s,
                "\nstreams={} max_list_size={} runs={}",
                row.total_streams, row.max_list_size, row.runs
            );
            last = Some(k);
        }
        if HEADLINE.contains(&row.metric.as_str()) {
            let _ = writeln!(s, "  {:<22} {:>14.6e} ± {:.3e}", row.metric, row.mean, row.stddev);
        }
    }
    s
}

/// Writes all four outputs into `dir`, creating it if needed.
pub fn write_outputs(dir: &Path, sc: &Scenario, runs: &[RunRecord]) -> Result<Vec<AggregateRow>, ReportError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let hash = scenario_hash(sc);
    write_runs_csv(&dir.join("runs.csv"), &hash, runs)?;
    write_queues_csv(&dir.join("queues.csv"), runs)?;
    let rows = aggregate(&hash, runs);
    write_aggregate_csv(&dir.join("aggregate.csv"), &rows)?;
    let summary = summary_text(&sc.name, &hash, &sc.nic.mode.to_string(), &rows);
    let p = dir.join("summary.txt");
    std::fs::write(&p, summary).map_err(io_err(&p))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub total_streams: usize,
    pub max_list_size: usize,
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
    /// `increase`, `decrease` or `unchanged`.
    pub change: &'static str,
    /// `better`, `worse`, `same` or `n/a` for b relative to a.
    pub verdict: &'static str,
}

/// Per-metric deltas of `b` against `a`. Both must come from the same
/// workload.
pub fn compare(a: &[AggregateRow], b: &[AggregateRow]) -> Result<Vec<ComparisonRow>, ReportError> {
    let hash_of = |rows: &[AggregateRow], label: &str| {
        rows.first()
            .map(|r| r.scenario_hash.clone())
            .ok_or_else(|| ReportError::Empty(label.to_string()))
    };
    let ha = hash_of(a, "first run")?;
    let hb = hash_of(b, "second run")?;
    if ha != hb || a.iter().any(|r| r.scenario_hash != ha) || b.iter().any(|r| r.scenario_hash != hb) {
        return Err(ReportError::ScenarioMismatch { a: ha, b: hb });
    }
    let index: BTreeMap<(usize, usize, &str), f64> = b
        .iter()
        .map(|r| ((r.total_streams, r.max_list_size, r.metric.as_str()), r.mean))
        .collect();
    let mut out = Vec::new();
    for ra in a {
        let Some(&vb) = index.get(&(ra.total_streams, ra.max_list_size, ra.metric.as_str())) else {
            continue;
        };
        let delta = vb - ra.mean;
        let change = if delta > 0.0 {
            "increase"
        } else if delta < 0.0 {
            "decrease"
        } else {
            "unchanged"
        };
        let verdict = match (better_direction(&ra.metric), change) {
            (Better::Neutral, _) => "n/a",
            (_, "unchanged") => "same",
            (Better::Higher, "increase") | (Better::Lower, "decrease") => "better",
            _ => "worse",
        };
        out.push(ComparisonRow {
            total_streams: ra.total_streams,
            max_list_size: ra.max_list_size,
            metric: ra.metric.clone(),
            a: ra.mean,
            b: vb,
            delta,
            change,
            verdict,
        });
    }
    Ok(out)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

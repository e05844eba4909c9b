use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tfnsim::nic::NicMode;
use tfnsim::report::{self, RunRecord};
use tfnsim::{run_scenario, RunReport, Scenario};

#[derive(Parser)]
#[command(name = "tfnsim", version, about = "Simulate RSS and flow-table NIC steering on a multicore receiver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (every sweep point, `repeat` seeds each) and write
    /// runs.csv, queues.csv, aggregate.csv and summary.txt.
    Run(RunArgs),
    /// Per-metric deltas between two output directories (second minus
    /// first), as CSV on stdout.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(clap::Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Steering mode: rss or atfn.
    #[arg(long)]
    mode: Option<NicMode>,
    /// Transition hold time in microseconds.
    #[arg(long, allow_negative_numbers = true)]
    t_timer: Option<f64>,
    #[arg(long)]
    max_list_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated duration in milliseconds.
    #[arg(long, allow_negative_numbers = true)]
    duration: Option<f64>,
    /// Runs per sweep point, with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    repeat: u32,
    /// Output directory.
    #[arg(long, env = "TFNSIM_OUT", default_value = "tfnsim-out")]
    out: PathBuf,
}

fn load_with_overrides(args: &RunArgs) -> Result<Scenario> {
    let mut sc = Scenario::load(&args.scenario)?;
    if let Some(m) = args.mode {
        sc.nic.mode = m;
    }
    if let Some(t) = args.t_timer {
        sc.flow_table.t_timer_us = t;
    }
    if let Some(m) = args.max_list_size {
        sc.flow_table.max_list_size = m;
        if let Some(sw) = sc.sweep.as_mut() {
            sw.max_list_size = vec![m];
        }
    }
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    if let Some(d) = args.duration {
        sc.duration_ms = d;
    }
    sc.validate()?;
    Ok(sc)
}

fn jobs(sc: &Scenario, repeat: u32) -> Vec<Scenario> {
    let points: Vec<Scenario> = match &sc.sweep {
        Some(sw) => sw
            .total_streams
            .iter()
            .flat_map(|&n| sw.max_list_size.iter().map(move |&m| (n, m)))
            .map(|(n, m)| sc.at_sweep_point(n, m))
            .collect(),
        None => vec![sc.clone()],
    };
    points
        .into_iter()
        .flat_map(|p| {
            (0..u64::from(repeat)).map(move |i| {
                let mut s = p.clone();
                s.seed = p.seed.wrapping_add(i);
                s
            })
        })
        .collect()
}

/// Runs every job on a small worker pool; results keep job order.
fn run_all(jobs: &[Scenario]) -> Result<Vec<RunRecord>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let res = run_scenario(job)
                    .map(|out| RunRecord {
                        report: RunReport::from_output(&out),
                        queues: out.queue_stats.clone(),
                    })
                    .with_context(|| format!("run with seed {} failed", job.seed));
                slots.lock().expect("no worker panicked")[i] = Some(res);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let sc = load_with_overrides(args)?;
    let runs = run_all(&jobs(&sc, args.repeat))?;
    let rows = report::write_outputs(&args.out, &sc, &runs)
        .with_context(|| format!("cannot write outputs to {}", args.out.display()))?;
    print!(
        "{}",
        report::summary_text(&sc.name, &report::scenario_hash(&sc), &sc.nic.mode.to_string(), &rows)
    );
    println!("\nwrote {} runs to {}", runs.len(), args.out.display());
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path) -> Result<()> {
    let ra = report::read_aggregate_csv(&a.join("aggregate.csv"))?;
    let rb = report::read_aggregate_csv(&b.join("aggregate.csv"))?;
    let rows = report::compare(&ra, &rb)?;
    print!("{}", report::comparison_csv(&rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare { a, b } => cmd_compare(a, b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // Scenario problems (unreadable, invalid, bad override) exit 2.
            if e.chain().any(|c| c.is::<tfnsim::workload::WorkloadError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

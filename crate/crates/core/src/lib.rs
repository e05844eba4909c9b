//! Discrete-event model of a multi-queue NIC that steers flows either by a
//! Toeplitz hash (RSS) or by a per-flow table learned from transmitted
//! packets, feeding a multicore receiver host.

pub mod flow_table;
pub mod host;
pub mod kernel;
pub mod metrics;
pub mod nic;
pub mod packet;
pub mod report;
pub mod rss;
pub mod simulation;
pub mod workload;

pub use metrics::RunReport;
pub use simulation::{run_scenario, RunOutput};
pub use workload::Scenario;

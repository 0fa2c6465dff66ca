//! Day-long simulations: feeder and profile generation, scenario files,
//! the two-timescale runner, metrics, CSV output and seeded batches.

mod batch;
mod config;
mod feeder;
mod metrics;
mod output;
mod profiles;
mod runner;

use thiserror::Error;

pub use batch::{batch_config, run_batch, BatchRow, BatchSummary, STRATEGIES};
pub use config::{
    parse_clock, FaultSpec, NetworkSource, ProfileSource, ScenarioConfig, SlackSchedule, SlackSpec, SlackWindow,
};
pub use feeder::{generate_network, Feeder, FixedSite, LateralSpec, NetworkSpec, Site};
pub use metrics::{compute_metrics, Metrics, MetricsAccumulator};
pub use output::{write_metrics, write_outputs};
pub use profiles::{generate_profiles, site_seed, Profile, ProfileKind, DAY_S, MINUTE_S};
pub use runner::{run_scenario, run_scenario_file, EventRecord, Simulation, TimeSeriesResult};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file: {0}")]
    Config(String),
    #[error("network file line {line}: {msg}")]
    NetworkFile { line: usize, msg: String },
    #[error("network generator: {0}")]
    Spec(String),
    #[error("profile: {0}")]
    Profile(String),
    #[error("{0}")]
    Io(String),
    #[error("power flow did not converge at tick {tick} (mismatch {mismatch:e} p.u.)")]
    PowerFlow { tick: u64, mismatch: f64 },
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Comms(#[from] crate::comms::CommsError),
    #[error(transparent)]
    Agent(#[from] crate::agents::AgentError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<std::io::Error> for ScenarioError {
    fn from(e: std::io::Error) -> Self {
        ScenarioError::Io(e.to_string())
    }
}

//! Scenario files, the virtual/real-time scheduler, the co-simulation engine,
//! metrics and CSV artifacts.
//!
//! At equal timestamps events run grid, devices, channel deliveries, meter,
//! then reporting/estimation. Devices step in lockstep on a 1 s tick and may
//! run in parallel; every message they emit is routed through the channel in
//! device order, so a virtual-time run is a pure function of the scenario.

mod clock;
mod engine;
mod fidelity;
mod metrics;
mod output;
mod scenario;

pub use clock::{to_micros, to_secs, Micros, Pacer, Priority, Scheduler};
pub use engine::{group_baseline, run_scenario, scenario_baseline, RunResult};
pub use fidelity::{macro_vs_monte_carlo, FidelityRun};
pub use metrics::{
    compute_metrics, percentile, percentile_sorted, rms, window_rms, EstRow, GridRow, RunMetrics,
    SocRow, Traces, TrackRow,
};
pub use output::{read_traces, read_tracking, write_metrics, write_outputs};
pub use scenario::{
    DrawSpec, EstimatorSpec, FleetGroup, GridSpec, InitialSoc, Param, ReferenceSpec, Scenario,
    Sine, TimeMode,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("scenario `{scenario}`: {source}")]
    Run {
        scenario: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("series lengths differ: {0} vs {1}")]
    Misaligned(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Device(#[from] crate::device::DeviceError),
    #[error(transparent)]
    Coordinator(#[from] crate::coordinator::CoordinatorError),
    #[error(transparent)]
    Macro(#[from] crate::macromodel::MacroError),
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Solar(#[from] crate::grid::SolarError),
    #[error(transparent)]
    Transport(#[from] crate::protocol::TransportError),
}

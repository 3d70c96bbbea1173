//! Highway stretch with one service station: CTM-s plant simulation, a
//! relaxed linear MPC for the station exit ramp, and an iterative learning
//! controller that reuses the previous day's measurements.

#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod control;
pub mod ctms;
pub mod demand;
pub mod error;
pub mod experiment;
pub mod lifted;
pub mod metrics;
pub mod plot;
pub mod qp;
pub mod store;

pub use config::{CellParams, ControllerConfig, ExperimentConfig, HighwayConfig, StationParams, StudyConfig};
pub use ctms::{PlantState, StepOutput, Trajectory};
pub use demand::{DemandProfile, PeakShape};
pub use error::{Error, Result};

//! Physical, controller and experiment configuration.
//!
//! A study is described by one TOML file holding the highway stretch, the
//! service station, the controller weights and the peak window. See
//! `configs/station_stretch.toml` for the shipped reference stretch.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    /// Cell length [km].
    pub length_km: f64,
    /// Free-flow speed [km/h].
    pub free_flow_speed: f64,
    /// Congestion wave speed [km/h].
    pub congestion_wave_speed: f64,
    /// Flow capacity [veh/h].
    pub capacity: f64,
    /// Jam density [veh/km].
    pub jam_density: f64,
}

impl CellParams {
    pub fn validate(&self, index: usize) -> Result<()> {
        let fields = [
            ("length_km", self.length_km),
            ("free_flow_speed", self.free_flow_speed),
            ("congestion_wave_speed", self.congestion_wave_speed),
            ("capacity", self.capacity),
            ("jam_density", self.jam_density),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!(
                    "cell {index}: {name} must be finite and strictly positive, got {value}"
                )));
            }
        }
        if self.free_flow_speed * self.jam_density <= self.capacity {
            return Err(Error::config(format!(
                "cell {index}: free_flow_speed * jam_density ({}) must exceed capacity ({})",
                self.free_flow_speed * self.jam_density,
                self.capacity
            )));
        }
        Ok(())
    }

    /// Density at which free-flow demand reaches capacity [veh/km].
    pub fn critical_density(&self) -> f64 {
        self.capacity / self.free_flow_speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationParams {
    /// Cell whose outflow partially diverts into the station.
    pub exit_cell: usize,
    /// Cell the station ramp merges into.
    pub merge_cell: usize,
    /// In-station storage capacity [veh]; reported, never enforced by the plant.
    pub station_capacity: f64,
    /// Exit queue capacity [veh]; a controller constraint.
    pub queue_capacity: f64,
    /// Merge ramp capacity [veh/h].
    pub ramp_capacity: f64,
    /// Average service time in sampling intervals.
    pub service_delay_steps: usize,
    /// Fraction of the exit cell's outflow entering the station.
    pub split_ratio: f64,
    /// Share of the merge cell supply guaranteed to mainstream traffic.
    pub mainstream_priority: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighwayConfig {
    /// Sampling time [s].
    pub sample_time_s: f64,
    pub cells: Vec<CellParams>,
    pub station: StationParams,
}

impl HighwayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_time_s.is_finite() && self.sample_time_s > 0.0) {
            return Err(Error::config("sample_time_s must be strictly positive"));
        }
        let n = self.cells.len();
        if n < 2 {
            return Err(Error::config(format!("need at least 2 cells, got {n}")));
        }
        for (i, c) in self.cells.iter().enumerate() {
            c.validate(i)?;
        }
        let st = &self.station;
        if !(st.exit_cell < st.merge_cell && st.merge_cell < n) {
            return Err(Error::config(format!(
                "station cells must satisfy exit_cell < merge_cell < {n}, got ({}, {})",
                st.exit_cell, st.merge_cell
            )));
        }
        if !(st.split_ratio > 0.0 && st.split_ratio < 1.0) {
            return Err(Error::config("split_ratio must lie in (0, 1)"));
        }
        if !(st.mainstream_priority > 0.0 && st.mainstream_priority < 1.0) {
            return Err(Error::config("mainstream_priority must lie in (0, 1)"));
        }
        for (name, v) in [
            ("station_capacity", st.station_capacity),
            ("queue_capacity", st.queue_capacity),
            ("ramp_capacity", st.ramp_capacity),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be strictly positive")));
            }
        }
        if st.service_delay_steps == 0 {
            return Err(Error::config("service_delay_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Sampling time in hours; every rate x time product uses this.
    pub fn sample_time_h(&self) -> f64 {
        self.sample_time_s / 3600.0
    }

    /// Cells where one free-flow step travels further than the cell length.
    ///
    /// The plant still runs on such cells, but a sudden drop of inflow can
    /// drive their density negative, which `step` reports as a fault.
    pub fn cfl_violations(&self) -> Vec<usize> {
        let t = self.sample_time_h();
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.free_flow_speed * t > c.length_km)
            .map(|(i, _)| i)
            .collect()
    }

    /// Split ratio applied to the demand of cell `i`.
    pub fn split_of(&self, i: usize) -> f64 {
        if i == self.station.exit_cell {
            self.station.split_ratio
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Prediction horizon K [steps].
    pub horizon: usize,
    /// Replanning period p [steps]; the first p planned commands are applied.
    pub update_period: usize,
    /// Weight of the travel-distance reward.
    pub lambda: f64,
    /// Scale of the quadratic state penalty.
    pub quad_scale: f64,
    /// Step size on the gradient term of the learning update.
    pub ilc_step: f64,
    pub w_rho: f64,
    pub w_l: f64,
    pub w_e: f64,
    pub w_r: f64,
    /// Stand-in length weighting the inflow at the upstream boundary.
    pub upstream_weight: f64,
    /// Constant state reference used by the quadratic term.
    #[serde(default)]
    pub state_reference: f64,
    /// Ridge added to the learning preconditioner, relative to its mean diagonal.
    #[serde(default = "default_preconditioner_ridge")]
    pub preconditioner_ridge: f64,
    /// Penalty on queue-capacity slack when the hard program is infeasible.
    #[serde(default = "default_soft_queue_penalty")]
    pub soft_queue_penalty: f64,
    /// Activity threshold of the relaxation tightness report, relative to capacity.
    #[serde(default = "default_tightness_tol")]
    pub tightness_tol: f64,
    #[serde(default)]
    pub solver: SolverKind,
}

fn default_preconditioner_ridge() -> f64 {
    1e-6
}

fn default_tightness_tol() -> f64 {
    1e-4
}

fn default_soft_queue_penalty() -> f64 {
    1e4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    InteriorPoint,
    Admm,
}

impl ControllerConfig {
    pub fn validate(&self, hw: &HighwayConfig) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        if self.update_period == 0 || self.update_period > self.horizon {
            return Err(Error::config("update_period must satisfy 0 < p <= horizon"));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("quad_scale", self.quad_scale),
            ("ilc_step", self.ilc_step),
            ("w_rho", self.w_rho),
            ("w_l", self.w_l),
            ("w_e", self.w_e),
            ("w_r", self.w_r),
            ("upstream_weight", self.upstream_weight),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be strictly positive")));
            }
        }
        let j = hw.station.merge_cell;
        let upstream_len = hw.cells[j - 1].length_km;
        if self.w_r >= upstream_len {
            return Err(Error::config(format!(
                "w_r ({}) must be below the length of the cell upstream of the merge ({upstream_len})",
                self.w_r
            )));
        }
        if self.preconditioner_ridge < 0.0 {
            return Err(Error::config("preconditioner_ridge must be nonnegative"));
        }
        if !(self.tightness_tol.is_finite() && self.tightness_tol > 0.0) {
            return Err(Error::config("tightness_tol must be strictly positive"));
        }
        Ok(())
    }
}

/// Time frame of one simulated day, in absolute steps from the start of the
/// demand profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// First step of the evaluated peak (t_s); earlier steps are an uncontrolled warm-up.
    pub peak_start: usize,
    /// Last step of the evaluated peak (t_e).
    pub peak_end: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_end <= self.peak_start {
            return Err(Error::config("peak_end must be after peak_start"));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a study, as stored in one config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub schema_version: u32,
    #[serde(flatten)]
    pub highway: HighwayConfig,
    pub controller: ControllerConfig,
    pub experiment: ExperimentConfig,
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize the configuration: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.highway.validate()?;
        self.controller.validate(&self.highway)?;
        self.experiment.validate()
    }

    /// Length of one simulated day: the peak plus one horizon of tail so the
    /// last planning windows have data to look at.
    pub fn day_length(&self) -> usize {
        self.experiment.peak_end + self.controller.horizon
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The reference stretch shipped in `configs/station_stretch.toml`.
pub fn reference_study() -> StudyConfig {
    StudyConfig::from_toml_str(REFERENCE_TOML).expect("shipped config is valid")
}

pub const REFERENCE_TOML: &str = include_str!("../../../configs/station_stretch.toml");

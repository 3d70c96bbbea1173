//! Measurements of one closed-loop day, as consumed by the next day's
//! learning controller.

use serde::{Deserialize, Serialize};

use crate::config::HighwayConfig;
use crate::ctms::Trajectory;
use crate::error::{Error, Result};
use crate::metrics::StateSeries;

/// Full-day measurements. `states` holds one entry more than the per-step
/// sequences: `states[k]` is x(k) and the step sequences describe the
/// interval [k, k+1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub day_index: usize,
    /// Absolute step of `states[0]`.
    pub start_step: usize,
    /// x(k) = [rho_0 .. rho_{N-1}, l, e].
    pub states: Vec<Vec<f64>>,
    /// u(k) = [phi_0 .. phi_N, r].
    pub inputs: Vec<Vec<f64>>,
    /// phi_le(k).
    pub service_flows: Vec<f64>,
    /// s(k).
    pub station_inflows: Vec<f64>,
    /// Realized upstream demand D_{-1}(k).
    pub upstream_demand: Vec<f64>,
    /// Applied metering command r_c(k); `None` where the ramp was not metered.
    pub metering: Vec<Option<f64>>,
}

/// Slice of a record over [k0, k0+K].
#[derive(Debug, Clone, PartialEq)]
pub struct RecordWindow {
    pub start_step: usize,
    pub length: usize,
    /// K+1 states.
    pub states: Vec<Vec<f64>>,
    /// K inputs.
    pub inputs: Vec<Vec<f64>>,
    pub service_flows: Vec<f64>,
    pub station_inflows: Vec<f64>,
    pub upstream_demand: Vec<f64>,
    /// Phi_l^-(k0-1), the exit-cell outflow just before the window.
    pub prev_exit_cell_outflow: f64,
    /// Some entries past the end of the record repeat its last entry.
    pub extrapolated: bool,
}

impl RecordWindow {
    /// States stacked as one vector of length (K+1)(N+2).
    pub fn stacked_states(&self) -> Vec<f64> {
        self.states.iter().flatten().copied().collect()
    }

    /// Inputs stacked as one vector of length K(N+2).
    pub fn stacked_inputs(&self) -> Vec<f64> {
        self.inputs.iter().flatten().copied().collect()
    }
}

impl IterationRecord {
    pub fn from_trajectory(day_index: usize, traj: &Trajectory, cfg: &HighwayConfig) -> Result<Self> {
        if traj.states.len() != traj.outputs.len() + 1 {
            return Err(Error::Dimension("trajectory must hold one state more than outputs".into()));
        }
        let rec = Self {
            day_index,
            start_step: traj.start_step,
            states: traj.states.iter().map(|s| s.state_vector()).collect(),
            inputs: traj.outputs.iter().map(|o| o.input_vector()).collect(),
            service_flows: traj.outputs.iter().map(|o| o.service_to_queue_flow).collect(),
            station_inflows: traj.outputs.iter().map(|o| o.station_inflow).collect(),
            upstream_demand: traj.outputs.iter().map(|o| o.upstream_demand).collect(),
            metering: traj.outputs.iter().map(|o| o.metering).collect(),
        };
        rec.validate(cfg)?;
        Ok(rec)
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// Absolute step of the last stored state.
    pub fn last_step(&self) -> usize {
        self.start_step + self.steps()
    }

    pub fn validate(&self, cfg: &HighwayConfig) -> Result<()> {
        let k = self.steps();
        let nx1 = cfg.num_cells() + 2;
        if self.states.len() != k + 1
            || self.service_flows.len() != k
            || self.station_inflows.len() != k
            || self.upstream_demand.len() != k
            || self.metering.len() != k
        {
            return Err(Error::Dimension(format!("record of day {} has sequences of unequal length", self.day_index)));
        }
        if self.states.iter().any(|x| x.len() != nx1) || self.inputs.iter().any(|u| u.len() != nx1) {
            return Err(Error::Dimension(format!("record of day {} does not match a stretch of {} cells", self.day_index, nx1 - 2)));
        }
        let scalars = self.service_flows.iter().chain(&self.station_inflows).chain(&self.upstream_demand).chain(self.metering.iter().flatten());
        let ok = self.states.iter().flatten().chain(self.inputs.iter().flatten()).chain(scalars).all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::Store(format!("record of day {} holds a negative or non-finite entry", self.day_index)));
        }
        Ok(())
    }

    /// Phi_l^-(k) = phi_{l+1}(k) + s(k).
    pub fn exit_cell_outflow(&self, k: usize, cfg: &HighwayConfig) -> Option<f64> {
        let i = k.checked_sub(self.start_step)?;
        let u = self.inputs.get(i)?;
        Some(u[cfg.station.exit_cell + 1] + self.station_inflows[i])
    }

    /// Slice over [k0, k0+K]. Steps past the last stored entry repeat it and
    /// set `extrapolated`; steps before the first stored entry are an error.
    pub fn window(&self, k0: usize, len: usize, cfg: &HighwayConfig) -> Result<RecordWindow> {
        if k0 < self.start_step || k0 >= self.last_step() {
            return Err(Error::MissingData(format!(
                "day {} holds steps [{}, {}], window starts at {k0}",
                self.day_index,
                self.start_step,
                self.last_step()
            )));
        }
        let off = k0 - self.start_step;
        let k = self.steps();
        let clamp_state = |i: usize| (off + i).min(k);
        let clamp_step = |i: usize| (off + i).min(k - 1);
        let extrapolated = off + len > k;
        let prev_exit_cell_outflow = if k0 > self.start_step { self.exit_cell_outflow(k0 - 1, cfg).unwrap_or(0.0) } else { 0.0 };
        Ok(RecordWindow {
            start_step: k0,
            length: len,
            states: (0..=len).map(|i| self.states[clamp_state(i)].clone()).collect(),
            inputs: (0..len).map(|i| self.inputs[clamp_step(i)].clone()).collect(),
            service_flows: (0..len).map(|i| self.service_flows[clamp_step(i)]).collect(),
            station_inflows: (0..len).map(|i| self.station_inflows[clamp_step(i)]).collect(),
            upstream_demand: (0..len).map(|i| self.upstream_demand[clamp_step(i)]).collect(),
            prev_exit_cell_outflow,
            extrapolated,
        })
    }
}

impl StateSeries for IterationRecord {
    fn first_step(&self) -> usize {
        self.start_step
    }
    fn num_states(&self) -> usize {
        self.states.len()
    }
    fn vehicles_on_road(&self, k: usize, cfg: &HighwayConfig) -> f64 {
        let x = &self.states[k - self.start_step];
        cfg.cells.iter().zip(x).map(|(c, rho)| c.length_km * rho).sum()
    }
    fn exit_queue(&self, k: usize) -> f64 {
        let x = &self.states[k - self.start_step];
        x[x.len() - 1]
    }
}

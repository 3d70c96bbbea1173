//! Discrete-time cell transmission model with one service station.
//!
//! Cells exchange flow through the usual demand/supply rule. Cell `exit_cell`
//! sends a share of its outflow into the station; vehicles spend
//! `service_delay_steps` intervals there, join an exit queue and merge back
//! into `merge_cell`, where the ramp and the mainstream share the supply
//! according to the mainstream priority. An optional metering command caps
//! the station demand.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::HighwayConfig;
use crate::demand::DemandProfile;
use crate::error::{Error, Result};

/// Values this close to zero from below are rounding noise and are snapped to 0.
const NEGATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// Cell densities [veh/km].
    pub densities: Vec<f64>,
    /// Vehicles receiving service in the station [veh].
    pub in_station: f64,
    /// Vehicles queued at the station exit [veh].
    pub exit_queue: f64,
    /// Station inflows of the last `service_delay_steps` intervals, oldest first [veh/h].
    pub inflow_history: VecDeque<f64>,
    /// Total outflow of the exit cell during the previous interval [veh/h].
    pub prev_exit_cell_outflow: f64,
}

impl PlantState {
    /// Empty highway, empty station, zero history.
    pub fn empty(cfg: &HighwayConfig) -> Self {
        Self {
            densities: vec![0.0; cfg.num_cells()],
            in_station: 0.0,
            exit_queue: 0.0,
            inflow_history: VecDeque::from(vec![0.0; cfg.station.service_delay_steps]),
            prev_exit_cell_outflow: 0.0,
        }
    }

    pub fn check(&self, cfg: &HighwayConfig) -> Result<()> {
        if self.densities.len() != cfg.num_cells() {
            return Err(Error::Dimension(format!(
                "state has {} densities for {} cells",
                self.densities.len(),
                cfg.num_cells()
            )));
        }
        if self.inflow_history.len() != cfg.station.service_delay_steps {
            return Err(Error::Dimension(format!(
                "inflow history holds {} entries, service delay is {}",
                self.inflow_history.len(),
                cfg.station.service_delay_steps
            )));
        }
        Ok(())
    }

    /// Station inflow during the coming interval, s(k) = beta * outflow(k-1).
    pub fn station_inflow(&self, cfg: &HighwayConfig) -> f64 {
        cfg.station.split_ratio * self.prev_exit_cell_outflow
    }

    /// Flow from service to the exit queue during the coming interval.
    pub fn service_to_queue_flow(&self) -> f64 {
        self.inflow_history.front().copied().unwrap_or(0.0)
    }

    /// Vehicles on the stretch [veh].
    pub fn vehicles_on_road(&self, cfg: &HighwayConfig) -> f64 {
        self.densities.iter().zip(&cfg.cells).map(|(r, c)| r * c.length_km).sum()
    }

    /// Vehicles on the stretch plus those in the station.
    pub fn total_vehicles(&self, cfg: &HighwayConfig) -> f64 {
        self.vehicles_on_road(cfg) + self.in_station + self.exit_queue
    }

    /// State vector [rho_0 .. rho_{N-1}, l, e].
    pub fn state_vector(&self) -> Vec<f64> {
        let mut x = self.densities.clone();
        x.push(self.in_station);
        x.push(self.exit_queue);
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    /// Interface flows phi_0 .. phi_N [veh/h]; phi_0 enters cell 0, phi_N leaves the stretch.
    pub interface_flows: Vec<f64>,
    pub station_inflow: f64,
    pub station_outflow: f64,
    pub service_to_queue_flow: f64,
    /// Per-cell demand D_i(k).
    pub cell_demands: Vec<f64>,
    /// Station demand D^s(k), metering included.
    pub station_demand: f64,
    /// Per-cell supply S_i(k).
    pub cell_supplies: Vec<f64>,
    pub upstream_demand: f64,
    pub metering: Option<f64>,
}

impl StepOutput {
    /// Input vector [phi_0 .. phi_N, r].
    pub fn input_vector(&self) -> Vec<f64> {
        let mut u = self.interface_flows.clone();
        u.push(self.station_outflow);
        u
    }
}

fn check_index(i: usize, cfg: &HighwayConfig) -> Result<()> {
    if i >= cfg.num_cells() {
        Err(Error::IndexOutOfRange { index: i, len: cfg.num_cells() })
    } else {
        Ok(())
    }
}

/// D_i(k) = min((1 - beta_i) v_i rho_i, q_i^max).
pub fn cell_demand(i: usize, state: &PlantState, cfg: &HighwayConfig) -> Result<f64> {
    check_index(i, cfg)?;
    let c = &cfg.cells[i];
    Ok(((1.0 - cfg.split_of(i)) * c.free_flow_speed * state.densities[i]).min(c.capacity))
}

/// S_i(k) = min(w_i (rho_i^max - rho_i), q_i^max).
pub fn cell_supply(i: usize, state: &PlantState, cfg: &HighwayConfig) -> Result<f64> {
    check_index(i, cfg)?;
    let c = &cfg.cells[i];
    Ok((c.congestion_wave_speed * (c.jam_density - state.densities[i])).min(c.capacity))
}

/// D^s(k) = min(phi_le + e / T, r^max[, r_c]).
pub fn station_demand(state: &PlantState, cfg: &HighwayConfig, metering: Option<f64>) -> Result<f64> {
    let available = state.service_to_queue_flow() + state.exit_queue / cfg.sample_time_h();
    let mut d = available.min(cfg.station.ramp_capacity);
    if let Some(rc) = metering {
        if rc.is_nan() || rc < 0.0 {
            return Err(Error::config(format!("metering command must be >= 0, got {rc}")));
        }
        d = d.min(rc);
    }
    Ok(d)
}

fn guard(value: f64, step: usize, what: impl FnOnce() -> String) -> Result<f64> {
    if value.is_nan() || value < -NEGATIVE_TOLERANCE {
        return Err(Error::PlantFault {
            step,
            detail: format!("{} = {value}", what()),
        });
    }
    Ok(value.max(0.0))
}

/// Advance the plant by one interval. `step_index` is only used in diagnostics.
pub fn step(
    state: &PlantState,
    upstream_demand: f64,
    metering: Option<f64>,
    cfg: &HighwayConfig,
    step_index: usize,
) -> Result<(PlantState, StepOutput)> {
    state.check(cfg)?;
    if !(upstream_demand.is_finite() && upstream_demand >= 0.0) {
        return Err(Error::PlantFault {
            step: step_index,
            detail: format!("upstream demand {upstream_demand} is not a nonnegative number"),
        });
    }
    let n = cfg.num_cells();
    let st = &cfg.station;
    let t = cfg.sample_time_h();
    let (ell, j) = (st.exit_cell, st.merge_cell);

    let s = state.station_inflow(cfg);
    let phi_le = state.service_to_queue_flow();
    let demands: Vec<f64> = (0..n).map(|i| cell_demand(i, state, cfg)).collect::<Result<_>>()?;
    let supplies: Vec<f64> = (0..n).map(|i| cell_supply(i, state, cfg)).collect::<Result<_>>()?;
    let d_station = station_demand(state, cfg, metering)?;

    let mut phi = vec![0.0; n + 1];
    let mut r = 0.0;
    for i in 0..=n {
        let upstream = if i == 0 { upstream_demand } else { demands[i - 1] };
        if i == n {
            phi[i] = upstream;
        } else if i == j {
            let sj = supplies[j];
            let s_ms = (sj - d_station).max(st.mainstream_priority * sj);
            phi[i] = upstream.min(s_ms);
            let s_st = (sj - phi[i]).max((1.0 - st.mainstream_priority) * sj);
            r = d_station.min(s_st);
        } else {
            phi[i] = upstream.min(supplies[i]);
        }
    }

    let mut densities = Vec::with_capacity(n);
    for i in 0..n {
        let inflow = phi[i] + if i == j { r } else { 0.0 };
        let outflow = phi[i + 1] + if i == ell { s } else { 0.0 };
        let rho = state.densities[i] + t / cfg.cells[i].length_km * (inflow - outflow);
        densities.push(guard(rho, step_index, || format!("density of cell {i}"))?);
    }
    let in_station = guard(state.in_station + t * (s - phi_le), step_index, || "station occupancy".into())?;
    let exit_queue = guard(state.exit_queue + t * (phi_le - r), step_index, || "exit queue".into())?;

    let mut inflow_history = state.inflow_history.clone();
    inflow_history.pop_front();
    inflow_history.push_back(s);

    let next = PlantState {
        densities,
        in_station,
        exit_queue,
        inflow_history,
        prev_exit_cell_outflow: phi[ell + 1] + s,
    };
    let out = StepOutput {
        interface_flows: phi,
        station_inflow: s,
        station_outflow: r,
        service_to_queue_flow: phi_le,
        cell_demands: demands,
        station_demand: d_station,
        cell_supplies: supplies,
        upstream_demand,
        metering,
    };
    Ok((next, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Absolute step index of `states[0]`.
    pub start_step: usize,
    pub states: Vec<PlantState>,
    pub outputs: Vec<StepOutput>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.outputs.len()
    }
}

/// Run the plant for `steps` intervals, asking `policy(k, state)` for the
/// metering command before each step. `k` is the absolute step index.
pub fn simulate<P>(
    cfg: &HighwayConfig,
    demand: &DemandProfile,
    mut policy: P,
    initial: PlantState,
    start_step: usize,
    steps: usize,
) -> Result<Trajectory>
where
    P: FnMut(usize, &PlantState) -> Option<f64>,
{
    if demand.len() < start_step + steps {
        return Err(Error::MissingData(format!(
            "demand profile has {} steps, simulation needs {}",
            demand.len(),
            start_step + steps
        )));
    }
    initial.check(cfg)?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut outputs = Vec::with_capacity(steps);
    states.push(initial);
    for k in start_step..start_step + steps {
        let current = states.last().expect("nonempty");
        let rc = policy(k, current);
        let (next, out) = step(current, demand.at(k), rc, cfg, k)?;
        states.push(next);
        outputs.push(out);
    }
    Ok(Trajectory { start_step, states, outputs })
}

/// Column names of the trajectory export, in order.
pub fn trajectory_columns(cfg: &HighwayConfig) -> Vec<String> {
    let n = cfg.num_cells();
    let mut cols = vec!["step".to_string()];
    cols.extend((0..n).map(|i| format!("rho_{i}")));
    cols.extend(["in_station", "exit_queue", "prev_exit_cell_outflow"].map(String::from));
    cols.extend((0..=n).map(|i| format!("phi_{i}")));
    cols.extend(["station_inflow", "station_outflow", "service_to_queue_flow"].map(String::from));
    cols.extend((0..n).map(|i| format!("demand_{i}")));
    cols.push("station_demand".into());
    cols.extend((0..n).map(|i| format!("supply_{i}")));
    cols.extend(["upstream_demand", "metering"].map(String::from));
    cols
}

/// Write one row per state. The last state has no step output, so its flow
/// columns are left empty. The inflow ring buffer is not exported; it is the
/// `station_inflow` column delayed by the service time.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, cfg: &HighwayConfig, writer: W) -> Result<()> {
    let n = cfg.num_cells();
    let mut w = csv::Writer::from_writer(writer);
    let cols = trajectory_columns(cfg);
    w.write_record(&cols)?;
    for (idx, state) in traj.states.iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(cols.len());
        row.push((traj.start_step + idx).to_string());
        row.extend(state.densities.iter().map(f64::to_string));
        row.push(state.in_station.to_string());
        row.push(state.exit_queue.to_string());
        row.push(state.prev_exit_cell_outflow.to_string());
        match traj.outputs.get(idx) {
            Some(o) => {
                row.extend(o.interface_flows.iter().map(f64::to_string));
                row.push(o.station_inflow.to_string());
                row.push(o.station_outflow.to_string());
                row.push(o.service_to_queue_flow.to_string());
                row.extend(o.cell_demands.iter().map(f64::to_string));
                row.push(o.station_demand.to_string());
                row.extend(o.cell_supplies.iter().map(f64::to_string));
                row.push(o.upstream_demand.to_string());
                row.push(o.metering.map(|m| m.to_string()).unwrap_or_default());
            }
            None => row.extend(std::iter::repeat_n(String::new(), (n + 1) + 3 + n + 1 + n + 2)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

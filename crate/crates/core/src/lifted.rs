//! Finite-horizon affine prediction model and relaxed constraint set.
//!
//! States are stacked as `x = col(x(k0), .., x(k0+K))` with
//! `x(k) = [rho_0 .. rho_{N-1}, l, e]`, inputs as `u = col(u(k0), .., u(k0+K-1))`
//! with `u(k) = [phi_0 .. phi_N, r]`. The prediction is
//!
//! ```text
//! x = offset + M u + G_h phi_le
//! ```
//!
//! where the station inflow inside the horizon is eliminated through
//! `s(k+1) = beta (phi_{l+1}(k) + s(k))`, so its dependence on the inputs
//! lives in `M` and its dependence on `s(k0)` in `offset`. Service-to-queue
//! flows are treated as exogenous, which requires the (estimated) service
//! delay to be at least the horizon.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};

use crate::config::{ControllerConfig, HighwayConfig};
use crate::demand::DemandProfile;
use crate::error::{Error, Result};

/// Parameters the controller believes in.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub beta: f64,
    pub delta_steps: usize,
    pub demand: DemandProfile,
}

impl Estimates {
    pub fn exact(cfg: &HighwayConfig, demand: &DemandProfile) -> Self {
        Self {
            beta: cfg.station.split_ratio,
            delta_steps: cfg.station.service_delay_steps,
            demand: demand.clone(),
        }
    }

    /// Scaled estimates; the delay is rounded to the nearest step.
    pub fn scaled(cfg: &HighwayConfig, demand: &DemandProfile, r_beta: f64, r_delta: f64, r_demand: f64) -> Result<Self> {
        let est = Self {
            beta: r_beta * cfg.station.split_ratio,
            delta_steps: (r_delta * cfg.station.service_delay_steps as f64).round() as usize,
            demand: demand.scaled(r_demand)?,
        };
        est.validate()?;
        Ok(est)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config(format!("estimated split ratio {} outside (0, 1)", self.beta)));
        }
        if self.delta_steps == 0 {
            return Err(Error::config("estimated service delay must be at least one step"));
        }
        Ok(())
    }
}

/// Measured data at the start of one planning window.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonWindow {
    pub start_step: usize,
    pub length: usize,
    /// x(k0) = [rho_0 .. rho_{N-1}, l, e].
    pub initial_state: Vec<f64>,
    /// phi_le over [k0, k0+K-1].
    pub service_flows: Vec<f64>,
    /// s(k0).
    pub station_inflow_at_start: f64,
}

/// Which relaxed inequality a row encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowFamily {
    /// phi_0 <= upstream demand.
    UpstreamDemand,
    /// phi_i <= (1 - beta_{i-1}) v_{i-1} rho_{i-1}.
    CellDemand,
    /// phi_i <= q_{i-1}.
    UpstreamCapacity,
    /// phi_i <= w_i (rho_i^max - rho_i).
    Supply,
    /// phi_i <= q_i.
    Capacity,
    /// phi_j <= (1 - beta_{j-1}) v_{j-1} rho_{j-1}.
    MergeDemand,
    /// phi_j <= q_{j-1}.
    MergeUpstreamCapacity,
    /// r <= phi_le + e / T.
    StationAvailable,
    /// r <= r^max.
    RampCapacity,
    /// phi_j + r <= w_j (rho_j^max - rho_j).
    MergeSupply,
    /// phi_j + r <= q_j.
    MergeCapacity,
    /// e <= e^max.
    QueueCapacity,
}

impl RowFamily {
    /// Rows relaxing an ordinary cell-to-cell interface.
    pub fn is_simple_interface(self) -> bool {
        matches!(
            self,
            RowFamily::UpstreamDemand | RowFamily::CellDemand | RowFamily::UpstreamCapacity | RowFamily::Supply | RowFamily::Capacity
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTag {
    pub family: RowFamily,
    /// Interface index i (flow phi_i); for queue rows the cell count N.
    pub interface: usize,
    /// Step offset inside the window (0-based).
    pub step: usize,
}

/// Linear stage dynamics shared by the dense lift and the sparse planners.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDynamics {
    pub num_cells: usize,
    pub sample_time_h: f64,
    pub lengths: Vec<f64>,
    pub exit_cell: usize,
    pub merge_cell: usize,
    pub beta: f64,
}

impl StageDynamics {
    pub fn new(cfg: &HighwayConfig, beta: f64) -> Self {
        Self {
            num_cells: cfg.num_cells(),
            sample_time_h: cfg.sample_time_h(),
            lengths: cfg.cells.iter().map(|c| c.length_km).collect(),
            exit_cell: cfg.station.exit_cell,
            merge_cell: cfg.station.merge_cell,
            beta,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.num_cells + 2
    }

    pub fn input_dim(&self) -> usize {
        self.num_cells + 2
    }

    /// Index of the input feeding the station (phi_{l+1}).
    pub fn exit_flow_input(&self) -> usize {
        self.exit_cell + 1
    }

    /// Propagate `K` steps of the linear model. `inputs` has `K * (N+2)`
    /// entries, `service_flows` `K`. Returns the `(K+1) * (N+2)` state stack.
    pub fn rollout(&self, x0: &[f64], s0: f64, inputs: &[f64], service_flows: &[f64]) -> Vec<f64> {
        let nx = self.state_dim();
        let nu = self.input_dim();
        let horizon = service_flows.len();
        debug_assert_eq!(inputs.len(), horizon * nu);
        let n = self.num_cells;
        let t = self.sample_time_h;
        let mut out = Vec::with_capacity((horizon + 1) * nx);
        out.extend_from_slice(x0);
        let mut s = s0;
        for m in 0..horizon {
            let u = &inputs[m * nu..(m + 1) * nu];
            let base = m * nx;
            for i in 0..n {
                let mut net = u[i] - u[i + 1];
                if i == self.merge_cell {
                    net += u[n + 1];
                }
                if i == self.exit_cell {
                    net -= s;
                }
                let next = out[base + i] + t / self.lengths[i] * net;
                out.push(next);
            }
            let l_next = out[base + n] + t * (s - service_flows[m]);
            let e_next = out[base + n + 1] + t * (service_flows[m] - u[n + 1]);
            out.push(l_next);
            out.push(e_next);
            s = self.beta * (u[self.exit_flow_input()] + s);
        }
        out
    }

    /// `offset` part of the prediction: initial state plus the propagation of s(k0).
    pub fn offset(&self, x0: &[f64], s0: f64, horizon: usize) -> Vec<f64> {
        self.rollout(x0, s0, &vec![0.0; horizon * self.input_dim()], &vec![0.0; horizon])
    }
}

#[derive(Debug, Clone)]
pub struct LiftedQP {
    pub horizon: usize,
    pub start_step: usize,
    pub dynamics: StageDynamics,
    /// M, maps stacked inputs to stacked states.
    pub state_map: DMatrix<f64>,
    /// G_h, maps service-to-queue flows to stacked states.
    pub history_map: DMatrix<f64>,
    pub offset: DVector<f64>,
    /// Service-to-queue flows assumed over the window.
    pub service_flows: DVector<f64>,
    pub initial_state: Vec<f64>,
    pub station_inflow_at_start: f64,
    pub ineq_state: CsMat<f64>,
    pub ineq_input: CsMat<f64>,
    pub ineq_rhs: DVector<f64>,
    pub rows: Vec<RowTag>,
    /// Diagonal of Q.
    pub quad_weight: DVector<f64>,
    pub lin_state_cost: DVector<f64>,
    pub lin_input_cost: DVector<f64>,
    pub quad_scale: f64,
    pub state_reference: DVector<f64>,
}

/// Closed-form number of inequality rows for `n` cells over `k` steps.
pub fn expected_row_count(n: usize, k: usize) -> usize {
    k * (4 * n + 4)
}

impl LiftedQP {
    pub fn n_x(&self) -> usize {
        (self.horizon + 1) * self.dynamics.state_dim()
    }

    pub fn n_u(&self) -> usize {
        self.horizon * self.dynamics.input_dim()
    }

    pub fn x_index(&self, step: usize, component: usize) -> usize {
        step * self.dynamics.state_dim() + component
    }

    pub fn u_index(&self, step: usize, component: usize) -> usize {
        step * self.dynamics.input_dim() + component
    }

    /// x = offset + M u + G_h phi_le.
    pub fn predict(&self, inputs: &DVector<f64>) -> DVector<f64> {
        &self.offset + &self.state_map * inputs + &self.history_map * &self.service_flows
    }

    /// Offset for another measured start (x0, s0) under the same dynamics.
    pub fn offset_for(&self, x0: &[f64], s0: f64) -> DVector<f64> {
        DVector::from_vec(self.dynamics.offset(x0, s0, self.horizon))
    }

    /// A_x x + A_u u - b for every row.
    pub fn constraint_values(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut v = -self.ineq_rhs.clone();
        for (val, (r, c)) in self.ineq_state.iter() {
            v[r] += val * x[c];
        }
        for (val, (r, c)) in self.ineq_input.iter() {
            v[r] += val * u[c];
        }
        v
    }

    /// (a/2) ||x - x_r||_Q^2 + c_x' x - c_u' u.
    pub fn objective(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &self.state_reference;
        let quad: f64 = dx.iter().zip(self.quad_weight.iter()).map(|(d, q)| q * d * d).sum();
        0.5 * self.quad_scale * quad + self.lin_state_cost.dot(x) - self.lin_input_cost.dot(u)
    }

    /// Gradient of the objective in `u` under the affine model `x = offset + M u + G_h phi`.
    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let x = self.predict(u);
        let qx = (x - &self.state_reference).component_mul(&self.quad_weight) * self.quad_scale + &self.lin_state_cost;
        self.state_map.tr_mul(&qx) - &self.lin_input_cost
    }

    /// Coordinate dump: every block as `# <name> <rows> <cols>` followed by
    /// `row col value` lines for the nonzero entries (0-based).
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        fn dense<W: Write>(w: &mut W, name: &str, m: &DMatrix<f64>) -> std::io::Result<()> {
            writeln!(w, "# {name} {} {}", m.nrows(), m.ncols())?;
            for c in 0..m.ncols() {
                for r in 0..m.nrows() {
                    let v = m[(r, c)];
                    if v != 0.0 {
                        writeln!(w, "{r} {c} {v:e}")?;
                    }
                }
            }
            Ok(())
        }
        fn sparse<W: Write>(w: &mut W, name: &str, m: &CsMat<f64>) -> std::io::Result<()> {
            writeln!(w, "# {name} {} {}", m.rows(), m.cols())?;
            for (v, (r, c)) in m.iter() {
                writeln!(w, "{r} {c} {v:e}")?;
            }
            Ok(())
        }
        fn vector<W: Write>(w: &mut W, name: &str, v: &DVector<f64>) -> std::io::Result<()> {
            writeln!(w, "# {name} {} 1", v.len())?;
            for (r, x) in v.iter().enumerate() {
                if *x != 0.0 {
                    writeln!(w, "{r} 0 {x:e}")?;
                }
            }
            Ok(())
        }
        dense(&mut w, "state_map", &self.state_map)?;
        dense(&mut w, "history_map", &self.history_map)?;
        vector(&mut w, "offset", &self.offset)?;
        sparse(&mut w, "ineq_state", &self.ineq_state)?;
        sparse(&mut w, "ineq_input", &self.ineq_input)?;
        vector(&mut w, "ineq_rhs", &self.ineq_rhs)?;
        vector(&mut w, "quad_weight", &self.quad_weight)?;
        vector(&mut w, "lin_state_cost", &self.lin_state_cost)?;
        vector(&mut w, "lin_input_cost", &self.lin_input_cost)?;
        Ok(())
    }
}

struct RowBuilder {
    state: TriMat<f64>,
    input: TriMat<f64>,
    rhs: Vec<f64>,
    tags: Vec<RowTag>,
}

impl RowBuilder {
    fn push(&mut self, tag: RowTag, state_terms: &[(usize, f64)], input_terms: &[(usize, f64)], rhs: f64) {
        let r = self.rhs.len();
        for &(c, v) in state_terms {
            self.state.add_triplet(r, c, v);
        }
        for &(c, v) in input_terms {
            self.input.add_triplet(r, c, v);
        }
        self.rhs.push(rhs);
        self.tags.push(tag);
    }
}

/// Assemble the window's program from the configuration and the estimates.
pub fn build_lifted(cfg: &HighwayConfig, ctrl: &ControllerConfig, est: &Estimates, window: &HorizonWindow) -> Result<LiftedQP> {
    est.validate()?;
    let horizon = window.length;
    let n = cfg.num_cells();
    let nx1 = n + 2;
    if horizon == 0 {
        return Err(Error::Dimension("window length must be positive".into()));
    }
    if est.delta_steps < horizon {
        return Err(Error::Unsupported(format!(
            "service delay estimate {} is shorter than the horizon {horizon}; in-horizon service departures are not modelled",
            est.delta_steps
        )));
    }
    if window.initial_state.len() != nx1 {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, expected {nx1}",
            window.initial_state.len()
        )));
    }
    if window.service_flows.len() != horizon {
        return Err(Error::Dimension(format!(
            "{} service flows for a horizon of {horizon}",
            window.service_flows.len()
        )));
    }
    if window.service_flows.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Dimension("service flows must be finite and >= 0".into()));
    }

    let dynamics = StageDynamics::new(cfg, est.beta);
    let n_x = (horizon + 1) * nx1;
    let n_u = horizon * nx1;

    let zeros_u = vec![0.0; n_u];
    let zeros_h = vec![0.0; horizon];
    let zero_x0 = vec![0.0; nx1];
    let offset = DVector::from_vec(dynamics.rollout(&window.initial_state, window.station_inflow_at_start, &zeros_u, &zeros_h));

    let mut state_map = DMatrix::<f64>::zeros(n_x, n_u);
    let mut unit = zeros_u.clone();
    for col in 0..n_u {
        unit[col] = 1.0;
        let response = dynamics.rollout(&zero_x0, 0.0, &unit, &zeros_h);
        state_map.set_column(col, &DVector::from_vec(response));
        unit[col] = 0.0;
    }
    let mut history_map = DMatrix::<f64>::zeros(n_x, horizon);
    let mut unit_h = zeros_h.clone();
    for col in 0..horizon {
        unit_h[col] = 1.0;
        let response = dynamics.rollout(&zero_x0, 0.0, &zeros_u, &unit_h);
        history_map.set_column(col, &DVector::from_vec(response));
        unit_h[col] = 0.0;
    }

    let rows_total = expected_row_count(n, horizon);
    let mut rb = RowBuilder {
        state: TriMat::new((rows_total, n_x)),
        input: TriMat::new((rows_total, n_u)),
        rhs: Vec::with_capacity(rows_total),
        tags: Vec::with_capacity(rows_total),
    };
    let st = &cfg.station;
    let j = st.merge_cell;
    let t = cfg.sample_time_h();
    let beta_of = |i: usize| if i == st.exit_cell { est.beta } else { 0.0 };
    for m in 0..horizon {
        let xi = |c: usize| m * nx1 + c;
        let ui = |c: usize| m * nx1 + c;
        let tag = |family, interface| RowTag { family, interface, step: m };
        for i in 0..=n {
            if i == 0 {
                let c = &cfg.cells[0];
                let d = est.demand.at(window.start_step + m);
                rb.push(tag(RowFamily::UpstreamDemand, 0), &[], &[(ui(0), 1.0)], d);
                rb.push(tag(RowFamily::Supply, 0), &[(xi(0), c.congestion_wave_speed)], &[(ui(0), 1.0)], c.congestion_wave_speed * c.jam_density);
                rb.push(tag(RowFamily::Capacity, 0), &[], &[(ui(0), 1.0)], c.capacity);
                continue;
            }
            let up = &cfg.cells[i - 1];
            let demand_coef = -(1.0 - beta_of(i - 1)) * up.free_flow_speed;
            if i == j {
                let c = &cfg.cells[j];
                let r = ui(n + 1);
                rb.push(tag(RowFamily::MergeDemand, i), &[(xi(i - 1), demand_coef)], &[(ui(i), 1.0)], 0.0);
                rb.push(tag(RowFamily::MergeUpstreamCapacity, i), &[], &[(ui(i), 1.0)], up.capacity);
                rb.push(tag(RowFamily::StationAvailable, i), &[(xi(n + 1), -1.0 / t)], &[(r, 1.0)], window.service_flows[m]);
                rb.push(tag(RowFamily::RampCapacity, i), &[], &[(r, 1.0)], st.ramp_capacity);
                rb.push(
                    tag(RowFamily::MergeSupply, i),
                    &[(xi(i), c.congestion_wave_speed)],
                    &[(ui(i), 1.0), (r, 1.0)],
                    c.congestion_wave_speed * c.jam_density,
                );
                rb.push(tag(RowFamily::MergeCapacity, i), &[], &[(ui(i), 1.0), (r, 1.0)], c.capacity);
                continue;
            }
            rb.push(tag(RowFamily::CellDemand, i), &[(xi(i - 1), demand_coef)], &[(ui(i), 1.0)], 0.0);
            rb.push(tag(RowFamily::UpstreamCapacity, i), &[], &[(ui(i), 1.0)], up.capacity);
            if i < n {
                let c = &cfg.cells[i];
                rb.push(tag(RowFamily::Supply, i), &[(xi(i), c.congestion_wave_speed)], &[(ui(i), 1.0)], c.congestion_wave_speed * c.jam_density);
                rb.push(tag(RowFamily::Capacity, i), &[], &[(ui(i), 1.0)], c.capacity);
            }
        }
        rb.push(
            RowTag { family: RowFamily::QueueCapacity, interface: n, step: m },
            &[((m + 1) * nx1 + n + 1, 1.0)],
            &[],
            st.queue_capacity,
        );
    }
    debug_assert_eq!(rb.rhs.len(), rows_total);

    let mut quad_weight = DVector::zeros(n_x);
    let mut lin_state_cost = DVector::zeros(n_x);
    for m in 0..=horizon {
        for (i, c) in cfg.cells.iter().enumerate() {
            quad_weight[m * nx1 + i] = ctrl.w_rho * c.length_km / c.jam_density;
            lin_state_cost[m * nx1 + i] = c.length_km;
        }
        quad_weight[m * nx1 + n] = ctrl.w_l / st.station_capacity;
        quad_weight[m * nx1 + n + 1] = ctrl.w_e / st.queue_capacity;
    }
    let mut lin_input_cost = DVector::zeros(n_u);
    for m in 0..horizon {
        for i in 0..=n {
            let weight = if i == 0 { ctrl.upstream_weight } else { cfg.cells[i - 1].length_km };
            lin_input_cost[m * nx1 + i] = ctrl.lambda * weight;
        }
        lin_input_cost[m * nx1 + n + 1] = ctrl.lambda * ctrl.w_r;
    }

    Ok(LiftedQP {
        horizon,
        start_step: window.start_step,
        dynamics,
        state_map,
        history_map,
        offset,
        service_flows: DVector::from_column_slice(&window.service_flows),
        initial_state: window.initial_state.clone(),
        station_inflow_at_start: window.station_inflow_at_start,
        ineq_state: rb.state.to_csr(),
        ineq_input: rb.input.to_csr(),
        ineq_rhs: DVector::from_vec(rb.rhs),
        rows: rb.tags,
        quad_weight,
        lin_state_cost,
        lin_input_cost,
        quad_scale: ctrl.quad_scale,
        state_reference: DVector::from_element(n_x, ctrl.state_reference),
    })
}

/// The program with the true split ratio, delay and demand.
pub fn ground_truth_lifted(cfg: &HighwayConfig, ctrl: &ControllerConfig, demand: &DemandProfile, window: &HorizonWindow) -> Result<LiftedQP> {
    build_lifted(cfg, ctrl, &Estimates::exact(cfg, demand), window)
}

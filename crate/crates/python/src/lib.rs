//! Python bindings: study configuration, demand profiles, plant simulation,
//! multi-day controller scenarios, the QP solvers and the experiment store.

use std::path::PathBuf;

use ctms::control::ControllerKind;
use ctms::experiment::{run_scenario, ScenarioSpec};
use ctms::metrics::MetricsReport;
use ctms::qp::{csr_from_triplets, AdmmSolver, InteriorPointSolver, QpProblem, QpSolver, SolveStatus};
use ctms::store::{ExperimentStore, Scalings};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(ctms_py, CtmsError, PyException);

fn to_py(e: ctms::Error) -> PyErr {
    CtmsError::new_err(e.to_string())
}

#[pyclass(name = "StudyConfig", from_py_object)]
#[derive(Clone)]
struct PyStudy {
    inner: ctms::StudyConfig,
}

#[pymethods]
impl PyStudy {
    /// The reference stretch: 15 cells, station between cells 4 and 6.
    #[staticmethod]
    fn reference() -> Self {
        Self { inner: ctms::config::reference_study() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ctms::StudyConfig::load(path).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ctms::StudyConfig::from_toml_str(text).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// Hash of the configuration, as stored in experiment manifests.
    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn day_length(&self) -> usize {
        self.inner.day_length()
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.inner.highway.num_cells()
    }

    #[getter]
    fn sample_time_s(&self) -> f64 {
        self.inner.highway.sample_time_s
    }

    #[getter]
    fn peak_start(&self) -> usize {
        self.inner.experiment.peak_start
    }

    #[setter]
    fn set_peak_start(&mut self, v: usize) {
        self.inner.experiment.peak_start = v;
    }

    #[getter]
    fn peak_end(&self) -> usize {
        self.inner.experiment.peak_end
    }

    #[setter]
    fn set_peak_end(&mut self, v: usize) {
        self.inner.experiment.peak_end = v;
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.controller.horizon
    }

    #[getter]
    fn update_period(&self) -> usize {
        self.inner.controller.update_period
    }

    #[getter]
    fn split_ratio(&self) -> f64 {
        self.inner.highway.station.split_ratio
    }

    #[getter]
    fn service_delay_steps(&self) -> usize {
        self.inner.highway.station.service_delay_steps
    }

    fn __repr__(&self) -> String {
        format!(
            "StudyConfig(cells={}, horizon={}, update_period={}, peak={}..{})",
            self.num_cells(),
            self.horizon(),
            self.update_period(),
            self.peak_start(),
            self.peak_end()
        )
    }
}

#[pyclass(name = "DemandProfile", from_py_object)]
#[derive(Clone)]
struct PyDemand {
    inner: ctms::DemandProfile,
}

#[pymethods]
impl PyDemand {
    #[new]
    fn new(values: Vec<f64>) -> PyResult<Self> {
        ctms::DemandProfile::new(values).map(|inner| Self { inner }).map_err(to_py)
    }

    /// Synthetic morning peak with the default shape.
    #[staticmethod]
    #[pyo3(signature = (steps, noise_std = 0.0, seed = 0))]
    fn peak(steps: usize, noise_std: f64, seed: u64) -> PyResult<Self> {
        let shape = ctms::PeakShape { noise_std, seed, ..Default::default() };
        shape.generate(steps).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ctms::DemandProfile::load(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Metrics", get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyMetrics {
    t_start: usize,
    t_end: usize,
    ttt: f64,
    twt: f64,
    tts: f64,
    delta_emax: f64,
    delta_ttt: Option<f64>,
    delta_twt: Option<f64>,
    delta_tts: Option<f64>,
}

impl From<&MetricsReport> for PyMetrics {
    fn from(m: &MetricsReport) -> Self {
        Self {
            t_start: m.t_start,
            t_end: m.t_end,
            ttt: m.ttt,
            twt: m.twt,
            tts: m.tts,
            delta_emax: m.delta_emax,
            delta_ttt: m.deltas.as_ref().map(|d| d.delta_ttt),
            delta_twt: m.deltas.as_ref().map(|d| d.delta_twt),
            delta_tts: m.deltas.as_ref().map(|d| d.delta_tts),
        }
    }
}

#[pymethods]
impl PyMetrics {
    fn __repr__(&self) -> String {
        format!("Metrics(ttt={:.4}, twt={:.4}, tts={:.4}, delta_emax={:.4})", self.ttt, self.twt, self.tts, self.delta_emax)
    }
}

#[pyclass(name = "Trajectory", skip_from_py_object)]
struct PyTrajectory {
    inner: ctms::Trajectory,
    cfg: ctms::HighwayConfig,
}

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    /// Cell densities per state, `steps + 1` rows.
    fn densities(&self) -> Vec<Vec<f64>> {
        self.inner.states.iter().map(|s| s.densities.clone()).collect()
    }

    /// Vehicles on the road and in the station per state.
    fn total_vehicles(&self) -> Vec<f64> {
        self.inner.states.iter().map(|s| s.total_vehicles(&self.cfg)).collect()
    }

    fn exit_queue(&self) -> Vec<f64> {
        self.inner.states.iter().map(|s| s.exit_queue).collect()
    }

    /// Interface flows per step, `N + 1` entries each.
    fn interface_flows(&self) -> Vec<Vec<f64>> {
        self.inner.outputs.iter().map(|o| o.interface_flows.clone()).collect()
    }

    fn station_outflow(&self) -> Vec<f64> {
        self.inner.outputs.iter().map(|o| o.station_outflow).collect()
    }

    /// Performance over the steps `t_start..=t_end` of this trajectory.
    fn metrics(&self, t_start: usize, t_end: usize) -> PyResult<PyMetrics> {
        MetricsReport::evaluate(&self.inner, t_start, t_end, &self.cfg).map(|m| PyMetrics::from(&m)).map_err(to_py)
    }
}

/// Simulate one day from an empty road. `metering[k]`, when given and not
/// None, caps the station release at step `k`.
#[pyfunction]
#[pyo3(signature = (study, demand, metering = None))]
fn simulate(study: &PyStudy, demand: &PyDemand, metering: Option<Vec<Option<f64>>>) -> PyResult<PyTrajectory> {
    let cfg = study.inner.highway.clone();
    let steps = study.inner.day_length();
    let policy = |k: usize, _: &ctms::PlantState| metering.as_ref().and_then(|m| m.get(k).copied().flatten());
    let inner = ctms::ctms::simulate(&cfg, &demand.inner, policy, ctms::PlantState::empty(&cfg), 0, steps).map_err(to_py)?;
    Ok(PyTrajectory { inner, cfg })
}

/// Run `controller` ("uncontrolled", "mpc_est", "mpc_gt" or "ilc") for
/// `days` repetitions of the same day with scaled parameter estimates.
/// Returns one Metrics per day; with `out` every day is stored there.
#[pyfunction]
#[pyo3(signature = (study, demand, controller, days = 1, r_beta = 1.0, r_delta = 1.0, r_demand = 1.0, baseline = None, out = None, scenario_id = None))]
#[allow(clippy::too_many_arguments)]
fn run(
    py: Python<'_>,
    study: &PyStudy,
    demand: &PyDemand,
    controller: &str,
    days: usize,
    r_beta: f64,
    r_delta: f64,
    r_demand: f64,
    baseline: Option<PathBuf>,
    out: Option<PathBuf>,
    scenario_id: Option<String>,
) -> PyResult<Vec<PyMetrics>> {
    let kind: ControllerKind = controller.parse().map_err(to_py)?;
    let spec = ScenarioSpec {
        id: scenario_id.unwrap_or_else(|| kind.to_string()),
        controller: kind,
        days,
        scalings: Scalings { r_beta, r_delta, r_demand },
    };
    let base = match baseline {
        Some(dir) => Some(ExperimentStore::open(dir).and_then(|s| s.load_metrics(0)).map_err(to_py)?),
        None => None,
    };
    let (study, demand) = (&study.inner, &demand.inner);
    let result = py.detach(|| run_scenario(study, demand, &spec, base.as_ref(), out.as_deref())).map_err(to_py)?;
    Ok(result.days.iter().map(|d| PyMetrics::from(&d.metrics)).collect())
}

/// Metrics of every day sealed in an experiment store.
#[pyfunction]
fn load_metrics(path: PathBuf) -> PyResult<Vec<PyMetrics>> {
    let store = ExperimentStore::open(path).map_err(to_py)?;
    Ok(store.all_metrics().map_err(to_py)?.iter().map(PyMetrics::from).collect())
}

fn dense_triplets(m: &[Vec<f64>], cols: usize) -> PyResult<Vec<(usize, usize, f64)>> {
    let mut t = Vec::new();
    for (r, row) in m.iter().enumerate() {
        if row.len() != cols {
            return Err(CtmsError::new_err(format!("row {r} has {} entries, expected {cols}", row.len())));
        }
        t.extend(row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, v)| (r, c, *v)));
    }
    Ok(t)
}

/// Minimize 1/2 z'Pz + q'z subject to A z = b, G z <= h and z_i >= 0 where
/// `nonneg[i]`. Matrices are given as lists of rows. Returns
/// `(z, objective, status)`.
#[pyfunction]
#[pyo3(signature = (p, q, g = None, h = None, a = None, b = None, nonneg = None, solver = "interior_point"))]
#[allow(clippy::too_many_arguments)]
fn solve_qp(
    p: Vec<Vec<f64>>,
    q: Vec<f64>,
    g: Option<Vec<Vec<f64>>>,
    h: Option<Vec<f64>>,
    a: Option<Vec<Vec<f64>>>,
    b: Option<Vec<f64>>,
    nonneg: Option<Vec<bool>>,
    solver: &str,
) -> PyResult<(Vec<f64>, f64, String)> {
    let n = q.len();
    let (g, h) = (g.unwrap_or_default(), h.unwrap_or_default());
    let (a, b) = (a.unwrap_or_default(), b.unwrap_or_default());
    let problem = QpProblem::new(
        csr_from_triplets(p.len(), n, &dense_triplets(&p, n)?),
        q,
        csr_from_triplets(a.len(), n, &dense_triplets(&a, n)?),
        b,
        csr_from_triplets(g.len(), n, &dense_triplets(&g, n)?),
        h,
        nonneg.unwrap_or_else(|| vec![false; n]),
    )
    .map_err(to_py)?;
    let backend: Box<dyn QpSolver> = match solver {
        "interior_point" => Box::new(InteriorPointSolver::default()),
        "admm" => Box::new(AdmmSolver::default()),
        other => return Err(CtmsError::new_err(format!("unknown solver `{other}` (interior_point, admm)"))),
    };
    let sol = backend.solve(&problem, None).map_err(to_py)?;
    let status = match sol.status {
        SolveStatus::Optimal => "optimal",
        SolveStatus::MaxIterations => "max_iterations",
        SolveStatus::InfeasibleDetected => "infeasible",
    };
    Ok((sol.z, sol.objective, status.to_string()))
}

#[pymodule]
fn ctms_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CtmsError", m.py().get_type::<CtmsError>())?;
    m.add_class::<PyStudy>()?;
    m.add_class::<PyDemand>()?;
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(load_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    Ok(())
}

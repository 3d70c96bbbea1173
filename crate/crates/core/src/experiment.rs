//! Multi-day scenarios: repeat the same traffic day with one controller and
//! persist every day, and batches of such scenarios.

use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::StudyConfig;
use crate::control::{make_solver, run_day, ControllerKind, DayOutcome, DaySetup, PlanLogEntry};
use crate::demand::DemandProfile;
use crate::error::{Error, Result};
use crate::lifted::Estimates;
use crate::metrics::{compare, MetricsReport, SummaryRow};
use crate::plot::{Panel, Series};
use crate::store::{ExperimentStore, Scalings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub controller: ControllerKind,
    pub days: usize,
    pub scalings: Scalings,
}

impl ScenarioSpec {
    /// Controller used on day `d`: the learning controller has no previous
    /// day on day 0 and runs receding-horizon control with its estimates.
    pub fn controller_on(&self, d: usize) -> ControllerKind {
        match (self.controller, d) {
            (ControllerKind::Ilc, 0) => ControllerKind::MpcEst,
            (kind, _) => kind,
        }
    }
}

/// The learning scenarios: each parameter under- and overestimated by 20%
/// while the other two are exact.
pub fn estimation_error_scenarios(days: usize) -> Vec<ScenarioSpec> {
    let mut specs = Vec::new();
    for (name, which) in [("beta", 0), ("delta", 1), ("demand", 2)] {
        for r in [0.8, 1.2] {
            let mut s = Scalings::default();
            match which {
                0 => s.r_beta = r,
                1 => s.r_delta = r,
                _ => s.r_demand = r,
            }
            specs.push(ScenarioSpec { id: format!("ilc_{name}_{r}"), controller: ControllerKind::Ilc, days, scalings: s });
        }
    }
    specs
}

/// The two learning scenarios with all three parameters scaled together.
pub fn simultaneous_error_scenarios(days: usize) -> Vec<ScenarioSpec> {
    [0.8, 1.2]
        .into_iter()
        .map(|r| ScenarioSpec {
            id: format!("ilc_all_{r}"),
            controller: ControllerKind::Ilc,
            days,
            scalings: Scalings { r_beta: r, r_delta: r, r_demand: r },
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DayResult {
    pub controller: ControllerKind,
    pub outcome: DayOutcome,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub spec: ScenarioSpec,
    pub days: Vec<DayResult>,
}

impl ScenarioResult {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.days.iter().map(|d| d.metrics.clone()).collect()
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.days.iter().enumerate().map(|(d, r)| SummaryRow::new(self.spec.id.clone(), d, &r.metrics)).collect()
    }

    pub fn plans(&self) -> Vec<PlanLogEntry> {
        self.days.iter().flat_map(|d| d.outcome.plans.iter().cloned()).collect()
    }
}

/// Run `spec` day by day. With `out` every day is sealed in a new store
/// there; with `baseline` each day's metrics carry the differences to the
/// baseline's first day.
pub fn run_scenario(
    study: &StudyConfig,
    demand: &DemandProfile,
    spec: &ScenarioSpec,
    baseline: Option<&MetricsReport>,
    out: Option<&Path>,
) -> Result<ScenarioResult> {
    if spec.days == 0 {
        return Err(Error::config("a scenario needs at least one day"));
    }
    if demand.len() < study.day_length() {
        return Err(Error::config(format!("demand covers {} steps, a day needs {}", demand.len(), study.day_length())));
    }
    let s = spec.scalings;
    let estimates = Estimates::scaled(&study.highway, demand, s.r_beta, s.r_delta, s.r_demand)?;
    let solver = make_solver(study.controller.solver);
    let setup = DaySetup { study, demand, estimates: &estimates, solver: solver.as_ref() };
    let mut store = match out {
        Some(dir) => Some(ExperimentStore::create(dir, &spec.id, study, spec.controller, s)?),
        None => None,
    };
    let (t_s, t_e) = (study.experiment.peak_start, study.experiment.peak_end);
    let mut days: Vec<DayResult> = Vec::with_capacity(spec.days);
    for d in 0..spec.days {
        let controller = spec.controller_on(d);
        let prev = days.last().map(|r| &r.outcome.record);
        let outcome = run_day(&setup, controller, d, prev)?;
        let mut metrics = MetricsReport::evaluate(&outcome.trajectory, t_s, t_e, &study.highway)?;
        if let Some(b) = baseline {
            metrics = metrics.with_baseline(b)?;
        }
        info!(
            "{} day {d} ({controller}): TTT {:.3}, TWT {:.3}, delta_emax {:.4}",
            spec.id, metrics.ttt, metrics.twt, metrics.delta_emax
        );
        if let Some(st) = store.as_mut() {
            st.save_day(study, &outcome.record, &metrics, &outcome.plans)?;
        }
        days.push(DayResult { controller, outcome, metrics });
    }
    Ok(ScenarioResult { spec: spec.clone(), days })
}

/// Ground-truth receding-horizon run followed by `specs`, each in its own
/// subdirectory of `out` and compared against the ground-truth day.
/// Scenarios run on the current rayon pool.
pub fn run_batch(
    study: &StudyConfig,
    demand: &DemandProfile,
    specs: &[ScenarioSpec],
    out: Option<&Path>,
) -> Result<(ScenarioResult, Vec<ScenarioResult>)> {
    let gt_spec = ScenarioSpec { id: "mpc_gt".into(), controller: ControllerKind::MpcGt, days: 1, scalings: Scalings::default() };
    let gt = run_scenario(study, demand, &gt_spec, None, out.map(|o| o.join(&gt_spec.id)).as_deref())?;
    let baseline = gt.days[0].metrics.clone();
    let results = specs
        .par_iter()
        .map(|spec| run_scenario(study, demand, spec, Some(&baseline), out.map(|o| o.join(&spec.id)).as_deref()))
        .collect::<Result<Vec<_>>>()?;
    Ok((gt, results))
}

/// Per-day differences of one scenario to the ground-truth baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub scenario: String,
    pub day: usize,
    pub delta_ttt: f64,
    pub delta_twt: f64,
    pub delta_tts: f64,
    pub delta_emax: f64,
}

/// Differences of every day in `reports` to `baseline`.
pub fn delta_rows(scenario: &str, reports: &[MetricsReport], baseline: &MetricsReport) -> Result<Vec<DeltaRow>> {
    reports
        .iter()
        .enumerate()
        .map(|(day, r)| {
            let d = compare(r, baseline)?;
            Ok(DeltaRow {
                scenario: scenario.to_string(),
                day,
                delta_ttt: d.delta_ttt,
                delta_twt: d.delta_twt,
                delta_tts: d.delta_tts,
                delta_emax: r.delta_emax,
            })
        })
        .collect()
}

pub fn write_delta_csv<W: std::io::Write>(rows: &[DeltaRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One panel per difference, one curve per scenario.
pub fn delta_panels(rows: &[DeltaRow]) -> Vec<Panel> {
    let mut scenarios: Vec<&str> = Vec::new();
    for r in rows {
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
    }
    type Pick = (&'static str, fn(&DeltaRow) -> f64);
    let pick: [Pick; 4] = [
        ("delta TTT [veh h]", |r| r.delta_ttt),
        ("delta TWT [veh h]", |r| r.delta_twt),
        ("delta TTS [veh h]", |r| r.delta_tts),
        ("delta e_max", |r| r.delta_emax),
    ];
    pick.iter()
        .map(|(title, f)| Panel {
            title: title.to_string(),
            series: scenarios
                .iter()
                .map(|s| Series {
                    label: s.to_string(),
                    points: rows.iter().filter(|r| r.scenario == *s).map(|r| (r.day as f64, f(r))).collect(),
                })
                .collect(),
        })
        .collect()
}

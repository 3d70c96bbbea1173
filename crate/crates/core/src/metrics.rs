//! Congestion and queue metrics over a closed step window [t_s, t_e].
//!
//! Sums are multiplied by the sampling time in hours so that TTT, TWT and
//! TTS come out in veh·h.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::HighwayConfig;
use crate::ctms::Trajectory;
use crate::error::{Error, Result};

/// Per-step quantities the metrics need, so that both live trajectories and
/// stored records can be evaluated.
pub trait StateSeries {
    /// Absolute step of the first stored state.
    fn first_step(&self) -> usize;
    fn num_states(&self) -> usize;
    /// Vehicles on the stretch at absolute step `k`.
    fn vehicles_on_road(&self, k: usize, cfg: &HighwayConfig) -> f64;
    fn exit_queue(&self, k: usize) -> f64;
}

impl StateSeries for Trajectory {
    fn first_step(&self) -> usize {
        self.start_step
    }
    fn num_states(&self) -> usize {
        self.states.len()
    }
    fn vehicles_on_road(&self, k: usize, cfg: &HighwayConfig) -> f64 {
        self.states[k - self.start_step].vehicles_on_road(cfg)
    }
    fn exit_queue(&self, k: usize) -> f64 {
        self.states[k - self.start_step].exit_queue
    }
}

fn check_range<S: StateSeries + ?Sized>(series: &S, t_s: usize, t_e: usize) -> Result<()> {
    let first = series.first_step();
    let last = first + series.num_states().saturating_sub(1);
    if t_s > t_e || t_s < first || t_e > last || series.num_states() == 0 {
        return Err(Error::Dimension(format!(
            "metric window [{t_s}, {t_e}] outside stored steps [{first}, {last}]"
        )));
    }
    Ok(())
}

/// Total travel time, T · Σ_k Σ_i rho_i(k) L_i.
pub fn ttt<S: StateSeries + ?Sized>(series: &S, t_s: usize, t_e: usize, cfg: &HighwayConfig) -> Result<f64> {
    check_range(series, t_s, t_e)?;
    let sum: f64 = (t_s..=t_e).map(|k| series.vehicles_on_road(k, cfg)).sum();
    Ok(cfg.sample_time_h() * sum)
}

/// Total waiting time in the exit queue, T · Σ_k e(k).
pub fn twt<S: StateSeries + ?Sized>(series: &S, t_s: usize, t_e: usize, cfg: &HighwayConfig) -> Result<f64> {
    check_range(series, t_s, t_e)?;
    let sum: f64 = (t_s..=t_e).map(|k| series.exit_queue(k)).sum();
    Ok(cfg.sample_time_h() * sum)
}

/// Largest relative exceedance of the queue capacity, 0 if never exceeded.
pub fn delta_emax<S: StateSeries + ?Sized>(series: &S, t_s: usize, t_e: usize, cfg: &HighwayConfig) -> Result<f64> {
    check_range(series, t_s, t_e)?;
    let cap = cfg.station.queue_capacity;
    Ok((t_s..=t_e)
        .map(|k| (series.exit_queue(k) - cap).max(0.0) / cap)
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub delta_ttt: f64,
    pub delta_twt: f64,
    pub delta_tts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub t_start: usize,
    pub t_end: usize,
    pub ttt: f64,
    pub twt: f64,
    pub tts: f64,
    pub delta_emax: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Deltas>,
}

impl MetricsReport {
    pub fn evaluate<S: StateSeries + ?Sized>(series: &S, t_s: usize, t_e: usize, cfg: &HighwayConfig) -> Result<Self> {
        let ttt = ttt(series, t_s, t_e, cfg)?;
        let twt = twt(series, t_s, t_e, cfg)?;
        Ok(Self {
            t_start: t_s,
            t_end: t_e,
            ttt,
            twt,
            tts: ttt + twt,
            delta_emax: delta_emax(series, t_s, t_e, cfg)?,
            deltas: None,
        })
    }

    /// Attach differences to `baseline` (this minus baseline).
    pub fn with_baseline(mut self, baseline: &MetricsReport) -> Result<Self> {
        self.deltas = Some(compare(&self, baseline)?);
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Componentwise differences `report - baseline` over the same window.
pub fn compare(report: &MetricsReport, baseline: &MetricsReport) -> Result<Deltas> {
    if (report.t_start, report.t_end) != (baseline.t_start, baseline.t_end) {
        return Err(Error::Dimension(format!(
            "cannot compare window [{}, {}] with baseline window [{}, {}]",
            report.t_start, report.t_end, baseline.t_start, baseline.t_end
        )));
    }
    Ok(Deltas {
        delta_ttt: report.ttt - baseline.ttt,
        delta_twt: report.twt - baseline.twt,
        delta_tts: report.tts - baseline.tts,
    })
}

/// One line of a scenario summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub day: usize,
    pub ttt: f64,
    pub twt: f64,
    pub tts: f64,
    pub delta_emax: f64,
    pub delta_ttt: Option<f64>,
    pub delta_twt: Option<f64>,
    pub delta_tts: Option<f64>,
}

impl SummaryRow {
    pub fn new(scenario: impl Into<String>, day: usize, report: &MetricsReport) -> Self {
        Self {
            scenario: scenario.into(),
            day,
            ttt: report.ttt,
            twt: report.twt,
            tts: report.tts,
            delta_emax: report.delta_emax,
            delta_ttt: report.deltas.map(|d| d.delta_ttt),
            delta_twt: report.deltas.map(|d| d.delta_twt),
            delta_tts: report.deltas.map(|d| d.delta_tts),
        }
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

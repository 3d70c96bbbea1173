//! Static SVG line charts of per-day metric differences.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};

/// One labelled curve: (day, value) points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// One subplot with its own y axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

/// Values below this are drawn at it on a logarithmic axis.
pub const LOG_FLOOR: f64 = 1e-6;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn y_range(panel: &Panel, log: bool) -> (f64, f64) {
    let ys = panel.series.iter().flat_map(|s| s.points.iter().map(|p| if log { p.1.abs().max(LOG_FLOOR) } else { p.1 }));
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if !lo.is_finite() {
        return if log { (LOG_FLOOR, 1.0) } else { (-1.0, 1.0) };
    }
    if log {
        (lo / 2.0, hi * 2.0)
    } else {
        let pad = ((hi - lo) * 0.1).max(1e-9);
        (lo - pad, hi + pad)
    }
}

/// Write the panels side by side into one SVG file. With `log`, magnitudes
/// are shown on a logarithmic y axis.
pub fn write_panels(path: &Path, panels: &[Panel], log: bool) -> Result<()> {
    if panels.is_empty() {
        return Err(Error::config("nothing to plot"));
    }
    let width = 420 * panels.len() as u32;
    let root = SVGBackend::new(path, (width, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let areas = root.split_evenly((1, panels.len()));
    for (area, panel) in areas.iter().zip(panels) {
        let max_day = panel.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).fold(1.0, f64::max);
        let (lo, hi) = y_range(panel, log);
        let mut builder = ChartBuilder::on(area);
        builder.caption(&panel.title, ("sans-serif", 18)).margin(10).x_label_area_size(35).y_label_area_size(60);
        let colors = |i: usize| Palette99::pick(i).to_rgba();
        if log {
            let mut chart = builder.build_cartesian_2d(0.0..max_day, (lo..hi).log_scale()).map_err(plot_err)?;
            chart.configure_mesh().x_desc("day").y_desc("|value|").draw().map_err(plot_err)?;
            for (i, s) in panel.series.iter().enumerate() {
                let pts = s.points.iter().map(|&(x, y)| (x, y.abs().max(LOG_FLOOR)));
                chart
                    .draw_series(LineSeries::new(pts, colors(i).stroke_width(2)))
                    .map_err(plot_err)?
                    .label(&s.label)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], colors(i)));
            }
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        } else {
            let mut chart = builder.build_cartesian_2d(0.0..max_day, lo..hi).map_err(plot_err)?;
            chart.configure_mesh().x_desc("day").y_desc("value").draw().map_err(plot_err)?;
            for (i, s) in panel.series.iter().enumerate() {
                chart
                    .draw_series(LineSeries::new(s.points.iter().copied(), colors(i).stroke_width(2)))
                    .map_err(plot_err)?
                    .label(&s.label)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], colors(i)));
            }
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

//! On-disk layout of one scenario: a manifest plus one record, one metrics
//! file and one plan log per day.
//!
//! ```text
//! <root>/manifest.json
//! <root>/day_<d>.csv          step, x_0..x_{N+1}, u_0..u_{N+1}, phi_le, s, demand, metering
//! <root>/metrics_day_<d>.json
//! <root>/plans_day_<d>.csv
//! ```
//!
//! Days are appended in order and never rewritten. Every file is written to
//! a temporary name and renamed into place, the manifest last, so a crash
//! leaves the previous sealed state intact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{HighwayConfig, StudyConfig};
use crate::control::{write_plan_log, ControllerKind, IterationRecord, PlanLogEntry, RecordWindow};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub const STORE_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Parameter scalings of a scenario: estimates are the true values times these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalings {
    pub r_beta: f64,
    pub r_delta: f64,
    pub r_demand: f64,
}

impl Default for Scalings {
    fn default() -> Self {
        Self { r_beta: 1.0, r_delta: 1.0, r_demand: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub scenario_id: String,
    pub config_hash: String,
    pub controller: ControllerKind,
    pub scalings: Scalings,
    /// Evaluation window [t_s, t_e] of the stored metrics.
    pub peak_start: usize,
    pub peak_end: usize,
    /// Number of sealed days; their files are day_0 .. day_{days-1}.
    pub days: usize,
}

/// Handle on one scenario directory.
#[derive(Debug, Clone)]
pub struct ExperimentStore {
    root: PathBuf,
    manifest: Manifest,
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    // Shortest representation that parses back to the same bits.
    format!("{v:?}")
}

fn parse(field: &str, what: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|e| Error::Store(format!("bad {what} value `{field}`: {e}")))
}

/// Serialize a record as CSV. The last row carries only the final state.
pub fn write_record_csv<W: Write>(record: &IterationRecord, writer: W) -> Result<()> {
    let nx1 = record.states.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["step".to_string()];
    header.extend((0..nx1).map(|i| format!("x_{i}")));
    header.extend((0..nx1).map(|i| format!("u_{i}")));
    header.extend(["phi_le", "s", "demand", "metering"].map(String::from));
    w.write_record(&header)?;
    for (i, x) in record.states.iter().enumerate() {
        let mut row = vec![(record.start_step + i).to_string()];
        row.extend(x.iter().map(|v| fmt(*v)));
        if i < record.steps() {
            row.extend(record.inputs[i].iter().map(|v| fmt(*v)));
            row.push(fmt(record.service_flows[i]));
            row.push(fmt(record.station_inflows[i]));
            row.push(fmt(record.upstream_demand[i]));
            row.push(record.metering[i].map(fmt).unwrap_or_default());
        } else {
            row.extend(std::iter::repeat_n(String::new(), nx1 + 4));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a record written by [`write_record_csv`].
pub fn read_record_csv<R: std::io::Read>(day_index: usize, reader: R, cfg: &HighwayConfig) -> Result<IterationRecord> {
    let nx1 = cfg.num_cells() + 2;
    let mut r = csv::Reader::from_reader(reader);
    let width = r.headers()?.len();
    if width != 2 * nx1 + 5 {
        return Err(Error::Store(format!("record has {width} columns, expected {}", 2 * nx1 + 5)));
    }
    let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    let Some(last) = rows.last() else {
        return Err(Error::Store("record holds no rows".into()));
    };
    let start_step: usize = rows[0][0].parse().map_err(|e| Error::Store(format!("bad step: {e}")))?;
    let mut rec = IterationRecord {
        day_index,
        start_step,
        states: Vec::with_capacity(rows.len()),
        inputs: Vec::with_capacity(rows.len() - 1),
        service_flows: Vec::new(),
        station_inflows: Vec::new(),
        upstream_demand: Vec::new(),
        metering: Vec::new(),
    };
    for (i, row) in rows.iter().enumerate() {
        let step: usize = row[0].parse().map_err(|e| Error::Store(format!("bad step: {e}")))?;
        if step != start_step + i {
            return Err(Error::Store(format!("record rows are not consecutive at step {step}")));
        }
        rec.states.push((1..=nx1).map(|c| parse(&row[c], "state")).collect::<Result<_>>()?);
        if i + 1 < rows.len() {
            rec.inputs.push((nx1 + 1..=2 * nx1).map(|c| parse(&row[c], "input")).collect::<Result<_>>()?);
            rec.service_flows.push(parse(&row[2 * nx1 + 1], "phi_le")?);
            rec.station_inflows.push(parse(&row[2 * nx1 + 2], "s")?);
            rec.upstream_demand.push(parse(&row[2 * nx1 + 3], "demand")?);
            let m = &row[2 * nx1 + 4];
            rec.metering.push(if m.is_empty() { None } else { Some(parse(m, "metering")?) });
        }
    }
    if last.iter().skip(nx1 + 1).any(|f| !f.is_empty()) {
        return Err(Error::Store("last record row must hold only the final state".into()));
    }
    rec.validate(cfg)?;
    Ok(rec)
}

impl ExperimentStore {
    /// Start a new scenario in `root`, which must not hold one already.
    pub fn create(root: impl AsRef<Path>, scenario_id: &str, study: &StudyConfig, controller: ControllerKind, scalings: Scalings) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if root.join(MANIFEST).exists() {
            return Err(Error::Store(format!(
                "{} already holds a scenario; stored days are never rewritten, use a new directory",
                root.display()
            )));
        }
        fs::create_dir_all(&root)?;
        let manifest = Manifest {
            schema_version: STORE_SCHEMA_VERSION,
            scenario_id: scenario_id.to_string(),
            config_hash: study.hash(),
            controller,
            scalings,
            peak_start: study.experiment.peak_start,
            peak_end: study.experiment.peak_end,
            days: 0,
        };
        let store = Self { root, manifest };
        store.write_manifest()?;
        Ok(store)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Store(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.schema_version != STORE_SCHEMA_VERSION {
            return Err(Error::Store(format!("unsupported store schema_version {}", manifest.schema_version)));
        }
        for d in 0..manifest.days {
            if !root.join(format!("day_{d}.csv")).exists() {
                return Err(Error::Store(format!("manifest lists {} days but day_{d}.csv is missing", manifest.days)));
            }
        }
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn days(&self) -> usize {
        self.manifest.days
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_atomically(&self.root.join(MANIFEST), text.as_bytes())
    }

    fn check_config(&self, study: &StudyConfig) -> Result<()> {
        let hash = study.hash();
        if hash != self.manifest.config_hash {
            return Err(Error::Store(format!(
                "config hash {hash} differs from the scenario's {}; days of different configs cannot be mixed",
                self.manifest.config_hash
            )));
        }
        Ok(())
    }

    /// Seal the next day.
    pub fn save_day(&mut self, study: &StudyConfig, record: &IterationRecord, metrics: &MetricsReport, plans: &[PlanLogEntry]) -> Result<()> {
        self.check_config(study)?;
        let d = self.manifest.days;
        if record.day_index != d {
            return Err(Error::Store(format!("expected day {d} next, got day {}", record.day_index)));
        }
        record.validate(&study.highway)?;
        let mut buf = Vec::new();
        write_record_csv(record, &mut buf)?;
        write_atomically(&self.root.join(format!("day_{d}.csv")), &buf)?;
        write_atomically(&self.root.join(format!("metrics_day_{d}.json")), metrics.to_json()?.as_bytes())?;
        let mut buf = Vec::new();
        write_plan_log(plans, &mut buf)?;
        write_atomically(&self.root.join(format!("plans_day_{d}.csv")), &buf)?;
        self.manifest.days = d + 1;
        self.write_manifest()
    }

    fn check_day(&self, d: usize) -> Result<()> {
        if d >= self.manifest.days {
            return Err(Error::MissingData(format!("day {d} is not stored (scenario holds {} days)", self.manifest.days)));
        }
        Ok(())
    }

    pub fn load_day(&self, d: usize, study: &StudyConfig) -> Result<IterationRecord> {
        self.check_config(study)?;
        self.check_day(d)?;
        let f = fs::File::open(self.root.join(format!("day_{d}.csv")))?;
        read_record_csv(d, f, &study.highway)
    }

    /// Slice of day `d` over [k0, k0+K], with the record's tail rule.
    pub fn load_window(&self, d: usize, k0: usize, len: usize, study: &StudyConfig) -> Result<RecordWindow> {
        self.load_day(d, study)?.window(k0, len, &study.highway)
    }

    pub fn load_metrics(&self, d: usize) -> Result<MetricsReport> {
        self.check_day(d)?;
        let text = fs::read_to_string(self.root.join(format!("metrics_day_{d}.json")))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn all_metrics(&self) -> Result<Vec<MetricsReport>> {
        (0..self.manifest.days).map(|d| self.load_metrics(d)).collect()
    }
}

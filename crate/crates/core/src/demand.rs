//! Upstream demand profiles: CSV ingestion and a parameterized morning-peak
//! generator.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEMAND_HEADER: [&str; 2] = ["step", "demand_veh_per_h"];

/// Exogenous upstream demand, one value per step [veh/h].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    values: Vec<f64>,
}

impl DemandProfile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((k, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::config(format!("demand at step {k} must be finite and >= 0, got {v}")));
        }
        Ok(Self { values })
    }

    pub fn constant(level: f64, steps: usize) -> Result<Self> {
        Self::new(vec![level; steps])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Demand at step `k`; steps past the end repeat the last value.
    pub fn at(&self, k: usize) -> f64 {
        match self.values.get(k) {
            Some(v) => *v,
            None => self.values.last().copied().unwrap_or(0.0),
        }
    }

    /// `K` consecutive values starting at `start`, with the tail rule applied.
    pub fn window(&self, start: usize, len: usize) -> Vec<f64> {
        (start..start + len).map(|k| self.at(k)).collect()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || headers[0] != *DEMAND_HEADER[0] || headers[1] != *DEMAND_HEADER[1] {
            return Err(Error::config(format!(
                "demand CSV header must be `{},{}`, got `{}`",
                DEMAND_HEADER[0],
                DEMAND_HEADER[1],
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let step: usize = rec[0]
                .parse()
                .map_err(|_| Error::config(format!("demand CSV row {row}: bad step `{}`", &rec[0])))?;
            if step != row {
                return Err(Error::config(format!("demand CSV steps must be 0,1,2,...; row {row} has step {step}")));
            }
            let v: f64 = rec[1]
                .parse()
                .map_err(|_| Error::config(format!("demand CSV row {row}: bad value `{}`", &rec[1])))?;
            values.push(v);
        }
        Self::new(values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(DEMAND_HEADER)?;
        for (k, v) in self.values.iter().enumerate() {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Shape of a synthetic morning peak: a smooth rise from `base_level` to a
/// `peak_level` plateau, a step down to a `shoulder_level` plateau and a fall
/// back to the base. Step counts are in sampling intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakShape {
    pub base_level: f64,
    pub peak_level: f64,
    pub shoulder_level: f64,
    pub rise_start: usize,
    pub rise_len: usize,
    pub plateau_len: usize,
    pub transition_len: usize,
    pub shoulder_len: usize,
    pub fall_len: usize,
    /// Centered moving-average window; 0 or 1 disables smoothing.
    pub smoothing: usize,
    /// Standard deviation of additive Gaussian noise [veh/h].
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PeakShape {
    fn default() -> Self {
        Self {
            base_level: 1000.0,
            peak_level: 1800.0,
            shoulder_level: 1640.0,
            rise_start: 180,
            rise_len: 360,
            plateau_len: 510,
            transition_len: 90,
            shoulder_len: 300,
            fall_len: 240,
            smoothing: 30,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl PeakShape {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_level", self.base_level),
            ("peak_level", self.peak_level),
            ("shoulder_level", self.shoulder_level),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn level_at(&self, k: usize) -> f64 {
        let lerp = |from: f64, to: f64, pos: usize, len: usize| {
            if len == 0 {
                to
            } else {
                from + (to - from) * smoothstep(pos as f64 / len as f64)
            }
        };
        let mut edge = self.rise_start;
        if k < edge {
            return self.base_level;
        }
        let phases = [
            (self.rise_len, self.base_level, self.peak_level),
            (self.plateau_len, self.peak_level, self.peak_level),
            (self.transition_len, self.peak_level, self.shoulder_level),
            (self.shoulder_len, self.shoulder_level, self.shoulder_level),
            (self.fall_len, self.shoulder_level, self.base_level),
        ];
        for (len, from, to) in phases {
            if k < edge + len {
                return lerp(from, to, k - edge, len);
            }
            edge += len;
        }
        self.base_level
    }

    pub fn generate(&self, steps: usize) -> Result<DemandProfile> {
        if steps == 0 {
            return Err(Error::config("demand generator needs at least one step"));
        }
        self.validate()?;
        let raw: Vec<f64> = (0..steps).map(|k| self.level_at(k)).collect();
        let mut values = if self.smoothing > 1 {
            let half = self.smoothing / 2;
            (0..steps)
                .map(|k| {
                    let lo = k.saturating_sub(half);
                    let hi = (k + half + 1).min(steps);
                    raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
                })
                .collect()
        } else {
            raw
        };
        if self.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let normal = Normal::new(0.0, self.noise_std).map_err(|e| Error::config(e.to_string()))?;
            for v in values.iter_mut() {
                *v = (*v + normal.sample(&mut rng)).max(0.0);
            }
        }
        DemandProfile::new(values)
    }
}

//! Synthetic multi-seasonal series for desk-scale runs.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Frequency, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub length: usize,
    pub channels: usize,
    pub components: Vec<Sinusoid>,
    #[serde(default)]
    pub trend: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// Constant added to every value.
    #[serde(default)]
    pub level: f64,
    /// Extra phase per channel index, in radians.
    #[serde(default)]
    pub phase_step: f64,
    #[serde(default)]
    pub frequency: Frequency,
    #[serde(default)]
    pub seed: u64,
}

fn default_name() -> String {
    "synthetic".into()
}

impl SynthSpec {
    /// Two-channel series with daily and weekly cycles on hourly data.
    pub fn two_season(length: usize, noise_std: f64, seed: u64) -> Self {
        SynthSpec {
            name: default_name(),
            length,
            channels: 2,
            components: vec![
                Sinusoid {
                    period: 24.0,
                    amplitude: 1.0,
                    phase: 0.0,
                },
                Sinusoid {
                    period: 168.0,
                    amplitude: 0.5,
                    phase: 0.0,
                },
            ],
            trend: 0.0,
            noise_std,
            level: 10.0,
            phase_step: PI / 3.0,
            frequency: Frequency::Hourly,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic length and channel count must be positive".into()));
        }
        if self.components.iter().any(|c| !(c.period > 0.0)) {
            return Err(Error::Config("sinusoid periods must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise std must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Noise-free value of channel `c` at step `t`.
    pub fn clean_value(&self, t: usize, c: usize) -> f64 {
        let tf = t as f64;
        let seasonal: f64 = self
            .components
            .iter()
            .map(|s| s.amplitude * (2.0 * PI * tf / s.period + s.phase + self.phase_step * c as f64).sin())
            .sum();
        self.level + self.trend * tf + seasonal
    }

    pub fn generate(&self) -> Result<TimeSeriesDataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut values = Tensor::zeros(self.length, self.channels);
        for t in 0..self.length {
            for c in 0..self.channels {
                let eps = if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                values.set(t, c, self.clean_value(t, c) + eps);
            }
        }
        let names = (0..self.channels).map(|c| format!("ch{c}")).collect();
        TimeSeriesDataset::new(self.name.clone(), values, names, self.frequency)
    }
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Write the series as CSV with a leading `date` step column, plus a JSON sidecar holding the generator settings.
pub fn write_synth(spec: &SynthSpec, path: &Path) -> Result<TimeSeriesDataset> {
    let ds = spec.generate()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut header = vec!["date".to_string()];
    header.extend(ds.column_names.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for t in 0..ds.len() {
        let mut row = vec![t.to_string()];
        row.extend(ds.values.row_slice(t).iter().map(|v| format!("{v:.12e}")));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = sidecar_path(path);
    let text = serde_json::to_string_pretty(spec).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
    Ok(ds)
}

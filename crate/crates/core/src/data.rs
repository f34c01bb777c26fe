//! Dataset ingestion, chronological splits, sliding windows and reversible
//! instance normalisation.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Sampling frequency tag carried by a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    #[default]
    Hourly,
    #[serde(rename = "15min")]
    Min15,
    #[serde(rename = "10min")]
    Min10,
    Daily,
    Weekly,
    Monthly,
    Quarterly,
    Yearly,
    Other,
}

impl Frequency {
    /// Seasonal period used by MASE and Naive2.
    ///
    /// Weekly collapses to 1 and daily uses 7; sub-hourly data uses the
    /// number of samples per day.
    pub fn season_length(self) -> usize {
        match self {
            Frequency::Hourly => 24,
            Frequency::Min15 => 96,
            Frequency::Min10 => 144,
            Frequency::Daily => 7,
            Frequency::Weekly => 1,
            Frequency::Monthly => 12,
            Frequency::Quarterly => 4,
            Frequency::Yearly => 1,
            Frequency::Other => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Config(format!("unknown frequency `{s}`")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Frequency::Hourly => "hourly",
            Frequency::Min15 => "15min",
            Frequency::Min10 => "10min",
            Frequency::Daily => "daily",
            Frequency::Weekly => "weekly",
            Frequency::Monthly => "monthly",
            Frequency::Quarterly => "quarterly",
            Frequency::Yearly => "yearly",
            Frequency::Other => "other",
        }
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A `T×D` multivariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub values: Tensor,
    pub column_names: Vec<String>,
    pub frequency: Frequency,
}

impl TimeSeriesDataset {
    pub fn new(
        name: impl Into<String>,
        values: Tensor,
        column_names: Vec<String>,
        frequency: Frequency,
    ) -> Result<Self> {
        if column_names.len() != values.cols() {
            return Err(Error::Data(format!(
                "{} column names for {} channels",
                column_names.len(),
                values.cols()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(TimeSeriesDataset {
            name: name.into(),
            values,
            column_names,
            frequency,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    fn with_rows(&self, start: usize, end: usize, suffix: &str) -> TimeSeriesDataset {
        TimeSeriesDataset {
            name: format!("{}{suffix}", self.name),
            values: self.values.slice_rows(start, end),
            column_names: self.column_names.clone(),
            frequency: self.frequency,
        }
    }
}

const TIMESTAMP_HEADERS: [&str; 5] = ["date", "time", "timestamp", "datetime", "ds"];

fn looks_numeric(s: &str) -> bool {
    s.trim().parse::<f64>().is_ok()
}

/// Read a comma-separated file. An optional header row and an optional
/// leading timestamp column are detected and dropped.
pub fn load_csv(path: impl AsRef<Path>, frequency: Frequency) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_csv(&text, &name, frequency)
}

pub fn parse_csv(text: &str, name: &str, frequency: Frequency) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("malformed csv: {e}")))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        records.push(rec.iter().map(str::to_string).collect());
    }
    if records.is_empty() {
        return Err(Error::Data("empty file".into()));
    }

    let header = if records[0].iter().any(|f| !looks_numeric(f)) && records.len() > 1 {
        Some(records.remove(0))
    } else {
        None
    };
    let first = &records[0];
    let drop_first = match &header {
        Some(h) => {
            TIMESTAMP_HEADERS.contains(&h[0].to_ascii_lowercase().as_str())
                || (!looks_numeric(&first[0]) && first[1..].iter().all(|f| looks_numeric(f)))
        }
        None => !looks_numeric(&first[0]) && first.len() > 1,
    };
    let skip = usize::from(drop_first);
    let width = first.len();
    if width <= skip {
        return Err(Error::Data("no numeric columns".into()));
    }

    let mut data = Vec::with_capacity(records.len() * (width - skip));
    for (r, rec) in records.iter().enumerate() {
        if rec.len() != width {
            return Err(Error::Data(format!(
                "row {} has {} cells, expected {width}",
                r + 1,
                rec.len()
            )));
        }
        for (c, cell) in rec.iter().enumerate().skip(skip) {
            if cell.is_empty() {
                return Err(Error::Data(format!("missing value at row {}, column {}", r + 1, c + 1)));
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("non-numeric cell `{cell}` at row {}, column {}", r + 1, c + 1))
            })?;
            data.push(v);
        }
    }
    let d = width - skip;
    let columns = match header {
        Some(h) => h[skip..].to_vec(),
        None => (0..d).map(|i| format!("ch{i}")).collect(),
    };
    let values = Tensor::new(vec![records.len(), d], data)?;
    TimeSeriesDataset::new(name, values, columns, frequency)
}

/// Read an M4-style file: one series per row, `id,v1,v2,...`, trailing cells may be empty.
pub fn load_m4_style(path: impl AsRef<Path>, frequency: Frequency) -> Result<Vec<TimeSeriesDataset>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (r, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').map(|c| c.trim().trim_matches('"')).collect();
        if cells.len() < 2 || cells[1..].iter().all(|c| c.is_empty()) {
            continue;
        }
        // header row
        if r == 0 && !looks_numeric(cells[1]) {
            continue;
        }
        let vals: Vec<f64> = cells[1..]
            .iter()
            .take_while(|c| !c.is_empty())
            .enumerate()
            .map(|(c, v)| {
                v.parse().map_err(|_| {
                    Error::Data(format!("non-numeric cell `{v}` at row {}, column {}", r + 1, c + 2))
                })
            })
            .collect::<Result<_>>()?;
        let t = vals.len();
        let values = Tensor::new(vec![t, 1], vals)?;
        out.push(TimeSeriesDataset::new(cells[0], values, vec![cells[0].to_string()], frequency)?);
    }
    if out.is_empty() {
        return Err(Error::Data("empty file".into()));
    }
    Ok(out)
}

/// Split into contiguous train/validation/test segments.
///
/// Validation and test take `floor(ratio·T)` rows; the remainder goes to train.
pub fn chronological_split(
    ds: &TimeSeriesDataset,
    ratio: (f64, f64, f64),
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset)> {
    let (a, b, c) = ratio;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {a}:{b}:{c}"
        )));
    }
    let t = ds.len();
    let n_val = (b * t as f64 + 1e-9).floor() as usize;
    let n_test = (c * t as f64 + 1e-9).floor() as usize;
    let n_train = t.saturating_sub(n_val + n_test);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "split of {t} rows leaves an empty segment ({n_train},{n_val},{n_test})"
        )));
    }
    Ok((
        ds.with_rows(0, n_train, ""),
        ds.with_rows(n_train, n_train + n_val, ""),
        ds.with_rows(n_train + n_val, t, ""),
    ))
}

/// One supervised example: `input` is immediately followed by `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: Tensor,
    pub target: Tensor,
    pub origin_index: usize,
}

pub fn window_count(len: usize, input_len: usize, horizon: usize, stride: usize) -> usize {
    if len < input_len + horizon || stride == 0 {
        0
    } else {
        (len - input_len - horizon) / stride + 1
    }
}

pub fn make_windows(
    ds: &TimeSeriesDataset,
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    if stride == 0 || input_len == 0 || horizon == 0 {
        return Err(Error::Config("input length, horizon and stride must be positive".into()));
    }
    let t = ds.len();
    if t < input_len + horizon {
        return Err(Error::Data(format!(
            "series `{}` has {t} rows; windows need at least {}",
            ds.name,
            input_len + horizon
        )));
    }
    Ok((0..window_count(t, input_len, horizon, stride))
        .map(|k| {
            let o = k * stride;
            WindowSample {
                input: ds.values.slice_rows(o, o + input_len),
                target: ds.values.slice_rows(o + input_len, o + input_len + horizon),
                origin_index: o,
            }
        })
        .collect())
}

pub const REVIN_EPS: f64 = 1e-8;

/// Per-channel statistics of one input window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevinState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RevinState {
    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        revin_denormalize(x, self)
    }
}

/// Standardise each channel of `x` by its own mean and (population) std.
pub fn revin_normalize(x: &Tensor) -> (Tensor, RevinState) {
    let (t, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for c in 0..d {
        let col = x.column(c);
        let mu = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t as f64;
        mean[c] = mu;
        std[c] = var.sqrt().max(REVIN_EPS);
    }
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i % d;
        *v = (*v - mean[c]) / std[c];
    }
    (out, RevinState { mean, std })
}

pub fn revin_denormalize(x: &Tensor, state: &RevinState) -> Result<Tensor> {
    let d = x.cols();
    if state.mean.len() != d {
        return Err(Error::shape("revin_denormalize", x.shape(), &[state.mean.len()]));
    }
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = i % d;
        *v = *v * state.std[c] + state.mean[c];
    }
    Ok(out)
}

/// Keep the chronological prefix of `ceil(fraction·T)` rows.
///
/// `min_len` is the shortest series the configured windows can use.
pub fn subsample_fraction(
    train: &TimeSeriesDataset,
    fraction: f64,
    min_len: usize,
) -> Result<TimeSeriesDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let keep = ((fraction * train.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let keep = keep.min(train.len());
    if keep < min_len {
        return Err(Error::Data(format!(
            "{:.0}% of {} rows leaves {keep} rows; windows need {min_len}",
            fraction * 100.0,
            train.len()
        )));
    }
    Ok(train.with_rows(0, keep, ""))
}

/// Zero out a random `rate` fraction of entries (missing-data robustness runs).
pub fn inject_mask<R: Rng + ?Sized>(x: &mut Tensor, rate: f64, rng: &mut R) {
    if rate <= 0.0 {
        return;
    }
    for v in x.data_mut() {
        if rng.random::<f64>() < rate {
            *v = 0.0;
        }
    }
}

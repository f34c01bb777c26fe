//! Forecast metrics, the Naive2 reference and report output.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{Frequency, WindowSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::train::predict_all;

/// Conventions every report states in its header.
pub const REPORT_CONVENTIONS: &str =
    "smape=symmetric denominator (0/0 := 0); mase=lag-m seasonal differences of the input window; \
naive2=classical multiplicative decomposition when the lag-m autocorrelation passes a 90% test; \
multichannel mase/naive2 averaged over channels";

pub fn mse_mae(pred: &Tensor, target: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_mae", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in pred.data().iter().zip(target.data()) {
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    Ok((se / n, ae / n))
}

/// Symmetric MAPE in `[0, 200]`.
pub fn smape(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("smape", &[pred.len()], &[target.len()]));
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let den = p.abs() + t.abs();
            if den == 0.0 {
                0.0
            } else {
                (p - t).abs() / den
            }
        })
        .sum();
    Ok(200.0 * total / pred.len() as f64)
}

/// Mean absolute error scaled by the in-sample mean absolute lag-`m` difference.
pub fn mase(pred: &[f64], target: &[f64], insample: &[f64], m: usize) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("mase", &[pred.len()], &[target.len()]));
    }
    let m = m.max(1);
    if insample.len() <= m {
        return Err(Error::Data(format!(
            "mase needs more than {m} in-sample points, got {}",
            insample.len()
        )));
    }
    let scale = insample.windows(m + 1).map(|w| (w[m] - w[0]).abs()).sum::<f64>() / (insample.len() - m) as f64;
    if scale == 0.0 {
        return Err(Error::DegenerateScale(format!(
            "in-sample series has no lag-{m} variation"
        )));
    }
    let mae = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
    Ok(mae / scale)
}

pub fn owa(smape_model: f64, mase_model: f64, smape_naive2: f64, mase_naive2: f64) -> Result<f64> {
    if smape_naive2 <= 0.0 || mase_naive2 <= 0.0 {
        return Err(Error::DegenerateScale("reference errors must be positive for owa".into()));
    }
    Ok(0.5 * (smape_model / smape_naive2 + mase_model / mase_naive2))
}

fn acf(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let den: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = (lag..n).map(|t| (x[t] - mean) * (x[t - lag] - mean)).sum();
    num / den
}

/// 90% autocorrelation test at lag `m`.
pub fn seasonality_test(x: &[f64], m: usize) -> bool {
    if m <= 1 || x.len() < 3 * m {
        return false;
    }
    let r: Vec<f64> = (1..=m).map(|k| acf(x, k)).collect();
    let var = (1.0 + 2.0 * r[..m - 1].iter().map(|v| v * v).sum::<f64>()) / x.len() as f64;
    r[m - 1].abs() > 1.645 * var.sqrt()
}

/// Multiplicative seasonal indices from a centred moving average of order `m`.
pub fn seasonal_indices(x: &[f64], m: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if m < 2 || n < 2 * m {
        return Err(Error::Data(format!("seasonal decomposition needs at least {} points", 2 * m)));
    }
    // centred moving average; for even m a 2×m average
    let half = m / 2;
    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); m];
    for t in half..n - half {
        let ma = if m % 2 == 1 {
            x[t - half..=t + half].iter().sum::<f64>() / m as f64
        } else {
            let inner: f64 = x[t - half + 1..t + half].iter().sum();
            (0.5 * x[t - half] + inner + 0.5 * x[t + half]) / m as f64
        };
        if ma != 0.0 {
            ratios[t % m].push(x[t] / ma);
        }
    }
    let mut idx: Vec<f64> = ratios
        .iter()
        .map(|r| if r.is_empty() { 1.0 } else { r.iter().sum::<f64>() / r.len() as f64 })
        .collect();
    let mean = idx.iter().sum::<f64>() / m as f64;
    if mean == 0.0 || !mean.is_finite() {
        return Ok(vec![1.0; m]);
    }
    for v in &mut idx {
        *v /= mean;
    }
    Ok(idx)
}

/// Seasonally adjusted naive forecast of `h` steps.
pub fn naive2(insample: &[f64], m: usize, h: usize, always_deseasonalize: bool) -> Result<Vec<f64>> {
    let n = insample.len();
    if n == 0 || (m > 1 && n <= m) {
        return Err(Error::Data(format!("naive2 needs more than {m} points, got {n}")));
    }
    let seasonal = m > 1 && (always_deseasonalize || seasonality_test(insample, m)) && n >= 2 * m;
    if !seasonal {
        return Ok(vec![insample[n - 1]; h]);
    }
    let idx = seasonal_indices(insample, m)?;
    let last = insample[n - 1] / idx[(n - 1) % m];
    Ok((0..h).map(|k| last * idx[(n + k) % m]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowScores {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mase: f64,
    pub smape_naive2: f64,
    pub mase_naive2: f64,
}

/// Scores of one forecast; SMAPE/MASE and their Naive2 references are averaged over channels.
pub fn score_window(pred: &Tensor, target: &Tensor, input: &Tensor, m: usize) -> Result<WindowScores> {
    let (mse, mae) = mse_mae(pred, target)?;
    let d = pred.cols();
    let h = pred.rows();
    let (mut s, mut ms, mut sn, mut mn) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..d {
        let (p, t, x) = (pred.column(c), target.column(c), input.column(c));
        let n2 = naive2(&x, m, h, false)?;
        s += smape(&p, &t)?;
        ms += mase(&p, &t, &x, m)?;
        sn += smape(&n2, &t)?;
        mn += mase(&n2, &t, &x, m)?;
    }
    let d = d as f64;
    Ok(WindowScores {
        mse,
        mae,
        smape: s / d,
        mase: ms / d,
        smape_naive2: sn / d,
        mase_naive2: mn / d,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub horizon: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub protocol: String,
}

/// Averages over windows plus OWA from the averaged SMAPE/MASE.
pub fn summarize(
    scores: &[WindowScores],
    dataset: &str,
    horizon: usize,
    split: &str,
    protocol: &str,
) -> Result<Vec<MetricRecord>> {
    if scores.is_empty() {
        return Err(Error::Data("no windows to summarise".into()));
    }
    let n = scores.len() as f64;
    let avg = |f: fn(&WindowScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let (mse, mae, sm, ma, sn, mn) = (
        avg(|s| s.mse),
        avg(|s| s.mae),
        avg(|s| s.smape),
        avg(|s| s.mase),
        avg(|s| s.smape_naive2),
        avg(|s| s.mase_naive2),
    );
    let o = owa(sm, ma, sn, mn).unwrap_or(f64::NAN);
    Ok([("mse", mse), ("mae", mae), ("smape", sm), ("mase", ma), ("owa", o)]
        .into_iter()
        .map(|(metric, value)| MetricRecord {
            dataset: dataset.to_string(),
            horizon,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            protocol: protocol.to_string(),
        })
        .collect())
}

/// Run `model` over `samples` and summarise.
pub fn evaluate_model(
    model: &Model,
    samples: &[WindowSample],
    season: usize,
    dataset: &str,
    split: &str,
    protocol: &str,
) -> Result<Vec<MetricRecord>> {
    let preds = predict_all(model, samples)?;
    let scores = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| score_window(p, &s.target, &s.input, season))
        .collect::<Result<Vec<_>>>()?;
    summarize(&scores, dataset, model.config.horizon, split, protocol)
}

pub fn records_csv(records: &[MetricRecord], config_hash: &str) -> String {
    let mut s = format!("# config_hash={config_hash}\n# {REPORT_CONVENTIONS}\n");
    s.push_str("dataset,horizon,split,metric,value,protocol\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.10e},{}",
            r.dataset, r.horizon, r.split, r.metric, r.value, r.protocol
        );
    }
    s
}

pub fn write_records(path: &Path, records: &[MetricRecord], config_hash: &str) -> Result<()> {
    std::fs::write(path, records_csv(records, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn pretty_table(records: &[MetricRecord]) -> String {
    let header = ["dataset", "H", "split", "protocol", "metric", "value"];
    let rows: Vec<[String; 6]> = records
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.horizon.to_string(),
                r.split.clone(),
                r.protocol.clone(),
                r.metric.clone(),
                format!("{:.4}", r.value),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in &rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(|c| c.as_str()).collect()));
    }
    out
}

/// Pick the model for a target frequency: same frequency first, then the fallback.
pub fn select_model<'a>(
    models: &'a [(Frequency, Model)],
    target: Frequency,
    fallback: Option<Frequency>,
) -> Result<&'a Model> {
    models
        .iter()
        .find(|(f, _)| *f == target)
        .or_else(|| fallback.and_then(|fb| models.iter().find(|(f, _)| *f == fb)))
        .map(|(_, m)| m)
        .ok_or_else(|| {
            Error::Config(format!(
                "no model trained for {target} data and no usable fallback configured"
            ))
        })
}

/// Evaluate without any parameter update; the model store hash is checked.
pub fn zero_shot_eval(
    models: &[(Frequency, Model)],
    source_name: &str,
    target_name: &str,
    target: &[WindowSample],
    target_freq: Frequency,
    fallback: Option<Frequency>,
) -> Result<Vec<MetricRecord>> {
    let model = select_model(models, target_freq, fallback)?;
    let before = model.store.hash_all();
    let records = evaluate_model(
        model,
        target,
        target_freq.season_length(),
        target_name,
        "test",
        &format!("zeroshot {source_name}->{target_name}"),
    )?;
    debug_assert_eq!(before, model.store.hash_all());
    Ok(records)
}

//! End-to-end commands: synthesise, train, evaluate, transfer, ablate, grid.
//!
//! Every artifact written here carries the config hash so that a checkpoint
//! cannot be evaluated against a different configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{grid_configs, DataSource, Protocol, RunConfig, Variant};
use crate::data::{
    chronological_split, inject_mask, load_csv, make_windows, subsample_fraction, TimeSeriesDataset, WindowSample,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, pretty_table, write_records, zero_shot_eval, MetricRecord};
use crate::model::Model;
use crate::plot::{line_plot, Series};
use crate::prompts::{build_capability_prompt, build_data_prompt, token_ids};
use crate::synth::{write_synth, SynthSpec};
use crate::train::{predict_all, train_with_hook, Checkpoint, TrainLog};

/// Splits and windows for one run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train_ds: TimeSeriesDataset,
    pub val_ds: TimeSeriesDataset,
    pub test_ds: TimeSeriesDataset,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<TimeSeriesDataset> {
    let ds = match &cfg.data {
        DataSource::Csv { path, frequency } => load_csv(path, *frequency)?,
        DataSource::Synth(spec) => spec.generate()?,
    };
    if ds.channels() != cfg.model.channels {
        return Err(Error::Config(format!(
            "dataset has {} channels but the model is configured for {}",
            ds.channels(),
            cfg.model.channels
        )));
    }
    Ok(ds)
}

/// Load, mask, split, apply the protocol and cut windows.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let mut ds = load_dataset(cfg)?;
    if cfg.mask_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
        inject_mask(&mut ds.values, cfg.mask_rate, &mut rng);
    }
    let (mut train_ds, val_ds, test_ds) = chronological_split(&ds, cfg.split)?;
    let (t_in, h) = (cfg.model.input_len, cfg.model.horizon);
    if let Protocol::FewShot { fraction } = cfg.protocol {
        train_ds = subsample_fraction(&train_ds, fraction, t_in + h)?;
    }
    let eval_stride = cfg.eval_stride.unwrap_or(h);
    Ok(Prepared {
        train: make_windows(&train_ds, t_in, h, cfg.train.stride)?,
        val: make_windows(&val_ds, t_in, h, eval_stride)?,
        test: make_windows(&test_ds, t_in, h, eval_stride)?,
        train_ds,
        val_ds,
        test_ds,
    })
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    let meta = Model::prompt_meta(&cfg.dataset_name(), cfg.frequency(), cfg.model.horizon);
    Model::new(cfg.model.clone(), cfg.seed, meta)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_synth(spec: &SynthSpec, path: &Path) -> Result<TimeSeriesDataset> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_synth(spec, path)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Write `E_hyper` of every scale after every epoch.
    pub export_embeddings: bool,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub records: Vec<MetricRecord>,
    pub config_hash: String,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub train_rows: usize,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    config_hash: &'a str,
    variant: &'a str,
    train_rows: usize,
    train_windows: usize,
    val_windows: usize,
    test_windows: usize,
    total_len: usize,
    trainable_params: usize,
    best_epoch: Option<usize>,
    backbone_hash_before: &'a str,
    backbone_hash_after: &'a str,
}

fn embeddings_csv(model: &Model, stage: &str, epoch: usize) -> String {
    let mut s = String::new();
    for (k, e) in model.hyperedge_embeddings().iter().enumerate() {
        for r in 0..e.rows() {
            let _ = write!(s, "{stage},{epoch},{},{r}", k + 1);
            for v in e.row_slice(r) {
                let _ = write!(s, ",{v:.10e}");
            }
            s.push('\n');
        }
    }
    s
}

fn forecast_plot(model: &Model, sample: &WindowSample, pred: &crate::numerics::Tensor) -> String {
    let t_in = sample.input.rows();
    let keep = t_in.min(2 * sample.target.rows());
    let mut truth = sample.input.column(0)[t_in - keep..].to_vec();
    truth.extend(sample.target.column(0));
    let p = pred.column(0);
    line_plot(
        &format!("{} channel 0: forecast vs truth", model.meta.name),
        &[
            Series { name: "truth", x0: 0, values: &truth },
            Series { name: "forecast", x0: keep, values: &p },
        ],
    )
}

fn curve_plot(log: &TrainLog) -> String {
    let train: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
    let val: Vec<f64> = log.epochs.iter().map(|e| e.val_mse).collect();
    line_plot(
        "training curves",
        &[
            Series { name: "train loss", x0: 0, values: &train },
            Series { name: "val mse", x0: 0, values: &val },
        ],
    )
}

/// Train, evaluate on the test split and write all artifacts into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let prep = prepare(cfg)?;
    let hash = cfg.hash();
    create_dir(out)?;
    cfg.save(&out.join("config.toml"))?;

    let mut model = build_model(cfg)?;
    let before = model.backbone_hash();
    let mut emb = String::new();
    if opts.export_embeddings {
        emb.push_str(&format!("# config_hash={hash}\nstage,epoch,scale,row,values...\n"));
        emb.push_str(&embeddings_csv(&model, "init", 0));
    }
    let mut hook = |stage: &'static str, epoch: usize, m: &Model| -> Result<()> {
        if opts.export_embeddings {
            emb.push_str(&embeddings_csv(m, stage, epoch));
        }
        Ok(())
    };
    let log = train_with_hook(&mut model, &prep.train, &prep.val, &cfg.train, cfg.seed, &mut hook)?;
    let after = model.backbone_hash();
    if before != after {
        return Err(Error::Checkpoint("backbone parameters changed during training".into()));
    }
    log.write(out)?;
    if opts.export_embeddings {
        write(&out.join("hyperedge_embeddings.csv"), &emb)?;
    }

    let season = cfg.frequency().season_length();
    let records = evaluate_model(&model, &prep.test, season, &cfg.dataset_name(), "test", &cfg.protocol.tag())?;
    write_records(&out.join("metrics.csv"), &records, &hash)?;
    Checkpoint::from_model(&model, &hash).save(&out.join("checkpoint.json"))?;

    let preds = predict_all(&model, &prep.test[..1])?;
    write(&out.join("forecast.svg"), &forecast_plot(&model, &prep.test[0], &preds[0]))?;
    write(&out.join("training_curves.svg"), &curve_plot(&log))?;

    let info = RunInfo {
        config_hash: &hash,
        variant: cfg.variant.label(),
        train_rows: prep.train_ds.len(),
        train_windows: prep.train.len(),
        val_windows: prep.val.len(),
        test_windows: prep.test.len(),
        total_len: model.total_len,
        trainable_params: model.store.trainable_count(),
        best_epoch: log.best_epoch,
        backbone_hash_before: &before,
        backbone_hash_after: &after,
    };
    let info_text = serde_json::to_string_pretty(&info).map_err(|e| Error::Config(e.to_string()))?;
    write(&out.join("run_info.json"), &info_text)?;

    Ok(TrainOutcome {
        model,
        log,
        records,
        config_hash: hash,
        backbone_hash_before: before,
        backbone_hash_after: after,
        train_rows: prep.train_ds.len(),
    })
}

/// Rebuild the model from `cfg`, load `checkpoint` (hash-checked) and score the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<Vec<MetricRecord>> {
    let hash = cfg.hash();
    let ck = Checkpoint::load(checkpoint)?;
    let prep = prepare(cfg)?;
    let mut model = build_model(cfg)?;
    ck.apply(&mut model, &hash)?;
    let season = cfg.frequency().season_length();
    let records = evaluate_model(&model, &prep.test, season, &cfg.dataset_name(), "test", &cfg.protocol.tag())?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_records(&dir.join("eval_metrics.csv"), &records, &hash)?;
    }
    Ok(records)
}

/// Train on `source`, then score `target`'s test windows without touching the parameters.
pub fn cmd_transfer(source: &RunConfig, target: &RunConfig, out: &Path) -> Result<Vec<MetricRecord>> {
    if (source.model.input_len, source.model.horizon, source.model.channels)
        != (target.model.input_len, target.model.horizon, target.model.channels)
    {
        return Err(Error::Config(
            "transfer needs matching input length, horizon and channel count".into(),
        ));
    }
    let trained = cmd_train(source, &out.join("source"), &TrainOptions::default())?;
    let prep = prepare(target)?;
    let freq = source.frequency();
    let models = [(freq, trained.model)];
    let before = models[0].1.store.hash_all();
    let records = zero_shot_eval(
        &models,
        &source.dataset_name(),
        &target.dataset_name(),
        &prep.test,
        target.frequency(),
        Some(freq),
    )?;
    if models[0].1.store.hash_all() != before {
        return Err(Error::Checkpoint("parameters changed during zero-shot evaluation".into()));
    }
    write_records(&out.join("transfer_metrics.csv"), &records, &source.hash())?;
    Ok(records)
}

/// Run one structural ablation into `out/<variant>`.
pub fn cmd_ablate(cfg: &RunConfig, variant: Variant, out: &Path) -> Result<TrainOutcome> {
    let mut c = cfg.clone();
    variant.apply(&mut c);
    c.validate()?;
    cmd_train(&c, &out.join(variant.slug()), &TrainOptions::default())
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best_index: usize,
    pub best_config: RunConfig,
    pub summary_csv: String,
}

/// Train up to `budget` sampled configurations and keep the one with the lowest validation MSE.
pub fn cmd_grid(cfg: &RunConfig, budget: usize, out: &Path) -> Result<GridResult> {
    let configs = grid_configs(cfg, budget, cfg.seed);
    if configs.is_empty() {
        return Err(Error::Config("grid produced no valid configuration".into()));
    }
    create_dir(out)?;
    let mut csv = String::from("index,config_hash,lr,batch_size,eta,windows,prototypes,hyperedges,best_val_mse\n");
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in configs.iter().enumerate() {
        let o = cmd_train(c, &out.join(format!("run_{i:03}")), &TrainOptions::default())?;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{},{},{:.10e}",
            c.hash(),
            c.train.lr,
            c.train.batch_size,
            c.model.hyperedges.eta,
            join(&c.model.scales.windows),
            join(&c.model.prototypes.counts),
            join(&c.model.hyperedges.counts),
            o.log.best_val
        );
        if best.is_none_or(|(_, b)| o.log.best_val < b) {
            best = Some((i, o.log.best_val));
        }
    }
    write(&out.join("grid.csv"), &csv)?;
    let (best_index, _) = best.expect("at least one run");
    Ok(GridResult {
        best_index,
        best_config: configs[best_index].clone(),
        summary_csv: csv,
    })
}

/// Rendered prompts and token counts for the first test window.
pub fn dump_prompts(cfg: &RunConfig) -> Result<String> {
    let prep = prepare(cfg)?;
    let model = build_model(cfg)?;
    let window = &prep.test[0].input;
    let data = build_data_prompt(&model.meta, window, &cfg.model.scales.windows)?;
    let cap = build_capability_prompt(cfg.model.task);
    let vocab = cfg.model.token_vocab;
    let mut s = String::new();
    let _ = writeln!(s, "# data prompt ({} tokens, padded/cut to {})", token_ids(&data.rendered, vocab).len(), model.data_prompt_len);
    let _ = writeln!(s, "{}", data.rendered);
    let _ = writeln!(s, "# capability prompt ({} tokens)", token_ids(&cap.rendered, vocab).len());
    let _ = writeln!(s, "{}", cap.rendered);
    Ok(s)
}

pub fn report(records: &[MetricRecord]) -> String {
    pretty_table(records)
}

/// Resolve a relative CSV path against the directory holding the config file.
pub fn resolve_data_path(cfg: &mut RunConfig, config_path: &Path) {
    if let DataSource::Csv { path, .. } = &mut cfg.data {
        if path.is_relative() {
            if let Some(dir) = config_path.parent() {
                *path = dir.join(&*path);
            }
        }
    }
}

pub fn default_out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}_{}", cfg.name, cfg.variant.slug()))
}

//! Losses, Adam, and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LR_CHOICES: [f64; 3] = [1e-3, 5e-3, 1e-4];
pub const BATCH_CHOICES: [usize; 6] = [8, 16, 32, 64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    /// Alignment-only stage followed by the forecast stage.
    MsePlusAso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "default_gamma")]
    pub aso_gamma: f64,
    #[serde(default = "default_aso_epochs")]
    pub aso_epochs: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Step between consecutive training windows.
    #[serde(default = "one")]
    pub stride: usize,
    /// Stop after this many epochs without validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
}

fn default_gamma() -> f64 {
    1.0
}
fn default_aso_epochs() -> usize {
    2
}
fn default_clip() -> f64 {
    1.0
}
fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            loss: LossKind::Mse,
            aso_gamma: default_gamma(),
            aso_epochs: default_aso_epochs(),
            clip_norm: default_clip(),
            stride: 1,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("batch size and stride must be positive".into()));
        }
        if !(self.aso_gamma > 0.0) {
            return Err(Error::Config("aso margin gamma must be > 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip norm must be > 0".into()));
        }
        Ok(())
    }

    /// Whether lr and batch size come from the tuned search space.
    pub fn in_search_space(&self) -> bool {
        LR_CHOICES.contains(&self.lr) && BATCH_CHOICES.contains(&self.batch_size)
    }
}

/// Mean squared error over all entries.
pub fn loss_mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Alignment loss for one scale: cosine-weighted distance plus a margin hinge,
/// summed over features and prototypes and divided by `M²`.
pub fn loss_aso(g: &mut Graph, hyper: Var, protos: Var, gamma: f64) -> Result<Var> {
    let m = g.value(hyper).rows() as f64;
    let hn = g.row_normalize(hyper);
    let un = g.row_normalize(protos);
    let unt = g.transpose(un);
    let tau = g.matmul(hn, unt)?;
    let sq = g.pairwise_sq_dist(hyper, protos)?;
    let dist = g.sqrt(sq);
    let pull = g.mul(tau, dist)?;
    let neg_tau = g.scale(tau, -1.0);
    let one_minus = g.offset(neg_tau, 1.0);
    let neg_d = g.scale(dist, -1.0);
    let gap = g.offset(neg_d, gamma);
    let hinge = g.relu(gap);
    let push = g.mul(one_minus, hinge)?;
    let both = g.add(pull, push)?;
    let total = g.sum(both);
    Ok(g.scale(total, 1.0 / (m * m)))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.gradient.clone() else { continue };
            let (m, v) = self.moments.entry(id).or_insert_with(|| {
                let z = Tensor::zeros(grad.rows(), grad.cols());
                (z.clone(), z)
            });
            let p = store.get_mut(id);
            let w = p.tensor.data_mut();
            for (i, &gi) in grad.data().iter().enumerate() {
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                w[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scale all trainable gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter_map(|(_, p)| p.gradient.as_ref())
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if let Some(g) = store.get_mut(id).gradient.as_mut() {
                g.scale_assign(f);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub stage: &'static str,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.10e}")
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("stage,epoch,step,loss,lr\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{},{}", r.stage, r.epoch, r.step, fmt_f(r.loss), fmt_f(r.lr));
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("stage,epoch,train_loss,val_mse\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", r.stage, r.epoch, fmt_f(r.train_loss), fmt_f(r.val_mse));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join("train_log.csv");
        std::fs::write(&p, self.steps_csv()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("epoch_log.csv");
        std::fs::write(&p, self.epochs_csv()).map_err(|e| Error::io(&p, e))
    }
}

/// Forecasts for many windows, a few samples per graph.
pub fn predict_all(model: &Model, samples: &[WindowSample]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let mut g = Graph::new();
        let shared = model.shared(&mut g)?;
        for s in chunk {
            let o = model.forward(&mut g, &shared, &s.input)?;
            out.push(g.value(o.pred).clone());
        }
        if out.iter().any(|t| !t.is_finite()) {
            g.check_finite()?;
        }
    }
    Ok(out)
}

/// Mean squared error over all windows, in the original scale.
pub fn evaluate_mse(model: &Model, samples: &[WindowSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no evaluation windows".into()));
    }
    let preds = predict_all(model, samples)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, s) in preds.iter().zip(samples) {
        total += p.zip_map(&s.target, |a, b| (a - b) * (a - b))?.sum();
        n += p.len();
    }
    Ok(total / n as f64)
}

/// Batch loss for one stage; `None` for the alignment stage returns the ASO sum.
fn batch_loss(g: &mut Graph, model: &Model, batch: &[&WindowSample], aso_gamma: Option<f64>) -> Result<Var> {
    let shared = model.shared(g)?;
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        let out = model.forward(g, &shared, &s.input)?;
        let l = match aso_gamma {
            None => {
                let t = g.constant(s.target.clone());
                loss_mse(g, out.pred, t)?
            }
            Some(gamma) => {
                let mut acc: Option<Var> = None;
                for (k, &h) in out.groups.iter().enumerate() {
                    let u = model.projected_prototypes(g, shared.prototypes[k], k)?;
                    let l = loss_aso(g, h, u, gamma)?;
                    acc = Some(match acc {
                        None => l,
                        Some(a) => g.add(a, l)?,
                    });
                }
                acc.expect("at least one scale")
            }
        };
        terms.push(l);
    }
    let stacked = g.concat_rows(&terms)?;
    Ok(g.mean(stacked))
}

fn run_stage(
    model: &mut Model,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
    stage: &'static str,
    epochs: usize,
    aso_gamma: Option<f64>,
    rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
    hook: &mut EpochHook<'_>,
) -> Result<()> {
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, model, &batch, aso_gamma)?;
            let lv = g.value(loss).data()[0];
            // a full scan only when something is off; it names the first bad node
            if !lv.is_finite() {
                g.check_finite()?;
            }
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            if let Some(name) = model.store.first_non_finite_grad() {
                g.check_finite()?;
                return Err(Error::NonFinite { node: format!("gradient of {name}"), index: loss.index() });
            }
            clip_grad_norm(&mut model.store, cfg.clip_norm);
            opt.step(&mut model.store);
            step += 1;
            epoch_loss += lv;
            batches += 1;
            log.steps.push(StepRecord {
                stage,
                epoch,
                step,
                loss: lv,
                lr: cfg.lr,
            });
        }
        let val_mse = if val.is_empty() { f64::NAN } else { evaluate_mse(model, val)? };
        log.epochs.push(EpochRecord {
            stage,
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_mse,
        });
        hook(stage, epoch, model)?;
        if aso_gamma.is_none() && !val.is_empty() {
            if best.as_ref().is_none_or(|(b, _)| val_mse < *b) {
                best = Some((val_mse, model.store.snapshot()));
                log.best_epoch = Some(epoch);
                log.best_val = val_mse;
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    if let Some((_, snap)) = best {
        model.store.restore(&snap);
    }
    Ok(())
}

/// Called after every epoch with the stage name and epoch number.
pub type EpochHook<'a> = dyn FnMut(&'static str, usize, &Model) -> Result<()> + 'a;

/// Train `model` in place. The parameters of the best validation epoch are
/// restored at the end.
pub fn train(model: &mut Model, train: &[WindowSample], val: &[WindowSample], cfg: &TrainConfig, seed: u64) -> Result<TrainLog> {
    train_with_hook(model, train, val, cfg, seed, &mut |_, _, _| Ok(()))
}

pub fn train_with_hook(
    model: &mut Model,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
    seed: u64,
    hook: &mut EpochHook<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ba7c4);
    let mut log = TrainLog {
        best_val: f64::INFINITY,
        ..Default::default()
    };
    if cfg.loss == LossKind::MsePlusAso {
        run_stage(model, train, val, cfg, "align", cfg.aso_epochs, Some(cfg.aso_gamma), &mut rng, &mut log, hook)?;
    }
    run_stage(model, train, val, cfg, "forecast", cfg.epochs, None, &mut rng, &mut log, hook)?;
    Ok(log)
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config_hash: &str) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            params: model.store.named_tensors(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    /// Load into `model` after checking the config hash.
    pub fn apply(&self, model: &mut Model, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for config {} but the current config is {}",
                self.config_hash, config_hash
            )));
        }
        model.store.load_named(&self.params)
    }
}

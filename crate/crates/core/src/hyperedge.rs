//! Learnable hyperedges: similarity-based incidence, TopK sparsification and
//! hyperedge feature aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, IncidenceGrad, ParamId, ParamStore, Tensor, Var};

/// How node/hyperedge embeddings start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedInit {
    /// Half-circle positional code plus small noise: nearby nodes start in the same hyperedge.
    #[default]
    Positional,
    /// Plain Gaussian.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperedgeConfig {
    /// `M^s` per scale.
    pub counts: Vec<usize>,
    /// TopK threshold.
    pub eta: usize,
    /// Embedding width; `None` means the channel count.
    #[serde(default)]
    pub embed_dim: Option<usize>,
    #[serde(default)]
    pub grad: IncidenceGrad,
    #[serde(default)]
    pub init: EmbedInit,
}

impl HyperedgeConfig {
    pub fn validate(&self, scales: usize) -> Result<()> {
        if self.counts.len() != scales {
            return Err(Error::Config(format!(
                "{} hyperedge counts given for {scales} scales",
                self.counts.len()
            )));
        }
        if self.eta == 0 {
            return Err(Error::Config("eta must be at least 1".into()));
        }
        for (s, &m) in self.counts.iter().enumerate() {
            if m == 0 {
                return Err(Error::Config(format!("scale {} has no hyperedges", s + 1)));
            }
            if self.eta > m {
                return Err(Error::Config(format!(
                    "eta {} exceeds the {m} hyperedges at scale {}",
                    self.eta,
                    s + 1
                )));
            }
        }
        if self.embed_dim == Some(0) {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        Ok(())
    }
}

/// Binary `N×M` incidence for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    pub entries: Tensor,
    pub scale: usize,
}

impl IncidenceMatrix {
    pub fn column_sums(&self) -> Vec<usize> {
        (0..self.entries.cols())
            .map(|e| self.entries.column(e).iter().filter(|&&v| v > 0.5).count())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperedgeFeatures {
    /// `M×D`.
    pub matrix: Tensor,
    pub neighbor_counts: Vec<usize>,
}

impl HyperedgeFeatures {
    pub fn empty_edges(&self) -> Vec<usize> {
        (0..self.neighbor_counts.len())
            .filter(|&i| self.neighbor_counts[i] == 0)
            .collect()
    }
}

/// `a·relu(tanh(β·e_node)·tanh(φ·e_hyper)ᵀ) + b` on plain tensors.
pub fn raw_incidence(e_node: &Tensor, e_hyper: &Tensor, beta: f64, phi: f64, a: f64, b: f64) -> Result<Tensor> {
    if e_node.cols() != e_hyper.cols() {
        return Err(Error::shape("raw_incidence", e_node.shape(), e_hyper.shape()));
    }
    let tn = e_node.map(|v| (beta * v).tanh());
    let th = e_hyper.map(|v| (phi * v).tanh());
    Ok(tn.matmul_t(&th)?.map(|v| a * v.max(0.0) + b))
}

/// Keep, per row, the `eta` largest strictly positive entries (ties to the
/// lowest column). A row with no positive entry keeps only its argmax.
pub fn sparsify_topk(raw: &Tensor, eta: usize, scale: usize) -> IncidenceMatrix {
    let (n, m) = (raw.rows(), raw.cols());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let row = raw.row_slice(i);
        let mut order: Vec<usize> = (0..m).collect();
        // stable sort keeps lower indices first among equal values
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]));
        let mut kept = 0;
        for &j in order.iter().take(eta) {
            if row[j] > 0.0 {
                out.set(i, j, 1.0);
                kept += 1;
            }
        }
        if kept == 0 && m > 0 {
            out.set(i, order[0], 1.0);
        }
    }
    IncidenceMatrix { entries: out, scale }
}

/// Mean of the incident node rows for every hyperedge; empty hyperedges give zeros.
pub fn hyperedge_features(level: &Tensor, inc: &IncidenceMatrix) -> Result<HyperedgeFeatures> {
    let h = &inc.entries;
    if h.rows() != level.rows() {
        return Err(Error::shape("hyperedge_features", level.shape(), h.shape()));
    }
    let mut matrix = h.t_matmul(level)?;
    let counts = inc.column_sums();
    let d = level.cols();
    for (e, &c) in counts.iter().enumerate() {
        if c > 0 {
            for k in 0..d {
                let v = matrix.get(e, k) / c as f64;
                matrix.set(e, k, v);
            }
        }
    }
    Ok(HyperedgeFeatures {
        matrix,
        neighbor_counts: counts,
    })
}

/// Block incidence grouping consecutive runs of `patch_len` nodes.
pub fn patch_incidence(n: usize, patch_len: usize, scale: usize) -> Result<IncidenceMatrix> {
    if patch_len == 0 {
        return Err(Error::Config("patch length must be positive".into()));
    }
    let m = n.div_ceil(patch_len);
    let mut entries = Tensor::zeros(n, m);
    for j in 0..n {
        entries.set(j, j / patch_len, 1.0);
    }
    Ok(IncidenceMatrix { entries, scale })
}

/// Non-overlapping patch means; the last patch may be shorter.
pub fn patch_features(level: &Tensor, patch_len: usize) -> Result<HyperedgeFeatures> {
    let inc = patch_incidence(level.rows(), patch_len, 0)?;
    hyperedge_features(level, &inc)
}

#[derive(Debug, Clone)]
pub struct ScaleHyperParams {
    pub e_node: ParamId,
    pub e_hyper: ParamId,
    pub beta: ParamId,
    pub phi: ParamId,
    pub lin_weight: ParamId,
    pub lin_bias: ParamId,
}

fn positional_embedding<R: Rng + ?Sized>(rows: usize, width: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(rows, width, 0.01, rng);
    if width < 2 {
        return Tensor::randn(rows, width, 1.0, rng);
    }
    let denom = (rows.max(2) - 1) as f64;
    for i in 0..rows {
        let angle = std::f64::consts::PI * i as f64 / denom;
        t.set(i, 0, angle.cos());
        t.set(i, 1, angle.sin());
    }
    t
}

/// One parameter set per scale; `lengths` are the pyramid lengths `N^s`.
pub fn init_hyper_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &HyperedgeConfig,
    lengths: &[usize],
    channels: usize,
    rng: &mut R,
) -> Result<Vec<ScaleHyperParams>> {
    cfg.validate(lengths.len())?;
    let k = cfg.embed_dim.unwrap_or(channels);
    Ok(lengths
        .iter()
        .zip(&cfg.counts)
        .enumerate()
        .map(|(s, (&n, &m))| {
            let (node, hyper) = match cfg.init {
                EmbedInit::Positional => (positional_embedding(n, k, rng), positional_embedding(m, k, rng)),
                EmbedInit::Random => (Tensor::randn(n, k, 1.0, rng), Tensor::randn(m, k, 1.0, rng)),
            };
            ScaleHyperParams {
                e_node: store.add(format!("hyper.{s}.e_node"), node, true),
                e_hyper: store.add(format!("hyper.{s}.e_hyper"), hyper, true),
                beta: store.add(format!("hyper.{s}.beta"), Tensor::scalar(1.0), true),
                phi: store.add(format!("hyper.{s}.phi"), Tensor::scalar(1.0), true),
                lin_weight: store.add(format!("hyper.{s}.lin_weight"), Tensor::scalar(1.0), true),
                lin_bias: store.add(format!("hyper.{s}.lin_bias"), Tensor::scalar(0.0), true),
            }
        })
        .collect())
}

/// Differentiable incidence scores for one scale.
pub fn raw_incidence_var(g: &mut Graph, store: &ParamStore, p: &ScaleHyperParams) -> Result<Var> {
    let e_node = g.param(store, p.e_node);
    let e_hyper = g.param(store, p.e_hyper);
    let beta = g.param(store, p.beta);
    let phi = g.param(store, p.phi);
    let a = g.param(store, p.lin_weight);
    let b = g.param(store, p.lin_bias);
    let nb = g.mul_scalar(e_node, beta)?;
    let tn = g.tanh(nb);
    let hp = g.mul_scalar(e_hyper, phi)?;
    let th = g.tanh(hp);
    let tht = g.transpose(th);
    let sim = g.matmul(tn, tht)?;
    let act = g.relu(sim);
    let scaled = g.mul_scalar(act, a)?;
    g.add_scalar(scaled, b)
}

/// Incidence construction plus aggregation of `level` for one scale.
pub fn hyperedge_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &ScaleHyperParams,
    level: Var,
    eta: usize,
    mode: IncidenceGrad,
    scale: usize,
) -> Result<(Var, IncidenceMatrix)> {
    let raw = raw_incidence_var(g, store, p)?;
    let inc = sparsify_topk(g.value(raw), eta, scale);
    let features = g.hyper_aggregate(level, raw, &inc.entries, mode)?;
    Ok((features, inc))
}

/// Patching in place of hyperedging: fixed block incidence, no parameters.
pub fn patch_forward(g: &mut Graph, level: Var, patch_len: usize, scale: usize) -> Result<Var> {
    let n = g.value(level).rows();
    let inc = patch_incidence(n, patch_len, scale)?;
    let raw = g.constant(Tensor::zeros(n, inc.entries.cols()));
    g.hyper_aggregate(level, raw, &inc.entries, IncidenceGrad::StraightThrough)
}

//! Cross-modal alignment: per-scale multi-head cross-attention from hyperedge
//! features (queries) to text prototypes (keys and values).

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{attention_weights, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadMerge {
    /// Concatenate heads, then a `D×D` merge map.
    #[default]
    Concat,
    /// Sum heads, then a `d×D` merge map.
    Sum,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct CmaScaleParams {
    pub heads: Vec<HeadParams>,
    pub merge: ParamId,
}

#[derive(Debug, Clone)]
pub struct CmaParams {
    pub scales: Vec<CmaScaleParams>,
    pub merge_mode: HeadMerge,
    pub head_dim: usize,
}

pub fn head_dim(channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Config(format!(
            "channel count {channels} is not divisible by {heads} heads"
        )));
    }
    Ok(channels / heads)
}

pub fn init_cma_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    scales: usize,
    channels: usize,
    proto_width: usize,
    heads: usize,
    merge_mode: HeadMerge,
    rng: &mut R,
) -> Result<CmaParams> {
    let d = head_dim(channels, heads)?;
    let bd = 1.0 / (channels as f64).sqrt();
    let bp = 1.0 / (proto_width as f64).sqrt();
    let scales = (0..scales)
        .map(|s| {
            let heads = (0..heads)
                .map(|j| HeadParams {
                    wq: store.add(format!("cma.{s}.{j}.wq"), Tensor::uniform(channels, d, bd, rng), true),
                    wk: store.add(format!("cma.{s}.{j}.wk"), Tensor::uniform(proto_width, d, bp, rng), true),
                    wv: store.add(format!("cma.{s}.{j}.wv"), Tensor::uniform(proto_width, d, bp, rng), true),
                })
                .collect();
            let merge_in = match merge_mode {
                HeadMerge::Concat => channels,
                HeadMerge::Sum => d,
            };
            let merge = store.add(
                format!("cma.{s}.merge"),
                Tensor::uniform(merge_in, channels, 1.0 / (merge_in as f64).sqrt(), rng),
                true,
            );
            CmaScaleParams { heads, merge }
        })
        .collect();
    Ok(CmaParams {
        scales,
        merge_mode,
        head_dim: d,
    })
}

/// Aligned features `Z^s` (M×D) and each head's attention matrix (M×V).
pub fn align_scale(
    g: &mut Graph,
    store: &ParamStore,
    hyper: Var,
    protos: Var,
    params: &CmaScaleParams,
    merge_mode: HeadMerge,
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(params.heads.len());
    let mut weights = Vec::with_capacity(params.heads.len());
    for h in &params.heads {
        let wq = g.param(store, h.wq);
        let wk = g.param(store, h.wk);
        let wv = g.param(store, h.wv);
        let q = g.matmul(hyper, wq)?;
        let k = g.matmul(protos, wk)?;
        let v = g.matmul(protos, wv)?;
        let w = attention_weights(g, q, k)?;
        outs.push(g.matmul(w, v)?);
        weights.push(w);
    }
    let joined = match merge_mode {
        HeadMerge::Concat => g.concat_cols(&outs)?,
        HeadMerge::Sum => {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = g.add(acc, o)?;
            }
            acc
        }
    };
    let merge = g.param(store, params.merge);
    Ok((g.matmul(joined, merge)?, weights))
}

/// One aligned matrix per scale, plus attention weights `[scale][head]`.
pub fn align_all(
    g: &mut Graph,
    store: &ParamStore,
    hyper: &[Var],
    protos: &[Var],
    params: &CmaParams,
) -> Result<(Vec<Var>, Vec<Vec<Var>>)> {
    if hyper.len() != protos.len() || hyper.len() != params.scales.len() {
        return Err(Error::Config(format!(
            "scale count mismatch: {} feature sets, {} prototype sets, {} parameter sets",
            hyper.len(),
            protos.len(),
            params.scales.len()
        )));
    }
    let mut zs = Vec::new();
    let mut ws = Vec::new();
    for ((&h, &p), sp) in hyper.iter().zip(protos).zip(&params.scales) {
        let (z, w) = align_scale(g, store, h, p, sp, params.merge_mode)?;
        zs.push(z);
        ws.push(w);
    }
    Ok((zs, ws))
}

/// CSV with columns `scale,head,hyperedge,prototype,weight`.
pub fn write_attention_csv(path: &Path, weights: &[Vec<Tensor>]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::from("scale,head,hyperedge,prototype,weight\n");
    for (s, heads) in weights.iter().enumerate() {
        for (j, w) in heads.iter().enumerate() {
            for i in 0..w.rows() {
                for p in 0..w.cols() {
                    buf.push_str(&format!("{},{},{},{},{:.6e}\n", s + 1, j + 1, i, p, w.get(i, p)));
                }
            }
        }
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

//! Tensors, parameters and the differentiable primitives the model is built from.

mod graph;
mod param;
mod tensor;

pub use graph::{softmax_rows_tensor, Graph, IncidenceGrad, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Window aggregation used between scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    #[default]
    Conv,
    AvgPool,
}

/// Weights of a strided 1-D convolution with kernel size = stride = `window`.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    /// `(window·D)×D` kernel.
    pub kernel: ParamId,
    /// `1×D` bias.
    pub bias: ParamId,
}

pub fn softmax_rows(g: &mut Graph, m: Var) -> Var {
    g.softmax_rows(m)
}

/// `x·w (+ bias)`.
pub fn linear(g: &mut Graph, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    match bias {
        Some(b) => g.add_row(xw, b),
        None => Ok(xw),
    }
}

/// Downsample `x` (N×D) to `floor(N/window)` rows.
pub fn aggregate_1d(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    window: usize,
    mode: AggMode,
    params: Option<ConvParams>,
) -> Result<Var> {
    let n = g.value(x).rows();
    if window == 0 || n < window {
        return Err(Error::ScaleTooCoarse { len: n, window });
    }
    match mode {
        AggMode::AvgPool => g.avg_pool(x, window),
        AggMode::Conv => {
            let p = params.ok_or_else(|| Error::Config("conv aggregation needs a kernel".into()))?;
            let cols = g.unfold(x, window)?;
            let k = g.param(store, p.kernel);
            let b = g.param(store, p.bias);
            linear(g, cols, k, Some(b))
        }
    }
}

/// `softmax(q·kᵀ/√d)·v` for one head.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (g.value(q).shape().to_vec(), g.value(k).shape().to_vec(), g.value(v).shape().to_vec());
    if qs[1] != ks[1] {
        return Err(Error::shape("attention(q,k)", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape("attention(k,v)", &ks, &vs));
    }
    let d = qs[1];
    g.attention(q, k, v, 1.0 / (d as f64).sqrt())
}

/// The softmax attention matrix `softmax(q·kᵀ/√d)`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let d = g.value(q).cols();
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt());
    Ok(g.softmax_rows(scaled))
}

#[cfg(test)]
mod tests;

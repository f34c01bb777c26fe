//! Frozen sequence backbones: a small seeded transformer, a single attention
//! block, or the identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{attention, Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    #[default]
    FrozenTransformer,
    AttentionOnly,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    #[serde(default)]
    pub variant: BackboneVariant,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    1
}
fn default_ffn_mult() -> usize {
    4
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: BackboneVariant::FrozenTransformer,
            layers: default_layers(),
            heads: default_heads(),
            ffn_mult: default_ffn_mult(),
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.variant == BackboneVariant::Identity {
            return Ok(());
        }
        if self.heads == 0 || width % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone width {width} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.variant == BackboneVariant::FrozenTransformer && (self.layers == 0 || self.ffn_mult == 0) {
            return Err(Error::Config("backbone needs at least one layer and a positive ffn multiplier".into()));
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        match self.variant {
            BackboneVariant::FrozenTransformer => self.layers,
            BackboneVariant::AttentionOnly => 1,
            BackboneVariant::Identity => 0,
        }
    }
}

#[derive(Debug, Clone)]
struct AttnHead {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    heads: Vec<AttnHead>,
    wo: ParamId,
    ffn: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub width: usize,
    blocks: Vec<Block>,
}

pub const PARAM_PREFIX: &str = "backbone.";

impl Backbone {
    /// Weights come from `config.seed` alone and are registered frozen.
    pub fn new(store: &mut ParamStore, config: &BackboneConfig, width: usize) -> Result<Self> {
        config.validate(width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 1.0 / (width as f64).sqrt();
        let with_ffn = config.variant == BackboneVariant::FrozenTransformer;
        let blocks = (0..config.block_count())
            .map(|l| {
                let dh = width / config.heads;
                let heads = (0..config.heads)
                    .map(|h| AttnHead {
                        wq: store.add(format!("backbone.{l}.{h}.wq"), Tensor::randn(width, dh, std, &mut rng), false),
                        wk: store.add(format!("backbone.{l}.{h}.wk"), Tensor::randn(width, dh, std, &mut rng), false),
                        wv: store.add(format!("backbone.{l}.{h}.wv"), Tensor::randn(width, dh, std, &mut rng), false),
                    })
                    .collect();
                let wo = store.add(format!("backbone.{l}.wo"), Tensor::randn(width, width, std, &mut rng), false);
                let ffn = with_ffn.then(|| {
                    let hidden = width * config.ffn_mult;
                    (
                        store.add(format!("backbone.{l}.ffn1"), Tensor::randn(width, hidden, std, &mut rng), false),
                        store.add(
                            format!("backbone.{l}.ffn2"),
                            Tensor::randn(hidden, width, 1.0 / (hidden as f64).sqrt(), &mut rng),
                            false,
                        ),
                    )
                });
                Block { heads, wo, ffn }
            })
            .collect();
        Ok(Backbone {
            config: config.clone(),
            width,
            blocks,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Result<Var> {
        let w = g.value(seq).cols();
        if w != self.width {
            return Err(Error::shape("backbone_forward", &[w], &[self.width]));
        }
        let mut x = seq;
        for b in &self.blocks {
            let h = g.layer_norm_rows(x, LN_EPS);
            let mut outs = Vec::with_capacity(b.heads.len());
            for head in &b.heads {
                let (wq, wk, wv) = (g.param(store, head.wq), g.param(store, head.wk), g.param(store, head.wv));
                let q = g.matmul(h, wq)?;
                let k = g.matmul(h, wk)?;
                let v = g.matmul(h, wv)?;
                outs.push(attention(g, q, k, v)?);
            }
            let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
            let wo = g.param(store, b.wo);
            let a = g.matmul(cat, wo)?;
            x = g.add(x, a)?;
            if let Some((f1, f2)) = b.ffn {
                let h = g.layer_norm_rows(x, LN_EPS);
                let w1 = g.param(store, f1);
                let w2 = g.param(store, f2);
                let z = g.matmul(h, w1)?;
                let z = g.gelu(z);
                let z = g.matmul(z, w2)?;
                x = g.add(x, z)?;
            }
        }
        Ok(x)
    }
}

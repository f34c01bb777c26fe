//! End-to-end forecaster: scale pyramid, hyperedges, alignment, prompts,
//! frozen backbone and the output projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::cma::{align_all, init_cma_params, CmaParams, HeadMerge};
use crate::data::{revin_normalize, Frequency, RevinState};
use crate::error::{Error, Result};
use crate::hyperedge::{
    hyperedge_forward, init_hyper_params, patch_forward, raw_incidence_var, sparsify_topk, HyperedgeConfig,
    IncidenceMatrix, ScaleHyperParams,
};
use crate::multiscale::{
    build_prototypes, build_pyramid, init_prototype_params, init_pyramid_params, PrototypeConfig, PrototypeParams,
    PyramidParams, ScaleConfig,
};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::prompts::{
    build_capability_prompt, build_data_prompt, fnv1a, init_learnable_prompts, init_token_table, token_ids,
    PromptMeta, Task, TextPrompt, DEFAULT_PROMPT_LEN, DEFAULT_TOKEN_VOCAB,
};

/// Which prompt components enter the assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub learnable: bool,
    pub data: bool,
    pub capability: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            learnable: true,
            data: true,
            capability: true,
        }
    }
}

/// How per-scale features are grouped before alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    #[default]
    Hyperedge,
    /// Align temporal features directly.
    Direct,
    /// Fixed non-overlapping patches.
    Patch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub scales: ScaleConfig,
    pub prototypes: PrototypeConfig,
    pub hyperedges: HyperedgeConfig,
    #[serde(default = "default_cma_heads")]
    pub cma_heads: usize,
    #[serde(default)]
    pub head_merge: HeadMerge,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_token_vocab")]
    pub token_vocab: usize,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub task: Task,
    #[serde(default = "yes")]
    pub positional: bool,
    #[serde(default)]
    pub components: Components,
    #[serde(default)]
    pub mixing: Mixing,
    #[serde(default = "yes")]
    pub multiscale: bool,
}

fn default_cma_heads() -> usize {
    1
}
fn default_prompt_len() -> usize {
    DEFAULT_PROMPT_LEN
}
fn default_token_vocab() -> usize {
    DEFAULT_TOKEN_VOCAB
}
fn yes() -> bool {
    true
}

impl ModelConfig {
    /// Number of scales the model actually uses.
    pub fn active_scales(&self) -> usize {
        if self.multiscale {
            self.scales.scales()
        } else {
            1
        }
    }

    fn active_scale_config(&self) -> ScaleConfig {
        let mut s = self.scales.clone();
        s.windows.truncate(self.active_scales() - 1);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.horizon == 0 || self.channels == 0 {
            return Err(Error::Config("input length, horizon and channel count must be positive".into()));
        }
        let s = self.scales.scales();
        self.scales.lengths(self.input_len)?;
        if self.prototypes.counts.len() != s {
            return Err(Error::Config(format!(
                "{} prototype counts given for {s} scales",
                self.prototypes.counts.len()
            )));
        }
        self.prototypes.validate()?;
        self.hyperedges.validate(s)?;
        crate::cma::head_dim(self.channels, self.cma_heads)?;
        self.backbone.validate(self.channels)?;
        if self.components.learnable && self.prompt_len == 0 {
            return Err(Error::Config("learnable prompt length must be positive".into()));
        }
        if self.token_vocab == 0 {
            return Err(Error::Config("token vocabulary must be non-empty".into()));
        }
        Ok(())
    }

    /// Rows each scale contributes after grouping.
    pub fn group_counts(&self) -> Result<Vec<usize>> {
        let lengths = self.scales.lengths(self.input_len)?;
        Ok((0..self.active_scales())
            .map(|s| match self.mixing {
                Mixing::Hyperedge => self.hyperedges.counts[s],
                Mixing::Direct => lengths[s],
                Mixing::Patch => lengths[s].div_ceil(patch_len(lengths[s], self.hyperedges.counts[s])),
            })
            .collect())
    }
}

/// Patch length giving roughly `m` patches over `n` nodes.
pub fn patch_len(n: usize, m: usize) -> usize {
    n.div_ceil(m).max(1)
}

/// One named, contiguous block of the assembled sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone)]
pub struct AssembledSequence {
    pub seq: Var,
    pub segments: Vec<Segment>,
    pub total_len: usize,
}

/// `[C_d, C_c, P^1, Z^1, …, P^S, Z^S]`, skipping absent parts.
pub fn assemble(
    g: &mut Graph,
    data_prompt: Option<Var>,
    capability_prompt: Option<Var>,
    blocks: &[(Option<Var>, Var)],
) -> Result<AssembledSequence> {
    let mut parts: Vec<(String, Var)> = Vec::new();
    if let Some(v) = data_prompt {
        parts.push(("data_prompt".into(), v));
    }
    if let Some(v) = capability_prompt {
        parts.push(("capability_prompt".into(), v));
    }
    for (s, (p, z)) in blocks.iter().enumerate() {
        if let Some(p) = p {
            parts.push((format!("learnable_prompt.{}", s + 1), *p));
        }
        parts.push((format!("aligned.{}", s + 1), *z));
    }
    if parts.is_empty() {
        return Err(Error::Config("nothing to assemble".into()));
    }
    let width = g.value(parts[0].1).cols();
    let mut segments = Vec::with_capacity(parts.len());
    let mut at = 0;
    for (name, v) in &parts {
        let t = g.value(*v);
        if t.cols() != width {
            return Err(Error::shape("assemble", &[width], &[t.cols()]));
        }
        segments.push(Segment {
            name: name.clone(),
            start: at,
            end: at + t.rows(),
        });
        at += t.rows();
    }
    let vars: Vec<Var> = parts.iter().map(|(_, v)| *v).collect();
    let seq = if vars.len() == 1 { vars[0] } else { g.concat_rows(&vars)? };
    Ok(AssembledSequence {
        seq,
        segments,
        total_len: at,
    })
}

/// Flatten `o` (L×D), map to `H·D_out`, reshape and undo the instance normalisation.
pub fn project_output(
    g: &mut Graph,
    o: Var,
    weight: Var,
    bias: Var,
    revin: &RevinState,
    horizon: usize,
    d_out: usize,
) -> Result<Var> {
    let (l, d) = (g.value(o).rows(), g.value(o).cols());
    let flat = g.reshape(o, 1, l * d)?;
    let w = g.value(weight).shape().to_vec();
    if w != [l * d, horizon * d_out] {
        return Err(Error::shape("project_output", &w, &[l * d, horizon * d_out]));
    }
    let y = g.matmul(flat, weight)?;
    let y = g.add_row(y, bias)?;
    let y = g.reshape(y, horizon, d_out)?;
    g.affine_cols(y, &revin.std, &revin.mean)
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub pyramid: PyramidParams,
    pub prototypes: PrototypeParams,
    pub hyper: Vec<ScaleHyperParams>,
    pub cma: CmaParams,
    pub token_table: ParamId,
    pub learnable_prompts: Vec<ParamId>,
    pub positional: Option<ParamId>,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
    pub backbone: Backbone,
    pub meta: PromptMeta,
    pub data_prompt_len: usize,
    pub capability_tokens: Vec<usize>,
    pub total_len: usize,
}

/// Graph pieces that do not depend on the input window.
#[derive(Debug, Clone)]
pub struct Shared {
    pub prototypes: Vec<Var>,
    pub incidence: Vec<Option<(Var, IncidenceMatrix)>>,
    pub capability: Option<Var>,
    pub learnable: Vec<Option<Var>>,
    pub positional: Option<Var>,
    pub proj_weight: Var,
    pub proj_bias: Var,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// `H×D` forecast in the original scale.
    pub pred: Var,
    /// Grouped features per scale (queries of the alignment).
    pub groups: Vec<Var>,
    /// Attention weights `[scale][head]`.
    pub attention: Vec<Vec<Var>>,
    pub sequence: AssembledSequence,
    pub revin: RevinState,
}

const PAD_TOKEN: &str = "<pad>";

impl Model {
    pub fn new(config: ModelConfig, seed: u64, meta: PromptMeta) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.channels;
        let s_act = config.active_scales();
        let lengths = config.scales.lengths(config.input_len)?;

        let pyramid = init_pyramid_params(&mut store, &config.active_scale_config(), d, &mut rng);
        let mut proto_cfg = config.prototypes.clone();
        proto_cfg.counts.truncate(s_act);
        let prototypes = init_prototype_params(&mut store, &proto_cfg, &mut rng)?;
        let hyper = if config.mixing == Mixing::Hyperedge {
            let mut hc = config.hyperedges.clone();
            hc.counts.truncate(s_act);
            init_hyper_params(&mut store, &hc, &lengths[..s_act], d, &mut rng)?
        } else {
            Vec::new()
        };
        let cma = init_cma_params(
            &mut store,
            s_act,
            d,
            config.prototypes.width,
            config.cma_heads,
            config.head_merge,
            &mut rng,
        )?;
        let token_table = init_token_table(&mut store, config.token_vocab, d, &mut rng);
        let learnable_prompts = if config.components.learnable {
            init_learnable_prompts(&mut store, &vec![config.prompt_len; s_act], d, &mut rng)
        } else {
            Vec::new()
        };

        let data_prompt_len = if config.components.data {
            let probe = Tensor::zeros(config.input_len, d);
            token_ids(&build_data_prompt(&meta, &probe, &config.scales.windows)?.rendered, config.token_vocab).len()
        } else {
            0
        };
        let capability_tokens = if config.components.capability {
            token_ids(&build_capability_prompt(config.task).rendered, config.token_vocab)
        } else {
            Vec::new()
        };
        let groups = config.group_counts()?;
        let learn = if config.components.learnable { config.prompt_len } else { 0 };
        let total_len = data_prompt_len + capability_tokens.len() + groups.iter().map(|m| m + learn).sum::<usize>();

        let positional = config.positional.then(|| {
            store.add("positional", Tensor::randn(total_len, d, 0.02, &mut rng), true)
        });
        let fan_in = total_len * d;
        let proj_weight = store.add(
            "head.weight",
            Tensor::uniform(fan_in, config.horizon * d, 1.0 / (fan_in as f64).sqrt(), &mut rng),
            true,
        );
        let proj_bias = store.add("head.bias", Tensor::zeros(1, config.horizon * d), true);
        let backbone = Backbone::new(&mut store, &config.backbone, d)?;

        Ok(Model {
            params: ModelParams {
                pyramid,
                prototypes,
                hyper,
                cma,
                token_table,
                learnable_prompts,
                positional,
                proj_weight,
                proj_bias,
            },
            config,
            store,
            backbone,
            meta,
            data_prompt_len,
            capability_tokens,
            total_len,
        })
    }

    pub fn prompt_meta(name: &str, frequency: Frequency, horizon: usize) -> PromptMeta {
        PromptMeta {
            name: name.to_string(),
            frequency,
            horizon,
        }
    }

    fn embed_ids(&self, ids: &[usize]) -> Result<Tensor> {
        let table = self.store.value(self.params.token_table);
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| table.row_slice(i).to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    /// Token ids of the data prompt, padded or cut to the length fixed at construction.
    pub fn data_prompt_ids(&self, window: &Tensor) -> Result<(TextPrompt, Vec<usize>)> {
        let prompt = build_data_prompt(&self.meta, window, &self.config.scales.windows)?;
        let mut ids = token_ids(&prompt.rendered, self.config.token_vocab);
        let pad = (fnv1a(PAD_TOKEN.as_bytes()) % self.config.token_vocab as u64) as usize;
        ids.resize(self.data_prompt_len, pad);
        Ok((prompt, ids))
    }

    pub fn shared(&self, g: &mut Graph) -> Result<Shared> {
        let store = &self.store;
        let prototypes = build_prototypes(g, store, &self.params.prototypes)?.levels;
        let incidence = (0..self.config.active_scales())
            .map(|s| {
                if self.config.mixing != Mixing::Hyperedge {
                    return Ok(None);
                }
                let raw = raw_incidence_var(g, store, &self.params.hyper[s])?;
                let inc = sparsify_topk(g.value(raw), self.config.hyperedges.eta, s + 1);
                Ok(Some((raw, inc)))
            })
            .collect::<Result<Vec<_>>>()?;
        let capability = if self.capability_tokens.is_empty() {
            None
        } else {
            Some(g.constant(self.embed_ids(&self.capability_tokens)?))
        };
        let learnable = (0..self.config.active_scales())
            .map(|s| self.params.learnable_prompts.get(s).map(|&id| g.param(store, id)))
            .collect();
        let positional = self.params.positional.map(|id| g.param(store, id));
        Ok(Shared {
            prototypes,
            incidence,
            capability,
            learnable,
            positional,
            proj_weight: g.param(store, self.params.proj_weight),
            proj_bias: g.param(store, self.params.proj_bias),
        })
    }

    /// Forecast one raw `T_in×D` window.
    pub fn forward(&self, g: &mut Graph, shared: &Shared, input: &Tensor) -> Result<SampleOutput> {
        let cfg = &self.config;
        if input.shape() != [cfg.input_len, cfg.channels] {
            return Err(Error::shape("forward", input.shape(), &[cfg.input_len, cfg.channels]));
        }
        let store = &self.store;
        let (xn, revin) = revin_normalize(input);
        let x = g.constant(xn);
        let levels = build_pyramid(g, store, x, &cfg.active_scale_config(), &self.params.pyramid)?.levels;
        let mut groups = Vec::with_capacity(levels.len());
        for (s, &level) in levels.iter().enumerate() {
            let v = match cfg.mixing {
                Mixing::Hyperedge => {
                    let (raw, inc) = shared.incidence[s].as_ref().expect("hyperedge incidence");
                    g.hyper_aggregate(level, *raw, &inc.entries, cfg.hyperedges.grad)?
                }
                Mixing::Direct => level,
                Mixing::Patch => {
                    let n = g.value(level).rows();
                    patch_forward(g, level, patch_len(n, cfg.hyperedges.counts[s]), s + 1)?
                }
            };
            groups.push(v);
        }
        let (zs, attention) = align_all(g, store, &groups, &shared.prototypes, &self.params.cma)?;

        let data_prompt = if cfg.components.data {
            let (_, ids) = self.data_prompt_ids(input)?;
            Some(g.constant(self.embed_ids(&ids)?))
        } else {
            None
        };
        let blocks: Vec<(Option<Var>, Var)> = zs.iter().enumerate().map(|(s, &z)| (shared.learnable[s], z)).collect();
        let sequence = assemble(g, data_prompt, shared.capability, &blocks)?;
        let mut seq = sequence.seq;
        if let Some(p) = shared.positional {
            seq = g.add(seq, p)?;
        }
        let o = self.backbone.forward(g, store, seq)?;
        let pred = project_output(g, o, shared.proj_weight, shared.proj_bias, &revin, cfg.horizon, cfg.channels)?;
        Ok(SampleOutput {
            pred,
            groups,
            attention,
            sequence,
            revin,
        })
    }

    /// Plain forecast without keeping the graph.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let shared = self.shared(&mut g)?;
        let out = self.forward(&mut g, &shared, input)?;
        if !g.value(out.pred).is_finite() {
            g.check_finite()?;
        }
        Ok(g.value(out.pred).clone())
    }

    /// Prototypes of scale `s` mapped to width D through every head's value projection.
    pub fn projected_prototypes(&self, g: &mut Graph, protos: Var, s: usize) -> Result<Var> {
        let heads = &self.params.cma.scales[s].heads;
        let wvs: Vec<Var> = heads.iter().map(|h| g.param(&self.store, h.wv)).collect();
        let wv = if wvs.len() == 1 { wvs[0] } else { g.concat_cols(&wvs)? };
        let out = g.matmul(protos, wv)?;
        if g.value(out).cols() != self.config.channels {
            let c = g.value(out).cols();
            return Err(Error::shape("projected_prototypes", &[c], &[self.config.channels]));
        }
        Ok(out)
    }

    /// Hash of the backbone parameter block.
    pub fn backbone_hash(&self) -> String {
        self.store.hash_where(|p| p.name.starts_with(crate::backbone::PARAM_PREFIX))
    }

    /// Current hyperedge embeddings, one `M^s×k` matrix per scale.
    pub fn hyperedge_embeddings(&self) -> Vec<Tensor> {
        self.params.hyper.iter().map(|h| self.store.value(h.e_hyper).clone()).collect()
    }

    /// Current incidence matrices.
    pub fn incidence(&self) -> Result<Vec<IncidenceMatrix>> {
        let mut g = Graph::new();
        let shared = self.shared(&mut g)?;
        Ok(shared.incidence.into_iter().flatten().map(|(_, inc)| inc).collect())
    }

    /// Run the alignment path only, returning the attention weights `[scale][head]`.
    pub fn attention_weights(&self, input: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        let mut g = Graph::new();
        let shared = self.shared(&mut g)?;
        let out = self.forward(&mut g, &shared, input)?;
        Ok(out
            .attention
            .iter()
            .map(|hs| hs.iter().map(|&w| g.value(w).clone()).collect())
            .collect())
    }

    /// Features after grouping, for one scale, evaluated without a graph.
    pub fn hyperedge_forward_scale(&self, level: &Tensor, s: usize) -> Result<(Tensor, IncidenceMatrix)> {
        let mut g = Graph::new();
        let x = g.constant(level.clone());
        let (f, inc) = hyperedge_forward(
            &mut g,
            &self.store,
            &self.params.hyper[s],
            x,
            self.config.hyperedges.eta,
            self.config.hyperedges.grad,
            s + 1,
        )?;
        Ok((g.value(f).clone(), inc))
    }
}

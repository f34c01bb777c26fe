//! Run configuration, ablation variants and the hyperparameter grid.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneVariant};
use crate::cma::HeadMerge;
use crate::data::Frequency;
use crate::error::{Error, Result};
use crate::hyperedge::{EmbedInit, HyperedgeConfig};
use crate::model::{Components, Mixing, ModelConfig};
use crate::multiscale::{PrototypeConfig, PrototypeSource, ScaleConfig};
use crate::numerics::{AggMode, IncidenceGrad};
use crate::prompts::{Task, DEFAULT_PROMPT_LEN, DEFAULT_TOKEN_VOCAB};
use crate::synth::SynthSpec;
use crate::train::{LossKind, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf, frequency: Frequency },
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Standard,
    /// Train on a chronological prefix of the training split.
    FewShot { fraction: f64 },
}

impl Protocol {
    pub fn tag(&self) -> String {
        match self {
            Protocol::Standard => "standard".into(),
            Protocol::FewShot { fraction } => format!("fewshot_{}", (fraction * 100.0).round() as u32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub data: DataSource,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    #[serde(default)]
    pub protocol: Protocol,
    /// Fraction of input entries zeroed before training and evaluation.
    #[serde(default)]
    pub mask_rate: f64,
    /// Step between evaluation windows; `None` uses the horizon.
    #[serde(default)]
    pub eval_stride: Option<usize>,
    #[serde(default)]
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let (a, b, c) = self.split;
        if a <= 0.0 || b < 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split {:?} must be positive and sum to 1", self.split)));
        }
        if let Protocol::FewShot { fraction } = self.protocol {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!("few-shot fraction {fraction} outside (0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Config("mask rate must lie in [0, 1)".into()));
        }
        if self.eval_stride == Some(0) {
            return Err(Error::Config("evaluation stride must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = self.to_toml().expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn frequency(&self) -> Frequency {
        match &self.data {
            DataSource::Csv { frequency, .. } => *frequency,
            DataSource::Synth(s) => s.frequency,
        }
    }

    pub fn dataset_name(&self) -> String {
        match &self.data {
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into()),
            DataSource::Synth(s) => s.name.clone(),
        }
    }

    /// The configuration used by the learning-signal check: two seasonal
    /// channels, 256 steps in, 48 out, three scales.
    pub fn synthetic_default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            name: "synthetic".into(),
            seed: 0,
            data: DataSource::Synth(SynthSpec::two_season(4000, 0.1, 0)),
            split: (0.6, 0.2, 0.2),
            protocol: Protocol::Standard,
            mask_rate: 0.0,
            // coprime with both periods so every phase is evaluated
            eval_stride: Some(11),
            variant: Variant::Full,
            model: ModelConfig {
                input_len: 256,
                horizon: 48,
                channels: 2,
                scales: ScaleConfig {
                    windows: vec![4, 4],
                    mode: AggMode::Conv,
                },
                prototypes: PrototypeConfig {
                    vocab_size: 1000,
                    width: 32,
                    counts: vec![100, 50, 10],
                    source: PrototypeSource::Vocabulary,
                },
                hyperedges: HyperedgeConfig {
                    counts: vec![20, 10, 4],
                    eta: 2,
                    embed_dim: None,
                    grad: IncidenceGrad::ScoreWeighted,
                    init: EmbedInit::Positional,
                },
                cma_heads: 2,
                head_merge: HeadMerge::Concat,
                prompt_len: DEFAULT_PROMPT_LEN,
                token_vocab: DEFAULT_TOKEN_VOCAB,
                backbone: BackboneConfig {
                    variant: BackboneVariant::FrozenTransformer,
                    layers: 2,
                    heads: 2,
                    ffn_mult: 4,
                    seed: 0,
                },
                task: Task::LongForecast,
                positional: true,
                components: Components::default(),
                mixing: Mixing::Hyperedge,
                multiscale: true,
            },
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 16,
                epochs: 30,
                loss: LossKind::Mse,
                aso_gamma: 1.0,
                aso_epochs: 2,
                clip_norm: 1.0,
                // a stride sharing a factor with 24 would show the model only a few daily phases
                stride: 19,
                patience: None,
            },
        }
    }
}

/// Structural ablations; each flips exactly one switch of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    WoCl,
    WoCd,
    WoCc,
    WoMop,
    WoHm,
    Pm,
    WoMe,
    Llm2attn,
    WoLlm,
    Aso,
    R1,
    R2,
}

impl Variant {
    pub const ALL: [Variant; 13] = [
        Variant::Full,
        Variant::WoCl,
        Variant::WoCd,
        Variant::WoCc,
        Variant::WoMop,
        Variant::WoHm,
        Variant::Pm,
        Variant::WoMe,
        Variant::Llm2attn,
        Variant::WoLlm,
        Variant::Aso,
        Variant::R1,
        Variant::R2,
    ];

    /// Display label, e.g. `-w/o C_l`.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoCl => "-w/o C_l",
            Variant::WoCd => "-w/o C_d",
            Variant::WoCc => "-w/o C_c",
            Variant::WoMop => "-w/o MoP",
            Variant::WoHm => "-w/o HM",
            Variant::Pm => "-PM",
            Variant::WoMe => "-w/o ME",
            Variant::Llm2attn => "-LLM2Attn",
            Variant::WoLlm => "-w/o LLM",
            Variant::Aso => "-ASO",
            Variant::R1 => "R.1",
            Variant::R2 => "R.2",
        }
    }

    pub fn slug(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    /// Accepts the slug (`wo_hm`) or the label (`-w/o HM`), case-insensitively.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == t || v.label().to_ascii_lowercase() == t)
            .ok_or_else(|| {
                let names: Vec<String> = Variant::ALL.iter().map(|v| v.slug()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        match self {
            Variant::Full => {}
            Variant::WoCl => m.components.learnable = false,
            Variant::WoCd => m.components.data = false,
            Variant::WoCc => m.components.capability = false,
            Variant::WoMop => {
                m.components = Components {
                    learnable: false,
                    data: false,
                    capability: false,
                }
            }
            Variant::WoHm => m.mixing = Mixing::Direct,
            Variant::Pm => m.mixing = Mixing::Patch,
            Variant::WoMe => m.multiscale = false,
            Variant::Llm2attn => m.backbone.variant = BackboneVariant::AttentionOnly,
            Variant::WoLlm => m.backbone.variant = BackboneVariant::Identity,
            Variant::Aso => cfg.train.loss = LossKind::MsePlusAso,
            Variant::R1 => m.prototypes.source = PrototypeSource::ManualWords,
            Variant::R2 => m.prototypes.source = PrototypeSource::RandomWords,
        }
        cfg.variant = self;
    }
}

/// Choices per tuned hyperparameter.
pub struct GridSpace;

impl GridSpace {
    pub const BATCH: [usize; 6] = [8, 16, 32, 64, 128, 256];
    pub const M: [&'static [usize]; 3] = [&[5, 10, 20, 30, 50], &[2, 5, 10, 15, 20], &[1, 2, 4, 5, 8, 12]];
    pub const V: [&'static [usize]; 3] = [
        &[20, 50, 100, 200, 500, 1000],
        &[10, 25, 50, 100, 200, 500],
        &[4, 5, 10, 25, 50, 100],
    ];
    pub const WINDOW: [&'static [usize]; 2] = [&[2, 4, 8], &[2, 4]];
    pub const ETA: [usize; 7] = [2, 3, 4, 5, 10, 15, 20];
    pub const LR: [f64; 3] = [1e-3, 5e-3, 1e-4];
}

/// Up to `budget` valid configurations drawn from the search space without
/// repetition, in a seed-determined order.
pub fn grid_configs(base: &RunConfig, budget: usize, seed: u64) -> Vec<RunConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = base.model.scales.scales().min(3);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    let mut tries = 0;
    while out.len() < budget && tries < budget * 200 + 1000 {
        tries += 1;
        let mut c = base.clone();
        c.train.batch_size = *GridSpace::BATCH.choose(&mut rng).expect("non-empty");
        c.train.lr = *GridSpace::LR.choose(&mut rng).expect("non-empty");
        c.model.hyperedges.eta = *GridSpace::ETA.choose(&mut rng).expect("non-empty");
        for k in 0..s {
            c.model.hyperedges.counts[k] = *GridSpace::M[k].choose(&mut rng).expect("non-empty");
            c.model.prototypes.counts[k] = *GridSpace::V[k].choose(&mut rng).expect("non-empty");
        }
        for k in 0..(s - 1).min(2) {
            c.model.scales.windows[k] = *GridSpace::WINDOW[k].choose(&mut rng).expect("non-empty");
        }
        if c.validate().is_err() {
            continue;
        }
        if seen.insert(c.hash()) {
            out.push(c);
        }
    }
    out
}

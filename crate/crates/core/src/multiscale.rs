//! Multi-scale extraction: the temporal feature pyramid and the per-scale
//! text prototype bank.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{aggregate_1d, AggMode, ConvParams, Graph, ParamId, ParamStore, Tensor, Var};
use crate::prompts::fnv1a;

/// Scale layout: `windows[s]` aggregates level `s` into level `s+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub windows: Vec<usize>,
    #[serde(default)]
    pub mode: AggMode,
}

impl ScaleConfig {
    pub fn single() -> Self {
        ScaleConfig {
            windows: Vec::new(),
            mode: AggMode::AvgPool,
        }
    }

    pub fn scales(&self) -> usize {
        self.windows.len() + 1
    }

    /// Level lengths `N^1..N^S` for an input of length `n`.
    pub fn lengths(&self, n: usize) -> Result<Vec<usize>> {
        let mut out = vec![n];
        for (s, &w) in self.windows.iter().enumerate() {
            if w < 2 {
                return Err(Error::Config(format!("aggregation window at scale {} must be ≥ 2", s + 1)));
            }
            let next = out[s] / w;
            if next == 0 {
                return Err(Error::Config(format!(
                    "scale {} is empty: length {} cannot be aggregated by window {w}",
                    s + 2,
                    out[s]
                )));
            }
            out.push(next);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct PyramidParams {
    pub conv: Vec<ConvParams>,
}

pub fn init_pyramid_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &ScaleConfig,
    channels: usize,
    rng: &mut R,
) -> PyramidParams {
    let conv = match cfg.mode {
        AggMode::AvgPool => Vec::new(),
        AggMode::Conv => cfg
            .windows
            .iter()
            .enumerate()
            .map(|(s, &w)| {
                let bound = 1.0 / (w as f64).sqrt();
                let kernel = store.add(
                    format!("pyramid.{s}.kernel"),
                    Tensor::uniform(w * channels, channels, bound, rng),
                    true,
                );
                let bias = store.add(
                    format!("pyramid.{s}.bias"),
                    Tensor::uniform(1, channels, bound, rng),
                    true,
                );
                ConvParams { kernel, bias }
            })
            .collect(),
    };
    PyramidParams { conv }
}

/// Feature levels `X^1..X^S`; level 1 is the normalised input.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    pub levels: Vec<Var>,
}

pub fn build_pyramid(
    g: &mut Graph,
    store: &ParamStore,
    x_norm: Var,
    cfg: &ScaleConfig,
    params: &PyramidParams,
) -> Result<ScalePyramid> {
    cfg.lengths(g.value(x_norm).rows())?;
    let mut levels = vec![x_norm];
    for (s, &w) in cfg.windows.iter().enumerate() {
        let prev = levels[s];
        let conv = params.conv.get(s).copied();
        levels.push(aggregate_1d(g, store, prev, w, cfg.mode, conv)?);
    }
    Ok(ScalePyramid { levels })
}

/// Average-pooled pyramid of a plain tensor (no parameters).
pub fn avg_pyramid(x: &Tensor, windows: &[usize]) -> Result<Vec<Tensor>> {
    let mut out = vec![x.clone()];
    for &w in windows {
        let prev = out.last().expect("non-empty");
        let (n, d) = (prev.rows(), prev.cols());
        if w == 0 || n < w {
            return Err(Error::ScaleTooCoarse { len: n, window: w });
        }
        let m = n / w;
        let mut next = Tensor::zeros(m, d);
        for t in 0..m {
            for c in 0..d {
                let s: f64 = (0..w).map(|k| prev.get(t * w + k, c)).sum();
                next.set(t, c, s / w as f64);
            }
        }
        out.push(next);
    }
    Ok(out)
}

/// Where the frozen base vocabulary table comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    /// Seeded random `V×P` table standing in for pretrained token embeddings.
    #[default]
    Vocabulary,
    /// Embeddings of hand-picked trend/shape descriptions.
    ManualWords,
    /// Embeddings of an arbitrary word list.
    RandomWords,
}

pub const MANUAL_WORDS: &[&str] = &[
    "small", "big", "rapid increase", "steady decrease", "rise", "fall", "peak", "trough",
    "flat", "stable", "volatile", "spike", "dip", "upward trend", "downward trend", "cycle",
    "periodic", "seasonal", "daily pattern", "weekly pattern", "high", "low", "growth", "decline",
    "surge", "drop", "plateau", "oscillation", "smooth", "noisy", "sharp rise", "gradual fall",
    "level shift", "outlier", "recovery", "slowdown", "acceleration", "reversal", "momentum", "calm",
    "burst", "lull", "maximum", "minimum", "average", "median", "variance", "steady",
];

pub const RANDOM_WORDS: &[&str] = &[
    "increase", "happy", "can", "white noise", "river", "paper", "quickly", "blue", "seven",
    "window", "under", "music", "table", "green", "although", "mountain", "bread", "cold",
    "letter", "driver", "soft", "garden", "thin", "silver", "planet", "orange", "minute",
    "shadow", "open", "teacher", "kitchen", "wire", "square", "honest", "lamp", "forest",
    "small talk", "engine", "thunder", "pocket", "vast", "island", "chair", "bright", "wheel",
    "story", "circle", "salt",
];

/// Deterministic per-word embedding: a `P`-vector seeded by the word's hash.
pub fn word_table(words: &[&str], width: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = words
        .iter()
        .map(|w| {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(w.as_bytes()));
            Tensor::randn(1, width, 1.0, &mut rng).into_data()
        })
        .collect();
    Tensor::from_rows(&rows).expect("uniform widths")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    /// Base vocabulary size `V`.
    pub vocab_size: usize,
    /// Embedding width `P`.
    pub width: usize,
    /// `V^1 > V^2 > … > V^S`.
    pub counts: Vec<usize>,
    #[serde(default)]
    pub source: PrototypeSource,
}

impl PrototypeConfig {
    pub fn base_rows(&self) -> usize {
        match self.source {
            PrototypeSource::Vocabulary => self.vocab_size,
            PrototypeSource::ManualWords => MANUAL_WORDS.len(),
            PrototypeSource::RandomWords => RANDOM_WORDS.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("prototype counts must be positive".into()));
        }
        if let Some(w) = self.counts.windows(2).find(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "prototype counts must strictly decrease across scales, got {} then {}",
                w[0], w[1]
            )));
        }
        let v = self.base_rows();
        if self.counts[0] * 4 > v {
            return Err(Error::Config(format!(
                "first-scale prototype count {} exceeds a quarter of the base vocabulary ({v})",
                self.counts[0]
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("prototype width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PrototypeParams {
    pub base_vocab: ParamId,
    pub reducer: ParamId,
    pub maps: Vec<ParamId>,
}

pub fn init_prototype_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &PrototypeConfig,
    rng: &mut R,
) -> Result<PrototypeParams> {
    cfg.validate()?;
    let base = match cfg.source {
        PrototypeSource::Vocabulary => Tensor::randn(cfg.vocab_size, cfg.width, 1.0, rng),
        PrototypeSource::ManualWords => word_table(MANUAL_WORDS, cfg.width),
        PrototypeSource::RandomWords => word_table(RANDOM_WORDS, cfg.width),
    };
    let v = base.rows();
    let base_vocab = store.add("prototypes.base_vocab", base, false);
    let reducer = store.add(
        "prototypes.reducer",
        Tensor::uniform(cfg.counts[0], v, 1.0 / (v as f64).sqrt(), rng),
        true,
    );
    let maps = cfg
        .counts
        .windows(2)
        .enumerate()
        .map(|(s, w)| {
            store.add(
                format!("prototypes.map.{s}"),
                Tensor::uniform(w[1], w[0], 1.0 / (w[0] as f64).sqrt(), rng),
                true,
            )
        })
        .collect();
    Ok(PrototypeParams {
        base_vocab,
        reducer,
        maps,
    })
}

/// Prototype levels `U^1..U^S`, each `V^s×P`.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub levels: Vec<Var>,
}

pub fn build_prototypes(g: &mut Graph, store: &ParamStore, params: &PrototypeParams) -> Result<PrototypeBank> {
    let base = g.param(store, params.base_vocab);
    let reducer = g.param(store, params.reducer);
    let mut levels = vec![g.matmul(reducer, base)?];
    for &m in &params.maps {
        let map = g.param(store, m);
        let prev = *levels.last().expect("non-empty");
        levels.push(g.matmul(map, prev)?);
    }
    Ok(PrototypeBank { levels })
}

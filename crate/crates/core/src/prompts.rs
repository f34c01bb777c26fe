//! Prompts: learnable per-scale prompts, rendered text prompts and the toy
//! hashing tokenizer that embeds them.

use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::Frequency;
use crate::error::{Error, Result};
use crate::multiscale::avg_pyramid;
use crate::numerics::{ParamId, ParamStore, Tensor};

pub const DEFAULT_TOKEN_VOCAB: usize = 4096;
pub const DEFAULT_PROMPT_LEN: usize = 4;
pub const TOKEN_EMBED_STD: f64 = 0.02;

const TEMPLATE_SOURCE: &str = include_str!("../assets/prompt_templates.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct Templates {
    pub version: String,
    pub data: DataTemplates,
    pub capability: CapabilityTemplates,
    pub tasks: TaskWords,
}

#[derive(Debug, Clone, Deserialize)]
pub struct DataTemplates {
    pub description: String,
    pub task: String,
    pub statistics_header: String,
    pub statistics_item: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CapabilityTemplates {
    pub logic: String,
    pub emotion: String,
    pub reasoning: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct TaskWords {
    pub long_forecast: String,
    pub short_forecast: String,
}

pub fn templates() -> &'static Templates {
    static T: OnceLock<Templates> = OnceLock::new();
    T.get_or_init(|| toml::from_str(TEMPLATE_SOURCE).expect("bundled templates parse"))
}

/// Replace every `{key}` in `template`.
fn fill(template: &str, slots: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    LongForecast,
    ShortForecast,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "long_forecast" => Ok(Task::LongForecast),
            "short_forecast" => Ok(Task::ShortForecast),
            other => Err(Error::Config(format!(
                "unknown task `{other}`; expected long_forecast or short_forecast"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    DataCorrelated,
    Capability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub kind: PromptKind,
    /// Ordered `(segment name, text)` pairs.
    pub segments: Vec<(String, String)>,
    pub rendered: String,
}

impl TextPrompt {
    fn new(kind: PromptKind, segments: Vec<(String, String)>) -> Self {
        let rendered = segments.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join(" ");
        TextPrompt {
            kind,
            segments,
            rendered,
        }
    }
}

/// What the data prompt says about the series.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMeta {
    pub name: String,
    pub frequency: Frequency,
    pub horizon: usize,
}

/// Six significant digits, trailing zeros trimmed.
pub fn fmt_sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = trim(format!("{v:.decimals$}"));
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        let s = format!("{v:.5e}");
        let (mant, e) = s.split_once('e').expect("exponent form");
        format!("{}e{}", trim(mant.to_string()), e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub slope: f64,
}

impl ChannelStats {
    pub fn trend(&self) -> &'static str {
        let scale = self.max.abs().max(self.min.abs()).max(1.0);
        if self.slope.abs() <= 1e-12 * scale {
            "flat"
        } else if self.slope > 0.0 {
            "up"
        } else {
            "down"
        }
    }
}

pub fn channel_stats(x: &[f64]) -> ChannelStats {
    let n = x.len();
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let tm = (n as f64 - 1.0) / 2.0;
    let xm = x.iter().sum::<f64>() / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, &v) in x.iter().enumerate() {
        let dt = t as f64 - tm;
        num += dt * (v - xm);
        den += dt * dt;
    }
    ChannelStats {
        min: sorted[0],
        max: sorted[n - 1],
        median,
        slope: if den > 0.0 { num / den } else { 0.0 },
    }
}

/// Data-correlated prompt: description, task and statistics of the window and
/// of each average-pooled coarser view (`windows` as in the scale config).
pub fn build_data_prompt(meta: &PromptMeta, window: &Tensor, windows: &[usize]) -> Result<TextPrompt> {
    let t = templates();
    let levels = avg_pyramid(window, windows)?;
    let description = fill(
        &t.data.description,
        &[
            ("name", meta.name.clone()),
            ("channels", window.cols().to_string()),
            ("frequency", meta.frequency.to_string()),
        ],
    );
    let task = fill(
        &t.data.task,
        &[
            ("horizon", meta.horizon.to_string()),
            ("input_len", window.rows().to_string()),
        ],
    );
    let mut stats = fill(&t.data.statistics_header, &[("levels", windows.len().to_string())]);
    for (s, level) in levels.iter().enumerate() {
        for c in 0..level.cols() {
            let st = channel_stats(&level.column(c));
            stats.push(' ');
            stats.push_str(&fill(
                &t.data.statistics_item,
                &[
                    ("level", (s + 1).to_string()),
                    ("channel", (c + 1).to_string()),
                    ("min", fmt_sig6(st.min)),
                    ("max", fmt_sig6(st.max)),
                    ("median", fmt_sig6(st.median)),
                    ("trend", st.trend().to_string()),
                ],
            ));
        }
    }
    Ok(TextPrompt::new(
        PromptKind::DataCorrelated,
        vec![
            ("description".into(), description),
            ("task".into(), task),
            ("statistics".into(), stats),
        ],
    ))
}

pub fn build_capability_prompt(task: Task) -> TextPrompt {
    let t = templates();
    let word = match task {
        Task::LongForecast => t.tasks.long_forecast.clone(),
        Task::ShortForecast => t.tasks.short_forecast.clone(),
    };
    let slot = [("task", word)];
    TextPrompt::new(
        PromptKind::Capability,
        vec![
            ("logic".into(), fill(&t.capability.logic, &slot)),
            ("emotion".into(), fill(&t.capability.emotion, &slot)),
            ("reasoning".into(), fill(&t.capability.reasoning, &slot)),
        ],
    )
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn token_regex() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| Regex::new(r"[+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?|\w+|[^\w\s]").expect("valid regex"))
}

/// Lowercased word, number and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    token_regex().find_iter(&lower).map(|m| m.as_str().to_string()).collect()
}

pub fn token_ids(text: &str, vocab: usize) -> Vec<usize> {
    tokenize(text)
        .iter()
        .map(|t| (fnv1a(t.as_bytes()) % vocab as u64) as usize)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    pub token_ids: Vec<usize>,
    /// `L×D`.
    pub embedded: Tensor,
}

/// Look the prompt's tokens up in a (frozen) `V_tok×D` table.
pub fn tokenize_embed(prompt: &TextPrompt, table: &Tensor) -> Result<TokenEmbedding> {
    let ids = token_ids(&prompt.rendered, table.rows());
    if ids.is_empty() {
        return Err(Error::Data("cannot embed an empty prompt".into()));
    }
    let rows: Vec<Vec<f64>> = ids.iter().map(|&i| table.row_slice(i).to_vec()).collect();
    Ok(TokenEmbedding {
        token_ids: ids,
        embedded: Tensor::from_rows(&rows)?,
    })
}

pub fn init_token_table<R: Rng + ?Sized>(store: &mut ParamStore, vocab: usize, width: usize, rng: &mut R) -> ParamId {
    store.add("prompts.token_table", Tensor::randn(vocab, width, TOKEN_EMBED_STD, rng), false)
}

/// Trainable `L^s×D` prompt per scale.
pub fn init_learnable_prompts<R: Rng + ?Sized>(
    store: &mut ParamStore,
    lengths: &[usize],
    width: usize,
    rng: &mut R,
) -> Vec<ParamId> {
    lengths
        .iter()
        .enumerate()
        .map(|(s, &l)| store.add(format!("prompts.learnable.{s}"), Tensor::randn(l, width, 0.1, rng), true))
        .collect()
}

//! Run settings: an optional TOML file overlaid by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use detox_core::pipeline::{Mode, PipelineConfig};
use detox_core::socd::KMax;
use detox_core::DivergenceKind;
use serde::Deserialize;

use crate::Failure;

/// Every key is optional in both places. Flags win over the file.
#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    /// Input corpus (JSONL with `id` and `text`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output path for the detoxified corpus.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// socd, vanilla-cd or prompt-only.
    #[arg(long)]
    pub mode: Option<String>,
    /// ngram:PATH or bridge:HOST:PORT.
    #[arg(long)]
    pub base_model: Option<String>,
    /// ngram:PATH or bridge:HOST:PORT. Not needed in prompt-only mode.
    #[arg(long)]
    pub toxic_model: Option<String>,
    /// fkl, rkl, js, tvd or emd.
    #[arg(long)]
    pub divergence: Option<String>,
    /// Fusion weight on non-toxicity, in [0, 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated sampling temperatures.
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Option<Vec<f64>>,
    #[arg(long)]
    pub samples_per_temp: Option<usize>,
    #[arg(long)]
    pub k_min: Option<usize>,
    /// A number or `half-vocab`.
    #[arg(long)]
    #[serde(default, deserialize_with = "k_max_setting")]
    pub k_max: Option<String>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Plausibility mask for vanilla-cd.
    #[arg(long)]
    pub alpha_mask: Option<f64>,
    /// Amateur penalty for vanilla-cd.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// lexicon:PATH or bridge:HOST:PORT.
    #[arg(long)]
    pub scorer: Option<String>,
    /// bow:DIM or bridge:HOST:PORT.
    #[arg(long)]
    pub embedder: Option<String>,
}

/// Accepts `k_max = 40` as well as `k_max = "half-vocab"`.
fn k_max_setting<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Number(usize),
        Text(String),
    }
    Ok(Option::<Raw>::deserialize(d)?.map(|r| match r {
        Raw::Number(n) => n.to_string(),
        Raw::Text(s) => s,
    }))
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),* $(,)?) => {
        RunSettings { $($field: $top.$field.or($base.$field)),* }
    };
}

impl RunSettings {
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    /// `self` overrides `base` key by key.
    pub fn over(self, base: RunSettings) -> RunSettings {
        let top = self;
        overlay!(base, top; input, output, mode, base_model, toxic_model, divergence, lambda,
            temperatures, samples_per_temp, k_min, k_max, max_new_tokens, alpha_mask, beta,
            seed, workers, scorer, embedder)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, Failure> {
        let mut cfg = PipelineConfig::default();
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<Mode>().map_err(Failure::config)?;
        }
        if let Some(d) = &self.divergence {
            cfg.socd.divergence = d.parse::<DivergenceKind>().map_err(Failure::config)?;
        }
        if let Some(k) = &self.k_max {
            cfg.socd.k_max = parse_k_max(k)?;
        }
        set(&mut cfg.fusion.lambda, self.lambda);
        set(&mut cfg.fusion.temperatures, self.temperatures.clone());
        set(&mut cfg.fusion.samples_per_temperature, self.samples_per_temp);
        set(&mut cfg.socd.k_min, self.k_min);
        set(&mut cfg.socd.max_new_tokens, self.max_new_tokens);
        set(&mut cfg.vanilla.alpha_mask, self.alpha_mask);
        set(&mut cfg.vanilla.beta, self.beta);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.workers, self.workers);
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn parse_k_max(s: &str) -> Result<KMax, Failure> {
    if s == "half-vocab" {
        return Ok(KMax::HalfVocab);
    }
    s.parse()
        .map(KMax::Fixed)
        .map_err(|_| Failure::config(format!("k-max must be a number or `half-vocab`, got `{s}`")))
}

//! Soft contrastive decoding and the vanilla contrastive-decoding baseline.
//!
//! A single SoCD step compares the base and toxic next-token distributions,
//! turns their disparity δ into a strength α, picks the `k` tokens the toxic
//! model prefers most over the base model, and lowers only those base logits
//! by `α · |toxic logit|`. Every other dimension is left untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{
    alpha_from_delta, divergence_with, log_prob_diff_with_floor, softmax, softmax_masked,
    DistributionError, DivergenceKind, DivergenceOptions, JsForm, DEFAULT_EPSILON,
};
use crate::providers::{DistributionProvider, ProviderError};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("provider failed at step {step}: {source}")]
    Provider {
        step: usize,
        #[source]
        source: ProviderError,
    },
}

impl From<DistributionError> for DecodeError {
    fn from(e: DistributionError) -> Self {
        DecodeError::Parameter(e.to_string())
    }
}

/// Upper bound on the number of suppressed dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMax {
    Fixed(usize),
    /// `V / 2`, rounded down (at least 1).
    HalfVocab,
}

impl KMax {
    pub fn resolve(self, vocab_size: usize) -> usize {
        match self {
            KMax::Fixed(k) => k,
            KMax::HalfVocab => (vocab_size / 2).max(1),
        }
    }
}

/// Where the sampling temperature is applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// Both providers' logits are divided by τ before the intervention; the
    /// adjusted logits are then sampled at temperature 1.
    #[default]
    BeforeIntervention,
    /// The intervention runs at τ = 1 and τ is only used for the final draw.
    FinalSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoCDConfig {
    pub divergence: DivergenceKind,
    pub js_form: JsForm,
    pub k_min: usize,
    pub k_max: KMax,
    pub epsilon_floor: f64,
    pub max_new_tokens: usize,
    /// Never suppressed. `None` disables the protection.
    pub eos_token: Option<TokenId>,
    pub temperature_mode: TemperatureMode,
}

impl Default for SoCDConfig {
    fn default() -> Self {
        Self {
            divergence: DivergenceKind::Js,
            js_form: JsForm::Mixture,
            k_min: 10,
            k_max: KMax::HalfVocab,
            epsilon_floor: DEFAULT_EPSILON,
            max_new_tokens: 256,
            eos_token: None,
            temperature_mode: TemperatureMode::BeforeIntervention,
        }
    }
}

impl SoCDConfig {
    /// Checks the config against a concrete vocabulary size.
    pub fn validate(&self, vocab_size: usize) -> Result<(), DecodeError> {
        let k_max = self.k_max.resolve(vocab_size);
        if !(1 <= self.k_min && self.k_min <= k_max && k_max <= vocab_size) {
            return Err(DecodeError::Config(format!(
                "need 1 <= k_min ({}) <= k_max ({k_max}) <= V ({vocab_size})",
                self.k_min
            )));
        }
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor <= 1e-6) {
            return Err(DecodeError::Config(format!(
                "epsilon_floor must be in (0, 1e-6], got {}",
                self.epsilon_floor
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(DecodeError::Config("max_new_tokens must be at least 1".into()));
        }
        if let Some(eos) = self.eos_token {
            if eos as usize >= vocab_size {
                return Err(DecodeError::Config(format!(
                    "eos token {eos} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanillaCDConfig {
    pub alpha_mask: f64,
    pub beta: f64,
}

impl Default for VanillaCDConfig {
    fn default() -> Self {
        Self {
            alpha_mask: 0.1,
            beta: 0.5,
        }
    }
}

/// Everything a single SoCD step decided.
#[derive(Debug, Clone, PartialEq)]
pub struct SoCDStepTrace {
    pub delta: f64,
    pub alpha: f64,
    pub k: usize,
    /// Suppressed token ids, in selection order (largest log-ratio first).
    pub selected_indices: Vec<TokenId>,
    pub suppressed_logits: Vec<f64>,
}

fn check_logits(name: &str, v: &[f64]) -> Result<(), DecodeError> {
    if v.is_empty() {
        return Err(DecodeError::Parameter(format!("{name} is empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(DecodeError::Parameter(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// Indices of the `k` largest finite entries of `d`; ties go to the lower index.
pub fn top_k_finite(d: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d[i].is_finite()).collect();
    let by_value_then_index =
        |a: &usize, b: &usize| d[*b].total_cmp(&d[*a]).then_with(|| a.cmp(b));
    if k < idx.len() {
        if k == 0 {
            return Vec::new();
        }
        idx.select_nth_unstable_by(k - 1, by_value_then_index);
        idx.truncate(k);
    }
    idx.sort_by(by_value_then_index);
    idx
}

/// One SoCD intervention.
///
/// With [`TemperatureMode::BeforeIntervention`] (the default) both logit
/// vectors are divided by `temperature` first, so the returned logits live in
/// the tempered space and should be sampled at temperature 1. At τ = 1 the
/// unselected dimensions are bit-identical to `base_logits`.
pub fn socd_step(
    base_logits: &[f64],
    toxic_logits: &[f64],
    temperature: f64,
    cfg: &SoCDConfig,
) -> Result<(Vec<f64>, SoCDStepTrace), DecodeError> {
    check_logits("base logits", base_logits)?;
    check_logits("toxic logits", toxic_logits)?;
    if base_logits.len() != toxic_logits.len() {
        return Err(DecodeError::Parameter(format!(
            "logit length mismatch: base {} vs toxic {}",
            base_logits.len(),
            toxic_logits.len()
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(DecodeError::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let vocab = base_logits.len();
    cfg.validate(vocab)?;

    let tau = match cfg.temperature_mode {
        TemperatureMode::BeforeIntervention => temperature,
        TemperatureMode::FinalSampling => 1.0,
    };
    let (base, toxic): (Vec<f64>, Vec<f64>) = if tau == 1.0 {
        (base_logits.to_vec(), toxic_logits.to_vec())
    } else {
        (
            base_logits.iter().map(|v| v / tau).collect(),
            toxic_logits.iter().map(|v| v / tau).collect(),
        )
    };

    let p_base = softmax(&base, 1.0)?;
    let p_toxic = softmax(&toxic, 1.0)?;
    let opts = DivergenceOptions {
        js_form: cfg.js_form,
        epsilon: cfg.epsilon_floor,
    };
    let delta = divergence_with(cfg.divergence, &p_base, &p_toxic, &opts)?;
    let alpha = alpha_from_delta(delta)?;
    let k = ((alpha * vocab as f64).ceil() as usize).clamp(cfg.k_min, cfg.k_max.resolve(vocab));

    let mut d = log_prob_diff_with_floor(&p_toxic, &p_base, cfg.epsilon_floor)?;
    if let Some(eos) = cfg.eos_token {
        d[eos as usize] = f64::NEG_INFINITY;
    }
    let selected = top_k_finite(&d, k);

    let mut adjusted = base;
    for &i in &selected {
        adjusted[i] -= alpha * toxic[i].abs();
    }
    let trace = SoCDStepTrace {
        delta,
        alpha,
        k,
        selected_indices: selected.iter().map(|&i| i as TokenId).collect(),
        suppressed_logits: adjusted.clone(),
    };
    Ok((adjusted, trace))
}

/// Expert-minus-amateur contrastive logits with an α-mask plausibility cut.
///
/// Tokens outside the mask get `-inf`.
pub fn vanilla_cd_step(
    expert_logits: &[f64],
    amateur_logits: &[f64],
    cfg: &VanillaCDConfig,
) -> Result<Vec<f64>, DecodeError> {
    check_logits("expert logits", expert_logits)?;
    check_logits("amateur logits", amateur_logits)?;
    if expert_logits.len() != amateur_logits.len() {
        return Err(DecodeError::Parameter(format!(
            "logit length mismatch: expert {} vs amateur {}",
            expert_logits.len(),
            amateur_logits.len()
        )));
    }
    if !(cfg.alpha_mask > 0.0 && cfg.alpha_mask <= 1.0) {
        return Err(DecodeError::Parameter(format!(
            "alpha_mask must be in (0, 1], got {}",
            cfg.alpha_mask
        )));
    }
    if !(cfg.beta.is_finite() && cfg.beta >= 0.0) {
        return Err(DecodeError::Parameter(format!(
            "beta must be non-negative, got {}",
            cfg.beta
        )));
    }
    let max = expert_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cutoff = max + cfg.alpha_mask.ln();
    Ok(expert_logits
        .iter()
        .zip(amateur_logits)
        .map(|(&e, &a)| {
            if e >= cutoff {
                (1.0 + cfg.beta) * e - cfg.beta * a
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

/// How the next-token logits are formed from the two providers.
#[derive(Debug, Clone, PartialEq)]
pub enum Intervention {
    /// Plain sampling from the base provider.
    BaseOnly,
    Socd(SoCDConfig),
    VanillaCd(VanillaCDConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRequest<'a> {
    pub prompt: &'a [TokenId],
    pub temperature: f64,
    pub temperature_mode: TemperatureMode,
    pub max_new_tokens: usize,
    pub eos_token: Option<TokenId>,
    pub seed: u64,
}

/// Draws one index from `softmax(logits / temperature)`; `-inf` entries are never drawn.
pub fn sample_index<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let probs = softmax_masked(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Autoregressive SoCD decoding. Returns the generated tokens only.
pub fn decode(
    base: &dyn DistributionProvider,
    toxic: &dyn DistributionProvider,
    prompt: &[TokenId],
    temperature: f64,
    cfg: &SoCDConfig,
    seed: u64,
) -> Result<Vec<TokenId>, DecodeError> {
    let request = DecodeRequest {
        prompt,
        temperature,
        temperature_mode: cfg.temperature_mode,
        max_new_tokens: cfg.max_new_tokens,
        eos_token: cfg.eos_token,
        seed,
    };
    decode_with(base, Some(toxic), &Intervention::Socd(cfg.clone()), &request)
}

/// Autoregressive decoding under any [`Intervention`].
///
/// `toxic` may be `None` only for [`Intervention::BaseOnly`].
pub fn decode_with(
    base: &dyn DistributionProvider,
    toxic: Option<&dyn DistributionProvider>,
    intervention: &Intervention,
    req: &DecodeRequest<'_>,
) -> Result<Vec<TokenId>, DecodeError> {
    if req.prompt.is_empty() {
        return Err(DecodeError::Parameter("prompt is empty".into()));
    }
    if req.max_new_tokens == 0 {
        return Err(DecodeError::Config("max_new_tokens must be at least 1".into()));
    }
    if !(req.temperature.is_finite() && req.temperature > 0.0) {
        return Err(DecodeError::Parameter(format!(
            "temperature must be positive, got {}",
            req.temperature
        )));
    }
    let vocab = base.vocab_size();
    let toxic = match (intervention, toxic) {
        (Intervention::BaseOnly, t) => t,
        (_, Some(t)) => Some(t),
        (_, None) => {
            return Err(DecodeError::Config(
                "contrastive decoding needs a toxic provider".into(),
            ))
        }
    };
    if let Some(t) = toxic {
        if t.vocab_size() != vocab || t.tokenizer_id() != base.tokenizer_id() {
            return Err(DecodeError::Config(format!(
                "providers disagree: base ({vocab}, {}) vs toxic ({}, {})",
                base.tokenizer_id(),
                t.vocab_size(),
                t.tokenizer_id()
            )));
        }
    }
    if let Some(&bad) = req.prompt.iter().find(|&&t| t as usize >= vocab) {
        return Err(DecodeError::Parameter(format!(
            "prompt token {bad} outside vocabulary of size {vocab}"
        )));
    }
    let mut socd_cfg = match intervention {
        Intervention::Socd(cfg) => {
            let mut cfg = cfg.clone();
            cfg.temperature_mode = req.temperature_mode;
            cfg.eos_token = req.eos_token;
            cfg.validate(vocab)?;
            Some(cfg)
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut context = req.prompt.to_vec();
    let mut generated = Vec::new();
    for step in 0..req.max_new_tokens {
        let provider_err = |source| DecodeError::Provider { step, source };
        let base_logits = base.next_logits(&context).map_err(provider_err)?;
        if base_logits.len() != vocab {
            return Err(provider_err(ProviderError::VocabMismatch {
                expected: vocab,
                got: base_logits.len(),
            }));
        }
        let (logits, final_tau) = match intervention {
            Intervention::BaseOnly => (base_logits, req.temperature),
            Intervention::Socd(_) => {
                let cfg = socd_cfg.as_mut().expect("validated above");
                let toxic_logits = toxic
                    .expect("checked above")
                    .next_logits(&context)
                    .map_err(provider_err)?;
                let (adjusted, _) = socd_step(&base_logits, &toxic_logits, req.temperature, cfg)?;
                match req.temperature_mode {
                    TemperatureMode::BeforeIntervention => (adjusted, 1.0),
                    TemperatureMode::FinalSampling => (adjusted, req.temperature),
                }
            }
            Intervention::VanillaCd(cfg) => {
                let toxic_logits = toxic
                    .expect("checked above")
                    .next_logits(&context)
                    .map_err(provider_err)?;
                (vanilla_cd_step(&base_logits, &toxic_logits, cfg)?, req.temperature)
            }
        };
        let next = sample_index(&logits, final_tau, &mut rng) as TokenId;
        if Some(next) == req.eos_token {
            break;
        }
        generated.push(next);
        context.push(next);
    }
    Ok(generated)
}

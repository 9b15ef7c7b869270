//! Probability and logit arithmetic over a shared vocabulary.
//!
//! Everything here is a pure function. Probabilities are floored at
//! [`DEFAULT_EPSILON`] before any logarithm so that disjoint supports give
//! large but finite divergences.
//!
//! | Kind | Value |
//! |------|-------|
//! | FKL  | Σ pᵢ ln(pᵢ/qᵢ) |
//! | RKL  | Σ qᵢ ln(qᵢ/pᵢ) |
//! | JS   | ½ KL(p‖m) + ½ KL(q‖m), m = (p+q)/2 (or ½(KL(p‖q)+KL(q‖p)) with [`JsForm::SymmetrizedKl`]) |
//! | TVD  | ½ Σ \|pᵢ − qᵢ\| |
//! | EMD  | Σᵢ \|CDFₚ(i) − CDF_q(i)\| with ground distance \|i − j\| on token indices |

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to probabilities before taking a logarithm.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Tolerance on Σp = 1 for a stored probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("vocabulary size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistributionKind {
    Logits,
    Probs,
}

/// A vector of logits or probabilities over a vocabulary of size `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    values: Vec<f64>,
    kind: DistributionKind,
}

impl TokenDistribution {
    /// Wraps finite logits.
    pub fn logits(values: Vec<f64>) -> Result<Self, DistributionError> {
        if values.is_empty() {
            return Err(DistributionError::Parameter("empty logit vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DistributionError::Parameter(format!(
                "logit {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self {
            values,
            kind: DistributionKind::Logits,
        })
    }

    /// Wraps a probability vector, checking non-negativity and normalisation.
    pub fn probs(values: Vec<f64>) -> Result<Self, DistributionError> {
        if values.is_empty() {
            return Err(DistributionError::Parameter("empty probability vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DistributionError::Parameter(format!(
                "probability {i} is negative or not finite ({})",
                values[i]
            )));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(DistributionError::Parameter(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            values,
            kind: DistributionKind::Probs,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }

    fn expect_probs(&self) -> Result<&[f64], DistributionError> {
        match self.kind {
            DistributionKind::Probs => Ok(&self.values),
            DistributionKind::Logits => Err(DistributionError::Parameter(
                "expected a probability distribution, got logits".into(),
            )),
        }
    }
}

/// Disparity measure used to compare the base and toxic next-token distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Fkl,
    Rkl,
    Js,
    Tvd,
    Emd,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 5] = [
        DivergenceKind::Fkl,
        DivergenceKind::Rkl,
        DivergenceKind::Js,
        DivergenceKind::Tvd,
        DivergenceKind::Emd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DivergenceKind::Fkl => "fkl",
            DivergenceKind::Rkl => "rkl",
            DivergenceKind::Js => "js",
            DivergenceKind::Tvd => "tvd",
            DivergenceKind::Emd => "emd",
        }
    }
}

impl std::str::FromStr for DivergenceKind {
    type Err = DistributionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DivergenceKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DistributionError::Parameter(format!("unknown divergence `{s}`")))
    }
}

impl std::fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which formula [`DivergenceKind::Js`] evaluates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsForm {
    /// ½ KL(p‖m) + ½ KL(q‖m) with the mixture m = (p + q) / 2. Bounded by ln 2.
    #[default]
    Mixture,
    /// ½ (KL(p‖q) + KL(q‖p)), the symmetrised KL. Unbounded.
    SymmetrizedKl,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceOptions {
    pub js_form: JsForm,
    pub epsilon: f64,
}

impl Default for DivergenceOptions {
    fn default() -> Self {
        Self {
            js_form: JsForm::Mixture,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<TokenDistribution, DistributionError> {
    if logits.is_empty() {
        return Err(DistributionError::Parameter("empty logit vector".into()));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(DistributionError::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(DistributionError::Parameter("logits must be finite".into()));
    }
    Ok(TokenDistribution {
        values: softmax_masked(logits, temperature),
        kind: DistributionKind::Probs,
    })
}

/// Softmax that tolerates `-inf` entries (they get zero mass).
///
/// At least one entry must be finite; callers guarantee that.
pub(crate) fn softmax_masked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&v| {
            if v == f64::NEG_INFINITY {
                0.0
            } else {
                ((v - max) / temperature).exp()
            }
        })
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

fn check_pair<'a>(
    p: &'a TokenDistribution,
    q: &'a TokenDistribution,
) -> Result<(&'a [f64], &'a [f64]), DistributionError> {
    let (p, q) = (p.expect_probs()?, q.expect_probs()?);
    if p.len() != q.len() {
        return Err(DistributionError::SizeMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok((p, q))
}

fn kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                let pf = pi.max(eps);
                pf * (pf.ln() - qi.max(eps).ln())
            }
        })
        .sum::<f64>()
        .max(0.0)
}

fn js_mixture(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m, eps) + 0.5 * kl(q, &m, eps)).max(0.0)
}

fn tvd(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// 1-D Wasserstein-1 on indices 0..V with unit spacing.
fn emd(p: &[f64], q: &[f64]) -> f64 {
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q).take(p.len().saturating_sub(1)) {
        cdf_gap += a - b;
        total += cdf_gap.abs();
    }
    total
}

/// Divergence between two probability distributions with default options.
pub fn divergence(
    kind: DivergenceKind,
    p: &TokenDistribution,
    q: &TokenDistribution,
) -> Result<f64, DistributionError> {
    divergence_with(kind, p, q, &DivergenceOptions::default())
}

pub fn divergence_with(
    kind: DivergenceKind,
    p: &TokenDistribution,
    q: &TokenDistribution,
    opts: &DivergenceOptions,
) -> Result<f64, DistributionError> {
    let (p, q) = check_pair(p, q)?;
    let eps = opts.epsilon;
    Ok(match kind {
        DivergenceKind::Fkl => kl(p, q, eps),
        DivergenceKind::Rkl => kl(q, p, eps),
        DivergenceKind::Js => match opts.js_form {
            JsForm::Mixture => js_mixture(p, q, eps),
            JsForm::SymmetrizedKl => 0.5 * (kl(p, q, eps) + kl(q, p, eps)),
        },
        DivergenceKind::Tvd => tvd(p, q),
        DivergenceKind::Emd => emd(p, q),
    })
}

/// Maps a disparity δ ≥ 0 onto α = ln(1+δ) / (1 + ln(1+δ)) ∈ [0, 1).
pub fn alpha_from_delta(delta: f64) -> Result<f64, DistributionError> {
    if delta.is_nan() {
        return Err(DistributionError::Parameter("delta is NaN".into()));
    }
    if delta < -1e-9 {
        return Err(DistributionError::Parameter(format!(
            "delta must be non-negative, got {delta}"
        )));
    }
    let l = delta.max(0.0).ln_1p();
    if l.is_infinite() {
        // δ = +inf: the supremum is approached but never returned.
        return Ok(1.0 - f64::EPSILON);
    }
    Ok(l / (1.0 + l))
}

/// Per-token log-ratio ln p_toxic − ln p_base, keeping only strictly positive
/// entries; everything else becomes `-inf`.
pub fn log_prob_diff(
    p_toxic: &TokenDistribution,
    p_base: &TokenDistribution,
) -> Result<Vec<f64>, DistributionError> {
    log_prob_diff_with_floor(p_toxic, p_base, DEFAULT_EPSILON)
}

pub fn log_prob_diff_with_floor(
    p_toxic: &TokenDistribution,
    p_base: &TokenDistribution,
    epsilon: f64,
) -> Result<Vec<f64>, DistributionError> {
    let (t, b) = check_pair(p_toxic, p_base)?;
    Ok(t.iter()
        .zip(b)
        .map(|(&ti, &bi)| {
            let d = ti.max(epsilon).ln() - bi.max(epsilon).ln();
            if d > 0.0 {
                d
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

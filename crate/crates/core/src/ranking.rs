//! Multi-temperature candidate pooling and fusion re-ranking.
//!
//! Every candidate rewrite `y` of a source text `a` is scored as
//!
//! ```text
//! score(a, y) = λ · (1 − t(y)) + (1 − λ) · cos(g(a), g(y))
//! ```
//!
//! where `t` is a toxicity scorer and `g` a text embedder, and the highest
//! score wins. Ties are broken by higher similarity, then lower sampling
//! temperature, then first-seen order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::fnv1a64;
use crate::text::{normalized_tokens, Lexicon};

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("scorer `{name}` failed: {message}")]
    Scorer { name: String, message: String },
    #[error("embedder `{name}` failed: {message}")]
    Embedder { name: String, message: String },
    #[error("every candidate failed to score ({} failures)", .0.len())]
    AllCandidatesFailed(Vec<Exclusion>),
}

/// Maps text onto a toxicity probability in `[0, 1]`.
pub trait ToxicityScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, text: &str) -> Result<f64, RankingError>;
}

/// Maps text onto a fixed-length embedding vector.
pub trait TextEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, RankingError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
    pub temperatures: Vec<f64>,
    pub samples_per_temperature: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperatures: vec![0.6, 0.8, 1.0, 1.2, 1.3, 1.5],
            samples_per_temperature: 3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), RankingError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RankingError::Parameter(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.temperatures.is_empty() {
            return Err(RankingError::Parameter("temperature set is empty".into()));
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(RankingError::Parameter(format!(
                "temperatures must be positive, got {t}"
            )));
        }
        if self.samples_per_temperature == 0 {
            return Err(RankingError::Parameter(
                "samples_per_temperature must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A candidate rewrite before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDraft {
    pub text: String,
    pub temperature: f64,
    /// True when the text came from a raw generation without answer tags.
    pub from_raw_generation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub temperature: f64,
    pub toxicity: f64,
    pub similarity: f64,
    pub fusion_score: f64,
    pub from_raw_generation: bool,
    /// Set when one of the embeddings had zero norm and the similarity defaulted to 0.
    pub zero_norm_embedding: bool,
}

/// A candidate dropped because scoring failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: Candidate,
    /// Successfully scored candidates, in input order.
    pub all_scored: Vec<Candidate>,
    pub excluded: Vec<Exclusion>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// At least one input had zero norm; `value` is 0 by convention.
    pub zero_norm: bool,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<Cosine, RankingError> {
    if u.len() != v.len() {
        return Err(RankingError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            zero_norm: true,
        });
    }
    Ok(Cosine {
        value: (dot / (nu * nv)).clamp(-1.0, 1.0),
        zero_norm: false,
    })
}

/// λ(1 − toxicity) + (1 − λ)·similarity.
pub fn fusion_score(lambda: f64, toxicity: f64, similarity: f64) -> f64 {
    lambda * (1.0 - toxicity) + (1.0 - lambda) * similarity
}

/// Whether `a` ranks strictly above `b`. `a` is assumed to come later in input order.
fn outranks(a: &Candidate, b: &Candidate) -> bool {
    use std::cmp::Ordering::*;
    match a.fusion_score.total_cmp(&b.fusion_score) {
        Greater => true,
        Less => false,
        Equal => match a.similarity.total_cmp(&b.similarity) {
            Greater => true,
            Less => false,
            Equal => a.temperature < b.temperature,
        },
    }
}

/// Index of the winning candidate under the fusion score and tie-break rules.
pub fn select_best(candidates: &[Candidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        match best {
            Some(b) if !outranks(c, &candidates[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Scores one draft against the original text's embedding.
pub fn score_candidate(
    draft: &CandidateDraft,
    original_embedding: &[f64],
    scorer: &dyn ToxicityScorer,
    embedder: &dyn TextEmbedder,
    lambda: f64,
) -> Result<Candidate, RankingError> {
    let toxicity = scorer.score(&draft.text)?;
    if !(0.0..=1.0).contains(&toxicity) {
        return Err(RankingError::Scorer {
            name: scorer.name().to_owned(),
            message: format!("score {toxicity} outside [0, 1]"),
        });
    }
    let embedding = embedder.embed(&draft.text)?;
    let cos = cosine_similarity(original_embedding, &embedding)?;
    Ok(Candidate {
        text: draft.text.clone(),
        temperature: draft.temperature,
        toxicity,
        similarity: cos.value,
        fusion_score: fusion_score(lambda, toxicity, cos.value),
        from_raw_generation: draft.from_raw_generation,
        zero_norm_embedding: cos.zero_norm,
    })
}

/// Scores every draft and returns the argmax of the fusion score.
///
/// Drafts whose scoring fails are excluded with a reason; if all of them fail
/// the call returns [`RankingError::AllCandidatesFailed`].
pub fn fuse_and_select(
    original: &str,
    candidates: &[CandidateDraft],
    scorer: &dyn ToxicityScorer,
    embedder: &dyn TextEmbedder,
    cfg: &FusionConfig,
) -> Result<Selection, RankingError> {
    if candidates.is_empty() {
        return Err(RankingError::Parameter("no candidates to rank".into()));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(RankingError::Parameter(format!(
            "lambda must be in [0, 1], got {}",
            cfg.lambda
        )));
    }
    let original_embedding = embedder.embed(original)?;
    let mut scored = Vec::with_capacity(candidates.len());
    let mut excluded = Vec::new();
    for (index, draft) in candidates.iter().enumerate() {
        match score_candidate(draft, &original_embedding, scorer, embedder, cfg.lambda) {
            Ok(c) => scored.push(c),
            Err(e) => {
                log::warn!("candidate {index} excluded: {e}");
                excluded.push(Exclusion {
                    index,
                    reason: e.to_string(),
                });
            }
        }
    }
    match select_best(&scored) {
        Some(i) => Ok(Selection {
            best: scored[i].clone(),
            all_scored: scored,
            excluded,
        }),
        None => Err(RankingError::AllCandidatesFailed(excluded)),
    }
}

pub const DEFAULT_LEXICON_GAIN: f64 = 5.0;

/// min(1, gain · matched / total) over normalised tokens; 0 for empty text.
pub fn lexicon_toxicity(text: &str, lexicon: &Lexicon, gain: f64) -> f64 {
    let (hits, total) = lexicon.count_hits(text);
    if total == 0 {
        return 0.0;
    }
    (hits as f64 / total as f64 * gain).min(1.0)
}

/// Desk-scale toxicity scorer backed by a stem lexicon.
#[derive(Debug, Clone)]
pub struct LexiconScorer {
    lexicon: Lexicon,
    gain: f64,
}

impl LexiconScorer {
    pub fn new(lexicon: Lexicon) -> Result<Self, RankingError> {
        Self::with_gain(lexicon, DEFAULT_LEXICON_GAIN)
    }

    pub fn with_gain(lexicon: Lexicon, gain: f64) -> Result<Self, RankingError> {
        if lexicon.is_empty() {
            return Err(RankingError::Parameter("lexicon is empty".into()));
        }
        if !(gain.is_finite() && gain > 0.0) {
            return Err(RankingError::Parameter(format!("gain must be positive, got {gain}")));
        }
        Ok(Self { lexicon, gain })
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }
}

impl ToxicityScorer for LexiconScorer {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn score(&self, text: &str) -> Result<f64, RankingError> {
        Ok(lexicon_toxicity(text, &self.lexicon, self.gain))
    }
}

const BOW_SEED: u64 = 0x5eed_0f_b0u64;

/// Signed feature hashing of normalised tokens, L2-normalised.
///
/// Returns the zero vector for text without tokens.
pub fn hashed_bow_embed(text: &str, dim: usize) -> Vec<f64> {
    let dim = dim.max(1);
    let mut v = vec![0.0; dim];
    for tok in normalized_tokens(text) {
        let h = fnv1a64(tok.as_bytes(), BOW_SEED);
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

#[derive(Debug, Clone)]
pub struct BowEmbedder {
    dim: usize,
}

impl BowEmbedder {
    pub const MIN_DIM: usize = 8;

    pub fn new(dim: usize) -> Result<Self, RankingError> {
        if dim < Self::MIN_DIM {
            return Err(RankingError::Parameter(format!(
                "embedding dimension must be at least {}, got {dim}",
                Self::MIN_DIM
            )));
        }
        Ok(Self { dim })
    }
}

impl TextEmbedder for BowEmbedder {
    fn name(&self) -> &str {
        "bow"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RankingError> {
        Ok(hashed_bow_embed(text, self.dim))
    }
}

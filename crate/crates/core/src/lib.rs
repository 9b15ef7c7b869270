//! Corpus detoxification by soft contrastive decoding.
//!
//! The crate rewrites a toxic text corpus one record at a time:
//!
//! 1. a rewriting prompt wraps the source text ([`pipeline::build_prompt`]);
//! 2. candidates are decoded from a base model whose logits are nudged away
//!    from the tokens a toxic model prefers ([`socd::socd_step`]);
//! 3. candidates sampled at several temperatures are re-ranked by a blend of
//!    non-toxicity and similarity to the source ([`ranking::fuse_and_select`]).
//!
//! Model access goes through [`providers::DistributionProvider`], so the same
//! code runs over desk-scale n-gram models or a remote model bridge
//! ([`bridge`]). [`metrics`] holds the evaluation suite.
//!
//! ```
//! use detox_core::distributions::DivergenceKind;
//! use detox_core::socd::{socd_step, KMax, SoCDConfig};
//!
//! let cfg = SoCDConfig {
//!     divergence: DivergenceKind::Tvd,
//!     k_min: 1,
//!     k_max: KMax::Fixed(2),
//!     ..Default::default()
//! };
//! let (adjusted, trace) = socd_step(&[0.0; 4], &[2.0, 0.0, 0.0, 0.0], 1.0, &cfg).unwrap();
//! assert_eq!(trace.selected_indices, vec![0]);
//! assert!(adjusted[0] < 0.0);
//! assert_eq!(&adjusted[1..], &[0.0, 0.0, 0.0]);
//! ```
//!
//! The guide under `book/` walks through each stage; its code listings are
//! compiled and run as doctests of this crate.

pub mod bridge;
pub mod distributions;
pub mod metrics;
pub mod pipeline;
pub mod providers;
pub mod ranking;
pub mod socd;
pub mod text;

/// Index into a provider's vocabulary.
pub type TokenId = u32;

pub use distributions::{DivergenceKind, TokenDistribution};
pub use pipeline::{DetoxRecord, Mode, PipelineConfig};
pub use providers::{DistributionProvider, NgramModel, TableProvider, TokenizerMode, Vocabulary};
pub use ranking::{Candidate, FusionConfig, TextEmbedder, ToxicityScorer};
pub use socd::{SoCDConfig, VanillaCDConfig};

// Book chapters run as doctests so their listings stay in sync with the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/divergences.md")]
    mod divergences {}
    #[doc = include_str!("../../../book/src/socd.md")]
    mod socd {}
    #[doc = include_str!("../../../book/src/providers.md")]
    mod providers {}
    #[doc = include_str!("../../../book/src/ranking.md")]
    mod ranking {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/bridge.md")]
    mod bridge {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}

//! Next-token distribution providers.
//!
//! A provider maps a token context onto `V` finite logits. Two providers can
//! be combined by the decoder only if they agree on `vocab_size` and
//! `tokenizer_id`. Three implementations exist:
//!
//! * [`TableProvider`], a fixed lookup table for tests;
//! * [`NgramModel`], an add-k smoothed n-gram model with backoff;
//! * [`crate::bridge::RemoteProvider`], a client for the bridge wire protocol.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TokenId;

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Current version line of the n-gram text format.
pub const NGRAM_FORMAT_HEADER: &str = "detox-ngram v1";

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("expected {expected} logits, got {got}")]
    VocabMismatch { expected: usize, got: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("model format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ProviderError {
    /// Errors that come from talking to a remote service.
    pub fn is_remote(&self) -> bool {
        matches!(
            self,
            ProviderError::Transport(_) | ProviderError::Malformed(_) | ProviderError::Remote { .. }
        )
    }
}

/// A source of next-token logits over a fixed vocabulary.
pub trait DistributionProvider: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Identifies tokenizer and vocabulary; equal ids mean interchangeable token ids.
    fn tokenizer_id(&self) -> &str;

    fn eos_token(&self) -> Option<TokenId>;

    fn next_logits(&self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError>;

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, ProviderError>;

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Whitespace,
    Char,
}

impl TokenizerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerMode::Whitespace => "whitespace",
            TokenizerMode::Char => "char",
        }
    }

    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            TokenizerMode::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
            TokenizerMode::Char => text.chars().map(String::from).collect(),
        }
    }
}

impl std::str::FromStr for TokenizerMode {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whitespace" => Ok(TokenizerMode::Whitespace),
            "char" => Ok(TokenizerMode::Char),
            other => Err(ProviderError::Parameter(format!(
                "unknown tokenizer `{other}` (expected whitespace or char)"
            ))),
        }
    }
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Ordered token list with reserved `<eos>` and `<unk>` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    mode: TokenizerMode,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
    unk: TokenId,
    id: String,
}

impl Vocabulary {
    /// Builds a vocabulary from observed tokens: `<eos>`, `<unk>`, then the
    /// remaining tokens in sorted order.
    pub fn from_tokens<I, S>(mode: TokenizerMode, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set: std::collections::BTreeSet<String> =
            tokens.into_iter().map(Into::into).collect();
        set.remove(EOS);
        set.remove(UNK);
        let mut list = vec![EOS.to_owned(), UNK.to_owned()];
        list.extend(set);
        Self::from_ordered(mode, list).expect("reserved tokens present")
    }

    /// Uses `tokens` verbatim as id order. Must contain `<eos>` and `<unk>` once.
    pub fn from_ordered(mode: TokenizerMode, tokens: Vec<String>) -> Result<Self, ProviderError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(ProviderError::Parameter(format!("duplicate token {t:?}")));
            }
        }
        let eos = *index
            .get(EOS)
            .ok_or_else(|| ProviderError::Parameter("vocabulary lacks <eos>".into()))?;
        let unk = *index
            .get(UNK)
            .ok_or_else(|| ProviderError::Parameter("vocabulary lacks <unk>".into()))?;
        let mut fingerprint = 0u64;
        for t in &tokens {
            fingerprint = fnv1a64(t.as_bytes(), fingerprint.rotate_left(7));
        }
        let id = format!("{}:{}:{fingerprint:016x}", mode.as_str(), tokens.len());
        Ok(Self {
            mode,
            tokens,
            index,
            eos,
            unk,
            id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    /// `<mode>:<size>:<fingerprint>`.
    pub fn tokenizer_id(&self) -> &str {
        &self.id
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.mode
            .split(text)
            .iter()
            .map(|t| self.id_of(t).unwrap_or(self.unk))
            .collect()
    }

    /// Joins tokens back into text. Reserved tokens are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, ProviderError> {
        let sep = match self.mode {
            TokenizerMode::Whitespace => " ",
            TokenizerMode::Char => "",
        };
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(ProviderError::TokenOutOfRange {
                token: id,
                vocab_size: self.len(),
            })?;
            if id != self.eos && id != self.unk {
                parts.push(tok);
            }
        }
        Ok(parts.join(sep))
    }

    fn check_context(&self, context: &[TokenId]) -> Result<(), ProviderError> {
        match context.iter().find(|&&t| t as usize >= self.len()) {
            Some(&token) => Err(ProviderError::TokenOutOfRange {
                token,
                vocab_size: self.len(),
            }),
            None => Ok(()),
        }
    }
}

/// Deterministic provider backed by explicit logit rows.
///
/// A row is chosen by the longest registered suffix of the context; the
/// default row is used when nothing matches.
#[derive(Debug, Clone)]
pub struct TableProvider {
    vocab: Vocabulary,
    default_row: Vec<f64>,
    rows: BTreeMap<Vec<TokenId>, Vec<f64>>,
    max_suffix: usize,
}

impl TableProvider {
    pub fn new(vocab: Vocabulary, default_row: Vec<f64>) -> Result<Self, ProviderError> {
        Self::check_row(&vocab, &default_row)?;
        Ok(Self {
            vocab,
            default_row,
            rows: BTreeMap::new(),
            max_suffix: 0,
        })
    }

    /// All-zero logits, i.e. a uniform distribution.
    pub fn uniform(vocab: Vocabulary) -> Self {
        let row = vec![0.0; vocab.len()];
        Self::new(vocab, row).expect("uniform row is valid")
    }

    pub fn with_row(mut self, suffix: Vec<TokenId>, row: Vec<f64>) -> Result<Self, ProviderError> {
        Self::check_row(&self.vocab, &row)?;
        self.vocab.check_context(&suffix)?;
        self.max_suffix = self.max_suffix.max(suffix.len());
        self.rows.insert(suffix, row);
        Ok(self)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn check_row(vocab: &Vocabulary, row: &[f64]) -> Result<(), ProviderError> {
        if row.len() != vocab.len() {
            return Err(ProviderError::VocabMismatch {
                expected: vocab.len(),
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::Parameter("table row has non-finite logits".into()));
        }
        Ok(())
    }
}

impl DistributionProvider for TableProvider {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn tokenizer_id(&self) -> &str {
        self.vocab.tokenizer_id()
    }

    fn eos_token(&self) -> Option<TokenId> {
        Some(self.vocab.eos())
    }

    fn next_logits(&self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        self.vocab.check_context(context)?;
        let longest = self.max_suffix.min(context.len());
        for len in (0..=longest).rev() {
            if let Some(row) = self.rows.get(&context[context.len() - len..]) {
                return Ok(row.clone());
            }
        }
        Ok(self.default_row.clone())
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        Ok(self.vocab.encode(text))
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        self.vocab.decode(tokens)
    }
}

/// Add-k smoothed n-gram model with backoff to shorter contexts.
///
/// `levels[j]` maps a `j`-token context onto counts of the following token.
/// Each corpus line is one sequence, left-padded with `<eos>` and terminated
/// by `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    smoothing_k: f64,
    vocab: Vocabulary,
    levels: Vec<BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>>>,
}

impl NgramModel {
    pub const MAX_ORDER: usize = 5;

    /// Trains on `text` with a vocabulary built from the text itself.
    pub fn train(
        text: &str,
        order: usize,
        smoothing_k: f64,
        mode: TokenizerMode,
    ) -> Result<Self, ProviderError> {
        let vocab = Vocabulary::from_tokens(mode, text.lines().flat_map(|l| mode.split(l)));
        Self::train_with_vocab(text, order, smoothing_k, vocab)
    }

    /// Trains on `text` over a given vocabulary; unknown tokens count as `<unk>`.
    pub fn train_with_vocab(
        text: &str,
        order: usize,
        smoothing_k: f64,
        vocab: Vocabulary,
    ) -> Result<Self, ProviderError> {
        if !(1..=Self::MAX_ORDER).contains(&order) {
            return Err(ProviderError::Parameter(format!(
                "order must be in 1..={}, got {order}",
                Self::MAX_ORDER
            )));
        }
        if !(smoothing_k.is_finite() && smoothing_k > 0.0) {
            return Err(ProviderError::Parameter(format!(
                "smoothing_k must be positive, got {smoothing_k}"
            )));
        }
        let mut levels = vec![BTreeMap::new(); order];
        let mut seen_any = false;
        for line in text.lines() {
            let ids = vocab.encode(line);
            if ids.is_empty() {
                continue;
            }
            seen_any = true;
            let mut seq = vec![vocab.eos(); order - 1];
            seq.extend(ids);
            seq.push(vocab.eos());
            for pos in (order - 1)..seq.len() {
                let target = seq[pos];
                for (j, level) in levels.iter_mut().enumerate() {
                    let ctx = seq[pos - j..pos].to_vec();
                    *level
                        .entry(ctx)
                        .or_insert_with(BTreeMap::new)
                        .entry(target)
                        .or_insert(0u64) += 1;
                }
            }
        }
        if !seen_any {
            return Err(ProviderError::Parameter("training corpus is empty".into()));
        }
        Ok(Self {
            order,
            smoothing_k,
            vocab,
            levels,
        })
    }

    /// Same as [`NgramModel::train`] but reads the corpus from disk.
    pub fn train_file(
        path: &Path,
        order: usize,
        smoothing_k: f64,
        mode: TokenizerMode,
        vocab: Option<Vocabulary>,
    ) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)?;
        match vocab {
            Some(v) => Self::train_with_vocab(&text, order, smoothing_k, v),
            None => Self::train(&text, order, smoothing_k, mode),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing_k(&self) -> f64 {
        self.smoothing_k
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Count of `token` after `context` (exact context length, no backoff).
    pub fn count(&self, context: &[TokenId], token: TokenId) -> u64 {
        self.levels
            .get(context.len())
            .and_then(|l| l.get(context))
            .and_then(|c| c.get(&token))
            .copied()
            .unwrap_or(0)
    }

    /// Smoothed probabilities for the next token.
    pub fn next_probs(&self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        Ok(self
            .next_logits_inner(context)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    fn counts_for(&self, context: &[TokenId]) -> Option<&BTreeMap<TokenId, u64>> {
        let longest = (self.order - 1).min(context.len());
        (0..=longest)
            .rev()
            .find_map(|j| self.levels[j].get(&context[context.len() - j..]))
    }

    fn next_logits_inner(&self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        self.vocab.check_context(context)?;
        let v = self.vocab.len();
        let k = self.smoothing_k;
        let (counts, total) = match self.counts_for(context) {
            Some(c) => (Some(c), c.values().sum::<u64>() as f64),
            None => (None, 0.0),
        };
        let denom = total + k * v as f64;
        let floor = (k / denom).ln();
        let mut logits = vec![floor; v];
        if let Some(c) = counts {
            for (&tok, &n) in c {
                logits[tok as usize] = ((n as f64 + k) / denom).ln();
            }
        }
        Ok(logits)
    }

    /// Line-oriented text serialisation. Byte-identical for identical models.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{NGRAM_FORMAT_HEADER}");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "smoothing_k {}", self.smoothing_k);
        let _ = writeln!(out, "tokenizer {}", self.vocab.mode().as_str());
        let _ = writeln!(out, "vocab {}", self.vocab.len());
        for t in self.vocab.tokens() {
            let _ = writeln!(out, "{}", serde_json::to_string(t).expect("string encodes"));
        }
        for (j, level) in self.levels.iter().enumerate() {
            let _ = writeln!(out, "level {j} {}", level.len());
            for (ctx, counts) in level {
                let ctx: Vec<String> = ctx.iter().map(u32::to_string).collect();
                let counts: Vec<String> = counts.iter().map(|(t, n)| format!("{t}:{n}")).collect();
                let _ = writeln!(out, "{}\t{}", ctx.join(" "), counts.join(" "));
            }
        }
        let _ = writeln!(out, "end");
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ProviderError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| ProviderError::Format {
                line: 0,
                message: format!("unexpected end of file, wanted {what}"),
            })
        };
        let fmt_err = |line: usize, message: String| ProviderError::Format { line, message };

        let (ln, header) = next("header")?;
        if header != NGRAM_FORMAT_HEADER {
            return Err(fmt_err(ln, format!("unsupported header {header:?}")));
        }
        let mut field = |name: &str| -> Result<(usize, String), ProviderError> {
            let (ln, line) = next(name)?;
            match line.split_once(' ') {
                Some((key, value)) if key == name => Ok((ln, value.to_owned())),
                _ => Err(fmt_err(ln, format!("expected `{name} <value>`"))),
            }
        };
        let (ln, order) = field("order")?;
        let order: usize = order.parse().map_err(|_| fmt_err(ln, "bad order".into()))?;
        let (ln, k) = field("smoothing_k")?;
        let smoothing_k: f64 = k.parse().map_err(|_| fmt_err(ln, "bad smoothing_k".into()))?;
        let (ln, mode) = field("tokenizer")?;
        let mode: TokenizerMode = mode.parse().map_err(|_| fmt_err(ln, "bad tokenizer".into()))?;
        let (ln, size) = field("vocab")?;
        let size: usize = size.parse().map_err(|_| fmt_err(ln, "bad vocab size".into()))?;
        if !(1..=Self::MAX_ORDER).contains(&order) || !(smoothing_k > 0.0) {
            return Err(fmt_err(ln, "order or smoothing_k out of range".into()));
        }

        let mut tokens = Vec::with_capacity(size);
        for _ in 0..size {
            let (ln, line) = next("token")?;
            let tok: String = serde_json::from_str(line)
                .map_err(|e| fmt_err(ln, format!("bad token literal: {e}")))?;
            tokens.push(tok);
        }
        let vocab = Vocabulary::from_ordered(mode, tokens).map_err(|e| fmt_err(ln, e.to_string()))?;
        let parse_id = |ln: usize, s: &str| -> Result<TokenId, ProviderError> {
            let id: TokenId = s.parse().map_err(|_| fmt_err(ln, format!("bad token id {s:?}")))?;
            if id as usize >= size {
                return Err(fmt_err(ln, format!("token id {id} out of range")));
            }
            Ok(id)
        };

        let mut levels = Vec::with_capacity(order);
        for j in 0..order {
            let (ln, line) = next("level")?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 3 || parts[0] != "level" || parts[1] != j.to_string() {
                return Err(fmt_err(ln, format!("expected `level {j} <n>`")));
            }
            let n: usize = parts[2].parse().map_err(|_| fmt_err(ln, "bad count".into()))?;
            let mut level = BTreeMap::new();
            for _ in 0..n {
                let (ln, line) = next("context")?;
                let (ctx, counts) = line
                    .split_once('\t')
                    .ok_or_else(|| fmt_err(ln, "missing tab".into()))?;
                let ctx = ctx
                    .split(' ')
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_id(ln, s))
                    .collect::<Result<Vec<_>, _>>()?;
                if ctx.len() != j {
                    return Err(fmt_err(ln, format!("context length {} != {j}", ctx.len())));
                }
                let mut table = BTreeMap::new();
                for pair in counts.split(' ').filter(|s| !s.is_empty()) {
                    let (t, c) = pair
                        .split_once(':')
                        .ok_or_else(|| fmt_err(ln, format!("bad pair {pair:?}")))?;
                    let c: u64 = c.parse().map_err(|_| fmt_err(ln, format!("bad count {c:?}")))?;
                    if c == 0 {
                        return Err(fmt_err(ln, "stored counts must be positive".into()));
                    }
                    table.insert(parse_id(ln, t)?, c);
                }
                level.insert(ctx, table);
            }
            levels.push(level);
        }
        let (ln, end) = next("end")?;
        if end != "end" {
            return Err(fmt_err(ln, "expected `end`".into()));
        }
        Ok(Self {
            order,
            smoothing_k,
            vocab,
            levels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProviderError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl DistributionProvider for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn tokenizer_id(&self) -> &str {
        self.vocab.tokenizer_id()
    }

    fn eos_token(&self) -> Option<TokenId> {
        Some(self.vocab.eos())
    }

    fn next_logits(&self, context: &[TokenId]) -> Result<Vec<f64>, ProviderError> {
        self.next_logits_inner(context)
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        Ok(self.vocab.encode(text))
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        self.vocab.decode(tokens)
    }
}

/// Reads a corpus and returns every token it contains under `mode`.
pub fn corpus_tokens(path: &Path, mode: TokenizerMode) -> Result<Vec<String>, ProviderError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().flat_map(|l| mode.split(l)).collect())
}

//! Corpus-level detoxification.
//!
//! For every record: build the rewriting prompt, sample candidates across the
//! temperature grid with the chosen decoding intervention, extract the text
//! between the answer tags, re-rank the candidates, and write one output
//! record. Output order always matches input order, whatever the worker
//! count, and each candidate draws from its own generator seeded from
//! `(run seed, record index, temperature index, sample index)`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::providers::DistributionProvider;
use crate::ranking::{
    fuse_and_select, score_candidate, CandidateDraft, FusionConfig, RankingError, TextEmbedder,
    ToxicityScorer,
};
use crate::socd::{
    decode_with, DecodeError, DecodeRequest, Intervention, SoCDConfig, VanillaCDConfig,
};

pub const RAW_TEXT_PLACEHOLDER: &str = "<raw_text>";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("input error at line {line}: {message}")]
    Input { line: usize, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("record `{id}`: {source}")]
    Decode {
        id: String,
        #[source]
        source: DecodeError,
    },
    #[error("record `{id}`: {source}")]
    Ranking {
        id: String,
        remote: bool,
        #[source]
        source: RankingError,
    },
    #[error("{source} (partial output: {completed} records, manifest at {manifest})")]
    Aborted {
        completed: usize,
        manifest: PathBuf,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// Process exit code: 2 configuration, 3 I/O, 4 remote failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Template(_) => 2,
            PipelineError::Input { .. } | PipelineError::Io { .. } => 3,
            PipelineError::Decode { source, .. } => match source {
                DecodeError::Provider { source, .. } if source.is_remote() => 4,
                DecodeError::Provider {
                    source: crate::providers::ProviderError::Io(_),
                    ..
                } => 3,
                _ => 2,
            },
            PipelineError::Ranking { remote: true, .. } => 4,
            PipelineError::Ranking { .. } => 2,
            PipelineError::Aborted { source, .. } => source.exit_code(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Chat-style rewriting prompt. `user_prefix` holds the raw text placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    pub user_prefix: String,
    pub assistant_prefix: String,
    pub answer_open: String,
    pub answer_close: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system: "You are a helpful assistant. Your task is to transcribe directly or \
                     indirectly harmful content in the text, as well as other content that may \
                     harm the model, into legal and reasonable content that conforms to human \
                     values."
                .into(),
            user_prefix: "You should return the result between <answer> and </answer>. Here is \
                          an example input: this is a terrible fact. Output: <answer>this is a \
                          bad fact.</answer> Here is the text that may contain harmful content: \
                          <raw_text>"
                .into(),
            assistant_prefix: "Here is the transcription result: ".into(),
            answer_open: "<answer>".into(),
            answer_close: "</answer>".into(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), PipelineError> {
        match self.user_prefix.matches(RAW_TEXT_PLACEHOLDER).count() {
            1 => {}
            n => {
                return Err(PipelineError::Template(format!(
                    "user prompt must contain {RAW_TEXT_PLACEHOLDER} exactly once, found {n}"
                )))
            }
        }
        if self.answer_open.is_empty() || self.answer_close.is_empty() {
            return Err(PipelineError::Template("answer tags must be non-empty".into()));
        }
        Ok(())
    }
}

/// System, user and assistant segments separated by blank lines; the
/// assistant segment ends with the opening answer tag.
pub fn build_prompt(template: &PromptTemplate, raw_text: &str) -> Result<String, PipelineError> {
    template.validate()?;
    if raw_text.trim().is_empty() {
        return Err(PipelineError::Template("raw text is empty".into()));
    }
    let user = template.user_prefix.replacen(RAW_TEXT_PLACEHOLDER, raw_text, 1);
    Ok(format!(
        "{}\n\n{}\n\n{}{}",
        template.system, user, template.assistant_prefix, template.answer_open
    ))
}

/// Text between the first opening tag and the next closing tag, trimmed.
///
/// Since the prompt already opens the answer, a generation without an opening
/// tag but with a closing tag yields everything before the closing tag.
pub fn extract_answer_with(generation: &str, open: &str, close: &str) -> Option<String> {
    if let Some(start) = generation.find(open) {
        let rest = &generation[start + open.len()..];
        return rest.find(close).map(|end| rest[..end].trim().to_owned());
    }
    generation
        .find(close)
        .map(|end| generation[..end].trim().to_owned())
}

pub fn extract_answer(generation: &str) -> Option<String> {
    extract_answer_with(generation, "<answer>", "</answer>")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Socd,
    VanillaCd,
    PromptOnly,
}

impl std::str::FromStr for Mode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "socd" => Ok(Mode::Socd),
            "vanilla-cd" => Ok(Mode::VanillaCd),
            "prompt-only" => Ok(Mode::PromptOnly),
            other => Err(PipelineError::Config(format!(
                "unknown mode `{other}` (expected socd, vanilla-cd or prompt-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub socd: SoCDConfig,
    pub vanilla: VanillaCDConfig,
    pub fusion: FusionConfig,
    pub template: PromptTemplate,
    pub seed: u64,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Socd,
            socd: SoCDConfig::default(),
            vanilla: VanillaCDConfig::default(),
            fusion: FusionConfig::default(),
            template: PromptTemplate::default(),
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    /// Fields other than `id` and `text`, passed through to the output.
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    RawGeneration,
    OriginalKept,
}

/// Output row. `text` carries the detoxified text so the file is a drop-in corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetoxRecord {
    pub id: String,
    pub text: String,
    pub original: String,
    pub detoxified: String,
    pub fusion_score: f64,
    pub toxicity: f64,
    pub similarity: f64,
    /// `None` when the original text was kept.
    pub temperature: Option<f64>,
    pub candidate_count: usize,
    pub fallback: Fallback,
    pub original_toxicity: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

const RESERVED_FIELDS: [&str; 11] = [
    "id",
    "text",
    "original",
    "detoxified",
    "fusion_score",
    "toxicity",
    "similarity",
    "temperature",
    "candidate_count",
    "fallback",
    "original_toxicity",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: usize,
    pub fallback_none: usize,
    pub fallback_raw_generation: usize,
    pub fallback_original_kept: usize,
    pub candidates_scored: usize,
    pub candidates_excluded: usize,
    pub candidates_empty: usize,
    pub mean_toxicity_before: f64,
    pub mean_toxicity_after: f64,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn from_records(records: &[DetoxRecord]) -> Self {
        let mut report = RunReport {
            records: records.len(),
            ..Default::default()
        };
        for r in records {
            match r.fallback {
                Fallback::None => report.fallback_none += 1,
                Fallback::RawGeneration => report.fallback_raw_generation += 1,
                Fallback::OriginalKept => report.fallback_original_kept += 1,
            }
            report.mean_toxicity_before += r.original_toxicity;
            report.mean_toxicity_after += r.toxicity;
        }
        if !records.is_empty() {
            report.mean_toxicity_before /= records.len() as f64;
            report.mean_toxicity_after /= records.len() as f64;
        }
        report
    }
}

/// Written next to the output when a run aborts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortManifest {
    pub output: PathBuf,
    pub completed_records: usize,
    pub failed_index: usize,
    pub failed_id: Option<String>,
    pub error: String,
}

/// The models and scorers a run uses.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub base: &'a dyn DistributionProvider,
    pub toxic: Option<&'a dyn DistributionProvider>,
    pub scorer: &'a dyn ToxicityScorer,
    pub embedder: &'a dyn TextEmbedder,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for one candidate draw.
pub fn derive_seed(run_seed: u64, record: u64, temperature: u64, sample: u64) -> u64 {
    [record, temperature, sample]
        .into_iter()
        .fold(splitmix64(run_seed), |acc, part| splitmix64(acc ^ splitmix64(part)))
}

fn check_config(cfg: &PipelineConfig, res: &Resources<'_>) -> Result<(), PipelineError> {
    cfg.template.validate()?;
    cfg.fusion
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    if cfg.workers == 0 {
        return Err(PipelineError::Config("workers must be at least 1".into()));
    }
    let vocab = res.base.vocab_size();
    match (cfg.mode, res.toxic) {
        (Mode::PromptOnly, _) => {}
        (_, None) => {
            return Err(PipelineError::Config(format!(
                "mode {:?} needs a toxic model",
                cfg.mode
            )))
        }
        (_, Some(t)) => {
            if t.vocab_size() != vocab || t.tokenizer_id() != res.base.tokenizer_id() {
                return Err(PipelineError::Config(format!(
                    "base ({vocab}, {}) and toxic ({}, {}) models do not share a vocabulary",
                    res.base.tokenizer_id(),
                    t.vocab_size(),
                    t.tokenizer_id()
                )));
            }
        }
    }
    if cfg.mode == Mode::Socd {
        cfg.socd
            .validate(vocab)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    if cfg.socd.max_new_tokens == 0 {
        return Err(PipelineError::Config("max_new_tokens must be at least 1".into()));
    }
    Ok(())
}

/// Candidate counters for one record.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CandidateStats {
    pub scored: usize,
    pub excluded: usize,
    pub empty: usize,
}

/// Runs the full per-record procedure.
pub fn detoxify_record(
    index: usize,
    record: &CorpusRecord,
    res: &Resources<'_>,
    cfg: &PipelineConfig,
) -> Result<(DetoxRecord, CandidateStats), PipelineError> {
    let decode_err = |source| PipelineError::Decode {
        id: record.id.clone(),
        source,
    };
    let provider_err = |source| decode_err(DecodeError::Provider { step: 0, source });
    let ranking_err = |source: RankingError| PipelineError::Ranking {
        id: record.id.clone(),
        remote: res.scorer.name() == "bridge" || res.embedder.name() == "bridge",
        source,
    };

    let prompt = build_prompt(&cfg.template, &record.text)?;
    let prompt_tokens = res.base.encode(&prompt).map_err(provider_err)?;
    let eos = res.base.eos_token();
    let intervention = match cfg.mode {
        Mode::PromptOnly => Intervention::BaseOnly,
        Mode::Socd => Intervention::Socd(cfg.socd.clone()),
        Mode::VanillaCd => Intervention::VanillaCd(cfg.vanilla),
    };

    let mut stats = CandidateStats::default();
    let mut drafts = Vec::new();
    for (ti, &temperature) in cfg.fusion.temperatures.iter().enumerate() {
        for si in 0..cfg.fusion.samples_per_temperature {
            let req = DecodeRequest {
                prompt: &prompt_tokens,
                temperature,
                temperature_mode: cfg.socd.temperature_mode,
                max_new_tokens: cfg.socd.max_new_tokens,
                eos_token: eos,
                seed: derive_seed(cfg.seed, index as u64, ti as u64, si as u64),
            };
            let tokens =
                decode_with(res.base, res.toxic, &intervention, &req).map_err(decode_err)?;
            let generation = res.base.decode(&tokens).map_err(provider_err)?;
            let (text, from_raw_generation) = match extract_answer_with(
                &generation,
                &cfg.template.answer_open,
                &cfg.template.answer_close,
            ) {
                Some(answer) => (answer, false),
                None => (generation.trim().to_owned(), true),
            };
            if text.is_empty() {
                stats.empty += 1;
                continue;
            }
            drafts.push(CandidateDraft {
                text,
                temperature,
                from_raw_generation,
            });
        }
    }

    let original_toxicity = res.scorer.score(&record.text).map_err(ranking_err)?;
    let out = if drafts.is_empty() {
        log::warn!(
            "record `{}`: every candidate was empty, keeping the original text",
            record.id
        );
        let original_embedding = res.embedder.embed(&record.text).map_err(ranking_err)?;
        let kept = CandidateDraft {
            text: record.text.clone(),
            temperature: 1.0,
            from_raw_generation: false,
        };
        let c = score_candidate(
            &kept,
            &original_embedding,
            res.scorer,
            res.embedder,
            cfg.fusion.lambda,
        )
        .map_err(ranking_err)?;
        DetoxRecord {
            id: record.id.clone(),
            text: c.text.clone(),
            original: record.text.clone(),
            detoxified: c.text,
            fusion_score: c.fusion_score,
            toxicity: c.toxicity,
            similarity: c.similarity,
            temperature: None,
            candidate_count: 0,
            fallback: Fallback::OriginalKept,
            original_toxicity,
            extra: record.extra.clone(),
        }
    } else {
        let selection = fuse_and_select(&record.text, &drafts, res.scorer, res.embedder, &cfg.fusion)
            .map_err(ranking_err)?;
        stats.scored = selection.all_scored.len();
        stats.excluded = selection.excluded.len();
        let best = selection.best;
        DetoxRecord {
            id: record.id.clone(),
            text: best.text.clone(),
            original: record.text.clone(),
            detoxified: best.text,
            fusion_score: best.fusion_score,
            toxicity: best.toxicity,
            similarity: best.similarity,
            temperature: Some(best.temperature),
            candidate_count: stats.scored,
            fallback: if best.from_raw_generation {
                Fallback::RawGeneration
            } else {
                Fallback::None
            },
            original_toxicity,
            extra: record.extra.clone(),
        }
    };
    Ok((out, stats))
}

/// Outcome of processing a batch of records.
#[derive(Debug)]
pub struct BatchOutcome {
    /// Successfully processed records, in input order, up to the first failure.
    pub records: Vec<DetoxRecord>,
    pub stats: CandidateStats,
    /// First failure in input order, with its record index.
    pub failure: Option<(usize, PipelineError)>,
}

/// Processes records on `cfg.workers` threads; results come back in input order.
pub fn detoxify_records(
    records: &[CorpusRecord],
    res: &Resources<'_>,
    cfg: &PipelineConfig,
) -> Result<BatchOutcome, PipelineError> {
    check_config(cfg, res)?;
    let slots: Vec<Mutex<Option<Result<(DetoxRecord, CandidateStats), PipelineError>>>> =
        records.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let workers = cfg.workers.min(records.len()).max(1);

    let work = || loop {
        if failed.load(Ordering::Relaxed) {
            break;
        }
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= records.len() {
            break;
        }
        let result = detoxify_record(i, &records[i], res, cfg);
        if result.is_err() {
            failed.store(true, Ordering::Relaxed);
        }
        *slots[i].lock().expect("slot lock") = Some(result);
    };
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(work);
            }
        });
    }

    let mut outcome = BatchOutcome {
        records: Vec::with_capacity(records.len()),
        stats: CandidateStats::default(),
        failure: None,
    };
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.into_inner().expect("slot lock") {
            Some(Ok((rec, stats))) => {
                outcome.records.push(rec);
                outcome.stats.scored += stats.scored;
                outcome.stats.excluded += stats.excluded;
                outcome.stats.empty += stats.empty;
            }
            Some(Err(e)) => {
                outcome.failure = Some((i, e));
                break;
            }
            // Skipped after an earlier failure.
            None => break,
        }
    }
    Ok(outcome)
}

/// Reads a JSONL corpus. Each non-blank line needs a string or integer `id`
/// and a non-empty string `text`; other fields are kept.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_corpus(BufReader::new(file)).map_err(|e| match e {
        PipelineError::Io { source, .. } => PipelineError::Io {
            path: path.to_owned(),
            source,
        },
        other => other,
    })
}

pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<CorpusRecord>, PipelineError> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| PipelineError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| PipelineError::Input {
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let Value::Object(mut obj) = value else {
            return Err(bad("expected a JSON object".into()));
        };
        let id = match obj.remove("id") {
            Some(Value::String(s)) => s,
            Some(Value::Number(n)) if n.is_u64() || n.is_i64() => n.to_string(),
            Some(_) => return Err(bad("`id` must be a string or integer".into())),
            None => return Err(bad("missing `id`".into())),
        };
        let text = match obj.remove("text") {
            Some(Value::String(s)) if !s.trim().is_empty() => s,
            Some(Value::String(_)) => return Err(bad(format!("record `{id}` has empty text"))),
            Some(_) => return Err(bad("`text` must be a string".into())),
            None => return Err(bad("missing `text`".into())),
        };
        if !ids.insert(id.clone()) {
            return Err(bad(format!("duplicate id `{id}`")));
        }
        for key in RESERVED_FIELDS {
            obj.remove(key);
        }
        records.push(CorpusRecord {
            id,
            text,
            extra: obj,
        });
    }
    Ok(records)
}

pub fn write_records<W: Write>(mut out: W, records: &[DetoxRecord]) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Reads `input`, detoxifies every record and writes JSONL to `output`.
///
/// On a hard failure the records completed before the failing one are still
/// written, a manifest describing the failure is written next to the output,
/// and [`PipelineError::Aborted`] is returned.
pub fn detoxify_corpus(
    input: &Path,
    output: &Path,
    res: &Resources<'_>,
    cfg: &PipelineConfig,
) -> Result<RunReport, PipelineError> {
    let started = Instant::now();
    check_config(cfg, res)?;
    let records = read_corpus(input)?;
    let outcome = detoxify_records(&records, res, cfg)?;

    let file = File::create(output).map_err(io_err(output))?;
    write_records(BufWriter::new(file), &outcome.records).map_err(io_err(output))?;

    if let Some((failed_index, error)) = outcome.failure {
        let manifest = manifest_path(output);
        let body = AbortManifest {
            output: output.to_owned(),
            completed_records: outcome.records.len(),
            failed_index,
            failed_id: records.get(failed_index).map(|r| r.id.clone()),
            error: error.to_string(),
        };
        let json = serde_json::to_string_pretty(&body).expect("manifest serialises");
        std::fs::write(&manifest, json).map_err(io_err(&manifest))?;
        return Err(PipelineError::Aborted {
            completed: outcome.records.len(),
            manifest,
            source: Box::new(error),
        });
    }

    let mut report = RunReport::from_records(&outcome.records);
    report.candidates_scored = outcome.stats.scored;
    report.candidates_excluded = outcome.stats.excluded;
    report.candidates_empty = outcome.stats.empty;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

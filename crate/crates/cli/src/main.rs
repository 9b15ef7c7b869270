mod settings;
mod specs;

use std::fmt::Display;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use detox_core::bridge::ModelRole;
use detox_core::metrics::{evaluate, read_eval_rows, DistScope, EvalOptions, MetricsError};
use detox_core::pipeline::{detoxify_corpus, Mode, Resources};
use detox_core::providers::{corpus_tokens, NgramModel, TokenizerMode, Vocabulary};

use settings::RunSettings;
use specs::{load_lexicon, provider_failure, Bridges};

#[derive(Parser)]
#[command(name = "detox", version, args_override_self = true)]
#[command(about = "Rewrite toxic text corpora with soft contrastive decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detoxify a JSONL corpus.
    Run {
        /// TOML file with default settings; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        settings: RunSettings,
    },
    /// Train an n-gram model on a text file, one sentence per line.
    TrainNgram {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        smoothing_k: f64,
        /// whitespace or char.
        #[arg(long, default_value = "whitespace")]
        tokenizer: String,
        /// Extra corpora whose tokens join the vocabulary. Models meant to be
        /// paired must be trained with the same vocabulary corpora.
        #[arg(long)]
        vocab_corpus: Vec<PathBuf>,
    },
    /// Score generations and write an evaluation report.
    Eval {
        /// JSONL of pipeline output or `{"generations": [...]}` rows.
        #[arg(long)]
        generations: PathBuf,
        /// lexicon:PATH or bridge:HOST:PORT.
        #[arg(long)]
        scores: String,
        /// Report path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Lexicon for stem frequency. Defaults to the scoring lexicon.
        #[arg(long)]
        stems: Option<PathBuf>,
        /// Pool Dist-n over the whole file instead of averaging per prompt.
        #[arg(long)]
        global: bool,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Require exactly this many generations per prompt.
        #[arg(long)]
        generations_per_prompt: Option<usize>,
    },
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, e: impl Display) -> Self {
        Failure {
            code,
            message: e.to_string(),
        }
    }

    pub fn config(e: impl Display) -> Self {
        Self::new(2, e)
    }

    pub fn io(e: impl Display) -> Self {
        Self::new(3, e)
    }

    pub fn remote(e: impl Display) -> Self {
        Self::new(4, e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, settings } => run(config, settings),
        Command::TrainNgram {
            corpus,
            order,
            out,
            smoothing_k,
            tokenizer,
            vocab_corpus,
        } => train_ngram(&corpus, order, &out, smoothing_k, &tokenizer, &vocab_corpus),
        Command::Eval {
            generations,
            scores,
            report,
            stems,
            global,
            threshold,
            generations_per_prompt,
        } => {
            let opts = EvalArgs {
                scores,
                stems,
                scope: if global { DistScope::Global } else { DistScope::PerPrompt },
                threshold,
                generations_per_prompt,
            };
            eval(&generations, report.as_deref(), &opts)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(config: Option<PathBuf>, flags: RunSettings) -> Result<(), Failure> {
    let settings = match config {
        Some(path) => flags.over(RunSettings::from_file(&path)?),
        None => flags,
    };
    let cfg = settings.pipeline_config()?;
    let required = |v: &Option<_>, name: &str| -> Result<String, Failure> {
        v.clone().ok_or_else(|| Failure::config(format!("missing setting `{name}`")))
    };
    let input = settings.input.clone().ok_or_else(|| Failure::config("missing setting `input`"))?;
    let output = settings.output.clone().ok_or_else(|| Failure::config("missing setting `output`"))?;
    let base_spec = required(&settings.base_model, "base-model")?;
    let scorer_spec = required(&settings.scorer, "scorer")?;
    let embedder_spec = settings.embedder.clone().unwrap_or_else(|| "bow:256".into());

    let mut bridges = Bridges::default();
    let base = bridges.provider(&base_spec, ModelRole::Base)?;
    let toxic = match (&settings.toxic_model, cfg.mode) {
        (Some(spec), _) => Some(bridges.provider(spec, ModelRole::Toxic)?),
        (None, Mode::PromptOnly) => None,
        (None, _) => return Err(Failure::config("missing setting `toxic-model`")),
    };
    let scorer = bridges.scorer(&scorer_spec)?;
    let embedder = bridges.embedder(&embedder_spec)?;
    let res = Resources {
        base: base.as_ref(),
        toxic: toxic.as_deref(),
        scorer: scorer.as_ref(),
        embedder: embedder.as_ref(),
    };

    log::info!(
        "detoxifying {} -> {} ({:?}, {} workers)",
        input.display(),
        output.display(),
        cfg.mode,
        cfg.workers
    );
    let report = detoxify_corpus(&input, &output, &res, &cfg)
        .map_err(|e| Failure::new(e.exit_code() as u8, e))?;
    log::info!(
        "{} records in {:.1}s, mean toxicity {:.4} -> {:.4}",
        report.records,
        report.wall_time_secs,
        report.mean_toxicity_before,
        report.mean_toxicity_after
    );
    let json = serde_json::to_string_pretty(&report).map_err(Failure::io)?;
    writeln!(std::io::stdout(), "{json}").map_err(Failure::io)
}

fn train_ngram(
    corpus: &std::path::Path,
    order: usize,
    out: &std::path::Path,
    smoothing_k: f64,
    tokenizer: &str,
    vocab_corpora: &[PathBuf],
) -> Result<(), Failure> {
    let mode: TokenizerMode = tokenizer.parse().map_err(Failure::config)?;
    let vocab = if vocab_corpora.is_empty() {
        None
    } else {
        let mut tokens = corpus_tokens(corpus, mode).map_err(provider_failure)?;
        for path in vocab_corpora {
            tokens.extend(corpus_tokens(path, mode).map_err(provider_failure)?);
        }
        Some(Vocabulary::from_tokens(mode, tokens))
    };
    let model = NgramModel::train_file(corpus, order, smoothing_k, mode, vocab)
        .map_err(provider_failure)?;
    model.save(out).map_err(provider_failure)?;
    log::info!(
        "wrote order-{order} model with {} tokens to {}",
        model.vocabulary().len(),
        out.display()
    );
    Ok(())
}

struct EvalArgs {
    scores: String,
    stems: Option<PathBuf>,
    scope: DistScope,
    threshold: f64,
    generations_per_prompt: Option<usize>,
}

fn eval(generations: &std::path::Path, report: Option<&std::path::Path>, args: &EvalArgs) -> Result<(), Failure> {
    let remote = args.scores.starts_with("bridge:");
    let metrics_failure = |e: MetricsError| match e {
        MetricsError::Io(_) | MetricsError::Input { .. } => Failure::io(e),
        MetricsError::Scoring(_) if remote => Failure::remote(e),
        e => Failure::config(e),
    };
    let rows = read_eval_rows(generations).map_err(metrics_failure)?;
    let mut bridges = Bridges::default();
    let scorer = bridges.scorer(&args.scores)?;
    let stems = match (&args.stems, args.scores.strip_prefix("lexicon:")) {
        (Some(path), _) => Some(load_lexicon(&path.to_string_lossy())?),
        (None, Some(path)) => Some(load_lexicon(path)?),
        (None, None) => None,
    };
    let opts = EvalOptions {
        threshold: args.threshold,
        generations_per_prompt: args.generations_per_prompt,
        dist_scope: args.scope,
        stems: stems.as_ref(),
        ..Default::default()
    };
    let result = evaluate(&rows, scorer.as_ref(), &opts).map_err(metrics_failure)?;
    for hit in &result.template_hits {
        log::warn!("row `{}` looks like a template answer: {:?}", hit.id, hit.keyword);
    }
    let json = serde_json::to_string_pretty(&result).map_err(Failure::io)?;
    match report {
        Some(path) => std::fs::write(path, json + "\n")
            .map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display()))),
        None => writeln!(std::io::stdout(), "{json}").map_err(Failure::io),
    }
}

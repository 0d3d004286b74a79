//! `chatguard` command-line tool.

use std::error::Error;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use chatguard::encoder::{load_params, save_params};
use chatguard::evalharness::{
    evaluate, export_embeddings, load_dataset, parse_thresholds, regex_baseline, render_table,
    threshold_sweep, write_csv, write_dataset, MetricsReport,
};
use chatguard::fixtures::{
    generate_chats, generate_corpus, variant_space, ChatSpec, CorpusSpec, ProfaneStyle,
};
use chatguard::normalizer::{Normalizer, RawChat};
use chatguard::pipeline::{
    serve_lines, serve_tcp, Detector, Engine, Model, OutboundRecord, PipelineConfig, Service,
    CONFIG_ENV,
};
use chatguard::tokenizer::{load_vocabulary, VocabKind};
use chatguard::trainer::{fit_with_progress, TrainPlan};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Debug, Parser)]
#[command(name = "chatguard", version, about = "Chat profanity detection")]
struct Cli {
    /// Service configuration file (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Similarity threshold for latent matches, overriding the configuration.
    #[arg(long, global = true)]
    threshold: Option<f32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Style {
    Direct,
    Starred,
    Edited,
    Spaced,
}

impl From<Style> for ProfaneStyle {
    fn from(s: Style) -> Self {
        match s {
            Style::Direct => ProfaneStyle::Direct,
            Style::Starred => ProfaneStyle::Starred,
            Style::Edited => ProfaneStyle::Edited,
            Style::Spaced => ProfaneStyle::Spaced,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder on one or more token files.
    Train {
        /// Token files, one token per line.
        #[arg(long, required = true, num_args = 1..)]
        tokens: Vec<PathBuf>,
        /// Where to write the weights.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history CSV; defaults to the weights path with a `.csv` extension.
        #[arg(long)]
        history: Option<PathBuf>,
        /// TOML file with `[encoder]` and `[train]` tables.
        #[arg(long, conflicts_with = "desk")]
        plan: Option<PathBuf>,
        /// Use the small preset suited to a single CPU core.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify chats read one per line from standard input.
    Detect,
    /// Run the line-delimited JSON service on stdin/stdout or a TCP socket.
    Serve {
        #[arg(long)]
        workers: Option<usize>,
        /// `host:port` to listen on instead of stdin/stdout.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Score the detector on a labeled CSV file (columns `text,label`).
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Exact dictionary matching only.
        #[arg(long, conflicts_with = "sweep")]
        baseline: bool,
        /// Comma-separated ascending thresholds, e.g. "0.5,0.6,0.7".
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Rebuild the profane-key index from the configured weights.
    IndexBuild,
    /// Add profane keys to the vocabulary file and the index.
    VocabAdd {
        #[arg(required = true)]
        keys: Vec<String>,
    },
    /// Write token embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        tokens: PathBuf,
        /// Defaults to the configured weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus, variants, labeled chats and a config.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 450)]
        n_safe: usize,
        #[arg(long, default_value_t = 50)]
        n_profane: usize,
        #[arg(long, default_value_t = 1000)]
        chats: usize,
        #[arg(long, value_enum, default_value_t = Style::Edited)]
        style: Style,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::discover(cli.config.as_deref())?;
    let threshold = cli.threshold;
    match cli.command {
        Command::Train {
            tokens,
            out,
            history,
            plan,
            desk,
            epochs,
            seed,
        } => train(&cfg, &tokens, &out, history, plan, desk, epochs, seed),
        Command::Detect => detect(&engine(&cfg, threshold)?),
        Command::Serve { workers, listen } => {
            let engine = engine(&cfg, threshold)?;
            let workers = workers.unwrap_or(cfg.queue.workers);
            let service = Arc::new(Service::new(
                Arc::new(Detector::new(engine)),
                workers,
                cfg.queue.dedup_capacity,
            ));
            match listen.or(cfg.queue.listen.clone()) {
                Some(addr) => serve_tcp(service, TcpListener::bind(&addr)?, cfg.queue.capacity)?,
                None => serve_lines(
                    &service,
                    BufReader::new(std::io::stdin()),
                    std::io::stdout(),
                    cfg.queue.capacity,
                )?,
            }
            Ok(())
        }
        Command::Eval {
            data,
            baseline,
            sweep,
            format,
        } => eval(&cfg, threshold, &data, baseline, sweep.as_deref(), format),
        Command::IndexBuild => index_build(&cfg),
        Command::VocabAdd { keys } => vocab_add(&cfg, &keys),
        Command::ExportEmbeddings {
            tokens,
            weights,
            out,
        } => export(&cfg, &tokens, weights, out),
        Command::Fixtures {
            out,
            seed,
            n_safe,
            n_profane,
            chats,
            style,
        } => fixtures(&out, seed, n_safe, n_profane, chats, style.into()),
    }
}

fn engine(cfg: &PipelineConfig, threshold: Option<f32>) -> Result<Engine> {
    let engine = Engine::from_config(cfg)?;
    Ok(match threshold {
        Some(t) => engine.with_threshold(t)?,
        None => engine,
    })
}

#[allow(clippy::too_many_arguments)]
fn train(
    cfg: &PipelineConfig,
    token_files: &[PathBuf],
    out: &Path,
    history: Option<PathBuf>,
    plan: Option<PathBuf>,
    desk: bool,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut plan = match plan {
        Some(p) => TrainPlan::parse(&fs::read_to_string(&p)?)?,
        None if desk => TrainPlan::desk(),
        None => TrainPlan::default(),
    };
    if let Some(e) = epochs {
        plan.train.epochs = e;
    }
    if let Some(s) = seed {
        plan.train.seed = s;
    }
    let normalizer = Normalizer::new(cfg.normalization.without_names());
    let mut tokens = Vec::new();
    for path in token_files {
        let vocab = load_vocabulary(path, VocabKind::SafePlatform, &normalizer)?;
        tokens.extend(vocab.iter().map(str::to_owned));
    }
    info!("training on {} tokens for {} epochs", tokens.len(), plan.train.epochs);
    let outcome = fit_with_progress(&tokens, &plan.encoder, &plan.train, |r| {
        info!(
            "epoch {}: train {:.4} valid {:.4} lr {:.2e}",
            r.epoch, r.train_loss, r.val_loss, r.lr
        );
    })?;
    save_params(&outcome.params, out)?;
    let history = history.unwrap_or_else(|| out.with_extension("csv"));
    fs::write(&history, outcome.history.to_csv())?;
    eprintln!(
        "best epoch {} (validation loss {:.4}); weights in {}, history in {}",
        outcome.history.best_epoch,
        outcome.history.best_val_loss,
        out.display(),
        history.display()
    );
    Ok(())
}

fn detect(engine: &Engine) -> Result<()> {
    let stdin = std::io::stdin();
    let mut out = BufWriter::new(std::io::stdout().lock());
    let meta = || serde_json::Value::Object(Default::default());
    for (i, line) in stdin.lock().lines().enumerate() {
        let chat = RawChat::new((i + 1).to_string(), line?);
        let record = match engine.detect(&chat) {
            Ok(v) => OutboundRecord::from_verdict(&v, meta()),
            Err(e) => OutboundRecord::service_error(chat.id, "detect", e.to_string(), meta()),
        };
        writeln!(out, "{}", record.to_line())?;
    }
    out.flush()?;
    Ok(())
}

fn eval(
    cfg: &PipelineConfig,
    threshold: Option<f32>,
    data: &Path,
    baseline: bool,
    sweep: Option<&str>,
    format: Format,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let engine = engine(cfg, threshold)?;
    let reports: Vec<MetricsReport> = if baseline {
        vec![regex_baseline(&dataset, engine.normalizer(), engine.lexicon().profane())?]
    } else if let Some(list) = sweep {
        threshold_sweep(&dataset, &engine, &parse_thresholds(list)?)?
    } else {
        vec![evaluate(&dataset, &engine, engine.threshold())?]
    };
    let stdout = std::io::stdout();
    match format {
        Format::Table => print!("{}", render_table(&reports)),
        Format::Csv => write_csv(&reports, stdout.lock())?,
    }
    Ok(())
}

fn index_build(cfg: &PipelineConfig) -> Result<()> {
    let weights = cfg
        .model
        .weights
        .as_deref()
        .ok_or("no weights configured; set [model] weights")?;
    cfg.validate()?;
    let engine = Engine::from_config(&PipelineConfig {
        model: Default::default(),
        ..cfg.clone()
    })?;
    let params = Arc::new(load_params(weights)?);
    let model = Model::build(params, engine.lexicon().profane().iter(), cfg.model.hnsw.clone())?;
    let path = cfg.model.index_path();
    model.index.save(&path, model.fingerprint)?;
    eprintln!("indexed {} keys into {}", model.index.len(), path.display());
    Ok(())
}

fn vocab_add(cfg: &PipelineConfig, keys: &[String]) -> Result<()> {
    let profane_path = cfg
        .vocab
        .profane
        .as_deref()
        .ok_or("no profane vocabulary configured; set [vocab] profane")?;
    let mut engine = Engine::from_config(cfg)?;
    let mut added = Vec::new();
    for raw in keys {
        let key = engine.normalizer().normalize(raw);
        if engine.lexicon().profane().contains(&key) {
            eprintln!("{key} is already a profane key");
            continue;
        }
        engine = engine.with_profane_key(raw)?;
        added.push(key);
    }
    if added.is_empty() {
        return Ok(());
    }
    let mut text = fs::read_to_string(profane_path)?;
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    for key in &added {
        text.push_str(key);
        text.push('\n');
    }
    fs::write(profane_path, text)?;
    if let Some(model) = engine.model() {
        model.index.save(&cfg.model.index_path(), model.fingerprint)?;
    }
    for key in &added {
        println!("added {key}");
    }
    Ok(())
}

fn export(cfg: &PipelineConfig, tokens: &Path, weights: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let weights = weights
        .or_else(|| cfg.model.weights.clone())
        .ok_or("no weights given; pass --weights or configure [model] weights")?;
    let params = load_params(&weights)?;
    let normalizer = Normalizer::new(cfg.normalization.without_names());
    let mut list = Vec::new();
    for line in fs::read_to_string(tokens)?.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let token = normalizer.normalize(line);
        if token.is_empty() || token.contains(' ') {
            return Err(format!("{line:?} is not a single token after normalization").into());
        }
        list.push(token);
    }
    match out {
        Some(p) => export_embeddings(&list, &params, BufWriter::new(fs::File::create(p)?))?,
        None => export_embeddings(&list, &params, std::io::stdout().lock())?,
    }
    Ok(())
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = impl AsRef<str>>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(w, "{}", l.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

fn fixtures(
    out: &Path,
    seed: u64,
    n_safe: usize,
    n_profane: usize,
    chats: usize,
    style: ProfaneStyle,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let corpus = generate_corpus(&CorpusSpec {
        n_safe,
        n_profane,
        seed,
        ..CorpusSpec::default()
    })?;
    write_lines(&out.join("safe.txt"), &corpus.safe)?;
    write_lines(&out.join("profane.txt"), &corpus.profane)?;
    let mut variants = Vec::new();
    for key in &corpus.profane {
        variants.extend(variant_space(key, 1)?);
    }
    write_lines(&out.join("variants.txt"), &variants)?;
    let labeled = generate_chats(
        &corpus,
        &ChatSpec {
            n: chats,
            style,
            seed,
            ..ChatSpec::default()
        },
    )?;
    write_dataset(&labeled, BufWriter::new(fs::File::create(out.join("chats.csv"))?))?;
    let config = PipelineConfig {
        vocab: chatguard::pipeline::VocabSection {
            safe_platform: Some("safe.txt".into()),
            profane: Some("profane.txt".into()),
            ..Default::default()
        },
        ..PipelineConfig::default()
    };
    fs::write(out.join("chatguard.toml"), config.to_toml())?;
    eprintln!(
        "wrote {} safe tokens, {} profane keys, {} variants and {} chats to {}",
        corpus.safe.len(),
        corpus.profane.len(),
        variants.len(),
        labeled.len(),
        out.display()
    );
    Ok(())
}

//! Command-line entry points and run orchestration.
//!
//! Exit-code contract: 0 success, 1 runtime failure, 2 invalid
//! input/config.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::chunker::{
    chunk_document, select_chunks, token_budget, write_shards, ChunkMeta, ChunkedEntry,
    HashTokenizer, SelectionMode, Tokenizer, DEFAULT_SAMPLE_K, DEFAULT_SHARD_SIZE, DEFAULT_WINDOW,
};
use crate::corpus_ingest::{
    build_vocabulary, concatenate_fields, load_csv, load_csv_with_stats, write_csv,
    LabelVocabulary, BOOLEAN_LABEL_NAMES,
};
use crate::error::{Error, Result};
use crate::eval_metrics::{
    error_analysis, evaluate, render_error_report, write_confusion_csv, write_confusion_heatmap,
    BoolF1Variant, ScoredCorpus,
};
use crate::inference_aggregate::{predict_corpus, read_evidence_jsonl};
use crate::model_core::NUM_BOOLEAN_LABELS;
use crate::synth::{generate_synthetic_corpus, SynthSpec};
use crate::trainer::{train, Checkpoint, TrainConfig};

/// Telescope-reference classification pipeline.
#[derive(Debug, Parser)]
#[command(name = "tracs", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk a bibliographic CSV into JSON shards with label propagation.
    Preprocess(PreprocessArgs),
    /// Fine-tune the encoder and heads over preprocessed shards.
    Train(TrainArgs),
    /// Predict document labels for a CSV with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a predictions CSV against a labeled CSV.
    Evaluate(EvaluateArgs),
    /// Render confusion-matrix and example-table error analysis.
    Report(ReportArgs),
    /// Generate a synthetic keyword-correlated corpus CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Input bibliographic CSV (13 columns).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for shards and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Stored window length, including the two special tokens.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Entries per shard file.
    #[arg(long, default_value_t = DEFAULT_SHARD_SIZE)]
    pub shard_size: usize,
    /// Chunk selection: first window only, or k random chunks.
    #[arg(long, default_value = "first")]
    pub mode: SelectionMode,
    /// Chunks per entry in sample mode.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_K)]
    pub k: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Hashing-tokenizer vocabulary size.
    #[arg(long, default_value_t = 4096)]
    pub tokenizer_vocab: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of preprocessed shards.
    #[arg(long)]
    pub shards: PathBuf,
    /// JSON training config (TrainConfig fields; missing fields take the
    /// built-in defaults: adamw, lr 2e-5, linear, batch 8, 4 epochs).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint directory written by `tracs train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input CSV (labels may be absent).
    #[arg(long)]
    pub input: PathBuf,
    /// Output predictions CSV (submission shape).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional line-delimited JSON evidence sidecar.
    #[arg(long)]
    pub evidence: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Per-chunk boolean yes-vote threshold.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions CSV.
    #[arg(long)]
    pub pred: PathBuf,
    /// Labeled gold CSV.
    #[arg(long)]
    pub gold: PathBuf,
    /// Output metrics JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Boolean F1 definition: positive or macro-binary.
    #[arg(long, default_value = "positive")]
    pub bool_f1: BoolF1Variant,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Evidence sidecar from `tracs predict`; omit for a degraded report
    /// without tie-break information.
    #[arg(long)]
    pub evidence: Option<PathBuf>,
    /// Output directory for report.md, metrics.json, confusion.csv/png.
    #[arg(long)]
    pub out: PathBuf,
    /// Example rows per table section.
    #[arg(long, default_value_t = 8)]
    pub max_examples: usize,
    #[arg(long, default_value = "positive")]
    pub bool_f1: BoolF1Variant,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator spec; omit for the built-in defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

impl clap::builder::ValueParserFactory for SelectionMode {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<SelectionMode>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for BoolF1Variant {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<BoolF1Variant>().map_err(|e| e.to_string()))
    }
}

/// Preprocess manifest (no timestamps, so reruns are byte-identical).
#[derive(Debug, Serialize, Deserialize)]
pub struct PreprocessManifest {
    pub records: usize,
    pub selected_chunks: u64,
    pub total_chunks: u64,
    pub shards: usize,
    pub stored_tokens: u64,
    pub content_tokens: u64,
    pub window: usize,
    pub shard_size: usize,
    pub mode: SelectionMode,
    pub k: usize,
    pub seed: u64,
    pub tokenizer: String,
    pub labeled: bool,
}

fn write_json_pretty<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Wire corpus ingestion into the chunker and write shards + manifest.
pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<PreprocessManifest> {
    let (records, stats) = load_csv_with_stats(&args.input)?;
    if stats.empty_text_cells + stats.nan_literal_cells > 0 {
        eprintln!(
            "preprocess: normalized {} empty and {} NaN-literal cells to \"\"",
            stats.empty_text_cells, stats.nan_literal_cells
        );
    }
    let tokenizer = HashTokenizer::new(args.tokenizer_vocab)?;
    let labeled = records.iter().all(|r| r.telescope.is_some());

    let mut entries = Vec::with_capacity(records.len());
    let mut total_chunks = 0u64;
    for record in &records {
        let meta = ChunkMeta {
            bibcode: record.bibcode.clone(),
            telescope: record.telescope.clone(),
            labels: record.booleans,
        };
        let text = concatenate_fields(record);
        let chunks = chunk_document(&text, &tokenizer, args.window, &meta)?;
        total_chunks += chunks.len() as u64;
        let selected = select_chunks(&chunks, args.mode, args.k, args.seed)?;
        entries.push(ChunkedEntry::new(selected)?);
    }

    let shard_paths = write_shards(&entries, &args.out, args.shard_size)?;
    if labeled && !records.is_empty() {
        build_vocabulary(&records)?.save(&args.out.join("vocabulary.json"))?;
    }
    let budget = token_budget(&entries);
    let manifest = PreprocessManifest {
        records: records.len(),
        selected_chunks: budget.selected_chunks,
        total_chunks,
        shards: shard_paths.len(),
        stored_tokens: budget.stored_tokens,
        content_tokens: budget.content_tokens,
        window: args.window,
        shard_size: args.shard_size,
        mode: args.mode,
        k: args.k,
        seed: args.seed,
        tokenizer: tokenizer.identifier(),
        labeled,
    };
    write_json_pretty(&manifest, &args.out.join("manifest.json"))?;
    Ok(manifest)
}

fn load_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Train over a shard directory, writing checkpoints, the training log,
/// and the resolved config into the run directory.
pub fn cmd_train(args: &TrainArgs) -> Result<Checkpoint> {
    let mut config = load_train_config(args)?;

    let shard_paths = crate::chunker::list_shards(&args.shards)?;
    if shard_paths.is_empty() {
        return Err(Error::Config(format!(
            "{}: no shard files found",
            args.shards.display()
        )));
    }
    let entries = crate::chunker::load_shards(&shard_paths)?;

    // Tokenizer identity travels with the shards.
    let manifest_path = args.shards.join("manifest.json");
    let tokenizer_id = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: PreprocessManifest = serde_json::from_str(&text)
            .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        if let Some(size) = manifest.tokenizer.strip_prefix("hash-ws-v1:") {
            if let Ok(size) = size.parse::<usize>() {
                config.tokenizer_vocab = size;
            }
        }
        manifest.tokenizer
    } else {
        format!("hash-ws-v1:{}", config.tokenizer_vocab)
    };

    let vocab_path = args.shards.join("vocabulary.json");
    let vocabulary = if vocab_path.exists() {
        LabelVocabulary::load(&vocab_path)?
    } else {
        let mut classes: Vec<String> = entries
            .iter()
            .filter_map(|e| e.telescope().map(String::from))
            .collect();
        classes.sort();
        classes.dedup();
        if classes.is_empty() {
            return Err(Error::Validation("shards carry no telescope labels".into()));
        }
        LabelVocabulary { classes }
    };

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    write_json_pretty(&config, &args.out.join("run_config.json"))?;
    let outcome = train(&config, &entries, &vocabulary, &tokenizer_id, Some(&args.out))?;
    for metrics in &outcome.epoch_metrics {
        eprintln!(
            "epoch {}: loss {:.4} val_composite {:.4}",
            metrics.epoch, metrics.mean_train_loss, metrics.val_composite
        );
    }
    eprintln!(
        "best checkpoint: epoch {} val_composite {:.4}",
        outcome.best.epoch, outcome.best.val_composite
    );
    Ok(outcome.best)
}

fn tokenizer_from_id(id: &str) -> Result<HashTokenizer> {
    let size = id
        .strip_prefix("hash-ws-v1:")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Checkpoint(format!("unsupported tokenizer identifier {id:?}")))?;
    HashTokenizer::new(size)
}

/// Predict a CSV with a trained checkpoint.
pub fn cmd_predict(args: &PredictArgs) -> Result<usize> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let tokenizer = tokenizer_from_id(&checkpoint.tokenizer_id)?;
    if tokenizer.vocab_size() != checkpoint.encoder.vocab_size {
        return Err(Error::Checkpoint(format!(
            "tokenizer vocabulary {} does not match encoder vocabulary {}",
            tokenizer.vocab_size(),
            checkpoint.encoder.vocab_size
        )));
    }
    let records = load_csv(&args.input)?;
    let documents = predict_corpus(
        &checkpoint.encoder,
        &checkpoint.head,
        &tokenizer,
        &checkpoint.vocabulary,
        &records,
        &args.out,
        args.evidence.as_deref(),
        args.window,
        args.threshold,
    )?;
    Ok(documents.len())
}

/// Parsed row of a predictions CSV (submission shape; extra columns in a
/// full labeled CSV are ignored, so a gold file also parses).
pub fn read_predictions_csv(path: &Path) -> Result<Vec<(String, String, [bool; NUM_BOOLEAN_LABELS])>> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?
        .clone();
    let index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{display}: missing column {name:?}")))
    };
    let bib = index("bibcode")?;
    let tel = index("telescope")?;
    let mut bool_cols = [0usize; NUM_BOOLEAN_LABELS];
    for (i, name) in BOOLEAN_LABEL_NAMES.iter().enumerate() {
        bool_cols[i] = index(name)?;
    }
    let mut rows = Vec::new();
    for (rowno, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;
        let cell = |i: usize| row.get(i).unwrap_or("").trim();
        let mut flags = [false; NUM_BOOLEAN_LABELS];
        for (i, flag) in flags.iter_mut().enumerate() {
            let raw = cell(bool_cols[i]);
            *flag = if raw.eq_ignore_ascii_case("true") || raw == "1" {
                true
            } else if raw.eq_ignore_ascii_case("false") || raw == "0" {
                false
            } else {
                return Err(Error::Validation(format!(
                    "{display}: row {}: unparseable boolean {raw:?}",
                    rowno + 1
                )));
            };
        }
        rows.push((cell(bib).to_string(), cell(tel).to_string(), flags));
    }
    Ok(rows)
}

/// Align predictions to gold records by bibcode and build the scored
/// corpus plus the derived vocabulary.
fn align_predictions(
    pred_path: &Path,
    gold_path: &Path,
) -> Result<(Vec<String>, ScoredCorpus, LabelVocabulary)> {
    let gold_records = load_csv(gold_path)?;
    let vocabulary = build_vocabulary(&gold_records)?;
    let (gold_telescope, gold_booleans) = crate::eval_metrics::gold_labels(&gold_records, &vocabulary)?;

    let predictions = read_predictions_csv(pred_path)?;
    let by_bibcode: std::collections::HashMap<&str, usize> = predictions
        .iter()
        .enumerate()
        .map(|(i, (b, _, _))| (b.as_str(), i))
        .collect();

    let mut bibcodes = Vec::with_capacity(gold_records.len());
    let mut pred_telescope = Vec::with_capacity(gold_records.len());
    let mut pred_booleans = Vec::with_capacity(gold_records.len());
    for record in &gold_records {
        let &i = by_bibcode.get(record.bibcode.as_str()).ok_or_else(|| {
            Error::Validation(format!("no prediction for bibcode {}", record.bibcode))
        })?;
        let (_, ref telescope, flags) = predictions[i];
        let class = vocabulary.index_of(telescope).ok_or_else(|| {
            Error::Validation(format!(
                "{}: predicted class {telescope:?} not in gold vocabulary",
                record.bibcode
            ))
        })?;
        bibcodes.push(record.bibcode.clone());
        pred_telescope.push(class);
        pred_booleans.push(flags);
    }
    Ok((
        bibcodes,
        ScoredCorpus {
            gold_telescope,
            pred_telescope,
            gold_booleans,
            pred_booleans,
        },
        vocabulary,
    ))
}

/// Compare a predictions CSV to a labeled CSV and write the metrics JSON.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<crate::eval_metrics::EvalReport> {
    let (_, corpus, vocabulary) = align_predictions(&args.pred, &args.gold)?;
    let report = evaluate(&corpus, &vocabulary, args.bool_f1)?;
    write_json_pretty(&report.metrics_json(), &args.out)?;
    Ok(report)
}

/// Render the error-analysis artifacts: report.md, metrics.json,
/// confusion.csv, confusion.png.
pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let (bibcodes, corpus, vocabulary) = align_predictions(&args.pred, &args.gold)?;
    let report = evaluate(&corpus, &vocabulary, args.bool_f1)?;
    let analysis = error_analysis(&bibcodes, &corpus, &vocabulary, args.max_examples)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let mut text = render_error_report(&analysis, &report);

    match &args.evidence {
        Some(path) => {
            let evidence = read_evidence_jsonl(path)?;
            let tel_ties = evidence.iter().filter(|d| d.tie_broken.telescope).count();
            let bool_ties: usize = evidence
                .iter()
                .map(|d| d.tie_broken.booleans.iter().filter(|&&t| t).count())
                .sum();
            text.push_str(&format!(
                "\n## Tie-breaks\n\nDocuments: {}. Telescope tie-breaks: {tel_ties}. Boolean tie-breaks: {bool_ties}.\n",
                evidence.len()
            ));
        }
        None => {
            eprintln!("report: no evidence sidecar given; tie-break columns omitted");
        }
    }

    std::fs::write(args.out.join("report.md"), text)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    write_json_pretty(&report.metrics_json(), &args.out.join("metrics.json"))?;
    write_confusion_csv(&report.confusion_matrix, &vocabulary, &args.out.join("confusion.csv"))?;
    write_confusion_heatmap(&report.confusion_matrix, &args.out.join("confusion.png"))?;
    Ok(())
}

/// Generate a synthetic corpus CSV.
pub fn cmd_synth(args: &SynthArgs) -> Result<usize> {
    let spec = match &args.spec {
        Some(path) => SynthSpec::load(path)?,
        None => SynthSpec::default(),
    };
    let records = generate_synthetic_corpus(&spec)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    write_csv(&records, &args.out)?;
    Ok(records.len())
}

/// Exit code for an error per the documented contract.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Schema(_) | Error::Validation(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess(args) => {
            let manifest = cmd_preprocess(&args)?;
            println!(
                "preprocessed {} records into {} shards ({} chunks, {} stored tokens)",
                manifest.records, manifest.shards, manifest.selected_chunks, manifest.stored_tokens
            );
        }
        Command::Train(args) => {
            let best = cmd_train(&args)?;
            println!(
                "trained {} epochs; best val_composite {:.4}",
                best.config.epochs, best.val_composite
            );
        }
        Command::Predict(args) => {
            let n = cmd_predict(&args)?;
            println!("wrote {n} predictions to {}", args.out.display());
        }
        Command::Evaluate(args) => {
            let report = cmd_evaluate(&args)?;
            println!(
                "composite {:.4} multiclass_f1 {:.4} ({} documents)",
                report.composite, report.multiclass_f1, report.n_documents
            );
        }
        Command::Report(args) => {
            cmd_report(&args)?;
            println!("report written to {}", args.out.display());
        }
        Command::Synth(args) => {
            let n = cmd_synth(&args)?;
            println!("wrote {n} synthetic records to {}", args.out.display());
        }
    }
    Ok(())
}

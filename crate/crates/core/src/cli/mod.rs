//! Command-line front end: `train`, `eval`, `predict`, `trend`.
//!
//! Exit codes: 0 success, 2 usage, 3 data/schema/checkpoint, 4 numeric.

pub mod checkpoint;
pub mod trend;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::builder::PossibleValue;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::data::{self, CatFormat, LabelSchema, LabeledTweet, Split, VadSentence};
use crate::encoder::{EncoderConfig, EncoderVariant};
use crate::heads::{predict_labels, DEFAULT_THRESHOLD};
use crate::model::{AffectModel, CatExample, Featurizer, ModelConfig, VadExample};
use crate::text::{preprocess, Lexicon, Vocabulary};
use crate::trainer::{self, ScheduleMode, TrainError, TrainingConfig, TrainingData};
use checkpoint::{write_atomic, Checkpoint};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::numerics::NumericsError> for CliError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

impl ValueEnum for EncoderVariant {
    fn value_variants<'a>() -> &'a [Self] {
        &[EncoderVariant::AttentionPool, EncoderVariant::TransformerBlock]
    }

    fn to_possible_value(&self) -> Option<PossibleValue> {
        Some(PossibleValue::new(match self {
            EncoderVariant::AttentionPool => "attention_pool",
            EncoderVariant::TransformerBlock => "transformer_block",
        }))
    }
}

impl ValueEnum for ScheduleMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[ScheduleMode::Paired, ScheduleMode::Interleaved]
    }

    fn to_possible_value(&self) -> Option<PossibleValue> {
        Some(PossibleValue::new(match self {
            ScheduleMode::Paired => "paired",
            ScheduleMode::Interleaved => "interleaved",
        }))
    }
}

impl ValueEnum for CatFormat {
    fn value_variants<'a>() -> &'a [Self] {
        &[CatFormat::AitTsv, CatFormat::SenwaveCsv]
    }

    fn to_possible_value(&self) -> Option<PossibleValue> {
        Some(PossibleValue::new(match self {
            CatFormat::AitTsv => "ait_tsv",
            CatFormat::SenwaveCsv => "senwave_csv",
        }))
    }
}

impl ValueEnum for Split {
    fn value_variants<'a>() -> &'a [Self] {
        &[Split::Train, Split::Val, Split::Test]
    }

    fn to_possible_value(&self) -> Option<PossibleValue> {
        Some(PossibleValue::new(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }))
    }
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("lambda must lie in [0, 1], got {v}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {v}"))
    }
}

fn parse_non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a non-negative number, got {v}"))
    }
}

#[derive(Parser, Debug)]
#[command(name = "affectmt", version, about = "Multi-task emotion classification and VAD regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoint, history and manifest.
    Train(TrainArgs),
    /// Score a checkpoint on labelled test files.
    Eval(EvalArgs),
    /// Predict labels and VAD scores for one tweet per line.
    Predict(PredictArgs),
    /// Emotion share over time in equal-population bins.
    Trend(TrendArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Categorical training file.
    #[arg(long)]
    pub cat: Option<PathBuf>,
    /// Categorical validation file.
    #[arg(long)]
    pub cat_val: Option<PathBuf>,
    /// Dialect of the categorical files; inferred from the extension if absent.
    #[arg(long)]
    pub cat_format: Option<CatFormat>,
    /// VAD file with a split column.
    #[arg(long)]
    pub vad: Option<PathBuf>,
    /// Label schema file, one name per line.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub lexicon_to_regressor: bool,
    #[arg(long, default_value_t = 0.5, value_parser = parse_lambda)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2e-5, value_parser = parse_positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01, value_parser = parse_non_negative)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = EncoderVariant::AttentionPool)]
    pub encoder: EncoderVariant,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = crate::text::DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, value_enum, default_value_t = ScheduleMode::Paired)]
    pub schedule: ScheduleMode,
    /// Train on train+validation data with no model selection.
    #[arg(long)]
    pub retrain_with_val: bool,
    #[arg(long, value_parser = parse_positive)]
    pub clip_grad_norm: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long, default_value_t = 20_000)]
    pub max_vocab: usize,
    /// Checkpoint path; defaults to `<out-dir>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "affectmt-run")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Categorical test file.
    #[arg(long)]
    pub cat: Option<PathBuf>,
    #[arg(long)]
    pub cat_format: Option<CatFormat>,
    /// VAD test file.
    #[arg(long)]
    pub vad: Option<PathBuf>,
    /// Restrict VAD rows to one split; all rows are used otherwise.
    #[arg(long, value_enum)]
    pub vad_split: Option<Split>,
    /// Directory for `metrics.txt`, `metrics.csv` and the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One tweet per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; standard output if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Input lines are `date<TAB>text`; the date is echoed as the first field.
    #[arg(long)]
    pub dated: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrendArgs {
    /// Dated predictions: `date<TAB>labels...` per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub emotion: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    config: C,
    seed: Option<u64>,
    inputs: Vec<(&'a str, String)>,
    checkpoint: Option<String>,
    outputs: Vec<String>,
    started_at: String,
    finished_at: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn write_manifest<C: Serialize>(path: &Path, manifest: &RunManifest<'_, C>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    write_atomic(path, json.as_bytes()).map_err(io_err(path))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    write_atomic(path, contents.as_bytes()).map_err(io_err(path))
}

/// Parses `args` (program name first) and runs the command, printing errors
/// to standard error. Returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => match execute(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Predict(a) => cmd_predict(&a),
        Command::Trend(a) => cmd_trend(&a),
    }
}

fn cat_format(explicit: Option<CatFormat>, path: &Path) -> CatFormat {
    explicit.unwrap_or_else(|| CatFormat::from_path(path))
}

fn cat_examples(f: &Featurizer, rows: &[LabeledTweet]) -> Vec<CatExample> {
    rows.iter()
        .map(|r| CatExample {
            input: f.encode(&r.text),
            labels: r.labels.clone(),
        })
        .collect()
}

fn vad_examples(f: &Featurizer, rows: &[VadSentence]) -> Vec<VadExample> {
    rows.iter()
        .map(|r| VadExample {
            input: f.encode(&r.text),
            target: r.scores(),
        })
        .collect()
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let started_at = now();
    if a.cat.is_none() && a.vad.is_none() {
        return Err(CliError::Usage("train needs --cat and/or --vad".into()));
    }
    if a.cat_val.is_some() && a.cat.is_none() {
        return Err(CliError::Usage("--cat-val requires --cat".into()));
    }
    if a.min_freq == 0 || a.max_vocab < 3 {
        return Err(CliError::Usage("--min-freq must be >= 1 and --max-vocab >= 3".into()));
    }
    if a.max_len < 2 {
        return Err(CliError::Usage("--max-len must be at least 2".into()));
    }
    let config = TrainingConfig {
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        lambda: a.lambda,
        epochs: a.epochs,
        batch_size: a.batch_size as usize,
        seed: a.seed,
        schedule: a.schedule,
        retrain_on_train_plus_val: a.retrain_with_val,
        clip_grad_norm: a.clip_grad_norm,
    };
    config.validate()?;
    let probe = EncoderConfig {
        d_model: a.d_model,
        vocab_size: 3,
        variant: a.encoder,
        max_len: a.max_len,
        seed: a.seed,
    };
    probe.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let fmt = a.cat.as_deref().map(|p| cat_format(a.cat_format, p));
    let schema = match (&a.schema, fmt) {
        (Some(p), _) => LabelSchema::load(p)?,
        (None, Some(CatFormat::SenwaveCsv)) => LabelSchema::senwave(),
        (None, _) => LabelSchema::ait(),
    };
    let (cat_train, cat_val) = match (&a.cat, fmt) {
        (Some(p), Some(f)) => {
            let train = data::load_categorical(p, f, &schema)?;
            let val = match &a.cat_val {
                Some(v) => data::load_categorical(v, cat_format(a.cat_format, v), &schema)?,
                None => Vec::new(),
            };
            (train, val)
        }
        _ => (Vec::new(), Vec::new()),
    };
    let (vad_train, vad_val) = match &a.vad {
        Some(p) => {
            let rows = data::load_vad(p)?;
            (data::by_split(&rows, Split::Train), data::by_split(&rows, Split::Val))
        }
        None => (Vec::new(), Vec::new()),
    };
    if a.cat.is_some() && cat_train.is_empty() {
        return Err(CliError::Data("categorical training file has no rows".into()));
    }
    if a.vad.is_some() && vad_train.is_empty() {
        return Err(CliError::Data("VAD file has no train rows".into()));
    }
    let lexicon = match &a.lexicon {
        Some(p) => Some(Lexicon::load(p).map_err(|e| CliError::Data(e.to_string()))?),
        None => None,
    };

    let mut corpus: Vec<Vec<String>> = Vec::new();
    corpus.extend(cat_train.iter().map(|r| preprocess(&r.text)));
    corpus.extend(vad_train.iter().map(|r| preprocess(&r.text)));
    if a.retrain_with_val {
        corpus.extend(cat_val.iter().map(|r| preprocess(&r.text)));
        corpus.extend(vad_val.iter().map(|r| preprocess(&r.text)));
    }
    let featurizer = Featurizer {
        vocab: Vocabulary::build(&corpus, a.min_freq, a.max_vocab),
        lexicon,
        max_len: a.max_len,
    };
    let mut model_config = ModelConfig::new(
        EncoderConfig {
            vocab_size: featurizer.vocab.len(),
            ..probe
        },
        schema.len(),
    );
    model_config.lexicon_dim = featurizer.lexicon_dim();
    model_config.lexicon_to_regressor = a.lexicon_to_regressor;
    let mut model = AffectModel::new(model_config)?;

    let cat = cat_examples(&featurizer, &cat_train);
    let cat_v = cat_examples(&featurizer, &cat_val);
    let vad = vad_examples(&featurizer, &vad_train);
    let vad_v = vad_examples(&featurizer, &vad_val);
    let history = trainer::train(
        &mut model,
        TrainingData {
            cat: &cat,
            vad: &vad,
            cat_val: &cat_v,
            vad_val: &vad_v,
        },
        &config,
    )?;

    let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| a.out_dir.join("model.ckpt"));
    let ckpt = Checkpoint {
        model,
        featurizer,
        schema,
        training: Some(config.clone()),
    };
    ckpt.save(&ckpt_path).map_err(io_err(&ckpt_path))?;
    let history_path = a.out_dir.join("history.csv");
    write_file(&history_path, &history.to_csv())?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        training: &'a TrainingConfig,
        model: &'a ModelConfig,
        min_freq: usize,
        max_vocab: usize,
        max_len: usize,
        selected_epoch: Option<usize>,
    }
    let mut inputs = Vec::new();
    for (k, p) in [("cat", &a.cat), ("cat_val", &a.cat_val), ("vad", &a.vad), ("schema", &a.schema), ("lexicon", &a.lexicon)] {
        if let Some(p) = p {
            inputs.push((k, show(p)));
        }
    }
    write_manifest(
        &a.out_dir.join("manifest.json"),
        &RunManifest {
            command: "train",
            config: Resolved {
                training: &config,
                model: ckpt.model.config(),
                min_freq: a.min_freq,
                max_vocab: a.max_vocab,
                max_len: a.max_len,
                selected_epoch: history.selected_epoch,
            },
            seed: Some(a.seed),
            inputs,
            checkpoint: Some(show(&ckpt_path)),
            outputs: vec![show(&history_path)],
            started_at,
            finished_at: now(),
        },
    )?;
    eprintln!(
        "trained {} epoch(s); checkpoint {}",
        history.epochs.len(),
        ckpt_path.display()
    );
    Ok(())
}

/// Runs evaluation and returns the report also written to stdout.
pub fn cmd_eval(a: &EvalArgs) -> Result<crate::metrics::MetricsReport, CliError> {
    let started_at = now();
    if a.cat.is_none() && a.vad.is_none() {
        return Err(CliError::Usage("eval needs --cat and/or --vad".into()));
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cat = match &a.cat {
        Some(p) => cat_examples(&ck.featurizer, &data::load_categorical(p, cat_format(a.cat_format, p), &ck.schema)?),
        None => Vec::new(),
    };
    let vad = match &a.vad {
        Some(p) => {
            let rows = data::load_vad(p)?;
            let rows = match a.vad_split {
                Some(s) => data::by_split(&rows, s),
                None => rows,
            };
            vad_examples(&ck.featurizer, &rows)
        }
        None => Vec::new(),
    };
    let report = trainer::evaluate(&ck.model, &cat, &vad)?;
    print!("{}", report.to_key_value());
    if let Some(dir) = &a.out_dir {
        let (kv, csv) = (dir.join("metrics.txt"), dir.join("metrics.csv"));
        write_file(&kv, &report.to_key_value())?;
        write_file(&csv, &report.to_csv())?;
        let mut inputs = Vec::new();
        for (k, p) in [("cat", &a.cat), ("vad", &a.vad)] {
            if let Some(p) = p {
                inputs.push((k, show(p)));
            }
        }
        write_manifest(
            &dir.join("manifest.json"),
            &RunManifest {
                command: "eval",
                config: serde_json::json!({ "vad_split": a.vad_split.map(|s| s.to_string()) }),
                seed: None,
                inputs,
                checkpoint: Some(show(&a.checkpoint)),
                outputs: vec![show(&kv), show(&csv)],
                started_at,
                finished_at: now(),
            },
        )?;
    }
    Ok(report)
}

/// Formats one prediction line: labels (comma-joined, `-` for none) then
/// V, A, D to three decimals, tab-separated.
pub fn format_prediction(names: &[String], probs: &[f64], vad: &[f64; 3]) -> String {
    let active = &predict_labels(&[probs.to_vec()], DEFAULT_THRESHOLD)[0];
    let labels: Vec<&str> = names
        .iter()
        .zip(active)
        .filter(|(_, &b)| b == 1)
        .map(|(n, _)| n.as_str())
        .collect();
    let labels = if labels.is_empty() { "-".to_string() } else { labels.join(",") };
    format!("{labels}\t{:.3}\t{:.3}\t{:.3}", vad[0], vad[1], vad[2])
}

pub fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let started_at = now();
    let ck = Checkpoint::load(&a.checkpoint)?;
    let bytes = std::fs::read(&a.input).map_err(io_err(&a.input))?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Data(format!("{}: not UTF-8", a.input.display())))?;
    let lines: Vec<&str> = text.lines().collect();
    let (dates, tweets): (Vec<&str>, Vec<&str>) = if a.dated {
        lines.iter().map(|l| l.split_once('\t').unwrap_or((l, ""))).unzip()
    } else {
        (vec![""; lines.len()], lines.clone())
    };
    let inputs: Vec<_> = tweets.iter().map(|t| ck.featurizer.encode(t)).collect();
    let preds = ck.model.predict(&inputs)?;
    let mut out = String::new();
    for (p, date) in preds.iter().zip(&dates) {
        if a.dated {
            out.push_str(date);
            out.push('\t');
        }
        let _ = writeln!(out, "{}", format_prediction(ck.schema.names(), &p.probs, &p.vad));
    }
    match &a.output {
        Some(path) => {
            write_file(path, &out)?;
            write_manifest(
                &path.with_extension("manifest.json"),
                &RunManifest {
                    command: "predict",
                    config: serde_json::json!({ "dated": a.dated, "threshold": DEFAULT_THRESHOLD }),
                    seed: None,
                    inputs: vec![("input", show(&a.input))],
                    checkpoint: Some(show(&a.checkpoint)),
                    outputs: vec![show(path)],
                    started_at,
                    finished_at: now(),
                },
            )?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(out.as_bytes())
                .map_err(|e| CliError::Data(format!("stdout: {e}")))?;
        }
    }
    Ok(())
}

pub fn cmd_trend(a: &TrendArgs) -> Result<(), CliError> {
    let started_at = now();
    let text = std::fs::read_to_string(&a.input).map_err(io_err(&a.input))?;
    let rows = trend::parse_rows(&text, &a.emotion);
    let bins = trend::trend(&rows, a.bins as usize).map_err(|e| CliError::Data(format!("{}: {e}", a.input.display())))?;
    let csv = trend::to_csv(&bins);
    match &a.output {
        Some(path) => {
            write_file(path, &csv)?;
            write_manifest(
                &path.with_extension("manifest.json"),
                &RunManifest {
                    command: "trend",
                    config: serde_json::json!({ "emotion": a.emotion, "bins": a.bins }),
                    seed: None,
                    inputs: vec![("input", show(&a.input))],
                    checkpoint: None,
                    outputs: vec![show(path)],
                    started_at,
                    finished_at: now(),
                },
            )?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

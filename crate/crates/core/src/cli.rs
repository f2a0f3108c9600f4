//! The `reflex` command line: one subcommand per pipeline stage, each
//! writing its outputs plus a `manifest.json` into `--out`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage, 3 input/output
//! (missing or malformed files, checkpoints), 4 configuration (bad
//! config file, invalid hyperparameters, embedding-mode mismatch).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{classify_errors, error_agreement, extract_rules, AnalysisError};
use crate::corpus::synth::{generate_synthetic, parse_rules, random_lexicon, LexiconShape};
use crate::corpus::{load_corpus, segments, CognatePair, Corpus, CorpusError};
use crate::latent::{
    activity_heatmap, echo_experiment, nearest_neighbors, parse_cohorts, sample_latent, LatentError, SamplingRegime,
};
use crate::model::{CheckpointError, EmbeddingMode, LanguageInput, ModelConfig, ModelError, TransducerModel};
use crate::phylo::{
    cosine_distance_matrix, emit_newick, neighbor_join, parse_newick, quartet_comparison, PhyloError,
};
use crate::training::{
    derive_seed, parse_decoded_tsv, run_kfold, train, Decoded, TrainConfig, TrainError,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "REFLEX_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Runtime,
    Usage,
    Io,
    Config,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Runtime => 1,
            ErrorClass::Usage => 2,
            ErrorClass::Io => 3,
            ErrorClass::Config => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub class: ErrorClass,
    pub message: String,
}

impl CliError {
    fn new(class: ErrorClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Config, message)
    }

    fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorClass::Io, message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let class = match e {
            CorpusError::Argument(_) => ErrorClass::Config,
            _ => ErrorClass::Io,
        };
        Self::new(class, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let class = match e {
            ModelError::Checkpoint(_) => ErrorClass::Io,
            ModelError::UnknownLanguage(_) | ModelError::Argument(_) => ErrorClass::Config,
            _ => ErrorClass::Runtime,
        };
        Self::new(class, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::config(e.to_string()),
            TrainError::Corpus(e) => e.into(),
            TrainError::Model(e) => e.into(),
            _ => Self::new(ErrorClass::Runtime, e.to_string()),
        }
    }
}

impl From<LatentError> for CliError {
    fn from(e: LatentError) -> Self {
        match e {
            LatentError::Model(e) => e.into(),
            LatentError::Cohort { .. } => Self::io(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Model(e) => e.into(),
            AnalysisError::MismatchedRecords | AnalysisError::NoModels => Self::config(e.to_string()),
            _ => Self::new(ErrorClass::Runtime, e.to_string()),
        }
    }
}

impl From<PhyloError> for CliError {
    fn from(e: PhyloError) -> Self {
        let class = match e {
            PhyloError::Parse { .. } | PhyloError::DuplicateLabel { .. } => ErrorClass::Io,
            PhyloError::LeafSetMismatch { .. } | PhyloError::TooFewTaxa { .. } | PhyloError::NoResolvedQuartets => {
                ErrorClass::Config
            }
            _ => ErrorClass::Runtime,
        };
        Self::new(class, e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "reflex", version, about = "Proto-form → reflex transduction with per-language embeddings")]
pub struct Cli {
    /// Plain-text `key = value` file of default flags for the subcommand;
    /// flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "reflex-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model on a whole corpus and save a checkpoint.
    Train(TrainCmd),
    /// K-fold cross-validation: per-fold and pooled WER/PER.
    Kfold(KfoldCmd),
    /// Decode `language<TAB>etymon[<TAB>gold]` rows with a checkpoint.
    Decode(DecodeCmd),
    /// Rule inventory, SL/OL/U error classes and cross-model agreement.
    Errors(ErrorsCmd),
    /// Neighbor-joining tree over language embeddings, optionally scored against a reference.
    Tree(TreeCmd),
    /// Binary activity of every language embedding dimension (ST models).
    Heatmap(ModelOnly),
    /// Decodes under every single-bit flip of a language embedding (ST models).
    Neighbors(NeighborsCmd),
    /// Decodes under random embeddings drawn from sampling regimes.
    Sample(SampleCmd),
    /// Echo-form final-agreement experiment over cohorts (ST models).
    Echo(EchoCmd),
    /// Generate a synthetic corpus from sound-change rules.
    Synth(SynthCmd),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Kfold(_) => "kfold",
            Command::Decode(_) => "decode",
            Command::Errors(_) => "errors",
            Command::Tree(_) => "tree",
            Command::Heatmap(_) => "heatmap",
            Command::Neighbors(_) => "neighbors",
            Command::Sample(_) => "sample",
            Command::Echo(_) => "echo",
            Command::Synth(_) => "synth",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Language embedding activation: dense, sigmoid or st.
    #[arg(long, default_value = "dense", value_parser = parse_mode)]
    pub mode: EmbeddingMode,
    #[arg(long, default_value_t = 128)]
    pub lang_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden_dim: usize,
    /// Longest decoded output (EOS excluded).
    #[arg(long, default_value_t = 64)]
    pub max_decode_len: usize,
}

fn parse_mode(s: &str) -> Result<EmbeddingMode, String> {
    s.parse().map_err(|e: ModelError| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long = "lr", default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// Global gradient-norm clip (off unless given).
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Pairs per forward pass; numerically irrelevant.
    #[arg(long, default_value_t = 64)]
    pub micro_batch: usize,
    /// Master seed for initialization, shuffling and fold assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Progress line on stderr every N epochs (0: silent).
    #[arg(long, default_value_t = 10)]
    #[serde(skip)]
    pub log_every: usize,
}

impl TrainArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            seed: self.seed,
            micro_batch: self.micro_batch,
        }
    }
}

impl ModelArgs {
    fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            lang_dim: self.lang_dim,
            emb_dim: self.emb_dim,
            hidden_dim: self.hidden_dim,
            max_decode_len: self.max_decode_len,
            seed,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainCmd {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KfoldCmd {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of folds (at least 2).
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    pub k: u64,
    /// Folds trained concurrently; does not change any output.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecodeCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// TSV rows `language<TAB>etymon`, optionally `<TAB>gold`.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ErrorsCmd {
    /// Checkpoint whose alignments define the sound-change rules.
    #[arg(long)]
    pub model: PathBuf,
    /// The corpus the decoded files index into (same vocabularies as the model).
    #[arg(long)]
    pub corpus: PathBuf,
    /// `NAME=PATH` of a decoded TSV from `kfold`; repeatable.
    #[arg(long = "decoded", value_parser = parse_named, required = true)]
    pub decoded: Vec<(String, PathBuf)>,
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => {
            if n.chars().all(|c| c.is_alphanumeric() || c == '-' || c == '_') {
                Ok((n.to_string(), PathBuf::from(p)))
            } else {
                Err(format!("name {n:?} may only use letters, digits, '-' and '_'"))
            }
        }
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TreeCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// Newick reference tree over the same languages.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelOnly {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NeighborsCmd {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub language: String,
    /// Space-separated segments.
    #[arg(long)]
    pub etymon: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// `gaussian:SIGMA`, `beta:ALPHA` or `binomial:P`; repeatable. Defaults
    /// to the four standard settings of the model's family.
    #[arg(long = "regime", value_parser = parse_regime)]
    #[serde(serialize_with = "display_all")]
    pub regimes: Vec<SamplingRegime>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Take the first N distinct etyma of this corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long = "etyma", default_value_t = 100)]
    pub n_etyma: usize,
    /// Extra etymon (space-separated segments); repeatable.
    #[arg(long = "etymon")]
    pub etymon: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_regime(s: &str) -> Result<SamplingRegime, String> {
    s.parse().map_err(|e: LatentError| e.to_string())
}

fn display_all<S: serde::Serializer, T: std::fmt::Display>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(ToString::to_string))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EchoCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// Cohort file: `base<TAB>substitutes[<TAB>exclusion regex]` per line.
    #[arg(long)]
    pub cohorts: PathBuf,
    /// Bernoulli densities of the random embeddings.
    #[arg(long = "p", value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8")]
    pub ps: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthCmd {
    /// Rule file with one `[language]` section per daughter.
    #[arg(long)]
    pub rules: PathBuf,
    /// Proto-lexicon, one space-separated etymon per line; random when absent.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub lexicon_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Everything needed to rerun a command; written as `manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub settings: serde_json::Value,
    pub inputs: Vec<InputDigest>,
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    match parse(args).and_then(|cli| execute(&cli)) {
        Ok(()) => 0,
        Err(e) if e.class == ErrorClass::Usage && e.message.is_empty() => 0,
        Err(e) => {
            eprintln!("reflex: {e}");
            e.class.exit_code()
        }
    }
}

fn command() -> clap::Command {
    Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true).allow_negative_numbers(true))
}

/// Parses arguments, folding in `--config` defaults.
pub fn parse(args: Vec<OsString>) -> Result<Cli, CliError> {
    let args = inject_config(args)?;
    let matches: ArgMatches = command().try_get_matches_from(args).map_err(|e| {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            let _ = e.print();
            // empty usage error: help was printed, exit 0
            return CliError::new(ErrorClass::Usage, "");
        }
        let text = e.render().to_string();
        let first = text.lines().next().unwrap_or("invalid arguments");
        let first = first.strip_prefix("error: ").unwrap_or(first);
        CliError::new(ErrorClass::Usage, format!("{first} (see --help)"))
    })?;
    Cli::from_arg_matches(&matches).map_err(|e| CliError::new(ErrorClass::Usage, e.to_string()))
}

/// Splices `--key value` pairs from the config file right after the
/// subcommand name, so later command-line flags override them.
fn inject_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let text: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < text.len() {
        let a = &text[i];
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else if a == "--config" {
            config = text.get(i + 1).cloned();
            i += 1;
        } else if a == "--out" {
            i += 1;
        } else if sub.is_none() && !a.starts_with('-') {
            sub = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(at)) = (config, sub) else {
        return Ok(args);
    };
    let body = fs::read_to_string(&path).map_err(|e| CliError::config(format!("config file {path}: {e}")))?;
    let cmd = command();
    let Some(subcommand) = cmd.find_subcommand(&text[at]) else {
        return Ok(args);
    };
    let mut extra: Vec<OsString> = Vec::new();
    for (n, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| CliError::config(format!("config file {path}, line {}: {reason}", n + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        let arg = subcommand
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| bad(format!("unknown key {key:?} for `{}`", &text[at])))?;
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}").into());
            extra.push(value.into());
        } else {
            match value {
                "true" => extra.push(format!("--{key}").into()),
                "false" => {}
                _ => return Err(bad(format!("{key} takes true or false"))),
            }
        }
    }
    let mut out = args;
    out.splice(at + 1..at + 1, extra);
    Ok(out)
}

fn read_input(path: &Path, inputs: &mut Vec<InputDigest>) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::io(format!("{}: not UTF-8", path.display())))?;
    inputs.push(digest(path, text.as_bytes()));
    Ok(text)
}

fn digest(path: &Path, bytes: &[u8]) -> InputDigest {
    InputDigest {
        path: path.display().to_string(),
        bytes: bytes.len(),
        sha256: format!("{:x}", Sha256::digest(bytes)),
    }
}

fn read_corpus(path: &Path, inputs: &mut Vec<InputDigest>) -> Result<Corpus, CliError> {
    let corpus = load_corpus(path)?;
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    inputs.push(digest(path, &bytes));
    Ok(corpus)
}

fn read_model(path: &Path, inputs: &mut Vec<InputDigest>) -> Result<TransducerModel, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let model =
        TransducerModel::from_bytes(&bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    inputs.push(digest(path, &bytes));
    Ok(model)
}

struct Output<'a> {
    dir: &'a Path,
}

impl Output<'_> {
    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    }

    fn manifest(&self, command: &'static str, settings: &impl Serialize, inputs: Vec<InputDigest>) -> Result<(), CliError> {
        let m = RunManifest {
            tool: "reflex",
            version: env!("CARGO_PKG_VERSION"),
            command,
            settings: serde_json::to_value(settings).map_err(|e| CliError::new(ErrorClass::Runtime, e.to_string()))?,
            inputs,
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| CliError::new(ErrorClass::Runtime, e.to_string()))?;
        text.push('\n');
        self.write("manifest.json", text)
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    fs::create_dir_all(&cli.out).map_err(|e| CliError::io(format!("{}: {e}", cli.out.display())))?;
    let out = Output { dir: &cli.out };
    let mut inputs = Vec::new();
    let name = cli.command.name();
    match &cli.command {
        Command::Train(c) => {
            cmd_train(c, &out, &mut inputs)?;
            out.manifest(name, c, inputs)
        }
        Command::Kfold(c) => {
            cmd_kfold(c, &out, &mut inputs)?;
            out.manifest(name, c, inputs)
        }
        Command::Decode(c) => {
            cmd_decode(c, &out, &mut inputs)?;
            out.manifest(name, c, inputs)
        }
        Command::Errors(c) => {
            cmd_errors(c, &out, &mut inputs)?;
            out.manifest(name, c, inputs)
        }
        Command::Tree(c) => {
            cmd_tree(c, &out, &mut inputs)?;
            out.manifest(name, c, inputs)
        }
        Command::Heatmap(c) => {
            let model = read_model(&c.model, &mut inputs)?;
            let h = activity_heatmap(&model)?;
            out.write("heatmap.tsv", h.to_tsv())?;
            out.write("heatmap_summary.tsv", h.summary_tsv())?;
            println!(
                "{} languages × {} dimensions, {} never active",
                h.languages.len(),
                model.config().lang_dim,
                h.inactive_dims().len()
            );
            out.manifest(name, c, inputs)
        }
        Command::Neighbors(c) => {
            let model = read_model(&c.model, &mut inputs)?;
            let lang = model.language(&c.language)?;
            let x = model.input_vocab().encode(&c.etymon).map_err(|e| CliError::config(e.to_string()))?;
            let r = nearest_neighbors(&model, lang, &x)?;
            out.write("neighbors.tsv", r.to_tsv(&model))?;
            println!(
                "base {} | {} flips, {} distinct outputs",
                model.output_vocab().render(&r.base),
                r.neighbors.len(),
                r.unique_outputs()
            );
            out.manifest(name, c, inputs)
        }
        Command::Sample(c) => {
            cmd_sample(c, &out, &mut inputs)?;
            out.manifest(name, c, inputs)
        }
        Command::Echo(c) => {
            let model = read_model(&c.model, &mut inputs)?;
            let cohorts = parse_cohorts(&read_input(&c.cohorts, &mut inputs)?)?;
            let r = echo_experiment(&model, &cohorts, &c.ps, c.seed)?;
            out.write("echo.tsv", r.to_tsv())?;
            for row in &r.rows {
                println!("p={}: {}/{} pairs agree ({:.3})", row.p, row.agreeing, row.pairs, row.proportion());
            }
            if r.skipped > 0 {
                eprintln!("reflex: skipped {} cohorts with fewer than two members", r.skipped);
            }
            out.manifest(name, c, inputs)
        }
        Command::Synth(c) => {
            cmd_synth(c, &out, &mut inputs)?;
            out.manifest(name, c, inputs)
        }
    }
}

fn progress(every: usize, prefix: &str, s: &crate::training::EpochStats) {
    if every > 0 && ((s.epoch + 1) % every == 0 || s.epoch == 0) {
        eprintln!("{prefix}epoch {:>4} loss {:.4} ({:.2}s)", s.epoch + 1, s.loss, s.seconds);
    }
}

/// Model seed `derive_seed(seed, 0)`, shuffling seed `derive_seed(seed, 1)`.
fn cmd_train(c: &TrainCmd, out: &Output, inputs: &mut Vec<InputDigest>) -> Result<(), CliError> {
    let corpus = read_corpus(&c.corpus, inputs)?;
    let mc = c.model.model_config(derive_seed(c.train.seed, 0));
    let tc = TrainConfig {
        seed: derive_seed(c.train.seed, 1),
        ..c.train.train_config()
    };
    let mut model = TransducerModel::new(mc, &corpus)?;
    let pairs: Vec<&CognatePair> = corpus.pairs.iter().collect();
    let history = train(&mut model, &pairs, &tc, |s| progress(c.train.log_every, "", s))?;
    let mut h = String::from("epoch\tloss\n");
    for s in &history {
        let _ = writeln!(h, "{}\t{:.6}", s.epoch + 1, s.loss);
    }
    out.write("history.tsv", h)?;
    out.write("model.ckpt", model.to_bytes())?;
    if let Some(last) = history.last() {
        println!("trained {} epochs on {} pairs, final loss {:.4}", history.len(), pairs.len(), last.loss);
    }
    Ok(())
}

fn cmd_kfold(c: &KfoldCmd, out: &Output, inputs: &mut Vec<InputDigest>) -> Result<(), CliError> {
    let corpus = read_corpus(&c.corpus, inputs)?;
    let mc = c.model.model_config(0);
    let k = c.k as usize;
    let report = run_kfold(&corpus, &mc, &c.train.train_config(), k, c.jobs as usize, |fold, s| {
        progress(c.train.log_every, &format!("fold {fold} "), s)
    })?;
    out.write("metrics.tsv", report.metrics_tsv(&corpus))?;
    out.write("decoded.tsv", report.decoded_tsv(&corpus))?;
    let mut losses = String::from("fold\tepoch\tloss\n");
    for f in &report.folds {
        let rows = f.decoded.iter().map(|d| (Some(f.fold), d));
        out.write(&format!("fold_{}.tsv", f.fold), crate::training::decoded_tsv(&corpus, rows))?;
        for s in &f.history {
            let _ = writeln!(losses, "{}\t{}\t{:.6}", f.fold, s.epoch + 1, s.loss);
        }
    }
    out.write("losses.tsv", losses)?;
    let o = &report.aggregate.overall;
    println!("{k}-fold {}: WER {:.4} PER {:.4} over {} pairs", c.model.mode, o.wer, o.per, o.count);
    Ok(())
}

fn cmd_decode(c: &DecodeCmd, out: &Output, inputs: &mut Vec<InputDigest>) -> Result<(), CliError> {
    let model = read_model(&c.model, inputs)?;
    let text = read_input(&c.input, inputs)?;
    let mut tsv = String::from("language\tetymon\tpredicted\tgold\tcorrect\n");
    let (mut n, mut right, mut scored) = (0, 0, 0);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| CliError::io(format!("{}, line {}: {reason}", c.input.display(), i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(bad(format!("expected 2 or 3 columns, got {}", cols.len())));
        }
        let lang = model.language(cols[0].trim())?;
        let x = model.input_vocab().encode(cols[1]).map_err(|e| bad(e.to_string()))?;
        let y = model.decode(&x, LanguageInput::Id(lang))?;
        let predicted = model.output_vocab().render(&y);
        let (gold, correct) = match cols.get(2) {
            Some(g) => {
                let gold: Vec<String> = segments(g).iter().map(|s| s.symbol().to_string()).collect();
                let ok = gold.join(" ") == predicted;
                scored += 1;
                right += usize::from(ok);
                (gold.join(" "), ok.to_string())
            }
            None => ("-".to_string(), "-".to_string()),
        };
        let _ = writeln!(tsv, "{}\t{}\t{predicted}\t{gold}\t{correct}", cols[0].trim(), model.input_vocab().render(&x));
        n += 1;
    }
    out.write("decoded.tsv", tsv)?;
    if scored > 0 {
        println!("decoded {n} rows, {right}/{scored} correct");
    } else {
        println!("decoded {n} rows");
    }
    Ok(())
}

fn check_same_tables(model: &TransducerModel, corpus: &Corpus) -> Result<(), CliError> {
    if model.input_vocab() != &corpus.input_vocab
        || model.output_vocab() != &corpus.output_vocab
        || model.languages() != &corpus.languages
    {
        return Err(CliError::config(
            "the model was trained on a corpus with different vocabularies or languages",
        ));
    }
    Ok(())
}

fn cmd_errors(c: &ErrorsCmd, out: &Output, inputs: &mut Vec<InputDigest>) -> Result<(), CliError> {
    let model = read_model(&c.model, inputs)?;
    let corpus = read_corpus(&c.corpus, inputs)?;
    check_same_tables(&model, &corpus)?;
    let pairs: Vec<&CognatePair> = corpus.pairs.iter().collect();
    let inventory = extract_rules(&model, &pairs)?;
    out.write("inventory.tsv", inventory.to_tsv(&corpus))?;
    let mut sets: Vec<(String, Vec<Decoded>)> = Vec::new();
    for (name, path) in &c.decoded {
        if sets.iter().any(|(n, _)| n == name) {
            return Err(CliError::config(format!("decoded set {name:?} given twice")));
        }
        let text = read_input(path, inputs)?;
        let records = parse_decoded_tsv(&corpus, &text)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        let b = classify_errors(&model, &inventory, &records)?;
        out.write(&format!("errors_{name}.tsv"), b.to_tsv())?;
        println!(
            "{name}: SL {:.3} OL {:.3} U {:.3} over {} erroneous edits",
            b.same_language,
            b.other_language,
            b.unmotivated,
            b.edits.len()
        );
        sets.push((name.clone(), records));
    }
    out.write("agreement.tsv", error_agreement(&sets)?.to_tsv())
}

fn cmd_tree(c: &TreeCmd, out: &Output, inputs: &mut Vec<InputDigest>) -> Result<(), CliError> {
    let model = read_model(&c.model, inputs)?;
    let items = model
        .languages()
        .iter()
        .map(|(id, name)| Ok((name.to_string(), model.read_language_embedding(id)?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let d = cosine_distance_matrix(&items)?;
    out.write("distances.tsv", d.to_tsv())?;
    let tree = neighbor_join(&d)?;
    let newick = emit_newick(&tree);
    out.write("tree.nwk", format!("{newick}\n"))?;
    println!("{newick}");
    if let Some(path) = &c.reference {
        let reference = parse_newick(read_input(path, inputs)?.trim())
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        let q = quartet_comparison(&tree, &reference)?;
        let gqd = q.distance()?;
        out.write(
            "gqd.tsv",
            format!(
                "gqd\tdiffering\tresolved_in_reference\tquartets\n{gqd:.6}\t{}\t{}\t{}\n",
                q.differing, q.resolved_in_reference, q.total
            ),
        )?;
        println!("GQD {gqd:.4} ({} of {} resolved quartets differ)", q.differing, q.resolved_in_reference);
    }
    Ok(())
}

/// The four standard regimes of a mode's activated space.
pub fn default_regimes(mode: EmbeddingMode) -> Vec<SamplingRegime> {
    let specs: [&str; 4] = match mode {
        EmbeddingMode::Dense => ["gaussian:0.01", "gaussian:0.1", "gaussian:1", "gaussian:10"],
        EmbeddingMode::Sigmoid => ["beta:0.01", "beta:0.1", "beta:1", "beta:10"],
        EmbeddingMode::St => ["binomial:0.2", "binomial:0.4", "binomial:0.6", "binomial:0.8"],
    };
    specs.iter().map(|s| s.parse().expect("valid built-in regime")).collect()
}

fn cmd_sample(c: &SampleCmd, out: &Output, inputs: &mut Vec<InputDigest>) -> Result<(), CliError> {
    let model = read_model(&c.model, inputs)?;
    let mut etyma: Vec<Vec<usize>> = Vec::new();
    if let Some(path) = &c.corpus {
        let corpus = read_corpus(path, inputs)?;
        for p in &corpus.pairs {
            if etyma.len() == c.n_etyma {
                break;
            }
            let x = model
                .input_vocab()
                .encode(&corpus.etymon_text(p))
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            if !etyma.contains(&x) {
                etyma.push(x);
            }
        }
    }
    for e in &c.etymon {
        etyma.push(model.input_vocab().encode(e).map_err(|e| CliError::config(e.to_string()))?);
    }
    if etyma.is_empty() {
        return Err(CliError::config("no etyma: give --corpus or --etymon"));
    }
    let regimes = if c.regimes.is_empty() {
        default_regimes(model.mode())
    } else {
        c.regimes.clone()
    };
    let mut summary = String::from("regime\tsamples\tetyma\tmean_unique\tall_terminated\n");
    for (i, r) in regimes.iter().enumerate() {
        let regime = SamplingRegime {
            samples: c.samples,
            ..*r
        };
        let rep = sample_latent(&model, &regime, &etyma, derive_seed(c.seed, i as u64))?;
        let tag = regime.to_string().replace(':', "_");
        out.write(&format!("sample_{tag}.tsv"), rep.to_tsv(&model))?;
        out.write(&format!("outputs_{tag}.tsv"), rep.outputs_tsv(&model))?;
        let _ = writeln!(
            summary,
            "{regime}\t{}\t{}\t{:.4}\t{}",
            regime.samples,
            etyma.len(),
            rep.mean_unique(),
            rep.all_terminated()
        );
        println!("{regime}: {:.2} distinct outputs per etymon", rep.mean_unique());
    }
    out.write("sample_summary.tsv", summary)
}

fn cmd_synth(c: &SynthCmd, out: &Output, inputs: &mut Vec<InputDigest>) -> Result<(), CliError> {
    let rules = parse_rules(&read_input(&c.rules, inputs)?)
        .map_err(|e| CliError::io(format!("{}: {e}", c.rules.display())))?;
    let lexicon: Vec<Vec<String>> = match &c.lexicon {
        Some(path) => read_input(path, inputs)?
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|l| segments(l).iter().map(|s| s.symbol().to_string()).collect())
            .collect(),
        None => random_lexicon(&LexiconShape::default(), c.lexicon_size, c.seed),
    };
    let corpus = generate_synthetic(&lexicon, &rules, c.seed)?;
    out.write("corpus.tsv", corpus.to_tsv())?;
    println!("{} pairs over {} languages", corpus.len(), corpus.languages.len());
    Ok(())
}

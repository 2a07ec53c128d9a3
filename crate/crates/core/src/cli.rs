//! The `joformer` command line: `fetch-data`, `train`, `compare`, `eval`,
//! `verify` and `plot`.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage or configuration
//! error.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::data::{default_cache_dir, load_or_fetch, Dataset, LoadedText, DEFAULT_CORPUS_URL};
use crate::error::{ConfigError, TrainError};
use crate::kv;
use crate::metrics::{
    emit_loss_plot, evaluate, grid_of, read_metrics_csv, summarize_table, write_metrics_csv, MetricsRecord,
};
use crate::model::{read_checkpoint, write_checkpoint, ModelConfig, Variant};
use crate::oracle::{render_reports, reports_to_csv, verify_all};
use crate::training::{format_seeds, parse_seeds, train_run_observed, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "joformer", version, about = "Journey-based positional attention experiments")]
pub struct Cli {
    /// Suppress per-evaluation progress lines.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download (or copy) the corpus into the cache and report its size.
    FetchData(FetchArgs),
    /// Train one model and write its manifest, metrics and checkpoint.
    Train(TrainArgs),
    /// Train a variants × depths × seeds grid and summarize it.
    Compare(CompareArgs),
    /// Validation loss and perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Run the oracle equivalence suite and gradient checks.
    Verify(VerifyArgs),
    /// Render metrics CSV files as a validation-loss plot.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// URL or local file.
    #[arg(long, default_value = DEFAULT_CORPUS_URL)]
    pub url: String,
    /// Cache directory [default: $JOFORMER_DATA_DIR or ./data].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default, Clone)]
pub struct RunArgs {
    /// `key = value` configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus URL or local file.
    #[arg(long)]
    pub data: Option<String>,
    /// Output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// roformer, joformer-fixed or joformer-per-token.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated depths.
    #[arg(long, default_value = "1,3,6")]
    pub depths: String,
    /// `all` or a comma-separated list of variants.
    #[arg(long, default_value = "all")]
    pub variants: String,
    /// A seed count `n` (seeds 1…n) or an explicit list such as `4,7`.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus URL or local file; must be the corpus the model was trained on.
    #[arg(long, default_value = DEFAULT_CORPUS_URL)]
    pub data: String,
    /// Window length [default: the model's context length].
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the reports as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metrics CSV files.
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "Validation loss")]
    pub title: String,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    match cli.command {
        Command::FetchData(a) => cmd_fetch_data(&a),
        Command::Train(a) => cmd_train(&a, quiet),
        Command::Compare(a) => cmd_compare(&a, quiet),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Plot(a) => cmd_plot(&a),
    }
}

fn load_dataset(source: &str) -> Result<(LoadedText, Dataset), CliError> {
    let loaded = load_or_fetch(source, &default_cache_dir()).map_err(runtime)?;
    let dataset = Dataset::from_text(&loaded.text).map_err(runtime)?;
    Ok((loaded, dataset))
}

pub fn cmd_fetch_data(args: &FetchArgs) -> Result<(), CliError> {
    let out = args.out.clone().unwrap_or_else(default_cache_dir);
    let loaded = load_or_fetch(&args.url, &out).map_err(runtime)?;
    let path = if loaded.path.starts_with(&out) {
        loaded.path.clone()
    } else {
        // Local file: keep a copy in the cache directory.
        let name = loaded.path.file_name().map(PathBuf::from).unwrap_or_else(|| "corpus.txt".into());
        let target = out.join(name);
        if target != loaded.path {
            fs::create_dir_all(&out).map_err(runtime)?;
            fs::write(&target, &loaded.text).map_err(|e| runtime(format!("failed to write {}: {e}", target.display())))?;
        }
        target
    };
    let dataset = Dataset::from_text(&loaded.text).map_err(runtime)?;
    println!("corpus: {}", path.display());
    println!("characters: {}", loaded.text.chars().count());
    println!("vocabulary: {}", dataset.vocab.len());
    println!("cache: {}", if loaded.cache_hit { "hit" } else { "stored" });
    Ok(())
}

/// Fully resolved settings of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: String,
    pub out: PathBuf,
    /// SHA-256 of the configuration file, when one was given.
    pub config_file_hash: Option<String>,
}

/// Manifest keys that describe a run rather than configure it.
const MANIFEST_ONLY_KEYS: [&str; 7] = [
    "tool_version",
    "config_file_sha256",
    "resolved_config_sha256",
    "data_path",
    "data_characters",
    "run_dir",
    "seed",
];

fn apply_file(resolved: &mut Resolved, path: &Path) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    resolved.config_file_hash = Some(sha256_hex(&bytes));
    let text = String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("config {} is not UTF-8", path.display())))?;
    for entry in kv::parse(&text)? {
        let key = entry.key.trim_start_matches("model.").trim_start_matches("train.");
        let entry = kv::Entry {
            key: key.to_string(),
            ..entry
        };
        let handled = match key {
            "data" => {
                resolved.data = entry.value.clone();
                true
            }
            "out" => {
                resolved.out = PathBuf::from(&entry.value);
                true
            }
            k if MANIFEST_ONLY_KEYS.contains(&k) => true,
            _ => resolved.model.apply(&entry)? || resolved.train.apply(&entry)?,
        };
        if !handled {
            return Err(ConfigError::UnknownKey(entry.key).into());
        }
    }
    Ok(())
}

fn resolve(run: &RunArgs) -> Result<Resolved, CliError> {
    let mut resolved = Resolved {
        model: ModelConfig::standard(Variant::RoFormer, 1, 65),
        train: TrainConfig::default(),
        data: DEFAULT_CORPUS_URL.to_string(),
        out: PathBuf::from("out"),
        config_file_hash: None,
    };
    if let Some(path) = &run.config {
        apply_file(&mut resolved, path)?;
    }
    if let Some(d) = &run.data {
        resolved.data = d.clone();
    }
    if let Some(o) = &run.out {
        resolved.out = o.clone();
    }
    if let Some(s) = run.steps {
        resolved.train.total_steps = s;
    }
    if let Some(e) = run.eval_every {
        resolved.train.eval_every = e;
    }
    if let Some(lr) = run.lr {
        resolved.train.lr0 = lr;
    }
    if let Some(b) = run.batch_size {
        resolved.train.batch_size = b;
    }
    if let Some(d) = run.d_model {
        resolved.model.d_model = d;
    }
    Ok(resolved)
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    s.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))
}

fn check_layers(n: usize) -> Result<usize, CliError> {
    if n == 0 {
        Err(CliError::Usage("--layers must be a positive integer (e.g. 1, 3 or 6)".into()))
    } else {
        Ok(n)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn resolved_config_text(model: &ModelConfig, train: &TrainConfig) -> String {
    let model_pairs: Vec<(String, String)> = model.to_pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
    let train_pairs: Vec<(String, String)> = train.to_pairs().into_iter().map(|(k, v)| (format!("train.{k}"), v)).collect();
    kv::render(model_pairs.iter().chain(&train_pairs).map(|(k, v)| (k.as_str(), v.clone())))
}

/// `<variant>-L<layers>-seed<seed>`.
pub fn run_dir_name(variant: Variant, n_layers: usize, seed: u64) -> String {
    format!("{variant}-L{n_layers}-seed{seed}")
}

/// Manifest text: the resolved configuration followed by provenance. It
/// can be passed back as `--config` to repeat the run.
pub fn render_manifest(resolved: &Resolved, loaded: &LoadedText, seed: u64, run_dir: &Path) -> String {
    let config = resolved_config_text(&resolved.model, &resolved.train);
    let mut out = String::from("# joformer run manifest\n");
    out.push_str(&config);
    out.push_str(&kv::render([
        ("data", resolved.data.clone()),
        ("out", resolved.out.display().to_string()),
        ("seed", seed.to_string()),
        ("run_dir", run_dir.display().to_string()),
        ("data_path", loaded.path.display().to_string()),
        ("data_characters", loaded.text.chars().count().to_string()),
        ("tool_version", TOOL_VERSION.to_string()),
        (
            "config_file_sha256",
            resolved.config_file_hash.clone().unwrap_or_else(|| "none".into()),
        ),
        ("resolved_config_sha256", sha256_hex(config.as_bytes())),
    ]));
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("failed to write {}: {e}", path.display())))
}

/// Runs one seed into `<out>/<variant>-L<layers>-seed<seed>/`.
fn train_one(
    resolved: &Resolved,
    loaded: &LoadedText,
    dataset: &Dataset,
    seed: u64,
    quiet: bool,
) -> Result<(PathBuf, Vec<MetricsRecord>), CliError> {
    let model = &resolved.model;
    let run_dir = resolved.out.join(run_dir_name(model.variant, model.n_layers, seed));
    fs::create_dir_all(&run_dir).map_err(|e| runtime(format!("failed to create {}: {e}", run_dir.display())))?;
    write_file(&run_dir.join("manifest.txt"), render_manifest(resolved, loaded, seed, &run_dir))?;
    let tag = run_dir_name(model.variant, model.n_layers, seed);
    let mut observer = |r: &MetricsRecord| {
        if !quiet && r.split == crate::metrics::Split::Val {
            eprintln!("[{tag}] step {:>6}  val loss {:.4}  ppl {:.3}  lr {:.3e}", r.step, r.loss, r.perplexity, r.lr);
        }
    };
    let outcome = train_run_observed(model, &resolved.train, seed, dataset, &mut observer)?;
    write_metrics_csv(&outcome.log, &run_dir.join("metrics.csv")).map_err(runtime)?;
    write_checkpoint(&run_dir.join("model.ckpt"), model, &outcome.params).map_err(runtime)?;
    Ok((run_dir, outcome.log))
}

pub fn cmd_train(args: &TrainArgs, quiet: bool) -> Result<(), CliError> {
    let mut resolved = resolve(&args.run)?;
    if let Some(v) = &args.variant {
        resolved.model.variant = parse_variant(v)?;
    }
    if let Some(n) = args.layers {
        resolved.model.n_layers = check_layers(n)?;
    }
    check_layers(resolved.model.n_layers)?;
    let seed = args.seed.or_else(|| resolved.train.seeds.first().copied()).unwrap_or(1);
    resolved.train.seeds = vec![seed];
    resolved.model.validate()?;
    resolved.train.validate()?;

    let (loaded, dataset) = load_dataset(&resolved.data)?;
    resolved.model.vocab_size = dataset.vocab.len();
    let (run_dir, log) = train_one(&resolved, &loaded, &dataset, seed, quiet)?;
    let fin = crate::metrics::final_validation(&log).ok_or_else(|| runtime("run produced no validation record"))?;
    println!("run: {}", run_dir.display());
    println!("final validation loss: {:.8e}", fin.loss);
    println!("final validation perplexity: {:.8e}", fin.perplexity);
    Ok(())
}

fn parse_list<T>(text: &str, what: &str, f: impl Fn(&str) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(CliError::Usage(format!("{what} must not be empty")));
    }
    Ok(items)
}

pub fn cmd_compare(args: &CompareArgs, quiet: bool) -> Result<(), CliError> {
    let mut resolved = resolve(&args.run)?;
    let depths = parse_list(&args.depths, "--depths", |s| {
        s.parse::<usize>()
            .map_err(|_| CliError::Usage(format!("invalid depth `{s}`")))
            .and_then(check_layers)
    })?;
    let variants = if args.variants == "all" {
        Variant::ALL.to_vec()
    } else {
        parse_list(&args.variants, "--variants", parse_variant)?
    };
    if let Some(seeds) = &args.seeds {
        resolved.train.seeds = match seeds.parse::<u64>() {
            Ok(n) if !seeds.contains(',') => (1..=n).collect(),
            _ => parse_seeds(seeds).map_err(CliError::Usage)?,
        };
    }
    resolved.train.validate()?;
    let (loaded, dataset) = load_dataset(&resolved.data)?;
    resolved.model.vocab_size = dataset.vocab.len();
    fs::create_dir_all(&resolved.out).map_err(runtime)?;

    let mut all = Vec::new();
    let mut failures = Vec::new();
    for &n_layers in &depths {
        for &variant in &variants {
            for &seed in &resolved.train.seeds.clone() {
                let mut cell = resolved.clone();
                cell.model.variant = variant;
                cell.model.n_layers = n_layers;
                cell.train.seeds = vec![seed];
                match cell.model.validate().map_err(CliError::from).and_then(|_| train_one(&cell, &loaded, &dataset, seed, quiet)) {
                    Ok((_, log)) => all.extend(log),
                    Err(e) => {
                        eprintln!("cell {} failed: {e}", run_dir_name(variant, n_layers, seed));
                        failures.push(run_dir_name(variant, n_layers, seed));
                    }
                }
            }
        }
    }
    write_metrics_csv(&all, &resolved.out.join("metrics.csv")).map_err(runtime)?;
    let summary = summarize_table(&all, &variants, &depths);
    let mut text = format!(
        "Final validation perplexity after {} steps (mean over seeds {})\n\n",
        resolved.train.total_steps,
        format_seeds(&resolved.train.seeds)
    );
    text.push_str(&summary.render());
    write_file(&resolved.out.join("summary.txt"), &text)?;
    print!("{text}");
    for &n in &depths {
        let records: Vec<MetricsRecord> = all.iter().filter(|r| r.n_layers == n).cloned().collect();
        let path = resolved.out.join(format!("val_loss_L{n}.svg"));
        let layers = if n == 1 { "1 layer".to_string() } else { format!("{n} layers") };
        emit_loss_plot(&records, &format!("Validation loss, {layers}"), &path).map_err(runtime)?;
        println!("plot: {}", path.display());
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{} grid cell(s) failed: {}", failures.len(), failures.join(", "))))
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&args.checkpoint).map_err(runtime)?;
    let (_, dataset) = load_dataset(&args.data)?;
    if dataset.vocab.len() != ckpt.config.vocab_size {
        return Err(CliError::Runtime(format!(
            "corpus has {} characters in its vocabulary but the checkpoint expects {}",
            dataset.vocab.len(),
            ckpt.config.vocab_size
        )));
    }
    let seq_len = args.seq_len.unwrap_or(ckpt.config.context_len);
    let e = evaluate(&ckpt.params, &ckpt.config, &dataset.split.val, seq_len)?;
    println!("validation tokens: {}", e.tokens);
    println!("validation loss: {:.8e}", e.loss);
    println!("validation perplexity: {:.8e}", e.perplexity);
    Ok(())
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let reports = verify_all(args.seed);
    print!("{}", render_reports(&reports));
    if let Some(path) = &args.csv {
        write_file(path, reports_to_csv(&reports))?;
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} verification check(s) failed")));
    }
    Ok(())
}

pub fn cmd_plot(args: &PlotArgs) -> Result<(), CliError> {
    let mut records = Vec::new();
    for path in &args.metrics {
        records.extend(read_metrics_csv(path).map_err(runtime)?);
    }
    if records.is_empty() {
        return Err(CliError::Runtime("no metrics records to plot".into()));
    }
    emit_loss_plot(&records, &args.title, &args.out).map_err(runtime)?;
    let (variants, depths) = grid_of(&records);
    println!(
        "plot: {} ({} variant(s), depth(s) {:?})",
        args.out.display(),
        variants.len(),
        depths
    );
    Ok(())
}

//! The `dg` command line: `generate`, `train` and `eval`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
//! Diagnostics go to stderr (level from `DG_LOG`), paths and metrics to
//! stdout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::data::{generate_corpus, load_corpus, write_corpus, GeneratorConfig, Regime};
use crate::evaluation::{evaluate, EvalOptions};
use crate::featurizers::ModelConfig;
use crate::json::{to_canonical, to_canonical_pretty};
use crate::losses::Regularizer;
use crate::similarity::write_heatmap_pgm;
use crate::training::{TrainConfig, TrainError, Trainer};

#[derive(Debug, Parser)]
#[command(name = "dg", version, about = "Dense audio-visual grounding on synthetic data")]
pub struct Cli {
    /// Run seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for generation and evaluation; outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Generate(GenerateArgs),
    /// Warm up the aligners, then train the full model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the eval split of a corpus.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated regularizers to switch off: dis,splice,cal,nonneg,tv.
    #[arg(long, value_delimiter = ',')]
    pub disable_reg: Vec<Regularizer>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write one PGM heatmap (plus JSON sidecar) per (image, class).
    #[arg(long)]
    pub export_heatmaps: bool,
}

/// Everything a run can be configured with; every section is optional in
/// the file. The top-level seed drives all random streams.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Reads a run config (defaults when `path` is `None`) and applies `--seed`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

/// The model input dimensions must match the corpus the run reads.
fn check_model_fits(gen: &GeneratorConfig, model: &ModelConfig) -> Result<(), String> {
    let pairs = [
        ("image_channels", gen.image_channels, model.image_channels),
        ("image height", gen.image_size, model.image_height),
        ("image width", gen.image_size, model.image_width),
        ("audio_channels", gen.audio_channels, model.audio_channels),
        ("clip length", gen.clip_length, model.audio_length),
    ];
    match pairs.iter().find(|(_, a, b)| a != b) {
        Some((name, a, b)) => Err(format!("corpus {name} is {a} but the model expects {b}")),
        None => Ok(()),
    }
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref(), cli.seed)?;
    cfg.generator.validate().map_err(|e| CliError::Config(e.to_string()))?;
    log::info!("generating corpus with seed {}", cfg.seed);
    let corpus = generate_corpus(&cfg.generator, cfg.seed, cli.workers).map_err(runtime)?;
    let manifest = write_corpus(&corpus, &args.out).map_err(runtime)?;
    let lang = manifest.samples.iter().filter(|s| s.regime == Regime::Language).count();
    println!("{}", args.out.join("manifest.json").display());
    println!(
        "samples={} train={} eval={} language={} sound={}",
        manifest.samples.len(),
        corpus.train.len(),
        corpus.eval.len(),
        lang,
        manifest.samples.len() - lang
    );
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref(), cli.seed)?;
    for r in &args.disable_reg {
        if !cfg.train.loss.disabled.contains(r) {
            cfg.train.loss.disabled.push(*r);
        }
    }
    if let Some(w) = args.warmup_steps {
        cfg.train.warmup_steps = w;
    }
    cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let corpus = load_corpus(&args.corpus).map_err(runtime)?;
    check_model_fits(&corpus.config, &cfg.train.model).map_err(CliError::Config)?;
    fs::create_dir_all(&args.out).map_err(io_at(&args.out))?;
    let config_path = args.out.join("config.json");
    let json = to_canonical_pretty(&cfg).expect("config serializes");
    fs::write(&config_path, json + "\n").map_err(io_at(&config_path))?;

    let mut trainer = match &args.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(runtime)?;
            log::info!("resuming from {} at step {}", p.display(), ck.step);
            Trainer::from_checkpoint(ck, cfg.train.clone()).map_err(runtime)?
        }
        None => Trainer::init(cfg.train.clone()).map_err(runtime)?,
    };
    let log_path = args.out.join("train.log.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(args.checkpoint.is_some())
        .write(true)
        .truncate(args.checkpoint.is_none())
        .open(&log_path)
        .map_err(io_at(&log_path))?;
    let every = cfg.train.checkpoint_every;
    let out = args.out.clone();
    let result = trainer.run(&corpus.train, |t, rec| {
        let line = to_canonical(rec).expect("record serializes");
        writeln!(log_file, "{line}").map_err(|e| TrainError::Output(format!("{}: {e}", log_path.display())))?;
        if rec.step % 100 == 0 {
            log::info!("step {} total {:.4} gamma {:.3}", rec.step, rec.total, rec.gamma);
        }
        if every > 0 && rec.step % every == 0 && !t.is_done() {
            let p = out.join(format!("step-{:06}.dgck", rec.step));
            t.checkpoint()
                .save(&p)
                .map_err(|e| TrainError::Output(e.to_string()))?;
            println!("{}", p.display());
        }
        Ok(())
    });
    if let Err(e) = result {
        if let TrainError::NonFiniteLoss { step, batch } = &e {
            log::error!("non-finite loss at step {step}, batch sample ids {batch:?}");
        }
        return Err(runtime(e));
    }
    let final_path = args.out.join("final.dgck");
    let ck = trainer.checkpoint();
    ck.save(&final_path).map_err(runtime)?;
    println!("{}", final_path.display());
    println!("checksum={}", ck.checksum());
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref(), cli.seed)?;
    let ck = Checkpoint::load(&args.checkpoint).map_err(runtime)?;
    let corpus = load_corpus(&args.corpus).map_err(runtime)?;
    check_model_fits(&corpus.config, &ck.params.config).map_err(CliError::Runtime)?;
    if corpus.eval.is_empty() {
        return Err(CliError::Runtime(format!("{} has no eval samples", args.corpus.display())));
    }
    let (report, queries) = evaluate(
        &ck.params,
        &ck.checksum(),
        &corpus.config,
        &corpus.eval,
        &cfg.eval,
        cli.workers,
    )
    .map_err(runtime)?;
    fs::create_dir_all(&args.out).map_err(io_at(&args.out))?;
    report.write(&args.out).map_err(runtime)?;
    if args.export_heatmaps {
        let dir = args.out.join("heatmaps");
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        for q in &queries {
            let p = dir.join(format!("s{:04}_c{:02}.pgm", q.sample, q.class_id));
            write_heatmap_pgm(&p, &q.heat).map_err(io_at(&p))?;
        }
    }
    println!("{}", args.out.join("report.json").display());
    for (metric, name, value) in report.rows() {
        if metric != "ap" {
            println!("{metric}.{name}={value}");
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = String>) -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DG_LOG", "info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

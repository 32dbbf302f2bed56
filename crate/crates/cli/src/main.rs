//! `sparamdx`: synthesize S-parameter datasets, train the three classifiers,
//! evaluate them under noise and embed their latent spaces.
//!
//! Every failure ends with one JSON line on stderr,
//! `{"error": <kind>, "code": <exit code>, "message": ...}`, and exit codes
//! 2 (configuration), 3 (data or files) or 4 (numerical failure).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparamdx_core::datagen::ChannelSelection;
use sparamdx_core::harness::{label_name, report_text, MetricKind};
use sparamdx_core::models::ArchKind;
use sparamdx_core::pipeline::{self, FailureKind, PipelineError, RunConfig};
use sparamdx_core::touchstone::{parse_touchstone, TouchstoneError};

const CONFIG_ENV: &str = "SPARAMDX_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "sparamdx", version, about = "S-parameter fault diagnosis pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; unset fields take their defaults.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Single worker thread for all parallel sections.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Architectures to train or load (overrides `architectures`).
    #[arg(long = "arch", global = true)]
    arch: Vec<ArchKind>,
    /// Channel selections (overrides `channels`): S11+S21, S11 or S21.
    #[arg(long = "channels", global = true)]
    channels: Vec<ChannelSelection>,
    /// Cross-validation folds (at least 2).
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// Epoch cap per fold; early-stop patience is clamped below it.
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    /// Append the clean held-out set as an extra evaluation column.
    #[arg(long, global = true)]
    clean: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the clean training pool and held-out base set.
    Synth {
        /// Also write one Touchstone file per class from the held-out set.
        #[arg(long)]
        s2p: Option<PathBuf>,
    },
    /// Draw the noisy test sets from the held-out base set.
    Noise,
    /// Cross-validate every configured architecture and channel selection.
    Train,
    /// Evaluate the trained folds on the noisy test sets.
    Eval,
    /// t-SNE of the configured model's latents, with silhouette scores.
    Embed,
    /// Classify Touchstone files with a trained checkpoint.
    Classify {
        /// Checkpoint to use; defaults to fold 0 of the CNN on S11+S21.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Run every stage and write all artifacts.
    Report,
    /// Print the effective configuration as TOML.
    Config,
}

/// Failure with its class and the message for the JSON error line.
#[derive(Debug)]
struct Failure {
    kind: FailureKind,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { kind: FailureKind::Config, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure { kind: FailureKind::Data, message: message.into() }
    }

    fn code(&self) -> u8 {
        match self.kind {
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Numeric => 4,
        }
    }

    fn report(&self) -> String {
        serde_json::json!({ "error": self.kind.name(), "code": self.code(), "message": self.message }).to_string()
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure { kind: e.kind(), message: e.to_string() }
    }
}

impl From<TouchstoneError> for Failure {
    fn from(e: TouchstoneError) -> Self {
        Failure::data(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(o) = &common.output {
        cfg.output = o.clone();
    }
    if !common.arch.is_empty() {
        cfg.architectures = common.arch.clone();
    }
    if !common.channels.is_empty() {
        cfg.channels = common.channels.clone();
    }
    if let Some(k) = common.folds {
        cfg.folds = k;
    }
    if let Some(n) = common.max_epochs {
        cfg.train.max_epochs = n;
        cfg.train.early_stop_patience = cfg.train.early_stop_patience.min(n.saturating_sub(1));
    }
    cfg.include_clean |= common.clean;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.common.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Failure::config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Config => {
            print!("{}", toml::to_string_pretty(&cfg).map_err(|e| Failure::config(e.to_string()))?);
        }
        Command::Synth { s2p } => {
            pipeline::write_run_file(&cfg)?;
            let ds = pipeline::synth(&cfg)?;
            pipeline::save_datasets(&cfg, &ds)?;
            for (name, d) in [("train", &ds.train), ("test_base", &ds.test_base)] {
                println!("{name}\t{} samples\tsha256 {}", d.len(), d.checksum());
            }
            if let Some(dir) = s2p {
                for p in pipeline::export_s2p(&cfg, &ds.test_base, &dir)? {
                    println!("wrote {}", p.display());
                }
            }
        }
        Command::Noise => {
            let ds = pipeline::load_datasets(&cfg)?;
            let sets = pipeline::noise_sets(&cfg, &ds.test_base)?;
            pipeline::save_noise_sets(&cfg, &sets)?;
            for (p, d) in cfg.noise.iter().zip(&sets) {
                println!("{} dB\t{} samples\tsha256 {}", p.power_db, d.len(), d.checksum());
            }
        }
        Command::Train => {
            let ds = pipeline::load_datasets(&cfg)?;
            let experiments = pipeline::train_all(&cfg, &ds.train, |e| {
                let vals: Vec<String> = e
                    .models
                    .iter()
                    .filter_map(|m| m.outcome.as_ref())
                    .map(|o| format!("{:.4}", o.history[o.best_epoch - 1].val_acc))
                    .collect();
                eprintln!("{}: fold val acc {}", pipeline::experiment_name(e.arch, e.channels), vals.join(" "));
            })?;
            pipeline::save_experiments(&cfg, &experiments)?;
            println!("checkpoints in {}", cfg.paths().models().display());
        }
        Command::Eval => {
            let ds = pipeline::load_datasets(&cfg)?;
            let noisy = pipeline::load_noise_sets(&cfg)?;
            let experiments = pipeline::load_experiments(&cfg)?;
            let cells = pipeline::evaluate(&cfg, &experiments, &noisy, &ds.test_base)?;
            pipeline::save_report(&cfg, &cells)?;
            print!("{}", report_text(&cells));
        }
        Command::Embed => {
            let ds = pipeline::load_datasets(&cfg)?;
            let noisy = pipeline::load_noise_sets(&cfg)?;
            let cfg_embed = RunConfig { architectures: vec![cfg.embed.model], ..cfg.clone() };
            let experiments = pipeline::load_experiments(&cfg_embed)?;
            let results = pipeline::embed_all(&cfg, &experiments, &ds.test_base, &noisy)?;
            pipeline::save_embeddings(&cfg, &results)?;
            print!("{}", pipeline::silhouette_csv(&results));
        }
        Command::Classify { model, files } => {
            let path = model.unwrap_or_else(|| cfg.paths().checkpoint(ArchKind::Cnn, ChannelSelection::Both, 0));
            let model = pipeline::load_model(&path)?;
            for f in &files {
                classify_file(&model, f)?;
            }
        }
        Command::Report => {
            let out = pipeline::run_all(&cfg, |line| eprintln!("{line}"))?;
            print!("{}", report_text(&out.cells));
            for c in out.cells.iter().filter(|c| c.noise_db.is_none()) {
                let (m, _) = c.mean_std(MetricKind::Accuracy);
                println!("clean accuracy {} {}: {m:.4}", c.model.name(), c.channels);
            }
            if !out.embeddings.is_empty() {
                print!("{}", pipeline::silhouette_csv(&out.embeddings));
            }
            println!("artifacts in {}", cfg.output.display());
        }
    }
    Ok(())
}

fn classify_file(model: &sparamdx_core::harness::TrainedModel, path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let rec = parse_touchstone(&text)?;
    let (class, probs) = pipeline::classify(model, &rec)?;
    let all: Vec<String> = probs.iter().map(|p| format!("{p:.4}")).collect();
    println!("{}\t{}\t{:.4}\t{}", path.display(), label_name(class), probs[class], all.join(","));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.code())
        }
    }
}

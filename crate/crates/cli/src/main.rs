use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sdssl::ablate::{self, Variant};
use sdssl::checkpoint::load_checkpoint;
use sdssl::config::{apply_override, ExperimentConfig};
use sdssl::data::cifar::{self, CifarKind, FetchOptions};
use sdssl::eval::EvalKind;
use sdssl::experiment::{evaluate_checkpoint, load_datasets, EvalTarget};
use sdssl::train;
use sdssl::{Error, Result};

const CACHE_ENV: &str = "SDSSL_CACHE_DIR";
const OUTPUT_ENV: &str = "SDSSL_OUTPUT_DIR";

/// Self-distilled SSL on small vision transformers.
#[derive(Parser)]
#[command(name = "sdssl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoints and the resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `dotted.path=value`, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Classifier used by `multiexit`.
        #[arg(long, value_enum, default_value = "knn")]
        probe: Probe,
        /// Dataset to evaluate on (default: the one the checkpoint was trained on).
        #[arg(long)]
        dataset: Option<String>,
        /// Overrides applied on top of the checkpoint's config (eval.*, data.*).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Report directory (default: `eval/` next to the checkpoint).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the ablation variants with a shared seed and compare k-NN accuracy.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Comma-separated variants; references are added automatically.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "no_anneal,no_pred,pred_only,same_view"
        )]
        suite: Vec<String>,
    },
    /// Download (or import) and verify a CIFAR dataset.
    DatasetFetch {
        #[arg(long)]
        name: String,
        /// Use a local copy of the archive instead of downloading.
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Rebuild the cache even if it verifies.
        #[arg(long)]
        force: bool,
        /// Only check an existing cache.
        #[arg(long, conflicts_with_all = ["archive", "force"])]
        verify: bool,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Knn,
    Linear,
    Multiexit,
    Metrics,
}

#[derive(Clone, Copy, ValueEnum)]
enum Probe {
    Knn,
    Linear,
}

impl From<Probe> for EvalKind {
    fn from(p: Probe) -> Self {
        match p {
            Probe::Knn => EvalKind::Knn,
            Probe::Linear => EvalKind::Linear,
        }
    }
}

fn env_path(name: &str) -> Option<PathBuf> {
    std::env::var_os(name)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn quoted(key: &str, path: &Path) -> String {
    format!(
        "{key}={}",
        toml::Value::String(path.to_string_lossy().into_owned())
    )
}

/// Environment roots first, so explicit `--set` flags win.
fn with_env(set: &[String]) -> Vec<String> {
    let mut all = Vec::new();
    if let Some(p) = env_path(CACHE_ENV) {
        all.push(quoted("data.cache_dir", &p));
    }
    if let Some(p) = env_path(OUTPUT_ENV) {
        all.push(quoted("output_dir", &p));
    }
    all.extend(set.iter().cloned());
    all
}

fn cmd_train(config: Option<PathBuf>, set: &[String], resume: Option<PathBuf>) -> Result<()> {
    let overrides = with_env(set);
    let (cfg, state) = match resume {
        Some(ckpt) => {
            let state = load_checkpoint(&ckpt)?;
            let cfg = match config {
                Some(p) => ExperimentConfig::load(Some(&p), &overrides)?,
                None => overlay(&state.config, &overrides)?,
            };
            (cfg, Some(state))
        }
        None => (ExperimentConfig::load(config.as_deref(), &overrides)?, None),
    };
    let (train_set, _) = load_datasets(&cfg)?;
    log::info!(
        "training {}{} on {} ({} images) into {}",
        if cfg.sdssl_enabled { "sd-" } else { "" },
        cfg.framework.as_str(),
        cfg.data.dataset,
        train_set.len(),
        cfg.output_dir.display()
    );
    let out = train::run(&cfg, &train_set, &cfg.output_dir, state)?;
    println!("{}", out.checkpoint.display());
    Ok(())
}

/// `base` with `overrides` applied and revalidated.
fn overlay(base: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = toml::Table::try_from(base).expect("config serializes");
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    ExperimentConfig::from_table(table)
}

fn cmd_eval(
    checkpoint: &Path,
    kind: Kind,
    probe: Probe,
    dataset: Option<String>,
    set: &[String],
    output: Option<PathBuf>,
) -> Result<()> {
    let mut state = load_checkpoint(checkpoint)?;
    let mut overrides = with_env(set);
    if let Some(d) = dataset {
        overrides.push(format!("data.dataset={}", toml::Value::String(d)));
    }
    let cfg = overlay(&state.config, &overrides)?;
    if cfg.framework != state.config.framework
        || cfg.encoder != state.config.encoder
        || cfg.heads != state.config.heads
        || cfg.sdssl_enabled != state.config.sdssl_enabled
    {
        return Err(Error::Format {
            found: Some(sdssl::checkpoint::FORMAT_VERSION),
            expected: sdssl::checkpoint::FORMAT_VERSION,
            message: "overrides change the model stored in the checkpoint".into(),
        });
    }
    state.config = cfg;
    let (train_set, test_set) = load_datasets(&state.config)?;
    let target = match kind {
        Kind::Knn => EvalTarget::Final(EvalKind::Knn),
        Kind::Linear => EvalTarget::Final(EvalKind::Linear),
        Kind::Multiexit => EvalTarget::MultiExit(probe.into()),
        Kind::Metrics => EvalTarget::Metrics,
    };
    let out_dir =
        output.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    let label = format!(
        "{}{}",
        if state.config.sdssl_enabled {
            "sd-"
        } else {
            ""
        },
        state.config.framework.as_str()
    );
    for f in evaluate_checkpoint(&state, &train_set, &test_set, target, &label, &out_dir)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_ablate(config: Option<PathBuf>, set: &[String], suite: &[String]) -> Result<()> {
    let cfg = ExperimentConfig::load(config.as_deref(), &with_env(set))?;
    let variants = suite
        .iter()
        .map(|s| Variant::parse(s.trim()))
        .collect::<Result<Vec<_>>>()?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let out = ablate::run_ablation(&cfg, &variants, &train_set, &test_set, &cfg.output_dir)?;
    print!("{}", out.report.markdown());
    Ok(())
}

fn cmd_fetch(
    name: &str,
    archive: Option<PathBuf>,
    force: bool,
    verify: bool,
    cache_dir: Option<PathBuf>,
) -> Result<()> {
    let kind = CifarKind::parse(name)?;
    let cache = cache_dir
        .or_else(|| env_path(CACHE_ENV))
        .unwrap_or_else(|| PathBuf::from("data"));
    let handles = if verify {
        cifar::verify(kind, &cache)?
    } else {
        cifar::fetch(kind, &cache, &FetchOptions { archive, force })?
    };
    for h in handles {
        println!(
            "{} {} {} {}",
            h.name,
            h.split.as_str(),
            h.num_samples,
            h.checksum
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            set,
            resume,
        } => cmd_train(config, &set, resume),
        Command::Eval {
            checkpoint,
            kind,
            probe,
            dataset,
            set,
            output,
        } => cmd_eval(&checkpoint, kind, probe, dataset, &set, output),
        Command::Ablate { config, set, suite } => cmd_ablate(config, &set, &suite),
        Command::DatasetFetch {
            name,
            archive,
            force,
            verify,
            cache_dir,
        } => cmd_fetch(&name, archive, force, verify, cache_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

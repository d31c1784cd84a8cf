use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hybrep::checkpoint;
use hybrep::cost::{self, ReportFormat};
use hybrep::pipeline::{self, RunConfig};
use hybrep::stream::Dataset;
use hybrep::{selftest, train, BranchSet};

const SEED_ENV: &str = "HYBRIDNET_SEED";

#[derive(Debug, Parser)]
#[command(name = "hybrep", version, about = "Hybrid quantized/pruned networks with online adaptation")]
struct Cli {
    /// Seed for every random draw; falls back to $HYBRIDNET_SEED, then the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the hybrid and quantized-only models and write checkpoints.
    Train {
        config: PathBuf,
        /// Output directory (defaults to [output].dir, then the working directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream the configured drifting data through a trained checkpoint.
    Stream {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Quantized-only checkpoint scored alongside, frozen.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on a CSV file (label then pixels per row)
    /// or on the held-out set of a config.
    Eval { checkpoint: PathBuf, data: PathBuf },
    /// Relative compute cost report.
    Cost {
        config: PathBuf,
        #[arg(long, default_value = "tsv")]
        format: ReportFormat,
        /// Take keep ratios from the gates of a trained checkpoint instead of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Pretrain, stream and cost in one go; prints the summary as JSON.
    Run { config: PathBuf },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<hybrep::Error> for Failure {
    fn from(e: hybrep::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<hybrep::Error>() {
            Some(inner) if inner.is_config() => Failure::Config(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not a seed"))?)),
        Err(_) => Ok(None),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let text = read_text(path).map_err(config_err)?;
    let cfg = RunConfig::from_toml(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(config_err)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn load_checkpoint(path: &Path) -> Result<hybrep::HybridModel> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn train_cmd(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let dir = out.or_else(|| cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    let trained = pipeline::train_models(cfg)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    checkpoint::save(&trained.hybrid, &dir.join("hybrid.ckpt"))?;
    checkpoint::save(&trained.quant_only, &dir.join("quant_only.ckpt"))?;
    println!("model\theldout\tfinal_loss");
    for (name, acc, rep) in [
        ("hybrid", trained.hybrid_heldout, &trained.hybrid_report),
        ("quant_only", trained.quant_only_heldout, &trained.quant_only_report),
    ] {
        let loss = rep.epochs.last().map_or(f64::NAN, |e| e.loss);
        println!("{name}\t{acc:.4}\t{loss:.4}");
    }
    log::info!("checkpoints written to {}", dir.display());
    Ok(())
}

fn stream_cmd(cfg: &RunConfig, ckpt: &Path, reference: Option<&Path>) -> Result<()> {
    let hybrid = load_checkpoint(ckpt)?;
    if hybrid.branches != BranchSet::Hybrid {
        bail!("{} is not a hybrid checkpoint", ckpt.display());
    }
    let reference = reference.map(load_checkpoint).transpose()?;
    let summary = pipeline::run_stream(cfg, &hybrid, reference.as_ref())?;
    println!("start\tframes\tonline\tfrozen\tquant_only");
    for s in &summary.segments {
        let q = s.quant_only.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{}\t{}\t{:.4}\t{:.4}\t{q}", s.start, s.frames, s.online, s.frozen);
    }
    log::info!("{} frames, {} updates", summary.frames, summary.updates);
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut model = load_checkpoint(ckpt)?;
    let text = read_text(data).map_err(config_err)?;
    let set = match data.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let s = &model.arch.input;
            Dataset::from_csv(&text, [s[0], s[1], s[2]]).map_err(config_err)?
        }
        Some("toml") => {
            let cfg = RunConfig::from_toml(&text).map_err(config_err)?;
            let cfg = seed.map_or(cfg.clone(), |s| cfg.with_seed(s));
            pipeline::pretraining_sets(&cfg).1
        }
        _ => return Err(config_err(anyhow::anyhow!("{}: expected a .csv or .toml file", data.display()))),
    };
    let acc = train::evaluate(&mut model, &set)?;
    println!("examples\taccuracy");
    println!("{}\t{acc:.4}", set.len());
    Ok(())
}

fn cost_cmd(path: &Path, format: ReportFormat, ckpt: Option<&Path>) -> Result<(), Failure> {
    let report = match ckpt {
        Some(p) => pipeline::model_cost(&load_checkpoint(p)?)?,
        None => {
            // only the architecture matters here, so the stream section need not agree with it
            let cfg = RunConfig::parse(&read_text(path).map_err(config_err)?)
                .with_context(|| format!("in {}", path.display()))
                .map_err(config_err)?;
            cfg.arch.resolve().map_err(config_err)?;
            cfg.model.validate().map_err(config_err)?;
            cost::report_for_architecture(&cfg.arch, BranchSet::Hybrid)?
        }
    };
    print!("{}", cost::render_report(&report, format));
    println!("RC_total\t{:.4}", report.rc_total);
    Ok(())
}

fn selftest_cmd(seed: u64) -> Result<(), Failure> {
    let results = selftest::run(seed);
    let failed = results.iter().filter(|c| !c.passed).count();
    for c in &results {
        println!("{}\t{}\t{}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow::anyhow!("{failed} of {} checks failed", results.len())));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let seed = match cli.seed {
        Some(s) => Some(s),
        None => env_seed().map_err(config_err)?,
    };
    match cli.cmd {
        Command::Train { config, out } => {
            let cfg = load_config(&config, seed)?;
            Ok(train_cmd(&cfg, out)?)
        }
        Command::Stream {
            config,
            checkpoint,
            reference,
        } => {
            let cfg = load_config(&config, seed)?;
            Ok(stream_cmd(&cfg, &checkpoint, reference.as_deref())?)
        }
        Command::Eval { checkpoint, data } => eval_cmd(&checkpoint, &data, seed),
        Command::Cost {
            config,
            format,
            checkpoint,
        } => cost_cmd(&config, format, checkpoint.as_deref()),
        Command::Selftest => selftest_cmd(seed.unwrap_or(0)),
        Command::Run { config } => {
            let cfg = load_config(&config, seed)?;
            let summary = pipeline::run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).context("serializing summary")?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

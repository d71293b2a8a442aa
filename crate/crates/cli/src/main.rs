use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use brainenc_core::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use brainenc_core::config::{load_json, RunConfig};
use brainenc_core::datamodel::{load_dataset, Dataset, Split};
use brainenc_core::ensemble::{run_ensemble, EnsembleSpec};
use brainenc_core::evaluation::{score_report, ScoreReport};
use brainenc_core::prediction::PredictionSet;
use brainenc_core::synthgen::{generate_to_dir, GenSpec};
use brainenc_core::trainer::{
    finetune, predict, pretrain, PredictOptions, TrainOutcome, PREDICT_BATCH,
};
use brainenc_core::{selftest, ErrorKind};
use clap::{Parser, Subcommand};
use log::info;

const RUN_ROOT_ENV: &str = "BRAINENC_RUN_ROOT";
const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Parser)]
#[command(
    name = "brainenc",
    version,
    about = "Subject-conditioned image-to-fMRI encoding pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    GenData {
        /// Generator spec (JSON); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shared model on every subject.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; falls back to `data.root` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fine-tune one subject, optionally from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        subject: usize,
        /// Checkpoint or run directory to start from; trains from scratch when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write predictions of a checkpoint on a split.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = PREDICT_BATCH)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Score a prediction set and write a report.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend prediction sets.
    Ensemble {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying the default weight mode.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a score report as a table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run the gradient-check and oracle suites.
    Selftest {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
}

/// Failure that maps to the numerical exit code without a core error.
#[derive(Debug)]
struct SuiteFailed(usize);

impl std::fmt::Display for SuiteFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} self-check(s) failed", self.0)
    }
}

impl std::error::Error for SuiteFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<SuiteFailed>().is_some() {
        return 4;
    }
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<brainenc_core::Error>())
    {
        Some(e) => match e.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        },
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Relative run directories are placed under `$BRAINENC_RUN_ROOT` when set.
fn run_dir(p: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Resolves a relative input that does not exist as given against the run root.
fn run_input(p: &Path) -> PathBuf {
    if p.exists() {
        p.to_path_buf()
    } else {
        run_dir(p)
    }
}

/// Accepts either a checkpoint directory or a run directory holding one.
fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    let p = run_input(p);
    let dir = if p.join(CHECKPOINT_FILE).exists() {
        p
    } else {
        p.join(CHECKPOINT_DIR)
    };
    Ok(Checkpoint::load(&dir)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(cli: Option<&Path>, cfg: &RunConfig) -> Result<(PathBuf, Dataset)> {
    let root = match (cli, &cfg.data.root) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => p.clone(),
        (None, None) => bail!(brainenc_core::Error::Config(
            "no dataset given: pass --data or set data.root".into()
        )),
    };
    let ds = load_dataset(&root)?;
    Ok((root, ds))
}

struct RunRecord<'a> {
    command: &'a str,
    data: &'a Path,
    subject: Option<usize>,
    init: Option<&'a Path>,
}

/// Writes the resolved config, run metadata, the epoch log and the checkpoint.
fn write_run(
    dir: &Path,
    cfg: &RunConfig,
    rec: RunRecord<'_>,
    outcome: &TrainOutcome,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("config.json"), cfg)?;
    let h = &outcome.checkpoint.header;
    write_json(
        &dir.join("run.json"),
        &serde_json::json!({
            "command": rec.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.train.seed,
            "fold": cfg.train.fold,
            "data": rec.data,
            "subject": rec.subject,
            "init": rec.init,
            "model_id": h.model_id,
            "best_epoch": h.epoch,
            "best_val_m": h.val_m,
            "initial_loss": outcome.initial_loss,
            "stopped_early": outcome.stopped_early,
        }),
    )?;
    let log_path = dir.join("log.jsonl");
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    for rec in &outcome.history {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
    }
    outcome.checkpoint.save(dir.join(CHECKPOINT_DIR))?;
    info!(
        "{}: best epoch {} val m {:.5}, written to {}",
        h.model_id,
        h.epoch,
        h.val_m,
        dir.display()
    );
    Ok(())
}

fn load_config(path: &Path, workers: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(w) = workers {
        cfg.train.workers = w;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, out } => {
            let spec: GenSpec = match spec {
                Some(p) => load_json(&p)?,
                None => GenSpec::default(),
            };
            let (ds, _) = generate_to_dir(&spec, &out)?;
            info!("wrote {} subjects to {}", ds.n_subjects(), out.display());
        }
        Command::Pretrain {
            config,
            data,
            out,
            workers,
        } => {
            let cfg = load_config(&config, workers)?;
            let (root, ds) = load_data(data.as_deref(), &cfg)?;
            let outcome = pretrain(&ds, &cfg.recipe())?;
            let rec = RunRecord {
                command: "pretrain",
                data: &root,
                subject: None,
                init: None,
            };
            write_run(&run_dir(&out), &cfg, rec, &outcome)?;
        }
        Command::Finetune {
            config,
            data,
            subject,
            init,
            out,
            workers,
        } => {
            let cfg = load_config(&config, workers)?;
            let (root, ds) = load_data(data.as_deref(), &cfg)?;
            let source = init.as_deref().map(load_checkpoint).transpose()?;
            if source.is_none() {
                info!("no --init given, fine-tuning from scratch");
            }
            let outcome = finetune(&ds, subject, &cfg.recipe(), source.as_ref())?;
            let rec = RunRecord {
                command: "finetune",
                data: &root,
                subject: Some(subject),
                init: init.as_deref(),
            };
            write_run(&run_dir(&out), &cfg, rec, &outcome)?;
        }
        Command::Predict {
            ckpt,
            data,
            split,
            out,
            batch_size,
            workers,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let set = predict(
                &ckpt,
                &ds,
                split,
                PredictOptions {
                    batch_size,
                    workers,
                },
            )?;
            set.save(&out)?;
            info!(
                "{} predictions for {} subject(s) written to {}",
                split,
                set.subjects.len(),
                out.display()
            );
        }
        Command::Evaluate {
            pred,
            data,
            split,
            out,
        } => {
            let set = PredictionSet::load(&pred)?;
            let ds = load_dataset(&data)?;
            let report = score_report(&set, &ds, split)?;
            write_json(&out, &report)?;
            print!("{}", report.to_table());
        }
        Command::Ensemble { spec, out, config } => {
            let default_mode = match config {
                Some(p) => RunConfig::load(&p)?.ensemble.mode,
                None => Default::default(),
            };
            let parsed: EnsembleSpec = load_json(&spec)?;
            let base = spec.parent().unwrap_or(Path::new("."));
            let set = run_ensemble(&parsed, base, default_mode)?;
            set.save(&out)?;
            for m in &set.meta.members {
                info!("member {}: weights {:?}", m.model_id, m.weights);
            }
        }
        Command::Report { input } => {
            let report: ScoreReport = load_json(&input)?;
            print!("{}", report.to_table());
        }
        Command::Selftest { seeds, instances } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let mut results = selftest::gradient_suite(&seeds)?;
            results.extend(selftest::oracle_suite(instances, 7)?);
            let mut failed = 0;
            for r in &results {
                let tag = if r.passed() { "PASS" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!(
                    "{tag} {:<32} worst {:.3e} < {:.0e} ({} cases)",
                    r.name, r.worst, r.tolerance, r.cases
                );
            }
            if failed > 0 {
                return Err(SuiteFailed(failed).into());
            }
        }
    }
    Ok(())
}

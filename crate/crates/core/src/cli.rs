//! `segdec` command line: train, eval, ablate and synth.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! run aborts (divergence, unreadable data, bad checkpoint).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{DataSource, RunConfig};
use crate::data::{load_dataset, synth_generate, write_mask_folders, DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::eval::{aggregate_folds, class_table, evaluate, EvalReport};
use crate::model::TwoStageModel;
use crate::train::{ablate, ablation_table, parse_grid, train_with};

/// Overrides `output.dir` when it is a relative path: outputs go below this root.
pub const OUT_ROOT_ENV: &str = "SEGDEC_OUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_ABORT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "segdec", version, about = "Train and evaluate a two-stage surface defect detector")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.eta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Shorthand for `--set run.deterministic=true`.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Shorthand for `--set output.dir=DIR`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints, history and the resolved config.
    Train {
        /// Shorthand for `--set train.epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on every test split (one per fold).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate once per row of a toggle grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Write a synthetic dataset in the mask_folders layout.
    Synth {
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_runtime_abort() {
                EXIT_ABORT
            } else {
                EXIT_USAGE
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let extra_epochs = match cli.command {
        Command::Train { epochs } => epochs,
        _ => None,
    };
    let cfg = resolve(&cli.common, extra_epochs)?;
    if cfg.deterministic && std::env::var_os("RAYON_NUM_THREADS").is_none() {
        // The thread pool is built lazily, so this takes effect for the whole run.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    match &cli.command {
        Command::Train { .. } => cmd_train(&cfg),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint),
        Command::Ablate { grid } => cmd_ablate(&cfg, grid),
        Command::Synth { force } => cmd_synth(&cfg, *force),
    }
}

/// Config file, then `--set` overrides in order, then the shorthand flags.
pub fn resolve(common: &Common, epochs: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(root) = std::env::var_os(OUT_ROOT_ENV) {
        if cfg.output_dir.is_relative() {
            cfg.output_dir = PathBuf::from(root).join(&cfg.output_dir);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), cfg.to_kv())?;
    Ok(())
}

/// Train, optional validation and test splits for a run.
pub struct Splits {
    pub train: DatasetSplit,
    pub validation: Option<DatasetSplit>,
    pub tests: Vec<DatasetSplit>,
}

fn load_key(cfg: &RunConfig, key: &str, path: &Path) -> Result<DatasetSplit> {
    load_dataset(path, cfg.data.layout).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{key} = {}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_splits(cfg: &RunConfig, need_train: bool) -> Result<Splits> {
    match cfg.data.source {
        DataSource::Synth => {
            let all = synth_generate(&cfg.synth, cfg.train.seed);
            let (train, test) = all.holdout(cfg.data.test_fraction)?;
            let (train, validation) = if cfg.data.validation_fraction > 0.0 {
                let (t, v) = train.holdout(cfg.data.validation_fraction)?;
                (t, Some(v))
            } else {
                (train, None)
            };
            let tests = if test.is_empty() { Vec::new() } else { vec![test] };
            Ok(Splits { train, validation, tests })
        }
        DataSource::Folder => {
            let train = match (&cfg.data.train, need_train) {
                (Some(p), true) => load_key(cfg, "data.train", p)?,
                (None, true) => return Err(Error::Config("data.train is required for data.source = folder".into())),
                _ => DatasetSplit::default(),
            };
            let validation = cfg.data.validation.as_ref().map(|p| load_key(cfg, "data.validation", p)).transpose()?;
            let tests = cfg.data.test.iter().map(|p| load_key(cfg, "data.test", p)).collect::<Result<_>>()?;
            Ok(Splits { train, validation, tests })
        }
    }
}

fn samples(split: &DatasetSplit) -> Vec<ImageSample> {
    split.samples().cloned().collect()
}

/// Evaluates every split; writes `<stem>.txt`/`<stem>_pr.tsv` for a single
/// split, per-fold files plus `<stem>_summary.txt` for several.
fn evaluate_splits(model: &TwoStageModel, tests: &[DatasetSplit], dir: &Path, stem: &str) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(tests.len());
    for (i, split) in tests.iter().enumerate() {
        let report = evaluate(model, &samples(split))?;
        let name = if tests.len() == 1 { stem.to_string() } else { format!("{stem}_fold{}", i + 1) };
        report.write(dir, &name)?;
        println!("{name} ({}): ap={:.4} fp={} fn={}", split.name, report.ap, report.fp, report.fn_);
        reports.push(report);
    }
    if reports.len() > 1 {
        let summary = aggregate_folds(&reports)?;
        std::fs::write(dir.join(format!("{stem}_summary.txt")), summary.to_kv())?;
        println!("{stem} summary: mean_ap={:.4} fp_sum={} fn_sum={}", summary.mean_ap, summary.fp_sum, summary.fn_sum);
    }
    let rows: Vec<(String, EvalReport)> = tests.iter().map(|s| s.name.clone()).zip(reports.iter().cloned()).collect();
    std::fs::write(dir.join(format!("{stem}_classes.tsv")), class_table(&rows))?;
    Ok(reports)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    write_resolved(cfg, out, "resolved.cfg")?;
    let splits = load_splits(cfg, true)?;
    let model = TwoStageModel::new(&cfg.model_config(), cfg.train.seed, DType::F32)?;
    let (model, history) = train_with(model, &splits.train, splits.validation.as_ref(), &cfg.train, |ev| {
        if ev.is_best {
            save_checkpoint(ev.model, ev.record.epoch + 1, &out.join("checkpoint_best.ckpt"))?;
        }
        if ev.is_last {
            save_checkpoint(ev.model, ev.record.epoch + 1, &out.join("checkpoint_last.ckpt"))?;
        }
        Ok(())
    })?;
    let epoch = history.best_epoch.map(|e| e + 1).unwrap_or(cfg.train.epochs);
    save_checkpoint(&model, epoch, &out.join("model.ckpt"))?;
    history.write(out)?;
    if !splits.tests.is_empty() {
        evaluate_splits(&model, &splits.tests, out, "test")?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint, Some(&cfg.model_config()))?;
    let splits = load_splits(cfg, false)?;
    if splits.tests.is_empty() {
        return Err(Error::Config("data.test is required for eval".into()));
    }
    write_resolved(cfg, &cfg.output_dir, "eval_resolved.cfg")?;
    evaluate_splits(&ckpt.model, &splits.tests, &cfg.output_dir, "eval")?;
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, grid_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(grid_path)
        .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", grid_path.display())))?;
    let grid = parse_grid(&text)?;
    let splits = load_splits(cfg, true)?;
    let test = splits.tests.first().ok_or_else(|| Error::Config("ablation needs a test split (data.test)".into()))?;
    write_resolved(cfg, &cfg.output_dir, "ablate_resolved.cfg")?;
    let model_cfg = cfg.model_config();
    let rows = ablate(|| TwoStageModel::new(&model_cfg, cfg.train.seed, DType::F32), &splits.train, test, &cfg.train, &grid)?;
    let table = ablation_table(&rows);
    std::fs::write(cfg.output_dir.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<()> {
    cfg.synth.validate(cfg.model.downsample_factor)?;
    let dir = &cfg.output_dir;
    let non_empty = dir.is_dir() && std::fs::read_dir(dir)?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::Config(format!("output directory {} is not empty (use --force)", dir.display())));
        }
        for sub in ["pos", "pos_masks", "neg"] {
            if dir.join(sub).is_dir() {
                std::fs::remove_dir_all(dir.join(sub))?;
            }
        }
    }
    let split = synth_generate(&cfg.synth, cfg.train.seed);
    write_mask_folders(&split, dir)?;
    write_resolved(cfg, dir, "synth_resolved.cfg")?;
    println!("wrote {} positives and {} negatives to {}", split.positives.len(), split.negatives.len(), dir.display());
    Ok(())
}

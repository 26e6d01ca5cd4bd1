//! Command-line front end.
//!
//! Every invocation creates a fresh run directory `<out>/<timestamp>-seed<N>`
//! and writes the resolved config, reports and checkpoints inside it.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SweepAxis};
use crate::data::{generate_split, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{
    backbone_checkpoint, backbone_digest, census, delta_checkpoint, finetune_with, load_backbone, load_tuned, pretrain_with, sweep,
};
use crate::harness::{EpochRow, CSV_HEADER};
use crate::tuning::TuningMode;
use crate::vit::VitModel;

#[derive(Debug, Parser)]
#[command(name = "adaptformer", version, about = "Adapter fine-tuning of vision transformers on synthetic tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tuning mode: full, linear, vpt or adaptformer.
    #[arg(long)]
    pub mode: Option<String>,
    /// Training seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a backbone on the source task.
    Pretrain(Common),
    /// Tune a pre-trained backbone on the configured task.
    Finetune(Common),
    /// One fine-tuning run per value of an ablation axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// mid_dim, scale, layers, prompt_tokens or frames.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Print parameter counts for the configured mode.
    Census(Common),
    /// Write the configured task's train and eval splits as dataset files.
    Dataset(Common),
    /// Write eval-mode CLS features and labels of a dataset.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        /// Backbone or delta checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the checkpoint config's eval split.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(mode) = &common.mode {
        cfg = cfg.with_override("mode", mode)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `<out>/<UTC timestamp>-seed<N>`, adding a counter suffix rather
/// than reusing an existing directory.
pub fn create_run_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stem = format!("{}-seed{seed}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"));
    for i in 0.. {
        let name = if i == 0 { stem.clone() } else { format!("{stem}-{i}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn backbone_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.backbone.as_deref().ok_or_else(|| Error::config("missing key \"backbone\" (path of a pretrain checkpoint)"))
}

fn log_epoch(row: &EpochRow) {
    eprintln!("epoch {:>3}  lr {:.5}  loss {:.4}  top1 {:.2}", row.epoch, row.lr, row.train_loss, row.eval_top1);
}

fn execute(cmd: &Command) -> Result<PathBuf> {
    match cmd {
        Command::Pretrain(c) => cmd_pretrain(c),
        Command::Finetune(c) => cmd_finetune(c),
        Command::Sweep { common, axis, values } => cmd_sweep(common, axis.as_deref(), values.as_deref()),
        Command::Census(c) => cmd_census(c),
        Command::Dataset(c) => cmd_dataset(c),
        Command::ExportFeatures { common, checkpoint, dataset } => cmd_export_features(common, checkpoint, dataset.as_deref()),
    }
}

fn cmd_pretrain(common: &Common) -> Result<PathBuf> {
    let cfg = resolve(common)?;
    let dir = create_run_dir(&common.out, cfg.train.seed)?;
    write_text(&dir.join("config.txt"), &cfg.to_flat())?;
    let (model, report) = pretrain_with(&cfg, log_epoch)?;
    report.write_csv(&dir.join("pretrain.csv"))?;
    let digest = backbone_checkpoint(&model, &cfg).save(&dir.join("backbone.ckpt"))?;
    println!("source top1 {:.2}", report.final_top1());
    println!("backbone.ckpt sha256 {digest}");
    Ok(dir)
}

fn cmd_finetune(common: &Common) -> Result<PathBuf> {
    let cfg = resolve(common)?;
    let bpath = backbone_path(&cfg)?.to_path_buf();
    let (backbone, _) = load_backbone(&bpath)?;
    let dir = create_run_dir(&common.out, cfg.train.seed)?;
    write_text(&dir.join("config.txt"), &cfg.to_flat())?;
    let before = backbone_digest(&backbone);
    let (model, report) = finetune_with(&backbone, &cfg, log_epoch)?;
    report.write_csv(&dir.join("finetune.csv"))?;
    let after = backbone_digest(&model);
    if cfg.tuning != TuningMode::Full && before != after {
        return Err(Error::contract(format!("frozen backbone changed: {before} -> {after}")));
    }
    let digest = delta_checkpoint(&model, &cfg, &bpath).save(&dir.join("delta.ckpt"))?;
    println!("{} top1 {:.2} (initial {:.2}) tunable {}", cfg.tuning.name(), report.final_top1(), report.initial_top1, report.tunable_params());
    if cfg.tuning == TuningMode::Full {
        println!("backbone sha256 {after}");
    } else {
        println!("frozen backbone sha256 {after} unchanged");
    }
    println!("delta.ckpt sha256 {digest}");
    Ok(dir)
}

fn cmd_sweep(common: &Common, axis: Option<&str>, values: Option<&[String]>) -> Result<PathBuf> {
    let cfg = resolve(common)?;
    let axis: SweepAxis = match axis {
        Some(a) => a.parse()?,
        None => cfg.sweep_axis.ok_or_else(|| Error::config("missing key \"sweep_axis\" (or --axis)"))?,
    };
    let values: Vec<String> = values.map_or_else(|| cfg.sweep_values.clone(), <[String]>::to_vec);
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value (sweep_values or --values)"));
    }
    let (backbone, _) = load_backbone(backbone_path(&cfg)?)?;
    let dir = create_run_dir(&common.out, cfg.train.seed)?;
    write_text(&dir.join("config.txt"), &cfg.to_flat())?;
    let merged = dir.join("sweep.csv");
    let mut text = format!("{},{CSV_HEADER}\n", axis.name());
    let mut err = None;
    sweep(&backbone, &cfg, axis, &values, |p| {
        for line in p.report.to_csv().lines().skip(1) {
            let _ = writeln!(text, "{},{line}", p.value);
        }
        if let Err(e) = write_text(&merged, &text) {
            err.get_or_insert(e);
        }
        println!(
            "{}={} top1 {:.2} tunable {} tail10 range {:.2}",
            axis.name(),
            p.value,
            p.report.final_top1(),
            p.report.tunable_params(),
            p.report.tail_range(10)
        );
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(dir)
}

fn cmd_census(common: &Common) -> Result<PathBuf> {
    let cfg = resolve(common)?;
    let c = census(&cfg.vit, &cfg.tuning);
    let dir = create_run_dir(&common.out, cfg.train.seed)?;
    write_text(&dir.join("config.txt"), &cfg.to_flat())?;
    let text = format!(
        "mode,backbone,head,extra,tunable\n{},{},{},{},{}\n",
        cfg.tuning.name(),
        c.backbone,
        c.head,
        c.extra,
        c.tunable
    );
    write_text(&dir.join("census.csv"), &text)?;
    print!("{text}");
    Ok(dir)
}

fn cmd_dataset(common: &Common) -> Result<PathBuf> {
    let cfg = resolve(common)?;
    let (train, eval) = generate_split(&cfg.task(), cfg.train_samples, cfg.eval_samples)?;
    let dir = create_run_dir(&common.out, cfg.train.seed)?;
    write_text(&dir.join("config.txt"), &cfg.to_flat())?;
    train.write_binary(&dir.join("train.afds"))?;
    eval.write_binary(&dir.join("eval.afds"))?;
    println!("train {} eval {} samples of length {}", train.len(), eval.len(), train.sample_len());
    Ok(dir)
}

/// One row per sample: the label, then the CLS feature vector.
pub fn features_csv(model: &VitModel, data: &Dataset, batch_size: usize) -> Result<String> {
    let d = model.config().embed_dim;
    let mut text = String::from("label");
    (0..d).for_each(|i| {
        let _ = write!(text, ",f{i}");
    });
    text.push('\n');
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk);
        let feats = model.features(&images)?;
        for (row, label) in feats.data().chunks(d).zip(labels) {
            let _ = write!(text, "{label}");
            row.iter().for_each(|x| {
                let _ = write!(text, ",{x:?}");
            });
            text.push('\n');
        }
    }
    Ok(text)
}

fn cmd_export_features(common: &Common, checkpoint: &Path, dataset: Option<&Path>) -> Result<PathBuf> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, cfg) = if ck.metadata.contains_key(crate::experiment::META_BACKBONE) {
        load_tuned(checkpoint)?
    } else {
        load_backbone(checkpoint)?
    };
    let data = match dataset {
        Some(p) => Dataset::read_binary(p)?,
        None => generate_split(&cfg.task(), cfg.train_samples, cfg.eval_samples)?.1,
    };
    if data.sample_len() != model.config().sample_len() {
        return Err(Error::config(format!(
            "dataset samples have length {}, model expects {}",
            data.sample_len(),
            model.config().sample_len()
        )));
    }
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let dir = create_run_dir(&common.out, seed)?;
    write_text(&dir.join("config.txt"), &cfg.to_flat())?;
    let text = features_csv(&model, &data, cfg.train.batch_size)?;
    write_text(&dir.join("features.csv"), &text)?;
    println!("{} rows of dimension {}", data.len(), model.config().embed_dim);
    Ok(dir)
}

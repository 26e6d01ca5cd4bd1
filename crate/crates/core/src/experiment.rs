//! End-to-end runs: pre-training, transfer, sweeps and parameter census.

use std::path::Path;

use crate::checkpoint::{Checkpoint, Subset};
use crate::config::{RunConfig, SweepAxis};
use crate::data::{generate_split, Dataset, Shift};
use crate::error::{Error, Result};
use crate::harness::{train_with, EpochRow, RunReport};
use crate::tuning::TuningMode;
use crate::vit::{VitConfig, VitModel};

/// Parameter counts of a configuration, computed from layouts alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCensus {
    pub backbone: usize,
    pub head: usize,
    /// Adapter or prompt parameters.
    pub extra: usize,
    /// Parameters the mode's freeze policy leaves trainable.
    pub tunable: usize,
}

pub fn census(vit: &VitConfig, mode: &TuningMode) -> ParamCensus {
    let mut layout = vit.layout();
    let extra = mode.extra_layout(vit);
    let extra_n = extra.numel();
    layout.extend(extra);
    ParamCensus {
        backbone: vit.backbone_layout().numel(),
        head: vit.head_layout().numel(),
        extra: extra_n,
        tunable: mode.freeze_policy().tunable_count(&layout),
    }
}

/// Train and held-out splits of the config's task.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    generate_split(&cfg.task(), cfg.train_samples, cfg.eval_samples)
}

/// Trains a backbone from scratch on the unshifted source task with every
/// parameter trainable.
pub fn pretrain(cfg: &RunConfig) -> Result<(VitModel, RunReport)> {
    pretrain_with(cfg, |_| {})
}

pub fn pretrain_with(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRow)) -> Result<(VitModel, RunReport)> {
    let mut source = cfg.clone();
    source.shift = Shift::None;
    source.vit.num_classes = Shift::None.num_classes();
    source.tuning = TuningMode::Full;
    let (train, eval) = datasets(&source)?;
    let mut model = VitModel::new(source.vit.clone(), cfg.train.seed)?;
    let report = train_with(&mut model, &train, &eval, &source.train, on_epoch)?;
    Ok((model, report))
}

/// Copy of `backbone` prepared for the config's task: frames, a fresh head,
/// the head-norm flag and the tuning mode with its freeze policy.
pub fn prepare(backbone: &VitModel, cfg: &RunConfig) -> Result<VitModel> {
    let (a, b) = (backbone.config(), &cfg.vit);
    let arch = |c: &VitConfig| (c.image_size, c.patch_size, c.channels, c.embed_dim, c.depth, c.num_heads, c.mlp_ratio, c.seq_extra);
    if arch(a) != arch(b) {
        return Err(Error::config(format!("backbone architecture {:?} does not match config {:?}", arch(a), arch(b))));
    }
    let mut model = backbone.clone();
    if model.config().num_frames != b.num_frames {
        model.set_num_frames(b.num_frames)?;
    }
    model.set_head_norm(b.head_norm);
    model.reset_head(b.num_classes, cfg.train.seed)?;
    model.set_tuning(cfg.tuning.clone(), cfg.train.seed)?;
    Ok(model)
}

/// Tunes a copy of `backbone` on the config's task.
pub fn finetune(backbone: &VitModel, cfg: &RunConfig) -> Result<(VitModel, RunReport)> {
    finetune_with(backbone, cfg, |_| {})
}

pub fn finetune_with(backbone: &VitModel, cfg: &RunConfig, on_epoch: impl FnMut(&EpochRow)) -> Result<(VitModel, RunReport)> {
    let mut model = prepare(backbone, cfg)?;
    let (train, eval) = datasets(cfg)?;
    let report = train_with(&mut model, &train, &eval, &cfg.train, on_epoch)?;
    Ok((model, report))
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: String,
    pub config: RunConfig,
    pub report: RunReport,
}

/// One fine-tuning run per value of `axis`.
pub fn sweep(
    backbone: &VitModel,
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    mut on_point: impl FnMut(&SweepPoint),
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let needs = match axis {
        SweepAxis::MidDim | SweepAxis::Scale | SweepAxis::Layers => Some("adaptformer"),
        SweepAxis::PromptTokens => Some("vpt"),
        SweepAxis::Frames => None,
    };
    if let Some(mode) = needs {
        if cfg.tuning.name() != mode {
            return Err(Error::config(format!("sweep axis {} needs mode {mode}, not {}", axis.name(), cfg.tuning.name())));
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for value in values {
        let point_cfg = cfg.with_override(axis.key(), value)?;
        let (_, report) = finetune(backbone, &point_cfg)?;
        let point = SweepPoint { value: value.clone(), config: point_cfg, report };
        on_point(&point);
        out.push(point);
    }
    Ok(out)
}

/// Metadata key holding the resolved config a checkpoint was trained with.
pub const META_CONFIG: &str = "config";
/// Metadata key naming the stored [`Subset`].
pub const META_SUBSET: &str = "subset";
/// Metadata key of a delta checkpoint pointing at its backbone file.
pub const META_BACKBONE: &str = "backbone";
/// Metadata key of a delta checkpoint holding its backbone's digest.
pub const META_BACKBONE_DIGEST: &str = "backbone_sha256";

fn subset_name(s: Subset) -> &'static str {
    match s {
        Subset::All => "all",
        Subset::Backbone => "backbone",
        Subset::Adapters => "adapters",
        Subset::Head => "head",
        Subset::Delta => "delta",
    }
}

/// Hex SHA-256 over the backbone entries only.
pub fn backbone_digest(model: &VitModel) -> String {
    Checkpoint::from_model(model, Subset::Backbone).digest()
}

/// Full snapshot of a pre-trained model with its config.
pub fn backbone_checkpoint(model: &VitModel, cfg: &RunConfig) -> Checkpoint {
    Checkpoint::from_model(model, Subset::All)
        .with_meta(META_CONFIG, cfg.to_flat())
        .with_meta(META_SUBSET, subset_name(Subset::All))
}

/// Non-backbone entries of a tuned model, tied to the backbone file they
/// were trained on.
pub fn delta_checkpoint(model: &VitModel, cfg: &RunConfig, backbone_path: &Path) -> Checkpoint {
    Checkpoint::from_model(model, Subset::Delta)
        .with_meta(META_CONFIG, cfg.to_flat())
        .with_meta(META_SUBSET, subset_name(Subset::Delta))
        .with_meta(META_BACKBONE, backbone_path.display().to_string())
        .with_meta(META_BACKBONE_DIGEST, backbone_digest(model))
}

fn stored_config(ck: &Checkpoint, path: &Path) -> Result<RunConfig> {
    let text = ck.metadata.get(META_CONFIG).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: format!("no {META_CONFIG:?} metadata"),
    })?;
    RunConfig::parse(text)
}

/// Rebuilds the model a backbone checkpoint was saved from.
pub fn load_backbone(path: &Path) -> Result<(VitModel, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = stored_config(&ck, path)?;
    if ck.metadata.get(META_SUBSET).map(String::as_str) != Some("all") {
        return Err(Error::Format { path: path.to_path_buf(), reason: "not a backbone checkpoint".into() });
    }
    let mut model = VitModel::new(cfg.vit.clone(), cfg.train.seed)?;
    ck.load_into(&mut model, Subset::All)?;
    Ok((model, cfg))
}

/// Rebuilds a tuned model from a delta checkpoint and the backbone it names.
/// The backbone's digest must match the one recorded at save time.
pub fn load_tuned(path: &Path) -> Result<(VitModel, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = stored_config(&ck, path)?;
    let backbone_path = ck.metadata.get(META_BACKBONE).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: format!("no {META_BACKBONE:?} metadata"),
    })?;
    let (backbone, _) = load_backbone(Path::new(backbone_path))?;
    compose(&backbone, &ck, &cfg)
}

/// Applies a delta checkpoint on top of `backbone`.
pub fn compose(backbone: &VitModel, delta: &Checkpoint, cfg: &RunConfig) -> Result<(VitModel, RunConfig)> {
    if let Some(want) = delta.metadata.get(META_BACKBONE_DIGEST) {
        let got = backbone_digest(backbone);
        if *want != got {
            return Err(Error::CheckpointMismatch(format!("delta expects backbone {want}, got {got}")));
        }
    }
    let mut model = prepare(backbone, cfg)?;
    delta.load_into(&mut model, Subset::Delta)?;
    Ok((model, cfg.clone()))
}

/// Small configurations that train on one core in seconds.
pub mod desk {
    use super::*;
    use crate::tuning::AdapterConfig;

    pub fn vit() -> VitConfig {
        VitConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            ..VitConfig::default()
        }
    }

    /// Source-task pre-training.
    pub fn pretrain() -> RunConfig {
        let mut c = RunConfig { vit: vit(), ..RunConfig::default() };
        c.train.epochs = 10;
        c.train.warmup_epochs = 1;
        c.train.batch_size = 32;
        c.train.base_lr = 0.5;
        c.train.recalibrate_bn = true;
        c.train_samples = 1024;
        c.eval_samples = 256;
        c
    }

    /// Transfer to the regrouped-label task with the mode's base rate.
    pub fn transfer(mode: TuningMode) -> RunConfig {
        let mut c = pretrain();
        c.shift = Shift::LabelRegroup;
        c.vit.num_classes = Shift::LabelRegroup.num_classes();
        c.train.epochs = 30;
        c.train.base_lr = base_lr(&mode);
        c.tuning = mode;
        c.data_seed = 1;
        c
    }

    /// Base rate per mode, picked from `{0.5, 4}`.
    pub fn base_lr(mode: &TuningMode) -> f64 {
        match mode {
            TuningMode::AdaptFormer(_) | TuningMode::Prompt(_) => 4.0,
            TuningMode::Linear | TuningMode::Full => 0.5,
        }
    }

    pub fn adapter() -> AdapterConfig {
        AdapterConfig { mid_dim: 16, ..AdapterConfig::default() }
    }
}

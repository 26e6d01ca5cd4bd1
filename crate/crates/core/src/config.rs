//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! rejected, as are adapter keys outside `adaptformer` mode and prompt keys
//! outside `vpt` mode. [`RunConfig::to_flat`] writes the fully resolved form,
//! which parses back to the same value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Shift, TaskSpec};
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::tuning::{AdapterConfig, PromptConfig, TuningMode};
use crate::vit::VitConfig;

const MODEL_KEYS: &[&str] = &[
    "image_size", "patch_size", "channels", "embed_dim", "depth", "num_heads", "mlp_ratio", "seq_extra", "frames", "head_norm", "num_classes",
];
const TRAIN_KEYS: &[&str] = &["epochs", "warmup_epochs", "batch_size", "base_lr", "momentum", "weight_decay", "recalibrate_bn", "seed"];
const DATA_KEYS: &[&str] = &["shift", "noise", "train_samples", "eval_samples", "data_seed"];
const RUN_KEYS: &[&str] = &["mode", "backbone", "sweep_axis", "sweep_values"];
pub const ADAPTER_KEYS: &[&str] = &["mid_dim", "scale", "insertion", "adapter_layers", "adapter_dropout", "adapter_init"];
pub const PROMPT_KEYS: &[&str] = &["prompt_tokens", "prompt_depth"];

/// Every accepted key.
pub fn known_keys() -> impl Iterator<Item = &'static str> {
    [MODEL_KEYS, TRAIN_KEYS, DATA_KEYS, RUN_KEYS, ADAPTER_KEYS, PROMPT_KEYS].into_iter().flatten().copied()
}

/// Parses `key = value` lines into a map.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !known_keys().any(|known| known == k) {
            return Err(Error::config(format!("line {}: unknown key {k:?}", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(format!("line {}: key {k:?} given twice", n + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    MidDim,
    Scale,
    Layers,
    PromptTokens,
    Frames,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::MidDim => "mid_dim",
            SweepAxis::Scale => "scale",
            SweepAxis::Layers => "adapter_layers",
            SweepAxis::PromptTokens => "prompt_tokens",
            SweepAxis::Frames => "frames",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Layers => "layers",
            other => other.key(),
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid_dim" => Ok(SweepAxis::MidDim),
            "scale" => Ok(SweepAxis::Scale),
            "layers" => Ok(SweepAxis::Layers),
            "prompt_tokens" => Ok(SweepAxis::PromptTokens),
            "frames" => Ok(SweepAxis::Frames),
            other => Err(Error::config(format!(
                "unknown sweep axis {other:?} (expected mid_dim, scale, layers, prompt_tokens or frames)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub vit: VitConfig,
    pub tuning: TuningMode,
    pub train: TrainConfig,
    pub shift: Shift,
    pub noise: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub data_seed: u64,
    /// Pre-trained backbone checkpoint to start from.
    pub backbone: Option<PathBuf>,
    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let shift = Shift::None;
        Self {
            vit: VitConfig { num_classes: shift.num_classes(), ..VitConfig::default() },
            tuning: TuningMode::Full,
            train: TrainConfig::default(),
            shift,
            noise: 0.1,
            train_samples: 512,
            eval_samples: 256,
            data_seed: 0,
            backbone: None,
            sweep_axis: None,
            sweep_values: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("{key}: invalid value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// `all` or a 1-based inclusive range `a-b` (a single `a` means `a-a`).
pub fn parse_layer_range(value: &str) -> Result<Option<(usize, usize)>> {
    if value == "all" {
        return Ok(None);
    }
    let (a, b) = value.split_once('-').unwrap_or((value, value));
    Ok(Some((parse("adapter_layers", a.trim())?, parse("adapter_layers", b.trim())?)))
}

fn format_layer_range(r: Option<(usize, usize)>) -> String {
    r.map_or_else(|| "all".to_string(), |(a, b)| format!("{a}-{b}"))
}

impl RunConfig {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !known_keys().any(|known| known == k.as_str())) {
            return Err(Error::config(format!("unknown key {k:?}")));
        }
        let mut c = RunConfig::default();
        let get = |k: &str| map.get(k).map(String::as_str);
        let mode = get("mode").unwrap_or("full");
        if mode != "adaptformer" {
            if let Some(k) = ADAPTER_KEYS.iter().find(|k| map.contains_key(**k)) {
                return Err(Error::config(format!("{k} only applies to mode adaptformer, not {mode}")));
            }
        }
        if mode != "vpt" {
            if let Some(k) = PROMPT_KEYS.iter().find(|k| map.contains_key(**k)) {
                return Err(Error::config(format!("{k} only applies to mode vpt, not {mode}")));
            }
        }

        let v = &mut c.vit;
        for (key, slot) in [
            ("image_size", &mut v.image_size),
            ("patch_size", &mut v.patch_size),
            ("channels", &mut v.channels),
            ("embed_dim", &mut v.embed_dim),
            ("depth", &mut v.depth),
            ("num_heads", &mut v.num_heads),
            ("mlp_ratio", &mut v.mlp_ratio),
            ("seq_extra", &mut v.seq_extra),
            ("frames", &mut v.num_frames),
        ] {
            if let Some(val) = get(key) {
                *slot = parse(key, val)?;
            }
        }
        if let Some(val) = get("head_norm") {
            v.head_norm = parse_bool("head_norm", val)?;
        }
        if let Some(val) = get("recalibrate_bn") {
            c.train.recalibrate_bn = parse_bool("recalibrate_bn", val)?;
        }

        let t = &mut c.train;
        for (key, slot) in [("epochs", &mut t.epochs), ("warmup_epochs", &mut t.warmup_epochs), ("batch_size", &mut t.batch_size)] {
            if let Some(val) = get(key) {
                *slot = parse(key, val)?;
            }
        }
        for (key, slot) in [("base_lr", &mut t.base_lr), ("momentum", &mut t.momentum), ("weight_decay", &mut t.weight_decay)] {
            if let Some(val) = get(key) {
                *slot = parse(key, val)?;
            }
        }
        if let Some(val) = get("seed") {
            t.seed = parse("seed", val)?;
        }

        if let Some(val) = get("shift") {
            c.shift = val.parse()?;
        }
        c.vit.num_classes = match get("num_classes") {
            Some(val) => parse("num_classes", val)?,
            None => c.shift.num_classes(),
        };
        if let Some(val) = get("noise") {
            c.noise = parse("noise", val)?;
        }
        if let Some(val) = get("train_samples") {
            c.train_samples = parse("train_samples", val)?;
        }
        if let Some(val) = get("eval_samples") {
            c.eval_samples = parse("eval_samples", val)?;
        }
        if let Some(val) = get("data_seed") {
            c.data_seed = parse("data_seed", val)?;
        }
        c.backbone = get("backbone").filter(|s| !s.is_empty()).map(PathBuf::from);
        if let Some(val) = get("sweep_axis") {
            c.sweep_axis = Some(val.parse()?);
        }
        if let Some(val) = get("sweep_values") {
            c.sweep_values = val.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }

        c.tuning = match mode {
            "full" => TuningMode::Full,
            "linear" => TuningMode::Linear,
            "vpt" => {
                let mut p = PromptConfig::default();
                if let Some(val) = get("prompt_tokens") {
                    p.num_tokens = parse("prompt_tokens", val)?;
                }
                if let Some(val) = get("prompt_depth") {
                    p.depth = val.parse()?;
                }
                TuningMode::Prompt(p)
            }
            "adaptformer" => {
                let mut a = AdapterConfig::default();
                if let Some(val) = get("mid_dim") {
                    a.mid_dim = parse("mid_dim", val)?;
                }
                if let Some(val) = get("scale") {
                    a.scale = parse("scale", val)?;
                }
                if let Some(val) = get("insertion") {
                    a.insertion = val.parse()?;
                }
                if let Some(val) = get("adapter_layers") {
                    a.layer_range = parse_layer_range(val)?;
                }
                if let Some(val) = get("adapter_dropout") {
                    a.dropout = parse("adapter_dropout", val)?;
                }
                if let Some(val) = get("adapter_init") {
                    a.init = val.parse()?;
                }
                TuningMode::AdaptFormer(a)
            }
            other => {
                return Err(Error::config(format!("unknown mode {other:?} (expected full, linear, vpt or adaptformer)")))
            }
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(&parse_flat(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.train.validate()?;
        self.tuning.validate(&self.vit)?;
        self.task().validate()?;
        if self.vit.image_size < 4 || self.vit.image_size % 2 != 0 {
            return Err(Error::config("image_size must be even and at least 4"));
        }
        if self.eval_samples == 0 {
            return Err(Error::config("eval_samples must be positive"));
        }
        Ok(())
    }

    /// Resolved key/value pairs, omitting keys that do not apply to the mode.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let v = &self.vit;
        put("image_size", v.image_size.to_string());
        put("patch_size", v.patch_size.to_string());
        put("channels", v.channels.to_string());
        put("embed_dim", v.embed_dim.to_string());
        put("depth", v.depth.to_string());
        put("num_heads", v.num_heads.to_string());
        put("mlp_ratio", v.mlp_ratio.to_string());
        put("seq_extra", v.seq_extra.to_string());
        put("frames", v.num_frames.to_string());
        put("head_norm", v.head_norm.to_string());
        if v.num_classes != self.shift.num_classes() {
            put("num_classes", v.num_classes.to_string());
        }
        let t = &self.train;
        put("epochs", t.epochs.to_string());
        put("warmup_epochs", t.warmup_epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("base_lr", t.base_lr.to_string());
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("recalibrate_bn", t.recalibrate_bn.to_string());
        put("seed", t.seed.to_string());
        put("shift", self.shift.to_string());
        put("noise", self.noise.to_string());
        put("train_samples", self.train_samples.to_string());
        put("eval_samples", self.eval_samples.to_string());
        put("data_seed", self.data_seed.to_string());
        put("mode", self.tuning.name().to_string());
        if let Some(b) = &self.backbone {
            put("backbone", b.display().to_string());
        }
        if let Some(axis) = self.sweep_axis {
            put("sweep_axis", axis.name().to_string());
            put("sweep_values", self.sweep_values.join(","));
        }
        match &self.tuning {
            TuningMode::AdaptFormer(a) => {
                put("mid_dim", a.mid_dim.to_string());
                put("scale", a.scale.to_string());
                put("insertion", a.insertion.to_string());
                put("adapter_layers", format_layer_range(a.layer_range));
                put("adapter_dropout", a.dropout.to_string());
                put("adapter_init", a.init.to_string());
            }
            TuningMode::Prompt(p) => {
                put("prompt_tokens", p.num_tokens.to_string());
                put("prompt_depth", p.depth.to_string());
            }
            TuningMode::Full | TuningMode::Linear => {}
        }
        m
    }

    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Replaces one key, re-validating the result.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut m = self.to_map();
        if key == "mode" && value != self.tuning.name() {
            m.retain(|k, _| !ADAPTER_KEYS.contains(&k.as_str()) && !PROMPT_KEYS.contains(&k.as_str()));
        }
        m.insert(key.to_string(), value.to_string());
        Self::from_map(&m)
    }

    /// The synthetic task described by this config.
    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            image_size: self.vit.image_size,
            channels: self.vit.channels,
            frames: self.vit.num_frames,
            num_samples: self.train_samples,
            shift: self.shift,
            noise: self.noise,
            seed: self.data_seed,
        }
    }
}

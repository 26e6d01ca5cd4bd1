//! Plain Vision Transformer encoder with pre-LN blocks.
//!
//! Images are `[frames, H, W, channels]` row-major slices. Every frame is cut
//! into `P×P` patches in raster order, each patch flattened as
//! `(row, col, channel)`, and the frames' patch tokens are concatenated along
//! the token axis. A sample's token matrix is
//! `[cls; extra tokens; patches] + pos_embed`, so a video of `F` frames yields
//! `F·N + seq_extra` tokens.
//!
//! A batch is carried through the encoder as one `[B·T, d]` matrix. Linear
//! layers run on the stacked matrix; attention runs per sample and head.

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Gradients, Graph, Var};
use crate::params::{ParamGroup, ParamLayout, ParamStore};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::tuning::{
    adapter_branch, adapter_param_name, deep_prompt_name, fuse_parallel, fuse_sequential, init_adapters,
    prepend_prompts, AdapterVars, FreezePolicy, Insertion, PromptDepth, TuningMode, SHALLOW_PROMPT_NAME,
};

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub const RUNNING_MEAN_NAME: &str = "head_norm.running_mean";
pub const RUNNING_VAR_NAME: &str = "head_norm.running_var";

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    /// Height and width in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    /// Number of encoder blocks.
    pub depth: usize,
    pub num_heads: usize,
    /// MLP hidden width is `mlp_ratio · embed_dim`.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Prepended non-patch tokens; the first is CLS.
    pub seq_extra: usize,
    pub num_frames: usize,
    /// Affine-free batch norm between the CLS feature and the head.
    pub head_norm: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 10,
            seq_extra: 1,
            num_frames: 1,
            head_norm: true,
        }
    }
}

impl VitConfig {
    /// ViT-B/16 geometry at 224 px.
    pub fn vit_base(num_classes: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            num_classes,
            seq_extra: 1,
            num_frames: 1,
            head_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("seq_extra", self.seq_extra),
            ("num_frames", self.num_frames),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// `N = HW / P²`.
    pub fn patches_per_frame(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn num_patches(&self) -> usize {
        self.num_frames * self.patches_per_frame()
    }

    /// Tokens entering the encoder, excluding prompts.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + self.seq_extra
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Scalars per input sample.
    pub fn sample_len(&self) -> usize {
        self.num_frames * self.image_size * self.image_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn backbone_layout(&self) -> ParamLayout {
        let d = self.embed_dim;
        let hidden = self.mlp_hidden();
        let mut l = ParamLayout::new();
        l.push("patch_embed.weight", &[self.patch_dim(), d]);
        l.push("patch_embed.bias", &[d]);
        l.push("cls_token", &[1, d]);
        if self.seq_extra > 1 {
            l.push("extra_tokens", &[self.seq_extra - 1, d]);
        }
        l.push("pos_embed", &[self.num_tokens(), d]);
        for b in 0..self.depth {
            let p = |s: &str| format!("blocks.{b}.{s}");
            l.push(p("norm1.weight"), &[d]);
            l.push(p("norm1.bias"), &[d]);
            for proj in ["q", "k", "v", "proj"] {
                l.push(p(&format!("attn.{proj}.weight")), &[d, d]);
                l.push(p(&format!("attn.{proj}.bias")), &[d]);
            }
            l.push(p("norm2.weight"), &[d]);
            l.push(p("norm2.bias"), &[d]);
            l.push(p("mlp.fc1.weight"), &[d, hidden]);
            l.push(p("mlp.fc1.bias"), &[hidden]);
            l.push(p("mlp.fc2.weight"), &[hidden, d]);
            l.push(p("mlp.fc2.bias"), &[d]);
        }
        l.push("norm.weight", &[d]);
        l.push("norm.bias", &[d]);
        l
    }

    pub fn head_layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        l.push("head.weight", &[self.embed_dim, self.num_classes]);
        l.push("head.bias", &[self.num_classes]);
        l
    }

    /// Backbone and head, in canonical order.
    pub fn layout(&self) -> ParamLayout {
        let mut l = self.backbone_layout();
        l.extend(self.head_layout());
        l
    }

    /// Closed-form backbone parameter count.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.embed_dim;
        let hidden = self.mlp_hidden();
        let embed = self.patch_dim() * d + d + self.seq_extra * d + self.num_tokens() * d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d);
        embed + self.depth * block + 2 * d
    }

    pub fn head_param_count(&self) -> usize {
        self.embed_dim * self.num_classes + self.num_classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Graph handles of every parameter, indexed like the model's store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AdapterIds {
    down: Linear,
    up: Linear,
}

#[derive(Debug, Clone)]
struct BlockIds {
    norm1: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: Linear,
    fc1: Linear,
    fc2: Linear,
    adapter: Option<AdapterIds>,
    prompt: Option<usize>,
}

#[derive(Debug, Clone)]
struct Ids {
    patch: Linear,
    cls: usize,
    extra: Option<usize>,
    pos: usize,
    blocks: Vec<BlockIds>,
    norm: Linear,
    head: Linear,
    shallow_prompt: Option<usize>,
}

/// Attention weights of one block, bound on a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub proj: (Var, Var),
}

fn linear(g: &mut Graph, x: Var, w: (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w.0)?;
    g.add_bias(y, w.1)
}

/// Multi-head self-attention over a stacked batch `x[B·T, d]`.
///
/// Per sample and head: `softmax(Q Kᵀ / √d_head) V`; heads are concatenated
/// and projected. The residual is left to the caller.
pub fn mhsa(g: &mut Graph, x: Var, batch: usize, heads: usize, w: &AttentionVars) -> Result<Var> {
    let [rows, d] = *g.shape(x) else {
        return Err(Error::InvalidShape { shape: g.shape(x).to_vec(), reason: "mhsa expects [B·T, d]" });
    };
    if batch == 0 || rows % batch != 0 || d % heads != 0 {
        return Err(Error::contract(format!("mhsa: {rows} rows, batch {batch}, d {d}, heads {heads}")));
    }
    let t = rows / batch;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(g, x, w.q)?;
    let k = linear(g, x, w.k)?;
    let v = linear(g, x, w.v)?;
    let mut samples = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, b * t, t, h * dh, dh)?;
            let kh = g.slice(k, b * t, t, h * dh, dh)?;
            let vh = g.slice(v, b * t, t, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.mul_scalar(scores, scale);
            let att = g.softmax_rows(scores)?;
            head_out.push(g.matmul(att, vh)?);
        }
        samples.push(if heads == 1 { head_out[0] } else { g.concat_cols(&head_out)? });
    }
    let merged = if batch == 1 { samples[0] } else { g.concat_rows(&samples)? };
    linear(g, merged, w.proj)
}

/// Result of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub bound: Bound,
    /// `[B, C]`
    pub logits: Var,
    /// Final-norm CLS vectors `[B, d]`, before the head norm.
    pub features: Var,
    /// Present in train phase when the head norm is enabled.
    pub batch_stats: Option<BatchStats>,
}

#[derive(Debug, Clone)]
pub struct VitModel {
    config: VitConfig,
    tuning: TuningMode,
    params: ParamStore,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    ids: Ids,
}

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.uniform_in(-a, a)).collect()
}

fn init_backbone_param(rng: &mut Rng, name: &str, shape: &[usize]) -> Result<Tensor> {
    let numel = shape.iter().product();
    let data = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name == "norm.weight" {
        vec![1.0; numel]
    } else if name.ends_with(".bias") {
        vec![0.0; numel]
    } else if matches!(name, "cls_token" | "extra_tokens" | "pos_embed") {
        (0..numel).map(|_| rng.normal_with(0.0, 0.02)).collect()
    } else {
        xavier(rng, shape[0], shape[1])
    };
    Tensor::new(shape.to_vec(), data)
}

fn init_head(config: &VitConfig, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = Rng::stream(seed, Stream::Head);
    let (d, c) = (config.embed_dim, config.num_classes);
    let w = Tensor::new(vec![d, c], (0..d * c).map(|_| rng.normal_with(0.0, 0.01)).collect())?;
    Ok((w, Tensor::zeros(&[c])))
}

impl VitModel {
    /// Fresh backbone and head, all parameters trainable.
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, Stream::Backbone);
        let mut params = ParamStore::new();
        for (name, shape) in config.backbone_layout().iter() {
            params.insert(name, init_backbone_param(&mut rng, name, shape)?)?;
        }
        let (hw, hb) = init_head(&config, seed)?;
        params.insert("head.weight", hw)?;
        params.insert("head.bias", hb)?;
        let d = config.embed_dim;
        let mut model = Self {
            ids: Ids::build(&config, &TuningMode::Full, &params)?,
            config,
            tuning: TuningMode::Full,
            params,
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
        };
        model.apply_freeze_policy();
        Ok(model)
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn tuning(&self) -> &TuningMode {
        &self.tuning
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Canonical layout for the current config and tuning mode.
    pub fn layout(&self) -> ParamLayout {
        let mut l = self.config.layout();
        l.extend(self.tuning.extra_layout(&self.config));
        l
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let d = self.config.embed_dim;
        if mean.len() != d || var.len() != d {
            return Err(Error::ShapeMismatch { op: "set_running_stats", lhs: vec![d], rhs: vec![mean.len(), var.len()] });
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Folds train-phase batch statistics into the running estimates
    /// (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for j in 0..self.running_mean.len() {
            self.running_mean[j] = (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * stats.mean[j];
            self.running_var[j] = (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * stats.var[j] * correction;
        }
    }

    /// Marks each parameter trainable or frozen according to the tuning mode.
    pub fn apply_freeze_policy(&mut self) {
        let policy = self.tuning.freeze_policy();
        for p in self.params.iter_mut() {
            let t = policy.is_trainable(&p.name);
            p.tensor.set_requires_grad(t);
        }
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        self.tuning.freeze_policy()
    }

    pub fn tunable_param_count(&self) -> usize {
        self.params.trainable_numel()
    }

    /// Replaces adapters/prompts with fresh ones for `mode` and re-applies
    /// the freeze policy. Backbone and head are untouched.
    pub fn set_tuning(&mut self, mode: TuningMode, seed: u64) -> Result<()> {
        mode.validate(&self.config)?;
        let mut params = self.params.clone();
        params.retain(|n| !matches!(ParamGroup::of(n), ParamGroup::Adapter | ParamGroup::Prompt));
        match &mode {
            TuningMode::AdaptFormer(cfg) => {
                let mut rng = Rng::stream(seed, Stream::Adapter);
                for (name, t) in init_adapters(&mut rng, cfg, &self.config)?.into_named() {
                    params.insert(name, t)?;
                }
            }
            TuningMode::Prompt(cfg) => {
                let mut rng = Rng::stream(seed, Stream::Prompt);
                for (name, shape) in cfg.layout(&self.config).iter() {
                    let data = xavier(&mut rng, shape[0], shape[1]);
                    params.insert(name, Tensor::new(shape.to_vec(), data)?)?;
                }
            }
            TuningMode::Full | TuningMode::Linear => {}
        }
        self.ids = Ids::build(&self.config, &mode, &params)?;
        self.params = params;
        self.tuning = mode;
        self.apply_freeze_policy();
        Ok(())
    }

    pub fn with_tuning(mut self, mode: TuningMode, seed: u64) -> Result<Self> {
        self.set_tuning(mode, seed)?;
        Ok(self)
    }

    /// New classifier for `num_classes` and reset head-norm statistics.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        let mut config = self.config.clone();
        config.num_classes = num_classes;
        config.validate()?;
        let (hw, hb) = init_head(&config, seed)?;
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            let t = match p.name.as_str() {
                "head.weight" => hw.clone(),
                "head.bias" => hb.clone(),
                _ => p.tensor.clone(),
            };
            params.insert(p.name.clone(), t)?;
        }
        self.ids = Ids::build(&config, &self.tuning, &params)?;
        self.params = params;
        self.config = config;
        self.running_mean = vec![0.0; self.config.embed_dim];
        self.running_var = vec![1.0; self.config.embed_dim];
        self.apply_freeze_policy();
        Ok(())
    }

    /// Re-targets the model to `frames` frames per sample by tiling the
    /// per-frame patch rows of the positional table.
    pub fn set_num_frames(&mut self, frames: usize) -> Result<()> {
        if frames == 0 {
            return Err(Error::config("num_frames must be positive"));
        }
        let old = self.config.clone();
        let mut config = old.clone();
        config.num_frames = frames;
        let d = old.embed_dim;
        let pos = self.params.get("pos_embed").expect("pos_embed always present");
        let extra = old.seq_extra;
        let n = old.patches_per_frame();
        let mut data = pos.data()[..extra * d].to_vec();
        for _ in 0..frames {
            data.extend_from_slice(&pos.data()[extra * d..(extra + n) * d]);
        }
        let requires = pos.requires_grad();
        let new_pos = Tensor::new(vec![config.num_tokens(), d], data)?.with_requires_grad(requires);
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            let t = if p.name == "pos_embed" { new_pos.clone() } else { p.tensor.clone() };
            params.insert(p.name.clone(), t)?;
        }
        self.ids = Ids::build(&config, &self.tuning, &params)?;
        self.params = params;
        self.config = config;
        Ok(())
    }

    pub fn set_head_norm(&mut self, enabled: bool) {
        self.config.head_norm = enabled;
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.input(&p.tensor)).collect() }
    }

    /// Adds the gradients of a backward pass into the trainable parameters.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &Bound) -> Result<()> {
        for (id, &v) in bound.vars.iter().enumerate() {
            grads.accumulate_into(v, &mut self.params.by_id_mut(id).tensor)?;
        }
        Ok(())
    }

    fn lin(&self, b: &Bound, l: Linear) -> (Var, Var) {
        (b.var(l.weight), b.var(l.bias))
    }

    fn check_batch(&self, images: &[&[f64]]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::contract("forward needs at least one sample"));
        }
        let want = self.config.sample_len();
        if let Some(bad) = images.iter().find(|im| im.len() != want) {
            return Err(Error::config(format!(
                "image of {} values does not match config ({} frames of {}x{}x{} = {want})",
                bad.len(),
                self.config.num_frames,
                self.config.image_size,
                self.config.image_size,
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Flattened patches `[B·F·N, P²c]` of a batch.
    pub fn patchify(&self, images: &[&[f64]]) -> Result<Tensor> {
        self.check_batch(images)?;
        let c = &self.config;
        let (h, p, ch) = (c.image_size, c.patch_size, c.channels);
        let grid = h / p;
        let mut data = Vec::with_capacity(images.len() * c.num_patches() * c.patch_dim());
        for im in images {
            for f in 0..c.num_frames {
                for pi in 0..grid {
                    for pj in 0..grid {
                        for r in 0..p {
                            let row = f * h + pi * p + r;
                            let start = (row * h + pj * p) * ch;
                            data.extend_from_slice(&im[start..start + p * ch]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![images.len() * c.num_patches(), c.patch_dim()], data)
    }

    /// Token matrix `[B·T, d]` entering the first block.
    pub fn patch_embed(&self, g: &mut Graph, b: &Bound, images: &[&[f64]]) -> Result<Var> {
        let patches = g.constant(self.patchify(images)?);
        let tokens = linear(g, patches, self.lin(b, self.ids.patch))?;
        let np = self.config.num_patches();
        let d = self.config.embed_dim;
        let mut samples = Vec::with_capacity(images.len());
        for i in 0..images.len() {
            let own = g.slice(tokens, i * np, np, 0, d)?;
            let mut parts = vec![b.var(self.ids.cls)];
            if let Some(e) = self.ids.extra {
                parts.push(b.var(e));
            }
            parts.push(own);
            let seq = g.concat_rows(&parts)?;
            let mut seq = g.add(seq, b.var(self.ids.pos))?;
            if let Some(pid) = self.ids.shallow_prompt {
                seq = prepend_prompts(g, seq, b.var(pid))?;
            }
            samples.push(seq);
        }
        if samples.len() == 1 {
            Ok(samples[0])
        } else {
            g.concat_rows(&samples)
        }
    }

    /// Row of the CLS token within a sample's token sequence.
    pub fn cls_position(&self) -> usize {
        match self.tuning.prompt() {
            Some(p) if p.depth == PromptDepth::Shallow => p.num_tokens,
            _ => 0,
        }
    }

    pub fn attention_vars(&self, b: &Bound, layer: usize) -> AttentionVars {
        let ids = &self.ids.blocks[layer];
        AttentionVars {
            q: self.lin(b, ids.q),
            k: self.lin(b, ids.k),
            v: self.lin(b, ids.v),
            proj: self.lin(b, ids.proj),
        }
    }

    fn adapter_vars(&self, b: &Bound, ids: AdapterIds) -> AdapterVars {
        AdapterVars {
            down_weight: b.var(ids.down.weight),
            down_bias: b.var(ids.down.bias),
            up_weight: b.var(ids.up.weight),
            up_bias: b.var(ids.up.bias),
        }
    }

    /// One encoder block over a stacked batch `x[B·T, d]`:
    /// `x' = x + MHSA(LN1(x))`, then the MLP sub-block of the tuning mode.
    pub fn block_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        layer: usize,
        batch: usize,
        phase: Phase,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let ids = self
            .ids
            .blocks
            .get(layer)
            .ok_or_else(|| Error::contract(format!("layer {layer} out of range for depth {}", self.config.depth)))?;
        let d = self.config.embed_dim;
        let rows = g.shape(x)[0];
        if batch == 0 || rows % batch != 0 {
            return Err(Error::contract(format!("{rows} token rows do not split into batch {batch}")));
        }
        let t = rows / batch;

        let (x_in, prompt_len) = match ids.prompt {
            Some(pid) => {
                let prompt = b.var(pid);
                let p = g.shape(prompt)[0];
                let mut parts = Vec::with_capacity(batch);
                for i in 0..batch {
                    let own = g.slice(x, i * t, t, 0, d)?;
                    parts.push(prepend_prompts(g, own, prompt)?);
                }
                let stacked = if batch == 1 { parts[0] } else { g.concat_rows(&parts)? };
                (stacked, p)
            }
            None => (x, 0),
        };

        let norm1 = self.lin(b, ids.norm1);
        let h1 = g.layernorm(x_in, norm1.0, norm1.1, LN_EPS)?;
        let attn = mhsa(g, h1, batch, self.config.num_heads, &self.attention_vars(b, layer))?;
        let x_prime = g.add(x_in, attn)?;
        let norm2 = self.lin(b, ids.norm2);
        let h2 = g.layernorm(x_prime, norm2.0, norm2.1, LN_EPS)?;
        let hidden = linear(g, h2, self.lin(b, ids.fc1))?;
        let hidden = g.gelu(hidden);
        let mlp_out = linear(g, hidden, self.lin(b, ids.fc2))?;

        let out = match (ids.adapter, self.tuning.adapter()) {
            (Some(aids), Some(cfg)) => {
                let w = self.adapter_vars(b, aids);
                let drop = match (phase, rng) {
                    (Phase::Train, Some(r)) if cfg.dropout > 0.0 => Some((cfg.dropout, r)),
                    _ => None,
                };
                match cfg.insertion {
                    Insertion::Parallel => {
                        let branch = adapter_branch(g, h2, &w, drop)?;
                        fuse_parallel(g, mlp_out, branch, x_prime, cfg.scale)?
                    }
                    Insertion::Sequential => fuse_sequential(g, mlp_out, x_prime, &w, cfg.scale, drop)?,
                }
            }
            _ => g.add(mlp_out, x_prime)?,
        };

        if prompt_len == 0 {
            return Ok(out);
        }
        let tp = t + prompt_len;
        let keep: Vec<usize> = (0..batch).flat_map(|i| i * tp + prompt_len..(i + 1) * tp).collect();
        g.select_rows(out, &keep)
    }

    /// CLS rows → optional head norm → linear head.
    pub fn classify(&self, g: &mut Graph, b: &Bound, features: Var, phase: Phase) -> Result<(Var, Option<BatchStats>)> {
        let (normed, stats) = if self.config.head_norm {
            match phase {
                Phase::Train => {
                    let (v, s) = g.batchnorm_train(features, BN_EPS)?;
                    (v, Some(s))
                }
                Phase::Eval => (g.batchnorm_eval(features, &self.running_mean, &self.running_var, BN_EPS)?, None),
            }
        } else {
            (features, None)
        };
        let logits = linear(g, normed, self.lin(b, self.ids.head))?;
        Ok((logits, stats))
    }

    /// Full forward pass of a batch. `rng` drives adapter dropout in train phase.
    pub fn forward(&self, g: &mut Graph, images: &[&[f64]], phase: Phase, mut rng: Option<&mut Rng>) -> Result<Forward> {
        let bound = self.bind(g);
        let batch = images.len();
        let mut x = self.patch_embed(g, &bound, images)?;
        for layer in 0..self.config.depth {
            x = self.block_forward(g, &bound, x, layer, batch, phase, rng.as_deref_mut())?;
        }
        let norm = self.lin(&bound, self.ids.norm);
        let x = g.layernorm(x, norm.0, norm.1, LN_EPS)?;
        let t = g.shape(x)[0] / batch;
        let cls = self.cls_position();
        let rows: Vec<usize> = (0..batch).map(|i| i * t + cls).collect();
        let features = g.select_rows(x, &rows)?;
        let (logits, batch_stats) = self.classify(g, &bound, features, phase)?;
        Ok(Forward { bound, logits, features, batch_stats })
    }

    /// Eval-phase logits `[B, C]`.
    pub fn predict(&self, images: &[&[f64]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, Phase::Eval, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-phase CLS features `[B, d]`.
    pub fn features(&self, images: &[&[f64]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, Phase::Eval, None)?;
        Ok(g.value(out.features).clone())
    }

    /// Mean cross-entropy of a batch, without recording gradients for later use.
    pub fn loss(&self, images: &[&[f64]], labels: &[usize], phase: Phase) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images, phase, None)?;
        let loss = g.cross_entropy(out.logits, labels)?;
        Ok(g.value(loss).data()[0])
    }
}

impl Ids {
    fn build(config: &VitConfig, mode: &TuningMode, params: &ParamStore) -> Result<Self> {
        let id = |name: &str| {
            params.id(name).ok_or_else(|| Error::contract(format!("model is missing parameter {name}")))
        };
        let lin = |prefix: &str| -> Result<Linear> {
            Ok(Linear { weight: id(&format!("{prefix}.weight"))?, bias: id(&format!("{prefix}.bias"))? })
        };
        let adapter = mode.adapter();
        let prompt = mode.prompt();
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let adapter_ids = match adapter {
                Some(cfg) if cfg.adapts(l, config.depth) => Some(AdapterIds {
                    down: Linear {
                        weight: id(&adapter_param_name(l, "down.weight"))?,
                        bias: id(&adapter_param_name(l, "down.bias"))?,
                    },
                    up: Linear {
                        weight: id(&adapter_param_name(l, "up.weight"))?,
                        bias: id(&adapter_param_name(l, "up.bias"))?,
                    },
                }),
                _ => None,
            };
            let prompt_id = match prompt {
                Some(pc) if pc.depth == PromptDepth::Deep => Some(id(&deep_prompt_name(l))?),
                _ => None,
            };
            blocks.push(BlockIds {
                norm1: lin(&p("norm1"))?,
                q: lin(&p("attn.q"))?,
                k: lin(&p("attn.k"))?,
                v: lin(&p("attn.v"))?,
                proj: lin(&p("attn.proj"))?,
                norm2: lin(&p("norm2"))?,
                fc1: lin(&p("mlp.fc1"))?,
                fc2: lin(&p("mlp.fc2"))?,
                adapter: adapter_ids,
                prompt: prompt_id,
            });
        }
        let shallow_prompt = match prompt {
            Some(pc) if pc.depth == PromptDepth::Shallow => Some(id(SHALLOW_PROMPT_NAME)?),
            _ => None,
        };
        // Shapes must match the config exactly.
        let mut want = config.layout();
        want.extend(mode.extra_layout(config));
        for (name, shape) in want.iter() {
            let t = params.get(name).ok_or_else(|| Error::contract(format!("model is missing parameter {name}")))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch { op: "model parameter", lhs: shape.to_vec(), rhs: t.shape().to_vec() });
            }
        }
        Ok(Ids {
            patch: lin("patch_embed")?,
            cls: id("cls_token")?,
            extra: if config.seq_extra > 1 { Some(id("extra_tokens")?) } else { None },
            pos: id("pos_embed")?,
            blocks,
            norm: lin("norm")?,
            head: lin("head")?,
            shallow_prompt,
        })
    }
}

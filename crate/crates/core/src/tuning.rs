//! Tuning modes: the AdaptMLP bottleneck adapter, prompt tuning, linear
//! probing and full fine-tuning, each with the freeze policy that defines it.
//!
//! The adapter branch reads the same LayerNorm output as the frozen MLP:
//!
//! ```text
//! x'  = x + MHSA(LN1(x))
//! h   = LN2(x')
//! out = (MLP(h) + x') + s · (ReLU(h · W_down + b_down) · W_up + b_up)     parallel
//! out = (MLP(h) + x') + s · (ReLU(MLP(h) · W_down + b_down) · W_up + b_up) sequential
//! ```
//!
//! `W_up` and both biases start at exactly zero, so a freshly attached
//! adapter leaves every output bit unchanged.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGroup, ParamLayout};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::VitConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Insertion {
    #[default]
    Parallel,
    Sequential,
}

impl FromStr for Insertion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Insertion::Parallel),
            "sequential" => Ok(Insertion::Sequential),
            other => Err(Error::config(format!("unknown insertion form {other:?}"))),
        }
    }
}

impl fmt::Display for Insertion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Insertion::Parallel => "parallel",
            Insertion::Sequential => "sequential",
        })
    }
}

/// Distribution of the down-projection init. Both use fan-in = `d` and gain `√2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KaimingInit {
    /// `U(-√(6/d), √(6/d))`
    #[default]
    Uniform,
    /// `N(0, 2/d)`
    Normal,
}

impl FromStr for KaimingInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(KaimingInit::Uniform),
            "normal" => Ok(KaimingInit::Normal),
            other => Err(Error::config(format!("unknown kaiming variant {other:?}"))),
        }
    }
}

impl fmt::Display for KaimingInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KaimingInit::Uniform => "uniform",
            KaimingInit::Normal => "normal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    /// Bottleneck width.
    pub mid_dim: usize,
    /// Scale applied to the branch before fusion.
    pub scale: f64,
    pub insertion: Insertion,
    /// Adapted blocks as a 1-based inclusive range; `None` adapts every block.
    pub layer_range: Option<(usize, usize)>,
    /// Dropout after the ReLU, train mode only.
    pub dropout: f64,
    pub init: KaimingInit,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            mid_dim: 64,
            scale: 0.1,
            insertion: Insertion::Parallel,
            layer_range: None,
            dropout: 0.0,
            init: KaimingInit::Uniform,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, vit: &VitConfig) -> Result<()> {
        if self.mid_dim == 0 {
            return Err(Error::config("adapter mid_dim must be at least 1"));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::config(format!("adapter scale must be finite and nonnegative, got {}", self.scale)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("adapter dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if let Some((start, end)) = self.layer_range {
            if start < 1 || start > end || end > vit.depth {
                return Err(Error::config(format!(
                    "adapter layer range {start}..={end} invalid for {} blocks",
                    vit.depth
                )));
            }
        }
        Ok(())
    }

    /// 0-based indices of adapted blocks.
    pub fn layers(&self, depth: usize) -> Vec<usize> {
        let (start, end) = self.layer_range.unwrap_or((1, depth));
        (start - 1..end).collect()
    }

    pub fn adapts(&self, layer: usize, depth: usize) -> bool {
        let (start, end) = self.layer_range.unwrap_or((1, depth));
        layer + 1 >= start && layer < end
    }

    pub fn layout(&self, vit: &VitConfig) -> ParamLayout {
        let d = vit.embed_dim;
        let m = self.mid_dim;
        let mut l = ParamLayout::new();
        for layer in self.layers(vit.depth) {
            l.push(adapter_param_name(layer, "down.weight"), &[d, m]);
            l.push(adapter_param_name(layer, "down.bias"), &[m]);
            l.push(adapter_param_name(layer, "up.weight"), &[m, d]);
            l.push(adapter_param_name(layer, "up.bias"), &[d]);
        }
        l
    }
}

pub fn adapter_param_name(layer: usize, leaf: &str) -> String {
    format!("blocks.{layer}.adapter.{leaf}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptDepth {
    /// One prompt matrix prepended after the embedding and carried through all blocks.
    Shallow,
    /// A fresh prompt matrix per block; prompt outputs are dropped after each block.
    #[default]
    Deep,
}

impl FromStr for PromptDepth {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(PromptDepth::Shallow),
            "deep" => Ok(PromptDepth::Deep),
            other => Err(Error::config(format!("unknown prompt depth {other:?}"))),
        }
    }
}

impl fmt::Display for PromptDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptDepth::Shallow => "shallow",
            PromptDepth::Deep => "deep",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptConfig {
    pub num_tokens: usize,
    pub depth: PromptDepth,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { num_tokens: 4, depth: PromptDepth::Deep }
    }
}

pub const SHALLOW_PROMPT_NAME: &str = "prompts.input";

pub fn deep_prompt_name(layer: usize) -> String {
    format!("prompts.{layer}")
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tokens == 0 {
            return Err(Error::config("prompt tuning needs at least one prompt token"));
        }
        Ok(())
    }

    pub fn layout(&self, vit: &VitConfig) -> ParamLayout {
        let mut l = ParamLayout::new();
        let shape = [self.num_tokens, vit.embed_dim];
        match self.depth {
            PromptDepth::Shallow => l.push(SHALLOW_PROMPT_NAME, &shape),
            PromptDepth::Deep => (0..vit.depth).for_each(|layer| l.push(deep_prompt_name(layer), &shape)),
        }
        l
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum TuningMode {
    #[default]
    Full,
    Linear,
    Prompt(PromptConfig),
    AdaptFormer(AdapterConfig),
}

impl TuningMode {
    pub fn name(&self) -> &'static str {
        match self {
            TuningMode::Full => "full",
            TuningMode::Linear => "linear",
            TuningMode::Prompt(_) => "vpt",
            TuningMode::AdaptFormer(_) => "adaptformer",
        }
    }

    pub fn adapter(&self) -> Option<&AdapterConfig> {
        match self {
            TuningMode::AdaptFormer(c) => Some(c),
            _ => None,
        }
    }

    pub fn prompt(&self) -> Option<&PromptConfig> {
        match self {
            TuningMode::Prompt(c) => Some(c),
            _ => None,
        }
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        FreezePolicy::for_mode(self)
    }

    /// Parameters this mode adds on top of the backbone and head.
    pub fn extra_layout(&self, vit: &VitConfig) -> ParamLayout {
        match self {
            TuningMode::AdaptFormer(c) => c.layout(vit),
            TuningMode::Prompt(c) => c.layout(vit),
            TuningMode::Full | TuningMode::Linear => ParamLayout::new(),
        }
    }

    pub fn validate(&self, vit: &VitConfig) -> Result<()> {
        match self {
            TuningMode::AdaptFormer(c) => c.validate(vit),
            TuningMode::Prompt(c) => c.validate(),
            TuningMode::Full | TuningMode::Linear => Ok(()),
        }
    }
}

/// Assignment of every parameter name to trainable or frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePolicy {
    trainable: Vec<ParamGroup>,
}

impl FreezePolicy {
    pub fn for_mode(mode: &TuningMode) -> Self {
        let trainable = match mode {
            TuningMode::Full => {
                vec![ParamGroup::Backbone, ParamGroup::Adapter, ParamGroup::Prompt, ParamGroup::Head]
            }
            TuningMode::Linear => vec![ParamGroup::Head],
            TuningMode::Prompt(_) => vec![ParamGroup::Prompt, ParamGroup::Head],
            TuningMode::AdaptFormer(_) => vec![ParamGroup::Adapter, ParamGroup::Head],
        };
        Self { trainable }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(&ParamGroup::of(name))
    }

    /// Scalar count of trainable entries in `layout`.
    pub fn tunable_count(&self, layout: &ParamLayout) -> usize {
        layout.numel_where(|n| self.is_trainable(n))
    }
}

/// Parameters added by adapters on `layers` blocks of width `d`, plus the
/// `d·C + C` classifier when `num_classes` is given.
pub fn adapter_param_count(d: usize, mid_dim: usize, layers: usize, num_classes: Option<usize>) -> usize {
    let per_layer = 2 * d * mid_dim + mid_dim + d;
    let head = num_classes.map_or(0, |c| d * c + c);
    layers * per_layer + head
}

#[derive(Debug, Clone)]
pub struct AdapterLayerParams {
    /// 0-based block index.
    pub layer: usize,
    pub down_weight: Tensor,
    pub down_bias: Tensor,
    pub up_weight: Tensor,
    pub up_bias: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct AdapterParams {
    pub layers: Vec<AdapterLayerParams>,
}

impl AdapterParams {
    pub fn numel(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.down_weight.numel() + l.down_bias.numel() + l.up_weight.numel() + l.up_bias.numel())
            .sum()
    }

    pub fn into_named(self) -> Vec<(String, Tensor)> {
        self.layers
            .into_iter()
            .flat_map(|l| {
                [
                    (adapter_param_name(l.layer, "down.weight"), l.down_weight),
                    (adapter_param_name(l.layer, "down.bias"), l.down_bias),
                    (adapter_param_name(l.layer, "up.weight"), l.up_weight),
                    (adapter_param_name(l.layer, "up.bias"), l.up_bias),
                ]
            })
            .collect()
    }
}

/// Fresh adapters: Kaiming `W_down`, everything else exactly zero.
pub fn init_adapters(rng: &mut Rng, config: &AdapterConfig, vit: &VitConfig) -> Result<AdapterParams> {
    config.validate(vit)?;
    let d = vit.embed_dim;
    let m = config.mid_dim;
    let fan_in = d as f64;
    let layers = config
        .layers(vit.depth)
        .into_iter()
        .map(|layer| {
            let data: Vec<f64> = match config.init {
                KaimingInit::Uniform => {
                    let bound = (6.0 / fan_in).sqrt();
                    (0..d * m).map(|_| rng.uniform_in(-bound, bound)).collect()
                }
                KaimingInit::Normal => {
                    let std = (2.0 / fan_in).sqrt();
                    (0..d * m).map(|_| rng.normal_with(0.0, std)).collect()
                }
            };
            Ok(AdapterLayerParams {
                layer,
                down_weight: Tensor::new(vec![d, m], data)?,
                down_bias: Tensor::zeros(&[m]),
                up_weight: Tensor::zeros(&[m, d]),
                up_bias: Tensor::zeros(&[d]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdapterParams { layers })
}

/// Graph handles of one block's adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub down_weight: Var,
    pub down_bias: Var,
    pub up_weight: Var,
    pub up_bias: Var,
}

/// Inverted dropout: keeps each activation with probability `1 - p` and
/// rescales survivors by `1 / (1 - p)`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Down-projection, ReLU, optional dropout, up-projection. Not yet scaled.
pub fn adapter_branch(
    g: &mut Graph,
    x: Var,
    w: &AdapterVars,
    dropout_cfg: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let down = g.matmul(x, w.down_weight)?;
    let down = g.add_bias(down, w.down_bias)?;
    let mut act = g.relu(down);
    if let Some((p, rng)) = dropout_cfg {
        act = dropout(g, act, p, rng)?;
    }
    let up = g.matmul(act, w.up_weight)?;
    g.add_bias(up, w.up_bias)
}

/// `(mlp_out + x_prime) + s · branch`.
///
/// The residual sum is formed first so that a zero branch reproduces the
/// plain block bit for bit.
pub fn fuse_parallel(g: &mut Graph, mlp_out: Var, branch: Var, x_prime: Var, s: f64) -> Result<Var> {
    if g.shape(branch) != g.shape(mlp_out) {
        return Err(Error::ShapeMismatch {
            op: "fuse_parallel",
            lhs: g.shape(mlp_out).to_vec(),
            rhs: g.shape(branch).to_vec(),
        });
    }
    let residual = g.add(mlp_out, x_prime)?;
    let scaled = g.mul_scalar(branch, s);
    g.add(residual, scaled)
}

/// Sequential insertion: the adapter consumes the MLP output, then fuses like
/// the parallel form.
pub fn fuse_sequential(
    g: &mut Graph,
    mlp_out: Var,
    x_prime: Var,
    w: &AdapterVars,
    s: f64,
    dropout_cfg: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let branch = adapter_branch(g, mlp_out, w, dropout_cfg)?;
    fuse_parallel(g, mlp_out, branch, x_prime, s)
}

/// `[prompts; tokens]` along the token axis.
pub fn prepend_prompts(g: &mut Graph, tokens: Var, prompts: Var) -> Result<Var> {
    let d = g.shape(tokens)[1];
    if g.shape(prompts).len() != 2 || g.shape(prompts)[1] != d {
        return Err(Error::ShapeMismatch {
            op: "prepend_prompts",
            lhs: g.shape(tokens).to_vec(),
            rhs: g.shape(prompts).to_vec(),
        });
    }
    g.concat_rows(&[prompts, tokens])
}

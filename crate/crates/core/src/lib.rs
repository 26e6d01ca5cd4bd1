//! Parameter-efficient fine-tuning of Vision Transformers with bottleneck
//! adapters placed beside each block's MLP.
//!
//! The crate is self-contained: a small reverse-mode differentiation engine
//! ([`graph`]), a plain ViT encoder ([`vit`]), the tuning modes and their
//! freeze policies ([`tuning`]), an SGD training harness ([`harness`]),
//! bit-exact checkpoints ([`checkpoint`]), deterministic synthetic tasks
//! ([`data`]) and the command-line front end ([`cli`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tuning;
pub mod vit;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamGroup, ParamLayout, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
pub use tuning::{AdapterConfig, FreezePolicy, Insertion, PromptConfig, PromptDepth, TuningMode};
pub use vit::{Phase, VitConfig, VitModel};

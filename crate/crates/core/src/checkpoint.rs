//! Single-file, content-hashed parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"AFCK"
//! version    u32 = 1
//! meta       u32 count, then count × (u32 len, key bytes, u32 len, value bytes)
//! entries    u32 count, then count × (u32 len, name bytes, u32 ndim,
//!                                     ndim × u64 dim, numel × f64 payload)
//! digest     32-byte SHA-256 of every preceding byte
//! ```
//!
//! Writes go to a temporary sibling that is renamed over the target, so a
//! crash never leaves a half-written checkpoint under the final name.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamLayout};
use crate::tensor::Tensor;
use crate::vit::{VitModel, RUNNING_MEAN_NAME, RUNNING_VAR_NAME};

pub const MAGIC: &[u8; 4] = b"AFCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Which entries a save or load touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    Backbone,
    /// Adapter and prompt parameters.
    Adapters,
    /// Classifier and head-norm statistics.
    Head,
    /// Everything outside the backbone: what a tuned task adds to a shared
    /// pre-trained model.
    Delta,
}

impl Subset {
    pub fn contains(self, name: &str) -> bool {
        let group = ParamGroup::of(name);
        match self {
            Subset::All => true,
            Subset::Backbone => group == ParamGroup::Backbone,
            Subset::Adapters => matches!(group, ParamGroup::Adapter | ParamGroup::Prompt),
            Subset::Head => group == ParamGroup::Head,
            Subset::Delta => group != ParamGroup::Backbone,
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "backbone" => Ok(Subset::Backbone),
            "adapters" => Ok(Subset::Adapters),
            "head" => Ok(Subset::Head),
            "delta" => Ok(Subset::Delta),
            other => Err(Error::config(format!("unknown checkpoint subset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<(String, Tensor)>,
}

fn model_entries(model: &VitModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> =
        model.params().iter().map(|p| (p.name.clone(), Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("shape already valid"))).collect();
    let (mean, var) = model.running_stats();
    if model.config().head_norm {
        let d = mean.len();
        out.push((RUNNING_MEAN_NAME.to_string(), Tensor::new(vec![d], mean.to_vec()).expect("non-empty")));
        out.push((RUNNING_VAR_NAME.to_string(), Tensor::new(vec![d], var.to_vec()).expect("non-empty")));
    }
    out
}

impl Checkpoint {
    /// Snapshot of the model's entries that fall in `subset`.
    pub fn from_model(model: &VitModel, subset: Subset) -> Self {
        let entries = model_entries(model).into_iter().filter(|(n, _)| subset.contains(n)).collect();
        Self { metadata: BTreeMap::new(), entries }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Number of stored scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            t.shape().iter().for_each(|&d| out.extend_from_slice(&(d as u64).to_le_bytes()));
            out.extend_from_slice(&t.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies `bytes`; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(Error::HashMismatch { path: path.to_path_buf(), stored: hex::encode(stored), computed: hex::encode(computed) });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut metadata = BTreeMap::new();
        let n_meta = r.u32().ok_or_else(|| bad("truncated metadata"))?;
        for _ in 0..n_meta {
            let k = r.string().ok_or_else(|| bad("truncated metadata key"))?;
            let v = r.string().ok_or_else(|| bad("truncated metadata value"))?;
            metadata.insert(k, v);
        }
        let n = r.u32().ok_or_else(|| bad("truncated entry table"))?;
        let mut entries = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string().ok_or_else(|| bad("truncated entry name"))?;
            let ndim = r.u32().ok_or_else(|| bad("truncated entry rank"))?;
            let dims: Vec<usize> =
                (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Option<_>>().ok_or_else(|| bad("truncated dims"))?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("dims overflow"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| bad("dims overflow"))?).ok_or_else(|| bad("truncated payload"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).map_err(|e| bad(&format!("entry {name}: {e}")))?;
            if entries.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(bad(&format!("duplicate entry {name}")));
            }
            entries.push((name, t));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes before digest"));
        }
        Ok(Self { metadata, entries })
    }

    /// Writes atomically and returns the hex digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode();
        let tmp = temp_sibling(path);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(path, e));
        }
        Ok(hex::encode(&bytes[bytes.len() - DIGEST_LEN..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Hex SHA-256 digest of the encoded form.
    pub fn digest(&self) -> String {
        let bytes = self.encode();
        hex::encode(&bytes[bytes.len() - DIGEST_LEN..])
    }

    /// Copies the `subset` entries into `model`. Every model entry in the
    /// subset must be present with a matching shape, and the checkpoint may
    /// not carry subset entries the model lacks; otherwise nothing is
    /// changed and the error lists the offending names.
    pub fn load_into(&self, model: &mut VitModel, subset: Subset) -> Result<()> {
        let wanted: Vec<(String, Vec<usize>)> =
            model_entries(model).into_iter().filter(|(n, _)| subset.contains(n)).map(|(n, t)| (n, t.shape().to_vec())).collect();
        let missing: Vec<&str> = wanted.iter().filter(|(n, _)| self.get(n).is_none()).map(|(n, _)| n.as_str()).collect();
        let unexpected: Vec<&str> =
            self.names().filter(|n| subset.contains(n) && !wanted.iter().any(|(w, _)| w == n)).collect();
        let mismatched: Vec<String> = wanted
            .iter()
            .filter_map(|(n, shape)| {
                let t = self.get(n)?;
                (t.shape() != shape.as_slice()).then(|| format!("{n} (model {shape:?}, checkpoint {:?})", t.shape()))
            })
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() || !mismatched.is_empty() {
            let mut parts = Vec::new();
            if !missing.is_empty() {
                parts.push(format!("missing {}", missing.join(", ")));
            }
            if !unexpected.is_empty() {
                parts.push(format!("unexpected {}", unexpected.join(", ")));
            }
            if !mismatched.is_empty() {
                parts.push(format!("shape mismatch {}", mismatched.join(", ")));
            }
            return Err(Error::CheckpointMismatch(parts.join("; ")));
        }
        let mut stats = (None, None);
        for (name, _) in &wanted {
            let src = self.get(name).expect("checked above");
            match name.as_str() {
                RUNNING_MEAN_NAME => stats.0 = Some(src.data().to_vec()),
                RUNNING_VAR_NAME => stats.1 = Some(src.data().to_vec()),
                _ => model.params_mut().get_mut(name).expect("model entry").data_mut().copy_from_slice(src.data()),
            }
        }
        if let (Some(mean), Some(var)) = stats {
            model.set_running_stats(mean, var)?;
        }
        Ok(())
    }
}

/// Exact encoded size of a checkpoint holding `layout` and no metadata.
pub fn encoded_size(layout: &ParamLayout) -> usize {
    let header = MAGIC.len() + 4 + 4 + 4;
    let entries: usize = layout.iter().map(|(n, s)| 4 + n.len() + 4 + 8 * s.len() + 8 * s.iter().product::<usize>()).sum();
    header + entries + DIGEST_LEN
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

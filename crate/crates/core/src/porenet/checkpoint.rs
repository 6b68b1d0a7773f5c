//! Checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "PORECKPT"
//! 8       8     manifest length L, u64 little-endian
//! 16      L     JSON manifest (UTF-8)
//! 16+L    P     payload: tensors back to back, little-endian IEEE-754
//! ```
//!
//! Every manifest tensor entry gives its name, shape, dtype (`f32` for
//! learnable parameters, `f64` for batch-norm running statistics), byte
//! offset relative to the payload start, and group (`pore`, `domain`, or
//! `bn_stats`). Entries appear in payload order and tile it exactly.

use std::path::Path;

use ndgrad::{Grid4, ParamGroup, ParamSet, RunningStats, Shape4};
use serde::{Deserialize, Serialize};

use super::{Architecture, BnState, DomainHeadConfig, PoreNet, ResPoreConfig};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PORECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bookkeeping stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epoch: u64,
    pub iterations: u64,
    pub seed: u64,
    pub lambda: f64,
    pub learning_rate: f64,
    /// `"adversarial"`, `"pore_only"`, `"finetune"`, or `"init"`.
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: PoreNet<f32>,
    pub meta: TrainingMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorGroup {
    Pore,
    Domain,
    BnStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    dtype: Dtype,
    offset: u64,
    group: TensorGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    pore: ResPoreConfig,
    head: DomainHeadConfig,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn stats_names(layer: &str) -> [String; 2] {
    [format!("{layer}.running_mean"), format!("{layer}.running_var")]
}

impl Checkpoint {
    pub fn new(net: PoreNet<f32>, meta: TrainingMeta) -> Self {
        Checkpoint { net, meta }
    }

    /// Serialize into the container format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        for (name, p) in self.net.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: p.value.shape().0,
                dtype: Dtype::F32,
                offset: payload.len() as u64,
                group: match p.group {
                    ParamGroup::Pore => TensorGroup::Pore,
                    ParamGroup::Domain => TensorGroup::Domain,
                },
            });
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (layer, stats) in &self.net.bn {
            for (name, values) in stats_names(layer).into_iter().zip([&stats.mean, &stats.var]) {
                tensors.push(TensorEntry {
                    name,
                    shape: [values.len(), 1, 1, 1],
                    dtype: Dtype::F64,
                    offset: payload.len() as u64,
                    group: TensorGroup::BnStats,
                });
                for v in values {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            pore: self.net.arch.pore.clone(),
            head: self.net.arch.head.clone(),
            meta: self.meta.clone(),
            tensors,
            payload_bytes: payload.len() as u64,
        };
        let json = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parse and fully validate a container; nothing is returned unless every
    /// tensor is present with the shape its configuration implies.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(what.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing PORECKPT header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(corrupt("truncated manifest"));
        }
        let (json, payload) = body.split_at(len);
        let probe: VersionProbe = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: probe.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
        if manifest.payload_bytes as usize != payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let arch = Architecture::new(manifest.pore.clone(), manifest.head.clone())?;
        let specs = arch.param_specs();
        let bn_layers = arch.bn_layers();
        let expected = specs.len() + 2 * bn_layers.len();
        if manifest.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, configuration needs {expected}",
                manifest.tensors.len()
            )));
        }

        let mut cursor = 0u64;
        let mut entries = std::collections::BTreeMap::new();
        for t in &manifest.tensors {
            if t.offset != cursor {
                return Err(Error::Checkpoint(format!("tensor {} at unexpected offset", t.name)));
            }
            let shape = Shape4(t.shape);
            if !shape.is_valid() {
                return Err(Error::Checkpoint(format!("tensor {} has empty shape", t.name)));
            }
            let start = cursor as usize;
            let end = start + shape.numel() * t.dtype.width();
            if end > payload.len() {
                return Err(corrupt("truncated payload"));
            }
            if entries.insert(t.name.as_str(), (t, &payload[start..end])).is_some() {
                return Err(Error::Checkpoint(format!("tensor {} stored twice", t.name)));
            }
            cursor = end as u64;
        }
        if cursor as usize != payload.len() {
            return Err(corrupt("trailing bytes after last tensor"));
        }

        let mut params = ParamSet::new();
        for spec in &specs {
            let (t, raw) = entries
                .get(spec.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            let group = match spec.group {
                ParamGroup::Pore => TensorGroup::Pore,
                ParamGroup::Domain => TensorGroup::Domain,
            };
            if Shape4(t.shape) != spec.shape || t.dtype != Dtype::F32 || t.group != group {
                return Err(Error::Checkpoint(format!(
                    "parameter {}: stored {} {:?} {:?}, configuration expects {} f32 {:?}",
                    spec.name,
                    Shape4(t.shape),
                    t.dtype,
                    t.group,
                    spec.shape,
                    group
                )));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(spec.name.clone(), spec.group, Grid4::from_vec(spec.shape, data)?)?;
        }

        let mut bn = BnState::new();
        for (layer, c) in &bn_layers {
            let read = |name: &str| -> Result<Vec<f64>> {
                let (t, raw) = entries
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing statistics {name}")))?;
                if t.shape != [*c, 1, 1, 1] || t.dtype != Dtype::F64 || t.group != TensorGroup::BnStats {
                    return Err(Error::Checkpoint(format!("statistics {name} have the wrong layout")));
                }
                Ok(raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect())
            };
            let [mean_name, var_name] = stats_names(layer);
            let stats = RunningStats {
                mean: read(&mean_name)?,
                var: read(&var_name)?,
            };
            bn.insert(layer.clone(), stats);
        }

        Ok(Checkpoint {
            net: PoreNet { arch, params, bn },
            meta: manifest.meta,
        })
    }

    /// Reject checkpoints built for a different network layout.
    pub fn expect_config(&self, pore: &ResPoreConfig, head: &DomainHeadConfig) -> Result<()> {
        if &self.net.arch.pore != pore || &self.net.arch.head != head {
            return Err(Error::Checkpoint(format!(
                "checkpoint network {:?} / head {:?} does not match the requested configuration",
                self.net.arch.pore, self.net.arch.head
            )));
        }
        Ok(())
    }
}

/// Write atomically: a crash never leaves a partial checkpoint at `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

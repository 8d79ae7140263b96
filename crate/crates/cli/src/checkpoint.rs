//! Checkpoint files.
//!
//! Layout: the magic `STUNCKPT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then the payload of
//! little-endian `f64` values. The header lists every tensor with its group,
//! shape, byte offset into the payload and frozen flag, and echoes the model
//! config and optimiser state.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stunet_core::stunet::{NamedTensors, STUNetConfig, STUNetWeights, T2IConfig, T2IWeights};
use stunet_core::train::{Adam, AdamConfig};
use stunet_core::Tensor;

use crate::error::{CliError, Result};
use crate::media::{read_bytes, write_bytes};

pub const MAGIC: &[u8; 8] = b"STUNCKPT";
pub const VERSION: u32 = 1;
const FORMAT: &str = "stunet-checkpoint";

/// What a model was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Unconditional (class-conditioned) generation at base resolution.
    Base,
    /// Spatial super-resolution from the nearest-upsampled low-res input.
    Ssr,
    Image2video,
    Inpaint,
    Cinemagraph,
}

impl Role {
    /// Roles that take a mask-conditioning pair.
    pub fn is_masked(self) -> bool {
        matches!(self, Role::Image2video | Role::Inpaint | Role::Cinemagraph)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    T2i(T2IWeights),
    Video(STUNetWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    /// Optimisation steps completed.
    pub step: u64,
    pub seed: u64,
    pub adam: Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub model: Model,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    T2i,
    Video,
}

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    step: u64,
    seed: u64,
    adam: AdamConfig,
    adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: Kind,
    role: Role,
    config: serde_json::Value,
    unfrozen: Vec<String>,
    training: Option<TrainingHeader>,
    tensors: Vec<TensorEntry>,
}

const ADAM_M: &str = "adam.m";
const ADAM_V: &str = "adam.v";

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut groups: Vec<(&str, &NamedTensors, Box<dyn Fn(&str) -> bool + '_>)> = Vec::new();
        let (kind, config) = match &self.model {
            Model::T2i(w) => {
                groups.push(("spatial", &w.tensors, Box::new(|_| false)));
                (Kind::T2i, serde_json::to_value(&w.config))
            }
            Model::Video(w) => {
                groups.push(("spatial", &w.spatial, Box::new(|n| !w.unfrozen_spatial.contains(n))));
                groups.push(("temporal", &w.temporal, Box::new(|_| false)));
                (Kind::Video, serde_json::to_value(&w.config))
            }
        };
        let config = config.map_err(|e| CliError::config(format!("config does not serialise: {e}")))?;
        if let Some(t) = &self.training {
            groups.push((ADAM_M, &t.adam.m, Box::new(|_| false)));
            groups.push((ADAM_V, &t.adam.v, Box::new(|_| false)));
        }
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (group, tensors, frozen) in &groups {
            for (name, t) in tensors.iter() {
                entries.push(TensorEntry {
                    name: name.clone(),
                    group: group.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset: payload.len() as u64,
                    frozen: frozen(name),
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let unfrozen = match &self.model {
            Model::Video(w) => w.unfrozen_spatial.iter().cloned().collect(),
            Model::T2i(_) => Vec::new(),
        };
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            role: self.role,
            config,
            unfrozen,
            training: self.training.as_ref().map(|t| TrainingHeader {
                step: t.step,
                seed: t.seed,
                adam: t.adam.config,
                adam_step: t.adam.step,
            }),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses checkpoint bytes; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| CliError::format(path, msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing STUNCKPT header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds the file")))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(bad(format!("format '{}' is not {FORMAT}", header.format)));
        }
        let payload = &bytes[header_end..];

        let mut spans: Vec<(u64, u64, &str)> = Vec::new();
        let mut groups: [NamedTensors; 4] = Default::default();
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("tensor '{}' has dtype {}, expected f64", e.name, e.dtype)));
            }
            let len = e.shape.iter().product::<usize>() as u64 * 8;
            let end = e.offset.checked_add(len).filter(|&end| end <= payload.len() as u64).ok_or_else(|| {
                bad(format!("tensor '{}' ({:?} at byte {}) lies outside the payload", e.name, e.shape, e.offset))
            })?;
            spans.push((e.offset, end, &e.name));
            let data: Vec<f64> = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(err.to_string()))?;
            let slot = match e.group.as_str() {
                "spatial" => 0,
                "temporal" => 1,
                ADAM_M => 2,
                ADAM_V => 3,
                other => return Err(bad(format!("tensor '{}' has unknown group '{other}'", e.name))),
            };
            if groups[slot].insert(e.name.clone(), t).is_some() {
                return Err(bad(format!("tensor '{}' appears twice in group {}", e.name, e.group)));
            }
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("tensors '{}' and '{}' overlap", w[0].2, w[1].2)));
            }
        }
        let used: u64 = spans.iter().map(|(a, b, _)| b - a).sum();
        if used != payload.len() as u64 {
            return Err(bad(format!("payload has {} bytes, tensors account for {used}", payload.len())));
        }

        let [spatial, temporal, m, v] = groups;
        let model = match header.kind {
            Kind::T2i => {
                let config: T2IConfig =
                    serde_json::from_value(header.config).map_err(|e| bad(format!("config: {e}")))?;
                if !temporal.is_empty() {
                    return Err(bad("image checkpoint carries temporal tensors".into()));
                }
                Model::T2i(T2IWeights::from_parts(config, spatial).map_err(|e| bad(e.to_string()))?)
            }
            Kind::Video => {
                let config: STUNetConfig =
                    serde_json::from_value(header.config).map_err(|e| bad(format!("config: {e}")))?;
                let unfrozen: BTreeSet<String> = header.unfrozen.into_iter().collect();
                Model::Video(
                    STUNetWeights::from_parts(config, spatial, temporal, unfrozen).map_err(|e| bad(e.to_string()))?,
                )
            }
        };
        let training = match header.training {
            None => None,
            Some(t) => {
                let params = match &model {
                    Model::T2i(w) => w.tensors.clone(),
                    Model::Video(w) => w.spatial.iter().chain(&w.temporal).map(|(k, v)| (k.clone(), v.clone())).collect(),
                };
                for (name, state) in m.iter().chain(&v) {
                    let p = params.get(name).ok_or_else(|| bad(format!("optimiser state for unknown tensor '{name}'")))?;
                    if p.shape() != state.shape() {
                        return Err(bad(format!(
                            "optimiser state for '{name}' is {:?}, tensor is {:?}",
                            state.shape(),
                            p.shape()
                        )));
                    }
                }
                Some(TrainingState { step: t.step, seed: t.seed, adam: Adam { config: t.adam, step: t.adam_step, m, v } })
            }
        };
        Ok(Checkpoint { role: header.role, model, training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&read_bytes(path)?, path)
    }

    pub fn into_t2i(self, path: &Path) -> Result<(Role, T2IWeights, Option<TrainingState>)> {
        match self.model {
            Model::T2i(w) => Ok((self.role, w, self.training)),
            Model::Video(_) => Err(CliError::config(format!("{} holds a video model, expected an image model", path.display()))),
        }
    }

    pub fn into_video(self, path: &Path) -> Result<(Role, STUNetWeights, Option<TrainingState>)> {
        match self.model {
            Model::Video(w) => Ok((self.role, w, self.training)),
            Model::T2i(_) => Err(CliError::config(format!("{} holds an image model, expected a video model", path.display()))),
        }
    }
}

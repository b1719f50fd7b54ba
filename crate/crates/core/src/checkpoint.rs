//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE version, `u32` LE header length, a JSON
//! header (configuration, profile, vocabulary, tensor names and shapes,
//! training metadata), then every tensor as little-endian `f32` in header
//! order, followed by the external vector table if there is one. Equal
//! models and metadata always serialize to equal bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExternalVectors, Model, ModelConfig, ModelError, Vocab};
use crate::schema::{DatasetProfile, SchemaError};
use crate::tensor::{ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"TGRAPHCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint truncated or has trailing bytes")]
    Length,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint profile does not match: {0}")]
    Profile(#[from] SchemaError),
}

/// Training facts stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    /// Dev micro F1 at the time of saving, when a dev split was used.
    pub dev_f1: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalEntry {
    dim: usize,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    profile: DatasetProfile,
    model: ModelConfig,
    vocab: Vocab,
    tensors: Vec<TensorEntry>,
    external: Option<ExternalEntry>,
    meta: CheckpointMeta,
}

fn push_f32s(out: &mut Vec<u8>, values: impl Iterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model (weights stored as `f32`).
pub fn to_bytes<F: Scalar>(model: &Model<F>, meta: &CheckpointMeta) -> Result<Vec<u8>, CheckpointError> {
    let header = Header {
        profile: model.profile().clone(),
        model: model.config().clone(),
        vocab: model.vocab().clone(),
        tensors: model
            .params()
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        external: model.external().map(|e| ExternalEntry {
            dim: e.dim(),
            tokens: e.tokens().to_vec(),
        }),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.params().scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.params().iter() {
        push_f32s(&mut out, t.data().iter().map(|x| x.to_f32().unwrap_or(f32::NAN)));
    }
    if let Some(e) = model.external() {
        push_f32s(&mut out, e.data().iter().copied());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Length)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Length)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Length)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Parses a checkpoint produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f32>, CheckpointMeta), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut params = ParamStore::new();
    for entry in &header.tensors {
        let n = entry.shape.iter().product();
        let data = r.f32s(n)?;
        let t = Tensor::from_vec(&entry.shape, data)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        params.add(&entry.name, t);
    }
    let external = match &header.external {
        Some(e) => {
            let data = r.f32s(e.dim * e.tokens.len())?;
            let entries = e
                .tokens
                .iter()
                .cloned()
                .zip(data.chunks(e.dim.max(1)).map(<[f32]>::to_vec))
                .collect();
            Some(ExternalVectors::new(e.dim, entries)?)
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::Length);
    }
    let model = Model::from_params(header.model, header.profile, header.vocab, external, params)?;
    Ok((model, header.meta))
}

pub fn save<F: Scalar>(path: &Path, model: &Model<F>, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    let bytes = to_bytes(model, meta)?;
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointMeta), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks it was trained for `profile`.
pub fn load_for(
    path: &Path,
    profile: &DatasetProfile,
) -> Result<(Model<f32>, CheckpointMeta), CheckpointError> {
    let (model, meta) = load(path)?;
    profile.ensure_matches(model.profile())?;
    Ok((model, meta))
}

//! Binary checkpoint format: magic, version, JSON header, raw f32 data.

use std::fs;
use std::io;
use std::path::Path;

use mtag_core::models::{Model, ModelConfig};
use mtag_core::nn::ParamKind;
use serde::{Deserialize, Serialize};

use crate::cache::{sha256_hex, write_atomic};

pub const CKPT_MAGIC: &[u8; 4] = b"CCML";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field(name: impl Into<String>, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Field {
        field: name.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Dataset the weights were last trained on.
    pub source_dataset_id: String,
    pub epochs_trained: usize,
    /// Hex SHA-256 of the tensor data section.
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_id: Option<String>,
    /// Content hash of the checkpoint this one was initialised from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tags: Vec<String>,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

/// A model with its tag vocabulary and provenance.
#[derive(Clone)]
pub struct ModelCheckpoint {
    pub model: Model<f32>,
    pub tags: Vec<String>,
    pub provenance: Provenance,
}

impl std::fmt::Debug for ModelCheckpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelCheckpoint")
            .field("arch", &self.model.config.kind())
            .field("tags", &self.tags)
            .field("provenance", &self.provenance)
            .finish()
    }
}

fn data_section(model: &Model<f32>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for (_, p) in model.params.iter() {
        entries.push(TensorEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.tensor.shape().to_vec(),
            offset: data.len() as u64,
        });
        for v in p.tensor.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    (entries, data)
}

/// Hex content hash of a model's parameters in checkpoint layout.
pub fn content_hash(model: &Model<f32>) -> String {
    sha256_hex(&data_section(model).1)
}

impl ModelCheckpoint {
    /// Wraps a model, filling in the content hash.
    pub fn new(model: Model<f32>, tags: Vec<String>, mut provenance: Provenance) -> Self {
        provenance.content_hash = content_hash(&model);
        Self {
            model,
            tags,
            provenance,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (tensors, data) = data_section(&self.model);
        let mut provenance = self.provenance.clone();
        provenance.content_hash = sha256_hex(&data);
        let header = Header {
            config: self.model.config.clone(),
            tags: self.tags.clone(),
            provenance,
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + data.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    /// Parses and fully validates a checkpoint; nothing is returned unless
    /// every tensor is present, shaped as the config requires and intact.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(field("magic", format!("file is {} bytes", bytes.len())));
        }
        if &bytes[..4] != CKPT_MAGIC {
            return Err(field("magic", format!("{:?}, expected {:?}", &bytes[..4], CKPT_MAGIC)));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != CKPT_VERSION {
            return Err(field("version", format!("{version}, expected {CKPT_VERSION}")));
        }
        let header_len = word(8) as usize;
        let json = bytes.get(12..12 + header_len).ok_or_else(|| {
            field(
                "header_length",
                format!("{header_len} bytes declared, {} available", bytes.len() - 12),
            )
        })?;
        let header: Header = serde_json::from_slice(json).map_err(|e| field("header", e.to_string()))?;
        let data = &bytes[12 + header_len..];

        let mut model = Model::<f32>::build(&header.config, 0).map_err(|e| field("config", e.to_string()))?;
        if header.tags.len() != header.config.n_tags {
            return Err(field(
                "tags",
                format!("{} tags for a {}-output model", header.tags.len(), header.config.n_tags),
            ));
        }
        let expected = model.params.manifest();
        if header.tensors.len() != expected.len() {
            return Err(field(
                "tensors",
                format!("{} entries, architecture has {}", header.tensors.len(), expected.len()),
            ));
        }
        let mut offset = 0u64;
        for (i, (t, (name, shape))) in header.tensors.iter().zip(&expected).enumerate() {
            if &t.name != name {
                return Err(field(
                    format!("tensors[{i}].name"),
                    format!("`{}`, expected `{name}`", t.name),
                ));
            }
            if &t.shape != shape {
                return Err(field(
                    format!("tensors[{i}].shape"),
                    format!("{:?} for `{name}`, expected {shape:?}", t.shape),
                ));
            }
            if t.offset != offset {
                return Err(field(
                    format!("tensors[{i}].offset"),
                    format!("{}, expected {offset}", t.offset),
                ));
            }
            offset += 4 * shape.iter().product::<usize>() as u64;
        }
        if data.len() as u64 != offset {
            return Err(field("data", format!("{} bytes, manifest needs {offset}", data.len())));
        }
        let hash = sha256_hex(data);
        if hash != header.provenance.content_hash {
            return Err(field("provenance.content_hash", "does not match tensor data"));
        }
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        for (id, t) in ids.into_iter().zip(&header.tensors) {
            let start = t.offset as usize;
            let dst = model.params.get_mut(id).tensor.data_mut();
            let len = dst.len();
            for (d, c) in dst.iter_mut().zip(data[start..start + 4 * len].chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            }
        }
        Ok(Self {
            model,
            tags: header.tags,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

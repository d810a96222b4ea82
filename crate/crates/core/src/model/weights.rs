//! Weight container: one line of magic, one line of JSON metadata, then the
//! parameter blob as little-endian `f32` in declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::BackboneSpec;
use crate::error::IoContext;
use crate::nn::ParamKind;
use crate::{Error, Result};

const MAGIC: &[u8] = b"FCDD-WEIGHTS 1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub trainable: bool,
    pub data: Vec<f32>,
}

/// Serialisable parameter snapshot of a [`super::Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub backbone: BackboneSpec,
    pub tensors: Vec<NamedTensor>,
    pub seed: u64,
    pub training_config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    backbone: BackboneSpec,
    seed: u64,
    training_config_digest: String,
    digest: String,
    tensors: Vec<TensorEntry>,
}

impl ModelWeights {
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.tensors.iter().map(|t| 4 * t.data.len()).sum());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the parameter blob, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.blob()))
    }

    /// Digest over the tensors whose names satisfy `keep`.
    pub fn digest_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for t in self.tensors.iter().filter(|t| keep(&t.name)) {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn trainable_mask(&self) -> Vec<(&str, bool)> {
        self.tensors.iter().map(|t| (t.name.as_str(), t.trainable)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = self.blob();
        let header = Header {
            backbone: self.backbone.clone(),
            seed: self.seed,
            training_config_digest: self.training_config_digest.clone(),
            digest: hex::encode(Sha256::digest(&blob)),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    kind: t.kind,
                    trainable: t.trainable,
                })
                .collect(),
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header)?);
        out.push(b'\n');
        out.extend(blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::WeightFile("missing weight-file magic".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::WeightFile("unterminated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl])?;
        let blob = &rest[nl + 1..];
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
        if blob.len() != expected {
            return Err(Error::WeightFile(format!("blob has {} bytes, header declares {expected}", blob.len())));
        }
        let digest = hex::encode(Sha256::digest(blob));
        if digest != header.digest {
            return Err(Error::WeightFile("blob digest mismatch".into()));
        }
        let mut offset = 0;
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = blob[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                offset += 4 * n;
                NamedTensor {
                    name: e.name,
                    shape: e.shape,
                    kind: e.kind,
                    trainable: e.trainable,
                    data,
                }
            })
            .collect();
        Ok(Self {
            backbone: header.backbone,
            tensors,
            seed: header.seed,
            training_config_digest: header.training_config_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

//! Pretrained trunk checkpoints in safetensors format, cached on disk.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::BackboneId;
use crate::error::IoContext;
use crate::nn::{Layer, Sequential};
use crate::{Error, Result};

/// Environment variable overriding the checkpoint cache directory.
pub const CACHE_ENV: &str = "FCDD_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainedSources {
    pub cache_dir: PathBuf,
    /// Source URI per backbone id (`file://`, plain path, or `http(s)://`).
    #[serde(default)]
    pub uris: BTreeMap<String, String>,
}

impl Default for PretrainedSources {
    fn default() -> Self {
        Self {
            cache_dir: std::env::var_os(CACHE_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(".fcdd-cache")),
            uris: BTreeMap::new(),
        }
    }
}

impl PretrainedSources {
    pub fn in_dir(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            cache_dir: cache_dir.into(),
            uris: BTreeMap::new(),
        }
    }

    pub fn cached_path(&self, id: &BackboneId) -> PathBuf {
        self.cache_dir.join(format!("{id}.safetensors"))
    }

    /// Local checkpoint path, fetching it into the cache when a URI is configured.
    pub fn resolve(&self, id: &BackboneId) -> Result<PathBuf> {
        let cached = self.cached_path(id);
        if cached.is_file() {
            return Ok(cached);
        }
        let uri = self.uris.get(&id.to_string()).ok_or_else(|| Error::PretrainedUnavailable {
            backbone: id.to_string(),
            reason: format!("not cached at {} and no source uri configured", cached.display()),
        })?;
        fetch(uri, &cached).map_err(|reason| Error::PretrainedUnavailable {
            backbone: id.to_string(),
            reason: format!("fetch from {uri} failed: {reason}"),
        })?;
        Ok(cached)
    }
}

fn fetch(uri: &str, dest: &Path) -> std::result::Result<(), String> {
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    let partial = dest.with_extension("partial");
    if uri.starts_with("http://") || uri.starts_with("https://") {
        let resp = ureq::get(uri).call().map_err(|e| e.to_string())?;
        let mut reader = resp.into_body().into_reader();
        let mut file = fs::File::create(&partial).map_err(|e| e.to_string())?;
        std::io::copy(&mut reader, &mut file).map_err(|e| e.to_string())?;
        file.flush().map_err(|e| e.to_string())?;
    } else {
        let src = uri.strip_prefix("file://").unwrap_or(uri);
        fs::copy(src, &partial).map_err(|e| format!("{src}: {e}"))?;
    }
    fs::rename(&partial, dest).map_err(|e| e.to_string())
}

/// Checkpoint tensors by name: `(shape, values)`.
pub type Checkpoint = HashMap<String, (Vec<usize>, Vec<f32>)>;

pub fn load_safetensors(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).at(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::WeightFile(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let values = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            // integer bookkeeping such as `num_batches_tracked`
            Dtype::I64 | Dtype::I32 => continue,
            other => {
                return Err(Error::WeightFile(format!("tensor `{name}` has unsupported dtype {other:?}")));
            }
        };
        out.insert(name, (view.shape().to_vec(), values));
    }
    Ok(out)
}

pub fn save_safetensors(path: &Path, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(n, s, v)| (n.clone(), s.clone(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::WeightFile(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, None, path).map_err(|e| Error::WeightFile(e.to_string()))
}

/// Overwrite every trunk tensor with its checkpoint counterpart.
pub fn load_trunk(trunk: &mut Sequential, checkpoint: &Checkpoint, id: &BackboneId) -> Result<()> {
    for p in trunk.params_mut() {
        let (shape, values) = checkpoint.get(&p.name).ok_or_else(|| Error::PretrainedUnavailable {
            backbone: id.to_string(),
            reason: format!("checkpoint lacks tensor `{}`", p.name),
        })?;
        if *shape != p.shape {
            return Err(Error::PretrainedUnavailable {
                backbone: id.to_string(),
                reason: format!("tensor `{}` has shape {shape:?}, expected {:?}", p.name, p.shape),
            });
        }
        p.value.copy_from_slice(values);
    }
    Ok(())
}

//! JSON checkpoint container. Floats are written in shortest round-trip
//! form and parsed exactly, so save then load is bit-exact.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::model::{Model, Param};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "serpent-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default)]
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: NetworkConfig,
    pub weights: Vec<NamedArray>,
    pub buffers: Vec<NamedArray>,
    /// Free-form run information, such as the metrics at save time.
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn named(name: &str, t: &Tensor, decay: bool) -> NamedArray {
    NamedArray {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
        decay,
    }
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Checks `arrays` against the expected names and shapes, in order.
fn restore<'a>(
    kind: &str,
    arrays: Vec<NamedArray>,
    expected: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>,
) -> Result<IndexMap<String, (Tensor, bool)>> {
    if arrays.len() != expected.len() {
        return Err(ckpt_err(format!("expected {} {kind}, found {}", expected.len(), arrays.len())));
    }
    let mut out = IndexMap::new();
    for (arr, (name, template)) in arrays.into_iter().zip(expected) {
        if &arr.name != name {
            return Err(ckpt_err(format!("{kind} {name} missing, found {}", arr.name)));
        }
        if arr.shape != template.shape() {
            return Err(ckpt_err(format!("{kind} {name}: shape {:?}, expected {:?}", arr.shape, template.shape())));
        }
        let t = Tensor::new(arr.shape, arr.data).map_err(|e| ckpt_err(format!("{kind} {name}: {e}")))?;
        out.insert(arr.name, (t, arr.decay));
    }
    Ok(out)
}

impl Model {
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config().clone(),
            weights: self.params().iter().map(|(k, p)| named(k, &p.value, p.decay)).collect(),
            buffers: self.buffers().iter().map(|(k, t)| named(k, t, false)).collect(),
            metadata,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ckpt_err(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ckpt_err(format!("unsupported version {}", ckpt.version)));
        }
        let template = Model::init(ckpt.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| ckpt_err(format!("invalid config: {e}")))?;
        let params = restore("weight", ckpt.weights, template.params().iter().map(|(k, p)| (k, &p.value)))?
            .into_iter()
            .map(|(k, (value, decay))| (k, Param { value, decay }))
            .collect();
        let buffers = restore("buffer", ckpt.buffers, template.buffers().iter())?
            .into_iter()
            .map(|(k, (t, _))| (k, t))
            .collect();
        Ok(Model::from_parts(ckpt.config, params, buffers))
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint(metadata)).map_err(|e| ckpt_err(e.to_string()))?;
        fs::write(path, text).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))
    }

    /// Loads a model and the metadata stored with it.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = fs::read_to_string(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
        let mut ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
        let metadata = std::mem::take(&mut ckpt.metadata);
        Ok((Self::from_checkpoint(ckpt)?, metadata))
    }
}

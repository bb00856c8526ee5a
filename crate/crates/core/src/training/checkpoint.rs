//! Checkpoint pair: a JSON manifest and a little-endian `f32` blob holding
//! the parameters followed by the two Adam moment sets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Adam;
use crate::error::{Error, Result};
use crate::model::{Config, FlowModel};
use crate::numerics::{FlowRng, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub adam: Adam,
    pub rng: FlowRng,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: Config,
    tensors: Vec<TensorEntry>,
    scalars: usize,
    adam_step: u64,
    rng: RngState,
    epoch: usize,
    actnorm_initialized: bool,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl Checkpoint {
    /// Writes `<base>.json` and `<base>.bin`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let store = &self.model.params;
        let mut tensors = Vec::new();
        let mut offset = 0;
        for id in store.ids() {
            let t = store.get(id);
            tensors.push(TensorEntry {
                name: store.name(id).to_string(),
                shape: t.shape().to_vec(),
                offset,
                trainable: store.is_trainable(id),
            });
            offset += t.numel();
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            tensors,
            scalars: offset,
            adam_step: self.adam.step,
            rng: RngState { seed: self.rng.seed(), stream: self.rng.stream(), word_pos: self.rng.word_pos().to_string() },
            epoch: self.epoch,
            actnorm_initialized: self.model.actnorm_initialized,
        };
        let mut blob = Vec::with_capacity(offset * 12);
        let values = store.ids().map(|id| store.get(id)).chain(&self.adam.m).chain(&self.adam.v);
        for t in values {
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let (jp, bp) = (with_ext(base, "json"), with_ext(base, "bin"));
        std::fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
        std::fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let (jp, bp) = (with_ext(base, "json"), with_ext(base, "bin"));
        let text = std::fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Manifest("missing version".into()))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::VersionMismatch { found: version as u32, expected: CHECKPOINT_VERSION });
        }
        let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Manifest(e.to_string()))?;
        let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        let expected = manifest.scalars * 3 * 4;
        if blob.len() != expected {
            return Err(Error::CorruptBlob { expected, found: blob.len() });
        }
        let floats: Vec<f64> =
            blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();

        let mut model = FlowModel::new(manifest.config.clone())?;
        if model.params.len() != manifest.tensors.len() {
            return Err(Error::Manifest(format!(
                "manifest lists {} tensors, the model has {}",
                manifest.tensors.len(),
                model.params.len()
            )));
        }
        let mut adam = Adam::new(&model.params, manifest.config.learning_rate);
        let ids: Vec<_> = model.params.ids().collect();
        for (k, (id, entry)) in ids.into_iter().zip(&manifest.tensors).enumerate() {
            if model.params.name(id) != entry.name || model.params.get(id).shape() != entry.shape.as_slice() {
                return Err(Error::Manifest(format!("tensor {} does not match the model layout", entry.name)));
            }
            let len: usize = entry.shape.iter().product();
            let end = entry.offset + len;
            if end > manifest.scalars {
                return Err(Error::Manifest(format!("tensor {} runs past the blob", entry.name)));
            }
            let part = |set: usize| {
                let base = set * manifest.scalars;
                Tensor::new(&entry.shape, floats[base + entry.offset..base + end].to_vec()).expect("length checked")
            };
            model.params.set(id, part(0));
            adam.m[k] = part(1);
            adam.v[k] = part(2);
        }
        adam.step = manifest.adam_step;
        model.actnorm_initialized = manifest.actnorm_initialized;
        let word_pos = manifest.rng.word_pos.parse::<u128>().map_err(|e| Error::Manifest(e.to_string()))?;
        let rng = FlowRng::restore(manifest.rng.seed, manifest.rng.stream, word_pos);
        Ok(Self { model, adam, rng, epoch: manifest.epoch })
    }
}

//! Checkpoint directories: `manifest.json` plus `params.safetensors`.
//!
//! The model hash is a SHA-256 over the model kind, its configuration and
//! every parameter (name, shape, little-endian `f64` bytes) in visiting
//! order. It identifies the weights independently of file layout and is
//! re-verified on load.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::nn::Params;
use ndarray::{ArrayViewD, ArrayViewMutD};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.safetensors";
pub const FRAMEMAE_KIND: &str = "framemae";
pub const SELECTOR_KIND: &str = "selector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub step: usize,
    pub seed: u64,
    pub model_hash: String,
    /// Hash of the upstream model this one depends on, if any.
    #[serde(default)]
    pub parent_hash: Option<String>,
}

pub fn fingerprint<C: Serialize, P: Params + ?Sized>(kind: &str, config: &C, params: &P) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(config).expect("config serializes"));
    params.visit("", &mut |name, a| {
        h.update(name.as_bytes());
        h.update([0]);
        for &d in a.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in a.iter() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

/// Serializes every visited tensor as F64.
pub fn params_to_safetensors<P: Params + ?Sized>(params: &P) -> Result<Vec<u8>> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    params.visit("", &mut |name, a| {
        let bytes = a.iter().flat_map(|v| v.to_le_bytes()).collect();
        owned.push((name.to_string(), a.shape().to_vec(), bytes));
    });
    let views = owned
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F64, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Fills `params` from safetensors bytes. Every visited tensor must be
/// present with matching shape and dtype; extra tensors are an error.
pub fn load_safetensors_into<P: Params + ?Sized>(params: &mut P, bytes: &[u8]) -> Result<()> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut seen = 0usize;
    let mut failure = None;
    params.visit_mut("", &mut |name, mut a| {
        if failure.is_some() {
            return;
        }
        let t = match st.tensor(name) {
            Ok(t) => t,
            Err(e) => {
                failure = Some(format!("tensor {name}: {e}"));
                return;
            }
        };
        if t.dtype() != Dtype::F64 || t.shape() != a.shape() {
            failure = Some(format!(
                "tensor {name}: expected F64 {:?}, found {:?} {:?}",
                a.shape(),
                t.dtype(),
                t.shape()
            ));
            return;
        }
        for (dst, chunk) in a.iter_mut().zip(t.data().chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        seen += 1;
    });
    if let Some(msg) = failure {
        return Err(Error::Checkpoint(msg));
    }
    if seen != st.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {seen}",
            st.len()
        )));
    }
    Ok(())
}

pub fn parse_manifest(bytes: &[u8]) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: crate::clipio::json_offset(bytes, &e),
        message: e.to_string(),
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            m.format_version
        )));
    }
    Ok(m)
}

/// Models that can be written to and restored from a checkpoint directory.
pub trait Checkpointable: Params + Sized {
    const KIND: &'static str;
    type Config: Serialize + DeserializeOwned;

    fn config(&self) -> &Self::Config;
    /// A model with correct shapes; values are overwritten on load.
    fn skeleton(config: Self::Config) -> Result<Self>;

    /// Fixed tensors stored and hashed with the parameters but never
    /// trained (the optimizer only sees [`Params`]).
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {}

    fn model_hash(&self) -> String {
        fingerprint(Self::KIND, self.config(), &Stored(self))
    }
}

/// Parameters followed by buffers: everything a checkpoint persists.
struct Stored<M>(M);

impl<M: Checkpointable> Params for Stored<&M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.0.visit(prefix, f);
        self.0.visit_buffers(f);
    }
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        unreachable!("read-only view")
    }
}

impl<M: Checkpointable> Params for Stored<&mut M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.0.visit(prefix, f);
        self.0.visit_buffers(f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.0.visit_mut(prefix, f);
        self.0.visit_buffers_mut(f);
    }
}

pub fn save<M: Checkpointable>(dir: &Path, model: &M, step: usize, seed: u64, parent_hash: Option<String>) -> Result<String> {
    fs::create_dir_all(dir).at(dir)?;
    let hash = model.model_hash();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind: M::KIND.to_string(),
        config: serde_json::to_value(model.config())?,
        step,
        seed,
        model_hash: hash.clone(),
        parent_hash,
    };
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, params_to_safetensors(&Stored(model))?).at(&path)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;
    Ok(hash)
}

pub fn load<M: Checkpointable>(dir: &Path) -> Result<(M, CheckpointManifest)> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let manifest = parse_manifest(&fs::read(&path).at(&path)?)?;
    if manifest.kind != M::KIND {
        return Err(Error::Checkpoint(format!(
            "expected a {} checkpoint, found {}",
            M::KIND,
            manifest.kind
        )));
    }
    let config: M::Config = serde_json::from_value(manifest.config.clone())?;
    let mut model = M::skeleton(config)?;
    let path = dir.join(PARAMS_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    load_safetensors_into(&mut Stored(&mut model), &fs::read(&path).at(&path)?)?;
    let found = model.model_hash();
    if found != manifest.model_hash {
        return Err(Error::ModelMismatch {
            expected: manifest.model_hash,
            found,
        });
    }
    Ok((model, manifest))
}

/// Name → shape listing, handy for diagnostics.
pub fn tensor_shapes<P: Params + ?Sized>(params: &P) -> HashMap<String, Vec<usize>> {
    let mut out = HashMap::new();
    params.visit("", &mut |n, a| {
        out.insert(n.to_string(), a.shape().to_vec());
    });
    out
}

impl Checkpointable for crate::framemae::FrameMae {
    const KIND: &'static str = FRAMEMAE_KIND;
    type Config = crate::patchcube::ModelConfig;

    fn config(&self) -> &Self::Config {
        &self.config
    }

    fn skeleton(config: Self::Config) -> Result<Self> {
        Self::new(config, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framemae::FrameMae;
    use crate::nn::{flatten, unflatten};
    use crate::patchcube::{ModelConfig, PosEmbedding};

    fn small() -> ModelConfig {
        ModelConfig {
            encoder_depth: 1,
            decoder_depth: 1,
            pos_embedding: PosEmbedding::Learnable,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = FrameMae::new(small(), 3).unwrap();
        model.mask_token.fill(0.25);
        let hash = save(dir.path(), &model, 12, 3, None).unwrap();
        let (back, manifest): (FrameMae, _) = load(dir.path()).unwrap();
        assert_eq!(manifest.step, 12);
        assert_eq!(manifest.model_hash, hash);
        assert_eq!(flatten(&back), flatten(&model));
        assert_eq!(back.fingerprint(), model.fingerprint());
    }

    #[test]
    fn hash_changes_with_any_weight() {
        let model = FrameMae::new(small(), 3).unwrap();
        let mut other = model.clone();
        let mut flat = flatten(&other);
        let last = flat.len() - 1;
        flat[last] += 1e-12;
        unflatten(&mut other, &flat);
        assert_ne!(model.fingerprint(), other.fingerprint());
    }

    #[test]
    fn tampered_params_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let model = FrameMae::new(small(), 3).unwrap();
        save(dir.path(), &model, 0, 3, None).unwrap();
        let mut other = model.clone();
        other.head.bias.fill(1.0);
        std::fs::write(dir.path().join(PARAMS_FILE), params_to_safetensors(&other).unwrap()).unwrap();
        assert!(matches!(load::<FrameMae>(dir.path()), Err(Error::ModelMismatch { .. })));
    }

    #[test]
    fn missing_manifest_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load::<FrameMae>(dir.path()).unwrap_err();
        assert!(err.to_string().contains(MANIFEST_FILE), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = FrameMae::new(small(), 0).unwrap();
        let bytes = params_to_safetensors(&model).unwrap();
        let mut bigger = FrameMae::new(
            ModelConfig {
                decoder_depth: 2,
                ..small()
            },
            0,
        )
        .unwrap();
        assert!(load_safetensors_into(&mut bigger, &bytes).is_err());
        let mut smaller = FrameMae::new(
            ModelConfig {
                decoder_depth: 0,
                ..small()
            },
            0,
        )
        .unwrap();
        assert!(load_safetensors_into(&mut smaller, &bytes).is_err());
    }
}

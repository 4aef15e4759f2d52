//! Bit-exact model persistence on top of the binary container format.
//!
//! A checkpoint carries the full parameter set, the Adam moments, a config
//! snapshot, and a fingerprint of the corpus it was trained on, so that
//! evaluation can refuse a checkpoint/corpus mismatch.

use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::numerics::{ParamStore, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: Value,
    pub corpus_fingerprint: String,
    pub params: Vec<(String, Tensor)>,
    /// Adam step counter plus first/second moments, parallel to `params`
    pub adam_t: u64,
    pub adam_m: Vec<(String, Tensor)>,
    pub adam_v: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshots the parameter store and optimizer moments.
    pub fn capture(
        store: &ParamStore,
        moments: Option<(&[Vec<f64>], &[Vec<f64>], u64)>,
        step: u64,
        config: Value,
        corpus_fingerprint: String,
    ) -> Self {
        let params: Vec<(String, Tensor)> = store
            .iter()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect();
        let (adam_m, adam_v, adam_t) = match moments {
            Some((m, v, t)) => {
                let pack = |slices: &[Vec<f64>]| {
                    params
                        .iter()
                        .zip(slices)
                        .map(|((name, p), s)| {
                            let mut t = Tensor::zeros(p.shape.clone());
                            t.data.copy_from_slice(s);
                            (name.clone(), t)
                        })
                        .collect::<Vec<_>>()
                };
                (pack(m), pack(v), t)
            }
            None => {
                let zeros = |_: ()| {
                    params
                        .iter()
                        .map(|(name, p)| (name.clone(), Tensor::zeros(p.shape.clone())))
                        .collect::<Vec<_>>()
                };
                (zeros(()), zeros(()), 0)
            }
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            config,
            corpus_fingerprint,
            params,
            adam_t,
            adam_m,
            adam_v,
        }
    }

    /// Writes parameters back into the store. Every tensor's presence and
    /// shape is verified before any parameter is mutated.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let mut ids = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let id = store.lookup(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint tensor {name:?} is unknown to this model"))
            })?;
            if store.get(id).shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name:?}: checkpoint {:?} vs model {:?}",
                    t.shape,
                    store.get(id).shape
                )));
            }
            ids.push(id);
        }
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, (_, t)) in ids.into_iter().zip(&self.params) {
            store.get_mut(id).data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    /// Adam moments in store order, verified against the given store.
    pub fn moments_for(&self, store: &ParamStore) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let unpack = |side: &[(String, Tensor)], label: &str| -> Result<Vec<Vec<f64>>> {
            store
                .iter()
                .map(|(name, p)| {
                    side.iter()
                        .find(|(n, _)| n == name)
                        .filter(|(_, t)| t.shape == p.shape)
                        .map(|(_, t)| t.data.clone())
                        .ok_or_else(|| {
                            Error::Checkpoint(format!("missing or misshapen {label} for {name:?}"))
                        })
                })
                .collect()
        };
        Ok((unpack(&self.adam_m, "adam.m")?, unpack(&self.adam_v, "adam.v")?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(json!({
            "kind": "checkpoint",
            "version": self.version,
            "step": self.step,
            "adam_t": self.adam_t,
            "corpus_fingerprint": self.corpus_fingerprint,
            "config": self.config,
        }));
        for (name, t) in &self.params {
            c.push(&format!("param.{name}"), t.clone());
        }
        for (name, t) in &self.adam_m {
            c.push(&format!("adam.m.{name}"), t.clone());
        }
        for (name, t) in &self.adam_v {
            c.push(&format!("adam.v.{name}"), t.clone());
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.meta["kind"] != "checkpoint" {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint container",
                path.display()
            )));
        }
        let version = c.meta["version"].as_u64().unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut params = Vec::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        for (name, t) in &c.tensors {
            if let Some(rest) = name.strip_prefix("param.") {
                params.push((rest.to_string(), t.clone()));
            } else if let Some(rest) = name.strip_prefix("adam.m.") {
                adam_m.push((rest.to_string(), t.clone()));
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                adam_v.push((rest.to_string(), t.clone()));
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name:?}")));
            }
        }
        Ok(Checkpoint {
            version,
            step: c.meta["step"].as_u64().unwrap_or(0),
            config: c.meta["config"].clone(),
            corpus_fingerprint: c.meta["corpus_fingerprint"]
                .as_str()
                .unwrap_or_default()
                .to_string(),
            params,
            adam_t: c.meta["adam_t"].as_u64().unwrap_or(0),
            adam_m,
            adam_v,
        })
    }
}

/// SHA-256 hex digest of a corpus directory's `meta.json`.
pub fn corpus_fingerprint(corpus_dir: &Path) -> Result<String> {
    let path = corpus_dir.join("meta.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

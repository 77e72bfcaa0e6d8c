//! Model checkpoints: one JSON tensor map per parameter store plus a
//! manifest naming the model and hashing every file.
//!
//! Loading rebuilds the model skeleton from the manifest and then
//! overwrites every parameter by name; names and shapes must match exactly.
//! Values round-trip bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::disentangle::{SteerConfig, SteerModel};
use crate::error::{Error, Result};
use crate::fusion::{build_fused_model, FusedModel, FusionSpec};
use crate::seqmodels::{EncoderConfig, EncoderKind, Task, TaskModel};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// What to rebuild before loading tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Task { encoder: EncoderConfig, task: Task, in_dim: usize, seed: u64 },
    Fused { encoder: EncoderConfig, task: Task, in_dim: usize, fusion: FusionSpec },
    Steer { config: SteerConfig, task: Task, in_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub file: String,
    pub sha256: String,
    pub tensors: usize,
    pub scalars: usize,
    /// [`ParamStore::fingerprint`] of the saved values.
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelSpec,
    pub stores: BTreeMap<String, StoreEntry>,
    /// Free-form provenance (seed, data hashes, command line).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

/// A model that can be written to and restored from a checkpoint.
pub trait Checkpoint: Sized {
    fn spec(&self) -> ModelSpec;
    fn stores(&self) -> Vec<(&'static str, &ParamStore)>;
    fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore)>;
    fn rebuild(spec: &ModelSpec) -> Result<Self>;
}

impl Checkpoint for TaskModel {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Task { encoder: self.cfg.clone(), task: self.task, in_dim: self.encoder.in_dim(), seed: self.seed }
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        vec![("params", &self.params)]
    }

    fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore)> {
        vec![("params", &mut self.params)]
    }

    fn rebuild(spec: &ModelSpec) -> Result<Self> {
        match spec {
            ModelSpec::Task { encoder, task, in_dim, seed } => TaskModel::new(encoder, *task, *in_dim, *seed),
            other => Err(mismatch("task", other)),
        }
    }
}

impl Checkpoint for FusedModel {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Fused {
            encoder: self.cfg.clone(),
            task: self.task,
            in_dim: self.encoder.in_dim,
            fusion: self.spec.clone(),
        }
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        vec![("params", &self.params)]
    }

    fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore)> {
        vec![("params", &mut self.params)]
    }

    fn rebuild(spec: &ModelSpec) -> Result<Self> {
        match spec {
            ModelSpec::Fused { encoder, task, in_dim, fusion } => {
                let mut cfg = encoder.clone();
                cfg.kind = EncoderKind::Tcn;
                let base = TaskModel::new(&cfg, *task, *in_dim, 0)?;
                build_fused_model(&base, fusion, 0)
            }
            other => Err(mismatch("fused", other)),
        }
    }
}

impl Checkpoint for SteerModel {
    fn spec(&self) -> ModelSpec {
        ModelSpec::Steer { config: self.cfg.clone(), task: self.task, in_dim: self.in_dim }
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        vec![("params", &self.params), ("discriminator", &self.disc_params)]
    }

    fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore)> {
        vec![("params", &mut self.params), ("discriminator", &mut self.disc_params)]
    }

    fn rebuild(spec: &ModelSpec) -> Result<Self> {
        match spec {
            ModelSpec::Steer { config, task, in_dim } => SteerModel::new(config, *task, *in_dim, 0),
            other => Err(mismatch("steer", other)),
        }
    }
}

fn mismatch(want: &str, got: &ModelSpec) -> Error {
    let got = match got {
        ModelSpec::Task { .. } => "task",
        ModelSpec::Fused { .. } => "fused",
        ModelSpec::Steer { .. } => "steer",
    };
    Error::Checkpoint(format!("expected a {want} model, manifest describes a {got} model"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn store_json(store: &ParamStore) -> Result<Vec<u8>> {
    let map: BTreeMap<&str, Tensor> = store
        .iter()
        .map(|(_, name, v)| {
            let data = v.iter().copied().collect();
            (name, Tensor { shape: [v.nrows(), v.ncols()], data })
        })
        .collect();
    Ok(serde_json::to_vec(&map)?)
}

fn fill_store(store: &mut ParamStore, bytes: &[u8], file: &str) -> Result<()> {
    let mut map: BTreeMap<String, Tensor> = serde_json::from_slice(bytes)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = map.remove(&name).ok_or_else(|| Error::Checkpoint(format!("{file}: missing tensor {name:?}")))?;
        let want = store.get(id).dim();
        if (t.shape[0], t.shape[1]) != want || t.data.len() != want.0 * want.1 {
            return Err(Error::Checkpoint(format!(
                "{file}: tensor {name:?} has shape {:?} ({} values), model expects {want:?}",
                t.shape,
                t.data.len()
            )));
        }
        *store.get_mut(id) = Array2::from_shape_vec(want, t.data).expect("length checked");
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Checkpoint(format!("{file}: unexpected tensor {extra:?}")));
    }
    Ok(())
}

/// Write `model` into `dir` (created if needed) and return the manifest.
pub fn save<M: Checkpoint>(model: &M, dir: &Path, meta: BTreeMap<String, String>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut stores = BTreeMap::new();
    for (name, store) in model.stores() {
        let bytes = store_json(store)?;
        let file = format!("{name}.json");
        fs::write(dir.join(&file), &bytes)?;
        let entry = StoreEntry {
            file,
            sha256: sha256_hex(&bytes),
            tensors: store.len(),
            scalars: store.num_scalars(),
            fingerprint: store.fingerprint(),
        };
        stores.insert(name.to_string(), entry);
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, model: model.spec(), stores, meta };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Restore a model saved by [`save`], checking hashes, names and shapes.
pub fn load<M: Checkpoint>(dir: &Path) -> Result<M> {
    let manifest = read_manifest(dir)?;
    let mut model = M::rebuild(&manifest.model)?;
    let names: Vec<&str> = model.stores().iter().map(|(n, _)| *n).collect();
    if names.len() != manifest.stores.len() || names.iter().any(|n| !manifest.stores.contains_key(*n)) {
        return Err(Error::Checkpoint(format!(
            "manifest lists stores {:?}, model has {names:?}",
            manifest.stores.keys().collect::<Vec<_>>()
        )));
    }
    for (name, store) in model.stores_mut() {
        let entry = &manifest.stores[name];
        let bytes = fs::read(dir.join(&entry.file))?;
        let digest = sha256_hex(&bytes);
        if digest != entry.sha256 {
            return Err(Error::Checkpoint(format!("{}: sha256 {digest} does not match manifest", entry.file)));
        }
        fill_store(store, &bytes, &entry.file)?;
        if store.fingerprint() != entry.fingerprint {
            return Err(Error::Checkpoint(format!("{}: restored values differ from the saved fingerprint", entry.file)));
        }
    }
    Ok(model)
}

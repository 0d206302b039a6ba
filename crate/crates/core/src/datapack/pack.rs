//! Pack directories: `manifest.json` plus one `.davt` file per recorded
//! layer under `tensors/<checkpoint-key>/<domain>.<split>[.<batch>].<layer>.davt`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::bundle::{BundleId, CheckpointKey, Layer, OutputsBundle};
use super::manifest::{BundleEntry, CheckpointRecord, PackManifest};
use super::tensor::TensorFile;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_DIR: &str = "tensors";

/// Read access to a pack, wherever its arrays live.
pub trait BundleSource: Sync {
    fn manifest(&self) -> &PackManifest;

    fn bundle(&self, key: &CheckpointKey, id: &BundleId) -> Result<Arc<OutputsBundle>>;
}

fn invariant(key: &CheckpointKey, id: &BundleId, what: impl Into<String>) -> Error {
    Error::Invariant {
        checkpoint: key.to_string(),
        bundle: id.to_string(),
        what: what.into(),
    }
}

/// A pack held entirely in memory.
#[derive(Debug, Clone)]
pub struct MemoryPack {
    manifest: PackManifest,
    bundles: HashMap<(CheckpointKey, BundleId), Arc<OutputsBundle>>,
}

impl MemoryPack {
    /// Starts from a manifest whose roster is ignored; records are added
    /// with [`MemoryPack::add_record`].
    pub fn new(mut manifest: PackManifest) -> Self {
        manifest.checkpoints.clear();
        Self {
            manifest,
            bundles: HashMap::new(),
        }
    }

    pub fn manifest_mut(&mut self) -> &mut PackManifest {
        &mut self.manifest
    }

    /// Adds a checkpoint and its bundles, checking every bundle invariant.
    pub fn add_record(
        &mut self,
        key: CheckpointKey,
        epoch: u32,
        is_source_only: bool,
        bundles: Vec<(BundleId, OutputsBundle)>,
    ) -> Result<()> {
        key.check()?;
        if self.manifest.record(&key).is_some() {
            return Err(Error::DuplicateKey(key.to_string()));
        }
        let regression = self.manifest.setting.is_regression();
        let mut record = CheckpointRecord::new(&key, epoch, is_source_only);
        let mut staged = Vec::with_capacity(bundles.len());
        for (id, bundle) in bundles {
            bundle
                .validate(self.manifest.num_classes, regression)
                .map_err(|what| invariant(&key, &id, what))?;
            record.bundles.push(BundleEntry {
                id,
                rows: bundle.rows(),
                layers: bundle.layers(),
            });
            staged.push((id, bundle));
        }
        self.manifest.checkpoints.push(record);
        if let Err(e) = self.manifest.validate() {
            self.manifest.checkpoints.pop();
            return Err(e);
        }
        for (id, bundle) in staged {
            self.bundles.insert((key.clone(), id), Arc::new(bundle));
        }
        Ok(())
    }
}

impl BundleSource for MemoryPack {
    fn manifest(&self) -> &PackManifest {
        &self.manifest
    }

    fn bundle(&self, key: &CheckpointKey, id: &BundleId) -> Result<Arc<OutputsBundle>> {
        self.bundles
            .get(&(key.clone(), *id))
            .cloned()
            .ok_or_else(|| Error::missing(format!("bundle {id} of checkpoint {key}")))
    }
}

/// A pack directory on disk. Bundles load on first access and are cached.
#[derive(Debug)]
pub struct Pack {
    root: PathBuf,
    manifest: PackManifest,
    cache: Mutex<HashMap<(CheckpointKey, BundleId), Arc<OutputsBundle>>>,
}

fn layer_path(root: &Path, key: &CheckpointKey, id: &BundleId, layer: Layer) -> PathBuf {
    root.join(TENSOR_DIR)
        .join(key.to_string())
        .join(format!("{}.{}.davt", id.stem(), layer.as_str()))
}

impl Pack {
    pub fn root(&self) -> &Path {
        &self.root
    }

    fn load(&self, key: &CheckpointKey, entry: &BundleEntry) -> Result<OutputsBundle> {
        let id = &entry.id;
        let mut bundle = OutputsBundle::new();
        for &layer in &entry.layers {
            let tensor = TensorFile::read(&layer_path(&self.root, key, id, layer))?;
            match layer {
                Layer::Labels => bundle.labels = Some(tensor.into_labels()?),
                Layer::Features => bundle.features = Some(tensor.into_matrix()?),
                Layer::Logits => bundle.logits = Some(tensor.into_matrix()?),
                Layer::Predictions => bundle.predictions = Some(tensor.into_matrix()?),
                Layer::Targets => bundle.targets = Some(tensor.into_matrix()?),
            }
        }
        if bundle.rows() != entry.rows {
            return Err(invariant(
                key,
                id,
                format!("manifest lists {} rows, tensors have {}", entry.rows, bundle.rows()),
            ));
        }
        bundle
            .validate(self.manifest.num_classes, self.manifest.setting.is_regression())
            .map_err(|what| invariant(key, id, what))?;
        Ok(bundle)
    }

    /// Loads every bundle, re-checking all invariants.
    pub fn check_all(&self) -> Result<usize> {
        let mut n = 0;
        for rec in &self.manifest.checkpoints {
            let key = rec.key();
            for entry in &rec.bundles {
                self.load(&key, entry)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

impl BundleSource for Pack {
    fn manifest(&self) -> &PackManifest {
        &self.manifest
    }

    fn bundle(&self, key: &CheckpointKey, id: &BundleId) -> Result<Arc<OutputsBundle>> {
        if let Some(b) = self.cache.lock().expect("cache poisoned").get(&(key.clone(), *id)) {
            return Ok(b.clone());
        }
        let entry = self
            .manifest
            .record(key)
            .and_then(|r| r.bundle(id))
            .ok_or_else(|| Error::missing(format!("bundle {id} of checkpoint {key}")))?;
        let loaded = Arc::new(self.load(key, entry)?);
        let mut cache = self.cache.lock().expect("cache poisoned");
        Ok(cache.entry((key.clone(), *id)).or_insert(loaded).clone())
    }
}

/// Writes `source` as a pack directory at `dir`, replacing any pack there.
pub fn write_pack(dir: &Path, source: &dyn BundleSource) -> Result<()> {
    let manifest = source.manifest();
    manifest.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensor_root = dir.join(TENSOR_DIR);
    if tensor_root.exists() {
        fs::remove_dir_all(&tensor_root).map_err(|e| Error::io(&tensor_root, e))?;
    }
    for rec in &manifest.checkpoints {
        let key = rec.key();
        let ckpt_dir = tensor_root.join(key.to_string());
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        for entry in &rec.bundles {
            let bundle = source.bundle(&key, &entry.id)?;
            for &layer in &entry.layers {
                let tensor = match layer {
                    Layer::Labels => bundle.labels.as_deref().map(TensorFile::from_labels),
                    other => bundle.matrix(other).map(TensorFile::from_matrix),
                }
                .ok_or_else(|| invariant(&key, &entry.id, format!("layer {layer} listed but absent")))?;
                tensor.write(&layer_path(dir, &key, &entry.id, layer))?;
            }
        }
    }
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Opens a pack directory, validating the manifest. Bundles are read lazily.
pub fn read_pack(dir: &Path) -> Result<Pack> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: PackManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(Pack {
        root: dir.to_path_buf(),
        manifest,
        cache: Mutex::new(HashMap::new()),
    })
}

/// Reads a one-column CSV of class indices. A non-numeric first row is
/// treated as a header.
pub fn read_labels_csv(path: &Path) -> Result<Vec<u32>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut labels = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() != 1 {
            return Err(Error::Shape(format!(
                "{}: row {i} has {} columns, expected 1",
                path.display(),
                row.len()
            )));
        }
        match row[0].trim().parse::<u32>() {
            Ok(v) => labels.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::Shape(format!(
                    "{}: row {i} is not a non-negative integer: {:?}",
                    path.display(),
                    &row[0]
                )))
            }
        }
    }
    Ok(labels)
}

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::clustering::{
    adjusted_mutual_info, adjusted_rand_index, calinski_harabasz, davies_bouldin, fowlkes_mallows, silhouette,
    v_measure,
};
use super::scores;
use super::spec::{SplitRef, ValidatorKind, ValidatorSpec};
use crate::datapack::{BundleId, BundleSource, CheckpointKey, Domain, Layer, OutputsBundle, SplitTag};
use crate::error::{Error, Result};
use crate::numerics::kmeans;
use crate::seed;

/// One (checkpoint, validator) cell. `raw` and `oriented` are `None` when
/// the score is undefined for this checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatorScore {
    pub checkpoint: String,
    pub validator: String,
    pub fingerprint: String,
    pub raw: Option<f64>,
    pub oriented: Option<f64>,
}

impl ValidatorScore {
    pub fn is_valid(&self) -> bool {
        self.raw.is_some()
    }
}

/// Row label of a checkpoint, with the batch appended for episodic packs.
pub fn score_key(key: &CheckpointKey, batch: Option<u32>) -> String {
    match batch {
        Some(b) => format!("{key}#{b}"),
        None => key.to_string(),
    }
}

/// Splits `key#batch` back into its parts.
pub fn parse_score_key(s: &str) -> Result<(CheckpointKey, Option<u32>)> {
    match s.rsplit_once('#') {
        Some((k, b)) => {
            let batch = b
                .parse()
                .map_err(|_| Error::invalid(format!("bad batch index in {s:?}")))?;
            Ok((k.parse()?, Some(batch)))
        }
        None => Ok((s.parse()?, None)),
    }
}

fn to_f64(m: &Array2<f32>) -> Array2<f64> {
    m.mapv(f64::from)
}

/// Scores validators for one checkpoint (one batch, in episodic packs),
/// sharing bundle loads and k-means runs between specs.
pub struct CheckpointScorer<'a> {
    pack: &'a dyn BundleSource,
    key: CheckpointKey,
    batch: Option<u32>,
    seed: u64,
    bundles: HashMap<BundleId, Arc<OutputsBundle>>,
    clusters: HashMap<String, Result<Vec<usize>, String>>,
}

struct Pooled {
    source: Option<Array2<f64>>,
    target: Option<Array2<f64>>,
    all: Array2<f64>,
}

impl<'a> CheckpointScorer<'a> {
    pub fn new(pack: &'a dyn BundleSource, key: CheckpointKey, batch: Option<u32>, seed: u64) -> Self {
        Self {
            pack,
            key,
            batch,
            seed,
            bundles: HashMap::new(),
            clusters: HashMap::new(),
        }
    }

    fn bundle_id(&self, split: SplitRef) -> Result<BundleId> {
        let episodic = self.pack.manifest().setting.is_episodic();
        match (episodic, self.batch) {
            (true, Some(b)) => Ok(BundleId::batch(Domain::Target, SplitTag::Test, b)),
            (true, None) => Err(Error::invalid("episodic packs are scored one batch at a time")),
            (false, None) => Ok(BundleId::new(split.domain(), split.tag())),
            (false, Some(_)) => Err(Error::invalid("batch given for a non-episodic pack")),
        }
    }

    fn bundle(&mut self, split: SplitRef) -> Result<Arc<OutputsBundle>> {
        let id = self.bundle_id(split)?;
        if let Some(b) = self.bundles.get(&id) {
            return Ok(b.clone());
        }
        let rec = self
            .pack
            .manifest()
            .record(&self.key)
            .ok_or_else(|| Error::missing(format!("checkpoint {}", self.key)))?;
        if rec.bundle(&id).is_none() {
            return Err(Error::missing(format!("bundle {id} of checkpoint {}", self.key)));
        }
        let b = self.pack.bundle(&self.key, &id)?;
        self.bundles.insert(id, b.clone());
        Ok(b)
    }

    fn layer(&mut self, split: SplitRef, layer: Layer) -> Result<Array2<f64>> {
        let b = self.bundle(split)?;
        b.matrix(layer)
            .map(to_f64)
            .ok_or_else(|| Error::missing(format!("{layer} in {} bundle of {}", split.code(), self.key)))
    }

    fn pooled(&mut self, spec: &ValidatorSpec) -> Result<Pooled> {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for &s in spec.splits.parts() {
            let m = self.layer(s, spec.layer)?;
            match s.domain() {
                Domain::Source => src.push(m),
                Domain::Target => tgt.push(m),
            }
        }
        let cat = |parts: &[Array2<f64>]| -> Result<Option<Array2<f64>>> {
            if parts.is_empty() {
                return Ok(None);
            }
            let views: Vec<ArrayView2<f64>> = parts.iter().map(|m| m.view()).collect();
            concatenate(Axis(0), &views)
                .map(Some)
                .map_err(|e| Error::Shape(format!("cannot pool splits: {e}")))
        };
        let source = cat(&src)?;
        let target = cat(&tgt)?;
        let all = match (&source, &target) {
            (Some(s), Some(t)) => concatenate(Axis(0), &[s.view(), t.view()])
                .map_err(|e| Error::Shape(format!("cannot pool domains: {e}")))?,
            (Some(s), None) => s.clone(),
            (None, Some(t)) => t.clone(),
            (None, None) => unreachable!("split sets are non-empty"),
        };
        Ok(Pooled { source, target, all })
    }

    fn predicted(&mut self, spec: &ValidatorSpec) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &s in spec.splits.parts() {
            let b = self.bundle(s)?;
            let classes = b
                .predicted_classes()
                .ok_or_else(|| Error::missing(format!("predictions in {} bundle of {}", s.code(), self.key)))?;
            out.extend(classes);
        }
        Ok(out)
    }

    fn cluster_labels(&mut self, spec: &ValidatorSpec, data: ArrayView2<f64>) -> Result<Vec<usize>> {
        let params = serde_json::to_string(&spec.params.clustering).expect("params serialise");
        let cache_key = format!("{}|{}|{params}", spec.layer, spec.splits);
        if let Some(hit) = self.clusters.get(&cache_key) {
            return hit.clone().map_err(Error::Undefined);
        }
        let batch = self.batch.map(|b| b.to_string()).unwrap_or_default();
        let key = self.key.to_string();
        let layer = spec.layer.to_string();
        let splits = spec.splits.to_string();
        let seed = seed::derive(self.seed, &["kmeans", &key, &batch, &layer, &splits]);
        let cfg = spec.params.clustering.config(self.pack.manifest().num_classes, seed);
        let result = if data.nrows() < cfg.k {
            Err(format!("{} points cannot form {} clusters", data.nrows(), cfg.k))
        } else {
            match kmeans(data, &cfg) {
                Ok(r) => Ok(r.labels),
                Err(Error::Undefined(m)) => Err(m),
                Err(e) => return Err(e),
            }
        };
        self.clusters.insert(cache_key, result.clone());
        result.map_err(Error::Undefined)
    }

    /// Raw score of `spec`. `Error::Undefined` marks a score that does not
    /// exist for this checkpoint; other errors are fatal.
    pub fn raw(&mut self, spec: &ValidatorSpec) -> Result<f64> {
        let p = &spec.params;
        let raw = match spec.kind {
            ValidatorKind::Accuracy => {
                let mut labels = Vec::new();
                for &s in spec.splits.parts() {
                    let b = self.bundle(s)?;
                    let l = b
                        .labels
                        .as_ref()
                        .ok_or_else(|| Error::missing(format!("labels in {} bundle of {}", s.code(), self.key)))?;
                    labels.extend_from_slice(l);
                }
                scores::accuracy(&self.predicted(spec)?, &labels)?
            }
            ValidatorKind::Mse => {
                // box outputs live in the logits layer of regression packs
                let mut outs = Vec::new();
                let mut targets = Vec::new();
                for &s in spec.splits.parts() {
                    outs.push(self.layer(s, Layer::Logits)?);
                    targets.push(self.layer(s, Layer::Targets)?);
                }
                let cat = |v: &[Array2<f64>]| {
                    concatenate(Axis(0), &v.iter().map(|m| m.view()).collect::<Vec<_>>())
                        .map_err(|e| Error::Shape(e.to_string()))
                };
                scores::mse(cat(&outs)?.view(), cat(&targets)?.view())?
            }
            ValidatorKind::Entropy => scores::mean_entropy(self.pooled(spec)?.all.view())?,
            ValidatorKind::InfoMax => scores::infomax(self.pooled(spec)?.all.view())?,
            ValidatorKind::Bnm => scores::bnm(self.pooled(spec)?.all.view())?,
            ValidatorKind::RankMe => scores::rankme(self.pooled(spec)?.all.view(), p.epsilon)?,
            ValidatorKind::Snd => scores::snd(self.pooled(spec)?.all.view(), p.temperature, p.exclude_self)?,
            ValidatorKind::Mmd | ValidatorKind::Coral => {
                let pooled = self.pooled(spec)?;
                let (s, t) = match (&pooled.source, &pooled.target) {
                    (Some(s), Some(t)) => (s.view(), t.view()),
                    _ => return Err(Error::invalid(format!("{} needs source and target splits", spec.kind))),
                };
                if spec.kind == ValidatorKind::Mmd {
                    scores::mmd(s, t, p.bandwidth)?
                } else {
                    scores::coral(s, t)?
                }
            }
            kind if kind.is_external_clustering() => {
                let pooled = self.pooled(spec)?;
                let predicted = self.predicted(spec)?;
                let clusters = self.cluster_labels(spec, pooled.all.view())?;
                let f = match kind {
                    ValidatorKind::Ami => adjusted_mutual_info,
                    ValidatorKind::Ari => adjusted_rand_index,
                    ValidatorKind::VMeasure => v_measure,
                    _ => fowlkes_mallows,
                };
                f(&predicted, &clusters)?
            }
            kind => {
                let pooled = self.pooled(spec)?;
                let predicted = self.predicted(spec)?;
                let f = match kind {
                    ValidatorKind::Silhouette => silhouette,
                    ValidatorKind::Dbi => davies_bouldin,
                    _ => calinski_harabasz,
                };
                f(pooled.all.view(), &predicted)?
            }
        };
        if raw.is_finite() {
            Ok(raw)
        } else {
            Err(Error::undefined(format!("{} evaluated to {raw}", spec.id())))
        }
    }

    /// Scores `spec`, recording undefined scores as invalid cells.
    pub fn score(&mut self, spec: &ValidatorSpec) -> Result<ValidatorScore> {
        let (raw, oriented) = match self.raw(spec) {
            Ok(r) => (Some(r), Some(spec.orientation().orient(r))),
            Err(Error::Undefined(_)) => (None, None),
            Err(e) => return Err(e),
        };
        Ok(ValidatorScore {
            checkpoint: score_key(&self.key, self.batch),
            validator: spec.id(),
            fingerprint: spec.fingerprint(),
            raw,
            oriented,
        })
    }
}

/// Scores one spec on one checkpoint after checking that it applies to
/// the pack's setting.
pub fn evaluate(
    spec: &ValidatorSpec,
    pack: &dyn BundleSource,
    key: &CheckpointKey,
    batch: Option<u32>,
    seed: u64,
) -> Result<ValidatorScore> {
    spec.check_applicable(pack.manifest().setting)?;
    CheckpointScorer::new(pack, key.clone(), batch, seed).score(spec)
}

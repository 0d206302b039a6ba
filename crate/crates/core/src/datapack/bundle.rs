//! Identifiers and the per-checkpoint output arrays.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

/// The recorded layers of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Features,
    Logits,
    Predictions,
    Labels,
    /// Regression targets (N x 4 boxes).
    Targets,
}

impl Layer {
    pub const ALL: [Layer; 5] = [
        Layer::Features,
        Layer::Logits,
        Layer::Predictions,
        Layer::Labels,
        Layer::Targets,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Features => "features",
            Layer::Logits => "logits",
            Layer::Predictions => "predictions",
            Layer::Labels => "labels",
            Layer::Targets => "targets",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layer::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown layer {s:?}")))
    }
}

/// Which slice of data a bundle was recorded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BundleId {
    pub domain: Domain,
    pub split: SplitTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<u32>,
}

impl BundleId {
    pub const fn new(domain: Domain, split: SplitTag) -> Self {
        Self {
            domain,
            split,
            batch: None,
        }
    }

    pub const fn batch(domain: Domain, split: SplitTag, batch: u32) -> Self {
        Self {
            domain,
            split,
            batch: Some(batch),
        }
    }

    /// File stem `<domain>.<split>[.<batch>]`.
    pub fn stem(&self) -> String {
        match self.batch {
            Some(b) => format!("{}.{}.{}", self.domain.as_str(), self.split.as_str(), b),
            None => format!("{}.{}", self.domain.as_str(), self.split.as_str()),
        }
    }
}

impl fmt::Display for BundleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.stem())
    }
}

/// `(algorithm, hyperparameter draw, checkpoint index)`; rendered as
/// `algorithm__hyperparams__index`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CheckpointKey {
    pub algorithm: String,
    pub hyperparams: String,
    pub index: u32,
}

const KEY_SEP: &str = "__";

fn check_component(what: &str, s: &str) -> Result<()> {
    let ok_chars = s
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '+' | '.' | '_'));
    if s.is_empty() || !ok_chars || s.contains(KEY_SEP) || s.starts_with('_') || s.ends_with('_') {
        return Err(Error::invalid(format!(
            "{what} {s:?} must be non-empty, use [A-Za-z0-9+-._] and not contain \"__\""
        )));
    }
    Ok(())
}

impl CheckpointKey {
    pub fn new(algorithm: impl Into<String>, hyperparams: impl Into<String>, index: u32) -> Result<Self> {
        let key = Self {
            algorithm: algorithm.into(),
            hyperparams: hyperparams.into(),
            index,
        };
        key.check()?;
        Ok(key)
    }

    pub fn check(&self) -> Result<()> {
        check_component("algorithm id", &self.algorithm)?;
        check_component("hyperparameter id", &self.hyperparams)
    }
}

impl fmt::Display for CheckpointKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{KEY_SEP}{}{KEY_SEP}{}",
            self.algorithm, self.hyperparams, self.index
        )
    }
}

impl FromStr for CheckpointKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(KEY_SEP).collect();
        let [alg, hp, idx] = parts.as_slice() else {
            return Err(Error::invalid(format!("malformed checkpoint key {s:?}")));
        };
        let index = idx
            .parse()
            .map_err(|_| Error::invalid(format!("malformed checkpoint index in {s:?}")))?;
        CheckpointKey::new(*alg, *hp, index)
    }
}

/// One checkpoint's recorded arrays for one data split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputsBundle {
    pub features: Option<Array2<f32>>,
    pub logits: Option<Array2<f32>>,
    pub predictions: Option<Array2<f32>>,
    pub labels: Option<Vec<u32>>,
    pub targets: Option<Array2<f32>>,
}

/// Tolerance on prediction row sums.
pub const ROW_SUM_TOL: f64 = 1e-4;

impl OutputsBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_features(mut self, m: Array2<f32>) -> Self {
        self.features = Some(m);
        self
    }

    pub fn with_logits(mut self, m: Array2<f32>) -> Self {
        self.logits = Some(m);
        self
    }

    pub fn with_predictions(mut self, m: Array2<f32>) -> Self {
        self.predictions = Some(m);
        self
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_targets(mut self, m: Array2<f32>) -> Self {
        self.targets = Some(m);
        self
    }

    pub fn matrix(&self, layer: Layer) -> Option<&Array2<f32>> {
        match layer {
            Layer::Features => self.features.as_ref(),
            Layer::Logits => self.logits.as_ref(),
            Layer::Predictions => self.predictions.as_ref(),
            Layer::Targets => self.targets.as_ref(),
            Layer::Labels => None,
        }
    }

    pub fn has(&self, layer: Layer) -> bool {
        match layer {
            Layer::Labels => self.labels.is_some(),
            other => self.matrix(other).is_some(),
        }
    }

    pub fn layers(&self) -> Vec<Layer> {
        Layer::ALL.into_iter().filter(|l| self.has(*l)).collect()
    }

    /// Row count shared by all present arrays (0 when empty).
    pub fn rows(&self) -> usize {
        [Layer::Features, Layer::Logits, Layer::Predictions, Layer::Targets]
            .into_iter()
            .find_map(|l| self.matrix(l).map(|m| m.nrows()))
            .or_else(|| self.labels.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    /// Row-wise argmax of predictions, falling back to logits.
    pub fn predicted_classes(&self) -> Option<Vec<usize>> {
        self.predictions
            .as_ref()
            .or(self.logits.as_ref())
            .map(|m| m.rows().into_iter().map(|r| argmax(r.iter().copied())).collect())
    }

    /// Checks every type invariant. The returned message names the
    /// offending row where one exists.
    pub fn validate(&self, num_classes: usize, regression: bool) -> std::result::Result<(), String> {
        if self.layers().is_empty() {
            return Err("bundle has no layers".into());
        }
        let n = self.rows();
        for layer in Layer::ALL {
            let rows = match layer {
                Layer::Labels => self.labels.as_ref().map(Vec::len),
                l => self.matrix(l).map(|m| m.nrows()),
            };
            if let Some(rows) = rows {
                if rows != n {
                    return Err(format!("{layer} has {rows} rows, expected {n}"));
                }
            }
        }
        for layer in [Layer::Features, Layer::Logits, Layer::Predictions, Layer::Targets] {
            if let Some(m) = self.matrix(layer) {
                if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                    return Err(format!("{layer} row {} has a non-finite entry", pos / m.ncols().max(1)));
                }
            }
        }
        if regression {
            for layer in [Layer::Logits, Layer::Targets] {
                if let Some(m) = self.matrix(layer) {
                    if m.ncols() != 4 {
                        return Err(format!("regression {layer} must have 4 columns, found {}", m.ncols()));
                    }
                }
            }
        } else {
            if let Some(l) = &self.logits {
                if l.ncols() != num_classes {
                    return Err(format!("logits have {} columns, expected {num_classes}", l.ncols()));
                }
            }
            if let Some(t) = &self.targets {
                return Err(format!(
                    "classification bundle carries {} regression target columns",
                    t.ncols()
                ));
            }
        }
        if let Some(p) = &self.predictions {
            if p.ncols() != num_classes {
                return Err(format!(
                    "predictions have {} columns, expected {num_classes}",
                    p.ncols()
                ));
            }
            for (i, row) in p.axis_iter(Axis(0)).enumerate() {
                if row.iter().any(|&v| v < 0.0) {
                    return Err(format!("predictions row {i} has a negative entry"));
                }
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(format!("predictions row {i} sums to {s}"));
                }
            }
            if let (Some(l), false) = (&self.logits, regression) {
                for (i, (lr, pr)) in l.axis_iter(Axis(0)).zip(p.axis_iter(Axis(0))).enumerate() {
                    let j = argmax(lr.iter().copied());
                    let pmax = pr.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    // softmax can tie nearly-equal logits in f32
                    if (pmax - pr[j]) as f64 > 1e-6 {
                        return Err(format!("row {i}: argmax of logits and predictions disagree"));
                    }
                }
            }
        }
        if let Some(labels) = &self.labels {
            if let Some((i, y)) = labels.iter().enumerate().find(|(_, &y)| y as usize >= num_classes) {
                return Err(format!("label at row {i} is {y}, outside [0, {num_classes})"));
            }
        }
        Ok(())
    }
}

/// Index of the first maximal element.
pub fn argmax<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::bbox::NUM_BOX_CLASSES;
use super::bundle::{BundleId, CheckpointKey, Domain, Layer, SplitTag};
use super::splits::SplitAssignment;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Adaptation setting of a pack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "UDA")]
    Uda,
    #[serde(rename = "SFDA")]
    Sfda,
    #[serde(rename = "TTA")]
    Tta,
    #[serde(rename = "UDA-regression")]
    UdaRegression,
}

impl Setting {
    /// Whether validators may see source-domain data.
    pub fn has_source_data(self) -> bool {
        matches!(self, Setting::Uda | Setting::UdaRegression)
    }

    pub fn is_regression(self) -> bool {
        self == Setting::UdaRegression
    }

    pub fn is_episodic(self) -> bool {
        self == Setting::Tta
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Uda => "UDA",
            Setting::Sfda => "SFDA",
            Setting::Tta => "TTA",
            Setting::UdaRegression => "UDA-regression",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uda" => Ok(Setting::Uda),
            "sfda" => Ok(Setting::Sfda),
            "tta" => Ok(Setting::Tta),
            "uda-regression" => Ok(Setting::UdaRegression),
            _ => Err(Error::invalid(format!("unknown setting {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMetric {
    /// Percentage of correct argmax predictions; higher is better.
    Accuracy,
    /// Mean squared error of regression outputs; lower is better.
    Mse,
}

impl OracleMetric {
    pub fn higher_is_better(self) -> bool {
        self == OracleMetric::Accuracy
    }
}

/// Which recorded split defines oracle performance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleRef {
    pub domain: Domain,
    pub split: SplitTag,
    pub metric: OracleMetric,
}

impl OracleRef {
    pub fn for_setting(setting: Setting) -> Self {
        Self {
            domain: Domain::Target,
            split: SplitTag::Test,
            metric: if setting.is_regression() {
                OracleMetric::Mse
            } else {
                OracleMetric::Accuracy
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainNames {
    pub source: String,
    pub target: String,
}

/// A bundle listed in the manifest: where it was recorded, which layers
/// exist and how many rows it has.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleEntry {
    #[serde(flatten)]
    pub id: BundleId,
    pub rows: usize,
    pub layers: Vec<Layer>,
}

/// Identity of one recorded model snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub algorithm: String,
    pub hyperparams: String,
    pub checkpoint_index: u32,
    pub epoch: u32,
    #[serde(default)]
    pub is_source_only: bool,
    pub bundles: Vec<BundleEntry>,
}

impl CheckpointRecord {
    pub fn new(key: &CheckpointKey, epoch: u32, is_source_only: bool) -> Self {
        Self {
            algorithm: key.algorithm.clone(),
            hyperparams: key.hyperparams.clone(),
            checkpoint_index: key.index,
            epoch,
            is_source_only,
            bundles: Vec::new(),
        }
    }

    pub fn key(&self) -> CheckpointKey {
        CheckpointKey {
            algorithm: self.algorithm.clone(),
            hyperparams: self.hyperparams.clone(),
            index: self.checkpoint_index,
        }
    }

    pub fn bundle(&self, id: &BundleId) -> Option<&BundleEntry> {
        self.bundles.iter().find(|b| b.id == *id)
    }

    /// Batch indices present on this record, ascending.
    pub fn batches(&self) -> Vec<u32> {
        let mut b: Vec<u32> = self.bundles.iter().filter_map(|e| e.id.batch).collect();
        b.sort_unstable();
        b.dedup();
        b
    }
}

fn default_prediction_semantics() -> String {
    "softmax(logits)".to_string()
}

/// Top-level description of a pack directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackManifest {
    pub format_version: u32,
    pub setting: Setting,
    pub num_classes: usize,
    pub domains: DomainNames,
    pub splits: BTreeMap<Domain, SplitAssignment>,
    pub oracle: OracleRef,
    /// How the exporter produced the predictions layer.
    #[serde(default = "default_prediction_semantics")]
    pub prediction_semantics: String,
    /// Source-only checkpoint used as the comparison baseline. When absent
    /// and exactly one source-only record exists, that record is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<CheckpointKey>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Opaque run metadata such as hyperparameter search spaces.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl PackManifest {
    pub fn new(setting: Setting, num_classes: usize, domains: DomainNames) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            setting,
            num_classes,
            domains,
            splits: BTreeMap::new(),
            oracle: OracleRef::for_setting(setting),
            prediction_semantics: default_prediction_semantics(),
            baseline: None,
            checkpoints: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn task_name(&self) -> String {
        format!("{}->{}", self.domains.source, self.domains.target)
    }

    pub fn record(&self, key: &CheckpointKey) -> Option<&CheckpointRecord> {
        self.checkpoints.iter().find(|r| r.key() == *key)
    }

    /// Distinct non-source-only algorithm ids in roster order.
    pub fn algorithms(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.checkpoints
            .iter()
            .filter(|r| !r.is_source_only)
            .filter(|r| seen.insert(r.algorithm.clone()))
            .map(|r| r.algorithm.clone())
            .collect()
    }

    pub fn source_only(&self) -> impl Iterator<Item = &CheckpointRecord> {
        self.checkpoints.iter().filter(|r| r.is_source_only)
    }

    /// Checks every manifest-level invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.format_version));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.setting.is_regression() && self.num_classes != NUM_BOX_CLASSES {
            return bad(format!(
                "regression packs use {NUM_BOX_CLASSES} discretised box classes, found {}",
                self.num_classes
            ));
        }
        if self.oracle.metric == OracleMetric::Mse && !self.setting.is_regression() {
            return bad("the MSE oracle needs a regression pack".into());
        }
        for (domain, split) in &self.splits {
            split.fractions.check()?;
            if split.is_empty() {
                return bad(format!("{} split assignment is empty", domain.as_str()));
            }
        }
        let mut keys = HashSet::new();
        for rec in &self.checkpoints {
            let key = rec.key();
            key.check()?;
            if !keys.insert(key.clone()) {
                return Err(Error::DuplicateKey(key.to_string()));
            }
            let mut ids = HashSet::new();
            for b in &rec.bundles {
                if !ids.insert(b.id) {
                    return bad(format!("{key}: bundle {} listed twice", b.id));
                }
                if b.layers.is_empty() {
                    return bad(format!("{key}: bundle {} has no layers", b.id));
                }
                if b.id.domain == Domain::Source && !self.setting.has_source_data() {
                    return bad(format!(
                        "{key}: {} packs carry no source bundles, found {}",
                        self.setting, b.id
                    ));
                }
                if self.setting.is_episodic() != b.id.batch.is_some() {
                    return bad(format!(
                        "{key}: bundle {} must {}be keyed by batch in a {} pack",
                        b.id,
                        if self.setting.is_episodic() { "" } else { "not " },
                        self.setting
                    ));
                }
            }
        }
        if let Some(base) = &self.baseline {
            match self.record(base) {
                Some(r) if r.is_source_only => {}
                _ => return bad(format!("baseline {base} is not a source-only record")),
            }
        }
        Ok(())
    }
}

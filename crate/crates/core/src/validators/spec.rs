use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datapack::{Domain, Layer, Setting, SplitTag};
use crate::error::{Error, Result};
use crate::numerics::ClusterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ValidatorKind {
    Accuracy,
    #[serde(rename = "MSE")]
    Mse,
    Entropy,
    #[serde(rename = "IM", alias = "InfoMax")]
    InfoMax,
    #[serde(rename = "BNM")]
    Bnm,
    #[serde(rename = "SND")]
    Snd,
    #[serde(rename = "MMD")]
    Mmd,
    #[serde(rename = "CORAL")]
    Coral,
    RankMe,
    #[serde(rename = "AMI")]
    Ami,
    #[serde(rename = "ARI")]
    Ari,
    #[serde(rename = "V-Measure", alias = "VMeasure")]
    VMeasure,
    #[serde(rename = "FMI")]
    Fmi,
    Silhouette,
    #[serde(rename = "DBI")]
    Dbi,
    #[serde(rename = "CHI")]
    Chi,
}

impl ValidatorKind {
    pub const ALL: [ValidatorKind; 16] = [
        ValidatorKind::RankMe,
        ValidatorKind::Ami,
        ValidatorKind::Ari,
        ValidatorKind::VMeasure,
        ValidatorKind::Fmi,
        ValidatorKind::Silhouette,
        ValidatorKind::Dbi,
        ValidatorKind::Chi,
        ValidatorKind::Bnm,
        ValidatorKind::Mmd,
        ValidatorKind::Coral,
        ValidatorKind::Snd,
        ValidatorKind::InfoMax,
        ValidatorKind::Entropy,
        ValidatorKind::Accuracy,
        ValidatorKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ValidatorKind::Accuracy => "Accuracy",
            ValidatorKind::Mse => "MSE",
            ValidatorKind::Entropy => "Entropy",
            ValidatorKind::InfoMax => "IM",
            ValidatorKind::Bnm => "BNM",
            ValidatorKind::Snd => "SND",
            ValidatorKind::Mmd => "MMD",
            ValidatorKind::Coral => "CORAL",
            ValidatorKind::RankMe => "RankMe",
            ValidatorKind::Ami => "AMI",
            ValidatorKind::Ari => "ARI",
            ValidatorKind::VMeasure => "V-Measure",
            ValidatorKind::Fmi => "FMI",
            ValidatorKind::Silhouette => "Silhouette",
            ValidatorKind::Dbi => "DBI",
            ValidatorKind::Chi => "CHI",
        }
    }

    pub fn default_orientation(self) -> Orientation {
        match self {
            ValidatorKind::Mse
            | ValidatorKind::Entropy
            | ValidatorKind::Snd
            | ValidatorKind::Mmd
            | ValidatorKind::Coral
            | ValidatorKind::Dbi => Orientation::LowerBetter,
            _ => Orientation::HigherBetter,
        }
    }

    /// Kinds that compare a source sample with a target sample.
    pub fn needs_both_domains(self) -> bool {
        matches!(self, ValidatorKind::Mmd | ValidatorKind::Coral)
    }

    /// Kinds that read ground-truth labels of a source split.
    pub fn needs_source_labels(self) -> bool {
        matches!(self, ValidatorKind::Accuracy | ValidatorKind::Mse)
    }

    /// Kinds that cluster the chosen layer with k-means.
    pub fn is_external_clustering(self) -> bool {
        matches!(
            self,
            ValidatorKind::Ami | ValidatorKind::Ari | ValidatorKind::VMeasure | ValidatorKind::Fmi
        )
    }

    pub fn is_internal_clustering(self) -> bool {
        matches!(
            self,
            ValidatorKind::Silhouette | ValidatorKind::Dbi | ValidatorKind::Chi
        )
    }
}

impl fmt::Display for ValidatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ValidatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = |x: &str| x.to_ascii_lowercase().replace(['-', '_'], "");
        let want = norm(s);
        ValidatorKind::ALL
            .into_iter()
            .find(|k| norm(k.name()) == want || (want == "infomax" && *k == ValidatorKind::InfoMax))
            .ok_or_else(|| Error::invalid(format!("unknown validator kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

impl Orientation {
    pub fn orient(self, raw: f64) -> f64 {
        match self {
            Orientation::HigherBetter => raw,
            Orientation::LowerBetter => -raw,
        }
    }
}

/// One of the data splits a validator may pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitRef {
    SourceVal,
    TargetTrain,
    TargetVal,
}

impl SplitRef {
    pub fn code(self) -> &'static str {
        match self {
            SplitRef::SourceVal => "S_V",
            SplitRef::TargetTrain => "T_T",
            SplitRef::TargetVal => "T_V",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            SplitRef::SourceVal => Domain::Source,
            _ => Domain::Target,
        }
    }

    pub fn tag(self) -> SplitTag {
        match self {
            SplitRef::TargetTrain => SplitTag::Train,
            _ => SplitTag::Val,
        }
    }
}

/// A non-empty set of splits, written like `S_V+T_T`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SplitSet(Vec<SplitRef>);

impl SplitSet {
    pub fn new(mut parts: Vec<SplitRef>) -> Result<Self> {
        parts.sort();
        parts.dedup();
        if parts.is_empty() {
            return Err(Error::invalid("a validator needs at least one split"));
        }
        Ok(Self(parts))
    }

    pub fn parts(&self) -> &[SplitRef] {
        &self.0
    }

    pub fn has_source(&self) -> bool {
        self.0.iter().any(|s| s.domain() == Domain::Source)
    }

    pub fn has_target(&self) -> bool {
        self.0.iter().any(|s| s.domain() == Domain::Target)
    }
}

impl fmt::Display for SplitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes: Vec<&str> = self.0.iter().map(|s| s.code()).collect();
        f.write_str(&codes.join("+"))
    }
}

impl FromStr for SplitSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split('+')
            .map(|p| match p.trim() {
                "S_V" | "source-val" => Ok(SplitRef::SourceVal),
                "T_T" | "target-train" => Ok(SplitRef::TargetTrain),
                "T_V" | "target-val" => Ok(SplitRef::TargetVal),
                other => Err(Error::invalid(format!(
                    "unknown split {other:?} (expected S_V, T_T or T_V)"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(parts)
    }
}

impl Serialize for SplitSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SplitSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Kernel bandwidth for MMD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise squared distance of the pooled sample.
    Median,
    /// Euler's number, as the kernel is literally written.
    Euler,
    Fixed(f64),
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Median => s.serialize_str("median"),
            Bandwidth::Euler => s.serialize_str("euler"),
            Bandwidth::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(n) if n == "median" => Ok(Bandwidth::Median),
            Raw::Name(n) if n == "euler" || n == "paper-literal" => Ok(Bandwidth::Euler),
            Raw::Name(n) => Err(serde::de::Error::custom(format!("unknown bandwidth mode {n:?}"))),
            Raw::Value(v) if v > 0.0 && v.is_finite() => Ok(Bandwidth::Fixed(v)),
            Raw::Value(v) => Err(serde::de::Error::custom(format!("bandwidth must be positive, got {v}"))),
        }
    }
}

/// k-means settings for the clustering kinds. `k` defaults to the
/// number of classes; the seed comes from the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            k: None,
            restarts: ClusterConfig::DEFAULT_RESTARTS,
            max_iters: ClusterConfig::DEFAULT_MAX_ITERS,
            tol: ClusterConfig::DEFAULT_TOL,
        }
    }
}

impl ClusterParams {
    pub fn config(&self, num_classes: usize, seed: u64) -> ClusterConfig {
        ClusterConfig {
            k: self.k.unwrap_or(num_classes),
            restarts: self.restarts,
            max_iters: self.max_iters,
            tol: self.tol,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidatorParams {
    /// SND softmax temperature.
    pub temperature: f64,
    /// SND: leave self-similarity out of each row.
    pub exclude_self: bool,
    pub bandwidth: Bandwidth,
    /// RankMe smoothing constant.
    pub epsilon: f64,
    pub clustering: ClusterParams,
}

impl Default for ValidatorParams {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            exclude_self: true,
            bandwidth: Bandwidth::Median,
            epsilon: 1e-7,
            clustering: ClusterParams::default(),
        }
    }
}

impl ValidatorParams {
    pub fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if let Bandwidth::Fixed(b) = self.bandwidth {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::invalid(format!("bandwidth must be positive, got {b}")));
            }
        }
        if self.clustering.k == Some(0) {
            return Err(Error::invalid("k must be positive"));
        }
        self.clustering.config(1, 0).check()
    }
}

/// Which criterion to compute, on which layer and splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidatorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub kind: ValidatorKind,
    pub layer: Layer,
    pub splits: SplitSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<Orientation>,
    #[serde(default)]
    pub params: ValidatorParams,
}

impl ValidatorSpec {
    pub fn new(kind: ValidatorKind, layer: Layer, splits: &str) -> Result<Self> {
        let spec = Self {
            id: None,
            kind,
            layer,
            splits: splits.parse()?,
            orientation: None,
            params: ValidatorParams::default(),
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn named(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn with_params(mut self, params: ValidatorParams) -> Self {
        self.params = params;
        self
    }

    /// Column name used in score tables and reports.
    pub fn id(&self) -> String {
        self.id
            .clone()
            .unwrap_or_else(|| format!("{}[{}:{}]", self.kind, self.layer, self.splits))
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation.unwrap_or(self.kind.default_orientation())
    }

    /// Canonical text identifying everything that affects the score.
    pub fn fingerprint(&self) -> String {
        let params = serde_json::to_string(&self.params).expect("params serialise");
        format!(
            "{}|{}|{}|{:?}|{}",
            self.kind,
            self.layer,
            self.splits,
            self.orientation(),
            params
        )
    }

    /// Checks the spec on its own, independent of any pack.
    pub fn check(&self) -> Result<()> {
        if !matches!(self.layer, Layer::Features | Layer::Logits | Layer::Predictions) {
            return Err(Error::invalid(format!(
                "{}: validators read features, logits or predictions, not {}",
                self.id(),
                self.layer
            )));
        }
        if self.kind.needs_both_domains() && !(self.splits.has_source() && self.splits.has_target()) {
            return Err(Error::invalid(format!(
                "{}: {} needs both a source and a target split, got {}",
                self.id(),
                self.kind,
                self.splits
            )));
        }
        if self.kind.needs_source_labels() && self.splits.has_target() {
            return Err(Error::invalid(format!(
                "{}: {} reads labels, so it only takes source splits, got {}",
                self.id(),
                self.kind,
                self.splits
            )));
        }
        self.params.check()
    }

    /// Checks that the spec can be scored on a pack of `setting`.
    pub fn check_applicable(&self, setting: Setting) -> Result<()> {
        self.check()?;
        let refuse = |rule: String| {
            Err(Error::Inapplicable {
                validator: self.id(),
                rule,
            })
        };
        if !setting.has_source_data() {
            if self.kind.needs_both_domains() {
                return refuse(format!(
                    "{} needs both domains to compute its score, and {setting} packs carry no source data",
                    self.kind
                ));
            }
            if self.splits.has_source() {
                return refuse(format!(
                    "{setting} packs carry no source data, but the spec reads {}",
                    self.splits
                ));
            }
        }
        if self.kind == ValidatorKind::Mse && !setting.is_regression() {
            return refuse("MSE is defined for regression packs only".into());
        }
        if setting.is_episodic() && self.splits.parts().len() != 1 {
            return refuse(format!(
                "{setting} validators score a single batch, so exactly one target split is allowed, got {}",
                self.splits
            ));
        }
        Ok(())
    }
}

/// Rows of the validator-version table: which split and layer each
/// default validator reads in each setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefaultProfile {
    Uda,
    UdaRegression,
    Sfda,
    TtaCifar,
    TtaOfficeHome,
}

impl DefaultProfile {
    pub fn for_setting(setting: Setting) -> Self {
        match setting {
            Setting::Uda => DefaultProfile::Uda,
            Setting::UdaRegression => DefaultProfile::UdaRegression,
            Setting::Sfda => DefaultProfile::Sfda,
            Setting::Tta => DefaultProfile::TtaCifar,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DefaultProfile::Uda => "uda",
            DefaultProfile::UdaRegression => "uda-regression",
            DefaultProfile::Sfda => "sfda",
            DefaultProfile::TtaCifar => "tta-cifar",
            DefaultProfile::TtaOfficeHome => "tta-officehome",
        }
    }
}

impl FromStr for DefaultProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            DefaultProfile::Uda,
            DefaultProfile::UdaRegression,
            DefaultProfile::Sfda,
            DefaultProfile::TtaCifar,
            DefaultProfile::TtaOfficeHome,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown default profile {s:?}")))
    }
}

/// The default validator set, in report column order.
pub fn default_specs(profile: DefaultProfile) -> Vec<ValidatorSpec> {
    use Layer::{Features as F, Logits as L, Predictions as P};
    use ValidatorKind::*;
    let rows: &[(ValidatorKind, Layer, &str)] = match profile {
        DefaultProfile::Uda => &[
            (RankMe, P, "S_V+T_V"),
            (Ami, L, "S_V+T_V"),
            (Ari, L, "S_V+T_V"),
            (VMeasure, L, "S_V+T_V"),
            (Fmi, L, "S_V+T_V"),
            (Silhouette, L, "S_V+T_T"),
            (Dbi, L, "S_V+T_V"),
            (Chi, L, "S_V+T_V"),
            (Bnm, P, "S_V+T_T"),
            (Mmd, P, "S_V+T_V"),
            (Coral, P, "S_V+T_V"),
            (Snd, P, "T_T"),
            (InfoMax, P, "S_V+T_T"),
            (Entropy, P, "S_V+T_T"),
            (Accuracy, P, "S_V"),
        ],
        DefaultProfile::UdaRegression => &[
            (RankMe, P, "T_V"),
            (Ami, F, "S_V+T_T"),
            (Ari, F, "S_V+T_T"),
            (VMeasure, F, "S_V+T_T"),
            (Fmi, F, "S_V+T_V"),
            (Silhouette, F, "S_V+T_T"),
            (Dbi, F, "S_V+T_V"),
            (Chi, L, "S_V+T_T"),
            (Bnm, P, "T_T"),
            (Mmd, P, "S_V+T_V"),
            (Coral, F, "S_V+T_T"),
            (Snd, P, "T_V"),
            (InfoMax, P, "T_T"),
            (Entropy, P, "T_T"),
            (Mse, P, "S_V"),
        ],
        DefaultProfile::Sfda => &[
            (RankMe, P, "T_T"),
            (Ami, F, "T_T"),
            (Ari, L, "T_V"),
            (VMeasure, F, "T_T"),
            (Fmi, F, "T_T"),
            (Silhouette, L, "T_T"),
            (Dbi, L, "T_T"),
            (Chi, F, "T_T"),
            (Bnm, P, "T_T"),
            (Snd, P, "T_V"),
            (InfoMax, P, "T_T"),
            (Entropy, P, "T_T"),
        ],
        DefaultProfile::TtaCifar => &[
            (RankMe, P, "T_T"),
            (Ami, L, "T_T"),
            (Ari, L, "T_T"),
            (VMeasure, L, "T_T"),
            (Fmi, L, "T_T"),
            (Silhouette, L, "T_T"),
            (Dbi, F, "T_T"),
            (Chi, L, "T_T"),
            (Bnm, P, "T_T"),
            (Snd, P, "T_T"),
            (InfoMax, P, "T_T"),
            (Entropy, P, "T_T"),
        ],
        DefaultProfile::TtaOfficeHome => &[
            (RankMe, L, "T_T"),
            (Ami, F, "T_T"),
            (Ari, F, "T_T"),
            (VMeasure, F, "T_T"),
            (Fmi, F, "T_T"),
            (Silhouette, F, "T_T"),
            (Dbi, F, "T_T"),
            (Chi, F, "T_T"),
            (Bnm, P, "T_T"),
            (Snd, P, "T_T"),
            (InfoMax, P, "T_T"),
            (Entropy, P, "T_T"),
        ],
    };
    rows.iter()
        .map(|&(kind, layer, splits)| {
            ValidatorSpec::new(kind, layer, splits)
                .expect("default specs are well formed")
                .named(kind.name())
        })
        .collect()
}

/// Parses a JSON array of specs.
pub fn parse_specs(json: &str) -> Result<Vec<ValidatorSpec>> {
    let specs: Vec<ValidatorSpec> = serde_json::from_str(json)?;
    for s in &specs {
        s.check()?;
    }
    let mut ids: Vec<String> = specs.iter().map(ValidatorSpec::id).collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("validator id {:?} appears twice", w[0])));
    }
    Ok(specs)
}

//! Synthetic benchmark packs: shifted Gaussian class blobs and families of
//! linear-softmax checkpoints of controlled quality.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datapack::{
    assign_splits, BundleId, CheckpointKey, Domain, DomainNames, MemoryPack, OutputsBundle, PackManifest, Setting,
    SplitAssignment, SplitFractions, SplitTag,
};
use crate::error::{Error, Result};
use crate::numerics::softmax_rows;
use crate::seed;

pub const SOURCE_ONLY_ALGORITHM: &str = "source-only";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityProfile {
    /// Per-hyperparameter quality drawn from Beta(2, 2), ramped up over
    /// checkpoints with small jitter.
    Mixed,
    /// Quality (t + 1) / T for checkpoint t of every hyperparameter draw.
    Monotone,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Raw inputs.
    Inputs,
    /// A fixed random Gaussian projection to `dim` columns.
    Projection { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Samples per domain.
    pub n: usize,
    /// Norm of each target class mean's translation.
    pub shift: f64,
    /// Target covariance is `scale * sigma^2 * I`.
    pub scale: f64,
    pub sigma: f64,
    /// Norm of each class mean.
    pub separation: f64,
    pub algorithms: usize,
    pub hparams: usize,
    /// Checkpoints per hyperparameter draw (update steps in TTA packs).
    pub checkpoints: usize,
    pub collapse_rate: f64,
    pub profile: QualityProfile,
    pub features: FeatureMode,
    pub logit_scale: f64,
    pub setting: Setting,
    /// Target-test rows per batch in TTA packs.
    pub batch_size: Option<usize>,
    pub source_name: String,
    pub target_name: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 8,
            n: 600,
            shift: 4.0,
            scale: 1.0,
            sigma: 1.0,
            separation: 4.0,
            algorithms: 3,
            hparams: 10,
            checkpoints: 20,
            collapse_rate: 0.0,
            profile: QualityProfile::Mixed,
            features: FeatureMode::Inputs,
            logit_scale: 1.0,
            setting: Setting::Uda,
            batch_size: None,
            source_name: "source".into(),
            target_name: "target".into(),
            seed: 0,
        }
    }
}

pub const COLLAPSE_MARGIN: f64 = 12.0;

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.n < 10 * self.num_classes {
            return bad(format!(
                "need at least {} samples per domain for {} classes, got {}",
                10 * self.num_classes,
                self.num_classes,
                self.n
            ));
        }
        for (name, v) in [
            ("scale", self.scale),
            ("sigma", self.sigma),
            ("separation", self.separation),
            ("logit_scale", self.logit_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.shift.is_finite() && self.shift >= 0.0) {
            return bad(format!("shift must be >= 0, got {}", self.shift));
        }
        if self.algorithms == 0 || self.hparams == 0 || self.checkpoints == 0 {
            return bad("algorithms, hparams and checkpoints must all be positive".into());
        }
        if !(0.0..=1.0).contains(&self.collapse_rate) {
            return bad(format!("collapse rate must lie in [0, 1], got {}", self.collapse_rate));
        }
        if let QualityProfile::Constant(q) = self.profile {
            if !(0.0..=1.0).contains(&q) {
                return bad(format!("quality must lie in [0, 1], got {q}"));
            }
        }
        if let FeatureMode::Projection { dim: 0 } = self.features {
            return bad("projection dim must be positive".into());
        }
        match (self.setting, self.batch_size) {
            (Setting::UdaRegression, _) => bad("synthetic regression packs are not supported".into()),
            (Setting::Tta, None) => bad("TTA packs need a batch size".into()),
            (Setting::Tta, Some(0)) => bad("batch size must be positive".into()),
            (Setting::Uda | Setting::Sfda, Some(_)) => bad("batch size only applies to TTA packs".into()),
            _ => Ok(()),
        }
    }
}

/// Labelled samples of one domain and their split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<u32>,
    pub splits: SplitAssignment,
}

impl Dataset {
    pub fn subset(&self, idx: &[usize]) -> (Array2<f64>, Vec<u32>) {
        (self.x.select(Axis(0), idx), idx.iter().map(|&i| self.y[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDomains {
    pub source: Dataset,
    pub target: Dataset,
    /// Class means of the source domain, one per row.
    pub means: Array2<f64>,
    /// Translation of each target class mean, one per row.
    pub shift: Array2<f64>,
}

impl SynthDomains {
    pub fn target_means(&self) -> Array2<f64> {
        &self.means + &self.shift
    }
}

fn rng_for(root: u64, path: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(root, path))
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn sample_domain(means: ArrayView2<f64>, std: f64, n: usize, rng: &mut ChaCha8Rng, split_seed: u64) -> Result<Dataset> {
    let c = means.nrows();
    let mut y: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();
    y.shuffle(rng);
    let noise = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let x = Array2::from_shape_fn((n, means.ncols()), |(i, j)| {
        means[[y[i] as usize, j]] + noise.sample(rng)
    });
    Ok(Dataset {
        x,
        y,
        splits: assign_splits(n, SplitFractions::default(), split_seed)?,
    })
}

/// Source blobs and their target copies, each class mean moved by `shift`
/// in its own random direction and the covariance rescaled, each split
/// 60/20/20.
pub fn gen_domains(cfg: &SynthConfig) -> Result<SynthDomains> {
    cfg.check()?;
    let mut rng = rng_for(cfg.seed, &["synth", "domains"]);
    let mut means = Array2::zeros((cfg.num_classes, cfg.dim));
    for mut row in means.rows_mut() {
        row.assign(&(unit(&mut rng, cfg.dim) * cfg.separation));
    }
    let mut shift = Array2::zeros((cfg.num_classes, cfg.dim));
    for mut row in shift.rows_mut() {
        row.assign(&(unit(&mut rng, cfg.dim) * cfg.shift));
    }
    let source = sample_domain(
        means.view(),
        cfg.sigma,
        cfg.n,
        &mut rng,
        seed::derive(cfg.seed, &["synth", "splits", "source"]),
    )?;
    let target = sample_domain(
        (&means + &shift).view(),
        cfg.sigma * cfg.scale.sqrt(),
        cfg.n,
        &mut rng,
        seed::derive(cfg.seed, &["synth", "splits", "target"]),
    )?;
    Ok(SynthDomains {
        source,
        target,
        means,
        shift,
    })
}

/// A linear-softmax classifier `softmax(x W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearModel {
    /// Bayes classifier for spherical Gaussian classes with equal priors.
    pub fn bayes(means: ArrayView2<f64>, variance: f64) -> Self {
        let w = means.t().mapv(|v| v / variance);
        let b = means
            .rows()
            .into_iter()
            .map(|m| -m.dot(&m) / (2.0 * variance))
            .collect();
        Self { w, b }
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<u32> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| crate::datapack::argmax(r.iter().copied()) as u32)
            .collect()
    }
}

/// Orthonormal basis of the complement of the span of the differences
/// between `means` rows, as columns.
fn label_free_basis(means: ArrayView2<f64>) -> Array2<f64> {
    let d = means.ncols();
    let centre = means.mean_axis(Axis(0)).expect("at least one class");
    let mut basis: Vec<Array1<f64>> = Vec::new();
    let push = |v: Array1<f64>, basis: &mut Vec<Array1<f64>>| {
        let mut v = v;
        for q in basis.iter() {
            let p = v.dot(q);
            v = v - q * p;
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            basis.push(v / n);
            true
        } else {
            false
        }
    };
    for m in means.rows() {
        push(&m - &centre, &mut basis);
    }
    let informative = basis.len();
    for i in 0..d {
        let mut e = Array1::zeros(d);
        e[i] = 1.0;
        push(e, &mut basis);
    }
    let rest = &basis[informative..];
    let mut out = Array2::zeros((d, rest.len()));
    for (j, q) in rest.iter().enumerate() {
        out.column_mut(j).assign(q);
    }
    out
}

/// Output model of one synthetic checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointModel {
    Linear(LinearModel),
    /// Confident constant prediction of one class, with tiny logit noise.
    Collapse {
        class: u32,
        noise_seed: u64,
    },
}

impl CheckpointModel {
    /// Interpolates between the target Bayes classifier (`quality` 1) and a
    /// random map that ignores every label-bearing direction (`quality` 0).
    pub fn interpolated(domains: &SynthDomains, cfg: &SynthConfig, quality: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&quality) {
            return Err(Error::invalid(format!("quality must lie in [0, 1], got {quality}")));
        }
        let variance = cfg.sigma * cfg.sigma * cfg.scale;
        let good = LinearModel::bayes(domains.target_means().view(), variance);
        let all_means = ndarray::concatenate![Axis(0), domains.means, domains.target_means()];
        let basis = label_free_basis(all_means.view());
        let g = gaussian(rng, (basis.ncols(), cfg.num_classes)) * (cfg.separation / cfg.sigma);
        let noise = basis.dot(&g);
        let w = (&good.w * quality + &noise * (1.0 - quality)) * cfg.logit_scale;
        let b = &good.b * (quality * cfg.logit_scale);
        Ok(Self::Linear(LinearModel { w, b }))
    }

    pub fn logits(&self, x: ArrayView2<f64>, num_classes: usize) -> Array2<f64> {
        match self {
            Self::Linear(m) => m.logits(x),
            Self::Collapse { class, noise_seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*noise_seed);
                let mut out = gaussian(&mut rng, (x.nrows(), num_classes)) * 0.05;
                out.column_mut(*class as usize).mapv_inplace(|v| v + COLLAPSE_MARGIN);
                out
            }
        }
    }
}

struct Featurizer(Option<Array2<f64>>);

impl Featurizer {
    fn new(cfg: &SynthConfig) -> Self {
        match cfg.features {
            FeatureMode::Inputs => Self(None),
            FeatureMode::Projection { dim } => {
                let mut rng = rng_for(cfg.seed, &["synth", "projection"]);
                Self(Some(gaussian(&mut rng, (cfg.dim, dim)) / (cfg.dim as f64).sqrt()))
            }
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match &self.0 {
            None => x.to_owned(),
            Some(p) => x.dot(p),
        }
    }
}

fn f32s(m: &Array2<f64>) -> Array2<f32> {
    m.mapv(|v| v as f32)
}

fn bundle(model: &CheckpointModel, x: ArrayView2<f64>, y: &[u32], feats: &Featurizer, c: usize) -> OutputsBundle {
    let logits = model.logits(x, c);
    let probs = softmax_rows(logits.view());
    OutputsBundle::new()
        .with_features(f32s(&feats.apply(x)))
        .with_logits(f32s(&logits))
        .with_predictions(f32s(&probs))
        .with_labels(y.to_vec())
}

/// Quality of checkpoint `t` under the profile.
fn quality(cfg: &SynthConfig, base: f64, t: usize, rng: &mut ChaCha8Rng) -> f64 {
    let steps = cfg.checkpoints as f64;
    match cfg.profile {
        QualityProfile::Monotone => (t + 1) as f64 / steps,
        QualityProfile::Constant(q) => q,
        QualityProfile::Mixed => {
            let ramp = 1.0 - (-3.0 * (t + 1) as f64 / steps).exp();
            (base * ramp + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
        }
    }
}

fn base_quality(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> f64 {
    match cfg.profile {
        QualityProfile::Mixed => Beta::new(2.0, 2.0).expect("valid shape").sample(rng),
        _ => 1.0,
    }
}

fn checkpoint_model(
    domains: &SynthDomains,
    cfg: &SynthConfig,
    base: f64,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CheckpointModel> {
    let collapse = rng.random::<f64>() < cfg.collapse_rate;
    let q = quality(cfg, base, t, rng);
    if collapse {
        Ok(CheckpointModel::Collapse {
            class: rng.random_range(0..cfg.num_classes as u32),
            noise_seed: rng.random(),
        })
    } else {
        CheckpointModel::interpolated(domains, cfg, q, rng)
    }
}

fn alg_id(a: usize) -> String {
    format!("alg{}", a + 1)
}

fn hp_id(h: usize) -> String {
    format!("hp{h}")
}

fn manifest(cfg: &SynthConfig, domains: &SynthDomains) -> Result<PackManifest> {
    let mut m = PackManifest::new(
        cfg.setting,
        cfg.num_classes,
        DomainNames {
            source: cfg.source_name.clone(),
            target: cfg.target_name.clone(),
        },
    );
    if cfg.setting.has_source_data() {
        m.splits.insert(Domain::Source, domains.source.splits.clone());
    }
    m.splits.insert(Domain::Target, domains.target.splits.clone());
    m.metadata.insert("synth".into(), serde_json::to_value(cfg)?);
    Ok(m)
}

/// Checkpoint family over `domains`: every (algorithm, hyperparameter,
/// checkpoint) records all splits of both domains (target only for SFDA),
/// plus one source-only record that serves as the baseline.
pub fn gen_checkpoints(cfg: &SynthConfig, domains: &SynthDomains) -> Result<MemoryPack> {
    cfg.check()?;
    if cfg.setting.is_episodic() {
        return gen_tta_checkpoints(cfg, domains);
    }
    let feats = Featurizer::new(cfg);
    let c = cfg.num_classes;
    let mut views = Vec::new();
    let mut domain_list = vec![(Domain::Target, &domains.target)];
    if cfg.setting.has_source_data() {
        domain_list.insert(0, (Domain::Source, &domains.source));
    }
    for (domain, data) in domain_list {
        for split in SplitTag::ALL {
            let (x, y) = data.subset(&data.splits.indices(split));
            views.push((BundleId::new(domain, split), x, y));
        }
    }
    let make = |model: &CheckpointModel| {
        views
            .iter()
            .map(|(id, x, y)| (*id, bundle(model, x.view(), y, &feats, c)))
            .collect::<Vec<_>>()
    };

    let mut pack = MemoryPack::new(manifest(cfg, domains)?);
    for a in 0..cfg.algorithms {
        for h in 0..cfg.hparams {
            let mut rng = rng_for(cfg.seed, &["synth", "checkpoints", &alg_id(a), &hp_id(h)]);
            let base = base_quality(cfg, &mut rng);
            for t in 0..cfg.checkpoints {
                let model = checkpoint_model(domains, cfg, base, t, &mut rng)?;
                let key = CheckpointKey::new(alg_id(a), hp_id(h), t as u32)?;
                pack.add_record(key, t as u32 + 1, false, make(&model))?;
            }
        }
    }
    let so = source_only_model(cfg, domains);
    let key = source_only_key();
    pack.add_record(key.clone(), cfg.checkpoints as u32, true, make(&so))?;
    pack.manifest_mut().baseline = Some(key);
    Ok(pack)
}

pub fn source_only_key() -> CheckpointKey {
    CheckpointKey::new(SOURCE_ONLY_ALGORITHM, "default", 0).expect("valid key")
}

/// Bayes classifier of the source domain, applied unchanged to the target.
pub fn source_only_model(cfg: &SynthConfig, domains: &SynthDomains) -> CheckpointModel {
    CheckpointModel::Linear(LinearModel::bayes(domains.means.view(), cfg.sigma * cfg.sigma))
}

/// Row ranges of the target-test stream, one per batch; the last may be
/// shorter.
pub fn batch_ranges(rows: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    (0..rows.div_ceil(batch_size))
        .map(|b| b * batch_size..((b + 1) * batch_size).min(rows))
        .collect()
}

fn gen_tta_checkpoints(cfg: &SynthConfig, domains: &SynthDomains) -> Result<MemoryPack> {
    let batch_size = cfg.batch_size.expect("checked");
    let feats = Featurizer::new(cfg);
    let c = cfg.num_classes;
    let data = &domains.target;
    let (x, y) = data.subset(&data.splits.indices(SplitTag::Test));
    let ranges = batch_ranges(x.nrows(), batch_size);
    let batch = |b: usize| (x.slice(s![ranges[b].clone(), ..]), &y[ranges[b].clone()]);

    let mut pack = MemoryPack::new(manifest(cfg, domains)?);
    for a in 0..cfg.algorithms {
        for h in 0..cfg.hparams {
            let mut rng = rng_for(cfg.seed, &["synth", "checkpoints", &alg_id(a), &hp_id(h)]);
            let base = base_quality(cfg, &mut rng);
            let mut per_state: Vec<Vec<(BundleId, OutputsBundle)>> = vec![Vec::new(); cfg.checkpoints];
            for b in 0..ranges.len() {
                // the model restarts from the source state for every batch
                let mut brng = rng_for(cfg.seed, &["synth", "tta", &alg_id(a), &hp_id(h), &b.to_string()]);
                let (bx, by) = batch(b);
                for (u, state) in per_state.iter_mut().enumerate() {
                    let model = checkpoint_model(domains, cfg, base, u, &mut brng)?;
                    state.push((
                        BundleId::batch(Domain::Target, SplitTag::Test, b as u32),
                        bundle(&model, bx, by, &feats, c),
                    ));
                }
            }
            for (u, bundles) in per_state.into_iter().enumerate() {
                pack.add_record(
                    CheckpointKey::new(alg_id(a), hp_id(h), u as u32)?,
                    u as u32 + 1,
                    false,
                    bundles,
                )?;
            }
        }
    }
    let so = source_only_model(cfg, domains);
    let bundles = (0..ranges.len())
        .map(|b| {
            let (bx, by) = batch(b);
            (
                BundleId::batch(Domain::Target, SplitTag::Test, b as u32),
                bundle(&so, bx, by, &feats, c),
            )
        })
        .collect();
    let key = source_only_key();
    pack.add_record(key.clone(), 0, true, bundles)?;
    pack.manifest_mut().baseline = Some(key);
    Ok(pack)
}

/// A generated pack plus non-fatal warnings about its configuration.
#[derive(Debug)]
pub struct SynthOutput {
    pub pack: MemoryPack,
    pub warnings: Vec<String>,
}

pub fn gen_pack(cfg: &SynthConfig) -> Result<SynthOutput> {
    let domains = gen_domains(cfg)?;
    let pack = gen_checkpoints(cfg, &domains)?;
    let mut warnings = Vec::new();
    if let Some(b) = cfg.batch_size {
        if b < cfg.num_classes {
            warnings.push(format!(
                "batch size {b} is below the class count {}; clustering validators will often be undefined",
                cfg.num_classes
            ));
        }
    }
    Ok(SynthOutput { pack, warnings })
}

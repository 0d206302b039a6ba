//! Checkpoint selection: argmax of oriented validator scores over a pool,
//! the oracle, source-only fallback pools and the episodic TTA variant.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::datapack::{BundleId, BundleSource, CheckpointKey, Domain, Layer, OracleMetric, SplitTag};
use crate::error::{Error, Result};
use crate::scoring::ScoreTable;
use crate::validators::{accuracy, mse, score_key};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub key: CheckpointKey,
    pub epoch: u32,
    pub is_source_only: bool,
}

/// Checkpoints a validator chooses among.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPool {
    pub name: String,
    pub candidates: Vec<Candidate>,
    pub include_source_only: bool,
}

impl SelectionPool {
    /// Pool of one algorithm's checkpoints, with the source-only records
    /// appended when `include_source_only` is set.
    pub fn for_algorithm(pack: &dyn BundleSource, algorithm: &str, include_source_only: bool) -> Result<Self> {
        let m = pack.manifest();
        let mut candidates: Vec<Candidate> = m
            .checkpoints
            .iter()
            .filter(|r| !r.is_source_only && r.algorithm == algorithm)
            .map(|r| Candidate {
                key: r.key(),
                epoch: r.epoch,
                is_source_only: false,
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::Selection(format!("no checkpoints for algorithm {algorithm:?}")));
        }
        if include_source_only {
            let so: Vec<Candidate> = m
                .source_only()
                .map(|r| Candidate {
                    key: r.key(),
                    epoch: r.epoch,
                    is_source_only: true,
                })
                .collect();
            if so.is_empty() {
                return Err(Error::Selection("the pack has no source-only record".into()));
            }
            candidates.extend(so);
        }
        Ok(Self {
            name: pool_name(algorithm, include_source_only),
            candidates,
            include_source_only,
        })
    }

    /// Pool of the source-only records alone.
    pub fn source_only(pack: &dyn BundleSource) -> Result<Self> {
        let candidates: Vec<Candidate> = pack
            .manifest()
            .source_only()
            .map(|r| Candidate {
                key: r.key(),
                epoch: r.epoch,
                is_source_only: true,
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::Selection("the pack has no source-only record".into()));
        }
        Ok(Self {
            name: SOURCE_ONLY_ROW.into(),
            candidates,
            include_source_only: true,
        })
    }
}

pub const SOURCE_ONLY_ROW: &str = "Source-only";

/// Row label of a pool: the algorithm, suffixed `+SO` when source-only
/// records are included.
pub fn pool_name(algorithm: &str, include_source_only: bool) -> String {
    if include_source_only {
        format!("{algorithm}+SO")
    } else {
        algorithm.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    None,
    Epoch,
    Key,
}

impl fmt::Display for TieBreak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TieBreak::None => "none",
            TieBreak::Epoch => "epoch",
            TieBreak::Key => "key",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub chosen: CheckpointKey,
    pub is_source_only: bool,
    /// Oriented score of the chosen candidate.
    pub score: f64,
    /// Candidates sharing the best score (1 when there is no tie).
    pub tied: usize,
    pub tie_break: TieBreak,
}

/// Maximises `score` over candidates with a defined score. Ties go to the
/// lowest epoch, then the lexicographically smallest key.
pub fn select_max(candidates: &[(Candidate, Option<f64>)]) -> Result<SelectionResult> {
    let best = candidates
        .iter()
        .filter_map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut top: Vec<&Candidate> = candidates
        .iter()
        .filter(|(_, s)| *s == Some(best))
        .map(|(c, _)| c)
        .collect();
    if top.is_empty() {
        return Err(Error::Selection(
            "every candidate in the pool has an invalid score".into(),
        ));
    }
    let tied = top.len();
    let min_epoch = top.iter().map(|c| c.epoch).min().expect("non-empty");
    let tie_break = if tied == 1 {
        TieBreak::None
    } else if top.iter().filter(|c| c.epoch == min_epoch).count() == 1 {
        TieBreak::Epoch
    } else {
        TieBreak::Key
    };
    top.retain(|c| c.epoch == min_epoch);
    let chosen = top.into_iter().min_by_key(|c| c.key.to_string()).expect("non-empty");
    Ok(SelectionResult {
        chosen: chosen.key.clone(),
        is_source_only: chosen.is_source_only,
        score: best,
        tied,
        tie_break,
    })
}

/// Selection: the candidate with the largest oriented score under
/// `validator`. Invalid scores are skipped; a missing row is an error.
pub fn select_best(
    pool: &SelectionPool,
    validator: &str,
    scores: &ScoreTable,
    batch: Option<u32>,
) -> Result<SelectionResult> {
    let scored = pool
        .candidates
        .iter()
        .map(|c| {
            let k = score_key(&c.key, batch);
            scores
                .get(&k, validator)
                .map(|s| (c.clone(), s.oriented))
                .ok_or_else(|| Error::missing(format!("score of {k} under {validator}")))
        })
        .collect::<Result<Vec<_>>>()?;
    select_max(&scored)
}

/// Oracle values of every checkpoint (per batch in episodic packs):
/// target-test accuracy in percent, or MSE for regression packs.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTable {
    pub metric: OracleMetric,
    pub values: BTreeMap<String, f64>,
    /// Rows in each value's bundle.
    pub sizes: BTreeMap<String, usize>,
}

impl OracleTable {
    pub fn get(&self, key: &CheckpointKey, batch: Option<u32>) -> Result<f64> {
        let k = score_key(key, batch);
        self.values
            .get(&k)
            .copied()
            .ok_or_else(|| Error::missing(format!("oracle value of {k}")))
    }

    /// Value oriented so that larger is better.
    pub fn oriented(&self, v: f64) -> f64 {
        if self.metric.higher_is_better() {
            v
        } else {
            -v
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["checkpoint_key", "metric", "value", "rows"])?;
        let metric = metric_name(self.metric);
        for (k, v) in &self.values {
            out.write_record([k.as_str(), metric, &v.to_string(), &self.sizes[k].to_string()])?;
        }
        out.flush().map_err(|e| Error::io("<oracle csv>", e))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut values = BTreeMap::new();
        let mut sizes = BTreeMap::new();
        let mut metric = None;
        for rec in reader.records() {
            let rec = rec?;
            let m = match &rec[1] {
                "accuracy" => OracleMetric::Accuracy,
                "mse" => OracleMetric::Mse,
                other => return Err(Error::Shape(format!("unknown oracle metric {other:?}"))),
            };
            if metric.is_some_and(|x| x != m) {
                return Err(Error::Shape("oracle CSV mixes metrics".into()));
            }
            metric = Some(m);
            let v: f64 = rec[2]
                .parse()
                .map_err(|_| Error::Shape(format!("bad oracle value {:?}", &rec[2])))?;
            let n: usize = rec[3]
                .parse()
                .map_err(|_| Error::Shape(format!("bad row count {:?}", &rec[3])))?;
            values.insert(rec[0].to_string(), v);
            sizes.insert(rec[0].to_string(), n);
        }
        Ok(Self {
            metric: metric.unwrap_or(OracleMetric::Accuracy),
            values,
            sizes,
        })
    }
}

fn metric_name(m: OracleMetric) -> &'static str {
    match m {
        OracleMetric::Accuracy => "accuracy",
        OracleMetric::Mse => "mse",
    }
}

/// Computes the oracle value of every checkpoint from its labelled
/// target-test bundle.
pub fn oracle_table(pack: &dyn BundleSource) -> Result<OracleTable> {
    let m = pack.manifest();
    let mut values = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    for (key, batch) in crate::scoring::scoring_units(pack) {
        let id = match batch {
            Some(b) => BundleId::batch(Domain::Target, SplitTag::Test, b),
            None => BundleId::new(m.oracle.domain, m.oracle.split),
        };
        let b = pack.bundle(&key, &id)?;
        let v = match m.oracle.metric {
            OracleMetric::Accuracy => {
                let labels = b
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::missing(format!("labels in {id} of {key}")))?;
                let predicted = b
                    .predicted_classes()
                    .ok_or_else(|| Error::missing(format!("predictions in {id} of {key}")))?;
                100.0 * accuracy(&predicted, labels)?
            }
            OracleMetric::Mse => {
                let out = b
                    .matrix(Layer::Logits)
                    .ok_or_else(|| Error::missing(format!("box outputs in {id} of {key}")))?;
                let tgt = b
                    .matrix(Layer::Targets)
                    .ok_or_else(|| Error::missing(format!("targets in {id} of {key}")))?;
                mse(out.mapv(f64::from).view(), tgt.mapv(f64::from).view())?
            }
        };
        let k = score_key(&key, batch);
        values.insert(k.clone(), v);
        sizes.insert(k, b.rows());
    }
    Ok(OracleTable {
        metric: m.oracle.metric,
        values,
        sizes,
    })
}

/// Best candidate by oracle value (argmax accuracy, argmin MSE), with the
/// same tie-breaking as [`select_best`].
pub fn select_oracle(pool: &SelectionPool, oracle: &OracleTable, batch: Option<u32>) -> Result<SelectionResult> {
    let scored = pool
        .candidates
        .iter()
        .map(|c| Ok((c.clone(), Some(oracle.oriented(oracle.get(&c.key, batch)?)))))
        .collect::<Result<Vec<_>>>()?;
    select_max(&scored)
}

/// Percentage of `accuracies` strictly above `baseline`.
pub fn pct_over_baseline(accuracies: &[f64], baseline: f64) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("empty pool"));
    }
    let above = accuracies.iter().filter(|a| **a > baseline).count();
    Ok(100.0 * above as f64 / accuracies.len() as f64)
}

/// How batch accuracies combine into the reported episodic accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchWeighting {
    #[default]
    Unweighted,
    BySize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSelection {
    pub batch: u32,
    pub result: SelectionResult,
    pub value: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicResult {
    pub batches: Vec<BatchSelection>,
    pub reported: f64,
}

/// Combines per-batch values.
pub fn combine_batches(values: &[(f64, usize)], weighting: BatchWeighting) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("no batches to combine"));
    }
    Ok(match weighting {
        BatchWeighting::Unweighted => values.iter().map(|(v, _)| v).sum::<f64>() / values.len() as f64,
        BatchWeighting::BySize => {
            let n: usize = values.iter().map(|(_, s)| s).sum();
            values.iter().map(|(v, s)| v * *s as f64).sum::<f64>() / n as f64
        }
    })
}

fn pool_batches(pack: &dyn BundleSource, pool: &SelectionPool) -> Result<Vec<u32>> {
    if !pack.manifest().setting.is_episodic() {
        return Err(Error::invalid(format!(
            "episodic selection needs a TTA pack, this one is {}",
            pack.manifest().setting
        )));
    }
    let mut batches: Vec<u32> = Vec::new();
    for c in &pool.candidates {
        let rec = pack
            .manifest()
            .record(&c.key)
            .ok_or_else(|| Error::missing(format!("checkpoint {}", c.key)))?;
        batches.extend(rec.batches());
    }
    batches.sort_unstable();
    batches.dedup();
    Ok(batches)
}

/// The candidates of `pool` that have a state for batch `b`.
fn batch_pool(pack: &dyn BundleSource, pool: &SelectionPool, b: u32) -> SelectionPool {
    let candidates = pool
        .candidates
        .iter()
        .filter(|c| pack.manifest().record(&c.key).is_some_and(|r| r.batches().contains(&b)))
        .cloned()
        .collect();
    SelectionPool {
        candidates,
        ..pool.clone()
    }
}

fn episodic(
    pack: &dyn BundleSource,
    pool: &SelectionPool,
    oracle: &OracleTable,
    weighting: BatchWeighting,
    mut pick: impl FnMut(&SelectionPool, u32) -> Result<SelectionResult>,
) -> Result<EpisodicResult> {
    let mut batches = Vec::new();
    for b in pool_batches(pack, pool)? {
        let sub = batch_pool(pack, pool, b);
        let result = pick(&sub, b)?;
        let k = score_key(&result.chosen, Some(b));
        batches.push(BatchSelection {
            batch: b,
            value: oracle.get(&result.chosen, Some(b))?,
            rows: oracle.sizes.get(&k).copied().unwrap_or(0),
            result,
        });
    }
    let reported = combine_batches(
        &batches.iter().map(|s| (s.value, s.rows)).collect::<Vec<_>>(),
        weighting,
    )?;
    Ok(EpisodicResult { batches, reported })
}

/// Per-batch selection for TTA packs, scoring each batch on its own data.
pub fn select_episodic(
    pack: &dyn BundleSource,
    pool: &SelectionPool,
    validator: &str,
    scores: &ScoreTable,
    oracle: &OracleTable,
    weighting: BatchWeighting,
) -> Result<EpisodicResult> {
    episodic(pack, pool, oracle, weighting, |p, b| {
        select_best(p, validator, scores, Some(b))
    })
}

/// Per-batch oracle selection for TTA packs.
pub fn select_episodic_oracle(
    pack: &dyn BundleSource,
    pool: &SelectionPool,
    oracle: &OracleTable,
    weighting: BatchWeighting,
) -> Result<EpisodicResult> {
    episodic(pack, pool, oracle, weighting, |p, b| select_oracle(p, oracle, Some(b)))
}

/// Oracle value of the pack's baseline: the manifest's baseline record,
/// or the only source-only record. Episodic packs combine batches.
pub fn baseline_value(pack: &dyn BundleSource, oracle: &OracleTable, weighting: BatchWeighting) -> Result<f64> {
    let m = pack.manifest();
    let key = match &m.baseline {
        Some(k) => k.clone(),
        None => {
            let so: Vec<_> = m.source_only().collect();
            match so.as_slice() {
                [one] => one.key(),
                [] => return Err(Error::Selection("the pack has no source-only baseline".into())),
                _ => {
                    return Err(Error::Selection(
                        "several source-only records and no baseline named in the manifest".into(),
                    ))
                }
            }
        }
    };
    if m.setting.is_episodic() {
        let rec = m
            .record(&key)
            .ok_or_else(|| Error::missing(format!("baseline {key}")))?;
        let vals = rec
            .batches()
            .into_iter()
            .map(|b| {
                let k = score_key(&key, Some(b));
                Ok((oracle.get(&key, Some(b))?, oracle.sizes.get(&k).copied().unwrap_or(0)))
            })
            .collect::<Result<Vec<_>>>()?;
        combine_batches(&vals, weighting)
    } else {
        oracle.get(&key, None)
    }
}

/// One line of a selections CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub task: String,
    pub pool: String,
    pub validator: String,
    pub batch: Option<u32>,
    /// Empty when every candidate scored invalid.
    pub checkpoint_key: String,
    pub score: Option<f64>,
    pub value: Option<f64>,
    pub oracle_value: f64,
    pub rows: usize,
    pub ties: usize,
    pub tie_break: TieBreak,
}

pub const ORACLE_VALIDATOR: &str = "Oracle";

/// Writes selection rows with a header.
pub fn write_selections<W: Write>(rows: &[SelectionRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    if rows.is_empty() {
        out.write_record([
            "task",
            "pool",
            "validator",
            "batch",
            "checkpoint_key",
            "score",
            "value",
            "oracle_value",
            "rows",
            "ties",
            "tie_break",
        ])?;
    }
    out.flush().map_err(|e| Error::io("<selections csv>", e))
}

pub fn read_selections<R: Read>(r: R) -> Result<Vec<SelectionRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<SelectionRow>, _>>()?;
    Ok(rows)
}

/// Options for [`select_all`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelectOptions {
    pub include_source_only: bool,
    pub episodic: bool,
    pub weighting: BatchWeighting,
}

/// Runs every validator in `scores` (plus the oracle) on every algorithm
/// pool and on the source-only pool.
pub fn select_all(
    pack: &dyn BundleSource,
    scores: &ScoreTable,
    oracle: &OracleTable,
    opts: SelectOptions,
) -> Result<Vec<SelectionRow>> {
    let m = pack.manifest();
    if opts.episodic != m.setting.is_episodic() {
        return Err(Error::invalid(if opts.episodic {
            format!("episodic selection needs a TTA pack, this one is {}", m.setting)
        } else {
            "TTA packs are selected per batch; pass the episodic flag".to_string()
        }));
    }
    let task = m.task_name();
    let mut pools = Vec::new();
    for alg in m.algorithms() {
        pools.push(SelectionPool::for_algorithm(pack, &alg, opts.include_source_only)?);
    }
    if m.source_only().next().is_some() {
        pools.push(SelectionPool::source_only(pack)?);
    }
    let validators = scores.validators();
    let mut rows = Vec::new();
    for pool in &pools {
        let batches: Vec<Option<u32>> = if opts.episodic {
            pool_batches(pack, pool)?.into_iter().map(Some).collect()
        } else {
            vec![None]
        };
        for batch in batches {
            let sub = match batch {
                Some(b) => batch_pool(pack, pool, b),
                None => pool.clone(),
            };
            let best = select_oracle(&sub, oracle, batch)?;
            let best_value = oracle.get(&best.chosen, batch)?;
            let size = |k: &CheckpointKey| oracle.sizes.get(&score_key(k, batch)).copied().unwrap_or(0);
            for v in validators.iter().map(String::as_str).chain([ORACLE_VALIDATOR]) {
                let res = if v == ORACLE_VALIDATOR {
                    Some(best.clone())
                } else {
                    lenient(select_best(&sub, v, scores, batch))?
                };
                let value = res.as_ref().map(|r| oracle.get(&r.chosen, batch)).transpose()?;
                rows.push(SelectionRow {
                    task: task.clone(),
                    pool: pool.name.clone(),
                    validator: v.to_string(),
                    batch,
                    checkpoint_key: res.as_ref().map(|r| r.chosen.to_string()).unwrap_or_default(),
                    score: res.as_ref().map(|r| r.score),
                    value,
                    oracle_value: best_value,
                    rows: size(res.as_ref().map_or(&best.chosen, |r| &r.chosen)),
                    ties: res.as_ref().map_or(0, |r| r.tied),
                    tie_break: res.as_ref().map_or(TieBreak::None, |r| r.tie_break),
                });
            }
        }
    }
    Ok(rows)
}

/// An all-invalid pool yields no selection instead of an error.
fn lenient(r: Result<SelectionResult>) -> Result<Option<SelectionResult>> {
    match r {
        Ok(r) => Ok(Some(r)),
        Err(Error::Selection(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

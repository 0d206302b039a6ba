//! Scoring engine: every (checkpoint, validator) cell of a pack, fanned
//! out over a bounded worker pool with deterministic output order.

use std::collections::HashMap;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::datapack::{BundleSource, CheckpointKey};
use crate::error::{Error, Result};
use crate::validators::{CheckpointScorer, ValidatorScore, ValidatorSpec};

/// Scores in row order: checkpoint-major, then validator in spec order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ValidatorScore>,
    index: HashMap<(String, String), usize>,
}

pub const SCORE_COLUMNS: [&str; 5] = ["checkpoint_key", "validator_id", "raw", "oriented", "valid"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ScoreTable {
    pub fn new(rows: Vec<ValidatorScore>) -> Result<Self> {
        let mut index = HashMap::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if index.insert((r.checkpoint.clone(), r.validator.clone()), i).is_some() {
                return Err(Error::invalid(format!(
                    "score for ({}, {}) appears twice",
                    r.checkpoint, r.validator
                )));
            }
        }
        Ok(Self { rows, index })
    }

    pub fn get(&self, checkpoint: &str, validator: &str) -> Option<&ValidatorScore> {
        self.index
            .get(&(checkpoint.to_string(), validator.to_string()))
            .map(|&i| &self.rows[i])
    }

    /// Validator ids in first-appearance order.
    pub fn validators(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.validator) {
                out.push(r.validator.clone());
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SCORE_COLUMNS)?;
        for r in &self.rows {
            out.write_record([
                r.checkpoint.as_str(),
                r.validator.as_str(),
                &fmt_opt(r.raw),
                &fmt_opt(r.oriented),
                if r.is_valid() { "true" } else { "false" },
            ])?;
        }
        out.flush().map_err(|e| Error::io("<score csv>", e))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != SCORE_COLUMNS {
            return Err(Error::Shape(format!(
                "score CSV header must be {}, found {}",
                SCORE_COLUMNS.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let parse = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Shape(format!("bad {what} value {s:?}")))
            }
        };
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let valid = match &rec[4] {
                "true" => true,
                "false" => false,
                other => return Err(Error::Shape(format!("bad valid flag {other:?}"))),
            };
            let raw = parse(&rec[2], "raw")?;
            let oriented = parse(&rec[3], "oriented")?;
            if valid != (raw.is_some() && oriented.is_some()) {
                return Err(Error::Shape(format!(
                    "row ({}, {}) is marked valid={valid} but has raw={:?}, oriented={:?}",
                    &rec[0], &rec[1], raw, oriented
                )));
            }
            rows.push(ValidatorScore {
                checkpoint: rec[0].to_string(),
                validator: rec[1].to_string(),
                fingerprint: String::new(),
                raw,
                oriented,
            });
        }
        Self::new(rows)
    }
}

/// The scoring units of a pack: each checkpoint, or each (checkpoint,
/// batch) in episodic packs.
pub fn scoring_units(pack: &dyn BundleSource) -> Vec<(CheckpointKey, Option<u32>)> {
    let m = pack.manifest();
    let mut units = Vec::new();
    for rec in &m.checkpoints {
        if m.setting.is_episodic() {
            units.extend(rec.batches().into_iter().map(|b| (rec.key(), Some(b))));
        } else {
            units.push((rec.key(), None));
        }
    }
    units
}

/// Builds a worker pool of `parallelism` threads.
pub fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    if parallelism == 0 {
        return Err(Error::invalid("parallelism must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

/// Scores every spec on every checkpoint. Output is identical for any
/// `parallelism`.
pub fn score_pack(
    pack: &dyn BundleSource,
    specs: &[ValidatorSpec],
    seed: u64,
    parallelism: usize,
) -> Result<ScoreTable> {
    let setting = pack.manifest().setting;
    for spec in specs {
        spec.check_applicable(setting)?;
    }
    let units = scoring_units(pack);
    let pool = thread_pool(parallelism)?;
    let per_unit: Vec<Vec<ValidatorScore>> = pool.install(|| {
        units
            .par_iter()
            .map(|(key, batch)| {
                let mut scorer = CheckpointScorer::new(pack, key.clone(), *batch, seed);
                specs.iter().map(|s| scorer.score(s)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    ScoreTable::new(per_unit.into_iter().flatten().collect())
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bundle::SplitTag;
use crate::error::{Error, Result};

/// Train / val / test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn check(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::invalid(format!(
                "split fractions {parts:?} must be non-negative"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` examples. Val and test take the
    /// rounded proportions; the remainder goes to train.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.check()?;
        let val = (n as f64 * self.val).round() as usize;
        let test = (n as f64 * self.test).round() as usize;
        if n < 3 || val == 0 || test == 0 || val + test >= n {
            return Err(Error::invalid(format!(
                "{n} examples are too few to populate train, val and test"
            )));
        }
        Ok((n - val - test, val, test))
    }
}

/// Per-example split tags for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub fractions: SplitFractions,
    pub tags: Vec<SplitTag>,
}

impl SplitAssignment {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Example indices carrying `tag`, ascending.
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let count = |t| self.tags.iter().filter(|x| **x == t).count();
        (count(SplitTag::Train), count(SplitTag::Val), count(SplitTag::Test))
    }
}

/// Deterministically partitions `0..n` into train/val/test.
pub fn assign_splits(n: usize, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    let (train, val, _test) = fractions.sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![SplitTag::Test; n];
    for (pos, &idx) in order.iter().enumerate() {
        tags[idx] = if pos < train {
            SplitTag::Train
        } else if pos < train + val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }
    Ok(SplitAssignment { fractions, tags })
}

use crate::error::{Error, Result};

/// Cross-tabulation of two labelings. Rows index the distinct values of
/// the first labeling, columns the second, both in ascending label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let ids = labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("label present"))
        .collect();
    (ids, distinct.len())
}

/// `counts[i][j] = #{t : a_t = i-th label of a and b_t = j-th label of b}`.
pub fn contingency(a: &[usize], b: &[usize]) -> Result<ContingencyTable> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "labelings have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ia, ka) = compact(a);
    let (ib, kb) = compact(b);
    let mut counts = vec![vec![0u64; kb]; ka];
    for (&x, &y) in ia.iter().zip(&ib) {
        counts[x][y] += 1;
    }
    Ok(ContingencyTable {
        counts,
        n: a.len() as u64,
    })
}

impl ContingencyTable {
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let k = self.counts.first().map_or(0, Vec::len);
        (0..k).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// True when the two labelings are the same partition up to relabeling.
    pub fn is_bijective(&self) -> bool {
        let nz = |it: &mut dyn Iterator<Item = u64>| it.filter(|c| *c > 0).count() == 1;
        let k = self.counts.first().map_or(0, Vec::len);
        self.counts.len() == k
            && self.counts.iter().all(|r| nz(&mut r.iter().copied()))
            && (0..k).all(|j| nz(&mut self.counts.iter().map(|r| r[j])))
    }
}

//! Partition-comparison and cluster-quality criteria.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::numerics::{contingency, sq_dist, ContingencyTable};

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..=n {
        acc += (i as f64).ln();
        out.push(acc);
    }
    out
}

fn entropy_of_counts(counts: &[u64], n: u64) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(t: &ContingencyTable) -> f64 {
    let (a, b) = (t.row_sums(), t.col_sums());
    let n = t.n as f64;
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Expected mutual information under the hypergeometric model of random
/// labelings with fixed marginals.
fn expected_mutual_information(t: &ContingencyTable) -> f64 {
    let (a, b) = (t.row_sums(), t.col_sums());
    let n = t.n;
    let lf = ln_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in &a {
        for &bj in &b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            let base =
                lf[ai as usize] + lf[bj as usize] + lf[(n - ai) as usize] + lf[(n - bj) as usize] - lf[n as usize];
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (ai as f64 * bj as f64)).ln();
                let log_p = base
                    - lf[nij as usize]
                    - lf[(ai - nij) as usize]
                    - lf[(bj - nij) as usize]
                    - lf[(n + nij - ai - bj) as usize];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

fn table(a: &[usize], b: &[usize]) -> Result<ContingencyTable> {
    if a.is_empty() {
        return Err(Error::undefined("cannot compare empty labelings"));
    }
    contingency(a, b)
}

/// Adjusted mutual information with the arithmetic-mean normaliser.
pub fn adjusted_mutual_info(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = table(a, b)?;
    if t.is_bijective() {
        return Ok(1.0);
    }
    let mi = mutual_information(&t);
    let emi = expected_mutual_information(&t);
    let h_a = entropy_of_counts(&t.row_sums(), t.n);
    let h_b = entropy_of_counts(&t.col_sums(), t.n);
    let mut denom = 0.5 * (h_a + h_b) - emi;
    if denom < 0.0 {
        denom = denom.min(-f64::EPSILON);
    } else {
        denom = denom.max(f64::EPSILON);
    }
    Ok((mi - emi) / denom)
}

/// Pair confusion counts over ordered pairs: (same in both, same in `a`
/// only, same in `b` only, different in both).
fn pair_confusion(t: &ContingencyTable) -> (f64, f64, f64, f64) {
    let n = t.n as f64;
    let sq = |v: &mut dyn Iterator<Item = u64>| v.map(|c| (c as f64) * (c as f64)).sum::<f64>();
    let sum_sq = sq(&mut t.counts.iter().flatten().copied());
    let a_sq = sq(&mut t.row_sums().into_iter());
    let b_sq = sq(&mut t.col_sums().into_iter());
    let both = sum_sq - n;
    let a_only = a_sq - sum_sq;
    let b_only = b_sq - sum_sq;
    let neither = n * n - n - both - a_only - b_only;
    (both, a_only, b_only, neither)
}

/// Adjusted Rand index.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = table(a, b)?;
    if t.is_bijective() {
        return Ok(1.0);
    }
    let (tp, fn_, fp, tn) = pair_confusion(&t);
    if fn_ == 0.0 && fp == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * (tp * tn - fn_ * fp) / ((tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn)))
}

/// Harmonic mean of homogeneity and completeness, treating `a` as the
/// classes and `b` as the clusters.
pub fn v_measure(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = table(a, b)?;
    if t.is_bijective() {
        return Ok(1.0);
    }
    let h_a = entropy_of_counts(&t.row_sums(), t.n);
    let h_b = entropy_of_counts(&t.col_sums(), t.n);
    let mi = mutual_information(&t);
    // H(A|B) = H(A) - I(A;B)
    let homogeneity = if h_a == 0.0 { 1.0 } else { 1.0 - (h_a - mi) / h_a };
    let completeness = if h_b == 0.0 { 1.0 } else { 1.0 - (h_b - mi) / h_b };
    if homogeneity + completeness == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * homogeneity * completeness / (homogeneity + completeness))
}

/// Fowlkes-Mallows index `TP / sqrt((TP + FP)(TP + FN))` over sample pairs.
pub fn fowlkes_mallows(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = table(a, b)?;
    if t.is_bijective() {
        return Ok(1.0);
    }
    let (tp, a_only, b_only, _) = pair_confusion(&t);
    if tp == 0.0 {
        return Ok(0.0);
    }
    Ok((tp / (tp + a_only)).sqrt() * (tp / (tp + b_only)).sqrt())
}

struct Partition {
    members: Vec<Vec<usize>>,
}

fn partition(x: ArrayView2<f64>, labels: &[usize]) -> Result<Partition> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.nrows(), labels.len())));
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let k = ids.len();
    if k < 2 {
        return Err(Error::undefined(
            "a single predicted class leaves cluster quality undefined",
        ));
    }
    if k >= labels.len() {
        return Err(Error::undefined("every point is its own cluster"));
    }
    let mut members = vec![Vec::new(); k];
    for (i, l) in labels.iter().enumerate() {
        members[ids.binary_search(l).expect("present")].push(i);
    }
    Ok(Partition { members })
}

fn centroids(x: ArrayView2<f64>, p: &Partition) -> Array2<f64> {
    let mut c = Array2::zeros((p.members.len(), x.ncols()));
    for (k, m) in p.members.iter().enumerate() {
        for &i in m {
            c.row_mut(k).scaled_add(1.0, &x.row(i));
        }
        c.row_mut(k).mapv_inplace(|v| v / m.len() as f64);
    }
    c
}

fn rows(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    x.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

/// Mean silhouette coefficient with Euclidean distances. Points in
/// singleton clusters score 0.
pub fn silhouette(x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let p = partition(x, labels)?;
    let pts = rows(x);
    let mut cluster_of = vec![0; pts.len()];
    for (k, m) in p.members.iter().enumerate() {
        for &i in m {
            cluster_of[i] = k;
        }
    }
    let mut total = 0.0;
    for i in 0..pts.len() {
        let own = cluster_of[i];
        if p.members[own].len() == 1 {
            continue;
        }
        let mut sums = vec![0.0; p.members.len()];
        for j in 0..pts.len() {
            if j != i {
                sums[cluster_of[j]] += sq_dist(&pts[i], &pts[j]).sqrt();
            }
        }
        let a = sums[own] / (p.members[own].len() - 1) as f64;
        let b = (0..p.members.len())
            .filter(|k| *k != own)
            .map(|k| sums[k] / p.members[k].len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / pts.len() as f64)
}

/// Davies-Bouldin index. Coinciding centroids contribute a ratio of 0.
pub fn davies_bouldin(x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let p = partition(x, labels)?;
    let c = centroids(x, &p);
    let cs = rows(c.view());
    let pts = rows(x);
    let spread: Vec<f64> = p
        .members
        .iter()
        .zip(&cs)
        .map(|(m, ctr)| m.iter().map(|&i| sq_dist(&pts[i], ctr).sqrt()).sum::<f64>() / m.len() as f64)
        .collect();
    let k = cs.len();
    let mut total = 0.0;
    for i in 0..k {
        let worst = (0..k)
            .filter(|j| *j != i)
            .map(|j| {
                let d = sq_dist(&cs[i], &cs[j]).sqrt();
                if d > 0.0 {
                    (spread[i] + spread[j]) / d
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        total += worst;
    }
    Ok(total / k as f64)
}

/// Calinski-Harabasz index `[tr(B)/(k-1)] / [tr(W)/(N-k)]`; 1 when the
/// within-cluster scatter vanishes.
pub fn calinski_harabasz(x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let p = partition(x, labels)?;
    let n = x.nrows();
    let k = p.members.len();
    let c = centroids(x, &p);
    let mean = x.mean_axis(Axis(0)).expect("rows present").to_vec();
    let pts = rows(x);
    let mut between = 0.0;
    let mut within = 0.0;
    for (m, ctr) in p.members.iter().zip(rows(c.view())) {
        between += m.len() as f64 * sq_dist(&ctr, &mean);
        within += m.iter().map(|&i| sq_dist(&pts[i], &ctr)).sum::<f64>();
    }
    if within == 0.0 {
        return Ok(1.0);
    }
    Ok(between * (n - k) as f64 / (within * (k - 1) as f64))
}

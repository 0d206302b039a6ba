use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::sq_dist;
use crate::error::{Error, Result};
use crate::seed;

/// k-means settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    /// Convergence threshold on total squared center movement, relative to
    /// the mean per-dimension variance of the data.
    pub tol: f64,
    pub seed: u64,
}

impl ClusterConfig {
    pub const DEFAULT_RESTARTS: usize = 10;
    pub const DEFAULT_MAX_ITERS: usize = 300;
    pub const DEFAULT_TOL: f64 = 1e-4;

    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: Self::DEFAULT_RESTARTS,
            max_iters: Self::DEFAULT_MAX_ITERS,
            tol: Self::DEFAULT_TOL,
            seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.k == 0 || self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::invalid("k, restarts and max_iters must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    /// Restart that produced this result.
    pub restart: usize,
}

struct Points<'a> {
    data: std::borrow::Cow<'a, [f64]>,
    dim: usize,
}

impl Points<'_> {
    fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn distinct_rows(p: &Points, at_least: usize) -> bool {
    let mut seen: Vec<&[f64]> = Vec::new();
    for i in 0..p.len() {
        let r = p.row(i);
        if !seen.contains(&r) {
            seen.push(r);
            if seen.len() >= at_least {
                return true;
            }
        }
    }
    seen.len() >= at_least
}

fn assign(p: &Points, centers: &[Vec<f64>], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for i in 0..p.len() {
        let x = p.row(i);
        let (best, d) = centers
            .iter()
            .enumerate()
            .map(|(c, ctr)| (c, sq_dist(x, ctr)))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        labels[i] = best;
        dists[i] = d;
        inertia += d;
    }
    inertia
}

fn plus_plus_seed(p: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = p.len();
    let mut centers = vec![p.row(rng.random_range(0..n)).to_vec()];
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(p.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in closest.iter().enumerate() {
            if *d <= 0.0 {
                continue;
            }
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        if closest[pick] <= 0.0 {
            // rounding pushed past the last positive weight
            pick = closest.iter().rposition(|d| *d > 0.0).expect("distinct points remain");
        }
        let c = p.row(pick).to_vec();
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(p.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd(
    p: &Points,
    cfg: &ClusterConfig,
    restart: usize,
    tol_abs: f64,
    trace: &mut dyn FnMut(usize, usize, f64),
) -> KMeansResult {
    let (n, dim, k) = (p.len(), p.dim, cfg.k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &["kmeans-restart", &restart.to_string()]));
    let mut centers = plus_plus_seed(p, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    for iter in 0..cfg.max_iters {
        let inertia = assign(p, &centers, &mut labels, &mut dists);
        trace(restart, iter, inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums[labels[i]].iter_mut().zip(p.row(i)) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        let mut shift = 0.0;
        for c in 0..k {
            let new_center = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect::<Vec<_>>()
            } else {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .filter(|i| !taken[*i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("n >= k");
                taken[far] = true;
                p.row(far).to_vec()
            };
            shift += sq_dist(&new_center, &centers[c]);
            centers[c] = new_center;
        }
        if shift <= tol_abs {
            break;
        }
    }
    let inertia = assign(p, &centers, &mut labels, &mut dists);
    trace(restart, cfg.max_iters, inertia);
    let flat: Vec<f64> = centers.into_iter().flatten().collect();
    KMeansResult {
        labels,
        centers: Array2::from_shape_vec((k, dim), flat).expect("k x dim"),
        inertia,
        restart,
    }
}

/// k-means with k-means++ seeding. The restart with the lowest inertia is
/// returned (ties go to the lower restart index).
pub fn kmeans(points: ArrayView2<f64>, cfg: &ClusterConfig) -> Result<KMeansResult> {
    kmeans_traced(points, cfg, &mut |_, _, _| {})
}

/// As [`kmeans`], calling `trace(restart, iteration, inertia)` after every
/// assignment step.
pub fn kmeans_traced(
    points: ArrayView2<f64>,
    cfg: &ClusterConfig,
    trace: &mut dyn FnMut(usize, usize, f64),
) -> Result<KMeansResult> {
    cfg.check()?;
    let (n, dim) = points.dim();
    if n < cfg.k {
        return Err(Error::invalid(format!("{n} points cannot form {} clusters", cfg.k)));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points have non-finite entries"));
    }
    let data = match points.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(points.iter().copied().collect()),
    };
    let p = Points { data, dim };
    if !distinct_rows(&p, cfg.k) {
        return Err(Error::undefined(format!("fewer than {} distinct points", cfg.k)));
    }
    let mean_var = if n > 0 && dim > 0 {
        let mut total = 0.0;
        for j in 0..dim {
            let col = points.column(j);
            let m = col.sum() / n as f64;
            total += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        }
        total / dim as f64
    } else {
        0.0
    };
    let tol_abs = cfg.tol * mean_var;
    let mut best: Option<KMeansResult> = None;
    for r in 0..cfg.restarts {
        let res = lloyd(&p, cfg, r, tol_abs, trace);
        if best.as_ref().is_none_or(|b| res.inertia < b.inertia) {
            best = Some(res);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

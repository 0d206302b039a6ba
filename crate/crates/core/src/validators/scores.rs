//! Scorers for the non-clustering criteria. Inputs are row-per-sample
//! matrices in f64.

use ndarray::{Array2, ArrayView2, Axis};

use super::spec::Bandwidth;
use crate::error::{Error, Result};
use crate::numerics::{
    clamp_small_singular_values, covariance, entropy, rbf_from_sq_dist, row_softmax, singular_values, sq_dist,
};

fn nonempty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        Err(Error::undefined(format!("{what} has no rows")))
    } else {
        Ok(())
    }
}

/// Fraction of rows whose predicted class equals the label.
pub fn accuracy(predicted: &[usize], labels: &[u32]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    nonempty(labels.len(), "labelled sample")?;
    let hits = predicted
        .iter()
        .zip(labels)
        .filter(|(p, y)| **p == **y as usize)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean squared error over samples and coordinates.
pub fn mse(outputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    if outputs.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "outputs {:?} vs targets {:?}",
            outputs.dim(),
            targets.dim()
        )));
    }
    nonempty(outputs.len(), "regression output")?;
    let total: f64 = outputs.iter().zip(targets.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / outputs.len() as f64)
}

fn row_entropies(p: ArrayView2<f64>) -> Result<Vec<f64>> {
    p.axis_iter(Axis(0)).map(|r| entropy(&r.to_vec())).collect()
}

/// Mean entropy of the prediction rows.
pub fn mean_entropy(p: ArrayView2<f64>) -> Result<f64> {
    nonempty(p.nrows(), "prediction matrix")?;
    let h = row_entropies(p)?;
    Ok(h.iter().sum::<f64>() / h.len() as f64)
}

/// Entropy of the mean prediction minus the mean entropy.
pub fn infomax(p: ArrayView2<f64>) -> Result<f64> {
    nonempty(p.nrows(), "prediction matrix")?;
    let conditional = mean_entropy(p)?;
    let marginal = p.mean_axis(Axis(0)).expect("non-empty");
    let total: f64 = marginal.sum();
    let marginal: Vec<f64> = marginal.iter().map(|v| v / total).collect();
    Ok(entropy(&marginal)? - conditional)
}

/// Nuclear norm of the prediction matrix.
pub fn bnm(p: ArrayView2<f64>) -> Result<f64> {
    nonempty(p.nrows(), "prediction matrix")?;
    Ok(singular_values(p)?.iter().sum())
}

fn l2_normalize_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// Soft neighbourhood density: mean entropy of the temperature softmax of
/// cosine similarities.
pub fn snd(x: ArrayView2<f64>, temperature: f64, exclude_self: bool) -> Result<f64> {
    if x.nrows() < 2 {
        return Err(Error::undefined(format!(
            "SND needs at least 2 rows, got {}",
            x.nrows()
        )));
    }
    let v = l2_normalize_rows(x);
    let sim = v.dot(&v.t());
    let p = row_softmax(sim.view(), temperature, exclude_self)?;
    let h: f64 = p
        .axis_iter(Axis(0))
        .map(|r| r.iter().filter(|q| **q > 0.0).map(|q| -q * q.ln()).sum::<f64>())
        .sum();
    Ok(h / x.nrows() as f64)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn pairwise_sq(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let rows_a: Vec<Vec<f64>> = a.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let rows_b: Vec<Vec<f64>> = b.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    Array2::from_shape_fn((rows_a.len(), rows_b.len()), |(i, j)| sq_dist(&rows_a[i], &rows_b[j]))
}

/// Resolves the kernel bandwidth for a source/target pair.
pub fn mmd_bandwidth(s: ArrayView2<f64>, t: ArrayView2<f64>, mode: Bandwidth) -> Result<f64> {
    match mode {
        Bandwidth::Euler => Ok(std::f64::consts::E),
        Bandwidth::Fixed(b) => Ok(b),
        Bandwidth::Median => {
            let pooled = ndarray::concatenate(Axis(0), &[s, t]).map_err(|e| Error::Shape(e.to_string()))?;
            let d = pairwise_sq(pooled.view(), pooled.view());
            let n = pooled.nrows();
            let upper: Vec<f64> = (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                .map(|(i, j)| d[[i, j]])
                .collect();
            let m = median(upper);
            if m > 0.0 {
                Ok(m)
            } else {
                Err(Error::undefined(
                    "median pairwise distance is zero, so the bandwidth is degenerate",
                ))
            }
        }
    }
}

/// Unbiased three-term MMD estimate with a Gaussian kernel.
pub fn mmd(s: ArrayView2<f64>, t: ArrayView2<f64>, mode: Bandwidth) -> Result<f64> {
    if s.ncols() != t.ncols() {
        return Err(Error::Shape(format!(
            "source has {} dims, target {}",
            s.ncols(),
            t.ncols()
        )));
    }
    let (ns, nt) = (s.nrows(), t.nrows());
    if ns < 2 || nt < 2 {
        return Err(Error::undefined(format!(
            "MMD needs 2 rows per domain, got {ns} and {nt}"
        )));
    }
    let bw = mmd_bandwidth(s, t, mode)?;
    let within = |x: ArrayView2<f64>| {
        let d = pairwise_sq(x, x);
        let n = x.nrows();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += rbf_from_sq_dist(d[[i, j]], bw);
                }
            }
        }
        sum / (n * (n - 1)) as f64
    };
    let cross: f64 = pairwise_sq(s, t).iter().map(|d| rbf_from_sq_dist(*d, bw)).sum();
    Ok(within(s) + within(t) - 2.0 * cross / (ns * nt) as f64)
}

/// `|C_S - C_T|_F^2 / (4 d^2)`.
pub fn coral(s: ArrayView2<f64>, t: ArrayView2<f64>) -> Result<f64> {
    if s.ncols() != t.ncols() {
        return Err(Error::Shape(format!(
            "source has {} dims, target {}",
            s.ncols(),
            t.ncols()
        )));
    }
    if s.nrows() < 2 || t.nrows() < 2 {
        return Err(Error::undefined(format!(
            "CORAL needs 2 rows per domain, got {} and {}",
            s.nrows(),
            t.nrows()
        )));
    }
    let d = s.ncols() as f64;
    let diff = covariance(s)? - covariance(t)?;
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / (4.0 * d * d))
}

/// Smooth effective rank `exp(H(p))` with `p = sigma / sum(sigma) + eps`.
pub fn rankme(m: ArrayView2<f64>, epsilon: f64) -> Result<f64> {
    let mut sv = singular_values(m)?;
    clamp_small_singular_values(&mut sv);
    let total: f64 = sv.iter().sum();
    if !(total > 0.0) {
        return Err(Error::undefined("RankMe of an all-zero matrix"));
    }
    let h: f64 = sv
        .iter()
        .map(|s| s / total + epsilon)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.exp())
}

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Relative threshold below which singular values count as zero for
/// rank-sensitive consumers.
pub const SV_RELATIVE_FLOOR: f64 = 1e-10;

const MAX_SWEEPS: usize = 60;

fn ensure_finite(m: &ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has non-finite entries")))
    }
}

/// Singular values of `m`, non-increasing, length `min(N, D)`.
///
/// One-sided Jacobi rotations on the columns of the taller orientation;
/// the singular values are the final column norms.
pub fn singular_values(m: ArrayView2<f64>) -> Result<Vec<f64>> {
    ensure_finite(&m, "matrix")?;
    let (rows, cols) = m.dim();
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    // Work column-major on the orientation with fewer columns.
    let (n, k, a) = if rows >= cols {
        (rows, cols, m.t().to_owned())
    } else {
        (cols, rows, m.to_owned())
    };
    // `cs[j]` holds column j as a contiguous vector of length n.
    let mut cs: Vec<Vec<f64>> = a.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    debug_assert_eq!(cs.len(), k);
    debug_assert!(cs.iter().all(|c| c.len() == n));

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cs[p], &cs[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cs.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cs.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Zeroes singular values below `SV_RELATIVE_FLOOR * max`.
pub fn clamp_small_singular_values(sv: &mut [f64]) {
    let max = sv.iter().copied().fold(0.0, f64::max);
    for s in sv.iter_mut() {
        if *s < SV_RELATIVE_FLOOR * max {
            *s = 0.0;
        }
    }
}

/// Unbiased sample covariance (divisor N - 1) of the rows of `m`.
pub fn covariance(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    ensure_finite(&m, "matrix")?;
    let (n, d) = m.dim();
    if n < 2 {
        return Err(Error::invalid(format!("covariance needs at least 2 rows, got {n}")));
    }
    let mean = m.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &m - &mean.insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    // symmetrise exactly
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(cov)
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

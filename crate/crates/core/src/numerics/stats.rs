use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Tolerance on probability vector normalisation.
pub const PROB_SUM_TOL: f64 = 1e-4;

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!(
            "probability entry {v} is negative or non-finite"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::invalid(format!("probabilities sum to {sum}")));
    }
    Ok(entropy_unchecked(p))
}

/// Entropy without validation, clamped at zero.
pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
    h.max(0.0)
}

/// 1-based ranks in ascending order; ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot rank non-finite values"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end (0-based) -> ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    Ok(ranks)
}

/// Softmax of each row of `m / temperature`. With `exclude_diagonal`,
/// entry (i, i) is left out of row i and set to 0.
pub fn row_softmax(m: ArrayView2<f64>, temperature: f64, exclude_diagonal: bool) -> Result<Array2<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (n, c) = m.dim();
    if exclude_diagonal && n != c {
        return Err(Error::Shape(format!(
            "diagonal exclusion needs a square matrix, got {n}x{c}"
        )));
    }
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        let included = |j: usize| !(exclude_diagonal && i == j);
        let max = (0..c)
            .filter(|&j| included(j))
            .map(|j| m[[i, j]] / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for j in (0..c).filter(|&j| included(j)) {
            let e = (m[[i, j]] / temperature - max).exp();
            out[[i, j]] = e;
            total += e;
        }
        out.row_mut(i).mapv_inplace(|v| v / total);
    }
    Ok(out)
}

/// Softmax of every row at unit temperature.
pub fn softmax_rows(m: ArrayView2<f64>) -> Array2<f64> {
    row_softmax(m, 1.0, false).expect("unit temperature is valid")
}

//! L2 normalisation with its backward pass, shared by both contrastive losses.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{DclError, Result};

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(DclError::invalid("cannot normalize a zero-norm or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Row-normalised copy of `m` plus the original row norms.
pub fn normalize_rows(m: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = m.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
        return Err(DclError::invalid(format!("row {i} has zero or non-finite norm")));
    }
    let unit = &m / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Pull a gradient on the unit rows back to the raw rows:
/// `dx = (d - (d . u) u) / |x|`.
pub fn normalize_rows_backward(unit: &Array2<f64>, norms: &Array1<f64>, d_unit: &Array2<f64>) -> Array2<f64> {
    let radial = (unit * d_unit).sum_axis(Axis(1));
    let mut dx = d_unit - &(unit * &radial.view().insert_axis(Axis(1)));
    dx /= &norms.view().insert_axis(Axis(1));
    dx
}

/// Stable `log(sum(exp(x)))`; `-inf` for an empty slice.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

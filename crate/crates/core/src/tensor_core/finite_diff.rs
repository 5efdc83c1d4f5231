use crate::error::{Error, Result};

/// Default central-difference step for 64-bit evaluation.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient estimate `(f(x + εe_i) − f(x − εe_i)) / 2ε`.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = finite(f(&x)?, i)?;
        x[i] = orig - eps;
        let minus = finite(f(&x)?, i)?;
        x[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Central-difference directional derivative along `dir`.
pub fn finite_diff_directional<F>(mut f: F, point: &[f64], dir: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    let shifted = |s: f64| -> Vec<f64> { point.iter().zip(dir).map(|(p, d)| p + s * d).collect() };
    let plus = finite(f(&shifted(eps))?, 0)?;
    let minus = finite(f(&shifted(-eps))?, 0)?;
    Ok((plus - minus) / (2.0 * eps))
}

fn finite(v: f64, node: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            op: "finite_diff",
            node,
        })
    }
}

/// `‖a − b‖_∞ / max(‖b‖_∞, floor)`: the error metric used by gradient checks.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(floor, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

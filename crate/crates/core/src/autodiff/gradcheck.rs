use crate::error::{Error, Result};

/// Largest relative error between an analytic gradient and fourth-order central
/// differences `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
///
/// `f` maps a parameter vector to `(value, gradient)`; the gradient is only read
/// at the unperturbed point. `coords` restricts the check to a subset of
/// coordinates (all of them when `None`). The relative error of coordinate `i`
/// is `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step h must be positive, got {h}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is {value} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension {
            op: "finite_difference_check",
            lhs: vec![params.len()],
            rhs: vec![analytic.len()],
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe[i] = orig + offset;
            let v = f(&probe)?.0;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("objective non-finite near coordinate {i}")));
            }
            Ok(v)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        probe[i] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

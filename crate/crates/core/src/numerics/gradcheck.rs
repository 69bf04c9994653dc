use crate::error::{Error, Result};

/// Central-difference gradient check.
///
/// `value_and_grad` returns the objective and its analytic gradient at a
/// flat parameter vector; it must be deterministic (frozen noise). The result
/// is `max_i |(f(p+h·e_i) − f(p−h·e_i))/2h − g_i| / (|g_i| + 1e-8)`.
pub fn finite_difference_check<F>(mut value_and_grad: F, params: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (f0, grad) = value_and_grad(params)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("finite_difference_check: f(p)".into()));
    }
    if grad.len() != params.len() {
        return Err(Error::shape("finite_difference_check", &[params.len()], &[grad.len()]));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let (fp, _) = value_and_grad(&p)?;
        p[i] = orig - h;
        let (fm, _) = value_and_grad(&p)?;
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("finite_difference_check: coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / (grad[i].abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

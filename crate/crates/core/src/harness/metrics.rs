use super::{HarnessError, Result};

/// Error charged to a flagged (degenerate) prediction.
pub const FLAGGED_ERROR_DEG: f64 = 180.0;
pub const ACC_THRESHOLD_DEG: f64 = 30.0;

/// Radians to degrees. The only place this conversion happens.
pub fn to_degrees(rad: f64) -> f64 {
    rad.to_degrees()
}

fn non_empty(errors: &[f64]) -> Result<()> {
    if errors.is_empty() {
        return Err(HarnessError::Empty);
    }
    if let Some(e) = errors.iter().find(|e| !(0.0..=180.0 + 1e-9).contains(*e)) {
        return Err(HarnessError::Invalid(format!("rotation error {e}° outside [0, 180]")));
    }
    Ok(())
}

/// Fraction of errors strictly below 30°.
pub fn acc30(errors_deg: &[f64]) -> Result<f64> {
    non_empty(errors_deg)?;
    Ok(errors_deg.iter().filter(|&&e| e < ACC_THRESHOLD_DEG).count() as f64 / errors_deg.len() as f64)
}

/// Median; even counts average the two central order statistics.
pub fn mederr(errors_deg: &[f64]) -> Result<f64> {
    non_empty(errors_deg)?;
    let mut v = errors_deg.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

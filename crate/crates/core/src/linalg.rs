//! Small dense helpers on top of nalgebra. Systems here are p×p with p the
//! number of covariates, so clarity wins over blocking.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SaeError};

/// Reciprocal condition threshold used to declare a system singular.
pub const MAX_CONDITION: f64 = 1e12;

/// 2-norm condition number from singular values; `inf` when rank deficient.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve a symmetric positive definite system, falling back to LU.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| SaeError::Singular(format!("{what}: matrix is not invertible")))
}

/// Log-determinant of a symmetric positive definite matrix.
pub fn logdet_spd(a: &DMatrix<f64>) -> Option<f64> {
    let ch = a.clone().cholesky()?;
    Some(2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.inverse());
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| SaeError::Singular(format!("{what}: matrix is not invertible")))
}

/// Reject a rank deficient or badly conditioned cross-product matrix.
pub fn check_conditioning(a: &DMatrix<f64>, what: &str) -> Result<()> {
    let k = condition_number(a);
    if k > MAX_CONDITION {
        return Err(SaeError::Singular(format!(
            "{what} is rank deficient (condition number {k:.3e})"
        )));
    }
    Ok(())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance; zero for fewer than two points.
pub fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

//! Direct (expansion) estimators of area means and their design variances.

use nalgebra::{DMatrix, DVector};

use crate::data::{AreaDataset, AreaUnits, UnitSample, WeightKind};
use crate::error::{Result, SaeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    /// `(1 − n/N) s² / n`.
    Srswor,
    /// `N^{-2} (1 − n/N) n/(n−1) Σ w_i² (y_i − ȳ_w)²`.
    General,
    /// As `General` with `y_i − ȳ_w` replaced by the residuals of the
    /// within-area base-weighted regression of `y` on `x` (GREG variance).
    Regression,
}

impl DesignKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignKind::Srswor => "srswor",
            DesignKind::General => "general",
            DesignKind::Regression => "regression",
        }
    }
}

impl std::str::FromStr for DesignKind {
    type Err = SaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "srswor" => Ok(DesignKind::Srswor),
            "general" => Ok(DesignKind::General),
            "regression" | "greg" => Ok(DesignKind::Regression),
            other => Err(SaeError::Config(format!(
                "unknown direct variance design `{other}`"
            ))),
        }
    }
}

/// Direct estimate of one area.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectEstimate {
    pub area_id: String,
    pub mu_dir: f64,
    /// Unset when `n_d = 1`.
    pub psi0: Option<f64>,
    pub kind: WeightKind,
}

/// `ȳ_dw = Σ w y / Σ w` for base weights, `ȳ^C_dw = N_d^{-1} Σ w^C y` for
/// calibrated weights.
pub fn direct_mean(area: &AreaUnits, kind: WeightKind) -> Result<f64> {
    let w = area.weights(kind)?;
    let wy: f64 = w.iter().zip(&area.y).map(|(w, y)| w * y).sum();
    Ok(match kind {
        WeightKind::Base => wy / w.iter().sum::<f64>(),
        WeightKind::Calibrated => wy / area.pop_size as f64,
    })
}

pub fn direct_variance(area: &AreaUnits, kind: WeightKind, design: DesignKind) -> Result<f64> {
    let n = area.n();
    if n < 2 {
        return Err(SaeError::Undefined(format!(
            "direct variance undefined for n_d=1 (area `{}`)",
            area.area_id
        )));
    }
    let nf = n as f64;
    let big_n = area.pop_size as f64;
    let fpc = 1.0 - nf / big_n;
    let v = match design {
        DesignKind::Srswor => {
            let m = area.y.iter().sum::<f64>() / nf;
            let s2 = area.y.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (nf - 1.0);
            fpc * s2 / nf
        }
        DesignKind::General => {
            let w = area.weights(kind)?;
            let m = direct_mean(area, kind)?;
            let ss: f64 = w
                .iter()
                .zip(&area.y)
                .map(|(w, y)| (w * (y - m)).powi(2))
                .sum();
            fpc * nf / (nf - 1.0) * ss / (big_n * big_n)
        }
        DesignKind::Regression => {
            let w = area.weights(kind)?;
            let e = regression_residuals(area)?;
            let ss: f64 = w.iter().zip(&e).map(|(w, e)| (w * e).powi(2)).sum();
            fpc * nf / (nf - 1.0) * ss / (big_n * big_n)
        }
    };
    Ok(v.max(0.0))
}

/// Residuals of the base-weighted least squares fit within one area. With
/// `n_d <= p` the fit interpolates and the residuals are zero.
fn regression_residuals(area: &AreaUnits) -> Result<Vec<f64>> {
    let x = &area.x;
    let y = DVector::from_column_slice(&area.y);
    let sw = DVector::from_iterator(area.n(), area.w.iter().map(|w| w.abs().sqrt()));
    let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * sw[i]);
    let yw = y.component_mul(&sw);
    let coef = xw.svd(true, true).solve(&yw, 1e-12).map_err(|e| {
        SaeError::Singular(format!("within-area regression of `{}`: {e}", area.area_id))
    })?;
    Ok((y - x * coef).iter().copied().collect())
}

/// Copy `psi0` from the unit sample into the matching rows of `data`
/// (aligned by position); areas with `n_d = 1` are left unset.
pub fn attach_psi0(
    data: &AreaDataset,
    sample: &UnitSample,
    kind: WeightKind,
    design: DesignKind,
) -> Result<AreaDataset> {
    if data.num_areas() != sample.num_areas() {
        return Err(SaeError::Validation(format!(
            "{} area rows for {} sampled areas",
            data.num_areas(),
            sample.num_areas()
        )));
    }
    let mut out = data.clone();
    for (r, a) in out.rows.iter_mut().zip(&sample.areas) {
        r.psi0 = if a.n() >= 2 {
            Some(direct_variance(a, kind, design)?)
        } else {
            None
        };
    }
    Ok(out)
}

/// Direct estimates for every area; `psi0` is left unset for `n_d = 1`.
pub fn direct_estimates(
    sample: &UnitSample,
    kind: WeightKind,
    design: DesignKind,
) -> Result<Vec<DirectEstimate>> {
    sample
        .areas
        .iter()
        .map(|a| {
            Ok(DirectEstimate {
                area_id: a.area_id.clone(),
                mu_dir: direct_mean(a, kind)?,
                psi0: if a.n() >= 2 {
                    Some(direct_variance(a, kind, design)?)
                } else {
                    None
                },
                kind,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(y: Vec<f64>, w: Vec<f64>, w_cal: Option<Vec<f64>>, big_n: usize) -> AreaUnits {
        let n = y.len();
        AreaUnits {
            area_id: "a".into(),
            pop_size: big_n,
            y,
            x: DMatrix::from_element(n, 1, 1.0),
            w,
            w_cal,
        }
    }

    #[test]
    fn srswor_weights_give_sample_mean() {
        let a = area(vec![1.0, 4.0, 7.0], vec![5.0; 3], None, 15);
        assert!((direct_mean(&a, WeightKind::Base).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn single_unit_calibrated() {
        let a = area(vec![3.5], vec![9.0], Some(vec![9.0]), 9);
        assert_eq!(direct_mean(&a, WeightKind::Calibrated).unwrap(), 3.5);
        assert!(matches!(
            direct_variance(&a, WeightKind::Calibrated, DesignKind::General),
            Err(SaeError::Undefined(_))
        ));
    }

    #[test]
    fn variance_examples() {
        let a = area(vec![2.0; 4], vec![2.0; 4], None, 8);
        assert_eq!(
            direct_variance(&a, WeightKind::Base, DesignKind::Srswor).unwrap(),
            0.0
        );
        let census = area(vec![1.0, 5.0, 2.0], vec![1.0; 3], None, 3);
        assert_eq!(
            direct_variance(&census, WeightKind::Base, DesignKind::General).unwrap(),
            0.0
        );
        let a = area(vec![1.0, 2.0, 3.0], vec![2.0; 3], None, 6);
        let v = direct_variance(&a, WeightKind::Base, DesignKind::Srswor).unwrap();
        assert!((v - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn general_matches_srswor_under_equal_calibrated_weights() {
        let y = vec![1.3, 0.2, 5.1, 2.2, 3.9];
        let a = area(y, vec![4.0; 5], Some(vec![4.0; 5]), 20);
        let g = direct_variance(&a, WeightKind::Calibrated, DesignKind::General).unwrap();
        let s = direct_variance(&a, WeightKind::Calibrated, DesignKind::Srswor).unwrap();
        assert!((g - s).abs() < 1e-14 * s);
    }

    #[test]
    fn variance_scales_quadratically() {
        let y = vec![1.3, 0.2, 5.1, 2.2];
        let w = vec![3.0, 1.0, 2.0, 6.0];
        let a = area(y.clone(), w.clone(), None, 30);
        let b = area(y.iter().map(|v| -2.5 * v).collect(), w, None, 30);
        let va = direct_variance(&a, WeightKind::Base, DesignKind::General).unwrap();
        let vb = direct_variance(&b, WeightKind::Base, DesignKind::General).unwrap();
        assert!((vb - 6.25 * va).abs() < 1e-12 * vb);
    }

    #[test]
    fn regression_variance_uses_residuals() {
        let mut a = area(vec![1.0, 3.0, 5.0, 7.0], vec![2.0; 4], None, 8);
        a.x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        assert!(direct_variance(&a, WeightKind::Base, DesignKind::Regression).unwrap() < 1e-24);
        a.y[3] = 8.0;
        // OLS line 0.8 + 2.3x, residuals 0.2, -0.1, -0.4, 0.3
        let v = direct_variance(&a, WeightKind::Base, DesignKind::Regression).unwrap();
        assert!((v - 0.0125).abs() < 1e-14);
    }
}

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use sae_core::calibration::{calibrate_sample, CalibrationTargets};
use sae_core::data::{AreaUnits, UnitSample};
use sae_core::rng::stream;

/// Random two-covariate sample calibrated to perturbed totals, with the
/// true means it was calibrated to. Draws whose calibration is infeasible
/// are replaced by a fresh draw from a derived stream.
pub fn random_calibrated(seed: u64, areas: usize, min_n: usize) -> (UnitSample, Vec<DVector<f64>>) {
    for attempt in 0u64.. {
        let (sample, targets) = random_uncalibrated(
            seed ^ attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            areas,
            min_n,
        );
        if let Ok((cal, _)) = calibrate_sample(&sample, &targets) {
            return (cal, targets.means(&sample).unwrap());
        }
    }
    unreachable!()
}

/// Random two-covariate sample with perturbed population totals.
pub fn random_uncalibrated(
    seed: u64,
    areas: usize,
    min_n: usize,
) -> (UnitSample, CalibrationTargets) {
    let mut rng = stream(seed, &[]);
    let mut units = Vec::with_capacity(areas);
    let mut totals = Vec::with_capacity(areas);
    for d in 0..areas {
        let n = min_n + rng.random_range(0..6);
        let big_n = n * rng.random_range(5..40);
        let x = DMatrix::from_fn(n, 3, |_, j| match j {
            0 => 1.0,
            1 => 5.0 * rng.random::<f64>(),
            _ => rng.random::<f64>() * 2.0 - 1.0,
        });
        let u: f64 = rng.sample(StandardNormal);
        let y = (0..n)
            .map(|i| 1.0 + x[(i, 1)] - 0.5 * x[(i, 2)] + u + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.5..1.5) * big_n as f64 / n as f64)
            .collect();
        let mut t = DVector::from_element(3, 0.0);
        for i in 0..n {
            t += x.row(i).transpose() * w[i];
        }
        t[0] = big_n as f64;
        t[1] *= rng.random_range(0.9..1.1);
        t[2] += rng.random_range(-0.1..0.1) * big_n as f64;
        totals.push(t);
        units.push(AreaUnits {
            area_id: format!("a{d:03}"),
            pop_size: big_n,
            y,
            x,
            w,
            w_cal: None,
        });
    }
    let sample = UnitSample::new(units).unwrap();
    let targets = CalibrationTargets {
        area_ids: sample.areas.iter().map(|a| a.area_id.clone()).collect(),
        totals,
    };
    (sample, targets)
}

/// Random area-level data: intercept plus one covariate, direct variances
/// attached.
pub fn random_area_rows(seed: u64, d: usize) -> sae_core::data::AreaDataset {
    use sae_core::data::{AreaDataset, AreaRow};
    let mut rng = stream(seed, &[1]);
    let su2: f64 = rng.random_range(0.05..2.0);
    let rows = (0..d)
        .map(|k| {
            let n = rng.random_range(2..30);
            let t = rng.random_range(0.0..4.0);
            let c = 1.0 / n as f64;
            let psi = rng.random_range(0.2..3.0) * c;
            let ybar = 1.0
                + 0.7 * t
                + su2.sqrt() * rng.sample::<f64, _>(StandardNormal)
                + psi.sqrt() * rng.sample::<f64, _>(StandardNormal);
            AreaRow {
                area_id: format!("d{k:02}"),
                pop_size: 100 * n,
                sample_size: n,
                ybar,
                xbar: DVector::from_vec(vec![1.0, t]),
                w2: n as f64 * 1e4,
                wdot: (100 * n) as f64,
                psi0: Some(psi),
            }
        })
        .collect();
    AreaDataset::new(rows).unwrap()
}

/// Restricted log-likelihood with a dense covariance matrix, constants
/// dropped.
pub fn dense_reml(y: &DVector<f64>, x: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    let chol = v.clone().cholesky().unwrap();
    let vi = chol.inverse();
    let logdet_v: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let xtvx = x.transpose() * &vi * x;
    let logdet_x = xtvx.determinant().ln();
    let p = &vi - &vi * x * xtvx.try_inverse().unwrap() * x.transpose() * &vi;
    -0.5 * (logdet_v + logdet_x + (y.transpose() * p * y)[(0, 0)])
}

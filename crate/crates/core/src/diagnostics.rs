//! Emulator validation: pivoted-Cholesky standardized errors, test-set RMSE,
//! and nominal-vs-empirical coverage, in the spirit of Bastos & O'Hagan
//! (2009).
//!
//! The standardized errors whiten the test residuals by the pivoted
//! Cholesky factor of the joint predictive covariance (epistemic posterior
//! covariance plus the diagonal aleatoric variance); under a well-calibrated
//! emulator they are approximately independent standard normal, which is
//! checked with a Kolmogorov–Smirnov statistic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hetgp::JointFit;
use crate::linalg::pivoted_cholesky;
use crate::stats::{ks_test_standard_normal, norm_ppf};

/// Standardized-error magnitude beyond which a test point is flagged (never
/// removed) as a potential outlier.
pub const OUTLIER_FLAG_THRESHOLD: f64 = 5.0;

/// Nominal coverage levels used by default: 0.05, 0.10, ..., 0.95, 0.99.
pub fn default_levels() -> Vec<f64> {
    let mut levels: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    levels.push(0.99);
    levels
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rmse: f64,
    /// Standardized errors in pivot order.
    pub chol_errors: Vec<f64>,
    /// Pivot permutation: `chol_errors[k]` belongs to test point `pivot[k]`.
    pub pivot: Vec<usize>,
    /// `(nominal, empirical)` coverage pairs, nondecreasing in both columns.
    pub coverage: Vec<(f64, f64)>,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    /// Count of |standardized error| above the flag threshold.
    pub n_flagged: usize,
}

/// Whiten residuals by the pivoted Cholesky factor of a covariance matrix.
/// Exposed separately so tests can drive it with arbitrary covariances.
pub fn pivoted_errors_from_cov(
    cov: &DMatrix<f64>,
    resid: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<usize>)> {
    if cov.nrows() != resid.len() {
        return Err(Error::invalid("covariance and residual sizes disagree"));
    }
    let (l, perm) = pivoted_cholesky(cov)?;
    let permuted = DVector::from_fn(resid.len(), |i, _| resid[perm[i]]);
    let errors = l
        .solve_lower_triangular(&permuted)
        .ok_or_else(|| Error::numerical("pivoted factor is singular"))?;
    Ok((errors, perm))
}

/// Joint predictive covariance on the test inputs: epistemic posterior
/// covariance plus diagonal aleatoric variance.
pub fn joint_predictive_cov(fit: &JointFit, xtest: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mean, mut cov) = fit.posterior_mean_cov(xtest)?;
    let ale = fit.aleatoric_variance(xtest)?;
    for i in 0..cov.nrows() {
        cov[(i, i)] += ale[i];
    }
    Ok((mean, cov))
}

/// Standardized test-set errors under the joint predictive distribution.
pub fn pivoted_cholesky_errors(
    fit: &JointFit,
    xtest: &DMatrix<f64>,
    ytest: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<usize>)> {
    if xtest.nrows() != ytest.len() || xtest.nrows() == 0 {
        return Err(Error::invalid("test set is empty or mismatched"));
    }
    let (mean, cov) = joint_predictive_cov(fit, xtest)?;
    let resid = ytest - mean;
    pivoted_errors_from_cov(&cov, &resid)
}

/// Root mean squared error of the posterior-mean predictions.
pub fn rmse(fit: &JointFit, xtest: &DMatrix<f64>, ytest: &DVector<f64>) -> Result<f64> {
    if xtest.nrows() != ytest.len() || xtest.nrows() == 0 {
        return Err(Error::invalid("test set is empty or mismatched"));
    }
    let mean = fit.posterior_mean(xtest)?;
    let mut acc = 0.0;
    for i in 0..ytest.len() {
        acc += (ytest[i] - mean[i]).powi(2);
    }
    Ok((acc / ytest.len() as f64).sqrt())
}

/// Empirical coverage of central predictive intervals at each nominal level.
/// Intervals use the Gaussian total-variance form `mean ± z sqrt(var_total)`.
pub fn coverage_curve(
    fit: &JointFit,
    xtest: &DMatrix<f64>,
    ytest: &DVector<f64>,
    levels: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if xtest.nrows() != ytest.len() || xtest.nrows() == 0 {
        return Err(Error::invalid("test set is empty or mismatched"));
    }
    if levels.iter().any(|q| !(0.0 < *q && *q < 1.0)) {
        return Err(Error::invalid("levels must lie strictly inside (0, 1)"));
    }
    let pred = fit.predict_joint(xtest)?;
    let n = ytest.len() as f64;
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(sorted.len());
    for q in sorted {
        let z = norm_ppf(0.5 * (1.0 + q));
        let mut inside = 0usize;
        for i in 0..ytest.len() {
            let half = z * pred.var_total[i].sqrt();
            if (ytest[i] - pred.mean[i]).abs() <= half {
                inside += 1;
            }
        }
        out.push((q, inside as f64 / n));
    }
    Ok(out)
}

/// Full validation bundle for a held-out test set.
pub fn validation_report(
    fit: &JointFit,
    xtest: &DMatrix<f64>,
    ytest: &DVector<f64>,
    levels: &[f64],
) -> Result<ValidationReport> {
    let rmse_val = rmse(fit, xtest, ytest)?;
    let (errors, pivot) = pivoted_cholesky_errors(fit, xtest, ytest)?;
    let coverage = coverage_curve(fit, xtest, ytest, levels)?;
    let (ks_statistic, ks_pvalue) = ks_test_standard_normal(errors.as_slice());
    let n_flagged = errors.iter().filter(|e| e.abs() > OUTLIER_FLAG_THRESHOLD).count();
    if n_flagged > 0 {
        log::warn!(
            "{n_flagged} standardized errors exceed |{OUTLIER_FLAG_THRESHOLD}|; \
             inspect the test set (points are flagged, never removed)"
        );
    }
    Ok(ValidationReport {
        rmse: rmse_val,
        chol_errors: errors.as_slice().to_vec(),
        pivot,
        coverage,
        ks_statistic,
        ks_pvalue,
        n_flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::latin_hypercube;
    use crate::domain::Domain;
    use crate::gp::{collapse_replicates, GpBounds};
    use crate::hetgp::{fit_hetgp, FitOptions};
    use crate::linalg::{mvn_sample, sample_variance};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn bench_fit(seed: u64) -> JointFit {
        let mut rng = crate::rng::stream(seed);
        let n_loc = 40;
        let reps = 4;
        let xu = latin_hypercube(n_loc, 1, seed);
        let mut x = nalgebra::DMatrix::zeros(n_loc * reps, 1);
        let mut y = nalgebra::DVector::zeros(n_loc * reps);
        for i in 0..n_loc {
            let xi = xu[(i, 0)];
            let f = 2.0 * (2.0 * std::f64::consts::PI * xi).sin();
            let sd = (0.05 + 0.4 * xi * xi).sqrt();
            for r in 0..reps {
                x[(i * reps + r, 0)] = xi;
                y[i * reps + r] = f + sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let d = collapse_replicates(&x, &y, 1e-9).unwrap();
        let b = GpBounds::default_for(&d);
        fit_hetgp(&d, &b, 1, seed, Domain::unit(1), &FitOptions::bootstrap()).unwrap()
    }

    /// Draw one test-set response vector from the fit's own joint predictive.
    fn self_generated(fit: &JointFit, xtest: &nalgebra::DMatrix<f64>, seed: u64) -> nalgebra::DVector<f64> {
        let (mean, cov) = joint_predictive_cov(fit, xtest).unwrap();
        let jc = crate::linalg::cholesky_with_jitter(&cov, 1e-10).unwrap();
        let mut rng = crate::rng::stream(seed);
        mvn_sample(&mean, &jc.chol.l(), &mut rng)
    }

    #[test]
    fn diagonal_covariance_reduces_to_scalar_standardization() {
        let cov = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0, 0.25]));
        let resid = nalgebra::DVector::from_vec(vec![2.0, -1.0, 0.5]);
        let (errors, perm) = pivoted_errors_from_cov(&cov, &resid).unwrap();
        // Pivot order is by descending diagonal: indices 0, 1, 2.
        assert_eq!(perm, vec![0, 1, 2]);
        assert_relative_eq!(errors[0], 1.0);
        assert_relative_eq!(errors[1], -1.0);
        assert_relative_eq!(errors[2], 1.0);
    }

    #[test]
    fn self_consistency_ks_passes() {
        let fit = bench_fit(3);
        let xtest = latin_hypercube(200, 1, 1234);
        let mut passes = 0;
        for k in 0..20 {
            let y = self_generated(&fit, &xtest, 500 + k);
            let (errors, _) = pivoted_cholesky_errors(&fit, &xtest, &y).unwrap();
            let (_, p) = ks_test_standard_normal(errors.as_slice());
            if p > 0.01 {
                passes += 1;
            }
        }
        assert!(passes >= 18, "KS passed only {passes}/20 repeats");
    }

    #[test]
    fn doubled_predictive_sd_is_detectable() {
        // Scaling the covariance by 4 shrinks the standardized errors so
        // their variance drops to about 0.25.
        let fit = bench_fit(5);
        let xtest = latin_hypercube(300, 1, 77);
        let y = self_generated(&fit, &xtest, 9);
        let (mean, cov) = joint_predictive_cov(&fit, &xtest).unwrap();
        let resid = &y - mean;
        let inflated = &cov * 4.0;
        let (errors, _) = pivoted_errors_from_cov(&inflated, &resid).unwrap();
        let v = sample_variance(errors.as_slice());
        assert!((v - 0.25).abs() < 0.08, "error variance {v}, expected about 0.25");
    }

    #[test]
    fn pivot_invariant_to_input_ordering() {
        let fit = bench_fit(7);
        let xtest = latin_hypercube(50, 1, 31);
        let y = self_generated(&fit, &xtest, 3);

        let mut order: Vec<usize> = (0..50).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut crate::rng::stream(8));
        let xp = nalgebra::DMatrix::from_fn(50, 1, |i, _| xtest[(order[i], 0)]);
        let yp = nalgebra::DVector::from_fn(50, |i, _| y[order[i]]);

        let (e1, _) = pivoted_cholesky_errors(&fit, &xtest, &y).unwrap();
        let (e2, _) = pivoted_cholesky_errors(&fit, &xp, &yp).unwrap();
        let mut m1: Vec<f64> = e1.iter().map(|v| v.abs()).collect();
        let mut m2: Vec<f64> = e2.iter().map(|v| v.abs()).collect();
        m1.sort_by(f64::total_cmp);
        m2.sort_by(f64::total_cmp);
        for (a, b) in m1.iter().zip(&m2) {
            assert_relative_eq!(a, b, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn rmse_trivial_cases() {
        let fit = bench_fit(11);
        let xtest = latin_hypercube(30, 1, 3);
        let perfect = fit.posterior_mean(&xtest).unwrap();
        assert_relative_eq!(rmse(&fit, &xtest, &perfect).unwrap(), 0.0, epsilon = 1e-12);
        let offset = &perfect + nalgebra::DVector::from_element(30, 0.7);
        assert_relative_eq!(rmse(&fit, &xtest, &offset).unwrap(), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn coverage_monotone_and_calibrated_on_self_data() {
        let fit = bench_fit(13);
        let xtest = latin_hypercube(500, 1, 55);
        let y = self_generated(&fit, &xtest, 21);
        let levels = default_levels();
        let curve = coverage_curve(&fit, &xtest, &y, &levels).unwrap();
        let mut max_dev = 0.0f64;
        for w in curve.windows(2) {
            assert!(w[1].1 >= w[0].1, "coverage not monotone");
        }
        for (nominal, empirical) in &curve {
            max_dev = max_dev.max((nominal - empirical).abs());
        }
        assert!(max_dev <= 0.07, "max coverage deviation {max_dev}");
        // Extreme level approaches full coverage.
        let hi = coverage_curve(&fit, &xtest, &y, &[0.99999]).unwrap();
        assert!(hi[0].1 >= 0.99);
    }

    #[test]
    fn zero_variance_means_zero_coverage() {
        let fit = bench_fit(17);
        let xtest = latin_hypercube(20, 1, 5);
        // Push responses far from the prediction: with finite variance some
        // may still be covered, so separate the data wildly.
        let y = nalgebra::DVector::from_element(20, 1e6);
        let curve = coverage_curve(&fit, &xtest, &y, &[0.5, 0.9]).unwrap();
        for (_, emp) in curve {
            assert_eq!(emp, 0.0);
        }
    }

    #[test]
    fn validation_report_bundles_everything() {
        let fit = bench_fit(19);
        let xtest = latin_hypercube(100, 1, 2);
        let y = self_generated(&fit, &xtest, 4);
        let rep = validation_report(&fit, &xtest, &y, &default_levels()).unwrap();
        assert_eq!(rep.chol_errors.len(), 100);
        assert_eq!(rep.pivot.len(), 100);
        assert_eq!(rep.coverage.len(), 20);
        assert!(rep.rmse > 0.0);
        assert!(rep.ks_pvalue >= 0.0 && rep.ks_pvalue <= 1.0);
    }
}

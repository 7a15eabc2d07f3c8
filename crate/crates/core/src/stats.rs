//! Small statistical utilities: normal quantiles, linear-interpolation
//! quantiles, and the one-sample Kolmogorov–Smirnov test.

use statrs::distribution::{ContinuousCDF, Normal};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal is constructible")
}

pub fn norm_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

/// Inverse standard-normal CDF, with probabilities clipped away from {0,1}.
pub fn norm_ppf(p: f64) -> f64 {
    std_normal().inverse_cdf(p.clamp(1e-15, 1.0 - 1e-15))
}

/// Quantile by linear interpolation on a sorted slice (`q` in `[0,1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = pos.ceil() as usize;
    if i == j {
        sorted[i]
    } else {
        let t = pos - i as f64;
        (1.0 - t) * sorted[i] + t * sorted[j]
    }
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

/// One-sample KS statistic of `sample` against a continuous CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        let f = cdf(*x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Asymptotic p-value for the one-sample KS statistic `d` at sample size `n`
/// (Kolmogorov distribution with the Stephens small-sample correction).
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    let sqrt_n = (n as f64).sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += term;
        sign = -sign;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (2.0 * p).clamp(0.0, 1.0)
}

/// KS test of a sample against the standard normal distribution.
pub fn ks_test_standard_normal(sample: &[f64]) -> (f64, f64) {
    let d = ks_statistic(sample, norm_cdf);
    (d, ks_pvalue(d, sample.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn normal_quantiles_round_trip() {
        for p in [0.01, 0.1, 0.5, 0.9, 0.975] {
            assert_relative_eq!(norm_cdf(norm_ppf(p)), p, epsilon = 1e-10);
        }
        assert_relative_eq!(norm_ppf(0.975), 1.959964, epsilon = 1e-5);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_relative_eq!(quantile(&v, 0.5), 2.5);
    }

    #[test]
    fn ks_accepts_normal_sample_and_rejects_shifted() {
        let mut rng = crate::rng::stream(21);
        let sample: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let (_, p) = ks_test_standard_normal(&sample);
        assert!(p > 0.01, "p = {p}");

        let shifted: Vec<f64> = sample.iter().map(|x| x + 1.0).collect();
        let (_, p_bad) = ks_test_standard_normal(&shifted);
        assert!(p_bad < 1e-6, "p = {p_bad}");
    }

    #[test]
    fn ks_statistic_exact_on_tiny_sample() {
        // Uniform CDF on one point at 0.5: D = 0.5.
        let d = ks_statistic(&[0.5], |x| x);
        assert_relative_eq!(d, 0.5);
    }
}

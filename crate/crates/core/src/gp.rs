//! Replication-aware homoskedastic Gaussian-process core.
//!
//! Training data is collapsed to unique input locations with replicate
//! counts, per-location response means, and within-location sums of squares.
//! Likelihood, fitting, and prediction all work on the collapsed size-`n`
//! representation, which reproduces the naive full-`N` computations exactly:
//! with `K_n = C + g A_n^{-1}` (correlation matrix plus nugget scaled by
//! inverse replicate counts),
//!
//! ```text
//! log L = -N/2 log(2 pi nu)
//!         - 1/2 [ (N-n) log g + sum_i log a_i + log|K_n| ]
//!         - 1/(2 nu) [ sum_i ss_i / g + (ybar - b0)^T K_n^{-1} (ybar - b0) ]
//! ```
//!
//! The within-location scatter `ss_i` enters the likelihood, so replicate
//! spread informs the nugget even after collapsing.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::latin_hypercube;
use crate::error::{Error, Result};
use crate::kernel::{cov_matrix, cross_cov, LengthScales, DEFAULT_JITTER, SQRT3};
use crate::linalg::{cholesky_with_jitter, sample_variance};
use crate::rng::{mix, tags};

/// Default collapse tolerance: below Latin-hypercube resolution, above
/// floating-point noise.
pub const DEFAULT_COLLAPSE_TOL: f64 = 1e-9;

/// Default number of multi-start restarts for maximum-likelihood fitting.
pub const DEFAULT_RESTARTS: usize = 10;

/// Unique input locations with replicate counts and per-location response
/// statistics; the canonical training-data container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicatedDesign {
    /// Unique locations, one row per location, on the unit hypercube.
    pub unique_x: DMatrix<f64>,
    /// Number of replicates at each location (all positive).
    pub counts: Vec<u64>,
    /// Mean response at each location.
    pub mean_y: DVector<f64>,
    /// Within-location sum of squared deviations (0 for single observations).
    pub ss_within: DVector<f64>,
    /// Total number of observations `N = sum(counts)`.
    pub total_n: u64,
}

impl ReplicatedDesign {
    pub fn n(&self) -> usize {
        self.unique_x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.unique_x.ncols()
    }

    /// Sample variance of the location means; scale reference for nu bounds.
    pub fn var_mean_y(&self) -> f64 {
        sample_variance(self.mean_y.as_slice())
    }

    pub fn total_ss_within(&self) -> f64 {
        self.ss_within.sum()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::invalid("design must contain at least one location"));
        }
        if self.counts.len() != n || self.mean_y.len() != n || self.ss_within.len() != n {
            return Err(Error::invalid("design field lengths disagree"));
        }
        if self.counts.iter().any(|a| *a == 0) {
            return Err(Error::invalid("replicate counts must be positive"));
        }
        for i in 0..n {
            if self.counts[i] == 1 && self.ss_within[i] != 0.0 {
                return Err(Error::invalid(format!(
                    "location {i} has one replicate but nonzero within-scatter"
                )));
            }
        }
        if self.total_n != self.counts.iter().sum::<u64>() {
            return Err(Error::invalid("total_n does not match counts"));
        }
        Ok(())
    }
}

/// Collapse a full design (one row per simulator run, unit-hypercube scale)
/// to unique locations. Rows within `tol` in max-coordinate distance merge;
/// unique rows keep first-appearance order.
pub fn collapse_replicates(
    x_full: &DMatrix<f64>,
    y_full: &DVector<f64>,
    tol: f64,
) -> Result<ReplicatedDesign> {
    let n_full = x_full.nrows();
    if n_full == 0 {
        return Err(Error::invalid("cannot collapse an empty design"));
    }
    if y_full.len() != n_full {
        return Err(Error::invalid("response length does not match design rows"));
    }
    if y_full.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("responses contain a non-finite value"));
    }
    if x_full.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("design contains a non-finite value"));
    }
    if tol < 0.0 {
        return Err(Error::invalid("collapse tolerance must be nonnegative"));
    }

    let p = x_full.ncols();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut reps: Vec<usize> = Vec::new(); // representative full-row per group

    'rows: for i in 0..n_full {
        for (gi, &r) in reps.iter().enumerate() {
            let mut max_d = 0.0f64;
            for k in 0..p {
                max_d = max_d.max((x_full[(i, k)] - x_full[(r, k)]).abs());
            }
            if max_d <= tol {
                groups[gi].push(i);
                continue 'rows;
            }
        }
        reps.push(i);
        groups.push(vec![i]);
    }

    let n = groups.len();
    let mut unique_x = DMatrix::zeros(n, p);
    let mut counts = Vec::with_capacity(n);
    let mut mean_y = DVector::zeros(n);
    let mut ss_within = DVector::zeros(n);

    for (gi, rows) in groups.iter().enumerate() {
        for k in 0..p {
            unique_x[(gi, k)] = x_full[(reps[gi], k)];
        }
        let a = rows.len();
        counts.push(a as u64);
        let m = rows.iter().map(|&r| y_full[r]).sum::<f64>() / a as f64;
        mean_y[gi] = m;
        ss_within[gi] = if a > 1 {
            rows.iter().map(|&r| (y_full[r] - m).powi(2)).sum()
        } else {
            0.0
        };
    }

    let design = ReplicatedDesign {
        unique_x,
        counts,
        mean_y,
        ss_within,
        total_n: n_full as u64,
    };
    design.validate()?;
    Ok(design)
}

/// Homoskedastic GP hyperparameters: lengthscales, process variance `nu`,
/// noise-to-signal nugget ratio `g`, and the constant trend `beta0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPHypers {
    pub theta: LengthScales,
    pub nu: f64,
    pub g: f64,
    pub beta0: f64,
}

impl GPHypers {
    fn validate(&self) -> Result<()> {
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(Error::invalid(format!("nu must be positive, got {}", self.nu)));
        }
        if !(self.g.is_finite() && self.g > 0.0) {
            return Err(Error::invalid(format!("g must be positive, got {}", self.g)));
        }
        if !self.beta0.is_finite() {
            return Err(Error::invalid("beta0 must be finite"));
        }
        Ok(())
    }
}

/// Log-space hyperparameter bounds for the MLE search.
#[derive(Debug, Clone)]
pub struct GpBounds {
    pub theta: (f64, f64),
    pub nu: (f64, f64),
    pub g: (f64, f64),
}

impl GpBounds {
    /// Unit-hypercube defaults: the response variance sets the nu scale.
    pub fn default_for(data: &ReplicatedDesign) -> Self {
        let vscale = data.var_mean_y().max(1e-12);
        GpBounds {
            theta: (1e-2, 1e2),
            nu: (1e-8 * vscale, 1e3 * vscale),
            g: (1e-8, 1e2),
        }
    }
}

/// Pieces shared by likelihood evaluation and prediction for one set of
/// hyperparameters: the factorization of `K_n` and derived vectors.
pub(crate) struct LikCore {
    pub chol: Cholesky<f64, Dyn>,
    pub corr: DMatrix<f64>,
    pub beta0: f64,
    pub alpha: DVector<f64>,
    /// Quadratic form `r^T K^{-1} r` plus the scaled within-scatter term.
    pub quad: f64,
    pub logdet: f64,
}

/// Build `K = corr + diag(rel_noise_i / a_i)` and its derived quantities.
/// `rel_noise` holds per-location nugget ratios (constant `g` for the
/// homoskedastic model). When `beta0` is `None` the generalized-least-squares
/// value is profiled in closed form.
pub(crate) fn lik_core(
    data: &ReplicatedDesign,
    theta: &LengthScales,
    rel_noise: &[f64],
    beta0: Option<f64>,
) -> Result<LikCore> {
    let n = data.n();
    let corr = cov_matrix(&data.unique_x, theta, 0.0)?;
    let mut k = corr.clone();
    for i in 0..n {
        k[(i, i)] += rel_noise[i] / data.counts[i] as f64;
    }
    let jc = cholesky_with_jitter(&k, DEFAULT_JITTER)?;
    let chol = jc.chol;

    let ones = DVector::from_element(n, 1.0);
    let kinv_y = chol.solve(&data.mean_y);
    let kinv_1 = chol.solve(&ones);
    let beta0 = match beta0 {
        Some(b) => b,
        None => ones.dot(&kinv_y) / ones.dot(&kinv_1),
    };
    let r = &data.mean_y - DVector::from_element(n, beta0);
    let alpha = chol.solve(&r);

    let mut quad = r.dot(&alpha);
    for i in 0..n {
        quad += data.ss_within[i] / rel_noise[i];
    }
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    Ok(LikCore { chol, corr, beta0, alpha, quad, logdet })
}

/// Collapsed-representation log marginal likelihood shared with the
/// heteroskedastic model (`rel_noise` = per-location nugget ratios).
pub(crate) fn loglik_from_core(data: &ReplicatedDesign, nu: f64, rel_noise: &[f64], core: &LikCore) -> f64 {
    let n_total = data.total_n as f64;
    let mut det_terms = core.logdet;
    for i in 0..data.n() {
        det_terms += (data.counts[i] as f64 - 1.0) * rel_noise[i].ln();
        det_terms += (data.counts[i] as f64).ln();
    }
    -0.5 * n_total * (2.0 * std::f64::consts::PI * nu).ln() - 0.5 * det_terms
        - 0.5 * core.quad / nu
}

/// Log marginal likelihood of the collapsed data under the given
/// hyperparameters (`beta0` taken as supplied, not re-profiled).
pub fn log_marginal_likelihood(data: &ReplicatedDesign, hypers: &GPHypers) -> Result<f64> {
    hypers.validate()?;
    data.validate()?;
    let rel = vec![hypers.g; data.n()];
    let core = lik_core(data, &hypers.theta, &rel, Some(hypers.beta0))?;
    Ok(loglik_from_core(data, hypers.nu, &rel, &core))
}

/// Likelihood only, in the log-parameterization `[log theta_k.., log nu, log g]`
/// with `beta0` profiled by GLS. Cheap path for line-search probes: one
/// factorization, no inverse.
fn hom_loglik_value(data: &ReplicatedDesign, log_params: &[f64]) -> Result<f64> {
    let p = data.dim();
    let theta = LengthScales::new(log_params[..p].iter().map(|v| v.exp()).collect())?;
    let nu = log_params[p].exp();
    let g = log_params[p + 1].exp();
    let rel = vec![g; data.n()];
    let core = lik_core(data, &theta, &rel, None)?;
    Ok(loglik_from_core(data, nu, &rel, &core))
}

/// Likelihood and gradient in the log-parameterization `[log theta_k.., log nu, log g]`
/// with `beta0` profiled by GLS (the envelope theorem makes the remaining
/// gradient components exact at the profiled value).
fn hom_loglik_grad(
    data: &ReplicatedDesign,
    log_params: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let p = data.dim();
    let theta = LengthScales::new(log_params[..p].iter().map(|v| v.exp()).collect())?;
    let nu = log_params[p].exp();
    let g = log_params[p + 1].exp();
    let n = data.n();
    let rel = vec![g; n];

    let core = lik_core(data, &theta, &rel, None)?;
    let ll = loglik_from_core(data, nu, &rel, &core);

    let kinv = crate::linalg::spd_inverse(&core.chol);
    let alpha = &core.alpha;
    let n_total = data.total_n as f64;
    let n_f = n as f64;
    let ssq: f64 = data.ss_within.sum();

    // Pairwise accumulation of trace and quadratic terms for each theta_k.
    let th = theta.values();
    let x = &data.unique_x;
    let mut tr_k = vec![0.0; p];
    let mut quad_k = vec![0.0; p];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = core.corr[(i, j)];
            for k in 0..p {
                let d = (x[(i, k)] - x[(j, k)]).abs();
                let s = SQRT3 * d / th[k];
                let dc = c * s * s / (th[k] * (1.0 + s));
                tr_k[k] += 2.0 * kinv[(i, j)] * dc;
                quad_k[k] += 2.0 * alpha[i] * alpha[j] * dc;
            }
        }
    }

    let mut grad = vec![0.0; p + 2];
    for k in 0..p {
        let d_theta = 0.5 * quad_k[k] / nu - 0.5 * tr_k[k];
        grad[k] = d_theta * th[k];
    }
    // d/dnu, then chain rule to log space.
    let d_nu = -0.5 * n_total / nu + 0.5 * core.quad / (nu * nu);
    grad[p] = d_nu * nu;
    // d/dg: nugget enters as g / a_i on the diagonal plus the scatter term.
    let mut tr_g = 0.0;
    let mut quad_g = 0.0;
    for i in 0..n {
        let ai = data.counts[i] as f64;
        tr_g += kinv[(i, i)] / ai;
        quad_g += alpha[i] * alpha[i] / ai;
    }
    let d_g = -0.5 * (n_total - n_f) / g + 0.5 * ssq / (nu * g * g) + 0.5 * quad_g / nu
        - 0.5 * tr_g;
    grad[p + 1] = d_g * g;

    Ok((ll, grad))
}

/// A fitted homoskedastic GP: collapsed data, hyperparameters, and the cached
/// factorization used for prediction.
pub struct GPFit {
    pub data: ReplicatedDesign,
    pub hypers: GPHypers,
    pub(crate) chol: Cholesky<f64, Dyn>,
    pub(crate) alpha: DVector<f64>,
    /// Log marginal likelihood at the fitted hyperparameters.
    pub loglik: f64,
}

impl GPFit {
    /// Construct the prediction caches for fixed hyperparameters. `beta0`
    /// inside `hypers` is honored as given.
    pub fn with_hypers(data: ReplicatedDesign, hypers: GPHypers) -> Result<GPFit> {
        hypers.validate()?;
        data.validate()?;
        let rel = vec![hypers.g; data.n()];
        let core = lik_core(&data, &hypers.theta, &rel, Some(hypers.beta0))?;
        let ll = loglik_from_core(&data, hypers.nu, &rel, &core);
        Ok(GPFit { data, hypers, chol: core.chol, alpha: core.alpha, loglik: ll })
    }

    /// Kriging prediction at new unit-hypercube points: posterior mean and
    /// epistemic (latent-mean) variance. The variance excludes the nugget.
    /// Negative variances from numerical cancellation are clamped to zero;
    /// more than 1% clamped triggers a warning.
    pub fn predict(&self, xnew: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let kx = cross_cov(xnew, &self.data.unique_x, &self.hypers.theta)?;
        let m = xnew.nrows();
        let mut mean = DVector::from_element(m, self.hypers.beta0);
        mean += &kx * &self.alpha;

        let mut var = DVector::zeros(m);
        let mut clamped = 0usize;
        let l = self.chol.l_dirty();
        for i in 0..m {
            let ki = kx.row(i).transpose();
            let z = l
                .solve_lower_triangular(&ki)
                .ok_or_else(|| Error::numerical("triangular solve failed in predict"))?;
            let raw = self.hypers.nu * (1.0 - z.dot(&z));
            if raw < 0.0 {
                clamped += 1;
                var[i] = 0.0;
            } else {
                var[i] = raw;
            }
        }
        if clamped * 100 > m {
            log::warn!(
                "predict clamped {clamped}/{m} negative variances; covariance may be ill-conditioned"
            );
        }
        Ok((mean, var))
    }
}

/// Fit by maximum likelihood with multi-start local optimization.
///
/// Starts are a Latin hypercube over the log-space hyperparameter box;
/// restarts run independently (possibly in parallel) and merge
/// deterministically by `(likelihood, restart index)`.
pub fn fit_gp(
    data: &ReplicatedDesign,
    bounds: &GpBounds,
    restarts: usize,
    rng_seed: u64,
) -> Result<GPFit> {
    fit_gp_with_iters(data, bounds, restarts, rng_seed, 80)
}

/// MLE with a quasi-Newton iteration cap; repeated fits inside sequential
/// and bootstrap loops use smaller caps.
pub(crate) fn fit_gp_with_iters(
    data: &ReplicatedDesign,
    bounds: &GpBounds,
    restarts: usize,
    rng_seed: u64,
    max_iter: usize,
) -> Result<GPFit> {
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    data.validate()?;
    let p = data.dim();
    let dims = p + 2;

    let lo = [vec![bounds.theta.0.ln(); p], vec![bounds.nu.0.ln()], vec![bounds.g.0.ln()]].concat();
    let hi = [vec![bounds.theta.1.ln(); p], vec![bounds.nu.1.ln()], vec![bounds.g.1.ln()]].concat();
    let box_bounds = crate::opt::BoxBounds::new(lo.clone(), hi.clone());

    let starts = latin_hypercube(restarts, dims, mix(rng_seed, tags::FIT_START));
    let start_points: Vec<Vec<f64>> = (0..restarts)
        .map(|r| (0..dims).map(|k| lo[k] + starts[(r, k)] * (hi[k] - lo[k])).collect())
        .collect();

    let results: Vec<std::result::Result<crate::opt::AscentResult, String>> = start_points
        .par_iter()
        .map(|x0| {
            crate::opt::maximize_projected_bfgs(
                x0,
                &box_bounds,
                max_iter,
                1e-9,
                |lp| hom_loglik_value(data, lp).ok(),
                |lp| hom_loglik_grad(data, lp).ok(),
            )
            .ok_or_else(|| "objective not evaluable at start".to_string())
        })
        .collect();

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut failures = Vec::new();
    for (idx, res) in results.iter().enumerate() {
        match res {
            Ok(r) if r.value.is_finite() => {
                let better = match &best {
                    None => true,
                    Some((v, bi, _)) => r.value > *v || (r.value == *v && idx < *bi),
                };
                if better {
                    best = Some((r.value, idx, r.x.clone()));
                }
            }
            Ok(_) => failures.push(format!("restart {idx}: non-finite likelihood")),
            Err(e) => failures.push(format!("restart {idx}: {e}")),
        }
    }

    let Some((_, _, lp)) = best else {
        return Err(Error::Fitting(format!(
            "all {restarts} restarts failed: {}",
            failures.join("; ")
        )));
    };

    let theta = LengthScales::new(lp[..p].iter().map(|v| v.exp()).collect())?;
    let nu = lp[p].exp();
    let g = lp[p + 1].exp();
    // Recover the profiled trend for the returned hyperparameters.
    let rel = vec![g; data.n()];
    let core = lik_core(data, &theta, &rel, None)?;
    let hypers = GPHypers { theta, nu, g, beta0: core.beta0 };
    GPFit::with_hypers(data.clone(), hypers)
}

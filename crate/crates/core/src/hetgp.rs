//! Joint heteroskedastic Gaussian-process emulator.
//!
//! Two coupled GPs emulate a stochastic simulator, following Binois,
//! Gramacy & Ludkovski (2018): a mean GP for `E(Y|x)` and a noise GP over
//! latent log-variance values `delta_1..delta_n` at the unique design
//! locations. The per-location noise used by the mean GP is not the raw
//! latent vector but its smoothed image under the linear map
//!
//! ```text
//! smooth(delta) = b0v + Cv (Cv + gv A_n^{-1})^{-1} (delta - b0v)
//! ```
//!
//! (the noise GP's own kriging mean at the design points), exponentiated to
//! guarantee positive variances. Adding `b0v` back after the map makes
//! constant latent fields map to themselves, so the model reduces exactly to
//! the homoskedastic case.
//!
//! Fitting alternates latent-variable ascent steps with quasi-Newton updates
//! of both hyperparameter blocks on the joint likelihood
//! `L = L_mean(y | exp(smooth(delta))) + L_latent(delta | noise GP)`.
//! After optimization the fit is compared against the best constant-latent
//! variant under the same hyperparameters and the higher-likelihood model is
//! returned, so the fit never scores below its own homoskedastic reduction.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::gp::{fit_gp, GPFit, GpBounds, ReplicatedDesign};
use crate::kernel::{cov_matrix, cross_cov, LengthScales, DEFAULT_JITTER, SQRT3};
use crate::linalg::{cholesky_with_jitter, mvn_sample};
use crate::opt::{backtracking_ascent, maximize_projected_bfgs, BoxBounds};
use crate::rng::{mix, mix2, stream, tags};

/// Exponent clamp for the positivity transform; keeps `exp` finite without
/// influencing any realistic fit.
const LOG_VAR_CLAMP: f64 = 45.0;

/// Latent log-variance field at the unique design locations, with the noise
/// GP's smoothing nugget and constant trend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentNoise {
    /// Latent log-variance values, one per unique location.
    pub delta: DVector<f64>,
    /// Smoothing nugget of the noise GP (relative scale).
    pub g_v: f64,
    /// Constant trend of the latent field.
    pub beta0_v: f64,
}

/// Mean-GP hyperparameters of the joint model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanHypers {
    pub theta: LengthScales,
    pub nu: f64,
    pub beta0: f64,
}

/// Noise-GP hyperparameters (its nugget lives in [`LatentNoise::g_v`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseHypers {
    pub theta_v: LengthScales,
    pub nu_v: f64,
}

/// Fitted joint heteroskedastic emulator.
pub struct JointFit {
    pub data: ReplicatedDesign,
    pub domain: Domain,
    pub mean: MeanHypers,
    pub noise: NoiseHypers,
    pub latent: LatentNoise,
    /// Joint log likelihood (mean part plus latent-field part) at the fit.
    pub loglik: f64,
    // Caches rebuilt deterministically from the parameters above.
    pub(crate) smoothed_log_var: DVector<f64>,
    pub(crate) chol_mean: Cholesky<f64, Dyn>,
    pub(crate) alpha_mean: DVector<f64>,
    pub(crate) alpha_noise: DVector<f64>,
}

/// Joint prediction: epistemic (mean-GP posterior) and aleatoric (predicted
/// noise) variance components, and their sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointPrediction {
    pub mean: DVector<f64>,
    pub var_epistemic: DVector<f64>,
    pub var_aleatoric: DVector<f64>,
    pub var_total: DVector<f64>,
    /// Flags points outside the unit hypercube (extrapolation).
    pub extrapolated: Vec<bool>,
}

/// Apply the latent smoothing map
/// `beta0_v + C_v (C_v + g_v A_n^{-1})^{-1} (delta - beta0_v)`.
///
/// `c_v` must be the noise-GP correlation matrix at the unique locations.
/// As `g_v -> 0` the map approaches the identity; constant inputs equal to
/// `beta0_v` are fixed points.
pub fn smooth_latent(
    delta: &DVector<f64>,
    c_v: &DMatrix<f64>,
    counts: &[u64],
    g_v: f64,
    beta0_v: f64,
) -> Result<DVector<f64>> {
    let n = delta.len();
    if c_v.nrows() != n || c_v.ncols() != n || counts.len() != n {
        return Err(Error::invalid("smooth_latent: dimension mismatch"));
    }
    if g_v <= 0.0 || !g_v.is_finite() {
        return Err(Error::invalid("smoothing nugget must be positive"));
    }
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("latent values must be finite"));
    }
    let mut k_v = c_v.clone();
    for i in 0..n {
        k_v[(i, i)] += g_v / counts[i] as f64;
    }
    let jc = cholesky_with_jitter(&k_v, DEFAULT_JITTER)?;
    let centered = delta - DVector::from_element(n, beta0_v);
    let solved = jc.chol.solve(&centered);
    Ok(c_v * solved + DVector::from_element(n, beta0_v))
}

/// Hyperparameter starting point distilled from an earlier fit; bootstrap
/// replicates and other repeated fits start here instead of running their
/// own homoskedastic initialization.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub theta: Vec<f64>,
    pub nu: f64,
    pub theta_v: Vec<f64>,
    pub nu_v: f64,
    pub g_v: f64,
    pub beta0_v: f64,
}

impl From<&JointFit> for WarmStart {
    fn from(fit: &JointFit) -> Self {
        WarmStart {
            theta: fit.mean.theta.values().to_vec(),
            nu: fit.mean.nu,
            theta_v: fit.noise.theta_v.values().to_vec(),
            nu_v: fit.noise.nu_v,
            g_v: fit.latent.g_v,
            beta0_v: fit.latent.beta0_v,
        }
    }
}

/// Fitting knobs. The defaults suit from-scratch fits; sequential refits and
/// bootstrap replicates use cheaper profiles.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Multi-start count for the embedded homoskedastic initialization.
    pub hom_restarts: usize,
    /// Quasi-Newton iteration cap for the homoskedastic initialization.
    pub hom_max_iter: usize,
    /// Outer alternation limit between latent and hyperparameter updates.
    pub outer_max: usize,
    /// Quasi-Newton iteration limit per hyperparameter update.
    pub inner_max: usize,
    /// Latent ascent steps per outer iteration.
    pub latent_steps: usize,
    /// Stop when the joint likelihood improves by less than this.
    pub tol: f64,
    /// Start from these hyperparameters instead of a fresh homoskedastic fit.
    pub warm: Option<WarmStart>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            hom_restarts: 5,
            hom_max_iter: 80,
            outer_max: 100,
            inner_max: 25,
            latent_steps: 6,
            tol: 1e-6,
            warm: None,
        }
    }
}

impl FitOptions {
    /// Cheaper profile for repeated fits inside sequential design loops.
    pub fn refit() -> Self {
        FitOptions {
            hom_restarts: 1,
            hom_max_iter: 30,
            outer_max: 5,
            inner_max: 10,
            latent_steps: 3,
            tol: 1e-5,
            warm: None,
        }
    }

    /// Cheaper profile for bootstrap replicates (pair with a warm start).
    pub fn bootstrap() -> Self {
        FitOptions {
            hom_restarts: 1,
            hom_max_iter: 30,
            outer_max: 4,
            inner_max: 8,
            latent_steps: 2,
            tol: 1e-5,
            warm: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Joint likelihood internals (absolute-noise parameterization).
//
// Mean part, with s2_i = exp(smoothed log variance) and
// K = nu C + diag(s2_i / a_i):
//   L_mean = -N/2 log 2pi
//            - 1/2 [ sum_i (a_i - 1) log s2_i + sum_i log a_i + log|K| ]
//            - 1/2 [ sum_i ss_i / s2_i + r^T K^{-1} r ]
// Latent part, with K_v = C_v + g_v A_n^{-1}:
//   L_latent = -n/2 log(2 pi nu_v) - 1/2 log|K_v|
//              - 1/(2 nu_v) (delta - b0v)^T K_v^{-1} (delta - b0v)
// ---------------------------------------------------------------------------

struct MeanPart {
    ll: f64,
    chol: Cholesky<f64, Dyn>,
    corr: DMatrix<f64>,
    alpha: DVector<f64>,
    beta0: f64,
}

fn mean_part(
    data: &ReplicatedDesign,
    theta: &LengthScales,
    nu: f64,
    s2: &DVector<f64>,
) -> Result<MeanPart> {
    let n = data.n();
    let corr = cov_matrix(&data.unique_x, theta, 0.0)?;
    let mut k = &corr * nu;
    for i in 0..n {
        k[(i, i)] += s2[i] / data.counts[i] as f64;
    }
    let jc = cholesky_with_jitter(&k, nu * DEFAULT_JITTER)?;
    let chol = jc.chol;

    let ones = DVector::from_element(n, 1.0);
    let kinv_y = chol.solve(&data.mean_y);
    let kinv_1 = chol.solve(&ones);
    let beta0 = ones.dot(&kinv_y) / ones.dot(&kinv_1);
    let r = &data.mean_y - DVector::from_element(n, beta0);
    let alpha = chol.solve(&r);

    let mut det_terms = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut quad = r.dot(&alpha);
    for i in 0..n {
        let ai = data.counts[i] as f64;
        det_terms += (ai - 1.0) * s2[i].ln() + ai.ln();
        quad += data.ss_within[i] / s2[i];
    }
    let n_total = data.total_n as f64;
    let ll = -0.5 * n_total * (2.0 * std::f64::consts::PI).ln() - 0.5 * det_terms - 0.5 * quad;
    Ok(MeanPart { ll, chol, corr, alpha, beta0 })
}

struct LatentPart {
    ll: f64,
    chol: Cholesky<f64, Dyn>,
    corr: DMatrix<f64>,
    /// `K_v^{-1} (delta - b0v)`
    alpha: DVector<f64>,
    quad: f64,
}

fn latent_part(
    data: &ReplicatedDesign,
    theta_v: &LengthScales,
    nu_v: f64,
    g_v: f64,
    beta0_v: f64,
    delta: &DVector<f64>,
) -> Result<LatentPart> {
    let n = data.n();
    let corr = cov_matrix(&data.unique_x, theta_v, 0.0)?;
    let mut k_v = corr.clone();
    for i in 0..n {
        k_v[(i, i)] += g_v / data.counts[i] as f64;
    }
    let jc = cholesky_with_jitter(&k_v, DEFAULT_JITTER)?;
    let chol = jc.chol;
    let centered = delta - DVector::from_element(n, beta0_v);
    let alpha = chol.solve(&centered);
    let quad = centered.dot(&alpha);
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ll = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * nu_v).ln() - 0.5 * logdet
        - 0.5 * quad / nu_v;
    Ok(LatentPart { ll, chol, corr, alpha, quad })
}

fn clamped_exp(v: f64) -> f64 {
    v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP).exp()
}

/// Smoothed log-variance from an already-factorized latent part: the map
/// `b0v + C_v K_v^{-1} (delta - b0v)` reuses `alpha = K_v^{-1}(delta - b0v)`,
/// so the likelihood, the smoother, and noise prediction share one
/// factorization exactly.
fn smoothed_from_latent(lat: &LatentPart, beta0_v: f64) -> (DVector<f64>, DVector<f64>) {
    let n = lat.alpha.len();
    let sm = &lat.corr * &lat.alpha + DVector::from_element(n, beta0_v);
    let s2 = sm.map(clamped_exp);
    (sm, s2)
}

/// Hyperparameter vector layout for the joint phase-(b) update:
/// `[log theta (p), log nu, log theta_v (p), log nu_v, log g_v, beta0_v]`.
struct HyperLayout {
    p: usize,
}

impl HyperLayout {
    fn dims(&self) -> usize {
        2 * self.p + 4
    }
    fn theta<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..self.p]
    }
    fn nu(&self, x: &[f64]) -> f64 {
        x[self.p].exp()
    }
    fn theta_v<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.p + 1..2 * self.p + 1]
    }
    fn nu_v(&self, x: &[f64]) -> f64 {
        x[2 * self.p + 1].exp()
    }
    fn g_v(&self, x: &[f64]) -> f64 {
        x[2 * self.p + 2].exp()
    }
    fn beta0_v(&self, x: &[f64]) -> f64 {
        x[2 * self.p + 3]
    }
}

/// Joint likelihood and gradient with respect to the hyperparameter vector,
/// latent field held fixed. Gradients flow through both the latent density
/// and the smoothing map (the map depends on `theta_v`, `g_v`, `beta0_v`).
fn joint_hyper_grad(
    data: &ReplicatedDesign,
    layout: &HyperLayout,
    x: &[f64],
    delta: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let p = layout.p;
    let n = data.n();
    let theta = LengthScales::new(layout.theta(x).iter().map(|v| v.exp()).collect())?;
    let nu = layout.nu(x);
    let theta_v = LengthScales::new(layout.theta_v(x).iter().map(|v| v.exp()).collect())?;
    let nu_v = layout.nu_v(x);
    let g_v = layout.g_v(x);
    let beta0_v = layout.beta0_v(x);

    let lat = latent_part(data, &theta_v, nu_v, g_v, beta0_v, delta)?;
    let (sm, s2) = smoothed_from_latent(&lat, beta0_v);
    let mp = mean_part(data, &theta, nu, &s2)?;
    let ll = mp.ll + lat.ll;

    let kinv = mp.chol.inverse();
    let kvinv = lat.chol.inverse();
    let xmat = &data.unique_x;

    // dL_mean/ds2_i, then w_i = s2_i * dL_mean/ds2_i (chain through exp).
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let ai = data.counts[i] as f64;
        let d = -0.5 * (ai - 1.0) / s2[i] - 0.5 * kinv[(i, i)] / ai
            + 0.5 * data.ss_within[i] / (s2[i] * s2[i])
            + 0.5 * mp.alpha[i] * mp.alpha[i] / ai;
        w[i] = d * s2[i];
    }
    // Zero the chain where the exponent clamp is active.
    for i in 0..n {
        if sm[i].abs() >= LOG_VAR_CLAMP {
            w[i] = 0.0;
        }
    }

    // M = C_v K_v^{-1}; u = (I - M)^T w reused by the map-derivative terms.
    let m_map = &lat.corr * &kvinv;
    let u = &w - m_map.transpose() * &w;

    let mut grad = vec![0.0; layout.dims()];

    // Mean-GP lengthscales and nu.
    let th = theta.values();
    let mut tr_k = vec![0.0; p];
    let mut quad_k = vec![0.0; p];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = mp.corr[(i, j)];
            for k in 0..p {
                let dist = (xmat[(i, k)] - xmat[(j, k)]).abs();
                let s = SQRT3 * dist / th[k];
                let dc = c * s * s / (th[k] * (1.0 + s));
                tr_k[k] += 2.0 * kinv[(i, j)] * dc;
                quad_k[k] += 2.0 * mp.alpha[i] * mp.alpha[j] * dc;
            }
        }
    }
    for k in 0..p {
        let d_theta = nu * (0.5 * quad_k[k] - 0.5 * tr_k[k]);
        grad[k] = d_theta * th[k];
    }
    // dK/dnu = C (plus the jitter tied to nu, negligible for the gradient).
    let mut tr_nu = 0.0;
    let mut quad_nu = 0.0;
    for i in 0..n {
        for j in 0..n {
            tr_nu += kinv[(i, j)] * mp.corr[(j, i)];
            quad_nu += mp.alpha[i] * mp.corr[(i, j)] * mp.alpha[j];
        }
    }
    grad[p] = (0.5 * quad_nu - 0.5 * tr_nu) * nu;

    // Noise-GP lengthscales: latent-density term plus the smoothing-map term
    // d smooth/d theta_vk = (I - M) Cdot_vk alpha_v.
    let thv = theta_v.values();
    for k in 0..p {
        let mut tr_v = 0.0;
        let mut quad_v = 0.0;
        let mut map_term = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let c = lat.corr[(i, j)];
                let dist = (xmat[(i, k)] - xmat[(j, k)]).abs();
                let s = SQRT3 * dist / thv[k];
                let dc = c * s * s / (thv[k] * (1.0 + s));
                tr_v += 2.0 * kvinv[(i, j)] * dc;
                quad_v += 2.0 * lat.alpha[i] * lat.alpha[j] * dc;
                map_term += dc * (u[i] * lat.alpha[j] + u[j] * lat.alpha[i]);
            }
        }
        let d_thv = 0.5 * quad_v / nu_v - 0.5 * tr_v + map_term;
        grad[p + 1 + k] = d_thv * thv[k];
    }

    // nu_v.
    let d_nuv = -0.5 * n as f64 / nu_v + 0.5 * lat.quad / (nu_v * nu_v);
    grad[2 * p + 1] = d_nuv * nu_v;

    // g_v: latent density term (dK_v/dg_v = A^{-1}) plus the map term
    // d smooth/d g_v = -M A^{-1} alpha_v, i.e. -(M^T w)^T A^{-1} alpha_v.
    let mtw = m_map.transpose() * &w;
    let mut tr_gv = 0.0;
    let mut quad_gv = 0.0;
    let mut map_gv = 0.0;
    for i in 0..n {
        let ai = data.counts[i] as f64;
        tr_gv += kvinv[(i, i)] / ai;
        quad_gv += lat.alpha[i] * lat.alpha[i] / ai;
        map_gv -= mtw[i] * lat.alpha[i] / ai;
    }
    let d_gv = 0.5 * quad_gv / nu_v - 0.5 * tr_gv + map_gv;
    grad[2 * p + 2] = d_gv * g_v;

    // beta0_v: latent density plus map (d smooth/d b0v = 1 - M 1).
    let d_b0_density = lat.alpha.sum() / nu_v;
    let m_row_sums = &m_map * DVector::from_element(n, 1.0);
    let mut d_b0_map = 0.0;
    for i in 0..n {
        d_b0_map += w[i] * (1.0 - m_row_sums[i]);
    }
    grad[2 * p + 3] = d_b0_density + d_b0_map;

    Ok((ll, grad))
}

/// Joint likelihood and gradient with respect to the latent field, all
/// hyperparameters fixed. `m_map` and the latent factorization are
/// precomputed by the caller (they do not change during latent ascent).
fn joint_latent_grad(
    data: &ReplicatedDesign,
    mean_hy: &MeanHypers,
    nu_v: f64,
    latent_tpl: &LatentNoise,
    lat_chol: &Cholesky<f64, Dyn>,
    lat_corr: &DMatrix<f64>,
    lat_logdet_term: f64,
    m_map: &DMatrix<f64>,
    delta: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let n = data.n();
    let centered = delta - DVector::from_element(n, latent_tpl.beta0_v);
    let alpha_v = lat_chol.solve(&centered);
    let quad_v = centered.dot(&alpha_v);
    let ll_lat = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * nu_v).ln() - 0.5 * lat_logdet_term
        - 0.5 * quad_v / nu_v;

    let sm = lat_corr * &alpha_v + DVector::from_element(n, latent_tpl.beta0_v);
    let s2 = sm.map(clamped_exp);
    let mp = mean_part(data, &mean_hy.theta, mean_hy.nu, &s2)?;
    let ll = mp.ll + ll_lat;

    let kinv = mp.chol.inverse();
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let ai = data.counts[i] as f64;
        let d = -0.5 * (ai - 1.0) / s2[i] - 0.5 * kinv[(i, i)] / ai
            + 0.5 * data.ss_within[i] / (s2[i] * s2[i])
            + 0.5 * mp.alpha[i] * mp.alpha[i] / ai;
        w[i] = if sm[i].abs() >= LOG_VAR_CLAMP { 0.0 } else { d * s2[i] };
    }
    let grad_mean = m_map.transpose() * &w;
    let grad_lat = -&alpha_v / nu_v;
    let grad: Vec<f64> = (0..n).map(|i| grad_mean[i] + grad_lat[i]).collect();
    Ok((ll, grad))
}

fn joint_loglik_at(
    data: &ReplicatedDesign,
    mean_hy: &MeanHypers,
    noise_hy: &NoiseHypers,
    latent: &LatentNoise,
) -> Result<(f64, MeanPart, LatentPart, DVector<f64>)> {
    let lat = latent_part(data, &noise_hy.theta_v, noise_hy.nu_v, latent.g_v, latent.beta0_v, &latent.delta)?;
    let (sm, s2) = smoothed_from_latent(&lat, latent.beta0_v);
    let mp = mean_part(data, &mean_hy.theta, mean_hy.nu, &s2)?;
    let ll = mp.ll + lat.ll;
    Ok((ll, mp, lat, sm))
}

/// Empirical latent initialization: per-location log sample variance where
/// replicates exist, the homoskedastic nugget elsewhere.
fn initial_delta(data: &ReplicatedDesign, hom: &GPFit) -> DVector<f64> {
    let floor = 1e-8 * data.var_mean_y().max(1e-12);
    let hom_noise = (hom.hypers.nu * hom.hypers.g).max(floor);
    DVector::from_fn(data.n(), |i, _| {
        let a = data.counts[i];
        if a > 1 {
            (data.ss_within[i] / (a as f64 - 1.0)).max(floor).ln()
        } else {
            hom_noise.ln()
        }
    })
}

/// Fit the joint heteroskedastic model by alternating maximum likelihood.
pub fn fit_hetgp(
    data: &ReplicatedDesign,
    bounds: &GpBounds,
    restarts: usize,
    rng_seed: u64,
    domain: Domain,
    options: &FitOptions,
) -> Result<JointFit> {
    let p = data.dim();
    if data.n() < 10.max(2 * p) {
        return Err(Error::invalid(format!(
            "need at least {} unique locations for a joint fit, got {}",
            10.max(2 * p),
            data.n()
        )));
    }
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    if domain.dim() != p {
        return Err(Error::invalid("domain dimension does not match design"));
    }

    let hom = fit_gp(data, bounds, options.hom_restarts, mix(rng_seed, tags::FIT_START))?;
    let delta0 = initial_delta(data, &hom);
    let delta_var = crate::linalg::sample_variance(delta0.as_slice()).max(1e-4);

    let layout = HyperLayout { p };
    let nu_v_bounds = (1e-6f64, 1e3f64);
    let lo = [
        vec![bounds.theta.0.ln(); p],
        vec![bounds.nu.0.ln()],
        vec![bounds.theta.0.ln(); p],
        vec![nu_v_bounds.0.ln()],
        vec![bounds.g.0.ln()],
        vec![-60.0],
    ]
    .concat();
    let hi = [
        vec![bounds.theta.1.ln(); p],
        vec![bounds.nu.1.ln()],
        vec![bounds.theta.1.ln(); p],
        vec![nu_v_bounds.1.ln()],
        vec![bounds.g.1.ln()],
        vec![60.0],
    ]
    .concat();
    let box_bounds = BoxBounds::new(lo.clone(), hi.clone());

    // Restart starting points: the first uses the homoskedastic fit directly,
    // the rest jitter it through seeded LHS draws over the hyper box.
    let lhs = crate::design::latin_hypercube(restarts, layout.dims(), mix2(rng_seed, tags::FIT_START, 1));
    let mut start_points = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let mut x0 = vec![0.0; layout.dims()];
        if r == 0 {
            for k in 0..p {
                x0[k] = hom.hypers.theta.values()[k].ln();
                x0[p + 1 + k] = hom.hypers.theta.values()[k].ln();
            }
            x0[p] = hom.hypers.nu.ln();
            x0[2 * p + 1] = delta_var.ln();
            x0[2 * p + 2] = 1.0f64.ln();
            x0[2 * p + 3] = delta0.mean();
        } else {
            for k in 0..layout.dims() {
                x0[k] = lo[k] + lhs[(r, k)] * (hi[k] - lo[k]);
            }
            // Keep the latent trend and spread anchored to the data.
            x0[2 * p + 1] = delta_var.ln();
            x0[2 * p + 3] = delta0.mean();
        }
        start_points.push(x0);
    }

    let runs: Vec<Option<(f64, Vec<f64>, DVector<f64>)>> = start_points
        .par_iter()
        .map(|x0| run_alternation(data, &layout, &box_bounds, x0, &delta0, options))
        .collect();

    let mut best: Option<(f64, usize, Vec<f64>, DVector<f64>)> = None;
    for (idx, run) in runs.iter().enumerate() {
        if let Some((ll, x, delta)) = run {
            let better = match &best {
                None => true,
                Some((v, bi, _, _)) => ll > v || (ll == v && idx < *bi),
            };
            if better {
                best = Some((*ll, idx, x.clone(), delta.clone()));
            }
        }
    }
    let Some((ll_het, _, x_best, delta_best)) = best else {
        return Err(Error::Fitting("all heteroskedastic restarts failed".into()));
    };

    let mean_hy = MeanHypers {
        theta: LengthScales::new(layout.theta(&x_best).iter().map(|v| v.exp()).collect())?,
        nu: layout.nu(&x_best),
        beta0: 0.0, // filled from the mean part below
    };
    let noise_hy = NoiseHypers {
        theta_v: LengthScales::new(layout.theta_v(&x_best).iter().map(|v| v.exp()).collect())?,
        nu_v: layout.nu_v(&x_best),
    };
    let latent = LatentNoise {
        delta: delta_best,
        g_v: layout.g_v(&x_best),
        beta0_v: layout.beta0_v(&x_best),
    };

    // Constant-latent comparator under the same hyperparameters: if it scores
    // at least as well, the data do not support heteroskedasticity and the
    // reduced model is returned.
    let (fit_het, ll_het_final) = finalize(data, &domain, &mean_hy, &noise_hy, &latent)?;
    debug_assert!((ll_het_final - ll_het).abs() <= 1e-6 * (1.0 + ll_het.abs()));
    let const_fit = best_constant_latent(data, &domain, &mean_hy, &noise_hy, &latent)?;
    if let Some(cf) = const_fit {
        if cf.loglik >= fit_het.loglik {
            return Ok(cf);
        }
    }
    Ok(fit_het)
}

fn run_alternation(
    data: &ReplicatedDesign,
    layout: &HyperLayout,
    box_bounds: &BoxBounds,
    x0: &[f64],
    delta0: &DVector<f64>,
    options: &FitOptions,
) -> Option<(f64, Vec<f64>, DVector<f64>)> {
    let mut x = x0.to_vec();
    let mut delta = delta0.clone();
    let mut last_ll = f64::NEG_INFINITY;

    for _outer in 0..options.outer_max {
        // Phase (a): latent ascent with hyperparameters fixed.
        let theta_v = LengthScales::new(layout.theta_v(&x).iter().map(|v| v.exp()).collect()).ok()?;
        let nu_v = layout.nu_v(&x);
        let g_v = layout.g_v(&x);
        let beta0_v = layout.beta0_v(&x);
        let mean_hy = MeanHypers {
            theta: LengthScales::new(layout.theta(&x).iter().map(|v| v.exp()).collect()).ok()?,
            nu: layout.nu(&x),
            beta0: 0.0,
        };
        let lat = latent_part(data, &theta_v, nu_v, g_v, beta0_v, &delta).ok()?;
        let lat_logdet = 2.0 * lat.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let kvinv = lat.chol.inverse();
        let m_map = &lat.corr * &kvinv;
        let latent_tpl = LatentNoise { delta: delta.clone(), g_v, beta0_v };

        let asc = backtracking_ascent(delta.as_slice(), options.latent_steps, 0.5, |d| {
            let dv = DVector::from_column_slice(d);
            joint_latent_grad(
                data, &mean_hy, nu_v, &latent_tpl, &lat.chol, &lat.corr, lat_logdet, &m_map, &dv,
            )
            .ok()
        })?;
        delta = DVector::from_column_slice(&asc.x);

        // Phase (b): hyperparameter update with the latent field fixed.
        let res = maximize_projected_bfgs(&x, box_bounds, options.inner_max, 1e-9, |hx| {
            joint_hyper_grad(data, layout, hx, &delta).ok()
        })?;
        x = res.x;
        let ll = res.value;

        if ll - last_ll < options.tol && ll.is_finite() && last_ll.is_finite() {
            last_ll = ll.max(last_ll);
            break;
        }
        last_ll = ll;
    }

    if last_ll.is_finite() && !last_ll.is_nan() {
        Some((last_ll, x, delta))
    } else {
        None
    }
}

/// Rebuild every cache from the parameters; used after fitting and when
/// loading a serialized fit, so both paths are bit-identical.
fn finalize(
    data: &ReplicatedDesign,
    domain: &Domain,
    mean_hy: &MeanHypers,
    noise_hy: &NoiseHypers,
    latent: &LatentNoise,
) -> Result<(JointFit, f64)> {
    let (ll, mp, lat, sm) = joint_loglik_at(data, mean_hy, noise_hy, latent)?;
    let fit = JointFit {
        data: data.clone(),
        domain: domain.clone(),
        mean: MeanHypers { beta0: mp.beta0, ..mean_hy.clone() },
        noise: noise_hy.clone(),
        latent: latent.clone(),
        loglik: ll,
        smoothed_log_var: sm,
        chol_mean: mp.chol,
        alpha_mean: mp.alpha,

        alpha_noise: lat.alpha,
    };
    Ok((fit, ll))
}

/// Best constant-latent variant under the given hyperparameters: delta == c,
/// beta0_v == c, with c optimized by golden-section search on the joint
/// likelihood (the latent quadratic term vanishes for constant fields).
fn best_constant_latent(
    data: &ReplicatedDesign,
    domain: &Domain,
    mean_hy: &MeanHypers,
    noise_hy: &NoiseHypers,
    latent: &LatentNoise,
) -> Result<Option<JointFit>> {
    let n = data.n();
    let eval = |c: f64| -> Option<f64> {
        let lat = LatentNoise { delta: DVector::from_element(n, c), g_v: latent.g_v, beta0_v: c };
        joint_loglik_at(data, mean_hy, noise_hy, &lat).ok().map(|(ll, _, _, _)| ll)
    };

    let lo0 = latent.delta.min() - 2.0;
    let hi0 = latent.delta.max() + 2.0;
    let (mut a, mut b) = (lo0, hi0);
    let phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut c1 = b - phi * (b - a);
    let mut c2 = a + phi * (b - a);
    let (mut f1, mut f2) = match (eval(c1), eval(c2)) {
        (Some(f1), Some(f2)) => (f1, f2),
        _ => return Ok(None),
    };
    for _ in 0..60 {
        if f1 < f2 {
            a = c1;
            c1 = c2;
            f1 = f2;
            c2 = a + phi * (b - a);
            f2 = match eval(c2) {
                Some(v) => v,
                None => return Ok(None),
            };
        } else {
            b = c2;
            c2 = c1;
            f2 = f1;
            c1 = b - phi * (b - a);
            f1 = match eval(c1) {
                Some(v) => v,
                None => return Ok(None),
            };
        }
        if (b - a).abs() < 1e-10 {
            break;
        }
    }
    let c_best = if f1 > f2 { c1 } else { c2 };
    let lat = LatentNoise { delta: DVector::from_element(n, c_best), g_v: latent.g_v, beta0_v: c_best };
    let (fit, _) = finalize(data, domain, mean_hy, noise_hy, &lat)?;
    Ok(Some(fit))
}

impl JointFit {
    /// Predict at unit-hypercube points.
    pub fn predict_joint(&self, xnew: &DMatrix<f64>) -> Result<JointPrediction> {
        let m = xnew.nrows();
        let kx = cross_cov(xnew, &self.data.unique_x, &self.mean.theta)?;
        let mut mean = DVector::from_element(m, self.mean.beta0);
        // Mean uses the absolute-scale factorization: nu * k^T K_abs^{-1} r.
        mean += (&kx * &self.alpha_mean) * self.mean.nu;

        let l = self.chol_mean.l_dirty();
        let mut var_epi = DVector::zeros(m);
        let mut clamped = 0usize;
        for i in 0..m {
            let ki = kx.row(i).transpose() * self.mean.nu;
            let z = l
                .solve_lower_triangular(&ki)
                .ok_or_else(|| Error::numerical("triangular solve failed in predict_joint"))?;
            let raw = self.mean.nu - z.dot(&z);
            if raw < 0.0 {
                clamped += 1;
            } else {
                var_epi[i] = raw;
            }
        }
        if clamped * 100 > m {
            log::warn!("predict_joint clamped {clamped}/{m} negative epistemic variances");
        }

        // Aleatoric: noise-GP kriging mean of the latent field, exponentiated.
        let kxv = cross_cov(xnew, &self.data.unique_x, &self.noise.theta_v)?;
        let mut var_ale = DVector::zeros(m);
        for i in 0..m {
            let lv = self.latent.beta0_v + kxv.row(i).transpose().dot(&self.alpha_noise);
            var_ale[i] = clamped_exp(lv);
        }

        let mut extrapolated = Vec::with_capacity(m);
        let mut n_out = 0usize;
        for i in 0..m {
            let pt: Vec<f64> = xnew.row(i).iter().copied().collect();
            let inside = self.domain_contains_unit(&pt);
            if !inside {
                n_out += 1;
            }
            extrapolated.push(!inside);
        }
        if n_out > 0 {
            log::warn!("predict_joint: {n_out}/{m} points outside the fitted domain (extrapolation)");
        }

        let var_total = &var_epi + &var_ale;
        Ok(JointPrediction { mean, var_epistemic: var_epi, var_aleatoric: var_ale, var_total, extrapolated })
    }

    fn domain_contains_unit(&self, u: &[f64]) -> bool {
        self.domain.contains_unit(u)
    }

    /// Posterior mean and full epistemic covariance of the mean GP on a grid.
    pub fn posterior_mean_cov(&self, xgrid: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = xgrid.nrows();
        if m > 5000 {
            return Err(Error::invalid("grid too large for dense posterior covariance (max 5000)"));
        }
        let kx = cross_cov(xgrid, &self.data.unique_x, &self.mean.theta)?;
        let mut mean = DVector::from_element(m, self.mean.beta0);
        mean += (&kx * &self.alpha_mean) * self.mean.nu;

        let c_grid = cov_matrix(xgrid, &self.mean.theta, 0.0)?;
        // nu * (C** - nu * Kx K_abs^{-1} Kx^T)
        let solved = self.chol_mean.solve(&kx.transpose());
        let cov = (c_grid - (&kx * solved) * self.mean.nu) * self.mean.nu;
        Ok((mean, cov))
    }

    /// One joint posterior draw of the mean surface on a grid.
    pub fn sample_mean_path(&self, xgrid: &DMatrix<f64>, rng_seed: u64) -> Result<DVector<f64>> {
        let (mean, mut cov) = self.posterior_mean_cov(xgrid)?;
        // Exact-interpolation grids can make the covariance numerically
        // semidefinite; a relative floor keeps the factorization honest.
        let floor = 1e-12 * self.mean.nu;
        for i in 0..cov.nrows() {
            cov[(i, i)] += floor;
        }
        let jc = cholesky_with_jitter(&cov, floor)?;
        let mut rng = stream(mix(rng_seed, tags::PATH));
        Ok(mvn_sample(&mean, &jc.chol.l(), &mut rng))
    }

    /// Posterior mean of the mean GP only; the cheap path for Monte-Carlo
    /// sweeps that do not need variances.
    pub fn posterior_mean(&self, xnew: &DMatrix<f64>) -> Result<DVector<f64>> {
        let kx = cross_cov(xnew, &self.data.unique_x, &self.mean.theta)?;
        let mut mean = DVector::from_element(xnew.nrows(), self.mean.beta0);
        mean += (&kx * &self.alpha_mean) * self.mean.nu;
        Ok(mean)
    }

    /// Predicted aleatoric variance at unit-hypercube points.
    pub fn aleatoric_variance(&self, xnew: &DMatrix<f64>) -> Result<DVector<f64>> {
        let kxv = cross_cov(xnew, &self.data.unique_x, &self.noise.theta_v)?;
        Ok(DVector::from_fn(xnew.nrows(), |i, _| {
            clamped_exp(self.latent.beta0_v + kxv.row(i).transpose().dot(&self.alpha_noise))
        }))
    }

    /// Smoothed per-location noise variances used by the mean GP.
    pub fn smoothed_noise(&self) -> DVector<f64> {
        self.smoothed_log_var.map(clamped_exp)
    }

    /// Relative per-location nugget ratios `s2_i / nu` (mean-GP scale).
    pub(crate) fn rel_noise(&self) -> Vec<f64> {
        self.smoothed_log_var.iter().map(|v| clamped_exp(*v) / self.mean.nu).collect()
    }
}

// ---------------------------------------------------------------------------
// Serialization: a self-describing document sufficient to reload the fit and
// reproduce predictions bitwise.
// ---------------------------------------------------------------------------

pub const FIT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct JointFitDocument {
    format_version: u32,
    domain: Domain,
    data: ReplicatedDesign,
    mean: MeanHypers,
    noise: NoiseHypers,
    latent: LatentNoise,
    loglik: f64,
}

impl JointFit {
    pub fn to_json(&self) -> Result<String> {
        let doc = JointFitDocument {
            format_version: FIT_FORMAT_VERSION,
            domain: self.domain.clone(),
            data: self.data.clone(),
            mean: self.mean.clone(),
            noise: self.noise.clone(),
            latent: self.latent.clone(),
            loglik: self.loglik,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<JointFit> {
        let doc: JointFitDocument = serde_json::from_str(text)?;
        if doc.format_version != FIT_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported fit format version {}",
                doc.format_version
            )));
        }
        let (fit, _) = finalize(&doc.data, &doc.domain, &doc.mean, &doc.noise, &doc.latent)?;
        Ok(fit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::latin_hypercube;
    use crate::gp::collapse_replicates;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn het_bench_data(
        n_loc: usize,
        reps: usize,
        seed: u64,
        noise_var: impl Fn(f64) -> f64,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = crate::rng::stream(seed);
        let xu = latin_hypercube(n_loc, 1, seed);
        let total = n_loc * reps;
        let mut x = DMatrix::zeros(total, 1);
        let mut y = DVector::zeros(total);
        for i in 0..n_loc {
            let xi = xu[(i, 0)];
            let f = 2.0 * (2.0 * std::f64::consts::PI * xi).sin();
            for r in 0..reps {
                x[(i * reps + r, 0)] = xi;
                y[i * reps + r] =
                    f + noise_var(xi).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        (x, y)
    }

    fn fit_bench(seed: u64, noise_var: impl Fn(f64) -> f64) -> JointFit {
        let (x, y) = het_bench_data(60, 5, seed, noise_var);
        let d = collapse_replicates(&x, &y, 1e-9).unwrap();
        let b = GpBounds::default_for(&d);
        fit_hetgp(&d, &b, 2, seed, Domain::unit(1), &FitOptions::default()).unwrap()
    }

    #[test]
    fn smooth_latent_limits() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let counts = [1u64, 1];
        // g_v -> 0: map approaches the identity.
        let delta = DVector::from_vec(vec![1.0, -1.0]);
        let out = smooth_latent(&delta, &c, &counts, 1e-12, 0.0).unwrap();
        assert_relative_eq!(out[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(out[1], -1.0, epsilon = 1e-5);
        // Constant field at the trend is a fixed point.
        let const_delta = DVector::from_vec(vec![0.7, 0.7]);
        let out2 = smooth_latent(&const_delta, &c, &counts, 1.0, 0.7).unwrap();
        assert_relative_eq!(out2[0], 0.7, epsilon = 1e-12);
        assert_relative_eq!(out2[1], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn smooth_latent_matches_independent_two_by_two_solve() {
        // Independent oracle: solve (C + I) v = delta by explicit 2x2
        // inversion, then apply C.
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let counts = [1u64, 1];
        let delta = DVector::from_vec(vec![1.0, -1.0]);
        let g_v = 1.0;

        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 2.0]);
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let v0 = (a[(1, 1)] * delta[0] - a[(0, 1)] * delta[1]) / det;
        let v1 = (-a[(1, 0)] * delta[0] + a[(0, 0)] * delta[1]) / det;
        let expect0 = c[(0, 0)] * v0 + c[(0, 1)] * v1;
        let expect1 = c[(1, 0)] * v0 + c[(1, 1)] * v1;

        let out = smooth_latent(&delta, &c, &counts, g_v, 0.0).unwrap();
        assert_relative_eq!(out[0], expect0, epsilon = 1e-9);
        assert_relative_eq!(out[1], expect1, epsilon = 1e-9);
        // For this symmetric case the solution is antisymmetric.
        assert_relative_eq!(out[0], -out[1], epsilon = 1e-12);
    }

    #[test]
    fn hyper_gradient_matches_finite_differences() {
        let (x, y) = het_bench_data(15, 3, 4, |x| 0.05 + 0.4 * x * x);
        let data = collapse_replicates(&x, &y, 1e-9).unwrap();
        let layout = HyperLayout { p: 1 };
        let delta = initial_delta(
            &data,
            &fit_gp(&data, &GpBounds::default_for(&data), 2, 11).unwrap(),
        );
        let xh = vec![
            (0.4f64).ln(),
            (1.1f64).ln(),
            (0.6f64).ln(),
            (0.8f64).ln(),
            (0.9f64).ln(),
            -2.0,
        ];
        let (_, grad) = joint_hyper_grad(&data, &layout, &xh, &delta).unwrap();
        for k in 0..xh.len() {
            let h = 1e-6;
            let mut up = xh.clone();
            let mut dn = xh.clone();
            up[k] += h;
            dn[k] -= h;
            let (fu, _) = joint_hyper_grad(&data, &layout, &up, &delta).unwrap();
            let (fd_, _) = joint_hyper_grad(&data, &layout, &dn, &delta).unwrap();
            let fd = (fu - fd_) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, max_relative = 2e-4, epsilon = 1e-6);
        }
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let (x, y) = het_bench_data(12, 3, 6, |x| 0.05 + 0.4 * x * x);
        let data = collapse_replicates(&x, &y, 1e-9).unwrap();
        let hom = fit_gp(&data, &GpBounds::default_for(&data), 2, 12).unwrap();
        let delta = initial_delta(&data, &hom);
        let mean_hy = MeanHypers {
            theta: LengthScales::new(vec![0.4]).unwrap(),
            nu: 1.2,
            beta0: 0.0,
        };
        let theta_v = LengthScales::new(vec![0.7]).unwrap();
        let (nu_v, g_v, beta0_v) = (0.5, 0.8, delta.mean());
        let lat = latent_part(&data, &theta_v, nu_v, g_v, beta0_v, &delta).unwrap();
        let logdet = 2.0 * lat.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let kvinv = lat.chol.inverse();
        let m_map = &lat.corr * &kvinv;
        let tpl = LatentNoise { delta: delta.clone(), g_v, beta0_v };

        let f = |d: &DVector<f64>| {
            joint_latent_grad(&data, &mean_hy, nu_v, &tpl, &lat.chol, &lat.corr, logdet, &m_map, d)
                .unwrap()
        };
        let (_, grad) = f(&delta);
        for k in [0usize, 5, 11] {
            let h = 1e-6;
            let mut up = delta.clone();
            let mut dn = delta.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (f(&up).0 - f(&dn).0) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, max_relative = 2e-4, epsilon = 1e-7);
        }
    }

    #[test]
    fn recovers_heteroskedastic_noise_within_factor_two() {
        let truth = |x: f64| 0.05 + 0.4 * x * x;
        let fit = fit_bench(42, truth);
        let grid = DMatrix::from_fn(100, 1, |i, _| i as f64 / 99.0);
        let pred = fit.aleatoric_variance(&grid).unwrap();
        let mut ok = 0;
        for i in 0..100 {
            let t = truth(grid[(i, 0)]);
            let ratio = pred[i] / t;
            if (0.5..=2.0).contains(&ratio) {
                ok += 1;
            }
        }
        assert!(ok >= 90, "noise within factor 2 at only {ok}/100 grid points");
    }

    #[test]
    fn homoskedastic_data_does_not_hallucinate_structure() {
        let fit = fit_bench(7, |_| 0.25);
        let grid = DMatrix::from_fn(100, 1, |i, _| i as f64 / 99.0);
        let pred = fit.aleatoric_variance(&grid).unwrap();
        let ratio = pred.max() / pred.min();
        assert!(ratio < 3.0, "predicted noise varies by factor {ratio}");
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let (x, y) = het_bench_data(30, 4, 9, |x| 0.05 + 0.4 * x * x);
        let d = collapse_replicates(&x, &y, 1e-9).unwrap();
        let b = GpBounds::default_for(&d);
        let opts = FitOptions::bootstrap();
        let f1 = fit_hetgp(&d, &b, 2, 5, Domain::unit(1), &opts).unwrap();
        let f2 = fit_hetgp(&d, &b, 2, 5, Domain::unit(1), &opts).unwrap();
        assert_eq!(f1.loglik, f2.loglik);
        assert_eq!(f1.latent.delta.as_slice(), f2.latent.delta.as_slice());
        assert_eq!(f1.mean.nu, f2.mean.nu);
    }

    #[test]
    fn joint_likelihood_not_below_constant_latent_reduction() {
        let fit = fit_bench(13, |x| 0.05 + 0.4 * x * x);
        let cf = best_constant_latent(&fit.data, &fit.domain, &fit.mean, &fit.noise, &fit.latent)
            .unwrap()
            .unwrap();
        assert!(
            fit.loglik >= cf.loglik - 1e-6,
            "returned fit {} below constant-latent {}",
            fit.loglik,
            cf.loglik
        );
    }

    #[test]
    fn prediction_at_heavily_replicated_noise_point() {
        // 50 replicates of pure noise at one location: predicted aleatoric
        // variance should track the sample variance there.
        let mut rng = crate::rng::stream(31);
        let n_loc = 20;
        let xu = latin_hypercube(n_loc, 1, 31);
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n_loc {
            let reps = if i == 0 { 50 } else { 5 };
            for _ in 0..reps {
                rows.push(xu[(i, 0)]);
                ys.push(0.8 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let x = DMatrix::from_column_slice(rows.len(), 1, &rows);
        let y = DVector::from_vec(ys.clone());
        let d = collapse_replicates(&x, &y, 1e-9).unwrap();
        let sample_var_at_0 = d.ss_within[0] / (d.counts[0] as f64 - 1.0);
        let b = GpBounds::default_for(&d);
        let fit = fit_hetgp(&d, &b, 2, 3, Domain::unit(1), &FitOptions::default()).unwrap();
        let at0 = DMatrix::from_row_slice(1, 1, &[xu[(0, 0)]]);
        let pred = fit.aleatoric_variance(&at0).unwrap()[0];
        let ratio = pred / sample_var_at_0;
        assert!((1.0 / 1.5..=1.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn constant_latent_fit_predicts_constant_noise() {
        let fit = fit_bench(7, |_| 0.25);
        // Whether or not the optimizer collapsed, force the constant variant
        // and check its aleatoric surface is flat.
        let cf = best_constant_latent(&fit.data, &fit.domain, &fit.mean, &fit.noise, &fit.latent)
            .unwrap()
            .unwrap();
        let grid = DMatrix::from_fn(50, 1, |i, _| i as f64 / 49.0);
        let v = cf.aleatoric_variance(&grid).unwrap();
        let (lo, hi) = (v.min(), v.max());
        assert!((hi - lo) / hi.max(1e-300) < 1e-8, "constant fit varies: [{lo}, {hi}]");
    }

    #[test]
    fn var_total_is_exact_sum_and_extrapolation_flagged() {
        let fit = fit_bench(3, |x| 0.05 + 0.4 * x * x);
        let xnew = DMatrix::from_row_slice(3, 1, &[0.2, 0.8, 1.4]);
        let pred = fit.predict_joint(&xnew).unwrap();
        for i in 0..3 {
            assert_eq!(pred.var_total[i], pred.var_epistemic[i] + pred.var_aleatoric[i]);
            assert!(pred.var_aleatoric[i] > 0.0);
        }
        assert_eq!(pred.extrapolated, vec![false, false, true]);
    }

    #[test]
    fn sample_mean_path_reproducible_and_collapses_to_mean() {
        let fit = fit_bench(3, |x| 0.05 + 0.4 * x * x);
        let grid = DMatrix::from_fn(25, 1, |i, _| i as f64 / 24.0);
        let a = fit.sample_mean_path(&grid, 11).unwrap();
        let b = fit.sample_mean_path(&grid, 11).unwrap();
        let c = fit.sample_mean_path(&grid, 12).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(a != c);
    }

    #[test]
    fn sample_mean_path_moments_far_from_data() {
        // Far from the training data the posterior reverts to (beta0, nu).
        let (x, y) = het_bench_data(20, 3, 17, |_| 0.1);
        let mut d = collapse_replicates(&x, &y, 1e-9).unwrap();
        // Compress the design into [0, 0.05] so x = 1 is far away.
        for i in 0..d.n() {
            d.unique_x[(i, 0)] *= 0.05;
        }
        let hypers = MeanHypers { theta: LengthScales::new(vec![0.02]).unwrap(), nu: 1.7, beta0: 0.0 };
        let noise = NoiseHypers { theta_v: LengthScales::new(vec![0.5]).unwrap(), nu_v: 0.3 };
        let latent = LatentNoise {
            delta: DVector::from_element(d.n(), (0.1f64).ln()),
            g_v: 1.0,
            beta0_v: (0.1f64).ln(),
        };
        let (fit, _) = finalize(&d, &Domain::unit(1), &hypers, &noise, &latent).unwrap();
        let far = DMatrix::from_row_slice(1, 1, &[1.0]);
        let n_draws = 10_000;
        let mut vals = Vec::with_capacity(n_draws);
        for s in 0..n_draws {
            vals.push(fit.sample_mean_path(&far, s as u64).unwrap()[0]);
        }
        let mean = crate::linalg::mean(&vals);
        let var = crate::linalg::sample_variance(&vals);
        let se_mean = (fit.mean.nu / n_draws as f64).sqrt();
        assert!((mean - fit.mean.beta0).abs() < 3.0 * se_mean, "mean {mean}");
        let se_var = fit.mean.nu * (2.0 / (n_draws as f64 - 1.0)).sqrt();
        assert!((var - fit.mean.nu).abs() < 3.0 * se_var, "var {var} vs {}", fit.mean.nu);
    }

    #[test]
    fn serialization_round_trip_reproduces_predictions_bitwise() {
        let fit = fit_bench(23, |x| 0.05 + 0.4 * x * x);
        let json = fit.to_json().unwrap();
        let back = JointFit::from_json(&json).unwrap();
        let grid = DMatrix::from_fn(40, 1, |i, _| i as f64 / 39.0);
        let a = fit.predict_joint(&grid).unwrap();
        let b = back.predict_joint(&grid).unwrap();
        assert_eq!(a.mean.as_slice(), b.mean.as_slice());
        assert_eq!(a.var_epistemic.as_slice(), b.var_epistemic.as_slice());
        assert_eq!(a.var_aleatoric.as_slice(), b.var_aleatoric.as_slice());
    }

    #[test]
    fn smoothing_map_variance_matches_closed_form() {
        // Push latent draws through the (linear) map; the elementwise sample
        // variance must match the mapped covariance diagonal.
        let (x, y) = het_bench_data(15, 3, 29, |x| 0.05 + 0.4 * x * x);
        let d = collapse_replicates(&x, &y, 1e-9).unwrap();
        let theta_v = LengthScales::new(vec![0.5]).unwrap();
        let c_v = cov_matrix(&d.unique_x, &theta_v, 0.0).unwrap();
        let (nu_v, g_v, b0v) = (0.7, 0.6, -1.0);
        let n = d.n();
        let mut k_v = c_v.clone();
        for i in 0..n {
            k_v[(i, i)] += g_v / d.counts[i] as f64;
        }
        let chol = nalgebra::Cholesky::new(k_v.clone() * nu_v).unwrap();

        let n_draws = 1000;
        let mut sums = vec![0.0; n];
        let mut sumsq = vec![0.0; n];
        let mut rng = crate::rng::stream(5);
        for _ in 0..n_draws {
            let draw = mvn_sample(&DVector::from_element(n, b0v), &chol.l(), &mut rng);
            let sm = smooth_latent(&draw, &c_v, &d.counts, g_v, b0v).unwrap();
            for i in 0..n {
                sums[i] += sm[i];
                sumsq[i] += sm[i] * sm[i];
            }
        }
        // Closed form: Var(M delta) = nu_v * M K_v M^T.
        let kinv = nalgebra::Cholesky::new(k_v.clone()).unwrap().inverse();
        let m_map = &c_v * kinv;
        let mapped = &m_map * k_v * m_map.transpose() * nu_v;
        for i in 0..n {
            let mean_i = sums[i] / n_draws as f64;
            let var_i = (sumsq[i] - n_draws as f64 * mean_i * mean_i) / (n_draws as f64 - 1.0);
            let truth = mapped[(i, i)];
            let se = truth * (2.0 / (n_draws as f64 - 1.0)).sqrt();
            assert!(
                (var_i - truth).abs() < 3.0 * se + 1e-12,
                "variance mismatch at {i}: {var_i} vs {truth}"
            );
        }
    }
}

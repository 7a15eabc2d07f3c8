//! Variance-based global sensitivity analysis on the joint emulator.
//!
//! First-order and total-effect Sobol' indices are estimated with the
//! pick-freeze scheme recommended by Saltelli et al. (2010): two independent
//! uniform sample matrices `A`, `B` and the hybrids `AB_i` (A with column
//! `i` swapped from B), with
//!
//! ```text
//! V_i   = mean_j f(B)_j (f(AB_i)_j - f(A)_j)      (first order)
//! VT_i  = mean_j (f(A)_j - f(AB_i)_j)^2 / 2       (Jansen total effect)
//! ```
//!
//! both normalized by the pooled sample variance of `f(A), f(B)`.
//!
//! The deterministic function under analysis is the mean-GP posterior mean;
//! emulator uncertainty enters through bootstrap resampling of the training
//! data (refit per resample), not through posterior draws. The total effect
//! of the seed variable of a stochastic simulator follows from the law of
//! total variance: `S_T_eps = E(Y_d(X)) / (var(Y_m(X)) + E(Y_d(X)))`.
//! A separate, *relative* analysis applies the same estimators to the
//! positive aleatoric-variance prediction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::gp::{collapse_replicates, GpBounds};
use crate::hetgp::{fit_hetgp, FitOptions, JointFit};
use crate::ledger::{RunLedger, RunStatus};
use crate::linalg::sample_variance;
use crate::rng::{mix, mix2, stream, tags};
use crate::stats::quantile;

/// Sobol' index estimates for one deterministic surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SobolEstimate {
    pub first_order: Vec<f64>,
    pub total_effect: Vec<f64>,
    /// Total effect of the seed variable; filled by the joint pipeline,
    /// absent for single-surface analyses.
    pub seed_total_effect: Option<f64>,
    pub n_mc: usize,
    pub estimator_name: String,
    /// Set when the analyzed surface was (numerically) constant and the
    /// indices were therefore reported as zeros.
    pub constant_surface: bool,
}

/// Law-of-total-variance split of a stochastic simulator's output variance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VarianceSplit {
    /// `var(Y_m(X))` over the uniform input measure.
    pub var_mean_part: f64,
    /// `E(Y_d(X))`: expected aleatoric variance.
    pub mean_noise_part: f64,
    /// `E(Y_d) / (var(Y_m) + E(Y_d))`, clamped to `[0, 1]`.
    pub seed_total_effect: f64,
}

const EST_NAME: &str = "saltelli2010/jansen";

/// Evaluate a batch function over row blocks in parallel.
fn eval_blocked<F>(f: &F, x: &DMatrix<f64>) -> Result<DVector<f64>>
where
    F: Fn(&DMatrix<f64>) -> Result<DVector<f64>> + Sync,
{
    const BLOCK: usize = 2048;
    let n = x.nrows();
    let blocks: Vec<(usize, usize)> = (0..n.div_ceil(BLOCK))
        .map(|b| (b * BLOCK, ((b + 1) * BLOCK).min(n)))
        .collect();
    let parts: Vec<Result<DVector<f64>>> = blocks
        .par_iter()
        .map(|(lo, hi)| f(&x.rows(*lo, hi - lo).clone_owned()))
        .collect();
    let mut out = DVector::zeros(n);
    for ((lo, hi), part) in blocks.iter().zip(parts) {
        let part = part?;
        if part.len() != hi - lo {
            return Err(Error::invalid("batch function returned wrong length"));
        }
        out.rows_mut(*lo, hi - lo).copy_from(&part);
    }
    Ok(out)
}

/// Pick-freeze Sobol' estimation for an arbitrary batch function on the unit
/// hypercube. `on_constant` decides whether a constant surface is an error
/// (mean analysis) or a flagged all-zero report (dispersion analysis).
pub fn sobol_on_function<F>(
    f: &F,
    p: usize,
    n_mc: usize,
    rng_seed: u64,
    constant_is_error: bool,
) -> Result<SobolEstimate>
where
    F: Fn(&DMatrix<f64>) -> Result<DVector<f64>> + Sync,
{
    if n_mc < 1024 {
        return Err(Error::invalid(format!("n_mc must be at least 1024, got {n_mc}")));
    }
    if p == 0 {
        return Err(Error::invalid("need at least one input dimension"));
    }
    let mut rng = stream(mix(rng_seed, tags::SOBOL));
    let a = DMatrix::from_fn(n_mc, p, |_, _| rng.random::<f64>());
    let b = DMatrix::from_fn(n_mc, p, |_, _| rng.random::<f64>());

    let f_a = eval_blocked(f, &a)?;
    let f_b = eval_blocked(f, &b)?;

    let pooled: Vec<f64> = f_a.iter().chain(f_b.iter()).copied().collect();
    let var = sample_variance(&pooled);
    let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    if var <= 1e-12 * mean * mean || var < 1e-300 {
        if constant_is_error {
            return Err(Error::Degenerate(format!(
                "function variance {var:.3e} is negligible relative to mean {mean:.3e}"
            )));
        }
        return Ok(SobolEstimate {
            first_order: vec![0.0; p],
            total_effect: vec![0.0; p],
            seed_total_effect: None,
            n_mc,
            estimator_name: EST_NAME.into(),
            constant_surface: true,
        });
    }

    let mut first_order = Vec::with_capacity(p);
    let mut total_effect = Vec::with_capacity(p);
    for i in 0..p {
        let mut ab = a.clone();
        ab.set_column(i, &b.column(i));
        let f_ab = eval_blocked(f, &ab)?;
        let mut v_i = 0.0;
        let mut vt_i = 0.0;
        for j in 0..n_mc {
            v_i += f_b[j] * (f_ab[j] - f_a[j]);
            vt_i += (f_a[j] - f_ab[j]).powi(2);
        }
        v_i /= n_mc as f64;
        vt_i /= 2.0 * n_mc as f64;
        first_order.push(v_i / var);
        total_effect.push(vt_i / var);
    }

    Ok(SobolEstimate {
        first_order,
        total_effect,
        seed_total_effect: None,
        n_mc,
        estimator_name: EST_NAME.into(),
        constant_surface: false,
    })
}

/// Sobol' indices of the mean-GP posterior mean surface.
pub fn sobol_mean(fit: &JointFit, n_mc: usize, rng_seed: u64) -> Result<SobolEstimate> {
    let p = fit.data.dim();
    sobol_on_function(&|x: &DMatrix<f64>| fit.posterior_mean(x), p, n_mc, rng_seed, true)
}

/// Relative Sobol' indices of the predicted aleatoric-variance surface.
/// A constant noise surface yields flagged all-zero indices, not an error.
pub fn sobol_dispersion(fit: &JointFit, n_mc: usize, rng_seed: u64) -> Result<SobolEstimate> {
    let p = fit.data.dim();
    sobol_on_function(&|x: &DMatrix<f64>| fit.aleatoric_variance(x), p, n_mc, rng_seed, false)
}

/// Law-of-total-variance split over `n_mc` uniform draws.
pub fn total_variance_split(fit: &JointFit, n_mc: usize, rng_seed: u64) -> Result<VarianceSplit> {
    if n_mc < 1024 {
        return Err(Error::invalid(format!("n_mc must be at least 1024, got {n_mc}")));
    }
    let p = fit.data.dim();
    let mut rng = stream(mix2(rng_seed, tags::SOBOL, 0x5eed));
    let x = DMatrix::from_fn(n_mc, p, |_, _| rng.random::<f64>());
    let means = eval_blocked(&|b: &DMatrix<f64>| fit.posterior_mean(b), &x)?;
    let noises = eval_blocked(&|b: &DMatrix<f64>| fit.aleatoric_variance(b), &x)?;
    let var_mean_part = sample_variance(means.as_slice());
    let mean_noise_part = noises.mean();
    let total = var_mean_part + mean_noise_part;
    if total < 1e-300 {
        return Err(Error::Degenerate("total variance is numerically zero".into()));
    }
    Ok(VarianceSplit {
        var_mean_part,
        mean_noise_part,
        seed_total_effect: (mean_noise_part / total).clamp(0.0, 1.0),
    })
}

/// Total effect of the seed variable.
pub fn seed_total_effect(fit: &JointFit, n_mc: usize, rng_seed: u64) -> Result<f64> {
    Ok(total_variance_split(fit, n_mc, rng_seed)?.seed_total_effect)
}

/// What one bootstrap replicate resamples: individual rows, or whole unique
/// input locations with all their replicates (block bootstrap).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleUnit {
    Row,
    Location,
}

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub b: usize,
    pub n_mc: usize,
    pub rng_seed: u64,
    pub resample_unit: ResampleUnit,
    pub fit_restarts: usize,
    pub fit_options: FitOptions,
    pub collapse_tol: f64,
}

impl BootstrapConfig {
    pub fn new(b: usize, n_mc: usize, rng_seed: u64) -> Self {
        BootstrapConfig {
            b,
            n_mc,
            rng_seed,
            resample_unit: ResampleUnit::Row,
            fit_restarts: 1,
            fit_options: FitOptions::bootstrap(),
            collapse_tol: crate::gp::DEFAULT_COLLAPSE_TOL,
        }
    }
}

/// One completed bootstrap replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapReplicate {
    pub replicate: usize,
    pub first_order: Vec<f64>,
    pub total_effect: Vec<f64>,
    pub seed_total_effect: f64,
    pub dispersion_first_order: Vec<f64>,
    pub dispersion_constant: bool,
}

/// Per-index percentile summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexSummary {
    pub mean: f64,
    pub std_dev: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub b_requested: usize,
    pub b_completed: usize,
    pub n_mc: usize,
    pub replicates: Vec<BootstrapReplicate>,
    pub failures: Vec<String>,
}

impl BootstrapReport {
    fn column(&self, get: impl Fn(&BootstrapReplicate) -> f64) -> Vec<f64> {
        self.replicates.iter().map(get).collect()
    }

    pub fn summarize(values: &[f64]) -> IndexSummary {
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        let std_dev = sample_variance(values).sqrt();
        IndexSummary {
            mean,
            std_dev,
            lower: quantile(values, 0.025),
            upper: quantile(values, 0.975),
        }
    }

    pub fn first_order_summary(&self, i: usize) -> IndexSummary {
        Self::summarize(&self.column(|r| r.first_order[i]))
    }

    pub fn total_effect_summary(&self, i: usize) -> IndexSummary {
        Self::summarize(&self.column(|r| r.total_effect[i]))
    }

    pub fn seed_total_summary(&self) -> IndexSummary {
        Self::summarize(&self.column(|r| r.seed_total_effect))
    }

    pub fn dispersion_summary(&self, i: usize) -> IndexSummary {
        Self::summarize(&self.column(|r| r.dispersion_first_order[i]))
    }

    /// The influence test on the dispersion surface: zero inside the 95%
    /// interval means there is not sufficient evidence that input `i`
    /// interacts with the seed variable.
    pub fn dispersion_zero_in_interval(&self, i: usize) -> bool {
        let s = self.dispersion_summary(i);
        s.lower <= 0.0 && 0.0 <= s.upper
    }

    /// Raw replicates in long CSV form for external plotting.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("replicate,metric,value\n");
        for r in &self.replicates {
            for (i, v) in r.first_order.iter().enumerate() {
                out.push_str(&format!("{},s_{},{v}\n", r.replicate, i + 1));
            }
            for (i, v) in r.total_effect.iter().enumerate() {
                out.push_str(&format!("{},st_{},{v}\n", r.replicate, i + 1));
            }
            out.push_str(&format!("{},st_eps,{}\n", r.replicate, r.seed_total_effect));
            for (i, v) in r.dispersion_first_order.iter().enumerate() {
                out.push_str(&format!("{},d_{},{v}\n", r.replicate, i + 1));
            }
        }
        out
    }
}

/// Bootstrap uncertainty for the Sobol' pipeline: resample the ledger with
/// replacement, refit the joint model, and recompute every index, `B` times
/// with derived seeds. Individual failed replicates are recorded and
/// skipped; more than 10% failures aborts.
pub fn bootstrap_sobol(
    ledger: &RunLedger,
    domain: &Domain,
    cfg: &BootstrapConfig,
) -> Result<BootstrapReport> {
    if ledger.n_successful() == 0 {
        return Err(Error::invalid("ledger holds no successful rows"));
    }
    if cfg.b == 0 {
        return Err(Error::invalid("bootstrap replicate count must be positive"));
    }
    let rows: Vec<(&[f64], f64)> = ledger
        .rows()
        .iter()
        .filter(|r| r.status == RunStatus::Ok)
        .map(|r| (r.x.as_slice(), r.y.expect("ok row has y")))
        .collect();
    let n = rows.len();
    let p = domain.dim();

    // Location groups for the block-bootstrap variant.
    let location_groups: Vec<Vec<usize>> = {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut reps: Vec<usize> = Vec::new();
        'rows: for (i, (x, _)) in rows.iter().enumerate() {
            for (gi, &r) in reps.iter().enumerate() {
                let same = rows[r].0.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() <= 1e-12);
                if same {
                    groups[gi].push(i);
                    continue 'rows;
                }
            }
            reps.push(i);
            groups.push(vec![i]);
        }
        groups
    };

    let outcomes: Vec<std::result::Result<BootstrapReplicate, String>> = (0..cfg.b)
        .into_par_iter()
        .map(|b| {
            let s = mix2(cfg.rng_seed, tags::BOOTSTRAP, b as u64);
            let mut rng = stream(mix(s, 1));
            let chosen: Vec<usize> = match cfg.resample_unit {
                ResampleUnit::Row => (0..n).map(|_| rng.random_range(0..n)).collect(),
                ResampleUnit::Location => {
                    let m = location_groups.len();
                    let mut idx = Vec::new();
                    while idx.len() < n {
                        let g = rng.random_range(0..m);
                        idx.extend_from_slice(&location_groups[g]);
                    }
                    idx
                }
            };
            run_replicate(b, &chosen, &rows, domain, cfg, s).map_err(|e| format!("replicate {b}: {e}"))
        })
        .collect();

    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for out in outcomes {
        match out {
            Ok(r) => replicates.push(r),
            Err(e) => failures.push(e),
        }
    }
    if failures.len() * 10 > cfg.b {
        return Err(Error::Fitting(format!(
            "{} of {} bootstrap replicates failed; first failures: {}",
            failures.len(),
            cfg.b,
            failures.iter().take(3).cloned().collect::<Vec<_>>().join(" | ")
        )));
    }
    if replicates.is_empty() {
        return Err(Error::Fitting("no bootstrap replicate completed".into()));
    }
    let _ = p;
    Ok(BootstrapReport {
        b_requested: cfg.b,
        b_completed: replicates.len(),
        n_mc: cfg.n_mc,
        replicates,
        failures,
    })
}

fn run_replicate(
    b: usize,
    chosen: &[usize],
    rows: &[(&[f64], f64)],
    domain: &Domain,
    cfg: &BootstrapConfig,
    seed: u64,
) -> Result<BootstrapReplicate> {
    let p = domain.dim();
    let mut x = DMatrix::zeros(chosen.len(), p);
    let mut y = DVector::zeros(chosen.len());
    for (i, &idx) in chosen.iter().enumerate() {
        let u = domain.to_unit(rows[idx].0);
        for k in 0..p {
            x[(i, k)] = u[k];
        }
        y[i] = rows[idx].1;
    }
    let data = collapse_replicates(&x, &y, cfg.collapse_tol)?;
    let bounds = GpBounds::default_for(&data);
    let fit = fit_hetgp(&data, &bounds, cfg.fit_restarts, mix(seed, 2), domain.clone(), &cfg.fit_options)?;

    let est = sobol_mean(&fit, cfg.n_mc, mix(seed, 3))?;
    let split = total_variance_split(&fit, cfg.n_mc, mix(seed, 3))?;
    let disp = sobol_dispersion(&fit, cfg.n_mc, mix(seed, 4))?;

    Ok(BootstrapReplicate {
        replicate: b,
        first_order: est.first_order,
        total_effect: est.total_effect,
        seed_total_effect: split.seed_total_effect,
        dispersion_first_order: disp.first_order,
        dispersion_constant: disp.constant_surface,
    })
}

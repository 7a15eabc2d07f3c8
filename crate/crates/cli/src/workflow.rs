//! Command implementations: design → run → fit → validate → sa → report,
//! all driven by one config file and persisted in a fixed output-directory
//! layout:
//!
//! ```text
//! out/
//!   meta.json            config hash + provenance
//!   ledger.csv           every attempted simulator run
//!   fit.json             serialized joint emulator
//!   fit.checkpoint.json  rolling checkpoint during sequential design
//!   test_set.csv         held-out validation runs
//!   validation.json      diagnostics bundle
//!   sobol.json           index estimates with bootstrap intervals
//!   bootstrap.csv        raw bootstrap replicates
//!   figures/             SVG renderings + the CSV data behind them
//!   summary.md           human-readable digest
//! ```
//!
//! Every artifact derives deterministically from (config, master seed); a
//! hash mismatch on resume refuses to continue. One workflow instance per
//! output directory is enforced through a lock file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hetsa_core::design::{
    latin_hypercube, run_sequential, DesignRequest, SequentialFitConfig,
};
use hetsa_core::diagnostics::{default_levels, validation_report, ValidationReport};
use hetsa_core::gp::{collapse_replicates, GpBounds};
use hetsa_core::hetgp::{fit_hetgp, JointFit};
use hetsa_core::ledger::{RunLedger, RunRow, RunStatus};
use hetsa_core::rng::{mix, mix2, tags};
use hetsa_core::sa::{
    bootstrap_sobol, sobol_dispersion, sobol_mean, total_variance_split, BootstrapConfig,
    BootstrapReport, IndexSummary,
};
use hetsa_core::testbench::Simulator;

use crate::config::{resample_unit, LoadedConfig};
use crate::svg::{render_figure, Panel};

pub const SCHEMA_VERSION: u32 = 1;

pub struct OutDir {
    root: PathBuf,
    _lock: LockGuard,
}

struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl OutDir {
    /// Open (creating if needed) and lock an output directory.
    pub fn open(root: &Path, force: bool) -> Result<OutDir> {
        fs::create_dir_all(root)
            .with_context(|| format!("cannot create output directory {}", root.display()))?;
        let lock_path = root.join(".lock");
        if force && lock_path.exists() {
            fs::remove_file(&lock_path)?;
        }
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is locked by another workflow instance \
                     (remove {} or pass --force if it is stale)",
                    root.display(),
                    lock_path.display()
                );
            }
            Err(e) => return Err(e.into()),
        }
        Ok(OutDir { root: root.to_path_buf(), _lock: LockGuard { path: lock_path } })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn figures_dir(&self) -> Result<PathBuf> {
        let d = self.root.join("figures");
        fs::create_dir_all(&d)?;
        Ok(d)
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    config_hash: String,
    descriptor: String,
    input_names: Vec<String>,
}

fn write_meta(out: &OutDir, loaded: &LoadedConfig) -> Result<()> {
    let meta = Meta {
        schema_version: SCHEMA_VERSION,
        config_hash: loaded.hash.clone(),
        descriptor: loaded.config.simulator.descriptor.clone(),
        input_names: loaded.input_names.clone(),
    };
    fs::write(out.path("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn check_meta(out: &OutDir, loaded: &LoadedConfig) -> Result<()> {
    let path = out.path("meta.json");
    if !path.exists() {
        bail!("no workflow metadata at {}; run `hetsa design` first", path.display());
    }
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if meta.config_hash != loaded.hash {
        bail!(
            "config hash mismatch: output directory was created with {} but the current \
             config hashes to {}; refusing to resume (use a fresh --out or --force design)",
            meta.config_hash,
            loaded.hash
        );
    }
    Ok(())
}

fn load_ledger(out: &OutDir) -> Result<RunLedger> {
    let path = out.path("ledger.csv");
    if !path.exists() {
        bail!("no ledger at {}; run `hetsa design` first", path.display());
    }
    Ok(RunLedger::load(&path)?)
}

fn load_fit(out: &OutDir) -> Result<JointFit> {
    let path = out.path("fit.json");
    if !path.exists() {
        bail!("no fit at {}; run `hetsa fit` first", path.display());
    }
    Ok(JointFit::from_json(&fs::read_to_string(&path)?)?)
}

fn min_rows(p: usize) -> usize {
    (10 * p).max(30)
}

// ---------------------------------------------------------------------------
// design
// ---------------------------------------------------------------------------

pub fn cmd_design(loaded: &LoadedConfig, out: &OutDir, force: bool) -> Result<()> {
    let ledger_path = out.path("ledger.csv");
    if ledger_path.exists() && !force {
        let existing = RunLedger::load(&ledger_path)?;
        if !existing.is_empty() {
            bail!(
                "ledger {} already holds {} rows; pass --force to start over",
                ledger_path.display(),
                existing.len()
            );
        }
    }
    let sim = loaded.simulator.as_ref();
    let domain = sim.domain();
    let n = loaded.config.design.n_initial;
    let seed = loaded.config.run.master_seed;

    let unit = latin_hypercube(n, domain.dim(), mix(seed, tags::LHS));
    let mut ledger = RunLedger::new();
    for i in 0..n {
        let u: Vec<f64> = unit.row(i).iter().copied().collect();
        ledger.push(RunRow {
            iter: 0,
            replicate: i as u64,
            seed: hetsa_core::design::row_seed(seed, 0, i as u64),
            x: domain.from_unit(&u),
            y: None,
            status: RunStatus::Pending,
        });
    }
    ledger.save(&ledger_path)?;
    write_meta(out, loaded)?;
    log::info!("wrote {} pending design rows to {}", n, ledger_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn evaluate_pending(sim: &dyn Simulator, ledger: &mut RunLedger) -> Result<usize> {
    let pending = ledger.pending_indices();
    if pending.is_empty() {
        return Ok(0);
    }
    let jobs: Vec<(usize, Vec<f64>, u64)> = pending
        .iter()
        .map(|&i| (i, ledger.rows()[i].x.clone(), ledger.rows()[i].seed))
        .collect();
    let results: Vec<(usize, std::result::Result<f64, String>)> = jobs
        .par_iter()
        .map(|(i, x, seed)| (*i, sim.evaluate(x, *seed).map_err(|e| e.to_string())))
        .collect();
    let mut failed = 0;
    for (i, res) in results {
        match res {
            Ok(y) => ledger.complete(i, y),
            Err(msg) => {
                log::warn!("pending row {i} failed: {msg}");
                ledger.fail(i);
                failed += 1;
            }
        }
    }
    log::info!("evaluated {} pending rows ({failed} failures)", pending.len());
    Ok(pending.len())
}

/// Evaluate pending rows and run the sequential-design phase. `max_batches`
/// limits how many batches this call executes (None = run to budget); the
/// cap exists so interruption/resume behavior can be exercised directly.
pub fn cmd_run(loaded: &LoadedConfig, out: &OutDir, max_batches: Option<usize>) -> Result<()> {
    check_meta(out, loaded)?;
    let mut ledger = load_ledger(out)?;
    let sim = loaded.simulator.as_ref();
    let cfg = &loaded.config;

    if evaluate_pending(sim, &mut ledger)? > 0 {
        ledger.save(&out.path("ledger.csv"))?;
    }

    if cfg.design.budget == 0 {
        log::info!("budget is 0; initial design only");
        return Ok(());
    }

    let request = DesignRequest {
        n_initial: cfg.design.n_initial,
        batch_size: cfg.design.batch_size,
        budget: cfg.design.budget,
        candidate_pool_size: cfg.design.candidate_pool_size,
        rng_seed: cfg.run.master_seed,
    };
    let seq_cfg = SequentialFitConfig {
        restarts: cfg.fit.refit_restarts,
        options: hetsa_core::hetgp::FitOptions::refit(),
        collapse_tol: cfg.fit.collapse_tol,
    };
    let ledger_path = out.path("ledger.csv");
    let checkpoint_path = out.path("fit.checkpoint.json");
    run_sequential(
        sim,
        &mut ledger,
        &request,
        cfg.design.refit_every,
        &seq_cfg,
        max_batches,
        |l, fit, iter| {
            l.save(&ledger_path)?;
            std::fs::write(&checkpoint_path, fit.to_json()?)?;
            log::info!("batch {iter} complete ({} sequential rows)", l.n_sequential());
            Ok(())
        },
    )?;
    ledger.save(&ledger_path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

pub fn cmd_fit(loaded: &LoadedConfig, out: &OutDir) -> Result<JointFit> {
    check_meta(out, loaded)?;
    let ledger = load_ledger(out)?;
    let sim = loaded.simulator.as_ref();
    let p = sim.domain().dim();
    if ledger.n_successful() < min_rows(p) {
        bail!(
            "need at least {} successful runs to fit (have {}); run `hetsa run` first",
            min_rows(p),
            ledger.n_successful()
        );
    }
    let (x, y) = ledger.successful_xy(sim.domain())?;
    let data = collapse_replicates(&x, &y, loaded.config.fit.collapse_tol)?;
    let bounds = GpBounds::default_for(&data);
    let fit = fit_hetgp(
        &data,
        &bounds,
        loaded.config.fit.restarts,
        mix(loaded.config.run.master_seed, tags::FIT_START),
        sim.domain().clone(),
        &crate::config::main_fit_options(),
    )?;
    fs::write(out.path("fit.json"), fit.to_json()?)?;
    log::info!(
        "fitted joint emulator on {} unique locations ({} runs), loglik {:.3}",
        fit.data.n(),
        fit.data.total_n,
        fit.loglik
    );
    Ok(fit)
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ValidationDoc<'a> {
    schema_version: u32,
    config_hash: &'a str,
    test_size: usize,
    #[serde(flatten)]
    report: &'a ValidationReport,
}

/// Load or generate the held-out test set (stored in ledger CSV format).
fn test_set(loaded: &LoadedConfig, out: &OutDir) -> Result<RunLedger> {
    let path = out.path("test_set.csv");
    if path.exists() {
        return Ok(RunLedger::load(&path)?);
    }
    let sim = loaded.simulator.as_ref();
    let domain = sim.domain();
    let n = loaded.config.validate.test_size;
    let seed = loaded.config.run.master_seed;
    let unit = latin_hypercube(n, domain.dim(), mix(seed, tags::TEST_SET));
    let mut ledger = RunLedger::new();
    let jobs: Vec<(usize, Vec<f64>, u64)> = (0..n)
        .map(|i| {
            let u: Vec<f64> = unit.row(i).iter().copied().collect();
            (i, domain.from_unit(&u), mix2(seed, tags::TEST_SET, i as u64))
        })
        .collect();
    let results: Vec<std::result::Result<f64, String>> = jobs
        .par_iter()
        .map(|(_, x, s)| sim.evaluate(x, *s).map_err(|e| e.to_string()))
        .collect();
    for ((i, x, s), res) in jobs.into_iter().zip(results) {
        match res {
            Ok(y) => ledger.push(RunRow {
                iter: 0,
                replicate: i as u64,
                seed: s,
                x,
                y: Some(y),
                status: RunStatus::Ok,
            }),
            Err(msg) => {
                log::warn!("test-set run {i} failed: {msg}");
                ledger.push(RunRow {
                    iter: 0,
                    replicate: i as u64,
                    seed: s,
                    x,
                    y: None,
                    status: RunStatus::Failed,
                });
            }
        }
    }
    ledger.save(&path)?;
    Ok(ledger)
}

pub fn cmd_validate(loaded: &LoadedConfig, out: &OutDir) -> Result<ValidationReport> {
    check_meta(out, loaded)?;
    let fit = load_fit(out)?;
    let tests = test_set(loaded, out)?;
    let (xt, yt) = tests.successful_xy(loaded.simulator.domain())?;
    let report = validation_report(&fit, &xt, &yt, &default_levels())?;

    let doc = ValidationDoc {
        schema_version: SCHEMA_VERSION,
        config_hash: &loaded.hash,
        test_size: yt.len(),
        report: &report,
    };
    fs::write(out.path("validation.json"), serde_json::to_string_pretty(&doc)?)?;

    // CSV companions for plotting: standardized errors (pivot order, with
    // the original point and its inputs) and the coverage pairs.
    let mut err_csv = String::from("pivot_rank,point_index");
    for name in &loaded.input_names {
        err_csv.push_str(&format!(",{name}"));
    }
    err_csv.push_str(",error\n");
    for (rank, (err, &pt)) in report.chol_errors.iter().zip(&report.pivot).enumerate() {
        err_csv.push_str(&format!("{rank},{pt}"));
        for k in 0..xt.ncols() {
            err_csv.push_str(&format!(",{}", xt[(pt, k)]));
        }
        err_csv.push_str(&format!(",{err}\n"));
    }
    fs::write(out.path("validation_errors.csv"), err_csv)?;

    let mut cov_csv = String::from("nominal,empirical\n");
    for (nom, emp) in &report.coverage {
        cov_csv.push_str(&format!("{nom},{emp}\n"));
    }
    fs::write(out.path("validation_coverage.csv"), cov_csv)?;

    log::info!(
        "validation: rmse {:.4}, KS p {:.4}, {} flagged",
        report.rmse,
        report.ks_pvalue,
        report.n_flagged
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// sa
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct EffectEntry {
    pub input: String,
    pub point: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Serialize, Deserialize)]
pub struct DispersionEntry {
    pub input: String,
    pub point: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub lower: f64,
    pub upper: f64,
    /// Zero inside the interval: no evidence this input interacts with the
    /// seed variable.
    pub zero_in_interval: bool,
}

#[derive(Serialize, Deserialize)]
pub struct SobolDoc {
    pub schema_version: u32,
    pub config_hash: String,
    pub estimator: String,
    pub n_mc: usize,
    pub bootstrap_b: usize,
    pub bootstrap_completed: usize,
    pub first_order: Vec<EffectEntry>,
    pub total_effect: Vec<EffectEntry>,
    pub seed_total_effect: EffectEntry,
    /// Total-minus-first-order gap per input (interaction budget).
    pub interaction_budget: Vec<f64>,
    pub dispersion_relative: Vec<DispersionEntry>,
    /// Fraction of bootstrap replicates whose noise surface collapsed to a
    /// constant.
    pub dispersion_constant_fraction: f64,
}

fn entry(input: &str, point: f64, s: &IndexSummary) -> EffectEntry {
    EffectEntry {
        input: input.into(),
        point,
        mean: s.mean,
        std_dev: s.std_dev,
        lower: s.lower,
        upper: s.upper,
    }
}

pub fn cmd_sa(loaded: &LoadedConfig, out: &OutDir) -> Result<SobolDoc> {
    check_meta(out, loaded)?;
    let fit = load_fit(out)?;
    let ledger = load_ledger(out)?;
    let sim = loaded.simulator.as_ref();
    let p = sim.domain().dim();
    if ledger.n_successful() < min_rows(p) {
        bail!("need at least {} successful runs for SA (have {})", min_rows(p), ledger.n_successful());
    }
    let cfg = &loaded.config;
    let seed = cfg.run.master_seed;

    let est = sobol_mean(&fit, cfg.sa.n_mc, mix(seed, tags::SOBOL))?;
    let split = total_variance_split(&fit, cfg.sa.n_mc, mix(seed, tags::SOBOL))?;
    let disp = sobol_dispersion(&fit, cfg.sa.n_mc, mix(seed, tags::SOBOL))?;

    let mut bcfg = BootstrapConfig::new(cfg.sa.bootstrap, cfg.sa.n_mc, mix(seed, tags::BOOTSTRAP));
    bcfg.resample_unit = resample_unit(cfg)?;
    bcfg.collapse_tol = cfg.fit.collapse_tol;
    let report = bootstrap_sobol(&ledger, sim.domain(), &bcfg)?;

    let doc = build_sobol_doc(loaded, &est, split.seed_total_effect, &disp, &report);
    fs::write(out.path("sobol.json"), serde_json::to_string_pretty(&doc)?)?;
    fs::write(out.path("bootstrap.csv"), report.to_csv_string())?;
    log::info!(
        "sa: seed-variable total effect {:.4}; {} bootstrap replicates",
        split.seed_total_effect,
        report.b_completed
    );
    Ok(doc)
}

fn build_sobol_doc(
    loaded: &LoadedConfig,
    est: &hetsa_core::sa::SobolEstimate,
    seed_total_point: f64,
    disp: &hetsa_core::sa::SobolEstimate,
    report: &BootstrapReport,
) -> SobolDoc {
    let names = &loaded.input_names;
    let p = names.len();
    let first_order: Vec<EffectEntry> = (0..p)
        .map(|i| entry(&names[i], est.first_order[i], &report.first_order_summary(i)))
        .collect();
    let total_effect: Vec<EffectEntry> = (0..p)
        .map(|i| entry(&names[i], est.total_effect[i], &report.total_effect_summary(i)))
        .collect();
    let seed_total = entry("seed", seed_total_point, &report.seed_total_summary());
    let dispersion: Vec<DispersionEntry> = (0..p)
        .map(|i| {
            let s = report.dispersion_summary(i);
            DispersionEntry {
                input: names[i].clone(),
                point: disp.first_order[i],
                mean: s.mean,
                std_dev: s.std_dev,
                lower: s.lower,
                upper: s.upper,
                zero_in_interval: report.dispersion_zero_in_interval(i),
            }
        })
        .collect();
    let constant_fraction = report
        .replicates
        .iter()
        .filter(|r| r.dispersion_constant)
        .count() as f64
        / report.b_completed.max(1) as f64;
    SobolDoc {
        schema_version: SCHEMA_VERSION,
        config_hash: loaded.hash.clone(),
        estimator: est.estimator_name.clone(),
        n_mc: est.n_mc,
        bootstrap_b: report.b_requested,
        bootstrap_completed: report.b_completed,
        interaction_budget: (0..p).map(|i| est.total_effect[i] - est.first_order[i]).collect(),
        first_order,
        total_effect,
        seed_total_effect: seed_total,
        dispersion_relative: dispersion,
        dispersion_constant_fraction: constant_fraction,
    }
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(loaded: &LoadedConfig, out: &OutDir) -> Result<()> {
    check_meta(out, loaded)?;
    let ledger = load_ledger(out)?;
    let sobol_path = out.path("sobol.json");
    if !sobol_path.exists() {
        bail!("no SA artifacts at {}; run `hetsa sa` first", sobol_path.display());
    }
    let sobol: SobolDoc = serde_json::from_str(&fs::read_to_string(&sobol_path)?)?;
    let validation_path = out.path("validation.json");
    if !validation_path.exists() {
        bail!("no validation artifacts at {}; run `hetsa validate` first", validation_path.display());
    }
    let validation: serde_json::Value = serde_json::from_str(&fs::read_to_string(&validation_path)?)?;

    let figures = out.figures_dir()?;
    let sim = loaded.simulator.as_ref();
    let domain = sim.domain();
    let names = &loaded.input_names;

    fig_binned_variance(&ledger, domain, names, &figures)?;
    fig_chol_errors(out, names, &figures)?;
    fig_coverage(&validation, &figures)?;
    fig_sobol(&sobol, &figures)?;
    write_summary(loaded, out, &sobol, &validation)?;
    log::info!("report written to {} and {}", figures.display(), out.path("summary.md").display());
    Ok(())
}

/// Binned log sample variance of the response over each scaled input, with
/// interval width 0.1 (one panel per input).
fn fig_binned_variance(
    ledger: &RunLedger,
    domain: &hetsa_core::Domain,
    names: &[String],
    figures: &Path,
) -> Result<()> {
    let (x, y) = ledger.successful_xy(domain)?;
    let p = x.ncols();
    let mut csv = String::from("input,bin_lo,bin_hi,count,variance,log_variance\n");
    let mut panels = Vec::new();
    for k in 0..p {
        let mut pts = Vec::new();
        for b in 0..10 {
            let lo = b as f64 * 0.1;
            let hi = lo + 0.1;
            let vals: Vec<f64> = (0..x.nrows())
                .filter(|&i| {
                    let v = x[(i, k)];
                    v >= lo && (v < hi || (b == 9 && v <= hi + 1e-12))
                })
                .map(|i| y[i])
                .collect();
            if vals.len() >= 2 {
                let var = hetsa_core::linalg::sample_variance(&vals);
                let lv = var.max(1e-300).ln();
                pts.push((0.5 * (lo + hi), lv));
                csv.push_str(&format!("{},{lo},{hi},{},{var},{lv}\n", names[k], vals.len()));
            } else {
                csv.push_str(&format!("{},{lo},{hi},{},,\n", names[k], vals.len()));
            }
        }
        let mut panel = Panel::new(
            &format!("Binned log sample variance vs {}", names[k]),
            &format!("{} (scaled)", names[k]),
            "log variance",
        );
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        if !ys.is_empty() {
            panel.set_ranges(&[0.0, 1.0], &ys);
            panel.line(&pts, 1.5, "#1f77b4");
            panel.scatter(&pts, 3.0, "#1f77b4");
        }
        panels.push(panel);
    }
    fs::write(figures.join("binned_variance.svg"), render_figure(&panels))?;
    fs::write(figures.join("binned_variance.csv"), csv)?;
    Ok(())
}

/// Standardized errors over each input marginal with normal 95% bands.
fn fig_chol_errors(out: &OutDir, names: &[String], figures: &Path) -> Result<()> {
    let csv_path = out.path("validation_errors.csv");
    if !csv_path.exists() {
        bail!("no validation errors at {}; run `hetsa validate` first", csv_path.display());
    }
    let text = fs::read_to_string(&csv_path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<f64> =
            line.split(',').map(|s| s.parse::<f64>().unwrap_or(f64::NAN)).collect();
        rows.push(fields);
    }
    let p = names.len();
    let mut panels = Vec::new();
    for k in 0..p {
        let pts: Vec<(f64, f64)> =
            rows.iter().map(|r| (r[2 + k], r[2 + p])).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let mut panel = Panel::new(
            &format!("Standardized errors vs {}", names[k]),
            &format!("{} (natural units)", names[k]),
            "standardized error",
        );
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let mut all_y = ys.clone();
        all_y.extend_from_slice(&[-2.2, 2.2]);
        panel.set_ranges(&xs, &all_y);
        panel.scatter(&pts, 2.5, "#1f77b4");
        panel.hline(0.0, "#444", false);
        panel.hline(1.959964, "#d62728", true);
        panel.hline(-1.959964, "#d62728", true);
        panels.push(panel);
    }
    fs::write(figures.join("chol_errors.svg"), render_figure(&panels))?;
    Ok(())
}

/// Nominal vs empirical coverage with the diagonal reference.
fn fig_coverage(validation: &serde_json::Value, figures: &Path) -> Result<()> {
    let coverage = validation["coverage"]
        .as_array()
        .ok_or_else(|| anyhow!("validation.json missing coverage"))?;
    let pts: Vec<(f64, f64)> = coverage
        .iter()
        .map(|pair| {
            let a = pair[0].as_f64().unwrap_or(f64::NAN);
            let b = pair[1].as_f64().unwrap_or(f64::NAN);
            (a, b)
        })
        .collect();
    let mut panel = Panel::new("Nominal vs empirical coverage", "nominal", "empirical");
    panel.set_ranges_explicit((0.0, 1.0), (0.0, 1.0));
    panel.line(&[(0.0, 0.0), (1.0, 1.0)], 1.0, "#888");
    panel.line(&pts, 1.5, "#1f77b4");
    panel.scatter(&pts, 3.0, "#1f77b4");
    fs::write(figures.join("coverage.svg"), render_figure(&[panel]))?;
    let mut csv = String::from("nominal,empirical\n");
    for (a, b) in pts {
        csv.push_str(&format!("{a},{b}\n"));
    }
    fs::write(figures.join("coverage.csv"), csv)?;
    Ok(())
}

/// Index estimates with bootstrap intervals: first-order, total-effect, and
/// the seed-variable total effect; dispersion indices in a second panel.
fn fig_sobol(sobol: &SobolDoc, figures: &Path) -> Result<()> {
    let p = sobol.first_order.len();
    let mut csv =
        String::from("metric,input,point,mean,std_dev,lower,upper\n");

    let mut top = Panel::new("Sobol' indices (mean response)", "", "index");
    let mut ymin: f64 = -0.05;
    let mut ymax: f64 = 0.0;
    for e in sobol.first_order.iter().chain(&sobol.total_effect) {
        ymin = ymin.min(e.lower);
        ymax = ymax.max(e.upper.max(e.point));
    }
    ymax = ymax.max(sobol.seed_total_effect.upper.max(sobol.seed_total_effect.point));
    top.set_ranges_explicit((0.0, p as f64 + 2.0), (ymin - 0.05, ymax + 0.05));
    top.hline(0.0, "#888", true);
    for (i, e) in sobol.first_order.iter().enumerate() {
        let x = i as f64 + 0.85;
        top.interval(x, e.lower, e.upper, "#1f77b4");
        top.marker(x, e.point, "#1f77b4");
        top.x_tick_label(i as f64 + 1.0, &e.input);
        csv.push_str(&format!(
            "first_order,{},{},{},{},{},{}\n",
            e.input, e.point, e.mean, e.std_dev, e.lower, e.upper
        ));
    }
    for (i, e) in sobol.total_effect.iter().enumerate() {
        let x = i as f64 + 1.15;
        top.interval(x, e.lower, e.upper, "#d62728");
        top.marker(x, e.point, "#d62728");
        csv.push_str(&format!(
            "total_effect,{},{},{},{},{},{}\n",
            e.input, e.point, e.mean, e.std_dev, e.lower, e.upper
        ));
    }
    let se = &sobol.seed_total_effect;
    top.interval(p as f64 + 1.0, se.lower, se.upper, "#2ca02c");
    top.marker(p as f64 + 1.0, se.point, "#2ca02c");
    top.x_tick_label(p as f64 + 1.0, "seed");
    csv.push_str(&format!(
        "seed_total_effect,seed,{},{},{},{},{}\n",
        se.point, se.mean, se.std_dev, se.lower, se.upper
    ));

    let mut bottom =
        Panel::new("Relative dispersion indices (first order on the noise surface)", "", "index");
    let mut dmin: f64 = -0.05;
    let mut dmax: f64 = 0.1;
    for e in &sobol.dispersion_relative {
        dmin = dmin.min(e.lower);
        dmax = dmax.max(e.upper.max(e.point));
    }
    bottom.set_ranges_explicit((0.0, p as f64 + 1.0), (dmin - 0.05, dmax + 0.05));
    bottom.hline(0.0, "#888", true);
    for (i, e) in sobol.dispersion_relative.iter().enumerate() {
        let x = i as f64 + 1.0;
        let color = if e.zero_in_interval { "#7f7f7f" } else { "#9467bd" };
        bottom.interval(x, e.lower, e.upper, color);
        bottom.marker(x, e.point, color);
        bottom.x_tick_label(x, &e.input);
        csv.push_str(&format!(
            "dispersion_first_order,{},{},{},{},{},{}\n",
            e.input, e.point, e.mean, e.std_dev, e.lower, e.upper
        ));
    }

    fs::write(figures.join("sobol_indices.svg"), render_figure(&[top, bottom]))?;
    fs::write(figures.join("sobol_indices.csv"), csv)?;
    Ok(())
}

fn write_summary(
    loaded: &LoadedConfig,
    out: &OutDir,
    sobol: &SobolDoc,
    validation: &serde_json::Value,
) -> Result<()> {
    let mut md = String::new();
    md.push_str(&format!(
        "# Workflow summary\n\nsimulator: `{}`\nconfig hash: `{}`\nmaster seed: {}\n\n",
        loaded.config.simulator.descriptor, loaded.hash, loaded.config.run.master_seed
    ));

    md.push_str("## Emulator validation\n\n");
    let rmse = validation["rmse"].as_f64().unwrap_or(f64::NAN);
    let ks_p = validation["ks_pvalue"].as_f64().unwrap_or(f64::NAN);
    let flagged = validation["n_flagged"].as_u64().unwrap_or(0);
    let max_dev = validation["coverage"]
        .as_array()
        .map(|arr| {
            arr.iter()
                .map(|pair| {
                    (pair[0].as_f64().unwrap_or(0.0) - pair[1].as_f64().unwrap_or(0.0)).abs()
                })
                .fold(0.0f64, f64::max)
        })
        .unwrap_or(f64::NAN);
    md.push_str(&format!(
        "| metric | value |\n|---|---|\n| test RMSE | {rmse:.4} |\n| KS p-value (standardized errors) | {ks_p:.4} |\n| max coverage deviation | {max_dev:.4} |\n| flagged outliers (never removed) | {flagged} |\n\n",
    ));

    md.push_str("## Sobol' indices on the mean response\n\n");
    md.push_str("| input | S (point) | S mean | S sd | S 95% CI | ST (point) | ST 95% CI |\n|---|---|---|---|---|---|---|\n");
    for (s, t) in sobol.first_order.iter().zip(&sobol.total_effect) {
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | [{:.4}, {:.4}] | {:.4} | [{:.4}, {:.4}] |\n",
            s.input, s.point, s.mean, s.std_dev, s.lower, s.upper, t.point, t.lower, t.upper
        ));
    }
    let se = &sobol.seed_total_effect;
    md.push_str(&format!(
        "| seed (total effect) | — | {:.4} | {:.4} | [{:.4}, {:.4}] | {:.4} | — |\n\n",
        se.mean, se.std_dev, se.lower, se.upper, se.point
    ));

    md.push_str("## Relative dispersion analysis\n\n");
    md.push_str("| input | D (point) | 95% CI | zero in interval |\n|---|---|---|---|\n");
    for d in &sobol.dispersion_relative {
        md.push_str(&format!(
            "| {} | {:.4} | [{:.4}, {:.4}] | {} |\n",
            d.input,
            d.point,
            d.lower,
            d.upper,
            if d.zero_in_interval { "yes (no evidence of influence on noise)" } else { "no (influential)" }
        ));
    }
    md.push_str(&format!(
        "\nnoise surface collapsed to constant in {:.1}% of bootstrap replicates\n",
        100.0 * sobol.dispersion_constant_fraction
    ));
    md.push_str("\n## Figures\n\n- figures/binned_variance.svg\n- figures/chol_errors.svg\n- figures/coverage.svg\n- figures/sobol_indices.svg\n");

    fs::write(out.path("summary.md"), md)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// all
// ---------------------------------------------------------------------------

pub fn cmd_all(loaded: &LoadedConfig, out: &OutDir, force: bool) -> Result<()> {
    let ledger_path = out.path("ledger.csv");
    if force || !ledger_path.exists() {
        cmd_design(loaded, out, force)?;
    } else {
        check_meta(out, loaded)?;
    }
    cmd_run(loaded, out, None)?;
    cmd_fit(loaded, out)?;
    cmd_validate(loaded, out)?;
    cmd_sa(loaded, out)?;
    cmd_report(loaded, out)?;
    Ok(())
}

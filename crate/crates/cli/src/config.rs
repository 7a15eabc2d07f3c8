//! Workflow configuration: a single TOML document describing the simulator,
//! the design campaign, fitting, sensitivity analysis, and validation.
//!
//! The raw config bytes are content-hashed into every artifact for
//! provenance; a resumed run refuses to continue under a different config.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use hetsa_core::hetgp::FitOptions;
use hetsa_core::sa::ResampleUnit;
use hetsa_core::testbench::{simulator_by_descriptor, Simulator};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowConfig {
    pub simulator: SimulatorSection,
    #[serde(default)]
    pub domain: DomainSection,
    pub design: DesignSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub sa: SaSection,
    #[serde(default)]
    pub validate: ValidateSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSection {
    pub descriptor: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    /// Input names for reports; defaults to x_1..x_p.
    #[serde(default)]
    pub names: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub n_initial: usize,
    #[serde(default)]
    pub budget: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_refit_every")]
    pub refit_every: usize,
    #[serde(default = "default_pool_size")]
    pub candidate_pool_size: usize,
}

fn default_batch_size() -> usize {
    5
}
fn default_refit_every() -> usize {
    1
}
fn default_pool_size() -> usize {
    500
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// Multi-start count for the main fit.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Multi-start count for refits inside the sequential loop.
    #[serde(default = "default_refit_restarts")]
    pub refit_restarts: usize,
    #[serde(default = "default_collapse_tol")]
    pub collapse_tol: f64,
}

fn default_restarts() -> usize {
    3
}
fn default_refit_restarts() -> usize {
    1
}
fn default_collapse_tol() -> f64 {
    hetsa_core::gp::DEFAULT_COLLAPSE_TOL
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            restarts: default_restarts(),
            refit_restarts: default_refit_restarts(),
            collapse_tol: default_collapse_tol(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaSection {
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    /// "row" (default) or "location" (block bootstrap).
    #[serde(default = "default_resample_unit")]
    pub resample_unit: String,
}

fn default_n_mc() -> usize {
    10_000
}
fn default_bootstrap() -> usize {
    200
}
fn default_resample_unit() -> String {
    "row".into()
}

impl Default for SaSection {
    fn default() -> Self {
        SaSection {
            n_mc: default_n_mc(),
            bootstrap: default_bootstrap(),
            resample_unit: default_resample_unit(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_test_size() -> usize {
    100
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection { test_size: default_test_size() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub master_seed: u64,
}

/// A parsed config together with its provenance hash and simulator.
pub struct LoadedConfig {
    pub config: WorkflowConfig,
    pub hash: String,
    pub simulator: Box<dyn Simulator>,
    pub input_names: Vec<String>,
}

/// FNV-1a 64-bit content hash, hex-encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut config: WorkflowConfig =
        toml::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))?;
    if let Some(seed) = seed_override {
        config.run.master_seed = seed;
    }

    let simulator = simulator_by_descriptor(&config.simulator.descriptor).with_context(|| {
        format!(
            "unknown simulator '{}'; available: {}",
            config.simulator.descriptor,
            hetsa_core::testbench::list_descriptors().join(", ")
        )
    })?;
    let p = simulator.domain().dim();

    if config.design.n_initial < 10 * p {
        bail!("design.n_initial must be at least 10p = {} for this simulator", 10 * p);
    }
    if config.design.batch_size == 0 || config.design.refit_every == 0 {
        bail!("design.batch_size and design.refit_every must be positive");
    }
    if !config.domain.names.is_empty() && config.domain.names.len() != p {
        bail!("domain.names has {} entries but the simulator takes {p} inputs", config.domain.names.len());
    }
    let input_names = if config.domain.names.is_empty() {
        (1..=p).map(|k| format!("x_{k}")).collect()
    } else {
        config.domain.names.clone()
    };
    resample_unit(&config)?;

    // Hash the effective config (after any seed override) so resumes compare
    // what actually governs the run.
    let mut hashed = text.clone();
    if let Some(seed) = seed_override {
        hashed.push_str(&format!("\n# seed-override={seed}\n"));
    }
    Ok(LoadedConfig { config, hash: content_hash(hashed.as_bytes()), simulator, input_names })
}

pub fn resample_unit(config: &WorkflowConfig) -> Result<ResampleUnit> {
    match config.sa.resample_unit.as_str() {
        "row" => Ok(ResampleUnit::Row),
        "location" => Ok(ResampleUnit::Location),
        other => bail!("sa.resample_unit must be 'row' or 'location', got '{other}'"),
    }
}

/// Fit options for the main (from-scratch) fit.
pub fn main_fit_options() -> FitOptions {
    FitOptions::default()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[simulator]
descriptor = "sine1d_het"

[design]
n_initial = 20

[run]
master_seed = 7
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = std::env::temp_dir().join("hetsa-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("min.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let loaded = load_config(&path, None).unwrap();
        assert_eq!(loaded.config.design.batch_size, 5);
        assert_eq!(loaded.config.sa.n_mc, 10_000);
        assert_eq!(loaded.input_names, vec!["x_1"]);
        assert_eq!(loaded.hash.len(), 16);
    }

    #[test]
    fn seed_override_changes_hash() {
        let dir = std::env::temp_dir().join("hetsa-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("min2.toml");
        std::fs::write(&path, MINIMAL).unwrap();
        let a = load_config(&path, None).unwrap();
        let b = load_config(&path, Some(9)).unwrap();
        assert_ne!(a.hash, b.hash);
        assert_eq!(b.config.run.master_seed, 9);
    }

    #[test]
    fn rejects_undersized_initial_design() {
        let dir = std::env::temp_dir().join("hetsa-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.toml");
        std::fs::write(
            &path,
            MINIMAL.replace("n_initial = 20", "n_initial = 5"),
        )
        .unwrap();
        assert!(load_config(&path, None).is_err());
    }
}

//! Built-in stochastic simulators with known structure.
//!
//! These serve as ground-truth oracles for the emulation and sensitivity
//! pipeline: a heteroskedastic Ishigami variant, low-dimensional sine
//! benches with known noise functions, and a synthetic fracture-flow proxy
//! whose ingredients are a truncated power-law radius distribution and a
//! semi-correlated log-transmissivity relation.
//!
//! Every simulator is a pure function of `(inputs, seed)`: randomness comes
//! from a counter-style stream keyed by the seed, so evaluation is stateless
//! and safe to run concurrently. The fracture proxy is openly synthetic —
//! it is designed for *known* structure (which inputs drive the mean and
//! which drive the noise), not for physical fidelity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::rng::{mix, stream, tags};

/// A stochastic simulator: same `(x, seed)` always gives the same output.
pub trait Simulator: Send + Sync {
    /// Evaluate at a point in natural units with the given seed.
    fn evaluate(&self, x: &[f64], seed: u64) -> Result<f64>;
    fn domain(&self) -> &Domain;
    fn descriptor(&self) -> &str;
}

fn sim_stream(seed: u64) -> ChaCha8Rng {
    stream(mix(seed, tags::SIM))
}

// ---------------------------------------------------------------------------
// Ishigami
// ---------------------------------------------------------------------------

/// Textbook Ishigami function with a = 7, b = 0.1, inputs in (-pi, pi)^3.
pub fn ishigami(xi: &[f64]) -> f64 {
    let (a, b) = (7.0, 0.1);
    xi[0].sin() + a * xi[1].sin().powi(2) + b * xi[2].powi(4) * xi[0].sin()
}

/// Heteroskedastic Ishigami on the unit cube: inputs map affinely to
/// (-pi, pi)^3 and zero-mean noise with variance `0.05 + 0.3 x_1^2`
/// (x on the unit scale) is added.
pub fn het_ishigami(x: &[f64], seed: u64) -> f64 {
    let xi: Vec<f64> = x.iter().map(|v| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * v).collect();
    let base = ishigami(&xi);
    let sd = (0.05 + 0.3 * x[0] * x[0]).sqrt();
    let z: f64 = sim_stream(seed).sample(StandardNormal);
    base + sd * z
}

struct IshigamiSim {
    domain: Domain,
    noisy: bool,
    name: &'static str,
}

impl Simulator for IshigamiSim {
    fn evaluate(&self, x: &[f64], seed: u64) -> Result<f64> {
        check_dim(x, 3)?;
        if self.noisy {
            Ok(het_ishigami(x, seed))
        } else {
            let xi: Vec<f64> =
                x.iter().map(|v| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * v).collect();
            Ok(ishigami(&xi))
        }
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn descriptor(&self) -> &str {
        self.name
    }
}

// ---------------------------------------------------------------------------
// 1-D and 2-D sine benches with known noise structure
// ---------------------------------------------------------------------------

/// `f(x) = 2 sin(2 pi x)`; over the uniform input measure its variance is
/// exactly 2, which makes seed-effect ratios analytic.
pub fn sine_mean(x: f64) -> f64 {
    2.0 * (2.0 * std::f64::consts::PI * x).sin()
}

enum SineNoise {
    /// Variance `0.05 + 0.4 x^2`.
    Het,
    /// Constant variance 0.25.
    Const,
}

struct Sine1d {
    domain: Domain,
    noise: SineNoise,
    name: &'static str,
}

impl Simulator for Sine1d {
    fn evaluate(&self, x: &[f64], seed: u64) -> Result<f64> {
        check_dim(x, 1)?;
        let var = match self.noise {
            SineNoise::Het => 0.05 + 0.4 * x[0] * x[0],
            SineNoise::Const => 0.25,
        };
        let z: f64 = sim_stream(seed).sample(StandardNormal);
        Ok(sine_mean(x[0]) + var.sqrt() * z)
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn descriptor(&self) -> &str {
        self.name
    }
}

/// 2-D bench: mean depends on both inputs, noise variance `0.05 + 0.4 x_1^2`
/// depends only on the first.
struct Het2d {
    domain: Domain,
}

impl Simulator for Het2d {
    fn evaluate(&self, x: &[f64], seed: u64) -> Result<f64> {
        check_dim(x, 2)?;
        let mean = 2.0 * (2.0 * std::f64::consts::PI * x[0]).sin()
            + 2.0 * (std::f64::consts::PI * x[1]).cos();
        let var = 0.05 + 0.4 * x[0] * x[0];
        let z: f64 = sim_stream(seed).sample(StandardNormal);
        Ok(mean + var.sqrt() * z)
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn descriptor(&self) -> &str {
        "het2d"
    }
}

/// Flat mean, standard normal noise: all output variance is aleatoric.
struct PureNoise {
    domain: Domain,
}

impl Simulator for PureNoise {
    fn evaluate(&self, x: &[f64], seed: u64) -> Result<f64> {
        check_dim(x, 1)?;
        let z: f64 = sim_stream(seed).sample(StandardNormal);
        Ok(z)
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn descriptor(&self) -> &str {
        "pure_noise"
    }
}

// ---------------------------------------------------------------------------
// Toy fracture-response proxy
// ---------------------------------------------------------------------------

/// Sampled-parameter ranges of the fracture proxy (lower/upper cutoffs of
/// the radius distribution are fixed at 10 m and 50 m).
#[derive(Debug, Clone)]
pub struct ToyFractureParams {
    pub p32: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

pub const TOY_FRACTURE_R0: f64 = 10.0;
pub const TOY_FRACTURE_RU: f64 = 50.0;
pub const TOY_FRACTURE_RANGES: [(f64, f64); 5] = [
    (0.05, 0.2),   // p32
    (2.25, 3.5),   // gamma
    (1e-10, 1e-8), // alpha
    (0.1, 1.2),    // beta
    (0.5, 1.0),    // sigma
];

impl ToyFractureParams {
    pub fn from_slice(x: &[f64]) -> Result<Self> {
        check_dim(x, 5)?;
        let p = ToyFractureParams { p32: x[0], gamma: x[1], alpha: x[2], beta: x[3], sigma: x[4] };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.p32, self.gamma, self.alpha, self.beta, self.sigma];
        for (v, (lo, hi)) in vals.iter().zip(TOY_FRACTURE_RANGES) {
            // Allow small numerical slack at the edges.
            let span = hi - lo;
            if !v.is_finite() || *v < lo - 1e-9 * span || *v > hi + 1e-9 * span {
                return Err(Error::invalid(format!(
                    "fracture parameter {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Inverse-CDF draw from the truncated power-law radius distribution with
/// cutoffs `[r0, ru]` and decay exponent `gamma`:
/// `r = r0 (1 - u (1 - (ru/r0)^{-gamma}))^{-1/gamma}`.
/// Monotone increasing in `u`, with `r(0) = r0` and `r(1) = ru`.
pub fn sample_truncated_powerlaw(u: f64, r0: f64, ru: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("u must lie in [0,1], got {u}")));
    }
    if !(gamma > 0.0) || !(r0 > 0.0) || !(ru > r0) {
        return Err(Error::invalid(format!(
            "need gamma > 0 and 0 < r0 < ru, got gamma={gamma}, r0={r0}, ru={ru}"
        )));
    }
    let tail = 1.0 - (ru / r0).powf(-gamma);
    Ok(r0 * (1.0 - u * tail).powf(-1.0 / gamma))
}

/// Semi-correlated log-transmissivity:
/// `log T = log(alpha r^beta) + sigma z = log alpha + beta log r + sigma z`.
pub fn log_transmissivity(r: f64, alpha: f64, beta: f64, sigma: f64, z: f64) -> f64 {
    alpha.ln() + beta * r.ln() + sigma * z
}

/// Synthetic fracture-response proxy.
///
/// Draws `m = round(40 p32 / 0.05)` radii from the truncated power law,
/// assigns each a log-transmissivity with independent standard-normal
/// draws, and returns the negated soft-max average (log-mean-exp) of the
/// log-transmissivities plus a sigma-scaled seed-noise term:
///
/// ```text
/// y = -log( mean_i exp(log T_i) ) + 0.25 sigma z_extra
/// ```
///
/// By construction the mean response shifts by exactly `-log(10)` when
/// `alpha` grows tenfold, and the seed-to-seed variance scales with
/// `sigma^2`; the radius/density parameters touch the noise only weakly
/// through the averaging.
pub fn toy_fracture_response(params: &ToyFractureParams, seed: u64) -> f64 {
    let mut rng = sim_stream(seed);
    let m = ((40.0 * params.p32 / 0.05).round() as usize).max(1);
    let mut log_t = Vec::with_capacity(m);
    for _ in 0..m {
        let u: f64 = rng.random();
        let r = sample_truncated_powerlaw(u, TOY_FRACTURE_R0, TOY_FRACTURE_RU, params.gamma)
            .expect("parameters validated");
        let z: f64 = rng.sample(StandardNormal);
        log_t.push(log_transmissivity(r, params.alpha, params.beta, params.sigma, z));
    }
    // Stable log-mean-exp.
    let max = log_t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + (log_t.iter().map(|v| (v - max).exp()).sum::<f64>() / m as f64).ln();
    let z_extra: f64 = rng.sample(StandardNormal);
    -lse + 0.25 * params.sigma * z_extra
}

struct ToyFracture {
    domain: Domain,
}

impl Simulator for ToyFracture {
    fn evaluate(&self, x: &[f64], seed: u64) -> Result<f64> {
        let params = ToyFractureParams::from_slice(x)?;
        Ok(toy_fracture_response(&params, seed))
    }

    fn domain(&self) -> &Domain {
        &self.domain
    }

    fn descriptor(&self) -> &str {
        "toy_fracture"
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

fn check_dim(x: &[f64], p: usize) -> Result<()> {
    if x.len() != p {
        return Err(Error::invalid(format!("expected {p} inputs, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("inputs contain a non-finite value"));
    }
    Ok(())
}

/// Simulators addressable by descriptor string.
pub fn simulator_by_descriptor(name: &str) -> Option<Box<dyn Simulator>> {
    match name {
        "het_ishigami" => Some(Box::new(IshigamiSim {
            domain: Domain::unit(3),
            noisy: true,
            name: "het_ishigami",
        })),
        "ishigami" => Some(Box::new(IshigamiSim {
            domain: Domain::unit(3),
            noisy: false,
            name: "ishigami",
        })),
        "sine1d_het" => Some(Box::new(Sine1d {
            domain: Domain::unit(1),
            noise: SineNoise::Het,
            name: "sine1d_het",
        })),
        "sine1d_const" => Some(Box::new(Sine1d {
            domain: Domain::unit(1),
            noise: SineNoise::Const,
            name: "sine1d_const",
        })),
        "het2d" => Some(Box::new(Het2d { domain: Domain::unit(2) })),
        "pure_noise" => Some(Box::new(PureNoise { domain: Domain::unit(1) })),
        "toy_fracture" => {
            let lower = TOY_FRACTURE_RANGES.iter().map(|r| r.0).collect();
            let upper = TOY_FRACTURE_RANGES.iter().map(|r| r.1).collect();
            Some(Box::new(ToyFracture { domain: Domain::new(lower, upper).expect("valid ranges") }))
        }
        _ => None,
    }
}

pub fn list_descriptors() -> Vec<&'static str> {
    vec![
        "het_ishigami",
        "ishigami",
        "sine1d_het",
        "sine1d_const",
        "het2d",
        "pure_noise",
        "toy_fracture",
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mean, sample_variance};
    use approx::assert_relative_eq;

    #[test]
    fn powerlaw_cutoffs() {
        assert_relative_eq!(sample_truncated_powerlaw(0.0, 10.0, 50.0, 2.5).unwrap(), 10.0);
        assert_relative_eq!(
            sample_truncated_powerlaw(1.0, 10.0, 50.0, 2.5).unwrap(),
            50.0,
            max_relative = 1e-12
        );
        assert!(sample_truncated_powerlaw(-0.1, 10.0, 50.0, 2.5).is_err());
        assert!(sample_truncated_powerlaw(0.5, 10.0, 50.0, -1.0).is_err());
        assert!(sample_truncated_powerlaw(0.5, 50.0, 10.0, 2.5).is_err());
    }

    #[test]
    fn powerlaw_monotone_in_u() {
        let mut last = 0.0;
        for i in 0..=100 {
            let u = i as f64 / 100.0;
            let r = sample_truncated_powerlaw(u, 10.0, 50.0, 3.0).unwrap();
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn powerlaw_empirical_mean_matches_analytic() {
        // E[r] for the truncated power law, by direct integration of the
        // density: gamma r0 (1 - R^{1-gamma}) / ((gamma-1)(1 - R^{-gamma})),
        // R = ru/r0.
        let n = 1_000_000;
        let (r0, ru) = (TOY_FRACTURE_R0, TOY_FRACTURE_RU);
        let big_r = ru / r0;
        for (gi, gamma) in [2.3, 2.6, 2.9, 3.2, 3.5].iter().enumerate() {
            let analytic_mean = gamma * r0 * (1.0 - big_r.powf(1.0 - gamma))
                / ((gamma - 1.0) * (1.0 - big_r.powf(-gamma)));
            let mut rng = crate::rng::stream(900 + gi as u64);
            let mut acc = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = rng.random();
                acc.push(sample_truncated_powerlaw(u, r0, ru, *gamma).unwrap());
            }
            let emp = mean(&acc);
            let se = (sample_variance(&acc) / n as f64).sqrt();
            assert!(
                (emp - analytic_mean).abs() < 3.0 * se,
                "gamma={gamma}: empirical {emp} vs analytic {analytic_mean} (se {se})"
            );
        }
    }

    #[test]
    fn log_transmissivity_reductions() {
        assert_relative_eq!(
            log_transmissivity(25.0, 1e-9, 0.5, 0.0, 3.0),
            (1e-9f64).ln() + 0.5 * (25.0f64).ln()
        );
        assert_relative_eq!(
            log_transmissivity(1.0, 5e-10, 0.8, 0.75, 2.0),
            (5e-10f64).ln() + 0.75 * 2.0
        );
        // Hand-computed scalar case.
        let v = log_transmissivity(25.0, 1e-9, 0.5, 0.75, 1.0);
        assert_relative_eq!(v, -20.723265836946410 + 1.6094379124341003 + 0.75, epsilon = 1e-12);
    }

    #[test]
    fn simulators_are_pure_functions_of_x_and_seed() {
        for name in list_descriptors() {
            let sim = simulator_by_descriptor(name).unwrap();
            let d = sim.domain();
            let mid: Vec<f64> =
                d.lower().iter().zip(d.upper()).map(|(lo, hi)| 0.5 * (lo + hi)).collect();
            for seed in [0u64, 1, 99, 12345] {
                let a = sim.evaluate(&mid, seed).unwrap();
                let b = sim.evaluate(&mid, seed).unwrap();
                assert_eq!(a, b, "{name} not reproducible");
            }
            let a = sim.evaluate(&mid, 1).unwrap();
            assert!(a.is_finite());
        }
    }

    #[test]
    fn reproducibility_spot_checks() {
        let sim = simulator_by_descriptor("toy_fracture").unwrap();
        let mut rng = crate::rng::stream(77);
        for _ in 0..10_000 {
            let x: Vec<f64> = TOY_FRACTURE_RANGES
                .iter()
                .map(|(lo, hi)| lo + rng.random::<f64>() * (hi - lo))
                .collect();
            let seed: u64 = rng.random();
            assert_eq!(sim.evaluate(&x, seed).unwrap(), sim.evaluate(&x, seed).unwrap());
        }
    }

    #[test]
    fn het_ishigami_noise_free_part_is_textbook_ishigami() {
        // Independent evaluation of the three Ishigami terms at 100 points.
        let sim = simulator_by_descriptor("ishigami").unwrap();
        let mut rng = crate::rng::stream(13);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let xi: Vec<f64> =
                x.iter().map(|v| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * v).collect();
            let expected =
                xi[0].sin() + 7.0 * xi[1].sin() * xi[1].sin() + 0.1 * xi[2].powi(4) * xi[0].sin();
            assert_relative_eq!(sim.evaluate(&x, 0).unwrap(), expected, epsilon = 1e-12);
        }
        // Center of the cube maps to the origin where every term vanishes.
        assert_relative_eq!(sim.evaluate(&[0.5, 0.5, 0.5], 0).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fracture_noise_scales_with_sigma() {
        let base = [0.1, 2.8, 1e-9, 0.6];
        let sample_var_at = |sigma: f64| {
            let params = ToyFractureParams {
                p32: base[0],
                gamma: base[1],
                alpha: base[2],
                beta: base[3],
                sigma,
            };
            let vals: Vec<f64> =
                (0..500).map(|s| toy_fracture_response(&params, s as u64)).collect();
            sample_variance(&vals)
        };
        let lo = sample_var_at(0.5);
        let hi = sample_var_at(1.0);
        assert!(hi / lo > 1.5, "variance ratio {} too small", hi / lo);
    }

    #[test]
    fn fracture_mean_shifts_by_log10_when_alpha_scales_tenfold() {
        let mean_at = |alpha: f64| {
            let params =
                ToyFractureParams { p32: 0.12, gamma: 3.0, alpha, beta: 0.5, sigma: 0.5 };
            let vals: Vec<f64> =
                (0..1000).map(|s| toy_fracture_response(&params, s as u64)).collect();
            mean(&vals)
        };
        let shift = mean_at(1e-9) - mean_at(1e-10);
        let expected = -(10.0f64).ln();
        assert!(
            (shift - expected).abs() / expected.abs() < 0.1,
            "shift {shift} vs expected {expected}"
        );
    }
}

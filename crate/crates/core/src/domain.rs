//! Input domains and affine scaling to the unit hypercube.
//!
//! All GP and design machinery operates on inputs scaled to `[0,1]^p`;
//! simulators and the run ledger speak natural units. `Domain` carries the
//! per-dimension bounds and performs the conversion both ways.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-dimension input bounds in natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid("domain bounds must be nonempty and of equal length"));
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::invalid(format!(
                    "domain dimension {k}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Domain { lower, upper })
    }

    /// The unit hypercube in `p` dimensions (identity scaling).
    pub fn unit(p: usize) -> Self {
        Domain { lower: vec![0.0; p], upper: vec![1.0; p] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Map one point from natural units to `[0,1]^p`.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect()
    }

    /// Map one point from `[0,1]^p` to natural units.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect()
    }

    /// Row-wise `to_unit` for a matrix of points.
    pub fn to_unit_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for mut row in out.row_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.lower[k]) / (self.upper[k] - self.lower[k]);
            }
        }
        out
    }

    /// Row-wise `from_unit` for a matrix of points.
    pub fn from_unit_matrix(&self, u: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = u.clone();
        for mut row in out.row_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = self.lower[k] + *v * (self.upper[k] - self.lower[k]);
            }
        }
        out
    }

    /// True when every coordinate lies inside the bounds (tolerance for
    /// float slack at the edges).
    pub fn contains_unit(&self, u: &[f64]) -> bool {
        u.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_bounds() {
        assert!(Domain::new(vec![0.0], vec![0.0]).is_err());
        assert!(Domain::new(vec![1.0], vec![0.0]).is_err());
        assert!(Domain::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(Domain::new(vec![], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_1e12(
            lo in -1e3f64..1e3,
            width in 1e-3f64..1e6,
            u in 0.0f64..1.0,
        ) {
            let d = Domain::new(vec![lo], vec![lo + width]).unwrap();
            let x = d.from_unit(&[u]);
            let back = d.to_unit(&x);
            let scale = u.abs().max(1.0);
            prop_assert!((back[0] - u).abs() <= 1e-12 * scale);
        }
    }
}

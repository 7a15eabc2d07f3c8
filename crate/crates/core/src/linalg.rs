//! Dense linear-algebra helpers shared by the GP modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::MAX_JITTER;

/// A Cholesky factorization together with the jitter that was required.
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter_added: f64,
}

/// Factor a symmetric matrix, escalating diagonal jitter by factors of 10
/// from `base_jitter` up to [`MAX_JITTER`] on failure. The escalation is
/// bounded so a fit cannot be silently corrupted by huge regularization.
pub fn cholesky_with_jitter(mat: &DMatrix<f64>, base_jitter: f64) -> Result<JitteredCholesky> {
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Ok(JitteredCholesky { chol, jitter_added: 0.0 });
    }
    let mut jitter = base_jitter.max(1e-12);
    while jitter <= MAX_JITTER {
        let mut m = mat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            log::debug!("cholesky needed jitter {jitter:.1e}");
            return Ok(JitteredCholesky { chol, jitter_added: jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::numerical(format!(
        "cholesky failed on {}x{} matrix even with jitter {MAX_JITTER:.1e}; \
         min diagonal {:.3e}",
        mat.nrows(),
        mat.ncols(),
        mat.diagonal().min(),
    )))
}

/// Pivoted (greedy max-diagonal) Cholesky of a symmetric PSD matrix.
///
/// Returns the lower-triangular factor `L` and the pivot permutation `perm`
/// such that `A[perm, perm] = L L^T`. Ties in the diagonal are broken by the
/// lowest original index, making the pivot order deterministic.
pub fn pivoted_cholesky(mat: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let n = mat.nrows();
    if n != mat.ncols() {
        return Err(Error::invalid("pivoted cholesky needs a square matrix"));
    }
    let mut a = mat.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = DMatrix::zeros(n, n);

    for j in 0..n {
        // Greedy pivot: largest remaining diagonal, lowest index on ties.
        let mut best = j;
        let mut best_val = a[(j, j)];
        for i in (j + 1)..n {
            let v = a[(i, i)];
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        if best != j {
            a.swap_rows(j, best);
            a.swap_columns(j, best);
            l.swap_rows(j, best);
            perm.swap(j, best);
        }
        let d = a[(j, j)];
        if d <= 0.0 {
            if d > -1e-10 {
                // Numerically exhausted rank; remaining errors are zero.
                for i in j..n {
                    l[(i, j)] = 0.0;
                }
                continue;
            }
            return Err(Error::numerical(format!(
                "pivoted cholesky hit negative diagonal {d:.3e} at step {j}"
            )));
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            l[(i, j)] = a[(i, j)] / dj;
        }
        for i in (j + 1)..n {
            for k in (j + 1)..=i {
                a[(i, k)] -= l[(i, j)] * l[(k, j)];
                a[(k, i)] = a[(i, k)];
            }
        }
    }
    Ok((l, perm))
}

/// Forward-solve `L z = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    l.solve_lower_triangular(b)
        .ok_or_else(|| Error::numerical("singular triangular solve"))
}

/// Blocked inverse of a lower-triangular matrix: diagonal blocks by direct
/// back-substitution, off-diagonal blocks by matrix products, so most of the
/// work runs through the fast GEMM path.
fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    const BLOCK: usize = 64;
    let n = l.nrows();
    let mut inv = DMatrix::zeros(n, n);
    let n_blocks = n.div_ceil(BLOCK);
    let bounds: Vec<(usize, usize)> =
        (0..n_blocks).map(|b| (b * BLOCK, ((b + 1) * BLOCK).min(n))).collect();

    // Invert diagonal blocks by forward substitution.
    for &(lo, hi) in &bounds {
        let m = hi - lo;
        let block = l.view((lo, lo), (m, m));
        let mut binv = DMatrix::zeros(m, m);
        for j in 0..m {
            binv[(j, j)] = 1.0 / block[(j, j)];
            for i in (j + 1)..m {
                let mut acc = 0.0;
                for k in j..i {
                    acc += block[(i, k)] * binv[(k, j)];
                }
                binv[(i, j)] = -acc / block[(i, i)];
            }
        }
        inv.view_mut((lo, lo), (m, m)).copy_from(&binv);
    }

    // Off-diagonal blocks, one block column at a time from the right:
    // inv[I,J] = -diaginv[I] * ( sum_{J<K<I} L[I,K] inv[K,J] + L[I,J] inv[J,J] ).
    for bj in (0..n_blocks).rev() {
        let (jlo, jhi) = bounds[bj];
        for bi in (bj + 1)..n_blocks {
            let (ilo, ihi) = bounds[bi];
            let mut acc = DMatrix::zeros(ihi - ilo, jhi - jlo);
            for bk in bj..bi {
                let (klo, khi) = bounds[bk];
                acc += l.view((ilo, klo), (ihi - ilo, khi - klo))
                    * inv.view((klo, jlo), (khi - klo, jhi - jlo));
            }
            let di = inv.view((ilo, ilo), (ihi - ilo, ihi - ilo)).clone_owned();
            let block = -di * acc;
            inv.view_mut((ilo, jlo), (ihi - ilo, jhi - jlo)).copy_from(&block);
        }
    }
    inv
}

/// Inverse of a symmetric positive-definite matrix from its Cholesky factor,
/// `A^{-1} = L^{-T} L^{-1}`.
pub fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let linv = lower_triangular_inverse(chol.l_dirty());
    linv.transpose() * linv
}

/// One draw from `N(mean, L L^T)` given the lower Cholesky factor.
pub fn mvn_sample<R: Rng>(mean: &DVector<f64>, l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + l * z
}

/// Sample variance (unbiased) of a slice; 0 for fewer than two values.
pub fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::stream(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &b * b.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn jitter_escalation_recovers_near_singular() {
        // Rank-deficient matrix: needs jitter.
        let ones = DMatrix::from_element(3, 3, 1.0);
        let jc = cholesky_with_jitter(&ones, 1e-8).unwrap();
        assert!(jc.jitter_added > 0.0 && jc.jitter_added <= MAX_JITTER);
    }

    #[test]
    fn jitter_escalation_fails_on_indefinite() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 0)] = -1.0;
        assert!(cholesky_with_jitter(&m, 1e-8).is_err());
    }

    #[test]
    fn pivoted_cholesky_reconstructs() {
        let a = random_spd(8, 3);
        let (l, perm) = pivoted_cholesky(&a).unwrap();
        let rec = &l * l.transpose();
        for i in 0..8 {
            for j in 0..8 {
                assert_relative_eq!(rec[(i, j)], a[(perm[i], perm[j])], epsilon = 1e-10);
            }
        }
        // Pivot diagonal of L is non-increasing.
        for i in 1..8 {
            assert!(l[(i, i)] <= l[(i - 1, i - 1)] + 1e-12);
        }
    }

    #[test]
    fn spd_inverse_matches_reference() {
        for n in [3usize, 64, 65, 150] {
            let a = random_spd(n, n as u64);
            let chol = Cholesky::new(a.clone()).unwrap();
            let fast = spd_inverse(&chol);
            let reference = chol.inverse();
            let diff = (&fast - &reference).norm() / reference.norm();
            assert!(diff < 1e-11, "n={n}: relative diff {diff}");
            let eye = &a * &fast;
            let err = (&eye - DMatrix::identity(n, n)).norm();
            assert!(err < 1e-8, "n={n}: A*Ainv off identity by {err}");
        }
    }

    #[test]
    fn mvn_sample_moments() {
        let mut rng = crate::rng::stream(10);
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let l = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.5, 1.0]);
        let n = 20_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..n {
            acc += mvn_sample(&mean, &l, &mut rng);
        }
        acc /= n as f64;
        assert_relative_eq!(acc[0], 1.0, epsilon = 0.05);
        assert_relative_eq!(acc[1], -2.0, epsilon = 0.05);
    }
}

//! Box-constrained maximization used by the MLE routines.
//!
//! `maximize_projected_bfgs` is a projected quasi-Newton method with Armijo
//! backtracking: dense inverse-Hessian BFGS updates, feasibility enforced by
//! projection onto the box, and an identity reset whenever the quasi-Newton
//! direction stops making progress.
//!
//! The objective is supplied as two callbacks: a cheap value-only evaluation
//! used by line-search probes, and a value+gradient evaluation used once per
//! accepted step (for GP likelihoods the gradient costs several times the
//! value, so the split matters). Callbacks return `None` when evaluation
//! fails numerically; such points are treated as line-search rejections.

/// Box constraints for the optimizer.
#[derive(Debug, Clone)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        BoxBounds { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    /// Gradient with components frozen at active bounds (ascent convention).
    fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let mut pg = g.to_vec();
        for i in 0..x.len() {
            let at_lo = x[i] <= self.lo[i] && g[i] < 0.0;
            let at_hi = x[i] >= self.hi[i] && g[i] > 0.0;
            if at_lo || at_hi {
                pg[i] = 0.0;
            }
        }
        pg
    }
}

#[derive(Debug, Clone)]
pub struct AscentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// Maximize over the box starting from `x0`.
///
/// Returns `None` only when the objective cannot be evaluated at the
/// (projected) starting point.
pub fn maximize_projected_bfgs(
    x0: &[f64],
    bounds: &BoxBounds,
    max_iter: usize,
    tol: f64,
    mut eval_f: impl FnMut(&[f64]) -> Option<f64>,
    mut eval_fg: impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
) -> Option<AscentResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut evals = 1;
    let (mut f, mut g) = eval_fg(&x)?;

    // Inverse Hessian approximation (of the negated objective).
    let mut h = identity(n);
    let mut last_f = f;

    for _ in 0..max_iter {
        let pg = bounds.projected_gradient(&x, &g);
        let pg_norm = pg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if pg_norm < 1e-9 {
            break;
        }

        // Ascent direction d = H * g.
        let mut d = mat_vec(&h, &g);
        if dot(&d, &g) <= 0.0 {
            h = identity(n);
            d = g.clone();
        }

        let mut alpha = 1.0;
        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut xt = x.clone();
            for i in 0..n {
                xt[i] += alpha * d[i];
            }
            bounds.project(&mut xt);
            let step: Vec<f64> = (0..n).map(|i| xt[i] - x[i]).collect();
            let pred = dot(&g, &step);
            if step.iter().all(|s| s.abs() < 1e-14) {
                break;
            }
            evals += 1;
            if let Some(ft) = eval_f(&xt) {
                if ft >= f + ARMIJO_C1 * pred.max(0.0) && ft > f - 1e-14 {
                    accepted = Some((xt, ft, step));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((xt, ft, step)) = accepted else {
            // Try once more from steepest ascent before giving up.
            if !is_identity(&h) {
                h = identity(n);
                continue;
            }
            break;
        };

        evals += 1;
        let Some((ft2, gt)) = eval_fg(&xt) else { break };
        debug_assert!((ft2 - ft).abs() <= 1e-9 * (1.0 + ft.abs()));

        // BFGS update on the negated objective: y = -(g_new - g_old).
        let y: Vec<f64> = (0..n).map(|i| -(gt[i] - g[i])).collect();
        let sy = dot(&step, &y);
        let s_norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-12 * s_norm * y_norm {
            bfgs_update(&mut h, &step, &y, sy);
        }

        x = xt;
        f = ft2;
        g = gt;

        if (f - last_f).abs() <= tol * (1.0 + f.abs()) {
            break;
        }
        last_f = f;
    }

    Some(AscentResult { x, value: f, evals })
}

/// A few Armijo-backtracking steepest-ascent steps; used for latent-variable
/// updates where a full quasi-Newton pass per outer iteration is wasteful.
pub fn backtracking_ascent(
    x0: &[f64],
    max_steps: usize,
    initial_step: f64,
    mut eval_f: impl FnMut(&[f64]) -> Option<f64>,
    mut eval_fg: impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
) -> Option<AscentResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut evals = 1;
    let (mut f, mut g) = eval_fg(&x)?;
    let mut alpha = initial_step;

    for _ in 0..max_steps {
        let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if g_norm < 1e-11 {
            break;
        }
        let mut improved = false;
        for _ in 0..MAX_BACKTRACKS {
            let xt: Vec<f64> = (0..n).map(|i| x[i] + alpha * g[i]).collect();
            evals += 1;
            if let Some(ft) = eval_f(&xt) {
                if ft > f + ARMIJO_C1 * alpha * g_norm * g_norm {
                    evals += 1;
                    match eval_fg(&xt) {
                        Some((ft2, gt)) => {
                            x = xt;
                            f = ft2;
                            g = gt;
                            improved = true;
                            alpha *= 2.0;
                        }
                        None => return Some(AscentResult { x, value: f, evals }),
                    }
                    break;
                }
            }
            alpha *= 0.25;
            if alpha < 1e-16 {
                break;
            }
        }
        if !improved {
            break;
        }
    }
    Some(AscentResult { x, value: f, evals })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn is_identity(h: &[Vec<f64>]) -> bool {
    h.iter().enumerate().all(|(i, row)| {
        row.iter()
            .enumerate()
            .all(|(j, v)| (*v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15)
    })
}

fn mat_vec(h: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    h.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard BFGS inverse-Hessian update.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let c = (1.0 + rho * yhy) * rho;
    for i in 0..n {
        for j in 0..n {
            h[i][j] += c * s[i] * s[j] - rho * (s[i] * hy[j] + hy[i] * s[j]);
        }
    }
}

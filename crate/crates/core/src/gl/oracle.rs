//! Brute-force reference for the generalized loss.
//!
//! Minimizes the primal objective directly over the full dense plan,
//! parameterized as `P = exp(theta)` so positivity is automatic. The L1
//! column penalty is replaced by a Huber function whose width shrinks
//! from 1e-1 to 1e-10. Each stage alternates exact one-entry minimization
//! sweeps with limited-memory BFGS runs (Armijo backtracking), warm-started
//! from the previous stage. The sweeps matter: in log coordinates an entry
//! that has collapsed toward zero has a vanishing gradient and BFGS alone
//! cannot bring it back.
//! The final value is the exact (unsmoothed) objective, compared against
//! the all-zero plan on the `P -> 0` boundary.
//!
//! Shares nothing with the dual solver except the cost matrix.

use crate::error::{Error, Result};
use crate::transport::CostMatrix;

use super::GlConfig;

/// Largest `n * m` the oracle accepts.
pub const ORACLE_MAX_ENTRIES: usize = 64;

const HUBER_START: f64 = 1e-1;
const HUBER_END: f64 = 1e-10;
const STAGE_ROUNDS: usize = 50;
const STAGE_ITERS: usize = 2_000;
const STAGE_TOL: f64 = 1e-9;
const LOG_RANGE: (f64, f64) = (-800.0, 60.0);
const HISTORY: usize = 12;

/// Reference value of the generalized loss for a small instance.
pub fn brute_force_gl(a: &[f64], cost: &CostMatrix, config: &GlConfig) -> Result<f64> {
    config.validate()?;
    let (n, m) = (cost.rows(), cost.cols());
    if a.len() != n {
        return Err(Error::dims(format!("{n} density cells"), format!("{} cells", a.len())));
    }
    if n * m > ORACLE_MAX_ENTRIES {
        return Err(Error::OracleTooLarge {
            size: n * m,
            limit: ORACLE_MAX_ENTRIES,
        });
    }
    let tau = config.tau;
    let quad: f64 = a.iter().map(|v| v * v).sum::<f64>() * tau;
    if m == 0 {
        return Ok(quad);
    }

    let problem = Primal {
        a,
        cost: cost.values(),
        n,
        m,
        eps: config.epsilon,
        tau,
    };
    // Start from a uniform split of each cell's mass (floored away from 0).
    let mut theta: Vec<f64> = (0..n * m)
        .map(|k| (a[k / m].max(1e-3) / m as f64).ln())
        .collect();
    let mut width = HUBER_START;
    let mut scratch = vec![0.0; n * m];
    while width >= HUBER_END * 0.999 {
        let mut before = problem.smoothed(&theta, width, &mut scratch);
        for _ in 0..STAGE_ROUNDS {
            problem.sweep(width, &mut theta);
            lbfgs(&problem, width, &mut theta);
            let after = problem.smoothed(&theta, width, &mut scratch);
            if before - after <= STAGE_TOL * 1e-4 * after.abs().max(1.0) {
                break;
            }
            before = after;
        }
        width *= 0.1;
    }
    let interior = problem.exact(&theta);
    // Zero plan: no transport, every point entirely unmatched.
    let boundary = quad + tau * m as f64;
    Ok(interior.min(boundary))
}

struct Primal<'a> {
    a: &'a [f64],
    cost: &'a [f64],
    n: usize,
    m: usize,
    eps: f64,
    tau: f64,
}

impl Primal<'_> {
    fn marginals(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let plan: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let mut rows = vec![0.0; self.n];
        let mut cols = vec![0.0; self.m];
        for i in 0..self.n {
            for j in 0..self.m {
                let p = plan[i * self.m + j];
                rows[i] += p;
                cols[j] += p;
            }
        }
        (plan, rows, cols)
    }

    fn transport_and_entropy(&self, theta: &[f64], plan: &[f64]) -> f64 {
        plan.iter()
            .zip(theta)
            .zip(self.cost)
            .map(|((p, t), c)| c * p + self.eps * p * (t - 1.0))
            .sum()
    }

    fn row_penalty(&self, rows: &[f64]) -> f64 {
        self.tau * rows.iter().zip(self.a).map(|(r, a)| (r - a) * (r - a)).sum::<f64>()
    }

    fn exact(&self, theta: &[f64]) -> f64 {
        let (plan, rows, cols) = self.marginals(theta);
        self.transport_and_entropy(theta, &plan)
            + self.row_penalty(&rows)
            + self.tau * cols.iter().map(|c| (c - 1.0).abs()).sum::<f64>()
    }

    /// One Gauss-Seidel pass: each entry in turn is set to the exact
    /// minimizer of the smoothed objective with all other entries fixed.
    /// The one-dimensional derivative is strictly increasing in `theta`, so
    /// bisection brackets the root.
    fn sweep(&self, width: f64, theta: &mut [f64]) {
        let (plan, mut rows, mut cols) = self.marginals(theta);
        for i in 0..self.n {
            for j in 0..self.m {
                let k = i * self.m + j;
                let rest_row = rows[i] - plan[k];
                let rest_col = cols[j] - plan[k];
                let derivative = |t: f64| {
                    let p = t.exp();
                    let d = rest_col + p - 1.0;
                    self.cost[k]
                        + self.eps * t
                        + 2.0 * self.tau * (rest_row + p - self.a[i])
                        + self.tau * (d / width).clamp(-1.0, 1.0)
                };
                let (mut lo, mut hi) = LOG_RANGE;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if derivative(mid) > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if hi - lo <= 1e-13 * mid.abs().max(1.0) {
                        break;
                    }
                }
                theta[k] = 0.5 * (lo + hi);
                let p = theta[k].exp();
                rows[i] = rest_row + p;
                cols[j] = rest_col + p;
            }
        }
    }

    /// Huber-smoothed objective and its gradient in `theta`.
    fn smoothed(&self, theta: &[f64], width: f64, grad: &mut [f64]) -> f64 {
        let (plan, rows, cols) = self.marginals(theta);
        let mut value = self.transport_and_entropy(theta, &plan) + self.row_penalty(&rows);
        let mut slope = vec![0.0; self.m];
        for (j, c) in cols.iter().enumerate() {
            let d = c - 1.0;
            if d.abs() <= width {
                value += self.tau * (d * d / (2.0 * width) + width / 2.0);
                slope[j] = self.tau * d / width;
            } else {
                value += self.tau * d.abs();
                slope[j] = self.tau * d.signum();
            }
        }
        for i in 0..self.n {
            let row_slope = 2.0 * self.tau * (rows[i] - self.a[i]);
            for j in 0..self.m {
                let k = i * self.m + j;
                let d_dp = self.cost[k] + self.eps * theta[k] + row_slope + slope[j];
                grad[k] = plan[k] * d_dp;
            }
        }
        value
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn lbfgs(problem: &Primal<'_>, width: f64, x: &mut [f64]) {
    let dim = x.len();
    let mut grad = vec![0.0; dim];
    let mut fx = problem.smoothed(x, width, &mut grad);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut trial = vec![0.0; dim];
    let mut trial_grad = vec![0.0; dim];
    let mut quiet = 0;

    for _ in 0..STAGE_ITERS {
        // Two-loop recursion for the quasi-Newton direction.
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let alpha = rho * dot(s, &dir);
            dir.iter_mut().zip(y).for_each(|(d, yk)| *d -= alpha * yk);
            alphas.push((alpha, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= gamma);
        } else {
            let norm = dot(&grad, &grad).sqrt();
            if norm == 0.0 {
                return;
            }
            dir.iter_mut().for_each(|d| *d /= norm.max(1.0));
        }
        for ((s, y), (alpha, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let beta = rho * dot(y, &dir);
            dir.iter_mut().zip(s).for_each(|(d, sk)| *d += (alpha - beta) * sk);
        }
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
            if slope == 0.0 {
                return;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            trial.iter_mut().zip(x.iter()).zip(&dir).for_each(|((t, xi), d)| *t = xi + step * d);
            let ft = problem.smoothed(&trial, width, &mut trial_grad);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some(ft);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            if s_hist.is_empty() {
                return;
            }
            s_hist.clear();
            y_hist.clear();
            continue;
        };

        let s: Vec<f64> = trial.iter().zip(x.iter()).map(|(t, xi)| t - xi).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-300 {
            if s_hist.len() == HISTORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        let change = fx - f_new;
        x.copy_from_slice(&trial);
        grad.copy_from_slice(&trial_grad);
        fx = f_new;

        // Stop once the objective stalls for several consecutive steps.
        if change <= STAGE_TOL * 1e-4 * fx.abs().max(1.0) {
            quiet += 1;
            if quiet >= 5 {
                return;
            }
        } else {
            quiet = 0;
        }
    }
}

//! Generalized Loss: unbalanced entropic optimal transport between a
//! predicted density `a` (n cells) and m unit-mass annotation points,
//!
//! ```text
//! L(a) = min_{P >= 0}  <C, P> + eps * sum P (log P - 1)
//!                      + tau * |P 1_m - a|_2^2 + tau * |P^T 1_n - 1_m|_1
//! ```
//!
//! The solver runs block-coordinate ascent on the dual in the log domain.
//! With plan `P_ij = exp((f_i + g_j - C_ij) / eps)`:
//!
//! * the column step maximizes over `g_j` in `[-tau, tau]`, which is the
//!   unconstrained scaling update `-eps * log sum_i exp((f_i - C_ij) / eps)`
//!   clamped to the box (the conjugate of the L1 penalty);
//! * the row step solves `r_i = S_i * exp(f_i / eps)` together with
//!   `f_i = 2 tau (a_i - r_i)` exactly through the Wright omega function.
//!
//! After a row step the row potential equals the envelope gradient
//! `dL/da = -2 tau (P 1_m - a)`.

mod oracle;

pub use oracle::{brute_force_gl, ORACLE_MAX_ENTRIES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::CostMatrix;
use crate::types::DensityGrid;

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_MAX_ITERS: usize = 20_000;
pub const DEFAULT_TOL: f64 = 1e-7;

/// Solver settings. `eta` is carried along for callers that build the cost
/// matrix from the same configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlConfig {
    pub epsilon: f64,
    pub tau: f64,
    pub eta: f64,
    pub max_iters: usize,
    /// Relative objective change below which the solver stops.
    pub tol: f64,
}

impl Default for GlConfig {
    fn default() -> Self {
        GlConfig {
            epsilon: DEFAULT_EPSILON,
            tau: DEFAULT_TAU,
            eta: crate::transport::DEFAULT_ETA,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

impl GlConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be positive and finite, got {v}")))
            }
        };
        positive("epsilon", self.epsilon)?;
        positive("tau", self.tau)?;
        positive("eta", self.eta)?;
        positive("tol", self.tol)?;
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be at least 1"));
        }
        Ok(())
    }
}

/// Dense nonnegative transport plan, row-major `n x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    /// `P 1_m`: mass leaving each cell.
    pub fn row_sums(&self) -> Vec<f64> {
        if self.m == 0 {
            return vec![0.0; self.n];
        }
        self.values.chunks(self.m).map(|row| row.iter().sum()).collect()
    }

    /// `P^T 1_n`: mass arriving at each point.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.m];
        if self.m == 0 {
            return sums;
        }
        for row in self.values.chunks(self.m) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlResult {
    pub loss: f64,
    pub plan: TransportPlan,
    /// Gradient of the loss with respect to each cell of `a`.
    pub grad_a: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final row potential; pass it to [`solve_warm`] to restart nearby.
    pub row_potential: Vec<f64>,
}

/// Generalized loss of a predicted density against the points behind `cost`.
pub fn gl_loss(a: &DensityGrid, cost: &CostMatrix, config: &GlConfig) -> Result<GlResult> {
    solve(a.values(), cost, config)
}

/// Same as [`gl_loss`] on a raw cell vector. `a` may hold any finite values,
/// which finite-difference probes around zero-mass cells rely on.
pub fn solve(a: &[f64], cost: &CostMatrix, config: &GlConfig) -> Result<GlResult> {
    solve_from(a, cost, config, None)
}

/// [`solve`] started from a previous row potential, which saves most of the
/// sweeps when `a` changed little (e.g. between training epochs). The
/// minimizer is the same; only the stopping point moves within `tol`.
pub fn solve_warm(a: &[f64], cost: &CostMatrix, config: &GlConfig, row_potential: &[f64]) -> Result<GlResult> {
    if row_potential.len() != cost.rows() || row_potential.iter().any(|v| !v.is_finite()) {
        return Err(Error::dims(
            format!("{} finite potentials", cost.rows()),
            format!("{} values", row_potential.len()),
        ));
    }
    solve_from(a, cost, config, Some(row_potential))
}

fn solve_from(a: &[f64], cost: &CostMatrix, config: &GlConfig, warm: Option<&[f64]>) -> Result<GlResult> {
    config.validate()?;
    let (n, m) = (cost.rows(), cost.cols());
    if a.len() != n {
        return Err(Error::dims(format!("{n} density cells"), format!("{} cells", a.len())));
    }
    if let Some(i) = a.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("density value {i} is not finite")));
    }
    let tau = config.tau;

    if m == 0 {
        return Ok(GlResult {
            loss: tau * a.iter().map(|v| v * v).sum::<f64>(),
            plan: TransportPlan { n, m, values: Vec::new() },
            grad_a: a.iter().map(|v| 2.0 * tau * v).collect(),
            iterations: 0,
            converged: true,
            row_potential: a.iter().map(|v| 2.0 * tau * v).collect(),
        });
    }

    let eps = config.epsilon;
    let k = eps / (2.0 * tau);
    let log_k = k.ln();
    // -C / eps, reused by both half-steps.
    let neg_c: Vec<f64> = cost.values().iter().map(|c| -c / eps).collect();

    let mut f = warm.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut g = vec![0.0; m];
    let mut col_buf = vec![0.0; m];
    let mut col_max = vec![0.0; m];
    let mut g_scaled = vec![0.0; m];
    let mut prev = f64::INFINITY;
    let mut objective = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;

        // Column step: g_j = clamp(-eps * logsumexp_i (f_i - C_ij) / eps).
        col_max.fill(f64::NEG_INFINITY);
        for (fi, row) in f.iter().zip(neg_c.chunks_exact(m)) {
            let fi = fi / eps;
            for (mx, c) in col_max.iter_mut().zip(row) {
                *mx = mx.max(fi + c);
            }
        }
        col_buf.fill(0.0);
        for (fi, row) in f.iter().zip(neg_c.chunks_exact(m)) {
            let fi = fi / eps;
            for ((s, c), mx) in col_buf.iter_mut().zip(row).zip(&col_max) {
                *s += exp_shifted(fi + c - mx);
            }
        }
        for ((gj, mx), s) in g.iter_mut().zip(&col_max).zip(&col_buf) {
            *gj = (-eps * (mx + s.ln())).clamp(-tau, tau);
        }

        // Row step: solve r = S e^{f/eps}, f = 2 tau (a - r) in closed form.
        g_scaled.iter_mut().zip(&g).for_each(|(gs, gj)| *gs = gj / eps);
        for ((fi, ai), row) in f.iter_mut().zip(a).zip(neg_c.chunks_exact(m)) {
            let mut mx = f64::NEG_INFINITY;
            for (c, gs) in row.iter().zip(&g_scaled) {
                mx = mx.max(c + gs);
            }
            let mut s = 0.0;
            for (c, gs) in row.iter().zip(&g_scaled) {
                s += exp_shifted(c + gs - mx);
            }
            let r = k * wright_omega(mx + s.ln() - log_k + ai / k);
            *fi = 2.0 * tau * (ai - r);
        }

        objective = primal_objective(a, cost, &f, &g, config);
        if !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "objective became non-finite after {iterations} iterations"
            )));
        }
        if (prev - objective).abs() < config.tol * objective.abs().max(1.0) {
            converged = true;
            break;
        }
        prev = objective;
    }

    let plan = plan_from_potentials(&neg_c, &f, &g, eps);
    let grad_a = plan
        .row_sums()
        .iter()
        .zip(a)
        .map(|(r, ai)| -2.0 * tau * (r - ai))
        .collect();
    Ok(GlResult {
        loss: objective,
        plan,
        grad_a,
        iterations,
        converged,
        row_potential: f,
    })
}

fn plan_from_potentials(neg_c: &[f64], f: &[f64], g: &[f64], eps: f64) -> TransportPlan {
    let (n, m) = (f.len(), g.len());
    let mut values = Vec::with_capacity(n * m);
    for (i, fi) in f.iter().enumerate() {
        for (j, gj) in g.iter().enumerate() {
            values.push(((fi + gj) / eps + neg_c[i * m + j]).exp());
        }
    }
    TransportPlan { n, m, values }
}

/// Primal objective at the plan induced by the potentials. Log-plan entries
/// are taken from the potentials directly so underflowed cells stay exact.
fn primal_objective(a: &[f64], cost: &CostMatrix, f: &[f64], g: &[f64], config: &GlConfig) -> f64 {
    let (eps, tau) = (config.epsilon, config.tau);
    let m = g.len();
    let mut col_sums = vec![0.0; m];
    let mut total = 0.0;
    for (i, (fi, ai)) in f.iter().zip(a).enumerate() {
        let row_cost = cost.row(i);
        let mut row_sum = 0.0;
        for j in 0..m {
            let log_p = (fi + g[j] - row_cost[j]) / eps;
            let p = exp_shifted(log_p);
            if p > 0.0 {
                total += row_cost[j] * p + eps * p * (log_p - 1.0);
            }
            row_sum += p;
            col_sums[j] += p;
        }
        total += tau * (row_sum - ai).powi(2);
    }
    total + tau * col_sums.iter().map(|c| (c - 1.0).abs()).sum::<f64>()
}

/// `exp(x)`, flushed to zero below `e^-60`: such terms vanish next to the
/// unit-scale sums they enter, and skipping them saves most of the work on
/// large grids where far cells carry no mass.
#[inline]
fn exp_shifted(x: f64) -> f64 {
    if x < -60.0 {
        0.0
    } else {
        x.exp()
    }
}

/// Wright omega: the `w > 0` solving `w + ln w = z`.
///
/// Newton on `t = ln w` for `e^t + t - z`, which is convex and increasing;
/// starting where it is positive gives monotone convergence.
fn wright_omega(z: f64) -> f64 {
    if z < -40.0 {
        // w = e^(z - w) with w < 5e-18: the correction is below rounding.
        return z.exp();
    }
    let mut t = if z <= 1.0 { z } else { z.ln() };
    for _ in 0..64 {
        let et = t.exp();
        let step = (et + t - z) / (et + 1.0);
        t -= step;
        if step.abs() <= 4.0 * f64::EPSILON * t.abs().max(1.0) {
            break;
        }
    }
    t.exp()
}

/// Component-wise central differences of the generalized loss around `a`.
pub fn finite_diff_grad(a: &[f64], cost: &CostMatrix, config: &GlConfig, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("h", format!("must be positive, got {h}")));
    }
    let mut probe = a.to_vec();
    let mut grad = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        probe[i] = a[i] + h;
        let up = solve(&probe, cost, config)?.loss;
        probe[i] = a[i] - h;
        let down = solve(&probe, cost, config)?.loss;
        probe[i] = a[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Pixel-wise squared error `sum (a_i - y_i)^2` and its gradient.
pub fn l2_loss(a: &DensityGrid, y: &DensityGrid) -> Result<(f64, Vec<f64>)> {
    if !a.same_shape(y) {
        return Err(Error::dims(
            format!("{}x{}", y.height(), y.width()),
            format!("{}x{}", a.height(), a.width()),
        ));
    }
    Ok(l2_values(a.values(), y.values()))
}

pub(crate) fn l2_values(a: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = a
        .iter()
        .zip(y)
        .map(|(ai, yi)| {
            let d = ai - yi;
            loss += d * d;
            2.0 * d
        })
        .collect();
    (loss, grad)
}

//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! Two-loop recursion over the last `memory` curvature pairs, initial
//! Hessian scaling `(s'y / y'y) I`, and sufficient-decrease backtracking with
//! step halving. Accepted iterates never increase the objective.

use crate::error::{Result, TomoError};

/// Armijo sufficient-decrease constant.
pub const ARMIJO_C1: f64 = 1e-4;
/// Maximum number of step halvings before the search is declared failed.
pub const MAX_BACKTRACKS: usize = 30;

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Gradient norm fell to or below the tolerance.
    Converged,
    /// Iteration budget exhausted.
    MaxIters,
    /// Backtracking produced no acceptable step; the last iterate is returned.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once the gradient norm is `<=` this value.
    pub grad_tolerance: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iters: 100,
            grad_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub reason: StopReason,
    /// Objective value at the start plus after every accepted iterate.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimize a C1 objective from `start`.
///
/// `eval` returns the objective value and writes the gradient into its slice
/// argument. `visit` is called once per accepted iterate with the 1-based
/// iteration number and the new point; reconstruction snapshotting hangs off
/// this hook.
pub fn lbfgs_minimize<F, V>(
    mut eval: F,
    start: &[f64],
    opts: &LbfgsOptions,
    mut visit: V,
) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    V: FnMut(usize, &[f64], f64),
{
    if !start.iter().all(|v| v.is_finite()) {
        return Err(TomoError::Input("start point must be finite".into()));
    }
    if opts.memory < 1 || opts.max_iters < 1 {
        return Err(TomoError::Input("memory and max_iters must be >= 1".into()));
    }
    let n = start.len();
    let mut x = start.to_vec();
    let mut grad = vec![0.0; n];
    let mut fx = eval(&x, &mut grad);
    let mut trace = vec![fx];

    // curvature history, oldest first
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut new_x = vec![0.0; n];
    let mut new_grad = vec![0.0; n];

    for iter in 0..opts.max_iters {
        if norm(&grad) <= opts.grad_tolerance {
            return Ok(LbfgsResult {
                x,
                objective: fx,
                iterations: iter,
                reason: StopReason::Converged,
                trace,
            });
        }

        // two-loop recursion for the search direction
        let mut q = grad.clone();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if m > 0 {
            let last = m - 1;
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            for qj in q.iter_mut() {
                *qj *= gamma;
            }
        }
        for i in 0..m {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();

        // fall back to steepest descent if the direction is not a descent one
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            dir = grad.iter().map(|v| -v).collect();
            slope = dot(&grad, &dir);
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        // backtracking Armijo line search; before any curvature is known the
        // unit step of a raw gradient can be enormous, so scale it down
        let mut step = if m == 0 {
            (1.0 / norm(&grad)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = false;
        let mut new_f = fx;
        for _ in 0..=MAX_BACKTRACKS {
            for j in 0..n {
                new_x[j] = x[j] + step * dir[j];
            }
            new_f = eval(&new_x, &mut new_grad);
            if new_f.is_finite() && new_f <= fx + ARMIJO_C1 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Ok(LbfgsResult {
                x,
                objective: fx,
                iterations: iter,
                reason: StopReason::LineSearchFailed,
                trace,
            });
        }

        // curvature update; skip when the pair carries no usable curvature
        let s: Vec<f64> = new_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }

        x.copy_from_slice(&new_x);
        grad.copy_from_slice(&new_grad);
        fx = new_f;
        trace.push(fx);
        visit(iter + 1, &x, fx);
    }

    Ok(LbfgsResult {
        x,
        objective: fx,
        iterations: opts.max_iters,
        reason: StopReason::MaxIters,
        trace,
    })
}

#[cfg(test)]
pub(crate) mod test_oracles {
    /// Dense solve by Gaussian elimination with partial pivoting; test-local
    /// oracle, independent of any optimizer or solver in the crate.
    pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut rhs = b.to_vec();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
                .unwrap();
            m.swap(col, pivot);
            rhs.swap(col, pivot);
            let d = m[col][col];
            assert!(d.abs() > 1e-14, "singular oracle system");
            for row in col + 1..n {
                let f = m[row][col] / d;
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut acc = rhs[row];
            for k in row + 1..n {
                acc -= m[row][k] * x[k];
            }
            x[row] = acc / m[row][row];
        }
        x
    }
}

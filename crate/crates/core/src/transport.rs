//! Entropic optimal transport between object prototypes and patch tokens.
//!
//! Given a `k × n` score matrix `S` the plan is `M = diag(u) exp(S/ε) diag(v)`
//! with row sums `1/k` and column sums `1/n`, found by alternately
//! normalizing rows and columns. Iteration runs on log-scalings so that
//! `exp(S/ε)` is never formed.

use crate::error::{DoraError, Result};
use crate::tensor::{log_sum_exp, Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, tolerance: 1e-6, max_iterations: 100 }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(DoraError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tolerance > 0.0) {
            return Err(DoraError::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(DoraError::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan<T> {
    /// `k × n`, nonnegative.
    pub plan: Mat<T>,
    pub iterations: usize,
    /// Max deviation of row/column sums from `1/k`, `1/n` (computed at f64).
    pub marginal_error: f64,
    /// False when `max_iterations` ran out before reaching the tolerance.
    pub converged: bool,
    /// Marginal error after each iteration.
    pub error_history: Vec<f64>,
}

/// Largest deviation of the row sums from `1/k` and column sums from `1/n`.
pub fn marginal_error<T: Scalar>(m: &Mat<T>) -> f64 {
    let (k, n) = m.shape();
    if k == 0 || n == 0 {
        return 0.0;
    }
    let row_target = 1.0 / k as f64;
    let col_target = 1.0 / n as f64;
    let mut cols = vec![0.0f64; n];
    let mut worst = 0.0f64;
    for r in 0..k {
        let mut s = 0.0;
        for (c, v) in m.row(r).iter().enumerate() {
            let v = v.to_f64().unwrap();
            s += v;
            cols[c] += v;
        }
        worst = worst.max((s - row_target).abs());
    }
    cols.iter().fold(worst, |w, s| w.max((s - col_target).abs()))
}

fn check_scores<T: Scalar>(scores: &Mat<T>, cfg: &SinkhornConfig) -> Result<()> {
    cfg.validate()?;
    if scores.rows() == 0 || scores.cols() == 0 {
        return Err(DoraError::InvalidInput("empty score matrix".into()));
    }
    if !scores.is_finite() {
        return Err(DoraError::InvalidInput("non-finite transport scores".into()));
    }
    Ok(())
}

/// Log-domain Sinkhorn–Knopp on `exp(scores / ε)` with uniform marginals.
///
/// Returns the plan even when the tolerance is not reached; `converged` tells
/// the caller which case occurred.
pub fn sinkhorn<T: Scalar>(scores: &Mat<T>, cfg: &SinkhornConfig) -> Result<TransportPlan<T>> {
    check_scores(scores, cfg)?;
    let (k, n) = scores.shape();
    let logk: Vec<f64> = scores.as_slice().iter().map(|s| s.to_f64().unwrap() / cfg.epsilon).collect();
    let log_row = -(k as f64).ln();
    let log_col = -(n as f64).ln();
    let mut f = vec![0.0f64; k];
    let mut g = vec![0.0f64; n];
    let mut plan = vec![0.0f64; k * n];
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_iterations {
        for i in 0..k {
            let row = &logk[i * n..(i + 1) * n];
            f[i] = log_row - log_sum_exp(row.iter().zip(&g).map(|(a, b)| a + b));
        }
        for j in 0..n {
            g[j] = log_col - log_sum_exp((0..k).map(|i| logk[i * n + j] + f[i]));
        }
        for i in 0..k {
            for j in 0..n {
                plan[i * n + j] = (logk[i * n + j] + f[i] + g[j]).exp();
            }
        }
        let err = marginal_error(&Mat::from_vec(k, n, plan.clone())?);
        history.push(err);
        if err <= cfg.tolerance {
            converged = true;
            break;
        }
    }

    let marginal_error = *history.last().expect("at least one iteration");
    Ok(TransportPlan {
        plan: Mat::from_vec(k, n, plan.into_iter().map(T::lit).collect())?,
        iterations: history.len(),
        marginal_error,
        converged,
        error_history: history,
    })
}

/// Sinkhorn–Knopp on the explicit kernel `exp((scores − max)/ε)`.
///
/// Agrees with [`sinkhorn`] while the kernel does not underflow; kept as a
/// cross-check of the log-domain path.
pub fn sinkhorn_direct(scores: &Mat<f64>, cfg: &SinkhornConfig) -> Result<TransportPlan<f64>> {
    check_scores(scores, cfg)?;
    let (k, n) = scores.shape();
    let max = scores.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kernel = scores.map(|s| ((s - max) / cfg.epsilon).exp());
    let mut u = vec![1.0f64; k];
    let mut v = vec![1.0f64; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut plan = kernel.clone();
    for _ in 0..cfg.max_iterations {
        for i in 0..k {
            let s: f64 = kernel.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
            u[i] = 1.0 / (k as f64 * s);
        }
        for j in 0..n {
            let s: f64 = (0..k).map(|i| kernel.get(i, j) * u[i]).sum();
            v[j] = 1.0 / (n as f64 * s);
        }
        plan = Mat::from_fn(k, n, |i, j| u[i] * kernel.get(i, j) * v[j]);
        let err = marginal_error(&plan);
        history.push(err);
        if !err.is_finite() {
            return Err(DoraError::NumericOverflow { layer: 0, detail: "direct-domain Sinkhorn kernel".into() });
        }
        if err <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(TransportPlan {
        plan,
        iterations: history.len(),
        marginal_error: *history.last().unwrap(),
        converged,
        error_history: history,
    })
}

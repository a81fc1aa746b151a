//! Executable checkers for the update-rule algebra of error-compensated
//! steps.
//!
//! With per-site residuals `delta` and their combination
//! `Omega_t = delta_t(server) + (1/n) sum_i delta_t(worker i)`, a
//! residual-tracking step satisfies the closed-form identity
//!
//! ```text
//! x_{t+1} - x_t = -gamma * ( gbar_t + Omega_{t-1} - Omega_t )
//! ```
//!
//! where `gbar_t` is the ascending-order average of the per-worker
//! stochastic gradients. Summing over `t` telescopes the residual terms:
//!
//! ```text
//! x_0 - x_T = gamma * ( sum_t gbar_t - Omega_{T-1} )
//! ```
//!
//! Both identities are checked here against recorded trajectories, along
//! with the shifted iterate `y_t = x_t - gamma*Omega_{t-1}` (which moves by
//! plain averaged-gradient steps), the residual-magnitude bound for
//! contraction operators, and the closed-form learning-rate choice.

use crate::error::{Error, Result};
use crate::error_feedback::ResidualState;
use crate::numerics::{self, DenseVector};

/// Everything the checkers need about one recorded step.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub gamma: f64,
    pub x_before: DenseVector,
    /// Exact full gradient at `x_before`.
    pub full_grad: DenseVector,
    pub per_worker_grads: Vec<DenseVector>,
    /// `Omega_{t-1}`: combined residuals entering the step.
    pub omega_before: DenseVector,
    /// `Omega_t`: combined residuals after the step.
    pub omega_after: DenseVector,
    pub applied_update: DenseVector,
    pub server_residual_norm: f64,
    pub max_worker_residual_norm: f64,
}

/// A full recorded run (`record_analysis` mode).
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<StepTrace>,
    pub x_final: Option<DenseVector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Per-step quantities of the closed-form update rule.
#[derive(Debug, Clone)]
pub struct AnalysisSnapshot {
    /// `Omega_t` recomputed from the recorded residuals.
    pub omega: DenseVector,
    /// `xi_t = grad f(x_t) - gbar_t`: the averaged sampling noise.
    pub xi: DenseVector,
    /// `y_t = x_t - gamma * Omega_{t-1}`.
    pub y: DenseVector,
    pub grad_norm_sq: f64,
}

/// Combine residual states: `Omega = delta_server + (1/n) sum_i delta_i`,
/// workers accumulated in ascending index order.
pub fn compute_omega(
    worker_residuals: &[ResidualState],
    server_residual: &ResidualState,
) -> Result<DenseVector> {
    let dim = server_residual.delta().dim();
    let mut acc = vec![0.0; dim];
    for r in worker_residuals {
        if r.delta().dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "compute_omega",
                expected: dim,
                got: r.delta().dim(),
            });
        }
        for (a, &d) in acc.iter_mut().zip(r.delta().values()) {
            *a += d;
        }
    }
    let inv_n = 1.0 / worker_residuals.len().max(1) as f64;
    for (a, &s) in acc.iter_mut().zip(server_residual.delta().values()) {
        *a = *a * inv_n + s;
    }
    DenseVector::from_values(acc)
}

/// The closed-form step: `-gamma * ( avg(grads) + omega_prev - omega_now )`.
/// Averages the gradients itself (ascending order), independent of the
/// stepper's internals.
pub fn closed_form_update(
    grads: &[DenseVector],
    omega_prev: &DenseVector,
    omega_now: &DenseVector,
    gamma: f64,
) -> Result<DenseVector> {
    let first = grads.first().ok_or(Error::EmptyMetrics)?;
    let dim = first.dim();
    if omega_prev.dim() != dim || omega_now.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: "closed_form_update",
            expected: dim,
            got: omega_prev.dim().min(omega_now.dim()),
        });
    }
    let mut acc = vec![0.0; dim];
    for g in grads {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "closed_form_update",
                expected: dim,
                got: g.dim(),
            });
        }
        for (a, &gj) in acc.iter_mut().zip(g.values()) {
            *a += gj;
        }
    }
    let inv_n = 1.0 / grads.len() as f64;
    for (j, a) in acc.iter_mut().enumerate() {
        *a = -gamma * (*a * inv_n + omega_prev.get(j) - omega_now.get(j));
    }
    DenseVector::from_values(acc)
}

/// Max over steps of `| applied_update - closed_form_update |`.
pub fn eq_update_max_deviation(trajectory: &Trajectory) -> Result<f64> {
    let mut max_dev = 0.0f64;
    for step in &trajectory.steps {
        let oracle = closed_form_update(
            &step.per_worker_grads,
            &step.omega_before,
            &step.omega_after,
            step.gamma,
        )?;
        let dev = numerics::l2_dist(&step.applied_update, &oracle)?;
        max_dev = max_dev.max(dev);
    }
    Ok(max_dev)
}

/// Max over steps of `| (y_{t+1} - y_t) + gamma * gbar_t |` for the shifted
/// iterate `y_t = x_t - gamma * Omega_{t-1}`.
pub fn aux_sequence_max_deviation(trajectory: &Trajectory) -> Result<f64> {
    let mut max_dev = 0.0f64;
    for (t, step) in trajectory.steps.iter().enumerate() {
        let gamma = step.gamma;
        let y_t = numerics::axpy(-gamma, &step.omega_before, &step.x_before)?;
        let x_next = match trajectory.steps.get(t + 1) {
            Some(next) => next.x_before.clone(),
            None => trajectory
                .x_final
                .clone()
                .ok_or_else(|| Error::IncompleteTrajectory("missing final iterate".into()))?,
        };
        let y_next = numerics::axpy(-gamma, &step.omega_after, &x_next)?;
        let gbar = average(&step.per_worker_grads)?;
        // y_{t+1} - y_t should equal -gamma * gbar_t
        let moved = numerics::sub(&y_next, &y_t)?;
        let expected = numerics::scale(-gamma, &gbar)?;
        max_dev = max_dev.max(numerics::l2_dist(&moved, &expected)?);
    }
    Ok(max_dev)
}

fn average(vectors: &[DenseVector]) -> Result<DenseVector> {
    let first = vectors.first().ok_or(Error::EmptyMetrics)?;
    let mut acc = vec![0.0; first.dim()];
    for v in vectors {
        for (a, &vj) in acc.iter_mut().zip(v.values()) {
            *a += vj;
        }
    }
    let inv = 1.0 / vectors.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    DenseVector::from_values(acc)
}

/// Relative conservation residual of the telescoped run:
///
/// `| (x_0 - x_T) - gamma*(sum_t gbar_t - Omega_{T-1}) | / (1 + |gamma * sum_t gbar_t|)`
///
/// Requires a constant learning rate (the telescoped form assumes one).
/// An empty trajectory conserves trivially (returns 0).
pub fn telescoping_check(trajectory: &Trajectory) -> Result<f64> {
    if trajectory.steps.is_empty() {
        return Ok(0.0);
    }
    let gamma = trajectory.steps[0].gamma;
    if trajectory.steps.iter().any(|s| s.gamma != gamma) {
        return Err(Error::IncompleteTrajectory(
            "telescoping check requires a constant learning rate".into(),
        ));
    }
    let x0 = &trajectory.steps[0].x_before;
    let x_final = trajectory
        .x_final
        .as_ref()
        .ok_or_else(|| Error::IncompleteTrajectory("missing final iterate".into()))?;

    let dim = x0.dim();
    let mut grad_sum = vec![0.0; dim];
    for step in &trajectory.steps {
        let gbar = average(&step.per_worker_grads)?;
        for (a, &g) in grad_sum.iter_mut().zip(gbar.values()) {
            *a += g;
        }
    }
    let grad_sum = DenseVector::from_values(grad_sum)?;
    let omega_last = &trajectory.steps.last().unwrap().omega_after;

    let expected = numerics::scale(gamma, &numerics::sub(&grad_sum, omega_last)?)?;
    let moved = numerics::sub(x0, x_final)?;
    let resid = numerics::l2_dist(&moved, &expected)?;
    let scale = 1.0 + gamma * numerics::l2_norm(&grad_sum);
    Ok(resid / scale)
}

/// The closed-form learning rate
/// `gamma = 1 / (4L + sigma*sqrt(T/n) + eps^(2/3) * T^(1/3))`.
///
/// Always satisfies `gamma * L <= 1/4 < 1`.
pub fn lr_corollary(
    smoothness: f64,
    sigma: f64,
    epsilon: f64,
    iterations: usize,
    workers: usize,
) -> Result<f64> {
    if !(smoothness.is_finite() && smoothness > 0.0) {
        return Err(Error::invalid_config(
            "smoothness",
            "must be positive and finite",
        ));
    }
    if iterations < 1 {
        return Err(Error::invalid_config("iterations", "must be >= 1"));
    }
    if workers < 1 {
        return Err(Error::invalid_config("workers", "must be >= 1"));
    }
    if sigma < 0.0 || epsilon < 0.0 {
        return Err(Error::invalid_config("sigma/epsilon", "must be >= 0"));
    }
    let t = iterations as f64;
    let n = workers as f64;
    Ok(1.0 / (4.0 * smoothness + sigma * (t / n).sqrt() + epsilon.powf(2.0 / 3.0) * t.cbrt()))
}

/// `(1/T) sum_t |grad f(x_t)|^2`: the convergence measure reported for
/// every run.
pub fn theorem_metric(grad_norm_sqs: &[f64]) -> Result<f64> {
    if grad_norm_sqs.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    Ok(grad_norm_sqs.iter().sum::<f64>() / grad_norm_sqs.len() as f64)
}

/// Constants of the residual-magnitude bound.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub smoothness: f64,
    pub noise_sigma: f64,
    /// Calibrated residual level: twice the largest per-site residual norm
    /// seen along the run (each site is assumed to stay below eps/2).
    pub residual_eps: f64,
    /// Estimated gradient-norm bound: max over steps of `|gbar_t|`.
    pub grad_bound: f64,
    pub alpha_sq: f64,
    pub rho: f64,
}

/// Verdict of [`residual_bound_check`].
#[derive(Debug, Clone)]
pub struct ResidualBoundReport {
    pub params: BoundParams,
    /// Max over steps of the squared per-site residual norm.
    pub max_delta_sq: f64,
    /// `(G^2 + sigma^2/n) / (1 - (1+rho) alpha^2)`, minimized over the rho
    /// grid; infinite when vacuous.
    pub bound: f64,
    pub satisfied: bool,
    /// No grid rho keeps `(1+rho) alpha^2 < 1`.
    pub vacuous: bool,
    /// OLS slope of the per-step residual norm over the final half.
    pub trend_slope: f64,
    pub trend_slope_se: f64,
    /// Slope <= 0 within noise (3 standard errors).
    pub trend_ok: bool,
    /// Max over steps of `|Omega_t|^2`, checked against `2 * eps^2`.
    pub max_omega_sq: f64,
    pub omega_bound_ok: bool,
}

const RHO_GRID: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 10.0];

/// Check the geometric-series residual bound for a contraction operator:
/// `max_t |delta_t|^2 <= (G^2 + sigma^2/n) / (1 - (1+rho) alpha^2)` at the
/// best grid rho, plus a no-upward-trend fit over the final half of the run.
pub fn residual_bound_check(
    trajectory: &Trajectory,
    alpha_sq: f64,
    noise_sigma: f64,
    n_workers: usize,
    smoothness: f64,
) -> Result<ResidualBoundReport> {
    if trajectory.steps.is_empty() {
        return Err(Error::IncompleteTrajectory("no recorded steps".into()));
    }
    let mut grad_bound = 0.0f64;
    let mut max_site_norm = 0.0f64;
    let mut max_omega_sq = 0.0f64;
    let mut site_series = Vec::with_capacity(trajectory.steps.len());
    for step in &trajectory.steps {
        let gbar = average(&step.per_worker_grads)?;
        grad_bound = grad_bound.max(numerics::l2_norm(&gbar));
        let site = step.server_residual_norm.max(step.max_worker_residual_norm);
        max_site_norm = max_site_norm.max(site);
        site_series.push(site);
        max_omega_sq = max_omega_sq.max(numerics::l2_norm_sq(&step.omega_after));
    }

    let numerator = grad_bound * grad_bound + noise_sigma * noise_sigma / n_workers as f64;
    let mut bound = f64::INFINITY;
    let mut best_rho = f64::NAN;
    for rho in RHO_GRID {
        if (1.0 + rho) * alpha_sq < 1.0 {
            let b = numerator / (1.0 - (1.0 + rho) * alpha_sq);
            if b < bound {
                bound = b;
                best_rho = rho;
            }
        }
    }
    let vacuous = bound.is_infinite();
    let max_delta_sq = max_site_norm * max_site_norm;

    let tail = &site_series[site_series.len() / 2..];
    let (trend_slope, trend_slope_se) = ols_slope(tail);
    let trend_ok = trend_slope <= 3.0 * trend_slope_se;

    let residual_eps = 2.0 * max_site_norm;
    let omega_bound_ok = max_omega_sq <= 2.0 * residual_eps * residual_eps + 1e-15;

    Ok(ResidualBoundReport {
        params: BoundParams {
            smoothness,
            noise_sigma,
            residual_eps,
            grad_bound,
            alpha_sq,
            rho: best_rho,
        },
        max_delta_sq,
        bound,
        satisfied: vacuous || max_delta_sq <= bound,
        vacuous,
        trend_slope,
        trend_slope_se,
        trend_ok,
        max_omega_sq,
        omega_bound_ok,
    })
}

/// Least-squares slope and its standard error for an evenly indexed series.
fn ols_slope(series: &[f64]) -> (f64, f64) {
    let m = series.len();
    if m < 3 {
        return (0.0, 0.0);
    }
    let t_mean = (m as f64 - 1.0) / 2.0;
    let z_mean = series.iter().sum::<f64>() / m as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, &z) in series.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxx += dt * dt;
        sxy += dt * (z - z_mean);
    }
    let slope = sxy / sxx;
    let intercept = z_mean - slope * t_mean;
    let mut sse = 0.0;
    for (t, &z) in series.iter().enumerate() {
        let e = z - (intercept + slope * t as f64);
        sse += e * e;
    }
    let var = sse / (m as f64 - 2.0);
    (slope, (var / sxx).sqrt())
}

/// Single-run evaluation of the descent inequality
/// `(gamma/2 - L gamma^2/2) * sum_t |grad f(x_t)|^2 <=
///  (f(x_0) - f*) + L gamma^2 sigma^2 T / (2n) + 4 L^2 eps^2 gamma^3 T`.
///
/// The inequality holds in expectation; a single realization is reported for
/// orientation, not gated on.
#[derive(Debug, Clone)]
pub struct DescentBoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

pub fn descent_inequality(
    grad_norm_sqs: &[f64],
    gamma: f64,
    smoothness: f64,
    noise_sigma: f64,
    residual_eps: f64,
    f0_minus_fstar: f64,
    n_workers: usize,
) -> Result<DescentBoundReport> {
    if grad_norm_sqs.is_empty() {
        return Err(Error::EmptyMetrics);
    }
    let t = grad_norm_sqs.len() as f64;
    let l = smoothness;
    let lhs = (gamma / 2.0 - l * gamma * gamma / 2.0) * grad_norm_sqs.iter().sum::<f64>();
    let rhs = f0_minus_fstar
        + l * gamma * gamma * noise_sigma * noise_sigma * t / (2.0 * n_workers as f64)
        + 4.0 * l * l * residual_eps * residual_eps * gamma.powi(3) * t;
    Ok(DescentBoundReport {
        lhs,
        rhs,
        satisfied: lhs <= rhs,
    })
}

/// Assemble the per-step snapshot quantities for step `t`.
pub fn snapshot_at(trajectory: &Trajectory, t: usize) -> Result<AnalysisSnapshot> {
    let step = trajectory
        .steps
        .get(t)
        .ok_or_else(|| Error::IncompleteTrajectory(format!("no step {t}")))?;
    let gbar = average(&step.per_worker_grads)?;
    let xi = numerics::sub(&step.full_grad, &gbar)?;
    let y = numerics::axpy(-step.gamma, &step.omega_before, &step.x_before)?;
    Ok(AnalysisSnapshot {
        omega: step.omega_after.clone(),
        xi,
        y,
        grad_norm_sq: numerics::l2_norm_sq(&step.full_grad),
    })
}

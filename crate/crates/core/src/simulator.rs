//! Experiment orchestration: run `T` iterations of a configured algorithm,
//! record per-iteration metrics, and apply the bandwidth/time cost model.
//!
//! Runs are deterministic functions of their [`TrainConfig`]: the same config
//! produces byte-identical metrics on every platform and thread count, and
//! the worker-parallel evaluation mode matches the sequential one exactly.
//!
//! Metric row `t` records the objective and gradient at the pre-step iterate
//! `x_t` (so the mean of `grad_norm_sq` over rows is exactly the reported
//! convergence metric `(1/T) sum_{t<T} |grad f(x_t)|^2`), together with the
//! bits moved by step `t` and the residual norms left behind by it.

use serde::{Deserialize, Serialize};

use crate::algorithms::{step, Algorithm, ClusterState, StepConfig, StepReport};
use crate::analysis::{self, Trajectory};
use crate::compression::CompressorSpec;
use crate::error::{Error, Result};
use crate::numerics::l2_norm_sq;
use crate::problems::{Problem, ProblemSpec};

fn default_bandwidth() -> f64 {
    1e9
}
fn default_compute() -> f64 {
    0.05
}
fn default_wire_bits() -> u32 {
    32
}
fn default_decay_factor() -> f64 {
    10.0
}

/// Simulated communication/computation cost parameters. The server link is
/// the single shared bottleneck: all `n` uplink and `n` downlink messages
/// serialize through it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Parameter-server link bandwidth, bits per second.
    #[serde(default = "default_bandwidth")]
    pub server_bandwidth: f64,
    /// Gradient computation time per iteration, seconds.
    #[serde(default = "default_compute")]
    pub per_worker_compute: f64,
    /// Bits per real on the simulated wire for uncompressed payloads (32 or
    /// 64).
    #[serde(default = "default_wire_bits")]
    pub wire_bits_per_real: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            server_bandwidth: default_bandwidth(),
            per_worker_compute: default_compute(),
            wire_bits_per_real: default_wire_bits(),
        }
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSchedule {
    /// Fixed rate.
    Constant(f64),
    /// `1 / (4L + sigma*sqrt(T/n) + eps^(2/3) T^(1/3))` from the run's own
    /// `T` and worker count.
    Corollary {
        smoothness: f64,
        sigma: f64,
        epsilon: f64,
    },
    /// `initial / factor^(floor(t / every))`.
    StepDecay {
        initial: f64,
        #[serde(default = "default_decay_factor")]
        factor: f64,
        every: usize,
    },
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    #[serde(default = "identity_spec")]
    pub worker_compressor: CompressorSpec,
    #[serde(default = "identity_spec")]
    pub server_compressor: CompressorSpec,
    pub workers: usize,
    pub iterations: usize,
    pub gamma: GammaSchedule,
    pub seed: u64,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub cost_model: CostModel,
    /// Keep the per-step trajectory needed by the analysis checkers
    /// (memory-heavy for long runs).
    #[serde(default)]
    pub record_analysis: bool,
    /// Evaluate workers with a parallel iterator; results are bit-identical
    /// to the sequential path.
    #[serde(default)]
    pub parallel_workers: bool,
}

fn identity_spec() -> CompressorSpec {
    CompressorSpec::Identity
}

impl TrainConfig {
    /// Validate every field; returns the first error with its field path.
    pub fn validate(&self) -> Result<()> {
        if self.workers < 1 {
            return Err(Error::invalid_config("workers", "must be >= 1"));
        }
        if self.iterations < 1 {
            return Err(Error::invalid_config("iterations", "must be >= 1"));
        }
        self.problem.validate("problem")?;
        self.worker_compressor
            .validate()
            .map_err(|e| Error::invalid_config("worker_compressor", e.to_string()))?;
        self.server_compressor
            .validate()
            .map_err(|e| Error::invalid_config("server_compressor", e.to_string()))?;
        match self.algorithm {
            Algorithm::Qsgd
                if !matches!(self.worker_compressor, CompressorSpec::Ternary { .. }) =>
            {
                return Err(Error::invalid_config(
                    "worker_compressor",
                    "qsgd uses ternary quantization; set kind = \"ternary\"",
                ));
            }
            Algorithm::TopkSgd
                if !matches!(self.worker_compressor, CompressorSpec::TopK { .. }) =>
            {
                return Err(Error::invalid_config(
                    "worker_compressor",
                    "topk_sgd uses top-k sparsification; set kind = \"top_k\"",
                ));
            }
            _ => {}
        }
        if !(self.cost_model.server_bandwidth.is_finite() && self.cost_model.server_bandwidth > 0.0)
        {
            return Err(Error::invalid_config(
                "cost_model.server_bandwidth",
                "must be positive and finite",
            ));
        }
        if !(self.cost_model.per_worker_compute.is_finite()
            && self.cost_model.per_worker_compute >= 0.0)
        {
            return Err(Error::invalid_config(
                "cost_model.per_worker_compute",
                "must be >= 0",
            ));
        }
        if !matches!(self.cost_model.wire_bits_per_real, 32 | 64) {
            return Err(Error::invalid_config(
                "cost_model.wire_bits_per_real",
                "must be 32 or 64",
            ));
        }
        let gamma0 = resolve_gamma(self)?;
        if !(gamma0.is_finite() && gamma0 >= 0.0) {
            return Err(Error::invalid_config(
                "gamma",
                "must resolve to a finite rate >= 0",
            ));
        }
        Ok(())
    }

    /// Learning rate applied at iteration `t`.
    pub fn gamma_at(&self, t: usize) -> Result<f64> {
        match &self.gamma {
            GammaSchedule::Constant(g) => Ok(*g),
            GammaSchedule::Corollary {
                smoothness,
                sigma,
                epsilon,
            } => {
                analysis::lr_corollary(*smoothness, *sigma, *epsilon, self.iterations, self.workers)
            }
            GammaSchedule::StepDecay {
                initial,
                factor,
                every,
            } => {
                if *every == 0 || !(factor.is_finite() && *factor > 0.0) {
                    return Err(Error::invalid_config(
                        "gamma.every",
                        "step decay needs every >= 1 and factor > 0",
                    ));
                }
                Ok(initial / factor.powi((t / every) as i32))
            }
        }
    }
}

/// The schedule's base rate (iteration 0): a constant, the closed-form
/// choice, or the undecayed initial rate.
pub fn resolve_gamma(cfg: &TrainConfig) -> Result<f64> {
    cfg.gamma_at(0)
}

/// One per-iteration record. Loss and gradient refer to the pre-step
/// iterate; bits, time, and residual norms refer to the step taken from it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub bits_up: u64,
    pub bits_down: u64,
    /// Cumulative simulated seconds; nondecreasing.
    pub sim_time_s: f64,
    pub server_delta_norm: f64,
    pub max_worker_delta_norm: f64,
}

/// Simulated wall time of one iteration: compute plus every message through
/// the shared server link.
pub fn iteration_time(report: &StepReport, cost: &CostModel) -> f64 {
    cost.per_worker_compute + (report.bits_up + report.bits_down) as f64 / cost.server_bandwidth
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub metrics: Vec<MetricsRow>,
    pub final_state: ClusterState,
    pub trajectory: Option<Trajectory>,
    /// Resolved base learning rate.
    pub gamma0: f64,
}

/// Run `cfg.iterations` steps. Deterministic given the config; errors on an
/// invalid config before any iteration runs.
pub fn run_experiment(cfg: &TrainConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let problem = Problem::build(&cfg.problem, cfg.workers, cfg.seed)?;
    let mut state = ClusterState::new(problem.initial_point().clone(), cfg.workers);
    let gamma0 = resolve_gamma(cfg)?;

    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut trajectory = cfg.record_analysis.then(Trajectory::default);
    let mut sim_time = 0.0f64;

    for t in 0..cfg.iterations {
        let loss = problem.loss(state.x())?;
        let full_grad = problem.full_grad(state.x())?;
        let gamma = cfg.gamma_at(t)?;

        let step_cfg = StepConfig {
            worker_spec: cfg.worker_compressor.clone(),
            server_spec: cfg.server_compressor.clone(),
            gamma,
            seed: cfg.seed,
            wire_bits_per_real: cfg.cost_model.wire_bits_per_real,
            parallel_workers: cfg.parallel_workers,
        };

        let omega_before = if trajectory.is_some() {
            Some(analysis::compute_omega(
                state.worker_residuals(),
                state.server_residual(),
            )?)
        } else {
            None
        };
        let x_before = trajectory.is_some().then(|| state.x().clone());

        let (next_state, report) = step(cfg.algorithm, &state, &problem, &step_cfg)?;
        sim_time += iteration_time(&report, &cfg.cost_model);

        metrics.push(MetricsRow {
            iter: t as u64,
            loss,
            grad_norm_sq: l2_norm_sq(&full_grad),
            bits_up: report.bits_up,
            bits_down: report.bits_down,
            sim_time_s: sim_time,
            server_delta_norm: next_state.server_residual().norm(),
            max_worker_delta_norm: next_state.max_worker_residual_norm(),
        });

        if let Some(traj) = trajectory.as_mut() {
            let omega_after = analysis::compute_omega(
                next_state.worker_residuals(),
                next_state.server_residual(),
            )?;
            traj.steps.push(analysis::StepTrace {
                gamma,
                x_before: x_before.expect("recorded alongside omega_before"),
                full_grad,
                per_worker_grads: report.per_worker_grads,
                omega_before: omega_before.expect("recorded alongside x_before"),
                omega_after,
                applied_update: report.applied_update,
                server_residual_norm: next_state.server_residual().norm(),
                max_worker_residual_norm: next_state.max_worker_residual_norm(),
            });
        }

        state = next_state;
    }

    if let Some(traj) = trajectory.as_mut() {
        traj.x_final = Some(state.x().clone());
    }

    Ok(ExperimentRun {
        metrics,
        final_state: state,
        trajectory,
        gamma0,
    })
}

/// Run-level roll-up of a metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_loss: f64,
    pub theorem_metric: f64,
    pub total_bits_up: u64,
    pub total_bits_down: u64,
    pub total_sim_time_s: f64,
    pub max_server_delta_norm: f64,
    pub max_worker_delta_norm: f64,
}

pub fn summarize(metrics: &[MetricsRow]) -> Result<Summary> {
    let last = metrics.last().ok_or(Error::EmptyMetrics)?;
    let grad_norm_sqs: Vec<f64> = metrics.iter().map(|r| r.grad_norm_sq).collect();
    Ok(Summary {
        final_loss: last.loss,
        theorem_metric: analysis::theorem_metric(&grad_norm_sqs)?,
        total_bits_up: metrics.iter().map(|r| r.bits_up).sum(),
        total_bits_down: metrics.iter().map(|r| r.bits_down).sum(),
        total_sim_time_s: last.sim_time_s,
        max_server_delta_norm: metrics
            .iter()
            .map(|r| r.server_delta_norm)
            .fold(0.0, f64::max),
        max_worker_delta_norm: metrics
            .iter()
            .map(|r| r.max_worker_delta_norm)
            .fold(0.0, f64::max),
    })
}

/// 17 significant digits: enough to round-trip any f64, and fixed-width
/// enough to diff byte-for-byte.
pub fn format_metric_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub const METRICS_CSV_HEADER: &str =
    "iter,loss,grad_norm_sq,bits_up,bits_down,sim_time_s,server_delta_norm,max_worker_delta_norm";

/// Render the canonical metrics CSV (header plus one row per iteration).
pub fn metrics_to_csv(metrics: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (metrics.len() + 1));
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for r in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iter,
            format_metric_float(r.loss),
            format_metric_float(r.grad_norm_sq),
            r.bits_up,
            r.bits_down,
            format_metric_float(r.sim_time_s),
            format_metric_float(r.server_delta_norm),
            format_metric_float(r.max_worker_delta_norm),
        ));
    }
    out
}

//! One-iteration steppers for the five training schemes.
//!
//! All five share one synchronous parameter-server round, differing only in
//! which sites compress and which keep residual state:
//!
//! | algorithm       | worker compressor | worker residual | server compressor | server residual |
//! |-----------------|-------------------|-----------------|-------------------|-----------------|
//! | `doublesqueeze` | configured        | yes             | configured        | yes             |
//! | `memsgd`        | configured        | yes             | identity          | no              |
//! | `qsgd`          | ternary           | no              | identity          | no              |
//! | `topk_sgd`      | top-k             | no              | identity          | no              |
//! | `vanilla`       | identity          | no              | identity          | no              |
//!
//! Workers are simulated sequentially (or in parallel with identical results;
//! per-worker random streams and a fixed ascending reduction order make the
//! two modes bit-equal). All workers share the single authoritative copy of
//! `x`, which is what the synchronous protocol guarantees.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{compress, reconstruct, CompressedMessage, CompressorSpec};
use crate::error::{Error, Result};
use crate::error_feedback::{compensate_compress_update, ResidualOwner, ResidualState};
use crate::numerics::{add, scale, DenseVector, Purpose, RngStream, StreamId};
use crate::problems::{Problem, SampleDraw};

/// Which stepper to run; selected by name in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Doublesqueeze,
    Memsgd,
    Qsgd,
    TopkSgd,
    Vanilla,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Doublesqueeze => "doublesqueeze",
            Algorithm::Memsgd => "memsgd",
            Algorithm::Qsgd => "qsgd",
            Algorithm::TopkSgd => "topk_sgd",
            Algorithm::Vanilla => "vanilla",
        }
    }

    pub fn from_name(name: &str) -> Option<Algorithm> {
        match name {
            "doublesqueeze" => Some(Algorithm::Doublesqueeze),
            "memsgd" => Some(Algorithm::Memsgd),
            "qsgd" => Some(Algorithm::Qsgd),
            "topk_sgd" => Some(Algorithm::TopkSgd),
            "vanilla" => Some(Algorithm::Vanilla),
            _ => None,
        }
    }

    /// Whether this scheme carries residual state (and therefore satisfies
    /// the closed-form update identity checked by the analysis module).
    pub fn uses_error_feedback(&self) -> bool {
        matches!(
            self,
            Algorithm::Doublesqueeze | Algorithm::Memsgd | Algorithm::Vanilla
        )
    }
}

/// Global state of the simulated cluster: the shared model, the residual at
/// each worker, the residual at the server, and the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    x: DenseVector,
    worker_residuals: Vec<ResidualState>,
    server_residual: ResidualState,
    t: u64,
}

impl ClusterState {
    pub fn new(x0: DenseVector, n_workers: usize) -> Self {
        assert!(n_workers >= 1);
        let dim = x0.dim();
        ClusterState {
            x: x0,
            worker_residuals: (0..n_workers)
                .map(|i| ResidualState::new_zero(dim, ResidualOwner::Worker(i as u32)))
                .collect(),
            server_residual: ResidualState::new_zero(dim, ResidualOwner::Server),
            t: 0,
        }
    }

    pub fn x(&self) -> &DenseVector {
        &self.x
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn n_workers(&self) -> usize {
        self.worker_residuals.len()
    }

    pub fn worker_residuals(&self) -> &[ResidualState] {
        &self.worker_residuals
    }

    pub fn server_residual(&self) -> &ResidualState {
        &self.server_residual
    }

    pub fn max_worker_residual_norm(&self) -> f64 {
        self.worker_residuals
            .iter()
            .map(|r| r.norm())
            .fold(0.0, f64::max)
    }
}

/// What one step did: the exact applied update (`x_{t+1} - x_t` as applied),
/// the per-worker stochastic gradients, and the bits moved per direction.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub applied_update: DenseVector,
    pub per_worker_grads: Vec<DenseVector>,
    /// Sum of uplink message costs over workers, at the wire convention.
    pub bits_up: u64,
    /// Downlink cost: n times the broadcast message cost.
    pub bits_down: u64,
}

/// Per-step knobs shared by all steppers.
#[derive(Debug, Clone)]
pub struct StepConfig {
    pub worker_spec: CompressorSpec,
    pub server_spec: CompressorSpec,
    pub gamma: f64,
    pub seed: u64,
    pub wire_bits_per_real: u32,
    /// Evaluate workers with a parallel iterator. Bit-identical to the
    /// sequential path by construction.
    pub parallel_workers: bool,
}

impl StepConfig {
    pub fn new(
        worker_spec: CompressorSpec,
        server_spec: CompressorSpec,
        gamma: f64,
        seed: u64,
    ) -> Self {
        StepConfig {
            worker_spec,
            server_spec,
            gamma,
            seed,
            wire_bits_per_real: 32,
            parallel_workers: false,
        }
    }
}

struct SiteSetup<'a> {
    worker_spec: &'a CompressorSpec,
    worker_feedback: bool,
    server_spec: CompressorSpec,
    server_feedback: bool,
}

/// Full double-pass error compensation: workers compensate and compress
/// uplink; the server averages the reconstructions, adds its residual,
/// compresses the broadcast, and keeps the new server residual.
pub fn doublesqueeze_step(
    state: &ClusterState,
    problem: &Problem,
    cfg: &StepConfig,
) -> Result<(ClusterState, StepReport)> {
    ps_round(
        state,
        problem,
        cfg,
        SiteSetup {
            worker_spec: &cfg.worker_spec,
            worker_feedback: true,
            server_spec: cfg.server_spec.clone(),
            server_feedback: true,
        },
    )
}

/// Worker-side compensation only: the server aggregates and broadcasts
/// uncompressed, holding no residual.
pub fn memsgd_step(
    state: &ClusterState,
    problem: &Problem,
    cfg: &StepConfig,
) -> Result<(ClusterState, StepReport)> {
    ps_round(
        state,
        problem,
        cfg,
        SiteSetup {
            worker_spec: &cfg.worker_spec,
            worker_feedback: true,
            server_spec: CompressorSpec::Identity,
            server_feedback: false,
        },
    )
}

/// Workers quantize (ternary) without compensation; the server broadcasts
/// the average uncompressed.
pub fn qsgd_step(
    state: &ClusterState,
    problem: &Problem,
    cfg: &StepConfig,
) -> Result<(ClusterState, StepReport)> {
    ps_round(
        state,
        problem,
        cfg,
        SiteSetup {
            worker_spec: &cfg.worker_spec,
            worker_feedback: false,
            server_spec: CompressorSpec::Identity,
            server_feedback: false,
        },
    )
}

/// Workers apply top-k without compensation; the server broadcasts the
/// average uncompressed.
pub fn topk_sgd_step(
    state: &ClusterState,
    problem: &Problem,
    cfg: &StepConfig,
) -> Result<(ClusterState, StepReport)> {
    ps_round(
        state,
        problem,
        cfg,
        SiteSetup {
            worker_spec: &cfg.worker_spec,
            worker_feedback: false,
            server_spec: CompressorSpec::Identity,
            server_feedback: false,
        },
    )
}

/// Plain synchronous parallel SGD: no compression anywhere.
pub fn vanilla_step(
    state: &ClusterState,
    problem: &Problem,
    cfg: &StepConfig,
) -> Result<(ClusterState, StepReport)> {
    ps_round(
        state,
        problem,
        cfg,
        SiteSetup {
            worker_spec: &CompressorSpec::Identity,
            worker_feedback: false,
            server_spec: CompressorSpec::Identity,
            server_feedback: false,
        },
    )
}

/// Dispatch by algorithm id.
pub fn step(
    algorithm: Algorithm,
    state: &ClusterState,
    problem: &Problem,
    cfg: &StepConfig,
) -> Result<(ClusterState, StepReport)> {
    match algorithm {
        Algorithm::Doublesqueeze => doublesqueeze_step(state, problem, cfg),
        Algorithm::Memsgd => memsgd_step(state, problem, cfg),
        Algorithm::Qsgd => qsgd_step(state, problem, cfg),
        Algorithm::TopkSgd => topk_sgd_step(state, problem, cfg),
        Algorithm::Vanilla => vanilla_step(state, problem, cfg),
    }
}

struct WorkerResult {
    grad: DenseVector,
    recon: DenseVector,
    bits: u64,
    residual: ResidualState,
}

fn ps_round(
    state: &ClusterState,
    problem: &Problem,
    cfg: &StepConfig,
    sites: SiteSetup<'_>,
) -> Result<(ClusterState, StepReport)> {
    let dim = state.x.dim();
    if problem.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: "ps_round problem/model",
            expected: dim,
            got: problem.dim(),
        });
    }
    if problem.n_workers() != state.n_workers() {
        return Err(Error::DimensionMismatch {
            context: "ps_round worker count",
            expected: state.n_workers(),
            got: problem.n_workers(),
        });
    }
    if !(cfg.gamma.is_finite() && cfg.gamma >= 0.0) {
        return Err(Error::NonFinite("step gamma"));
    }
    let n = state.n_workers();
    let t = state.t;

    let eval_worker = |i: usize| -> Result<WorkerResult> {
        let grad = problem.stochastic_grad(&state.x, &SampleDraw::new(i as u32, t, cfg.seed))?;
        let mut rng = RngStream::new(
            cfg.seed,
            StreamId::new(i as u32, t, Purpose::WorkerCompress),
        );
        let (msg, residual): (CompressedMessage, ResidualState) = if sites.worker_feedback {
            compensate_compress_update(
                &grad,
                &state.worker_residuals[i],
                sites.worker_spec,
                &mut rng,
            )?
        } else {
            debug_assert!(state.worker_residuals[i].delta().is_zero());
            (
                compress(sites.worker_spec, &grad, &mut rng)?,
                state.worker_residuals[i].clone(),
            )
        };
        let recon = reconstruct(&msg)?;
        Ok(WorkerResult {
            grad,
            recon,
            bits: msg.bit_cost_at_wire(cfg.wire_bits_per_real),
            residual,
        })
    };

    let results: Vec<WorkerResult> = if cfg.parallel_workers {
        (0..n)
            .into_par_iter()
            .map(eval_worker)
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..n).map(eval_worker).collect::<Result<Vec<_>>>()?
    };

    // Fixed reduction: accumulate reconstructions in ascending worker index,
    // divide once.
    let mut acc = vec![0.0; dim];
    for r in &results {
        for (a, &v) in acc.iter_mut().zip(r.recon.values()) {
            *a += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    for a in acc.iter_mut() {
        *a *= inv_n;
    }
    let averaged = DenseVector::from_values(acc)?;

    let mut server_rng = RngStream::new(
        cfg.seed,
        StreamId::new(u32::MAX, t, Purpose::ServerCompress),
    );
    let (server_msg, server_residual) = if sites.server_feedback {
        compensate_compress_update(
            &averaged,
            &state.server_residual,
            &sites.server_spec,
            &mut server_rng,
        )?
    } else {
        debug_assert!(state.server_residual.delta().is_zero());
        (
            compress(&sites.server_spec, &averaged, &mut server_rng)?,
            state.server_residual.clone(),
        )
    };
    let server_recon = reconstruct(&server_msg)?;

    // The update every worker applies is exactly -gamma * broadcast.
    let applied_update = scale(-cfg.gamma, &server_recon)?;
    let new_x = add(&state.x, &applied_update)?;

    let bits_up: u64 = results.iter().map(|r| r.bits).sum();
    let bits_down = n as u64 * server_msg.bit_cost_at_wire(cfg.wire_bits_per_real);

    let mut per_worker_grads = Vec::with_capacity(n);
    let mut worker_residuals = Vec::with_capacity(n);
    for r in results {
        per_worker_grads.push(r.grad);
        worker_residuals.push(r.residual);
    }

    Ok((
        ClusterState {
            x: new_x,
            worker_residuals,
            server_residual,
            t: t + 1,
        },
        StepReport {
            applied_update,
            per_worker_grads,
            bits_up,
            bits_down,
        },
    ))
}

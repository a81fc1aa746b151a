//! Synthetic objectives with stochastic gradient oracles and per-worker data
//! shards.
//!
//! Three problem kinds, all with exactly computable full gradients so
//! convergence metrics and finite-difference checks are possible:
//!
//! * `quadratic` — diagonal curvature `f(x) = (1/n) sum_i 1/2 sum_j a_j
//!   (x_j - x*_{i,j})^2`; the per-worker optima average to the configured
//!   optimum exactly, and additive Gaussian gradient noise with per-coordinate
//!   sd `sigma/sqrt(d)` gives `E|noise|^2 = sigma^2` — sigma is a knob with a
//!   known value for variance checks.
//! * `logistic` — binary logistic regression on Gaussian cluster data; the
//!   heterogeneity knob shifts each worker's cluster mean.
//! * `mlp` — one hidden tanh layer regressing a fixed random teacher.
//!
//! The global objective is *defined* as the ascending-order average of the
//! per-worker objectives, so `(1/n) sum_i grad f_i(x) == grad f(x)` holds
//! bit-exactly for the constructed decomposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseVector, Purpose, RngStream, StreamId};

fn default_one() -> f64 {
    1.0
}
fn default_samples() -> usize {
    64
}
fn default_minibatch() -> usize {
    8
}
fn default_separation() -> f64 {
    1.5
}
fn default_input_dim() -> usize {
    8
}
fn default_hidden() -> usize {
    16
}
fn default_label_noise() -> f64 {
    0.1
}

/// Config-facing description of a problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        dim: usize,
        /// Explicit per-coordinate curvature; wins over the min/max ramp.
        #[serde(default)]
        curvature: Option<Vec<f64>>,
        #[serde(default = "default_one")]
        curvature_min: f64,
        #[serde(default = "default_one")]
        curvature_max: f64,
        /// Optimum as a constant vector.
        #[serde(default)]
        optimum: f64,
        /// Initial point as a constant vector; `x0_values` wins if set.
        #[serde(default = "default_one")]
        x0: f64,
        #[serde(default)]
        x0_values: Option<Vec<f64>>,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        heterogeneity: f64,
    },
    Logistic {
        dim: usize,
        #[serde(default = "default_samples")]
        samples_per_worker: usize,
        #[serde(default = "default_minibatch")]
        minibatch: usize,
        /// Distance of the two label clusters from the origin.
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        heterogeneity: f64,
    },
    Mlp {
        #[serde(default = "default_input_dim")]
        input_dim: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_samples")]
        samples_per_worker: usize,
        #[serde(default = "default_minibatch")]
        minibatch: usize,
        #[serde(default = "default_label_noise")]
        label_noise: f64,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        heterogeneity: f64,
    },
}

impl ProblemSpec {
    /// Model dimension (parameter count).
    pub fn model_dim(&self) -> usize {
        match *self {
            ProblemSpec::Quadratic { dim, .. } | ProblemSpec::Logistic { dim, .. } => dim,
            ProblemSpec::Mlp {
                input_dim, hidden, ..
            } => hidden * input_dim + 2 * hidden + 1,
        }
    }

    pub fn noise_sigma(&self) -> f64 {
        match *self {
            ProblemSpec::Quadratic { noise_sigma, .. }
            | ProblemSpec::Logistic { noise_sigma, .. }
            | ProblemSpec::Mlp { noise_sigma, .. } => noise_sigma,
        }
    }

    pub fn heterogeneity(&self) -> f64 {
        match *self {
            ProblemSpec::Quadratic { heterogeneity, .. }
            | ProblemSpec::Logistic { heterogeneity, .. }
            | ProblemSpec::Mlp { heterogeneity, .. } => heterogeneity,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let err = |f: &str, m: &str| Err(Error::invalid_config(format!("{field}.{f}"), m));
        match self {
            ProblemSpec::Quadratic {
                dim,
                curvature,
                curvature_min,
                curvature_max,
                x0_values,
                noise_sigma,
                heterogeneity,
                ..
            } => {
                if *dim < 1 {
                    return err("dim", "must be >= 1");
                }
                if let Some(c) = curvature {
                    if c.len() != *dim {
                        return err("curvature", "length must equal dim");
                    }
                    if c.iter().any(|&a| !(a.is_finite() && a > 0.0)) {
                        return err("curvature", "entries must be positive and finite");
                    }
                } else if !(*curvature_min > 0.0 && *curvature_max >= *curvature_min) {
                    return err("curvature_min", "need 0 < curvature_min <= curvature_max");
                }
                if let Some(x0) = x0_values {
                    if x0.len() != *dim {
                        return err("x0_values", "length must equal dim");
                    }
                }
                if !(noise_sigma.is_finite() && *noise_sigma >= 0.0) {
                    return err("noise_sigma", "must be >= 0");
                }
                if !(0.0..=1.0).contains(heterogeneity) {
                    return err("heterogeneity", "must be in [0, 1]");
                }
            }
            ProblemSpec::Logistic {
                dim,
                samples_per_worker,
                minibatch,
                noise_sigma,
                heterogeneity,
                ..
            } => {
                if *dim < 1 {
                    return err("dim", "must be >= 1");
                }
                if *samples_per_worker < 1 {
                    return err("samples_per_worker", "must be >= 1");
                }
                if *minibatch < 1 {
                    return err("minibatch", "must be >= 1");
                }
                if !(noise_sigma.is_finite() && *noise_sigma >= 0.0) {
                    return err("noise_sigma", "must be >= 0");
                }
                if !(0.0..=1.0).contains(heterogeneity) {
                    return err("heterogeneity", "must be in [0, 1]");
                }
            }
            ProblemSpec::Mlp {
                input_dim,
                hidden,
                samples_per_worker,
                minibatch,
                label_noise,
                noise_sigma,
                heterogeneity,
            } => {
                if *input_dim < 1 || *hidden < 1 {
                    return err("input_dim", "input_dim and hidden must be >= 1");
                }
                if *samples_per_worker < 1 || *minibatch < 1 {
                    return err("samples_per_worker", "samples and minibatch must be >= 1");
                }
                if !(label_noise.is_finite() && *label_noise >= 0.0)
                    || !(noise_sigma.is_finite() && *noise_sigma >= 0.0)
                {
                    return err("label_noise", "noise levels must be >= 0");
                }
                if !(0.0..=1.0).contains(heterogeneity) {
                    return err("heterogeneity", "must be in [0, 1]");
                }
            }
        }
        Ok(())
    }
}

/// One worker's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    /// +-1 for logistic, real targets for the MLP.
    pub labels: Vec<f64>,
}

/// One worker's shard descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum Shard {
    /// Quadratic: this worker's optimum is `global optimum + shift`.
    OptimumShift(DenseVector),
    /// Logistic / MLP: this worker's local samples.
    Data(Dataset),
}

/// Identifies one stochastic draw; the realization is fully determined by
/// `RngStream(seed, worker, iteration, Data)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleDraw {
    pub worker: u32,
    pub iteration: u64,
    pub seed: u64,
}

impl SampleDraw {
    pub fn new(worker: u32, iteration: u64, seed: u64) -> Self {
        SampleDraw {
            worker,
            iteration,
            seed,
        }
    }

    fn stream(&self) -> RngStream {
        RngStream::new(
            self.seed,
            StreamId::new(self.worker, self.iteration, Purpose::Data),
        )
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Quadratic {
        curvature: Vec<f64>,
        optimum: DenseVector,
        fstar: f64,
    },
    Logistic {
        minibatch: usize,
    },
    Mlp {
        input_dim: usize,
        hidden: usize,
        minibatch: usize,
    },
}

/// An objective instance: immutable after construction, gradient evaluation
/// is pure, safe to share across threads.
#[derive(Debug, Clone)]
pub struct Problem {
    kind: Kind,
    shards: Vec<Shard>,
    dim: usize,
    noise_sigma: f64,
    x0: DenseVector,
}

fn gaussian_vec(stream: &mut RngStream, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| stream.next_standard_normal()).collect()
}

fn unit_direction(stream: &mut RngStream, dim: usize) -> Vec<f64> {
    let mut v = gaussian_vec(stream, dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v[0] = 1.0;
        return v;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Per-worker shift of magnitude `heterogeneity`. The zero-heterogeneity
/// case skips direction sampling entirely; the offset is exactly zero either
/// way, so results are unchanged.
fn shard_offset(heterogeneity: f64, dim: usize, worker: u32, seed: u64) -> Vec<f64> {
    if heterogeneity == 0.0 {
        return vec![0.0; dim];
    }
    let mut stream = RngStream::new(seed, StreamId::new(worker, 0, Purpose::ShardOffset));
    let mut dir = unit_direction(&mut stream, dim);
    for x in dir.iter_mut() {
        *x *= heterogeneity;
    }
    dir
}

/// Build the per-worker shard descriptors for a problem spec.
///
/// `heterogeneity = 0` gives statistically identical local distributions;
/// `1` gives fully shifted/disjoint ones. Deterministic given `seed`.
pub fn make_shards(
    spec: &ProblemSpec,
    n_workers: usize,
    heterogeneity: f64,
    seed: u64,
) -> Result<Vec<Shard>> {
    if n_workers < 1 {
        return Err(Error::invalid_config("workers", "must be >= 1"));
    }
    match spec {
        ProblemSpec::Quadratic { dim, .. } => {
            // Antithetic pairs of shift directions so the shifts sum to the
            // zero vector exactly (and the mean optimum is exact).
            let mut shifts = Vec::with_capacity(n_workers);
            for pair in 0..n_workers / 2 {
                let plus = shard_offset(heterogeneity, *dim, pair as u32, seed);
                let minus: Vec<f64> = plus.iter().map(|&x| -x).collect();
                shifts.push(Shard::OptimumShift(DenseVector::from_values_unchecked(
                    plus,
                )));
                shifts.push(Shard::OptimumShift(DenseVector::from_values_unchecked(
                    minus,
                )));
            }
            if n_workers % 2 == 1 {
                shifts.push(Shard::OptimumShift(DenseVector::zeros(*dim)));
            }
            Ok(shifts)
        }
        ProblemSpec::Logistic {
            dim,
            samples_per_worker,
            separation,
            ..
        } => {
            let cluster: Vec<f64> = vec![1.0 / (*dim as f64).sqrt(); *dim];
            let mut shards = Vec::with_capacity(n_workers);
            for i in 0..n_workers {
                let offset = shard_offset(heterogeneity, *dim, i as u32, seed);
                let mut data_stream =
                    RngStream::new(seed, StreamId::new(i as u32, 0, Purpose::DataGen));
                let mut features = Vec::with_capacity(*samples_per_worker);
                let mut labels = Vec::with_capacity(*samples_per_worker);
                for j in 0..*samples_per_worker {
                    let y = if j % 2 == 0 { 1.0 } else { -1.0 };
                    let z: Vec<f64> = (0..*dim)
                        .map(|c| {
                            y * separation * cluster[c]
                                + offset[c]
                                + data_stream.next_standard_normal()
                        })
                        .collect();
                    features.push(z);
                    labels.push(y);
                }
                shards.push(Shard::Data(Dataset { features, labels }));
            }
            Ok(shards)
        }
        ProblemSpec::Mlp {
            input_dim,
            hidden,
            samples_per_worker,
            label_noise,
            ..
        } => {
            let teacher = mlp_teacher(*input_dim, *hidden, seed);
            let mut shards = Vec::with_capacity(n_workers);
            for i in 0..n_workers {
                let offset = shard_offset(heterogeneity, *input_dim, i as u32, seed);
                let mut data_stream =
                    RngStream::new(seed, StreamId::new(i as u32, 0, Purpose::DataGen));
                let mut features = Vec::with_capacity(*samples_per_worker);
                let mut labels = Vec::with_capacity(*samples_per_worker);
                for _ in 0..*samples_per_worker {
                    let z: Vec<f64> = (0..*input_dim)
                        .map(|c| offset[c] + data_stream.next_standard_normal())
                        .collect();
                    let y = mlp_forward(&teacher, *input_dim, *hidden, &z)
                        + label_noise * data_stream.next_standard_normal();
                    features.push(z);
                    labels.push(y);
                }
                shards.push(Shard::Data(Dataset { features, labels }));
            }
            Ok(shards)
        }
    }
}

fn mlp_teacher(input_dim: usize, hidden: usize, seed: u64) -> Vec<f64> {
    let mut s = RngStream::new(seed, StreamId::new(0, 0, Purpose::Init));
    let dim = hidden * input_dim + 2 * hidden + 1;
    let mut params = Vec::with_capacity(dim);
    let w1_scale = 1.0 / (input_dim as f64).sqrt();
    for _ in 0..hidden * input_dim {
        params.push(w1_scale * s.next_standard_normal());
    }
    for _ in 0..hidden {
        params.push(0.1 * s.next_standard_normal());
    }
    let w2_scale = 1.0 / (hidden as f64).sqrt();
    for _ in 0..hidden {
        params.push(w2_scale * s.next_standard_normal());
    }
    params.push(0.0);
    params
}

/// Forward pass of the one-hidden-layer tanh network. Parameter layout:
/// `[W1 row-major (h x in), b1 (h), w2 (h), b2]`.
fn mlp_forward(params: &[f64], input_dim: usize, hidden: usize, z: &[f64]) -> f64 {
    let (w1, rest) = params.split_at(hidden * input_dim);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(hidden);
    let mut out = b2[0];
    for r in 0..hidden {
        let mut a = b1[r];
        let row = &w1[r * input_dim..(r + 1) * input_dim];
        for (w, &zc) in row.iter().zip(z) {
            a += w * zc;
        }
        out += w2[r] * a.tanh();
    }
    out
}

/// Per-sample squared-error loss and gradient accumulation for the MLP.
fn mlp_sample_grad(
    params: &[f64],
    input_dim: usize,
    hidden: usize,
    z: &[f64],
    y: f64,
    grad: &mut [f64],
) -> f64 {
    let (w1, rest) = params.split_at(hidden * input_dim);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, _b2) = rest.split_at(hidden);

    let mut acts = vec![0.0; hidden];
    let mut pred = params[params.len() - 1];
    for r in 0..hidden {
        let mut a = b1[r];
        let row = &w1[r * input_dim..(r + 1) * input_dim];
        for (w, &zc) in row.iter().zip(z) {
            a += w * zc;
        }
        acts[r] = a.tanh();
        pred += w2[r] * acts[r];
    }
    let e = pred - y;

    let (g_w1, g_rest) = grad.split_at_mut(hidden * input_dim);
    let (g_b1, g_rest) = g_rest.split_at_mut(hidden);
    let (g_w2, g_b2) = g_rest.split_at_mut(hidden);
    for r in 0..hidden {
        let t = acts[r];
        let da = e * w2[r] * (1.0 - t * t);
        let row = &mut g_w1[r * input_dim..(r + 1) * input_dim];
        for (g, &zc) in row.iter_mut().zip(z) {
            *g += da * zc;
        }
        g_b1[r] += da;
        g_w2[r] += e * t;
    }
    g_b2[0] += e;

    0.5 * e * e
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    // ln(1 + e^t), stable for large |t|
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

impl Problem {
    /// Build a problem from its spec: shards, initial point, closed forms.
    pub fn build(spec: &ProblemSpec, n_workers: usize, seed: u64) -> Result<Problem> {
        spec.validate("problem")?;
        let shards = make_shards(spec, n_workers, spec.heterogeneity(), seed)?;
        let dim = spec.model_dim();
        match spec {
            ProblemSpec::Quadratic {
                dim: d,
                curvature,
                curvature_min,
                curvature_max,
                optimum,
                x0,
                x0_values,
                noise_sigma,
                ..
            } => {
                let curvature = match curvature {
                    Some(c) => c.clone(),
                    None => (0..*d)
                        .map(|j| {
                            if *d == 1 {
                                *curvature_min
                            } else {
                                curvature_min
                                    + (curvature_max - curvature_min) * j as f64 / (*d as f64 - 1.0)
                            }
                        })
                        .collect(),
                };
                let optimum = DenseVector::constant(*d, *optimum)?;
                // f* = (1/n) sum_i 1/2 sum_j a_j shift_{i,j}^2
                let mut fstar = 0.0;
                for shard in &shards {
                    let Shard::OptimumShift(s) = shard else {
                        unreachable!()
                    };
                    fstar += 0.5
                        * curvature
                            .iter()
                            .zip(s.values())
                            .map(|(&a, &sj)| a * sj * sj)
                            .sum::<f64>();
                }
                fstar /= n_workers as f64;
                let x0 = match x0_values {
                    Some(values) => DenseVector::from_values(values.clone())?,
                    None => DenseVector::constant(*d, *x0)?,
                };
                Ok(Problem {
                    kind: Kind::Quadratic {
                        curvature,
                        optimum,
                        fstar,
                    },
                    shards,
                    dim,
                    noise_sigma: *noise_sigma,
                    x0,
                })
            }
            ProblemSpec::Logistic {
                minibatch,
                noise_sigma,
                ..
            } => Ok(Problem {
                kind: Kind::Logistic {
                    minibatch: *minibatch,
                },
                shards,
                dim,
                noise_sigma: *noise_sigma,
                x0: DenseVector::zeros(dim),
            }),
            ProblemSpec::Mlp {
                input_dim,
                hidden,
                minibatch,
                noise_sigma,
                ..
            } => {
                let mut init = RngStream::new(seed ^ 0x5eed, StreamId::new(1, 0, Purpose::Init));
                let x0 = DenseVector::from_values_unchecked(
                    (0..dim)
                        .map(|_| 0.3 * init.next_standard_normal())
                        .collect(),
                );
                Ok(Problem {
                    kind: Kind::Mlp {
                        input_dim: *input_dim,
                        hidden: *hidden,
                        minibatch: *minibatch,
                    },
                    shards,
                    dim,
                    noise_sigma: *noise_sigma,
                    x0,
                })
            }
        }
    }

    /// Logistic problem over explicit datasets (one per worker). Useful for
    /// hand-constructed symmetry tests.
    pub fn logistic_from_datasets(
        datasets: Vec<Dataset>,
        dim: usize,
        minibatch: usize,
        noise_sigma: f64,
    ) -> Result<Problem> {
        if datasets.is_empty() {
            return Err(Error::invalid_config("datasets", "need at least one shard"));
        }
        for d in &datasets {
            if d.features.len() != d.labels.len() || d.features.is_empty() {
                return Err(Error::invalid_config(
                    "datasets",
                    "features/labels mismatch",
                ));
            }
            if d.features.iter().any(|z| z.len() != dim) {
                return Err(Error::invalid_config("datasets", "feature dim mismatch"));
            }
        }
        Ok(Problem {
            kind: Kind::Logistic { minibatch },
            shards: datasets.into_iter().map(Shard::Data).collect(),
            dim,
            noise_sigma,
            x0: DenseVector::zeros(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_workers(&self) -> usize {
        self.shards.len()
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn initial_point(&self) -> &DenseVector {
        &self.x0
    }

    pub fn shard(&self, worker: usize) -> &Shard {
        &self.shards[worker]
    }

    /// Gradient Lipschitz constant where known in closed form (quadratic:
    /// `max_j a_j`).
    pub fn smoothness(&self) -> Option<f64> {
        match &self.kind {
            Kind::Quadratic { curvature, .. } => {
                Some(curvature.iter().cloned().fold(0.0, f64::max))
            }
            _ => None,
        }
    }

    /// Minimum objective value, where known in closed form.
    pub fn optimal_value(&self) -> Option<f64> {
        match &self.kind {
            Kind::Quadratic { fstar, .. } => Some(*fstar),
            _ => None,
        }
    }

    pub fn optimum(&self) -> Option<&DenseVector> {
        match &self.kind {
            Kind::Quadratic { optimum, .. } => Some(optimum),
            _ => None,
        }
    }

    fn check_dim(&self, x: &DenseVector, context: &'static str) -> Result<()> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dim,
                got: x.dim(),
            });
        }
        Ok(())
    }

    /// Exact gradient of worker `i`'s local objective `f_i`.
    pub fn worker_full_grad(&self, worker: usize, x: &DenseVector) -> Result<DenseVector> {
        self.check_dim(x, "worker_full_grad")?;
        let shard = &self.shards[worker];
        match (&self.kind, shard) {
            (
                Kind::Quadratic {
                    curvature, optimum, ..
                },
                Shard::OptimumShift(shift),
            ) => {
                let values = curvature
                    .iter()
                    .zip(x.values())
                    .zip(optimum.values().iter().zip(shift.values()))
                    .map(|((&a, &xj), (&oj, &sj))| a * (xj - (oj + sj)))
                    .collect();
                Ok(DenseVector::from_values_unchecked(values))
            }
            (Kind::Logistic { .. }, Shard::Data(data)) => {
                let mut grad = vec![0.0; self.dim];
                for (z, &y) in data.features.iter().zip(&data.labels) {
                    logistic_sample_grad(x.values(), z, y, &mut grad);
                }
                let inv = 1.0 / data.features.len() as f64;
                for g in grad.iter_mut() {
                    *g *= inv;
                }
                Ok(DenseVector::from_values_unchecked(grad))
            }
            (
                Kind::Mlp {
                    input_dim, hidden, ..
                },
                Shard::Data(data),
            ) => {
                let mut grad = vec![0.0; self.dim];
                for (z, &y) in data.features.iter().zip(&data.labels) {
                    mlp_sample_grad(x.values(), *input_dim, *hidden, z, y, &mut grad);
                }
                let inv = 1.0 / data.features.len() as f64;
                for g in grad.iter_mut() {
                    *g *= inv;
                }
                Ok(DenseVector::from_values_unchecked(grad))
            }
            _ => unreachable!("shard kind matches problem kind by construction"),
        }
    }

    /// Exact global gradient: the ascending-order worker average.
    pub fn full_grad(&self, x: &DenseVector) -> Result<DenseVector> {
        self.check_dim(x, "full_grad")?;
        let mut acc = vec![0.0; self.dim];
        for i in 0..self.n_workers() {
            let g = self.worker_full_grad(i, x)?;
            for (a, &gj) in acc.iter_mut().zip(g.values()) {
                *a += gj;
            }
        }
        let inv_n = 1.0 / self.n_workers() as f64;
        for a in acc.iter_mut() {
            *a *= inv_n;
        }
        Ok(DenseVector::from_values_unchecked(acc))
    }

    fn worker_loss(&self, worker: usize, x: &DenseVector) -> f64 {
        let shard = &self.shards[worker];
        match (&self.kind, shard) {
            (
                Kind::Quadratic {
                    curvature, optimum, ..
                },
                Shard::OptimumShift(shift),
            ) => curvature
                .iter()
                .zip(x.values())
                .zip(optimum.values().iter().zip(shift.values()))
                .map(|((&a, &xj), (&oj, &sj))| {
                    let d = xj - (oj + sj);
                    0.5 * a * d * d
                })
                .sum(),
            (Kind::Logistic { .. }, Shard::Data(data)) => {
                let mut total = 0.0;
                for (z, &y) in data.features.iter().zip(&data.labels) {
                    let u: f64 = x.values().iter().zip(z).map(|(&w, &zc)| w * zc).sum();
                    total += softplus(-y * u);
                }
                total / data.features.len() as f64
            }
            (
                Kind::Mlp {
                    input_dim, hidden, ..
                },
                Shard::Data(data),
            ) => {
                let mut total = 0.0;
                for (z, &y) in data.features.iter().zip(&data.labels) {
                    let e = mlp_forward(x.values(), *input_dim, *hidden, z) - y;
                    total += 0.5 * e * e;
                }
                total / data.features.len() as f64
            }
            _ => unreachable!(),
        }
    }

    /// Exact objective value `f(x) = (1/n) sum_i f_i(x)`.
    pub fn loss(&self, x: &DenseVector) -> Result<f64> {
        self.check_dim(x, "loss")?;
        let mut total = 0.0;
        for i in 0..self.n_workers() {
            total += self.worker_loss(i, x);
        }
        Ok(total / self.n_workers() as f64)
    }

    /// Stochastic gradient of worker `draw.worker`'s local objective:
    /// unbiased for `grad f_i(x)`, with additive Gaussian noise contributing
    /// exactly `noise_sigma^2` to `E|g - grad f_i|^2`.
    pub fn stochastic_grad(&self, x: &DenseVector, draw: &SampleDraw) -> Result<DenseVector> {
        self.check_dim(x, "stochastic_grad")?;
        let worker = draw.worker as usize;
        if worker >= self.n_workers() {
            return Err(Error::DimensionMismatch {
                context: "stochastic_grad worker index",
                expected: self.n_workers(),
                got: worker,
            });
        }
        let mut stream = draw.stream();
        let mut grad = match (&self.kind, &self.shards[worker]) {
            (Kind::Quadratic { .. }, _) => self.worker_full_grad(worker, x)?.values().to_vec(),
            (Kind::Logistic { minibatch }, Shard::Data(data)) => {
                let mut g = vec![0.0; self.dim];
                let len = data.features.len();
                for _ in 0..*minibatch {
                    let idx = (stream.next_uniform() * len as f64) as usize;
                    let idx = idx.min(len - 1);
                    logistic_sample_grad(x.values(), &data.features[idx], data.labels[idx], &mut g);
                }
                let inv = 1.0 / *minibatch as f64;
                for gj in g.iter_mut() {
                    *gj *= inv;
                }
                g
            }
            (
                Kind::Mlp {
                    input_dim,
                    hidden,
                    minibatch,
                },
                Shard::Data(data),
            ) => {
                let mut g = vec![0.0; self.dim];
                let len = data.features.len();
                for _ in 0..*minibatch {
                    let idx = (stream.next_uniform() * len as f64) as usize;
                    let idx = idx.min(len - 1);
                    mlp_sample_grad(
                        x.values(),
                        *input_dim,
                        *hidden,
                        &data.features[idx],
                        data.labels[idx],
                        &mut g,
                    );
                }
                let inv = 1.0 / *minibatch as f64;
                for gj in g.iter_mut() {
                    *gj *= inv;
                }
                g
            }
            _ => unreachable!(),
        };
        if self.noise_sigma > 0.0 {
            // Per-coordinate sd sigma/sqrt(d) => E|noise|^2 = sigma^2.
            let per_coord = self.noise_sigma / (self.dim as f64).sqrt();
            for gj in grad.iter_mut() {
                *gj += per_coord * stream.next_standard_normal();
            }
        }
        DenseVector::from_values(grad)
    }
}

fn logistic_sample_grad(x: &[f64], z: &[f64], y: f64, grad: &mut [f64]) {
    let u: f64 = x.iter().zip(z).map(|(&w, &zc)| w * zc).sum();
    let coeff = -y * sigmoid(-y * u);
    for (g, &zc) in grad.iter_mut().zip(z) {
        *g += coeff * zc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_norm, l2_norm_sq, sub};

    fn quadratic_spec(dim: usize, noise: f64, het: f64) -> ProblemSpec {
        ProblemSpec::Quadratic {
            dim,
            curvature: None,
            curvature_min: 0.5,
            curvature_max: 2.0,
            optimum: 0.0,
            x0: 1.0,
            x0_values: None,
            noise_sigma: noise,
            heterogeneity: het,
        }
    }

    fn logistic_spec(dim: usize, het: f64) -> ProblemSpec {
        ProblemSpec::Logistic {
            dim,
            samples_per_worker: 64,
            minibatch: 8,
            separation: 1.5,
            noise_sigma: 0.0,
            heterogeneity: het,
        }
    }

    fn mlp_spec() -> ProblemSpec {
        ProblemSpec::Mlp {
            input_dim: 5,
            hidden: 6,
            samples_per_worker: 16,
            minibatch: 4,
            label_noise: 0.1,
            noise_sigma: 0.0,
            heterogeneity: 0.5,
        }
    }

    /// Central finite differences: independent oracle for the gradients.
    fn finite_diff_grad(p: &Problem, x: &DenseVector, h: f64) -> DenseVector {
        let mut g = Vec::with_capacity(x.dim());
        for j in 0..x.dim() {
            let mut plus = x.values().to_vec();
            let mut minus = x.values().to_vec();
            plus[j] += h;
            minus[j] -= h;
            let fp = p.loss(&DenseVector::from_values(plus).unwrap()).unwrap();
            let fm = p.loss(&DenseVector::from_values(minus).unwrap()).unwrap();
            g.push((fp - fm) / (2.0 * h));
        }
        DenseVector::from_values(g).unwrap()
    }

    #[test]
    fn quadratic_noiseless_gradient_is_exact() {
        let p = Problem::build(&quadratic_spec(4, 0.0, 0.0), 2, 7).unwrap();
        let x = DenseVector::constant(4, 2.0).unwrap();
        let g = p.stochastic_grad(&x, &SampleDraw::new(0, 0, 7)).unwrap();
        assert_eq!(g, p.worker_full_grad(0, &x).unwrap());

        // Zero at the optimum.
        let at_opt = p
            .stochastic_grad(p.optimum().unwrap(), &SampleDraw::new(1, 3, 7))
            .unwrap();
        assert!(at_opt.is_zero());
    }

    #[test]
    fn quadratic_noise_moments() {
        // Monte-Carlo oracle: mean within 4 SE of the exact gradient and
        // E|noise|^2 within 10% of sigma^2 under the sigma/sqrt(d) model.
        let dim = 10;
        let p = Problem::build(&quadratic_spec(dim, 1.0, 0.0), 1, 11).unwrap();
        let x = DenseVector::constant(dim, 1.5).unwrap();
        let exact = p.worker_full_grad(0, &x).unwrap();

        let n = 100_000u64;
        let mut mean = vec![0.0; dim];
        let mut sq_norm = 0.0;
        for t in 0..n {
            let g = p.stochastic_grad(&x, &SampleDraw::new(0, t, 11)).unwrap();
            for (m, &gj) in mean.iter_mut().zip(g.values()) {
                *m += gj;
            }
            sq_norm += l2_norm_sq(&sub(&g, &exact).unwrap());
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        // Per-coordinate SE of the mean is (sigma/sqrt(d))/sqrt(n).
        let se = (1.0 / (dim as f64).sqrt()) / (n as f64).sqrt();
        for (m, &e) in mean.iter().zip(exact.values()) {
            assert!((m - e).abs() <= 4.0 * se, "mean {m} vs {e}");
        }
        let var = sq_norm / n as f64;
        assert!((var - 1.0).abs() < 0.1, "E|noise|^2 = {var}");
    }

    #[test]
    fn quadratic_loss_closed_form() {
        let spec = ProblemSpec::Quadratic {
            dim: 1,
            curvature: Some(vec![1.0]),
            curvature_min: 1.0,
            curvature_max: 1.0,
            optimum: 0.0,
            x0: 1.0,
            x0_values: None,
            noise_sigma: 0.0,
            heterogeneity: 0.0,
        };
        let p = Problem::build(&spec, 1, 0).unwrap();
        let x = DenseVector::constant(1, 2.0).unwrap();
        assert_eq!(p.loss(&x).unwrap() - p.optimal_value().unwrap(), 2.0);
        assert_eq!(
            p.loss(p.optimum().unwrap()).unwrap(),
            p.optimal_value().unwrap()
        );
    }

    #[test]
    fn heterogeneous_quadratic_keeps_closed_forms() {
        let p = Problem::build(&quadratic_spec(6, 0.0, 0.8), 5, 3).unwrap();
        // Mean optimum shift is exactly zero, so the global gradient vanishes
        // at the configured optimum.
        assert!(p.full_grad(p.optimum().unwrap()).unwrap().is_zero());
        // f* matches evaluation at the optimum.
        let f_at_opt = p.loss(p.optimum().unwrap()).unwrap();
        assert!((f_at_opt - p.optimal_value().unwrap()).abs() < 1e-15);
        assert!(p.optimal_value().unwrap() > 0.0);
    }

    #[test]
    fn worker_average_equals_full_grad_exactly() {
        for (spec, n) in [
            (quadratic_spec(5, 0.0, 1.0), 4),
            (logistic_spec(4, 0.7), 3),
            (mlp_spec(), 3),
        ] {
            let p = Problem::build(&spec, n, 21).unwrap();
            let x = DenseVector::constant(p.dim(), 0.3).unwrap();
            let mut acc = vec![0.0; p.dim()];
            for i in 0..n {
                for (a, &g) in acc
                    .iter_mut()
                    .zip(p.worker_full_grad(i, &x).unwrap().values())
                {
                    *a += g;
                }
            }
            let inv = 1.0 / n as f64;
            for a in acc.iter_mut() {
                *a *= inv;
            }
            assert_eq!(acc.as_slice(), p.full_grad(&x).unwrap().values());
        }
    }

    #[test]
    fn logistic_symmetric_labels_zero_gradient() {
        // Same feature with both labels: contributions cancel exactly.
        let z = vec![0.7, -0.2, 1.1];
        let data = Dataset {
            features: vec![z.clone(), z],
            labels: vec![1.0, -1.0],
        };
        let p = Problem::logistic_from_datasets(vec![data], 3, 2, 0.0).unwrap();
        let g = p.full_grad(&DenseVector::zeros(3)).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for (spec, n, tag) in [
            (quadratic_spec(6, 0.0, 0.6), 3, "quadratic"),
            (logistic_spec(5, 0.5), 2, "logistic"),
            (mlp_spec(), 2, "mlp"),
        ] {
            let p = Problem::build(&spec, n, 31).unwrap();
            let mut s = RngStream::new(55, StreamId::new(9, 9, Purpose::Init));
            for _ in 0..10 {
                let x = DenseVector::from_values(
                    (0..p.dim())
                        .map(|_| 0.5 * s.next_standard_normal())
                        .collect(),
                )
                .unwrap();
                let g = p.full_grad(&x).unwrap();
                let fd = finite_diff_grad(&p, &x, h);
                let rel = l2_norm(&sub(&fd, &g).unwrap()) / l2_norm(&g).max(1e-8);
                assert!(rel <= 1e-5, "{tag}: finite-difference mismatch {rel}");
            }
        }
    }

    #[test]
    fn loss_decreases_along_negative_gradient() {
        for (spec, n) in [
            (quadratic_spec(6, 0.0, 0.0), 2),
            (logistic_spec(5, 0.3), 2),
            (mlp_spec(), 2),
        ] {
            let p = Problem::build(&spec, n, 41).unwrap();
            let x = DenseVector::constant(p.dim(), 0.4).unwrap();
            let g = p.full_grad(&x).unwrap();
            let stepped = crate::numerics::axpy(-1e-3, &g, &x).unwrap();
            assert!(p.loss(&stepped).unwrap() < p.loss(&x).unwrap());
        }
    }

    #[test]
    fn shards_single_worker_and_determinism() {
        let spec = logistic_spec(4, 0.0);
        let shards = make_shards(&spec, 1, 0.0, 5).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(
            make_shards(&spec, 3, 0.5, 5).unwrap(),
            make_shards(&spec, 3, 0.5, 5).unwrap()
        );
        assert!(make_shards(&spec, 0, 0.0, 5).is_err());
    }

    #[test]
    fn homogeneous_shards_have_matching_means() {
        // heterogeneity 0: per-shard feature means agree within Monte-Carlo
        // tolerance (~ 4 / sqrt(samples)).
        let spec = ProblemSpec::Logistic {
            dim: 4,
            samples_per_worker: 4000,
            minibatch: 8,
            separation: 1.5,
            noise_sigma: 0.0,
            heterogeneity: 0.0,
        };
        let shards = make_shards(&spec, 3, 0.0, 9).unwrap();
        let means: Vec<Vec<f64>> = shards
            .iter()
            .map(|s| {
                let Shard::Data(d) = s else { unreachable!() };
                let mut m = [0.0; 4];
                for (z, &y) in d.features.iter().zip(&d.labels) {
                    // Fold out the label so the cluster structure cancels.
                    for (mj, &zj) in m.iter_mut().zip(z) {
                        *mj += y * zj;
                    }
                }
                m.iter().map(|v| v / d.features.len() as f64).collect()
            })
            .collect();
        let tol = 4.0 / (4000f64).sqrt();
        for (w, mean) in means.iter().enumerate().skip(1) {
            for (j, (got, want)) in mean.iter().zip(&means[0]).enumerate() {
                assert!(
                    (got - want).abs() < 2.0 * tol,
                    "shard {w} coord {j}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn heterogeneous_shards_differ_but_average_to_global() {
        let p = Problem::build(&logistic_spec(4, 1.0), 4, 13).unwrap();
        let x = DenseVector::constant(4, 0.2).unwrap();

        // Per-worker exact gradients measurably differ under full shift.
        let g0 = p.worker_full_grad(0, &x).unwrap();
        let g1 = p.worker_full_grad(1, &x).unwrap();
        assert!(l2_norm(&sub(&g0, &g1).unwrap()) > 1e-3);

        // Empirical mean of per-worker stochastic gradients matches the
        // global gradient within 4 SE.
        let reps = 4000u64;
        let mut acc = [0.0; 4];
        let mut acc_sq = [0.0; 4];
        for i in 0..p.n_workers() {
            for t in 0..reps {
                let g = p
                    .stochastic_grad(&x, &SampleDraw::new(i as u32, t, 13))
                    .unwrap();
                for (j, &gj) in g.values().iter().enumerate() {
                    acc[j] += gj;
                    acc_sq[j] += gj * gj;
                }
            }
        }
        let total = (reps * p.n_workers() as u64) as f64;
        let global = p.full_grad(&x).unwrap();
        for j in 0..4 {
            let mean = acc[j] / total;
            let var = (acc_sq[j] / total - mean * mean).max(0.0);
            let se = (var / total).sqrt();
            assert!(
                (mean - global.get(j)).abs() <= 4.0 * se + 1e-12,
                "coord {j}: {mean} vs {}",
                global.get(j)
            );
        }
    }

    #[test]
    fn stochastic_draws_are_reproducible() {
        let p = Problem::build(&logistic_spec(4, 0.5), 2, 17).unwrap();
        let x = DenseVector::constant(4, 0.1).unwrap();
        let d = SampleDraw::new(1, 42, 17);
        assert_eq!(
            p.stochastic_grad(&x, &d).unwrap(),
            p.stochastic_grad(&x, &d).unwrap()
        );
    }

    #[test]
    fn dimension_mismatch_errors() {
        let p = Problem::build(&quadratic_spec(4, 0.0, 0.0), 1, 0).unwrap();
        let bad = DenseVector::zeros(3);
        assert!(p.full_grad(&bad).is_err());
        assert!(p.loss(&bad).is_err());
        assert!(p.stochastic_grad(&bad, &SampleDraw::new(0, 0, 0)).is_err());
    }
}

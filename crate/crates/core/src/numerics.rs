//! Dense vector arithmetic and counter-based random streams.
//!
//! Everything in this crate is built on two reproducibility guarantees made
//! here:
//!
//! * vector operations are pure (inputs are never mutated) and accumulate in
//!   a fixed order, so a computation is a function of its inputs alone;
//! * random draws come from counter-based streams keyed by
//!   `(seed, worker, iteration, purpose)`, so the value of any draw is
//!   independent of execution order and thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat vector of 64-bit reals; the universal currency for models, gradients,
/// residuals, and messages.
///
/// Invariants: `dim >= 1` and every entry finite. Construction and the public
/// arithmetic helpers enforce both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    values: Vec<f64>,
}

impl DenseVector {
    /// Wrap a value list, rejecting empty input and non-finite entries.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "DenseVector::from_values",
                expected: 1,
                got: 0,
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("DenseVector::from_values"));
        }
        Ok(DenseVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "DenseVector dimension must be >= 1");
        DenseVector {
            values: vec![0.0; dim],
        }
    }

    pub fn constant(dim: usize, value: f64) -> Result<Self> {
        Self::from_values(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Internal constructor for values already known finite.
    pub(crate) fn from_values_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
        DenseVector { values }
    }
}

fn check_same_dim(context: &'static str, x: &DenseVector, y: &DenseVector) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            context,
            expected: x.dim(),
            got: y.dim(),
        });
    }
    Ok(())
}

fn checked_output(context: &'static str, values: Vec<f64>) -> Result<DenseVector> {
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(context));
    }
    Ok(DenseVector { values })
}

/// `a*x + y`, elementwise. Exact for integer-representable inputs.
pub fn axpy(a: f64, x: &DenseVector, y: &DenseVector) -> Result<DenseVector> {
    if !a.is_finite() {
        return Err(Error::NonFinite("axpy scale"));
    }
    check_same_dim("axpy", x, y)?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&xj, &yj)| a * xj + yj)
        .collect();
    checked_output("axpy", values)
}

pub fn add(x: &DenseVector, y: &DenseVector) -> Result<DenseVector> {
    check_same_dim("add", x, y)?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&xj, &yj)| xj + yj)
        .collect();
    checked_output("add", values)
}

pub fn sub(x: &DenseVector, y: &DenseVector) -> Result<DenseVector> {
    check_same_dim("sub", x, y)?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&xj, &yj)| xj - yj)
        .collect();
    checked_output("sub", values)
}

pub fn scale(a: f64, x: &DenseVector) -> Result<DenseVector> {
    if !a.is_finite() {
        return Err(Error::NonFinite("scale factor"));
    }
    let values = x.values.iter().map(|&xj| a * xj).collect();
    checked_output("scale", values)
}

pub fn dot(x: &DenseVector, y: &DenseVector) -> Result<f64> {
    check_same_dim("dot", x, y)?;
    Ok(x.values
        .iter()
        .zip(&y.values)
        .map(|(&xj, &yj)| xj * yj)
        .sum())
}

/// Euclidean norm, `sqrt(sum x_j^2)`.
pub fn l2_norm(x: &DenseVector) -> f64 {
    x.values.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

pub fn l2_norm_sq(x: &DenseVector) -> f64 {
    x.values.iter().map(|&v| v * v).sum::<f64>()
}

pub fn l2_dist(x: &DenseVector, y: &DenseVector) -> Result<f64> {
    check_same_dim("l2_dist", x, y)?;
    Ok(x.values
        .iter()
        .zip(&y.values)
        .map(|(&xj, &yj)| (xj - yj) * (xj - yj))
        .sum::<f64>()
        .sqrt())
}

pub fn max_abs_diff(x: &DenseVector, y: &DenseVector) -> Result<f64> {
    check_same_dim("max_abs_diff", x, y)?;
    Ok(x.values
        .iter()
        .zip(&y.values)
        .map(|(&xj, &yj)| (xj - yj).abs())
        .fold(0.0, f64::max))
}

/// Mean of a slice of equal-dimension vectors, accumulated in slice order
/// (workers are always passed in ascending index order) and divided by the
/// count once at the end. This is the one canonical reduction used anywhere a
/// sum over workers appears.
pub fn mean_of(vectors: &[DenseVector]) -> Result<DenseVector> {
    let first = vectors.first().ok_or(Error::EmptyMetrics)?;
    let mut acc = vec![0.0; first.dim()];
    for v in vectors {
        check_same_dim("mean_of", first, v)?;
        for (a, &vj) in acc.iter_mut().zip(v.values()) {
            *a += vj;
        }
    }
    let n = vectors.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    checked_output("mean_of", acc)
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// What a stream's randomness is used for. Distinct purposes at the same
/// `(worker, iteration)` are independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Sampling the data / gradient noise realization.
    Data,
    /// Randomness consumed by the worker-side compressor.
    WorkerCompress,
    /// Randomness consumed by the server-side compressor.
    ServerCompress,
    /// Synthetic dataset generation at problem build time.
    DataGen,
    /// Per-worker shard offsets (heterogeneity).
    ShardOffset,
    /// Model / teacher initialization.
    Init,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Data => 1,
            Purpose::WorkerCompress => 2,
            Purpose::ServerCompress => 3,
            Purpose::DataGen => 4,
            Purpose::ShardOffset => 5,
            Purpose::Init => 6,
        }
    }
}

/// Identifies one logical stream within an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub worker: u32,
    pub iteration: u64,
    pub purpose: Purpose,
}

impl StreamId {
    pub fn new(worker: u32, iteration: u64, purpose: Purpose) -> Self {
        StreamId {
            worker,
            iteration,
            purpose,
        }
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based random stream: the i-th output is a pure function of
/// `(seed, stream_id, i)`, so identical `(seed, stream_id)` reproduce the
/// same sequence on every platform and no state is shared between streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut key = mix64(seed ^ GOLDEN);
        for word in [
            (id.worker as u64).wrapping_add(1),
            id.iteration.wrapping_add(1),
            id.purpose.tag(),
        ] {
            key = mix64(key ^ word.wrapping_mul(GOLDEN));
        }
        RngStream { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix64(self.key ^ mix64(c.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via Box-Muller. Consumes exactly two uniforms per call.
    pub fn next_standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_uniform(); // (0, 1], keeps ln finite
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn draw_uniform(&mut self, count: usize) -> Vec<f64> {
        (0..count).map(|_| self.next_uniform()).collect()
    }
}

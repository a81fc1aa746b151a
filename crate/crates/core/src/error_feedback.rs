//! Residual (error-compensation) state and the compensate→compress→update
//! primitive.
//!
//! A node that compresses its outgoing vectors keeps the accumulated
//! compression error `delta`, adds it back onto the next input before
//! compressing, and stores the new error. Per call the mass balance
//!
//! ```text
//! input + delta_before == reconstruct(msg) + delta_after
//! ```
//!
//! holds to machine precision, so nothing is ever dropped — only delayed.
//! The same primitive serves both compensation sites: each worker (input =
//! local stochastic gradient) and the server (input = average of the
//! reconstructed worker messages).

use crate::compression::{compress, reconstruct, CompressedMessage, CompressorSpec};
use crate::error::{Error, Result};
use crate::numerics::{DenseVector, RngStream};

/// Which node owns a residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualOwner {
    Worker(u32),
    Server,
}

/// The error-feedback memory of one node. Starts at zero and always matches
/// the model dimension; stored at full `f64` precision even though messages
/// are compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualState {
    delta: DenseVector,
    owner: ResidualOwner,
}

impl ResidualState {
    pub fn new_zero(dim: usize, owner: ResidualOwner) -> Self {
        ResidualState {
            delta: DenseVector::zeros(dim),
            owner,
        }
    }

    /// Restore a state with an explicit accumulated error.
    pub fn with_delta(delta: DenseVector, owner: ResidualOwner) -> Self {
        ResidualState { delta, owner }
    }

    pub fn delta(&self) -> &DenseVector {
        &self.delta
    }

    pub fn owner(&self) -> ResidualOwner {
        self.owner
    }

    pub fn norm(&self) -> f64 {
        crate::numerics::l2_norm(&self.delta)
    }

    /// Zero the residual (the "initial error" state). Idempotent.
    pub fn reset(&self) -> ResidualState {
        ResidualState::new_zero(self.delta.dim(), self.owner)
    }
}

/// One compensation round: form `v = input + delta`, compress `v`, and store
/// the new residual `v - reconstruct(msg)`.
///
/// Inputs are not modified; the updated state is returned alongside the
/// message.
pub fn compensate_compress_update(
    input: &DenseVector,
    state: &ResidualState,
    spec: &CompressorSpec,
    rng: &mut RngStream,
) -> Result<(CompressedMessage, ResidualState)> {
    if input.dim() != state.delta.dim() {
        return Err(Error::DimensionMismatch {
            context: "compensate_compress_update",
            expected: state.delta.dim(),
            got: input.dim(),
        });
    }
    let compensated = crate::numerics::add(input, &state.delta)?;
    let msg = compress(spec, &compensated, rng)?;
    let recon = reconstruct(&msg)?;
    let new_delta = crate::numerics::sub(&compensated, &recon)?;
    Ok((
        msg,
        ResidualState {
            delta: new_delta,
            owner: state.owner,
        },
    ))
}

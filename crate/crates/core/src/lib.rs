//! Deterministic desk-scale simulator for parameter-server SGD with
//! compressed, error-compensated communication.
//!
//! The crate is organized around the data path of one training iteration:
//!
//! * [`numerics`] — dense `f64` vectors and counter-based random streams;
//!   everything downstream is bit-reproducible because of these two.
//! * [`compression`] — the compression operator catalog (identity, 1-bit
//!   sign, top-k, ternary, stochastic grid quantization, random
//!   sparsification, mantissa clipping) with exact bit-cost accounting and a
//!   canonical byte encoding.
//! * [`error_feedback`] — the residual (compression-error) state kept at each
//!   worker and at the server, and the compensate→compress→update primitive.
//! * [`problems`] — synthetic objectives (diagonal quadratic, logistic
//!   regression, small MLP) with exact full gradients, stochastic gradient
//!   oracles, and per-worker data shards.
//! * [`algorithms`] — one-iteration steppers for the five schemes:
//!   `doublesqueeze`, `memsgd`, `qsgd`, `topk_sgd`, `vanilla`.
//! * [`analysis`] — the update-rule identities as executable checkers:
//!   closed-form update oracle, telescoping conservation, residual-bound and
//!   learning-rate formulas, convergence metric.
//! * [`simulator`] — runs `T` iterations of a configured algorithm, records
//!   per-iteration metrics, and applies the bandwidth/time cost model.

pub mod algorithms;
pub mod analysis;
pub mod compression;
pub mod error;
pub mod error_feedback;
pub mod numerics;
pub mod problems;
pub mod simulator;

pub use error::{Error, Result};

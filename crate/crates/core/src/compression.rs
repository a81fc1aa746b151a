//! Compression operator catalog with exact bit-cost accounting.
//!
//! Every operator takes a [`DenseVector`] and produces a
//! [`CompressedMessage`] that reconstructs deterministically to a vector of
//! the same dimension. Randomized operators draw only from the
//! [`RngStream`] they are given, so a message is a pure function of
//! `(spec, input, stream)`.
//!
//! # Bit costs
//!
//! The cost of a message is the exact payload size under these encodings
//! (values and scales travel as 32-bit reals, dense vectors as 64-bit):
//!
//! | kind              | payload bits                              |
//! |-------------------|-------------------------------------------|
//! | identity          | `64*dim` (see wire convention below)      |
//! | one_bit           | `dim + 32` (sign bitmap + scale)          |
//! | top_k             | `k * (32 + ceil(log2 dim))`               |
//! | ternary           | `2*dim + 32`                              |
//! | random_quantize   | `dim * ceil(log2 levels) + 64` (range)    |
//! | random_sparsify   | `kept * (32 + ceil(log2 dim))`            |
//! | clip              | `dim * (64 - mantissa_bits_zeroed)`       |
//!
//! Random sparsification is billed at its realized kept count, so its cost —
//! alone in the catalog — depends on the draw, not just on `(kind, dim)`.
//!
//! Dense (uncompressed) payloads are `64*dim` bits internally; cost
//! comparisons against compressed links usually assume a 32-bit float wire,
//! so [`CompressedMessage::bit_cost_at_wire`] re-prices dense payloads at a
//! configurable bits-per-real while leaving every compressed kind unchanged.
//!
//! # Canonical bytes
//!
//! [`CompressedMessage::to_bytes`] emits `[form tag: u8][dim: u32 LE]`
//! followed by the payload packed MSB-first with no per-field padding, so
//! `bytes.len() == 5 + ceil(bit_cost / 8)` always holds — the advertised
//! cost is auditable against the serialized length. Encoding through 32-bit
//! fields rounds values to `f32` on the wire; in-memory messages keep full
//! `f64` precision for the residual-feedback arithmetic.

mod bits;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, DenseVector, RngStream};
use bits::{BitReader, BitWriter};

/// Scale used by the ternary quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TernaryScale {
    /// `|v| / |codes|` (l2 norms): the recovered vector keeps the input's
    /// magnitude. Biased.
    #[default]
    NormRatio,
    /// `max_j |v_j|`: makes the quantizer unbiased, `E[s * code_j] = v_j`.
    MaxAbs,
}

/// Which operator to apply, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorSpec {
    Identity,
    OneBit,
    TopK {
        k: usize,
    },
    Ternary {
        #[serde(default)]
        scale_mode: TernaryScale,
    },
    RandomQuantize {
        levels: u32,
    },
    RandomSparsify {
        keep_prob: f64,
    },
    Clip {
        mantissa_bits_zeroed: u8,
        /// Truncate to one decimal digit instead of zeroing mantissa bits —
        /// a worked-example mode, not a real bit saving.
        #[serde(default)]
        decimal_illustration: bool,
    },
}

impl CompressorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CompressorSpec::TopK { k } if k < 1 => {
                Err(Error::InvalidSpec("top_k requires k >= 1".into()))
            }
            CompressorSpec::RandomQuantize { levels } if levels < 2 => Err(Error::InvalidSpec(
                "random_quantize requires levels >= 2".into(),
            )),
            CompressorSpec::RandomSparsify { keep_prob }
                if !(keep_prob > 0.0 && keep_prob <= 1.0) =>
            {
                Err(Error::InvalidSpec(format!(
                    "random_sparsify requires keep_prob in (0, 1], got {keep_prob}"
                )))
            }
            CompressorSpec::Clip {
                mantissa_bits_zeroed,
                ..
            } if mantissa_bits_zeroed > 52 => Err(Error::InvalidSpec(format!(
                "clip requires mantissa_bits_zeroed in [0, 52], got {mantissa_bits_zeroed}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CompressorSpec::Identity => "identity",
            CompressorSpec::OneBit => "one_bit",
            CompressorSpec::TopK { .. } => "top_k",
            CompressorSpec::Ternary { .. } => "ternary",
            CompressorSpec::RandomQuantize { .. } => "random_quantize",
            CompressorSpec::RandomSparsify { .. } => "random_sparsify",
            CompressorSpec::Clip { .. } => "clip",
        }
    }

    /// Contraction factor `alpha^2` with `E|Q(v) - v|^2 <= alpha^2 |v|^2`,
    /// where one is known in closed form for the operator.
    pub fn contraction_alpha_sq(&self, dim: usize) -> Option<f64> {
        match *self {
            CompressorSpec::Identity => Some(0.0),
            CompressorSpec::TopK { k } => {
                let kept = k.min(dim) as f64;
                Some(1.0 - kept / dim as f64)
            }
            _ => None,
        }
    }
}

/// Kind-specific wire payload. Value-bearing fields keep `f64` precision in
/// memory; the canonical byte encoding narrows 32-bit fields to `f32`.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Uncompressed values (identity, and the clip decimal mode).
    Dense { values: Vec<f64> },
    /// Per-element sign bitmap (`true` = negative) plus one scale.
    SignScale { signs: Vec<bool>, scale: f64 },
    /// Index/value pairs, indices strictly increasing (top-k, random
    /// sparsification).
    Sparse { indices: Vec<u32>, values: Vec<f64> },
    /// Codes in {-1, 0, +1} plus one scale.
    Ternary { codes: Vec<i8>, scale: f64 },
    /// Per-element grid codes on `levels` points spanning `[lo, hi]`.
    Grid {
        codes: Vec<u32>,
        lo: f64,
        hi: f64,
        levels: u32,
    },
    /// Values with their low `mantissa_bits` zeroed, stored as the surviving
    /// high bits of each `f64`.
    ClippedBits { values: Vec<f64>, mantissa_bits: u8 },
}

impl Payload {
    fn form_tag(&self) -> u8 {
        match self {
            Payload::Dense { .. } => 0,
            Payload::SignScale { .. } => 1,
            Payload::Sparse { .. } => 2,
            Payload::Ternary { .. } => 3,
            Payload::Grid { .. } => 4,
            Payload::ClippedBits { .. } => 5,
        }
    }
}

/// Bits needed to index / enumerate `n` distinct states (0 for n <= 1).
pub fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros() as u64
    }
}

/// A compressed vector: reconstructs deterministically to dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    dim: usize,
    payload: Payload,
}

impl CompressedMessage {
    pub fn new(dim: usize, payload: Payload) -> Self {
        CompressedMessage { dim, payload }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    /// Exact payload bits under the documented encodings (dense at 64/real).
    pub fn bit_cost(&self) -> u64 {
        let d = self.dim as u64;
        match &self.payload {
            Payload::Dense { .. } => 64 * d,
            Payload::SignScale { .. } => d + 32,
            Payload::Sparse { indices, .. } => indices.len() as u64 * (32 + ceil_log2(d)),
            Payload::Ternary { .. } => 2 * d + 32,
            Payload::Grid { levels, .. } => d * ceil_log2(*levels as u64) + 64,
            Payload::ClippedBits { mantissa_bits, .. } => d * (64 - *mantissa_bits as u64),
        }
    }

    /// Cost with dense payloads re-priced at `bits_per_real` (the simulated
    /// wire convention); compressed payloads are unaffected.
    pub fn bit_cost_at_wire(&self, bits_per_real: u32) -> u64 {
        match &self.payload {
            Payload::Dense { .. } => bits_per_real as u64 * self.dim as u64,
            _ => self.bit_cost(),
        }
    }

    /// Canonical serialization: `[form tag][dim u32 LE][payload bits]`,
    /// zero-padded to a whole byte at the end only.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + (self.bit_cost() as usize).div_ceil(8));
        out.push(self.payload.form_tag());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());

        let mut w = BitWriter::new();
        match &self.payload {
            Payload::Dense { values } => {
                for &v in values {
                    w.write_f64(v);
                }
            }
            Payload::SignScale { signs, scale } => {
                for &s in signs {
                    w.write_bit(s);
                }
                w.write_f32(*scale as f32);
            }
            Payload::Sparse { indices, values } => {
                let idx_bits = ceil_log2(self.dim as u64) as usize;
                for (&i, &v) in indices.iter().zip(values) {
                    w.write_bits(i as u64, idx_bits);
                    w.write_f32(v as f32);
                }
            }
            Payload::Ternary { codes, scale } => {
                for &c in codes {
                    // 00 = zero, 01 = +1, 10 = -1
                    let bits = match c {
                        0 => 0b00,
                        1 => 0b01,
                        _ => 0b10,
                    };
                    w.write_bits(bits, 2);
                }
                w.write_f32(*scale as f32);
            }
            Payload::Grid {
                codes,
                lo,
                hi,
                levels,
            } => {
                let code_bits = ceil_log2(*levels as u64) as usize;
                for &c in codes {
                    w.write_bits(c as u64, code_bits);
                }
                w.write_f32(*lo as f32);
                w.write_f32(*hi as f32);
            }
            Payload::ClippedBits {
                values,
                mantissa_bits,
            } => {
                let keep = 64 - *mantissa_bits as usize;
                for &v in values {
                    w.write_bits(v.to_bits() >> *mantissa_bits, keep);
                }
            }
        }
        debug_assert_eq!(w.bit_len() as u64, self.bit_cost());
        out.extend_from_slice(&w.into_bytes());
        out
    }

    /// Parse canonical bytes. The compressor spec argument supplies
    /// out-of-band parameters (levels, mantissa bits) that the cost-exact
    /// encoding does not carry. 32-bit wire fields come back at `f32`
    /// precision.
    pub fn from_bytes(spec: &CompressorSpec, bytes: &[u8]) -> Result<Self> {
        spec.validate()?;
        if bytes.len() < 5 {
            return Err(Error::MalformedPayload(
                "header shorter than 5 bytes".into(),
            ));
        }
        let tag = bytes[0];
        let dim = u32::from_le_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]) as usize;
        if dim == 0 {
            return Err(Error::MalformedPayload("zero dimension".into()));
        }
        let expected_tag = match spec {
            CompressorSpec::Identity => 0,
            CompressorSpec::OneBit => 1,
            CompressorSpec::TopK { .. } | CompressorSpec::RandomSparsify { .. } => 2,
            CompressorSpec::Ternary { .. } => 3,
            CompressorSpec::RandomQuantize { .. } => 4,
            CompressorSpec::Clip {
                decimal_illustration,
                ..
            } => {
                if *decimal_illustration {
                    0
                } else {
                    5
                }
            }
        };
        if tag != expected_tag {
            return Err(Error::MalformedPayload(format!(
                "form tag {tag} does not match spec kind `{}`",
                spec.kind_name()
            )));
        }

        let mut r = BitReader::new(&bytes[5..]);
        let payload = match tag {
            0 => {
                let mut values = Vec::with_capacity(dim);
                for _ in 0..dim {
                    values.push(r.read_f64()?);
                }
                Payload::Dense { values }
            }
            1 => {
                let mut signs = Vec::with_capacity(dim);
                for _ in 0..dim {
                    signs.push(r.read_bit()?);
                }
                let scale = r.read_f32()? as f64;
                Payload::SignScale { signs, scale }
            }
            2 => {
                let idx_bits = ceil_log2(dim as u64) as usize;
                let entry_bits = idx_bits + 32;
                let count = r.remaining_bits() / entry_bits;
                let mut indices = Vec::with_capacity(count);
                let mut values = Vec::with_capacity(count);
                for _ in 0..count {
                    indices.push(r.read_bits(idx_bits)? as u32);
                    values.push(r.read_f32()? as f64);
                }
                if indices.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::MalformedPayload(
                        "sparse indices not strictly increasing".into(),
                    ));
                }
                if indices.iter().any(|&i| i as usize >= dim) {
                    return Err(Error::MalformedPayload("sparse index out of range".into()));
                }
                Payload::Sparse { indices, values }
            }
            3 => {
                let mut codes = Vec::with_capacity(dim);
                for _ in 0..dim {
                    codes.push(match r.read_bits(2)? {
                        0b00 => 0i8,
                        0b01 => 1,
                        0b10 => -1,
                        other => {
                            return Err(Error::MalformedPayload(format!(
                                "invalid ternary code bits {other:#04b}"
                            )))
                        }
                    });
                }
                let scale = r.read_f32()? as f64;
                Payload::Ternary { codes, scale }
            }
            4 => {
                let levels = match spec {
                    CompressorSpec::RandomQuantize { levels } => *levels,
                    _ => unreachable!(),
                };
                let code_bits = ceil_log2(levels as u64) as usize;
                let mut codes = Vec::with_capacity(dim);
                for _ in 0..dim {
                    let c = r.read_bits(code_bits)? as u32;
                    if c >= levels {
                        return Err(Error::MalformedPayload(format!(
                            "grid code {c} out of range for {levels} levels"
                        )));
                    }
                    codes.push(c);
                }
                let lo = r.read_f32()? as f64;
                let hi = r.read_f32()? as f64;
                Payload::Grid {
                    codes,
                    lo,
                    hi,
                    levels,
                }
            }
            5 => {
                let m = match spec {
                    CompressorSpec::Clip {
                        mantissa_bits_zeroed,
                        ..
                    } => *mantissa_bits_zeroed,
                    _ => unreachable!(),
                };
                let keep = 64 - m as usize;
                let mut values = Vec::with_capacity(dim);
                for _ in 0..dim {
                    values.push(f64::from_bits(r.read_bits(keep)? << m));
                }
                Payload::ClippedBits {
                    values,
                    mantissa_bits: m,
                }
            }
            other => {
                return Err(Error::MalformedPayload(format!("unknown form tag {other}")));
            }
        };
        if r.remaining_bits() >= 8 {
            return Err(Error::MalformedPayload("trailing payload bytes".into()));
        }
        Ok(CompressedMessage { dim, payload })
    }
}

/// Apply the operator described by `spec`. Deterministic kinds leave `rng`
/// untouched.
pub fn compress(
    spec: &CompressorSpec,
    v: &DenseVector,
    rng: &mut RngStream,
) -> Result<CompressedMessage> {
    spec.validate()?;
    match *spec {
        CompressorSpec::Identity => Ok(CompressedMessage::new(
            v.dim(),
            Payload::Dense {
                values: v.values().to_vec(),
            },
        )),
        CompressorSpec::OneBit => Ok(one_bit_quantize(v)),
        CompressorSpec::TopK { k } => top_k_sparsify(v, k),
        CompressorSpec::Ternary { scale_mode } => Ok(ternary_quantize(v, scale_mode, rng)),
        CompressorSpec::RandomQuantize { levels } => randomized_quantize(v, levels, rng),
        CompressorSpec::RandomSparsify { keep_prob } => random_sparsify(v, keep_prob, rng),
        CompressorSpec::Clip {
            mantissa_bits_zeroed,
            decimal_illustration,
        } => {
            if decimal_illustration {
                Ok(clip_decimal_illustration(v))
            } else {
                clip_low_bits(v, mantissa_bits_zeroed)
            }
        }
    }
}

/// Decompress. Deterministic and dimension-preserving; for the identity
/// operator `reconstruct(compress(v)) == v` bit-exactly.
pub fn reconstruct(msg: &CompressedMessage) -> Result<DenseVector> {
    let dim = msg.dim;
    if dim == 0 {
        return Err(Error::MalformedPayload("zero dimension".into()));
    }
    let values = match &msg.payload {
        Payload::Dense { values } | Payload::ClippedBits { values, .. } => {
            if values.len() != dim {
                return Err(Error::MalformedPayload(format!(
                    "dense payload has {} values for dim {dim}",
                    values.len()
                )));
            }
            values.clone()
        }
        Payload::SignScale { signs, scale } => {
            if signs.len() != dim {
                return Err(Error::MalformedPayload(format!(
                    "sign bitmap has {} entries for dim {dim}",
                    signs.len()
                )));
            }
            signs
                .iter()
                .map(|&neg| if neg { -scale } else { *scale })
                .collect()
        }
        Payload::Sparse { indices, values } => {
            if indices.len() != values.len() {
                return Err(Error::MalformedPayload(
                    "sparse index/value length mismatch".into(),
                ));
            }
            if indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::MalformedPayload(
                    "sparse indices not strictly increasing".into(),
                ));
            }
            let mut out = vec![0.0; dim];
            for (&i, &val) in indices.iter().zip(values) {
                let slot = out.get_mut(i as usize).ok_or_else(|| {
                    Error::MalformedPayload(format!("sparse index {i} out of range for dim {dim}"))
                })?;
                *slot = val;
            }
            out
        }
        Payload::Ternary { codes, scale } => {
            if codes.len() != dim {
                return Err(Error::MalformedPayload(format!(
                    "ternary payload has {} codes for dim {dim}",
                    codes.len()
                )));
            }
            if codes.iter().any(|c| !(-1..=1).contains(c)) {
                return Err(Error::MalformedPayload(
                    "ternary code outside {-1,0,1}".into(),
                ));
            }
            codes.iter().map(|&c| c as f64 * scale).collect()
        }
        Payload::Grid {
            codes,
            lo,
            hi,
            levels,
        } => {
            if codes.len() != dim {
                return Err(Error::MalformedPayload(format!(
                    "grid payload has {} codes for dim {dim}",
                    codes.len()
                )));
            }
            if *levels < 2 {
                return Err(Error::MalformedPayload("grid with < 2 levels".into()));
            }
            if codes.iter().any(|&c| c >= *levels) {
                return Err(Error::MalformedPayload("grid code out of range".into()));
            }
            let step = (hi - lo) / (*levels - 1) as f64;
            codes
                .iter()
                .map(|&c| {
                    // Endpoints reproduce exactly; interior points via the grid step.
                    if c == 0 {
                        *lo
                    } else if c == *levels - 1 {
                        *hi
                    } else {
                        lo + c as f64 * step
                    }
                })
                .collect()
        }
    };
    DenseVector::from_values(values)
}

/// `|v| * sign(v)` with one scale: sign bitmap plus `s = |v|_2 / |sign(v)|_2`.
/// `sign(0) = +1`; the zero vector gets scale 0.
pub fn one_bit_quantize(v: &DenseVector) -> CompressedMessage {
    let norm = l2_norm(v);
    // sign(v) has every entry +-1, so |sign(v)|_2 = sqrt(dim).
    let scale = if norm == 0.0 {
        0.0
    } else {
        norm / (v.dim() as f64).sqrt()
    };
    let signs = v.values().iter().map(|&x| x < 0.0).collect();
    CompressedMessage::new(v.dim(), Payload::SignScale { signs, scale })
}

/// Keep the `k` largest-magnitude entries (ties broken by lowest index),
/// zero the rest. Retained entries are stored exactly.
pub fn top_k_sparsify(v: &DenseVector, k: usize) -> Result<CompressedMessage> {
    if k < 1 {
        return Err(Error::InvalidSpec("top_k requires k >= 1".into()));
    }
    let dim = v.dim();
    let keep = k.min(dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_unstable_by(|&a, &b| {
        v.get(b)
            .abs()
            .partial_cmp(&v.get(a).abs())
            .expect("finite magnitudes")
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..keep].to_vec();
    selected.sort_unstable();
    let indices: Vec<u32> = selected.iter().map(|&i| i as u32).collect();
    let values: Vec<f64> = selected.iter().map(|&i| v.get(i)).collect();
    Ok(CompressedMessage::new(
        dim,
        Payload::Sparse { indices, values },
    ))
}

/// Quantize to codes in {-1, 0, +1}: with `m = max_j |v_j|`, element `j`
/// becomes `sign(v_j)` with probability `|v_j| / m`, else 0. The max-magnitude
/// element is always kept, so for nonzero input the code vector is nonzero.
pub fn ternary_quantize(
    v: &DenseVector,
    scale_mode: TernaryScale,
    rng: &mut RngStream,
) -> CompressedMessage {
    let m = v.values().iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
    if m == 0.0 {
        return CompressedMessage::new(
            v.dim(),
            Payload::Ternary {
                codes: vec![0; v.dim()],
                scale: 0.0,
            },
        );
    }
    let codes: Vec<i8> = v
        .values()
        .iter()
        .map(|&x| {
            let keep_prob = x.abs() / m;
            if rng.next_uniform() < keep_prob {
                if x < 0.0 {
                    -1
                } else {
                    1
                }
            } else {
                0
            }
        })
        .collect();
    let scale = match scale_mode {
        TernaryScale::MaxAbs => m,
        TernaryScale::NormRatio => {
            let code_norm = (codes.iter().filter(|&&c| c != 0).count() as f64).sqrt();
            l2_norm(v) / code_norm
        }
    };
    CompressedMessage::new(v.dim(), Payload::Ternary { codes, scale })
}

/// Stochastic rounding onto a per-message uniform grid of `levels` points
/// spanning `[min(v), max(v)]`: a value `z` between adjacent grid points
/// `a <= z <= b` rounds up with probability `(z - a)/(b - a)`, which makes
/// the operator unbiased. A constant vector (degenerate range) reproduces
/// exactly.
pub fn randomized_quantize(
    v: &DenseVector,
    levels: u32,
    rng: &mut RngStream,
) -> Result<CompressedMessage> {
    if levels < 2 {
        return Err(Error::InvalidSpec(
            "random_quantize requires levels >= 2".into(),
        ));
    }
    let lo = v.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let codes: Vec<u32> = if lo == hi {
        vec![0; v.dim()]
    } else {
        let step = (hi - lo) / (levels - 1) as f64;
        v.values()
            .iter()
            .map(|&z| {
                let t = (z - lo) / step;
                let cell = (t.floor() as u32).min(levels - 2);
                let frac = t - cell as f64;
                cell + (rng.next_uniform() < frac) as u32
            })
            .collect()
    };
    Ok(CompressedMessage::new(
        v.dim(),
        Payload::Grid {
            codes,
            lo,
            hi,
            levels,
        },
    ))
}

/// Keep each element independently with probability `p`, rescaled to `z/p`
/// so the operator is unbiased; dropped elements become 0.
pub fn random_sparsify(
    v: &DenseVector,
    keep_prob: f64,
    rng: &mut RngStream,
) -> Result<CompressedMessage> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "random_sparsify requires keep_prob in (0, 1], got {keep_prob}"
        )));
    }
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, &z) in v.values().iter().enumerate() {
        if rng.next_uniform() < keep_prob {
            indices.push(i as u32);
            values.push(z / keep_prob);
        }
    }
    Ok(CompressedMessage::new(
        v.dim(),
        Payload::Sparse { indices, values },
    ))
}

/// Zero the lowest `m` mantissa bits of each element's `f64` representation.
/// For normal values the relative error is at most `2^(m-52)`; powers of two
/// pass through unchanged for any `m`.
pub fn clip_low_bits(v: &DenseVector, mantissa_bits_zeroed: u8) -> Result<CompressedMessage> {
    if mantissa_bits_zeroed > 52 {
        return Err(Error::InvalidSpec(format!(
            "clip requires mantissa_bits_zeroed in [0, 52], got {mantissa_bits_zeroed}"
        )));
    }
    let mask = if mantissa_bits_zeroed == 0 {
        u64::MAX
    } else {
        !((1u64 << mantissa_bits_zeroed) - 1)
    };
    let values = v
        .values()
        .iter()
        .map(|&x| f64::from_bits(x.to_bits() & mask))
        .collect();
    Ok(CompressedMessage::new(
        v.dim(),
        Payload::ClippedBits {
            values,
            mantissa_bits: mantissa_bits_zeroed,
        },
    ))
}

/// Decimal illustration mode: truncate each value toward zero at one decimal
/// place (1.23456 -> 1.2).
pub fn clip_decimal_illustration(v: &DenseVector) -> CompressedMessage {
    let values = v
        .values()
        .iter()
        .map(|&x| (x * 10.0).trunc() / 10.0)
        .collect();
    CompressedMessage::new(v.dim(), Payload::Dense { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_norm_sq, Purpose, StreamId};

    fn stream(tag: u64) -> RngStream {
        RngStream::new(
            0xC0FFEE ^ tag,
            StreamId::new(0, tag, Purpose::WorkerCompress),
        )
    }

    fn vector(values: &[f64]) -> DenseVector {
        DenseVector::from_values(values.to_vec()).unwrap()
    }

    /// Independent oracle for top-k: sort (|value|, index) pairs by magnitude
    /// descending with lowest index winning ties, keep the first k.
    fn top_k_oracle(v: &[f64], k: usize) -> Vec<f64> {
        let mut pairs: Vec<(usize, f64)> = v.iter().cloned().enumerate().collect();
        pairs.sort_by(|a, b| {
            b.1.abs()
                .partial_cmp(&a.1.abs())
                .unwrap()
                .then(a.0.cmp(&b.0))
        });
        let mut out = vec![0.0; v.len()];
        for &(i, val) in pairs.iter().take(k.min(v.len())) {
            out[i] = val;
        }
        out
    }

    #[test]
    fn identity_roundtrip_exact() {
        let v = vector(&[1.0, -2.0, 3.0]);
        let msg = compress(&CompressorSpec::Identity, &v, &mut stream(0)).unwrap();
        assert_eq!(reconstruct(&msg).unwrap(), v);
        let single = vector(&[7.0]);
        let msg = compress(&CompressorSpec::Identity, &single, &mut stream(0)).unwrap();
        assert_eq!(reconstruct(&msg).unwrap(), single);
    }

    #[test]
    fn top_k_examples() {
        let v = vector(&[3.0, -5.0, 1.0, 2.0]);
        let msg = top_k_sparsify(&v, 2).unwrap();
        assert_eq!(reconstruct(&msg).unwrap().values(), &[3.0, -5.0, 0.0, 0.0]);

        // Ties broken by lowest index.
        let ties = vector(&[1.0, -1.0, 1.0]);
        let msg = top_k_sparsify(&ties, 2).unwrap();
        assert_eq!(reconstruct(&msg).unwrap().values(), &[1.0, -1.0, 0.0]);

        // k >= dim degenerates to the identity.
        let msg = top_k_sparsify(&v, 4).unwrap();
        assert_eq!(reconstruct(&msg).unwrap(), v);
        let msg = top_k_sparsify(&v, 100).unwrap();
        assert_eq!(reconstruct(&msg).unwrap(), v);

        assert!(top_k_sparsify(&v, 0).is_err());
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = stream(1);
        for dim in [1usize, 2, 7, 33] {
            for k in [1usize, 2, 5, 40] {
                let v = DenseVector::from_values(
                    (0..dim).map(|_| rng.next_uniform() * 2.0 - 1.0).collect(),
                )
                .unwrap();
                let got = reconstruct(&top_k_sparsify(&v, k).unwrap()).unwrap();
                assert_eq!(got.values(), top_k_oracle(v.values(), k).as_slice());
            }
        }
    }

    #[test]
    fn top_k_contraction_bound() {
        let mut rng = stream(2);
        for _ in 0..200 {
            let dim = 16;
            let k = 1 + (rng.next_u64() % 16) as usize;
            let v =
                DenseVector::from_values((0..dim).map(|_| rng.next_standard_normal()).collect())
                    .unwrap();
            let recon = reconstruct(&top_k_sparsify(&v, k).unwrap()).unwrap();
            let err = crate::numerics::sub(&recon, &v).unwrap();
            let alpha_sq = 1.0 - (k.min(dim) as f64) / dim as f64;
            assert!(
                l2_norm_sq(&err) <= alpha_sq * l2_norm_sq(&v) + 1e-12,
                "contraction violated: k={k}"
            );
        }
    }

    #[test]
    fn one_bit_examples() {
        let zero = DenseVector::zeros(4);
        let recon = reconstruct(&one_bit_quantize(&zero)).unwrap();
        assert!(recon.is_zero());

        let one_d = vector(&[5.0]);
        assert_eq!(
            reconstruct(&one_bit_quantize(&one_d)).unwrap().values(),
            &[5.0]
        );

        // Scale oracle from norm arithmetic: |(2,-3)| / |(1,-1)| = sqrt(13/2).
        let v = vector(&[2.0, -3.0]);
        let s = (13.0f64 / 2.0).sqrt();
        let recon = reconstruct(&one_bit_quantize(&v)).unwrap();
        assert!((recon.get(0) - s).abs() < 1e-15);
        assert!((recon.get(1) + s).abs() < 1e-15);
        assert!((s - 2.5495).abs() < 1e-4);
    }

    #[test]
    fn one_bit_sign_of_zero_is_positive() {
        let v = vector(&[0.0, -1.0]);
        let recon = reconstruct(&one_bit_quantize(&v)).unwrap();
        assert!(recon.get(0) > 0.0);
        assert!(recon.get(1) < 0.0);
    }

    #[test]
    fn ternary_all_equal_magnitudes_keeps_signs() {
        let v = vector(&[2.0, -2.0, 2.0]);
        for mode in [TernaryScale::MaxAbs, TernaryScale::NormRatio] {
            let msg = ternary_quantize(&v, mode, &mut stream(3));
            // keep probability is exactly 1 for every element
            let recon = reconstruct(&msg).unwrap();
            assert_eq!(recon.values(), &[2.0, -2.0, 2.0]);
        }
    }

    #[test]
    fn ternary_zero_vector() {
        let msg = ternary_quantize(&DenseVector::zeros(3), TernaryScale::MaxAbs, &mut stream(4));
        assert!(reconstruct(&msg).unwrap().is_zero());
        match msg.payload() {
            Payload::Ternary { codes, scale } => {
                assert_eq!(codes.as_slice(), &[0, 0, 0]);
                assert_eq!(*scale, 0.0);
            }
            other => panic!("unexpected payload {other:?}"),
        }
    }

    #[test]
    fn ternary_max_abs_bernoulli_law() {
        // Monte-Carlo oracle for the stated Bernoulli law: element with value
        // 0.3*m reconstructs to m with probability 0.3, so the mean is 0.3*m.
        let m = 2.0;
        let v = vector(&[m, 0.3 * m, -0.3 * m]);
        let n = 100_000;
        let mut sums = [0.0f64; 3];
        let mut sumsq = [0.0f64; 3];
        let mut rng = stream(5);
        for _ in 0..n {
            let recon = reconstruct(&ternary_quantize(&v, TernaryScale::MaxAbs, &mut rng)).unwrap();
            for j in 0..3 {
                sums[j] += recon.get(j);
                sumsq[j] += recon.get(j) * recon.get(j);
            }
        }
        for j in 0..3 {
            let mean = sums[j] / n as f64;
            let var = (sumsq[j] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - v.get(j)).abs() <= 4.0 * se + 1e-12,
                "element {j}: mean {mean} vs {} (se {se})",
                v.get(j)
            );
        }
    }

    #[test]
    fn random_quantize_grid_point_is_deterministic() {
        // All entries sit exactly on the grid {0, 1, 2}.
        let v = vector(&[0.0, 1.0, 2.0]);
        let mut rng = stream(6);
        for _ in 0..100 {
            let msg = randomized_quantize(&v, 3, &mut rng).unwrap();
            assert_eq!(reconstruct(&msg).unwrap(), v);
        }
    }

    #[test]
    fn random_quantize_constant_vector_exact() {
        let v = vector(&[0.7, 0.7, 0.7]);
        let msg = randomized_quantize(&v, 4, &mut stream(7)).unwrap();
        assert_eq!(reconstruct(&msg).unwrap(), v);
    }

    #[test]
    fn random_quantize_bernoulli_law() {
        // z = 0.3 on grid {0, 1}: rounds to 1 with probability 0.3.
        let v = vector(&[0.0, 1.0, 0.3]);
        let n = 100_000;
        let mut hits = 0u64;
        let mut rng = stream(8);
        for _ in 0..n {
            let recon = reconstruct(&randomized_quantize(&v, 2, &mut rng).unwrap()).unwrap();
            assert_eq!(recon.get(0), 0.0);
            assert_eq!(recon.get(1), 1.0);
            if recon.get(2) == 1.0 {
                hits += 1;
            } else {
                assert_eq!(recon.get(2), 0.0);
            }
        }
        let p = hits as f64 / n as f64;
        let se = (0.3 * 0.7 / n as f64).sqrt();
        assert!((p - 0.3).abs() <= 4.0 * se, "P(1) = {p}");
        assert!(randomized_quantize(&v, 1, &mut rng).is_err());
    }

    #[test]
    fn random_sparsify_p_one_is_identity() {
        let v = vector(&[1.5, -2.5, 0.0]);
        let msg = random_sparsify(&v, 1.0, &mut stream(9)).unwrap();
        assert_eq!(reconstruct(&msg).unwrap(), v);

        let zero = DenseVector::zeros(5);
        let msg = random_sparsify(&zero, 0.3, &mut stream(10)).unwrap();
        assert!(reconstruct(&msg).unwrap().is_zero());

        assert!(random_sparsify(&v, 0.0, &mut stream(11)).is_err());
        assert!(random_sparsify(&v, 1.5, &mut stream(11)).is_err());
    }

    #[test]
    fn random_sparsify_bernoulli_oracle() {
        // v = [1], p = 0.25: reconstruction is 4 w.p. 0.25 else 0, mean 1.
        let v = vector(&[1.0]);
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
        let mut rng = stream(12);
        for _ in 0..n {
            let r = reconstruct(&random_sparsify(&v, 0.25, &mut rng).unwrap()).unwrap();
            sum += r.get(0);
            sumsq += r.get(0) * r.get(0);
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 4.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn clip_zero_bits_is_identity() {
        let v = vector(&[1.23456789, -9.87654321, 0.1]);
        let msg = clip_low_bits(&v, 0).unwrap();
        assert_eq!(reconstruct(&msg).unwrap(), v);
        assert!(clip_low_bits(&v, 53).is_err());
    }

    #[test]
    fn clip_preserves_powers_of_two() {
        // Bit-manipulation oracle: a power of two has an all-zero mantissa.
        for m in [1u8, 8, 26, 52] {
            for &p in &[1.0, 2.0, 0.5, 1024.0, -4.0, 2.0f64.powi(-20)] {
                assert_eq!(
                    p.to_bits() & ((1u64 << 52) - 1),
                    0,
                    "oracle: mantissa of {p}"
                );
                let v = vector(&[p]);
                let recon = reconstruct(&clip_low_bits(&v, m).unwrap()).unwrap();
                assert_eq!(recon.get(0), p);
            }
        }
    }

    #[test]
    fn clip_relative_error_bound() {
        let mut rng = stream(13);
        for m in [4u8, 13, 33, 52] {
            for _ in 0..100 {
                let x = (rng.next_uniform() - 0.5) * 1e3;
                let v = vector(&[x]);
                let recon = reconstruct(&clip_low_bits(&v, m).unwrap()).unwrap();
                let bound = 2.0f64.powi(m as i32 - 52) * x.abs();
                assert!((recon.get(0) - x).abs() <= bound, "m={m}, x={x}");
            }
        }
    }

    #[test]
    fn clip_decimal_illustration_example() {
        let v = vector(&[1.23456]);
        let spec = CompressorSpec::Clip {
            mantissa_bits_zeroed: 0,
            decimal_illustration: true,
        };
        let msg = compress(&spec, &v, &mut stream(14)).unwrap();
        assert_eq!(reconstruct(&msg).unwrap().values(), &[1.2]);
    }

    #[test]
    fn bit_cost_formulas() {
        let d = 1usize << 20;
        let big = DenseVector::zeros(d);

        let identity = compress(&CompressorSpec::Identity, &big, &mut stream(15)).unwrap();
        assert_eq!(identity.bit_cost(), 64 * d as u64);
        assert_eq!(identity.bit_cost_at_wire(32), 32 * d as u64);

        let one_bit = one_bit_quantize(&DenseVector::zeros(1_000_000));
        assert_eq!(one_bit.bit_cost(), 1_000_032);
        assert_eq!(one_bit.bit_cost_at_wire(32), 1_000_032);

        let mut spiky = vec![0.0; d];
        for (i, slot) in spiky.iter_mut().enumerate().take(100) {
            *slot = (i + 1) as f64;
        }
        let topk = top_k_sparsify(&DenseVector::from_values(spiky).unwrap(), 100).unwrap();
        assert_eq!(topk.bit_cost(), 100 * (32 + 20));

        let v10 = DenseVector::constant(10, 1.0).unwrap();
        let ternary = ternary_quantize(&v10, TernaryScale::MaxAbs, &mut stream(16));
        assert_eq!(ternary.bit_cost(), 2 * 10 + 32);

        let grid = randomized_quantize(&v10, 6, &mut stream(17)).unwrap();
        assert_eq!(grid.bit_cost(), 10 * 3 + 64);

        let clip = clip_low_bits(&v10, 20).unwrap();
        assert_eq!(clip.bit_cost(), 10 * 44);
    }

    #[test]
    fn bit_cost_is_value_independent_for_fixed_cost_kinds() {
        let mut rng = stream(18);
        let dim = 23;
        let a = DenseVector::from_values((0..dim).map(|_| rng.next_standard_normal()).collect())
            .unwrap();
        let b = DenseVector::from_values((0..dim).map(|_| rng.next_standard_normal()).collect())
            .unwrap();
        for spec in [
            CompressorSpec::Identity,
            CompressorSpec::OneBit,
            CompressorSpec::TopK { k: 5 },
            CompressorSpec::Ternary {
                scale_mode: TernaryScale::MaxAbs,
            },
            CompressorSpec::RandomQuantize { levels: 5 },
            CompressorSpec::Clip {
                mantissa_bits_zeroed: 13,
                decimal_illustration: false,
            },
        ] {
            let ca = compress(&spec, &a, &mut stream(19)).unwrap().bit_cost();
            let cb = compress(&spec, &b, &mut stream(20)).unwrap().bit_cost();
            assert_eq!(ca, cb, "{}", spec.kind_name());
        }
    }

    #[test]
    fn serialized_length_matches_bit_cost() {
        let mut rng = stream(21);
        let v = DenseVector::from_values((0..37).map(|_| rng.next_standard_normal()).collect())
            .unwrap();
        for spec in all_specs() {
            let msg = compress(&spec, &v, &mut stream(22)).unwrap();
            let bytes = msg.to_bytes();
            assert_eq!(
                bytes.len() as u64,
                5 + msg.bit_cost().div_ceil(8),
                "{}",
                spec.kind_name()
            );
        }
    }

    #[test]
    fn same_stream_same_bytes() {
        let mut rng = stream(23);
        let v = DenseVector::from_values((0..16).map(|_| rng.next_standard_normal()).collect())
            .unwrap();
        for spec in all_specs() {
            let m1 = compress(&spec, &v, &mut stream(77)).unwrap();
            let m2 = compress(&spec, &v, &mut stream(77)).unwrap();
            assert_eq!(m1.to_bytes(), m2.to_bytes(), "{}", spec.kind_name());
        }
    }

    #[test]
    fn from_bytes_roundtrip() {
        let mut rng = stream(24);
        let v = DenseVector::from_values((0..19).map(|_| rng.next_standard_normal()).collect())
            .unwrap();
        for spec in all_specs() {
            let msg = compress(&spec, &v, &mut stream(25)).unwrap();
            let parsed = CompressedMessage::from_bytes(&spec, &msg.to_bytes()).unwrap();
            assert_eq!(parsed.dim(), msg.dim());
            let a = reconstruct(&msg).unwrap();
            let b = reconstruct(&parsed).unwrap();
            // Wire fields are f32, so compare loosely; dense fields are exact.
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!(
                    (x - y).abs() <= 1e-6 * (1.0 + x.abs()),
                    "{}",
                    spec.kind_name()
                );
            }
        }
    }

    #[test]
    fn from_bytes_rejects_malformed() {
        let v = vector(&[1.0, 2.0, 3.0]);
        let msg = top_k_sparsify(&v, 2).unwrap();
        let bytes = msg.to_bytes();

        // Truncated header.
        assert!(
            CompressedMessage::from_bytes(&CompressorSpec::TopK { k: 2 }, &bytes[..3]).is_err()
        );
        // Tag mismatch.
        assert!(CompressedMessage::from_bytes(&CompressorSpec::OneBit, &bytes).is_err());

        // Duplicate / non-increasing sparse indices.
        let dup = CompressedMessage::new(
            3,
            Payload::Sparse {
                indices: vec![1, 1],
                values: vec![1.0, 2.0],
            },
        );
        assert!(reconstruct(&dup).is_err());
        assert!(
            CompressedMessage::from_bytes(&CompressorSpec::TopK { k: 2 }, &dup.to_bytes()).is_err()
        );

        // Out-of-range sparse index.
        let oob = CompressedMessage::new(
            3,
            Payload::Sparse {
                indices: vec![7],
                values: vec![1.0],
            },
        );
        assert!(reconstruct(&oob).is_err());
    }

    #[test]
    fn round_trip_preserves_dim_for_every_spec() {
        let mut rng = stream(26);
        for dim in [1usize, 2, 9, 64] {
            let v =
                DenseVector::from_values((0..dim).map(|_| rng.next_standard_normal()).collect())
                    .unwrap();
            for spec in all_specs() {
                let msg = compress(&spec, &v, &mut stream(27)).unwrap();
                assert_eq!(
                    reconstruct(&msg).unwrap().dim(),
                    dim,
                    "{}",
                    spec.kind_name()
                );
            }
        }
    }

    fn all_specs() -> Vec<CompressorSpec> {
        vec![
            CompressorSpec::Identity,
            CompressorSpec::OneBit,
            CompressorSpec::TopK { k: 3 },
            CompressorSpec::Ternary {
                scale_mode: TernaryScale::NormRatio,
            },
            CompressorSpec::Ternary {
                scale_mode: TernaryScale::MaxAbs,
            },
            CompressorSpec::RandomQuantize { levels: 7 },
            CompressorSpec::RandomSparsify { keep_prob: 0.4 },
            CompressorSpec::Clip {
                mantissa_bits_zeroed: 30,
                decimal_illustration: false,
            },
            CompressorSpec::Clip {
                mantissa_bits_zeroed: 0,
                decimal_illustration: true,
            },
        ]
    }
}

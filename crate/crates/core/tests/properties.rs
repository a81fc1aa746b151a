//! Property-based invariants for the compression catalog and the
//! error-feedback primitive.

use proptest::prelude::*;

use gradsqueeze_core::compression::{
    compress, reconstruct, CompressedMessage, CompressorSpec, TernaryScale,
};
use gradsqueeze_core::error_feedback::{compensate_compress_update, ResidualOwner, ResidualState};
use gradsqueeze_core::numerics::{add, l2_norm_sq, sub, DenseVector, Purpose, RngStream, StreamId};

fn vector_strategy(max_dim: usize) -> impl Strategy<Value = DenseVector> {
    prop::collection::vec(-1e6f64..1e6f64, 1..=max_dim)
        .prop_map(|v| DenseVector::from_values(v).unwrap())
}

fn spec_strategy() -> impl Strategy<Value = CompressorSpec> {
    prop_oneof![
        Just(CompressorSpec::Identity),
        Just(CompressorSpec::OneBit),
        (1usize..80).prop_map(|k| CompressorSpec::TopK { k }),
        prop_oneof![Just(TernaryScale::NormRatio), Just(TernaryScale::MaxAbs)]
            .prop_map(|scale_mode| CompressorSpec::Ternary { scale_mode }),
        (2u32..64).prop_map(|levels| CompressorSpec::RandomQuantize { levels }),
        (0.05f64..=1.0).prop_map(|keep_prob| CompressorSpec::RandomSparsify { keep_prob }),
        (0u8..=52).prop_map(|mantissa_bits_zeroed| CompressorSpec::Clip {
            mantissa_bits_zeroed,
            decimal_illustration: false,
        }),
    ]
}

fn stream(seed: u64) -> RngStream {
    RngStream::new(seed, StreamId::new(0, 0, Purpose::WorkerCompress))
}

proptest! {
    /// Round-trip preserves the dimension for every operator.
    #[test]
    fn round_trip_preserves_dim(v in vector_strategy(48), spec in spec_strategy(), seed in any::<u64>()) {
        let msg = compress(&spec, &v, &mut stream(seed)).unwrap();
        prop_assert_eq!(msg.dim(), v.dim());
        prop_assert_eq!(reconstruct(&msg).unwrap().dim(), v.dim());
    }

    /// Identity compression is bit-exact for all finite inputs.
    #[test]
    fn identity_round_trip_exact(v in vector_strategy(48)) {
        let msg = compress(&CompressorSpec::Identity, &v, &mut stream(0)).unwrap();
        prop_assert_eq!(reconstruct(&msg).unwrap(), v);
    }

    /// Top-k error never exceeds the (1 - k/d) contraction bound.
    #[test]
    fn top_k_contraction(v in vector_strategy(48), k in 1usize..64) {
        let msg = compress(&CompressorSpec::TopK { k }, &v, &mut stream(0)).unwrap();
        let err = sub(&reconstruct(&msg).unwrap(), &v).unwrap();
        let alpha_sq = 1.0 - (k.min(v.dim()) as f64) / v.dim() as f64;
        prop_assert!(l2_norm_sq(&err) <= alpha_sq * l2_norm_sq(&v) * (1.0 + 1e-12) + 1e-12);
    }

    /// Identical (spec, input, stream) triples serialize to identical bytes.
    #[test]
    fn deterministic_bytes(v in vector_strategy(32), spec in spec_strategy(), seed in any::<u64>()) {
        let a = compress(&spec, &v, &mut stream(seed)).unwrap();
        let b = compress(&spec, &v, &mut stream(seed)).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    /// Serialized length is the advertised bit cost padded to whole bytes,
    /// plus the 5-byte header.
    #[test]
    fn serialized_length_is_bit_cost(v in vector_strategy(32), spec in spec_strategy(), seed in any::<u64>()) {
        let msg = compress(&spec, &v, &mut stream(seed)).unwrap();
        prop_assert_eq!(msg.to_bytes().len() as u64, 5 + msg.bit_cost().div_ceil(8));
    }

    /// Canonical bytes parse back to a message with the same structure and
    /// f32-accurate values.
    #[test]
    fn bytes_parse_back(v in vector_strategy(32), spec in spec_strategy(), seed in any::<u64>()) {
        let msg = compress(&spec, &v, &mut stream(seed)).unwrap();
        let parsed = CompressedMessage::from_bytes(&spec, &msg.to_bytes()).unwrap();
        prop_assert_eq!(parsed.dim(), msg.dim());
        prop_assert_eq!(parsed.bit_cost(), msg.bit_cost());
        let a = reconstruct(&msg).unwrap();
        let b = reconstruct(&parsed).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-3 * (1.0 + x.abs()));
        }
    }

    /// Mass conservation of one compensation round:
    /// input + delta_before == reconstruct(msg) + delta_after.
    #[test]
    fn compensation_conserves_mass(
        input in vector_strategy(32),
        carry in vector_strategy(32),
        spec in spec_strategy(),
        seed in any::<u64>(),
    ) {
        let dim = input.dim().min(carry.dim());
        let input = DenseVector::from_values(input.values()[..dim].to_vec()).unwrap();
        let carry = DenseVector::from_values(carry.values()[..dim].to_vec()).unwrap();
        let state = ResidualState::with_delta(carry, ResidualOwner::Server);

        let lhs = add(&input, state.delta()).unwrap();
        let (msg, next) =
            compensate_compress_update(&input, &state, &spec, &mut stream(seed)).unwrap();
        let rhs = add(&reconstruct(&msg).unwrap(), next.delta()).unwrap();

        let unit = 1.0 + lhs.values().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        for (l, r) in lhs.values().iter().zip(rhs.values()) {
            prop_assert!((l - r).abs() <= 1e-12 * unit);
        }
    }
}

//! Round trips and header corruption for the SNRG container.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnergy_core::data_io::{decode_tensor, encode_tensor, Dtype, FormatError};
use snnergy_core::Tensor;

fn random_tensor(rng: &mut ChaCha8Rng) -> (Tensor, Dtype) {
    let rank = rng.gen_range(1..=5);
    let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=6)).collect();
    if rng.gen_bool(0.5) {
        (Tensor::bernoulli(&shape, 0.3, rng), Dtype::Binary)
    } else {
        let n = shape.iter().product();
        let data = (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0xff7f_ffff)).collect();
        (Tensor::from_vec(&shape, data).unwrap(), Dtype::F32)
    }
}

/// Number of random tensors (f32 with arbitrary finite bit patterns, or binary)
/// that fail to survive encode → decode bit for bit.
pub fn round_trip_failures(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .filter(|_| {
            let (t, dtype) = random_tensor(&mut rng);
            let bytes = encode_tensor(&t, dtype).unwrap();
            match decode_tensor(&bytes) {
                Ok((back, d)) => {
                    d != dtype || back.shape() != t.shape() || back.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits())
                }
                Err(_) => true,
            }
        })
        .count()
}

#[derive(Debug, Default)]
pub struct MutationReport {
    pub accepted: usize,
    pub rejected: usize,
    pub panics: usize,
    /// Errors whose reported offset lies outside the input.
    pub bad_offsets: usize,
}

/// Flip random bits or overwrite random bytes inside the header of valid files.
pub fn header_mutations(count: usize, seed: u64) -> MutationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = MutationReport::default();
    for _ in 0..count {
        let (t, dtype) = random_tensor(&mut rng);
        let mut bytes = encode_tensor(&t, dtype).unwrap();
        let header = 8 + 4 * t.rank();
        for _ in 0..rng.gen_range(1..=3) {
            let i = rng.gen_range(0..header);
            if rng.gen_bool(0.5) {
                bytes[i] ^= 1 << rng.gen_range(0..8);
            } else {
                bytes[i] = rng.gen();
            }
        }
        if rng.gen_bool(0.2) {
            bytes.truncate(rng.gen_range(0..bytes.len()));
        }
        match catch_unwind(AssertUnwindSafe(|| decode_tensor(&bytes))) {
            Ok(Ok(_)) => rep.accepted += 1,
            Ok(Err(FormatError { offset, .. })) => {
                rep.rejected += 1;
                if offset > bytes.len() as u64 {
                    rep.bad_offsets += 1;
                }
            }
            Err(_) => rep.panics += 1,
        }
    }
    rep
}

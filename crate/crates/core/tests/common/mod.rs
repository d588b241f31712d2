//! Container fuzzing shared by the integration and acceptance tests.

use std::panic::{catch_unwind, AssertUnwindSafe};

use hsc::harness::container::HEADER_LEN;
use hsc::numerics::RngState;
use hsc::pipeline::Codec;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FuzzStats {
    pub decoded: usize,
    pub rejected: usize,
    /// Decodes that returned a malformed image.
    pub invalid: usize,
    pub panics: usize,
}

impl FuzzStats {
    pub fn clean(&self) -> bool {
        self.invalid == 0 && self.panics == 0
    }
}

/// One random corruption of `bytes`.
pub fn mutate(bytes: &[u8], rng: &mut RngState) -> Vec<u8> {
    let mut out = bytes.to_vec();
    let n = out.len();
    match rng.below(7) {
        0 => out[rng.below(n)] ^= 1 << rng.below(8),
        1 => out[rng.below(n)] = rng.below(256) as u8,
        2 => out.truncate(rng.below(n)),
        3 => out.insert(rng.below(n + 1), rng.below(256) as u8),
        4 => {
            out.remove(rng.below(n));
        }
        5 => {
            // a chunk length field
            let len = (rng.next_u64() as u32).to_le_bytes();
            out[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&len);
        }
        _ => {
            for _ in 0..2 + rng.below(7) {
                let i = HEADER_LEN + rng.below(n - HEADER_LEN);
                out[i] = rng.below(256) as u8;
            }
        }
    }
    out
}

/// Decodes `cases` mutations of the given streams, cycling through them.
pub fn fuzz_decode(codec: &Codec, streams: &[Vec<u8>], cases: usize, seed: u64) -> FuzzStats {
    let mut rng = RngState::new(seed);
    let mut stats = FuzzStats::default();
    let shape = [3, codec.config().image_size, codec.config().image_size];
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for i in 0..cases {
        let bytes = mutate(&streams[i % streams.len()], &mut rng);
        match catch_unwind(AssertUnwindSafe(|| codec.decode_bytes(&bytes))) {
            Ok(Ok(x)) if x.shape() == shape && x.is_finite() => stats.decoded += 1,
            Ok(Ok(_)) => stats.invalid += 1,
            Ok(Err(_)) => stats.rejected += 1,
            Err(_) => stats.panics += 1,
        }
    }
    std::panic::set_hook(hook);
    stats
}

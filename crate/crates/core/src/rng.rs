//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha12 stream. The key is
//! the master seed and the stream id is a hash of a [`Purpose`] tag plus the
//! integer coordinates of the consumer (slice, closed-loop, round, epoch), so
//! results never depend on the order in which workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    DataParams = 1,
    DataSamples = 2,
    Split = 3,
    Init = 4,
    Tester = 5,
    Mutation = 6,
    Train = 7,
    Shap = 8,
    Eval = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_id(purpose: Purpose, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(purpose as u64), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

/// Opens the stream for `purpose` at `coords` under `seed`.
pub fn substream(seed: u64, purpose: Purpose, coords: &[u64]) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(purpose, coords));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_coordinates_same_stream() {
        let mut a = substream(7, Purpose::Train, &[1, 2, 3]);
        let mut b = substream(7, Purpose::Train, &[1, 2, 3]);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn coordinates_and_purpose_separate_streams() {
        let first = |p, c: &[u64]| substream(7, p, c).next_u64();
        assert_ne!(first(Purpose::Train, &[1, 2]), first(Purpose::Train, &[2, 1]));
        assert_ne!(first(Purpose::Train, &[1, 2]), first(Purpose::Tester, &[1, 2]));
        assert_ne!(
            substream(7, Purpose::Train, &[1]).next_u64(),
            substream(8, Purpose::Train, &[1]).next_u64()
        );
    }
}

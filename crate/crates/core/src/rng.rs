//! Seeded random streams.
//!
//! Every consumer of randomness asks for a named substream of the run seed.
//! The name is hashed (FNV-1a, stable across platforms and releases) into the
//! ChaCha stream id, so introducing a new consumer never shifts the draws seen
//! by existing ones.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;

pub type RunRng = ChaCha8Rng;

pub fn fnv1a64(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Independent stream `name` derived from the master `seed`.
pub fn substream(seed: u64, name: &str) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(name));
    rng
}

/// Tensor of i.i.d. standard normal draws.
pub fn standard_normal(rng: &mut RunRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data length")
}

/// Serializable position of a [`RunRng`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &RunRng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> RunRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn substreams_differ_and_repeat() {
        let a: Vec<u64> = (0..4)
            .map({
                let mut r = substream(7, "a");
                move |_| r.next_u64()
            })
            .collect();
        let a2: Vec<u64> = (0..4)
            .map({
                let mut r = substream(7, "a");
                move |_| r.next_u64()
            })
            .collect();
        let b: Vec<u64> = (0..4)
            .map({
                let mut r = substream(7, "b");
                move |_| r.next_u64()
            })
            .collect();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut rng = substream(3, "x");
        for _ in 0..17 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), resumed.next_u64());
        }
    }

    #[test]
    fn fnv_known_value() {
        assert_eq!(fnv1a64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
    }
}

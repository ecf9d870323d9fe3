//! Deterministic seed-stream derivation.
//!
//! Every random stream in the engine is keyed by `(master, stream, index)`
//! through SplitMix64 mixing. Parallel workers draw from their own derived
//! streams, so results are independent of scheduling, and a checkpoint only
//! has to remember the master seed plus the iteration counter to resume
//! bitwise-identically.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream tags. Keep values stable: they are part of the reproducibility
/// contract (checkpoints and per-repeat evaluation seeds depend on them).
pub mod stream {
    pub const SIM_INIT: u64 = 0x01;
    pub const SIM_STEP: u64 = 0x02;
    pub const POLICY: u64 = 0x03;
    pub const CRITIC_FIT: u64 = 0x04;
    pub const RNPG_OUTER: u64 = 0x05;
    pub const RNPG_BIAS: u64 = 0x06;
    pub const TRAIN_ROLLOUT: u64 = 0x07;
    pub const EVAL_REPEAT: u64 = 0x08;
    pub const INIT_PARAMS: u64 = 0x09;
}

fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed, a stream tag, and an index
/// within the stream. Two rounds of SplitMix64 keep nearby inputs apart.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ splitmix64(index))
}

/// Deterministic RNG for one derived stream.
pub fn stream_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(42, stream::SIM_STEP, 0);
        let b = derive_seed(42, stream::SIM_STEP, 1);
        let c = derive_seed(42, stream::POLICY, 0);
        let d = derive_seed(43, stream::SIM_STEP, 0);
        assert_eq!(a, derive_seed(42, stream::SIM_STEP, 0));
        assert!(a != b && a != c && a != d && b != c);
    }

    #[test]
    fn stream_rngs_reproduce() {
        use rand::RngExt;
        let mut r1 = stream_rng(7, stream::EVAL_REPEAT, 3);
        let mut r2 = stream_rng(7, stream::EVAL_REPEAT, 3);
        let x1: u64 = r1.random();
        let x2: u64 = r2.random();
        assert_eq!(x1, x2);
    }
}

//! Transfer reinforcement learning across observation spaces.
//!
//! The crate has three parts:
//!
//! * a deep-RL stack ([`nn`], [`envs`], [`dynamics`], [`dqn`], [`transfer`])
//!   that learns a latent dynamics model in a source task and reuses it,
//!   frozen, as a representation regularizer in a target task with a
//!   different observation space;
//! * a tabular theory lab ([`theory`]) that verifies the sufficiency
//!   definitions and approximate-DP error bounds behind the method by
//!   exact dynamic programming on small MDPs;
//! * an experiment [`harness`] (config files, seeding, metrics CSVs, CLI).
//!
//! See the `examples/` directory for runnable entry points per capability.

pub mod dqn;
pub mod dynamics;
pub mod envs;
pub mod harness;
pub mod nn;
pub mod theory;
pub mod transfer;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent RNG from a master seed and a stream label.
///
/// Independent streams keep RNG consumption in one component (e.g. latent
/// model init) from perturbing another (e.g. exploration), which is what
/// makes the "λ=0 is bitwise Single" degeneracy checks possible.
pub fn derive_rng(master_seed: u64, stream: &str) -> ChaCha8Rng {
    // FNV-1a over the stream label; cheap, stable, collision-safe at the
    // handful of labels we use.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(h);
    rng
}

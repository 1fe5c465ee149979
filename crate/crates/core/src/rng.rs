//! Deterministic per-replica random streams.
//!
//! Every replica owns independent ChaCha8 streams keyed by
//! `(base_seed, replica_id, role)`, so results do not depend on thread
//! scheduling or on how replicas are partitioned across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream drives inside one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    /// Slow Brownian motion (the single driver of the original and coupled systems).
    SlowBrownian = 0,
    /// Noise of the fast process, independent of the slow Brownian motion.
    FastNoise = 1,
    /// Second Brownian motion of the limit system.
    SecondBrownian = 2,
    /// Anything else a test or sampler needs (invariant draws, etc.).
    Auxiliary = 3,
}

const ROLES: u64 = 4;

pub fn stream(base_seed: u64, replica_id: u64, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(replica_id.wrapping_mul(ROLES).wrapping_add(role as u64));
    rng
}

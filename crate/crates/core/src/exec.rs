//! Replication scheduling and seed derivation.
//!
//! Replications are indexed; each one draws from its own generator seeded by
//! [`derive_seed`], so results do not depend on which thread ran what. With
//! the `parallel` feature the indexed map runs on rayon, otherwise (or with
//! [`Execution::Sequential`]) it is a plain loop. Output order always follows
//! the replication index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How to run a batch of independent replications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

/// Apply `f` to `0..n` and collect results in index order.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Whether this build can actually run replications in parallel.
pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

/// Configure the global thread pool size. No-op without the `parallel` feature.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        // a pool that is already built keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent child seed from `master` for a named stream and index.
///
/// `derive_seed(m, s, i) = splitmix(splitmix(splitmix(m) ^ s) ^ i)`; distinct
/// `(stream, index)` pairs give unrelated seeds.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

/// Generator for one replication or stream.
pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Stream identifiers so different consumers of a master seed never collide.
pub mod streams {
    pub const SIMULATE: u64 = 0x5349_4d55;
    pub const BOOTSTRAP: u64 = 0x424f_4f54;
    pub const MONTE_CARLO: u64 = 0x4d43_4152;
}

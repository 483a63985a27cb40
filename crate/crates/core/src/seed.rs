//! Named random streams fanned out from one master seed.
//!
//! Stream `name` is `ChaCha8Rng::seed_from_u64(master)` moved to the ChaCha
//! stream id given by the first eight bytes (little endian) of
//! `sha256(name)`. Adding a consumer never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const PLANT: &str = "plant";
pub const INIT: &str = "init";
pub const NOISE: &str = "noise";
pub const REPLAY: &str = "replay";
pub const MONTE_CARLO: &str = "montecarlo";

pub fn stream_id(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream_id(name));
    rng
}

/// Independent generator for Monte Carlo trial `trial`.
pub fn trial_stream(master: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = stream(master, MONTE_CARLO);
    let base = rng.get_stream();
    rng.set_stream(base.wrapping_add(trial.wrapping_add(1)));
    rng
}

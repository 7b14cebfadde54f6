//! Deterministic inputs for the benchmarks.

use rdce::simulate::{dgp_draw, replication_rng, McConfig};
use rdce::Sample;

/// One draw from the default simulation design.
pub fn fixture(n: usize, seed: u64) -> Sample {
    let cfg = McConfig::new(n, 1, seed);
    dgp_draw(&cfg, &mut replication_rng(seed, 0)).expect("default design is valid")
}

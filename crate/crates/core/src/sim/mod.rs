//! Simulation: ground-truth plant, excitation, closed-loop harness and the
//! statistical experiments built on it.

pub mod decay;
pub mod excitation;
pub mod harness;
pub mod monte_carlo;
pub mod plant;
pub mod poe;
pub mod stats;
pub mod suites;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha8 stream `stream` of the generator keyed by `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub use harness::{run_closed_loop, ClosedLoop, ClosedLoopConfig, FilterMode, NominalPolicy, RunTrace, TraceRow};
pub use monte_carlo::{monte_carlo, MonteCarloReport};

//! Multi-UAV network simulation and learning toolkit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod chanest;
pub mod channel;
pub mod env;
pub mod metrics;
pub mod neural;
pub mod placement;
pub mod routing;

/// Independent random stream `stream` derived from a run seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

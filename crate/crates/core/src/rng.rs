//! Counter-based random streams: every (seed, stream, index) triple maps to
//! an independent generator, so work split across threads draws the same
//! numbers regardless of scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Words reserved per index within a stream; ample for the few normal draws
/// (each a handful of words) taken per index.
const WORDS_PER_INDEX: u128 = 64;

pub fn counter_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * WORDS_PER_INDEX);
    rng
}

/// Two independent standard normal draws.
pub fn normal_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    (rng.sample(StandardNormal), rng.sample(StandardNormal))
}

//! Seed fan-out for Monte-Carlo trials.
//!
//! Every trial gets its own ChaCha stream whose seed is a deterministic
//! function of the master seed and a path of integer labels, so results do
//! not depend on how trials are scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TrialRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for the labelled path `labels` under `master`.
pub fn child_seed(master: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(master), |acc, &l| splitmix64(acc ^ splitmix64(l.wrapping_add(0x632b_e59b_d9b4_e019))))
}

pub fn child_rng(master: u64, labels: &[u64]) -> TrialRng {
    TrialRng::seed_from_u64(child_seed(master, labels))
}

//! Labeled seed derivation.
//!
//! Every random stream in a simulation is keyed by a master seed, a purpose
//! label and a list of indices, e.g. `(master, "local/fedavg_svrg", [run])`.
//! Streams derived for different labels or indices are independent of each
//! other, so adding an algorithm or changing the worker count never perturbs
//! another stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator type used for every stream in the simulator.
pub type SimRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from `(master, label, indices)`.
pub fn derive_seed(master: u64, label: &str, indices: &[u64]) -> u64 {
    let mut state = mix64(master ^ 0x9e37_79b9_7f4a_7c15) ^ fnv1a64(label.as_bytes());
    state = mix64(state);
    for (pos, &idx) in indices.iter().enumerate() {
        let salt = (pos as u64 + 1).wrapping_mul(0xd134_2543_de82_ef95);
        state = mix64(state ^ mix64(idx.wrapping_add(salt)));
    }
    state
}

/// Build an independent generator for `(master, label, indices)`.
pub fn stream(master: u64, label: &str, indices: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, label, indices))
}

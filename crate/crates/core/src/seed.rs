//! Root-seed expansion.
//!
//! Every random component draws from its own stream derived from one root
//! seed: `component_seed = splitmix64(root ^ fnv1a64(label))`. Labels used by
//! the pipeline are `"split"`, `"init"`, `"shuffle"` and `"injectivity"`.
//! Changing the label set never perturbs the streams of other components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const INJECTIVITY: &str = "injectivity";

fn fnv1a64(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn component_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a64(label))
}

pub fn component_rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(component_seed(root, label))
}

// SPDX-License-Identifier: Apache-2.0

//! Named random substreams derived from one master seed.
//!
//! Each draw site asks for `(concern, key)` and gets its own generator, so a
//! job's failure draws do not move when some other job's utilization noise is
//! sampled earlier or later.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    master: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a, stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl RngStreams {
    pub fn new(master: u64) -> Self {
        RngStreams { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, concern: &str, key: u64) -> ChaCha8Rng {
        let seed = splitmix(splitmix(self.master ^ stable_hash(concern)) ^ splitmix(key));
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn stream2(&self, concern: &str, a: u64, b: u64) -> ChaCha8Rng {
        self.stream(concern, splitmix(a).rotate_left(17) ^ b)
    }
}

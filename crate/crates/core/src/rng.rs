//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream, path, counter)`:
//!
//! ```text
//! key    = mix64(mix64(seed ^ mix64(stream + S)) ^ mix64(path + P))
//! u64[c] = mix64(key ^ mix64(c * G))        c = 1, 2, ...
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer (Stafford variant 13), `G` is the
//! 64-bit golden-ratio increment and `S`, `P` are fixed salts. Because the key
//! passes through an extra finalizer round, streams with different keys do not
//! overlap by shifting, unlike plain SplitMix64 seeded per path.
//!
//! Estimators give each Monte Carlo path its own stream, so results depend
//! only on `(seed, path index)` and never on how paths are scheduled across
//! threads. Gaussian variates come from `rand_distr::StandardNormal`
//! (ziggurat), which consumes a data-dependent number of `u64`s per draw; the
//! stream stays deterministic because each path consumes its own stream
//! sequentially.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM_SALT: u64 = 0x632b_e59b_d9b4_e019;
const PATH_SALT: u64 = 0xd1b5_4a32_d192_ed03;

/// Stream identifiers, so independent uses of one seed never share draws.
pub mod stream {
    pub const INCREMENTS: u64 = 1;
    pub const EXACT_CIR: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
    pub const ONE_STEP: u64 = 4;
    pub const FINE_PATH: u64 = 5;
    pub const LOCAL_TIME: u64 = 6;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn derive_key(seed: u64, stream: u64, path: u64) -> u64 {
    let s = mix64(seed ^ mix64(stream.wrapping_add(STREAM_SALT)));
    mix64(s ^ mix64(path.wrapping_add(PATH_SALT)))
}

/// The `counter`-th 64-bit output (1-based) of stream `(seed, stream, path)`.
#[inline]
pub fn counter_u64(seed: u64, stream: u64, path: u64, counter: u64) -> u64 {
    mix64(derive_key(seed, stream, path) ^ mix64(counter.wrapping_mul(GOLDEN)))
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64, path: u64) -> Self {
        Self {
            key: derive_key(seed, stream, path),
            counter: 0,
        }
    }

    /// Number of `u64`s consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Fills `out` with `sd * N(0, 1)` draws.
    pub fn fill_normal(&mut self, out: &mut [f64], sd: f64) {
        for v in out.iter_mut() {
            *v = sd * self.normal();
        }
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ mix64(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

//! Deterministic random number streams.
//!
//! Every random draw in this crate comes from a [`RngStream`]: a
//! xoshiro256** generator whose state is expanded by SplitMix64 from a
//! 64-bit key derived from `(seed, purpose_tag)`. The exact construction
//! is pinned so that independent implementations reproduce every run
//! bit-for-bit:
//!
//! - key = FNV-1a 64 over the 8 little-endian bytes of `seed`, then the
//!   UTF-8 bytes of `tag`
//! - state = four successive SplitMix64 outputs seeded with the key
//! - uniform f64 in [0,1) = `(next_u64() >> 11) * 2^-53`
//! - standard normals via Box-Muller on consecutive uniform pairs
//!
//! Streams with different tags are statistically independent, which is
//! what keeps batch shuffling, parameter initialization, and data
//! generation from perturbing one another across training methods.

/// SplitMix64 (Vigna). Used only to expand a key into xoshiro state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// FNV-1a 64 over the little-endian seed bytes followed by the tag bytes.
fn stream_key(seed: u64, tag: &str) -> u64 {
    const OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01B3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// A deterministic xoshiro256** stream keyed by `(seed, purpose_tag)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    s: [u64; 4],
    cached_normal: Option<f64>,
}

/// Build the stream for `(seed, tag)`. Identical inputs yield identical
/// byte streams on every platform.
pub fn rng_stream(seed: u64, tag: &str) -> RngStream {
    RngStream::from_key(stream_key(seed, tag))
}

impl RngStream {
    /// Expand a raw 64-bit key into xoshiro256** state via SplitMix64.
    pub fn from_key(key: u64) -> Self {
        let mut sm = SplitMix64::new(key);
        let s = [sm.next_u64(), sm.next_u64(), sm.next_u64(), sm.next_u64()];
        Self {
            s,
            cached_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0,1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform in 0..n via the modulo construction. The slight bias is
    /// irrelevant at the sample counts used here and keeps the recipe
    /// trivially portable.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller. Draws two uniforms, returns the
    /// cosine branch first and caches the sine branch for the next call.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * phi.sin());
        r * phi.cos()
    }

    /// In-place Fisher-Yates shuffle (downward, swap index `next_below(i+1)`).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

//! SplitMix64 streams used for every random draw in the crate.
//!
//! The generator and its derived streams are fully specified so that bundles
//! and episodes can be reproduced from any language:
//!
//! * `next_u64`: `state += 0x9E3779B97F4A7C15`, then the output finalizer
//!   `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9; z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^ (z >> 31)`.
//! * `derive(seed, tag) = mix64(seed ^ mix64(tag + 0x9E3779B97F4A7C15))`.
//! * `uniform() = (next_u64 >> 11) * 2^-53`.
//! * `gaussian()`: Box-Muller cosine branch, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`,
//!   one normal per two uniforms.
//! * `below(n) = (next_u64 as u128 * n) >> 64`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tags. Each purpose gets its own derived generator.
pub mod tag {
    pub const DIRECTIONS: u64 = 1;
    pub const BASE_NOISE: u64 = 2;
    pub const SAMPLE_NOISE: u64 = 3;
    pub const EPISODE: u64 = 16;
    pub const SHUFFLE: u64 = 17;
    pub const ADAPTER_INIT: u64 = 18;
    pub const ENHANCE_SHUFFLE: u64 = 19;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the sub-stream `tag` of `seed`.
#[inline]
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(GAMMA)))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn stream(seed: u64, tag: u64) -> Self {
        Self::new(derive(seed, tag))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Integer in `[0, n)`.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates, walking from the last position down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

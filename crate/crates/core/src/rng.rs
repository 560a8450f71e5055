//! Portable seeded random numbers.
//!
//! The integer stream is SplitMix64 (Steele, Lea and Flood 2014): the state
//! advances by `0x9E3779B97F4A7C15` and each output is the state passed
//! through the finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! Reference vectors, seed 0: `0xE220A8397B1DCDAF`, `0x6E789E6AA1B965F4`,
//! `0x06C45D188009454F`.
//!
//! Uniform doubles take the top 53 bits: `(x >> 11) · 2⁻⁵³` in `[0, 1)`.
//! Gaussians use the Box–Muller transform on two consecutive outputs
//! `u1 = ((x₁ >> 11) + 1)·2⁻⁵³`, `u2 = (x₂ >> 11)·2⁻⁵³`, returning
//! `√(−2 ln u1)·cos(2π u2)` and then, on the next call, `√(−2 ln u1)·sin(2π u2)`.
//! `ln`, `cos` and `sin` come from the `libm` crate, a pure-software port of
//! musl's libm, so draws are identical on every platform.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform in `0..bound` by rejection sampling, so no modulo bias.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }

    /// Standard normal draw.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_M53;
        let u2 = (self.next_u64() >> 11) as f64 * TWO_POW_M53;
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(theta));
        radius * libm::cos(theta)
    }

    /// Derives an independent generator for sub-stream `index`.
    pub fn fork(&self, index: u64) -> Self {
        let mut base = SplitMix64::new(self.state ^ index.wrapping_mul(GOLDEN_GAMMA));
        SplitMix64::new(base.next_u64())
    }
}

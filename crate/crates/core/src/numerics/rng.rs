//! Deterministic, explicitly-seeded random number generation.
//!
//! All randomness in the crate flows through [`RngState`] instances owned by
//! the caller. Identical seed plus identical call sequence yields an
//! identical value sequence, on every platform. There is no global RNG.

/// Generator algorithm identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngAlgo {
    /// xoshiro256++ seeded through SplitMix64.
    Xoshiro256PlusPlus,
}

/// Explicit-state pseudo-random generator.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    algo: RngAlgo,
    s: [u64; 4],
    spare_normal: Option<f64>,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        RngState {
            seed,
            algo: RngAlgo::Xoshiro256PlusPlus,
            s,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algo(&self) -> RngAlgo {
        self.algo
    }

    /// Derives an independent stream keyed by a label. The derivation mixes
    /// the label bytes into the parent seed, so streams are stable across
    /// call order.
    pub fn derive(&self, label: &str) -> RngState {
        let mut h: u64 = self.seed ^ 0x51_7c_c1_b7_27_22_0a_95;
        for &b in label.as_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut sm = h;
        RngState::new(splitmix64(&mut sm))
    }

    /// Derives an independent stream keyed by an index.
    pub fn derive_index(&self, index: u64) -> RngState {
        let mut sm = self.seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        RngState::new(splitmix64(&mut sm))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Multiply-shift reduction; bias is < 2^-64 per draw.
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// Standard normal draw via Box-Muller. Deterministic: both values of
    /// each pair are produced in sequence.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] to keep ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fills a buffer with standard normal draws.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

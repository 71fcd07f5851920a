//! Deterministic random number generation with hierarchical seed splitting.
//!
//! Everything stochastic in this crate draws from [`Rng`], a xoshiro256++
//! generator seeded through SplitMix64. Sub-streams are derived with
//! [`Rng::split`] so that per-sample generation is bit-identical whether
//! samples are produced serially or in parallel.

/// SplitMix64 step, used for seeding and for deriving child seeds.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// xoshiro256++ generator. Deterministic, serializable, and cheap to fork.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
    /// Cached second output of the Box-Muller transform.
    normal_spare: Option<u64>,
}

impl Rng {
    /// Create a generator from a 64-bit seed.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s, normal_spare: None }
    }

    /// Derive an independent child stream from this generator's seed material
    /// and a label. Splitting does not advance the parent stream, so the
    /// derivation is order-independent: `split(k)` yields the same stream no
    /// matter how many draws the siblings have made.
    pub fn split(&self, label: u64) -> Rng {
        let mut sm = self.s[0] ^ self.s[2].rotate_left(17) ^ label.wrapping_mul(0x9E3779B97F4A7C15);
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s, normal_spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Rejection-free via 128-bit multiply.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw via Box-Muller; the spare is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(bits) = self.normal_spare.take() {
            return f64::from_bits(bits);
        }
        // u1 in (0,1] to keep ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        let (sin, cos) = theta.sin_cos();
        self.normal_spare = Some(f64::to_bits(r * sin));
        r * cos
    }

    /// Normal draw with the given mean and standard deviation.
    pub fn normal_with(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.normal()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Serialize internal state (for resumable training).
    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    /// Restore a generator from serialized state. Drops any cached normal spare.
    pub fn from_state(s: [u64; 4]) -> Self {
        Rng { s, normal_spare: None }
    }
}

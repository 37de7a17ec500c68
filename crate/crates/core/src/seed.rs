//! Deterministic seeding.
//!
//! Every stochastic step in a federation draws from a [`SplitMix64`] stream
//! whose seed is a pure function of the experiment seed, the client id, the
//! round, and a domain tag. Nothing reads ambient entropy, so a run is fully
//! reproducible in every execution mode.

/// Golden-ratio increment of the SplitMix64 generator.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Domain tags used to separate independent streams derived from one seed.
pub mod domain {
    pub const DATA: u64 = 0x6461_7461_0000_0001;
    pub const INIT: u64 = 0x696e_6974_0000_0002;
    pub const PARTITION: u64 = 0x7061_7274_0000_0003;
    pub const SPLIT: u64 = 0x7370_6c74_0000_0004;
    /// Epoch `e` uses `EPOCH + e`.
    pub const EPOCH: u64 = 0x6570_6f63_0001_0000;
    /// Selection attempt `a` uses `SELECT + a`.
    pub const SELECT: u64 = 0x7365_6c65_0002_0000;
    pub const NOISE: u64 = 0x6e6f_6973_0000_0005;
}

/// One application of the SplitMix64 output function to `x`.
///
/// Equal to the first output of a generator whose state starts at `x`.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream owning all stochastic work of `client_id` in `round`.
pub fn stream_seed(global_seed: u64, client_id: u64, round: u64) -> u64 {
    let per_client = splitmix64(global_seed.wrapping_add(client_id.wrapping_mul(GOLDEN_GAMMA)));
    splitmix64(per_client.wrapping_add(round))
}

/// Derives an independent seed for a sub-task identified by `tag`.
#[inline]
pub fn sub_seed(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ tag)
}

/// The SplitMix64 pseudo-random generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix64(self.state);
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        out
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    #[inline]
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < limit {
                return x % n;
            }
        }
    }

    /// Standard normal draw via the cosine branch of Box–Muller.
    ///
    /// Consumes exactly two outputs per draw.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(shape, 1) via Marsaglia–Tsang; shapes below one use the
    /// `Gamma(shape + 1) * U^(1/shape)` boost.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0);
            let u = self.next_f64_open();
            return g * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_f64_open();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return d * v;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// In-place Fisher–Yates shuffle, walking from the last position down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

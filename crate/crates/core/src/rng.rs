//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so results do
//! not depend on evaluation order, thread count or platform. The mixing
//! function is the SplitMix64 finalizer:
//!
//! ```text
//! mix(z) = z ^= z >> 30; z *= 0xbf58476d1ce4e5b9;
//!          z ^= z >> 27; z *= 0x94d049bb133111eb;
//!          z ^ (z >> 31)
//! key(seed, stream)   = mix(seed + GAMMA * (stream + 1))
//! draw(key, counter)  = mix(key ^ mix(counter + GAMMA))
//! ```
//!
//! with `GAMMA = 0x9e3779b97f4a7c15` and wrapping arithmetic. Uniform reals
//! take the top 53 bits. Normals use Box–Muller over the counter pair
//! `(2i, 2i + 1)`, evaluated with `libm` so the transcendental functions are
//! the same bits everywhere.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One independent random stream addressed by counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: mix64(seed.wrapping_add(GAMMA.wrapping_mul(stream.wrapping_add(1)))),
        }
    }

    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix64(self.key ^ mix64(counter.wrapping_add(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by widening multiply.
    ///
    /// # Panics
    ///
    /// Panics if `bound` is zero.
    #[inline]
    pub fn below_at(&self, counter: u64, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be non-zero");
        ((self.u64_at(counter) as u128 * bound as u128) >> 64) as u64
    }

    /// Standard normal draw number `index` of this stream.
    pub fn normal_at(&self, index: u64) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform_at(index.wrapping_mul(2));
        let u2 = self.uniform_at(index.wrapping_mul(2).wrapping_add(1));
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    /// Sequential cursor over this stream, starting at counter 0.
    pub fn cursor(&self) -> Cursor {
        Cursor { rng: *self, next: 0 }
    }
}

/// Sequential view over a [`CounterRng`]; each call consumes one counter.
#[derive(Debug, Clone)]
pub struct Cursor {
    rng: CounterRng,
    next: u64,
}

impl Cursor {
    pub fn next_below(&mut self, bound: u64) -> u64 {
        let v = self.rng.below_at(self.next, bound);
        self.next += 1;
        v
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

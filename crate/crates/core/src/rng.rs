//! Deterministic integer RNG used everywhere randomness is needed.
//!
//! SplitMix64 core: pure 64-bit integer arithmetic, so streams are
//! bit-identical across platforms. Dataset samples are drawn from a fresh
//! generator keyed on (seed, index), which makes every sample a pure
//! function of that pair regardless of generation order.

#[derive(Clone, Debug)]
pub struct Rng64 {
    state: u64,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Rng64 {
            state: seed ^ 0x9e37_79b9_7f4a_7c15,
        }
    }

    /// Generator for sample `index` of stream `seed`: mixes the pair into a
    /// fresh state so neighbouring indices are uncorrelated.
    pub fn for_index(seed: u64, index: u64) -> Self {
        let mut r = Rng64::new(seed.wrapping_mul(0xff51_afd7_ed55_8ccd) ^ index);
        r.next_u64();
        r.next_u64();
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform integer in [0, bound) via rejection-free multiply-shift.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Uniform f64 in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.unit();
        // Guard against ln(0).
        let u1 = u1.max(f64::MIN_POSITIVE);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng64::new(7);
        let mut b = Rng64::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn indexed_streams_are_stable_and_distinct() {
        let a: Vec<u64> = (0..4).map(|i| Rng64::for_index(3, i).next_u64()).collect();
        let b: Vec<u64> = (0..4).map(|i| Rng64::for_index(3, i).next_u64()).collect();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert_ne!(Rng64::for_index(3, 0).next_u64(), Rng64::for_index(4, 0).next_u64());
    }

    #[test]
    fn below_stays_in_bounds_and_covers() {
        let mut r = Rng64::new(11);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[r.below(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn unit_in_half_open_interval() {
        let mut r = Rng64::new(5);
        for _ in 0..1000 {
            let u = r.unit();
            assert!((0.0..1.0).contains(&u));
        }
    }
}

//! Deterministic pseudo-randomness.
//!
//! Every run derives three independent streams (init, data, gate) from its
//! seeds, so changing e.g. the gate draw order can never perturb data
//! shuffling. The gate stream is counter-based: a uniform value is a pure
//! function of (seed, step, element index), which makes gate sampling
//! independent of iteration order.

/// splitmix64 PRNG. Small, fast, and fully reproducible across platforms.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
    spare_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        finalize(self.state)
    }

    /// Uniform f64 in [0, 1), using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) without modulo bias (widening multiply).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller; caches the second value of each pair.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // u1 in (0,1] so ln never sees 0
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

fn finalize(x: u64) -> u64 {
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream from a base seed and a stream label.
pub fn derive_stream(seed: u64, label: u64) -> SplitMix64 {
    SplitMix64::new(finalize(seed ^ finalize(label.wrapping_mul(0x517c_c1b7_2722_0a95))))
}

/// Counter-based uniform in [0, 1): a pure function of (seed, step, index).
///
/// The counter is step * element-count-stride + index in the caller's global
/// element enumeration, collapsed here by mixing step and index separately so
/// distinct (step, index) pairs never collide.
pub fn uniform_at(seed: u64, step: u64, index: u64) -> f64 {
    let mut z = seed;
    z = finalize(z ^ step.wrapping_mul(0xd6e8_feb8_6659_fd93));
    z = finalize(z ^ index.wrapping_mul(0xa076_1d64_78bd_642f));
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let mut a = SplitMix64::new(7);
        let mut b = SplitMix64::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = derive_stream(7, 1);
        let mut b = derive_stream(7, 2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = SplitMix64::new(3);
        for _ in 0..1000 {
            let u = r.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn counter_stream_is_order_free() {
        let forward: Vec<f64> = (0..50).map(|i| uniform_at(9, 4, i)).collect();
        let mut reverse: Vec<f64> = (0..50).rev().map(|i| uniform_at(9, 4, i)).collect();
        reverse.reverse();
        assert_eq!(forward, reverse);
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = SplitMix64::new(11);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let x = r.next_normal();
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}

//! Counter-based random streams.
//!
//! Every stochastic decision in the crate is drawn from a [`Stream`] whose
//! output is a pure function of a 64-bit key and a counter. Keys are derived
//! hierarchically with [`Stream::fork`], so a trajectory, a mask row or a
//! training step can own its own stream without any shared generator state.
//! Results are therefore independent of scheduling and thread count.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a parent key with a child identifier.
#[inline]
pub fn derive_key(parent: u64, id: u64) -> u64 {
    mix64(parent ^ mix64(id.wrapping_add(GOLDEN)).rotate_left(17))
}

/// A counter-based generator: word `n` of stream `key` is `mix(key, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed ^ 0x6D6F_6172_6D00_0000),
            counter: 0,
        }
    }

    /// A child stream identified by `path`, independent of how much of the
    /// parent has been consumed.
    pub fn fork(&self, path: &[u64]) -> Stream {
        let key = path.iter().fold(self.key, |k, &id| derive_key(k, id));
        Stream { key, counter: 0 }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ mix64(c.wrapping_mul(GOLDEN).wrapping_add(self.key.rotate_left(29))))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            let lo = m as u64;
            if lo >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    /// Standard normal draw via Box-Muller (one variate per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// A uniformly random `k`-subset of `items`, in selection order.
    pub fn choose_subset(&mut self, items: &[usize], k: usize) -> Vec<usize> {
        assert!(k <= items.len());
        let mut pool = items.to_vec();
        for i in 0..k {
            let j = i + self.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forks_are_position_independent() {
        let mut a = Stream::new(7);
        let b = Stream::new(7);
        for _ in 0..13 {
            a.next_u64();
        }
        assert_eq!(a.fork(&[1, 2]).next_u64(), b.fork(&[1, 2]).next_u64());
        assert_ne!(b.fork(&[1, 2]).next_u64(), b.fork(&[2, 1]).next_u64());
    }

    #[test]
    fn uniform_moments() {
        let mut s = Stream::new(3);
        let n = 200_000;
        let mean = (0..n).map(|_| s.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005);
        let mut s = Stream::new(4);
        let xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.01 && (v - 1.0).abs() < 0.02);
    }

    #[test]
    fn below_covers_range() {
        let mut s = Stream::new(11);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[s.below(5)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 400.0, "{counts:?}");
        }
    }

    #[test]
    fn subset_is_distinct() {
        let mut s = Stream::new(5);
        let items: Vec<usize> = (10..20).collect();
        let sub = s.choose_subset(&items, 6);
        let mut sorted = sub.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
        assert!(sub.iter().all(|x| items.contains(x)));
    }
}

//! Deterministic numeric helpers shared across the toolkit.
//!
//! All norm and energy reductions in the library funnel through the pairwise
//! summation routines here. Pairwise summation has `O(log n)` error growth
//! instead of `O(n)` for naive accumulation, and — more importantly for us —
//! it fixes the reduction tree, so results are bit-for-bit reproducible
//! regardless of thread count: parallel code always sums per-item values into
//! a buffer first and reduces sequentially.

/// Pairwise (cascade) summation with a fixed reduction tree.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 32;
    if values.len() <= BASE {
        let mut acc = 0.0;
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise summation of `f(0), …, f(n-1)` without materializing the slice.
pub fn pairwise_sum_of<F: FnMut(usize) -> f64>(n: usize, mut f: F) -> f64 {
    fn rec<F: FnMut(usize) -> f64>(lo: usize, hi: usize, f: &mut F) -> f64 {
        const BASE: usize = 32;
        if hi - lo <= BASE {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        // left half first keeps the evaluation order, and hence any stateful
        // scratch reuse in `f`, identical across runs
        let left = rec(lo, mid, f);
        left + rec(mid, hi, f)
    }
    rec(0, n, &mut f)
}

/// Deterministic dot product `Σ a_i b_i` via pairwise summation.
pub fn pairwise_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot product operands must match");
    pairwise_sum_of(a.len(), |i| a[i] * b[i])
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a hash of a byte stream.
///
/// Used for provenance stamps on serialized artifacts (which inputs produced a
/// given tensor), not for anything security-sensitive.
#[derive(Debug, Clone)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        let mut h = self.0;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.0 = h;
    }

    /// Hash a float slice via its exact bit patterns.
    pub fn update_f64(&mut self, values: &[f64]) {
        for v in values {
            self.update(&v.to_bits().to_le_bytes());
        }
    }

    pub fn update_usize(&mut self, values: &[usize]) {
        for &v in values {
            self.update(&(v as u64).to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    /// Hex digest, fixed width 16.
    pub fn hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Maximum absolute entry of a slice, 0 for empty input.
pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// `true` if all entries are finite.
pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_exact_integers() {
        // Integer-valued floats sum exactly, so any correct tree gives the same answer.
        let values: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&values), 500_500.0);
        assert_eq!(pairwise_sum_of(values.len(), |i| values[i]), 500_500.0);
    }

    #[test]
    fn pairwise_sum_is_accurate_on_ill_conditioned_input() {
        // Alternating large/small magnitudes; pairwise stays near the exact value.
        let n = 1 << 14;
        let values: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { 1.0 } else { 1e-13 })
            .collect();
        let exact = (n as f64 / 2.0) * (1.0 + 1e-13);
        let got = pairwise_sum(&values);
        assert!((got - exact).abs() < 1e-9, "pairwise sum off: {got} vs {exact}");
    }

    #[test]
    fn fnv1a_known_vectors() {
        // Reference digests for the 64-bit FNV-1a parameters.
        let mut h = Fnv1a::new();
        h.update(b"");
        assert_eq!(h.finish(), 0xcbf29ce484222325);
        let mut h = Fnv1a::new();
        h.update(b"a");
        assert_eq!(h.finish(), 0xaf63dc4c8601ec8c);
        let mut h = Fnv1a::new();
        h.update(b"foobar");
        assert_eq!(h.finish(), 0x85944171f73967e8);
    }

    #[test]
    fn fnv1a_distinguishes_nan_payloads_and_signed_zero() {
        let mut a = Fnv1a::new();
        a.update_f64(&[0.0]);
        let mut b = Fnv1a::new();
        b.update_f64(&[-0.0]);
        assert_ne!(a.finish(), b.finish(), "signed zeros must hash differently");
    }
}

//! Counter-based random numbers.
//!
//! Draw `i` (starting at 1) of a generator seeded with `seed` is
//! `mix(seed + i * 0x9E37_79B9_7F4A_7C15)` where `mix` is the SplitMix64
//! finalizer. Uniforms take the top 53 bits; normals use Box-Muller with
//! in-crate `ln`/`cos` so the whole stream is bit-identical on every platform.

use super::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Independent generator for sub-stream `index` (e.g. one per clip).
    pub fn split(&self, index: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(index.wrapping_add(1).wrapping_mul(GOLDEN))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch, two draws per value).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * portable_ln(u1)).sqrt() * portable_cos_turns(u2)
    }

    pub fn normal_tensor(&mut self, shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal())
    }

    pub fn uniform_tensor(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform_range(lo, hi))
    }
}

/// Natural log for `x > 0` using only IEEE basic operations.
fn portable_ln(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let mut exp = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    if exp == -1023 {
        // subnormal; unreachable for our uniforms but kept exact
        let n = x * (1u64 << 54) as f64;
        return portable_ln(n) - 54.0 * std::f64::consts::LN_2;
    }
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        exp += 1;
    }
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    let mut term = s;
    let mut acc = 0.0;
    let mut k = 1.0;
    while k < 40.0 {
        acc += term / k;
        term *= s2;
        k += 2.0;
    }
    2.0 * acc + exp as f64 * std::f64::consts::LN_2
}

/// `cos(2π·u)` for `u ∈ [0, 1)` using only IEEE basic operations.
fn portable_cos_turns(u: f64) -> f64 {
    use std::f64::consts::PI;
    // reduce to octant: u*8 = q + f
    let scaled = u * 8.0;
    let q = scaled.floor();
    let f = scaled - q;
    let octant = q as u32 % 8;
    // angle within the octant, measured so that |r| <= π/4
    let (r, use_sin, negate) = match octant {
        0 => (f * PI / 4.0, false, false),
        1 => ((1.0 - f) * PI / 4.0, true, false),
        2 => (f * PI / 4.0, true, true),
        3 => ((1.0 - f) * PI / 4.0, false, true),
        4 => (f * PI / 4.0, false, true),
        5 => ((1.0 - f) * PI / 4.0, true, true),
        6 => (f * PI / 4.0, true, false),
        _ => ((1.0 - f) * PI / 4.0, false, false),
    };
    let r2 = r * r;
    let v = if use_sin {
        let mut term = r;
        let mut acc = 0.0;
        let mut n = 1.0;
        for _ in 0..12 {
            acc += term;
            term *= -r2 / ((n + 1.0) * (n + 2.0));
            n += 2.0;
        }
        acc
    } else {
        let mut term = 1.0;
        let mut acc = 0.0;
        let mut n = 0.0;
        for _ in 0..12 {
            acc += term;
            term *= -r2 / ((n + 1.0) * (n + 2.0));
            n += 2.0;
        }
        acc
    };
    if negate {
        -v
    } else {
        v
    }
}

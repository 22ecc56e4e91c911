use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::{Error, Result};

/// Deterministic generator: xoshiro256++ seeded through SplitMix64.
///
/// Derived draws:
/// - uniform `[0, 1)`: top 53 bits of a 64-bit output times 2⁻⁵³;
/// - normal: Box–Muller on two uniforms, with the second variate cached;
/// - gamma: Marsaglia–Tsang squeeze for shape ≥ 1, and for shape < 1 the
///   boost `G(a) = G(a + 1) · U^(1/a)` carried in log space;
/// - Dirichlet: normalized gammas (computed from log-gammas so tiny
///   concentrations never underflow to an all-zero vector).
///
/// All transcendental functions come from `libm`, so a seed produces the same
/// stream on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator for a labelled sub-stream.
    pub fn fork(&self, labels: &[u64]) -> Rng {
        Rng::new(derive_seed(self.seed, labels))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    fn uniform_open_zero(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Uniform integer in `[0, n)` by rejection, `n > 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal variate.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open_zero();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = core::f64::consts::TAU * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// `log G` for `G ~ Gamma(shape, 1)`.
    fn log_gamma_variate(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let u = self.uniform_open_zero();
            return self.log_gamma_variate(shape + 1.0) + libm::log(u) / shape;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / libm::sqrt(9.0 * d);
        loop {
            let x = self.gaussian();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open_zero();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2
                || libm::log(u) < 0.5 * x2 + d * (1.0 - v + libm::log(v))
            {
                return libm::log(d * v);
            }
        }
    }

    /// `Gamma(shape, 1)` variate.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::param(alloc::format!("gamma shape must be positive, got {shape}")));
        }
        Ok(libm::exp(self.log_gamma_variate(shape)))
    }

    pub fn dirichlet(&mut self, concentration: &[f64]) -> Result<Vec<f64>> {
        if concentration.is_empty() {
            return Err(Error::param("empty Dirichlet concentration"));
        }
        if let Some(c) = concentration.iter().find(|&&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::param(alloc::format!(
                "Dirichlet concentration must be positive, got {c}"
            )));
        }
        let logs: Vec<f64> = concentration
            .iter()
            .map(|&a| self.log_gamma_variate(a))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = logs.iter().map(|&l| libm::exp(l - max)).collect();
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= sum);
        Ok(out)
    }
}

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE5_E4B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed: folds each label into the parent through the
/// SplitMix64 finalizer, `s ← mix64(s ⊕ mix64(label))`.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(seed), |s, &l| mix64(s ^ mix64(l)))
}

//! Deterministic transcendentals and seeded sampling for toy generation.
//!
//! Toy weight files must be byte-identical across platforms, so nothing in
//! the generation path may call libm (whose ln/sin/cos are not guaranteed
//! correctly rounded everywhere). These implementations use only IEEE-exact
//! arithmetic: +, -, *, /, sqrt, and bit manipulation.

use rand_core::{RngCore, SeedableRng};

/// Natural log via exponent extraction and the atanh series.
///
/// x = m * 2^e with m in [sqrt(1/2), sqrt(2)); ln m = 2 atanh((m-1)/(m+1))
/// summed to the t^19 term, which converges below 1 ulp for |t| <= 0.172.
pub fn det_ln(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "det_ln domain");
    let bits = x.to_bits();
    let mut exp = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    if exp == -1023 {
        // Subnormal: renormalize.
        let n = f64::from_bits(bits | 0x3ff0_0000_0000_0000) - 1.0;
        let nb = n.to_bits();
        exp = ((nb >> 52) & 0x7ff) as i64 - 1023 - 1022;
        m = f64::from_bits((nb & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000);
    }
    const SQRT2: f64 = 1.4142135623730951;
    if m > SQRT2 {
        m *= 0.5;
        exp += 1;
    }
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    let mut term = t;
    let mut sum = 0.0;
    for k in 0..10 {
        sum += term / (2 * k + 1) as f64;
        term *= t2;
    }
    2.0 * sum + exp as f64 * std::f64::consts::LN_2
}

fn sin_poly(r: f64) -> f64 {
    let r2 = r * r;
    r * (1.0
        + r2 * (-1.0 / 6.0
            + r2 * (1.0 / 120.0
                + r2 * (-1.0 / 5040.0
                    + r2 * (1.0 / 362_880.0
                        + r2 * (-1.0 / 39_916_800.0 + r2 * (1.0 / 6_227_020_800.0)))))))
}

fn cos_poly(r: f64) -> f64 {
    let r2 = r * r;
    1.0 + r2
        * (-0.5
            + r2 * (1.0 / 24.0
                + r2 * (-1.0 / 720.0
                    + r2 * (1.0 / 40_320.0
                        + r2 * (-1.0 / 3_628_800.0 + r2 * (1.0 / 479_001_600.0))))))
}

/// (sin x, cos x) for x in [-4pi, 4pi], via quadrant reduction and Taylor
/// polynomials on [-pi/4, pi/4].
pub fn det_sincos(x: f64) -> (f64, f64) {
    let k = (x / std::f64::consts::FRAC_PI_2).round();
    let r = x - k * std::f64::consts::FRAC_PI_2;
    let s = sin_poly(r);
    let c = cos_poly(r);
    match (k as i64).rem_euclid(4) {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

/// Seeded deterministic sampler: uniforms from the top 53 bits of a ChaCha8
/// stream, Gaussians by the Marsaglia polar method over [`det_ln`].
pub struct DetRng {
    rng: rand_chacha::ChaCha8Rng,
    spare: Option<f64>,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        (self.rng.next_u64() % n as u64) as usize
    }

    /// Standard normal.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(g) = self.spare.take() {
            return g;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let factor = (-2.0 * det_ln(s) / s).sqrt();
                self.spare = Some(v * factor);
                return u * factor;
            }
        }
    }

    /// A vector of standard normals.
    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_close_to_std() {
        for &x in &[1e-8, 0.3, 0.9999, 1.0, 1.5, 2.0, 123.456, 1e12] {
            assert!(
                (det_ln(x) - x.ln()).abs() <= 4.0 * f64::EPSILON * x.ln().abs().max(1.0),
                "x = {x}"
            );
        }
    }

    #[test]
    fn sincos_close_to_std() {
        for i in 0..200 {
            let x = i as f64 * 0.05;
            let (s, c) = det_sincos(x);
            assert!((s - x.sin()).abs() < 1e-14, "sin {x}");
            assert!((c - x.cos()).abs() < 1e-14, "cos {x}");
        }
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = DetRng::new(7);
        let mut b = DetRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
        }
    }

    #[test]
    fn gaussian_moments_roughly_standard() {
        let mut rng = DetRng::new(1);
        let n = 20_000;
        let xs = rng.gaussian_vec(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.05);
    }
}

//! Standard normal helpers.

use libm::erfc;
use statrs::function::erf::erfc_inv;

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Φ(x)`, accurate far into the tail.
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Two-sided p-value `2(1 - Φ(|z|))`.
pub fn two_sided(z: f64) -> f64 {
    (2.0 * sf(z.abs())).min(1.0)
}

/// `Φ⁻¹(p)` for `p` in (0, 1).
pub fn quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // One Newton step against the accurate cdf.
    let err = if x > 0.0 { (1.0 - p) - sf(x) } else { cdf(x) - p };
    let step = if x > 0.0 { -err } else { err } / pdf(x);
    x - step
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert!((cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((cdf(1.959963984540054) - 0.975).abs() < 1e-14);
        assert!((quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((quantile(0.5)).abs() < 1e-15);
        assert!((two_sided(1.959963984540054) - 0.05).abs() < 1e-14);
        // Deep tail stays relative-accurate.
        let p = sf(10.0);
        assert!((p / 7.619853024160527e-24 - 1.0).abs() < 1e-10);
        for &p in &[1e-10, 0.01, 0.3, 0.77, 0.999] {
            assert!((cdf(quantile(p)) - p).abs() <= 1e-12 * p);
        }
    }
}

//! Standard-normal integrals.
//!
//! Whitening reduces every posterior to N(0, I), so codebook design and loss
//! tables only ever need φ, Φ and a few truncated moments of the standard
//! normal. Conventions: `φ(±∞) = 0` and `z·φ(z) → 0` at `±∞`.

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// A closed interval `[lo, hi]` on the extended real line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::invalid(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub const fn whole_line() -> Self {
        Interval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

pub fn std_normal_pdf(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Φ(z), computed from the complementary error function.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// `z·φ(z)` with the limit 0 at ±∞.
fn z_pdf(z: f64) -> f64 {
    if z.is_infinite() {
        0.0
    } else {
        z * std_normal_pdf(z)
    }
}

/// P(lo ≤ Z ≤ hi), evaluated on the tail that keeps full relative precision.
pub fn interval_mass(iv: Interval) -> f64 {
    if iv.lo >= 0.0 {
        std_normal_cdf(-iv.lo) - std_normal_cdf(-iv.hi)
    } else if iv.hi <= 0.0 {
        std_normal_cdf(iv.hi) - std_normal_cdf(iv.lo)
    } else {
        1.0 - std_normal_cdf(iv.lo) - std_normal_cdf(-iv.hi)
    }
}

/// `∫_a^b (z − c)² φ(z) dz`.
pub fn cell_second_moment(iv: Interval, c: f64) -> f64 {
    let (a, b) = (iv.lo, iv.hi);
    let mass = interval_mass(iv);
    let v = (1.0 + c * c) * mass - (z_pdf(b) - z_pdf(a))
        + 2.0 * c * (std_normal_pdf(b) - std_normal_pdf(a));
    v.max(0.0)
}

/// Clipping noise `2∫_α^∞ (z − α)² φ(z) dz` of a symmetric range `[−α, α]`.
pub fn tail_term(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("tail_term needs alpha > 0, got {alpha}")));
    }
    Ok(tail_term_unchecked(alpha))
}

pub(crate) fn tail_term_unchecked(alpha: f64) -> f64 {
    let q = std_normal_cdf(-alpha);
    (2.0 * ((1.0 + alpha * alpha) * q - alpha * std_normal_pdf(alpha))).max(0.0)
}

/// Mean of the standard normal truncated to `iv`.
pub fn truncated_mean(iv: Interval) -> Result<f64> {
    let mass = interval_mass(iv);
    if !(mass > 0.0) {
        return Err(Error::ZeroMass {
            lo: iv.lo,
            hi: iv.hi,
        });
    }
    Ok((std_normal_pdf(iv.lo) - std_normal_pdf(iv.hi)) / mass)
}

/// Per-coordinate clipping probability `P(|z| > α) = 2Φ(−α)`.
pub fn clipping_probability(alpha: f64) -> f64 {
    2.0 * std_normal_cdf(-alpha.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Adaptive Simpson; independent of the closed forms above.
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
        fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    fn phi(z: f64) -> f64 {
        (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn pdf_values() {
        assert_eq!(std_normal_pdf(0.0), 0.398_942_280_401_432_7);
        assert!((std_normal_pdf(1.0) - 0.241_970_724_519_143_37).abs() < 1e-16);
        for z in [0.3, 1.7, 4.2] {
            assert_eq!(std_normal_pdf(z), std_normal_pdf(-z));
        }
    }

    #[test]
    fn cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert_eq!(std_normal_cdf(f64::INFINITY), 1.0);
        assert_eq!(std_normal_cdf(f64::NEG_INFINITY), 0.0);
        let quad = simpson(&phi, -40.0, -2.5, 1e-15);
        assert!((std_normal_cdf(-2.5) - quad).abs() < 1e-13);
        assert!((std_normal_cdf(-2.5) - 0.006_209_665_325_776_132).abs() < 1e-15);
    }

    #[test]
    fn cdf_accuracy_on_grid() {
        // Φ(z) = Φ(-8) + ∫_{-8}^{z} φ, with Φ(-8) from its own tail quadrature.
        let base = simpson(&phi, -60.0, -8.0, 1e-18);
        let mut z: f64 = -8.0;
        while z <= 8.0 {
            let quad = base + simpson(&phi, -8.0, z.max(-8.0 + 1e-12), 1e-15);
            assert!((std_normal_cdf(z) - quad).abs() < 1e-12, "z={z}");
            z += 0.5;
        }
    }

    #[test]
    fn cell_moment_whole_line() {
        let all = Interval::whole_line();
        assert!((cell_second_moment(all, 0.0) - 1.0).abs() < 1e-15);
        assert!((cell_second_moment(all, 2.0) - 5.0).abs() < 1e-14);
    }

    #[test]
    fn cell_moment_matches_quadrature() {
        let iv = Interval::new(0.0, 1.0).unwrap();
        let quad = simpson(&|z: f64| (z - 0.5).powi(2) * phi(z), 0.0, 1.0, 1e-15);
        assert!((cell_second_moment(iv, 0.5) - quad).abs() < 1e-10);
    }

    #[test]
    fn cell_moment_is_additive() {
        let m = 0.37;
        for (a, b, c) in [(-3.0, -0.2, 1.1), (-1.0, 0.0, 5.0), (0.4, 0.5, 0.6)] {
            let whole = cell_second_moment(Interval::new(a, c).unwrap(), m);
            let parts = cell_second_moment(Interval::new(a, b).unwrap(), m)
                + cell_second_moment(Interval::new(b, c).unwrap(), m);
            assert!((whole - parts).abs() < 1e-14);
        }
    }

    #[test]
    fn cell_moment_minimized_at_truncated_mean() {
        let iv = Interval::new(-0.3, 1.9).unwrap();
        let best = truncated_mean(iv).unwrap();
        let at_best = cell_second_moment(iv, best);
        for k in 0..=400 {
            let c = -2.0 + k as f64 * 0.01;
            assert!(cell_second_moment(iv, c) >= at_best - 1e-15);
        }
    }

    #[test]
    fn tail_term_values() {
        assert!(tail_term(8.0).unwrap() < 1e-12);
        assert!(tail_term(2.0).unwrap() > tail_term(3.0).unwrap());
        assert!(tail_term(0.0).is_err());
        assert!(tail_term(-1.0).is_err());
        for k in 0..7 {
            let alpha = 1.5 + 0.5 * k as f64;
            let f = |z: f64| (z - alpha).powi(2) * phi(z);
            let quad: f64 = 2.0 * (0..16).map(|j| simpson(&f, alpha + j as f64, alpha + j as f64 + 1.0, 1e-16)).sum::<f64>();
            assert!((tail_term(alpha).unwrap() - quad).abs() < 1e-10, "alpha={alpha}");
        }
    }

    #[test]
    fn tail_term_strictly_decreasing() {
        let mut prev = tail_term(0.05).unwrap();
        for k in 2..160 {
            let t = tail_term(0.05 * k as f64).unwrap();
            assert!(t < prev);
            prev = t;
        }
    }

    #[test]
    fn truncated_mean_values() {
        assert_eq!(truncated_mean(Interval::whole_line()).unwrap(), 0.0);
        let half = truncated_mean(Interval::new(0.0, f64::INFINITY).unwrap()).unwrap();
        assert!((half - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!(truncated_mean(Interval::new(-1.0, 1.0).unwrap()).unwrap().abs() < 1e-16);
        assert!(matches!(
            truncated_mean(Interval::new(2.0, 2.0).unwrap()),
            Err(Error::ZeroMass { .. })
        ));
    }

    #[test]
    fn interval_rejects_reversed_bounds() {
        assert!(Interval::new(1.0, 0.0).is_err());
        assert!(Interval::new(f64::NAN, 0.0).is_err());
    }
}

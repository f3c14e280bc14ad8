//! Special functions: Gamma, generalized binomial coefficients and the
//! one-parameter Mittag-Leffler function.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 607.0 / 128.0;
const LANCZOS_COEFFS: [f64; 15] = [
    0.999_999_999_999_997_1,
    57.156_235_665_862_92,
    -59.597_960_355_475_49,
    14.136_097_974_741_747,
    -0.491_913_816_097_620_2,
    3.399_464_998_481_189e-5,
    4.652_362_892_704_858e-5,
    -9.837_447_530_487_956e-5,
    1.580_887_032_249_125e-4,
    -2.102_644_417_241_049e-4,
    2.174_396_181_152_126_4e-4,
    -1.643_181_065_367_639e-4,
    8.441_822_398_385_275e-5,
    -2.619_083_840_158_141e-5,
    3.689_918_265_953_162_4e-6,
];
const SQRT_TWO_PI: f64 = 2.506_628_274_631_000_7;

fn is_pole(x: f64) -> bool {
    x <= 0.0 && x == x.round()
}

/// `sin(πx)` with exact zeros at the integers.
fn sin_pi(x: f64) -> f64 {
    let r = x - 2.0 * (x / 2.0).round(); // r in [-1, 1]
    if r == 0.0 || r.abs() == 1.0 {
        return 0.0;
    }
    let (sign, r) = if r < 0.0 { (-1.0, -r) } else { (1.0, r) };
    let r = if r > 0.5 { 1.0 - r } else { r };
    sign * (PI * r).sin()
}

/// Lanczos sum for `x >= 0.5`, returning `(A(x), t)` with
/// `Γ(x) = √(2π) t^(x-1/2) e^(-t) A(x)`.
fn lanczos(x: f64) -> (f64, f64) {
    let xm1 = x - 1.0;
    let mut a = LANCZOS_COEFFS[0];
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        a += c / (xm1 + i as f64);
    }
    (a, xm1 + LANCZOS_G + 0.5)
}

fn gamma_positive(x: f64) -> f64 {
    if x == x.trunc() && x <= 30.0 {
        // exact factorials for small integers
        return (2..x as u32).fold(1.0, |acc, j| acc * j as f64);
    }
    let (a, t) = lanczos(x);
    // split the power so t^(x-1/2) does not overflow before e^-t brings it back
    let half = t.powf((x - 0.5) / 2.0);
    SQRT_TWO_PI * half * (half * (-t).exp()) * a
}

/// Euler's Gamma function.
///
/// Uses a Lanczos approximation for `x >= 1/2` and the reflection formula
/// below that. Non-positive integers are poles.
pub fn gamma(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::domain("gamma of NaN"));
    }
    if is_pole(x) {
        return Err(Error::GammaPole(x));
    }
    if x >= 0.5 {
        Ok(gamma_positive(x))
    } else {
        Ok(PI / (sin_pi(x) * gamma_positive(1.0 - x)))
    }
}

/// `1/Γ(x)`, an entire function: zero at the poles of Γ.
pub fn rgamma(x: f64) -> f64 {
    if is_pole(x) {
        0.0
    } else if x >= 0.5 {
        1.0 / gamma_positive(x)
    } else {
        sin_pi(x) * gamma_positive(1.0 - x) / PI
    }
}

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("ln_gamma requires x > 0, got {x}")));
    }
    if x < 0.5 {
        // Γ(x) = Γ(x+1)/x keeps the Lanczos branch
        return Ok(ln_gamma(x + 1.0)? - x.ln());
    }
    let (a, t) = lanczos(x);
    Ok(SQRT_TWO_PI.ln() + (x - 0.5) * t.ln() - t + a.ln())
}

/// `Γ(a)/Γ(b)` for `a > 0`; zero when `b` is a pole of Γ.
pub fn gamma_ratio(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::domain(format!("gamma_ratio numerator argument must be > 0, got {a}")));
    }
    if is_pole(b) {
        return Ok(0.0);
    }
    if a < 140.0 && b < 140.0 {
        Ok(gamma_positive_or_reflect(a) * rgamma(b))
    } else if b > 0.0 {
        Ok((ln_gamma(a)? - ln_gamma(b)?).exp())
    } else {
        Ok(f64::INFINITY)
    }
}

fn gamma_positive_or_reflect(x: f64) -> f64 {
    if x >= 0.5 {
        gamma_positive(x)
    } else {
        PI / (sin_pi(x) * gamma_positive(1.0 - x))
    }
}

/// Generalized binomial coefficient `(α choose k)`.
pub fn gen_binomial(alpha: f64, k: u32) -> f64 {
    let mut w = 1.0;
    for j in 1..=k {
        let j = j as f64;
        w *= (alpha - j + 1.0) / j;
    }
    w
}

/// Controls for the truncated Mittag-Leffler series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlParams {
    /// Maximum number of series terms.
    pub truncation: usize,
    /// Absolute cutoff on the first omitted term.
    pub tolerance: f64,
}

impl Default for MlParams {
    fn default() -> Self {
        Self {
            truncation: 2000,
            tolerance: 1e-17,
        }
    }
}

impl MlParams {
    pub fn new(truncation: usize, tolerance: f64) -> Result<Self> {
        if truncation == 0 {
            return Err(Error::domain("Mittag-Leffler truncation must be >= 1"));
        }
        if !(tolerance > 0.0) {
            return Err(Error::domain("Mittag-Leffler tolerance must be > 0"));
        }
        Ok(Self {
            truncation,
            tolerance,
        })
    }
}

fn ml_term(alpha: f64, z: f64, m: usize) -> f64 {
    if m == 0 {
        return 1.0;
    }
    let arg = 1.0 + alpha * m as f64;
    if arg < 170.0 {
        z.powi(m as i32) * rgamma(arg)
    } else {
        let sign = if z < 0.0 && m % 2 == 1 { -1.0 } else { 1.0 };
        // arg > 0, so ln_gamma cannot fail
        let lg = ln_gamma(arg).unwrap_or(f64::INFINITY);
        sign * (m as f64 * z.abs().ln() - lg).exp()
    }
}

/// One-parameter Mittag-Leffler function `E_α(z) = Σ z^m / Γ(1 + αm)`.
///
/// Direct series summation. The sum stops at the first term that is both
/// below `params.tolerance` and past the peak of the term magnitudes. This is
/// reliable while the result is finite and, for `z < 0`, while the largest
/// term times machine epsilon stays below the accuracy the caller needs
/// (desk-scale arguments, roughly `|z| <= 30` for `α >= 0.3` with `z >= 0`
/// and `|z| <= 10` for `z < 0`).
pub fn mittag_leffler(alpha: f64, z: f64, params: &MlParams) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!("Mittag-Leffler alpha must lie in (0, 1], got {alpha}")));
    }
    if !z.is_finite() {
        return Err(Error::domain("Mittag-Leffler argument must be finite"));
    }
    if z == 0.0 {
        return Ok(1.0);
    }
    let mut sum = 0.0f64;
    let mut prev = f64::INFINITY;
    for m in 0..=params.truncation {
        let term = ml_term(alpha, z, m);
        if term.abs() < params.tolerance && term.abs() <= prev {
            return if sum.is_finite() {
                Ok(sum)
            } else {
                Err(Error::Accuracy {
                    terms: m,
                    last_term: term.abs(),
                })
            };
        }
        sum += term;
        prev = term.abs();
    }
    Err(Error::Accuracy {
        terms: params.truncation,
        last_term: prev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn gamma_at_small_integers_and_half() {
        assert_eq!(gamma(1.0).unwrap(), 1.0);
        assert!(rel(gamma(5.0).unwrap(), 24.0) < 1e-14);
        assert!(rel(gamma(1.5).unwrap(), 0.886_226_925_452_758) < 1e-14);
        assert!(rel(gamma(0.5).unwrap(), PI.sqrt()) < 1e-14);
    }

    #[test]
    fn gamma_matches_factorials_up_to_50() {
        let mut fact = 1.0f64;
        for n in 1..=50u32 {
            // Γ(n) = (n-1)!
            assert!(rel(gamma(n as f64).unwrap(), fact) < 1e-13, "n = {n}");
            fact *= n as f64;
        }
    }

    #[test]
    fn gamma_reflection_negative_arguments() {
        // Γ(-1/2) = -2√π, Γ(-3/2) = 4√π/3
        assert!(rel(gamma(-0.5).unwrap(), -2.0 * PI.sqrt()) < 1e-14);
        assert!(rel(gamma(-1.5).unwrap(), 4.0 * PI.sqrt() / 3.0) < 1e-14);
    }

    #[test]
    fn gamma_poles_are_reported() {
        for x in [0.0, -1.0, -2.0, -7.0] {
            assert_eq!(gamma(x), Err(Error::GammaPole(x)));
            assert_eq!(rgamma(x), 0.0);
        }
    }

    #[test]
    fn ln_gamma_agrees_with_gamma() {
        for x in [0.1, 0.7, 1.0, 3.3, 20.5, 49.0] {
            assert!((ln_gamma(x).unwrap() - gamma(x).unwrap().ln()).abs() < 1e-13);
        }
    }

    #[test]
    fn gamma_ratio_small_and_large() {
        assert!(rel(gamma_ratio(5.0, 3.0).unwrap(), 12.0) < 1e-14);
        assert_eq!(gamma_ratio(2.0, 0.0).unwrap(), 0.0);
        // Γ(201)/Γ(200) = 200
        assert!(rel(gamma_ratio(201.0, 200.0).unwrap(), 200.0) < 1e-10);
    }

    #[test]
    fn gen_binomial_examples() {
        assert_eq!(gen_binomial(0.5, 0), 1.0);
        assert_eq!(gen_binomial(0.5, 2), -0.125);
        assert_eq!(gen_binomial(3.0, 4), 0.0);
        assert_eq!(gen_binomial(3.0, 2), 3.0);
    }

    #[test]
    fn mittag_leffler_examples() {
        let p = MlParams::default();
        assert!(rel(mittag_leffler(1.0, 1.0, &p).unwrap(), std::f64::consts::E) < 1e-15);
        assert_eq!(mittag_leffler(0.5, 0.0, &p).unwrap(), 1.0);
        // E_{1/2}(1) = e·erfc(-1) = 5.00898008076228346...
        assert!(rel(mittag_leffler(0.5, 1.0, &p).unwrap(), 5.008_980_080_762_283) < 1e-14);
    }

    #[test]
    fn mittag_leffler_reports_truncation_budget() {
        let p = MlParams::new(5, 1e-16).unwrap();
        assert!(matches!(
            mittag_leffler(0.5, 3.0, &p),
            Err(Error::Accuracy { terms: 5, .. })
        ));
    }

    #[test]
    fn mittag_leffler_rejects_bad_alpha() {
        let p = MlParams::default();
        assert!(mittag_leffler(0.0, 1.0, &p).is_err());
        assert!(mittag_leffler(1.5, 1.0, &p).is_err());
        assert!(MlParams::new(0, 1e-3).is_err());
        assert!(MlParams::new(3, 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn gamma_recurrence(x in 0.1f64..40.0) {
                let lhs = gamma(x + 1.0).unwrap();
                let rhs = x * gamma(x).unwrap();
                prop_assert!(rel(lhs, rhs) <= 1e-12, "x = {x}: {lhs} vs {rhs}");
            }

            #[test]
            fn binomial_matches_gamma_ratio(alpha in -3.0f64..3.0, k in 0u32..12) {
                let denom_arg = alpha - k as f64 + 1.0;
                prop_assume!(!is_pole(alpha + 1.0) && !is_pole(denom_arg));
                let via_gamma =
                    gamma(alpha + 1.0).unwrap() / (gamma(k as f64 + 1.0).unwrap() * gamma(denom_arg).unwrap());
                let w = gen_binomial(alpha, k);
                prop_assert!((w - via_gamma).abs() <= 1e-10 * via_gamma.abs().max(1e-300), "{w} vs {via_gamma}");
            }

            #[test]
            fn mittag_leffler_one_is_exp(z in -5.0f64..5.0) {
                let v = mittag_leffler(1.0, z, &MlParams::default()).unwrap();
                prop_assert!(rel(v, z.exp()) <= 1e-10);
            }
        }
    }
}

//! Exact reviewed fractional calculus on finite fractional-power series
//! `Σ c_m (t - a)^{γ_m}` with `γ_m >= 0`.
//!
//! The power rule `D^α t^γ = Γ(1+γ)/Γ(1+γ-α) t^{γ-α}` maps the class into
//! itself as long as every exponent is either `0` or at least `α`, which is
//! the admissibility condition enforced here. Constants are annihilated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specfun::{gamma, gamma_ratio, gen_binomial, rgamma};

/// Two exponents closer than this are the same exponent.
pub const EXPONENT_TOL: f64 = 1e-9;

/// A single `coefficient · (t - a)^exponent` term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coeff: f64,
    pub exponent: f64,
}

/// Finite fractional-power series, normalized: exponents sorted ascending and
/// pairwise distinct, no zero coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FracSeries {
    terms: Vec<Term>,
    base_point: f64,
}

impl Default for FracSeries {
    fn default() -> Self {
        Self::zero()
    }
}

impl FracSeries {
    pub fn zero() -> Self {
        Self {
            terms: Vec::new(),
            base_point: 0.0,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::monomial(c, 0.0).expect("exponent 0 is admissible")
    }

    pub fn monomial(coeff: f64, exponent: f64) -> Result<Self> {
        Self::new([(coeff, exponent)])
    }

    /// Builds a series from `(coefficient, exponent)` pairs.
    pub fn new(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut terms = Vec::new();
        for (coeff, exponent) in pairs {
            if !coeff.is_finite() || !exponent.is_finite() {
                return Err(Error::domain(format!(
                    "non-finite term {coeff} * t^{exponent}"
                )));
            }
            if exponent < -EXPONENT_TOL {
                return Err(Error::domain(format!(
                    "negative exponent {exponent} is outside the series class"
                )));
            }
            terms.push(Term {
                coeff,
                exponent: exponent.max(0.0),
            });
        }
        Ok(Self::from_terms_unchecked(terms, 0.0))
    }

    fn from_terms_unchecked(mut terms: Vec<Term>, base_point: f64) -> Self {
        terms.sort_by(|a, b| a.exponent.total_cmp(&b.exponent));
        let mut merged: Vec<Term> = Vec::with_capacity(terms.len());
        for t in terms {
            let exponent = if t.exponent.abs() <= EXPONENT_TOL {
                0.0
            } else {
                t.exponent
            };
            match merged.last_mut() {
                Some(last) if (last.exponent - exponent).abs() <= EXPONENT_TOL => {
                    last.coeff += t.coeff;
                }
                _ => merged.push(Term {
                    coeff: t.coeff,
                    exponent,
                }),
            }
        }
        merged.retain(|t| t.coeff != 0.0);
        Self {
            terms: merged,
            base_point,
        }
    }

    /// Sets the lower limit `a`; terms are read as powers of `t - a`.
    pub fn with_base_point(mut self, a: f64) -> Self {
        self.base_point = a;
        self
    }

    pub fn base_point(&self) -> f64 {
        self.base_point
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Coefficient of the term with the given exponent (0 if absent).
    pub fn coeff_of(&self, exponent: f64) -> f64 {
        self.terms
            .iter()
            .find(|t| (t.exponent - exponent).abs() <= EXPONENT_TOL)
            .map_or(0.0, |t| t.coeff)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_terms_unchecked(
            self.terms
                .iter()
                .map(|t| Term {
                    coeff: t.coeff * s,
                    exponent: t.exponent,
                })
                .collect(),
            self.base_point,
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Self::from_terms_unchecked(terms, self.base_point)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    /// Largest absolute coefficient (0 for the zero series).
    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.iter().fold(0.0, |m, t| m.max(t.coeff.abs()))
    }

    /// `Σ c (t-a)^γ` with `0^0 = 1`. For `t < a` non-integer exponents give NaN.
    pub fn evaluate(&self, t: f64) -> f64 {
        let s = t - self.base_point;
        self.terms
            .iter()
            .map(|term| {
                if term.exponent == 0.0 {
                    term.coeff
                } else {
                    term.coeff * s.powf(term.exponent)
                }
            })
            .sum()
    }

    /// Reviewed fractional derivative `D^α` of order `α ∈ (0, 1]`.
    pub fn frac_derive(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let mut out = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            if t.exponent == 0.0 {
                continue;
            }
            let mut reduced = t.exponent - alpha;
            if reduced.abs() <= EXPONENT_TOL {
                reduced = 0.0;
            } else if reduced < 0.0 {
                return Err(Error::domain(format!(
                    "term {} * t^{} has exponent in (0, {alpha}); its derivative leaves the series class",
                    t.coeff, t.exponent
                )));
            }
            let ratio = gamma_ratio(1.0 + t.exponent, 1.0 + reduced)?;
            out.push(Term {
                coeff: t.coeff * ratio,
                exponent: reduced,
            });
        }
        Ok(Self::from_terms_unchecked(out, self.base_point))
    }

    /// `a`-fold composition `D^α ∘ … ∘ D^α`.
    pub fn frac_derive_iterated(&self, alpha: f64, a: u32) -> Result<Self> {
        if a == 0 {
            return Err(Error::domain("iteration count must be positive"));
        }
        let mut cur = self.frac_derive(alpha)?;
        for _ in 1..a {
            cur = cur.frac_derive(alpha)?;
        }
        Ok(cur)
    }

    /// Classical `k`-th derivative, term-wise. Terms whose exponent would go
    /// negative are rejected unless they vanish (integer exponents below `k`).
    pub fn classical_derive(&self, k: u32) -> Result<Self> {
        let mut out = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let c = falling_factorial(t.exponent, k);
            if c == 0.0 {
                continue;
            }
            let e = t.exponent - k as f64;
            if e < -EXPONENT_TOL {
                return Err(Error::domain(format!(
                    "classical derivative of order {k} of t^{} is singular at the base point",
                    t.exponent
                )));
            }
            out.push(Term {
                coeff: t.coeff * c,
                exponent: e.max(0.0),
            });
        }
        Ok(Self::from_terms_unchecked(out, self.base_point))
    }

    /// Serializes as a JSON array of `[coeff, exponent]` pairs.
    pub fn to_json(&self) -> String {
        let pairs: Vec<[f64; 2]> = self.terms.iter().map(|t| [t.coeff, t.exponent]).collect();
        serde_json::to_string(&pairs).expect("plain arrays always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pairs: Vec<[f64; 2]> = serde_json::from_str(text)
            .map_err(|e| Error::domain(format!("invalid series JSON: {e}")))?;
        Self::new(pairs.into_iter().map(|[c, e]| (c, e)))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("derivative order must lie in (0, 1], got {alpha}")))
    }
}

/// `γ(γ-1)…(γ-k+1)`.
fn falling_factorial(gamma_exp: f64, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (gamma_exp - j as f64))
}

/// Max coefficient discrepancy between `D^β f` and `D^α (D^{β-α} f)`.
pub fn semigroup_check(f: &FracSeries, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < beta && beta <= 1.0) {
        return Err(Error::domain(format!(
            "semigroup check needs 0 < alpha < beta <= 1, got alpha = {alpha}, beta = {beta}"
        )));
    }
    let direct = f.frac_derive(beta)?;
    let composed = f.frac_derive(beta - alpha)?.frac_derive(alpha)?;
    Ok(direct.sub(&composed).max_abs_coeff())
}

/// Truncated fractional Leibniz rule
/// `Σ_{k=0}^{K} (α choose k) D^{α-k} f1 · (d/dt)^k f2`.
///
/// Each pair of terms `t^{γ1}`, `t^{γ2}` contributes to the single exponent
/// `γ1 + γ2 - α`, so the sum is assembled pairwise without materializing the
/// negative-exponent intermediates. For `k >= 1`, `D^{α-k}` is the
/// Riemann-Liouville integral of order `k - α`; a pair of two constants is
/// dropped, which is exactly the `(f1 f2)(0)` subtraction of the reviewed
/// derivative.
pub fn leibniz_series(f1: &FracSeries, f2: &FracSeries, alpha: f64, order: u32) -> Result<FracSeries> {
    check_alpha(alpha)?;
    if f1.base_point != f2.base_point {
        return Err(Error::domain("Leibniz rule needs a common base point"));
    }
    let binoms: Vec<f64> = (0..=order).map(|k| gen_binomial(alpha, k)).collect();
    let mut out = Vec::new();
    for a in &f1.terms {
        for b in &f2.terms {
            if a.exponent == 0.0 && b.exponent == 0.0 {
                continue;
            }
            let exponent = a.exponent + b.exponent - alpha;
            if exponent < -EXPONENT_TOL {
                return Err(Error::domain(format!(
                    "product term t^{} has exponent below alpha = {alpha}",
                    a.exponent + b.exponent
                )));
            }
            let exponent = if exponent.abs() <= EXPONENT_TOL { 0.0 } else { exponent };
            let g1 = gamma(1.0 + a.exponent)?;
            let mut sum = 0.0;
            for (k, w) in binoms.iter().enumerate() {
                let ff = falling_factorial(b.exponent, k as u32);
                if ff == 0.0 {
                    continue;
                }
                sum += w * g1 * rgamma(1.0 + a.exponent - alpha + k as f64) * ff;
            }
            out.push(Term {
                coeff: a.coeff * b.coeff * sum,
                exponent,
            });
        }
    }
    Ok(FracSeries::from_terms_unchecked(out, f1.base_point))
}

/// Fractional Taylor reconstruction
/// `Σ_{h=0}^{H} t^{αh}/Γ(1+αh) · (D^{αh} f)(0)`.
pub fn ml_reconstruct(f: &FracSeries, alpha: f64, max_order: u32) -> Result<FracSeries> {
    check_alpha(alpha)?;
    for t in &f.terms {
        let m = t.exponent / alpha;
        if (m - m.round()).abs() * alpha > EXPONENT_TOL {
            return Err(Error::domain(format!(
                "exponent {} is not a multiple of alpha = {alpha}",
                t.exponent
            )));
        }
        if m.round() as u64 > max_order as u64 {
            return Err(Error::domain(format!(
                "exponent {} needs order {} > H = {max_order}",
                t.exponent,
                m.round()
            )));
        }
    }
    let mut out = vec![Term {
        coeff: f.evaluate(f.base_point),
        exponent: 0.0,
    }];
    let mut cur = f.clone();
    for h in 1..=max_order {
        cur = cur.frac_derive(alpha)?;
        let at_zero = cur.coeff_of(0.0);
        let e = alpha * h as f64;
        out.push(Term {
            coeff: at_zero * rgamma(1.0 + e),
            exponent: e,
        });
    }
    Ok(FracSeries::from_terms_unchecked(out, f.base_point))
}

/// A series in powers of `b - t`, representing `f(t) = g(b - t)`.
///
/// The right-sided reviewed derivative on `[a, b]` is the left derivative
/// after the reflection `t ↦ b - t`: `*D^α f(t) = (D^α g)(b - t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MirroredSeries {
    pub series: FracSeries,
    pub end_point: f64,
}

impl MirroredSeries {
    pub fn new(series: FracSeries, end_point: f64) -> Self {
        Self { series, end_point }
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        self.series.evaluate(self.end_point - t + self.series.base_point)
    }

    pub fn right_derive(&self, alpha: f64) -> Result<Self> {
        Ok(Self {
            series: self.series.frac_derive(alpha)?,
            end_point: self.end_point,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(pairs: &[(f64, f64)]) -> FracSeries {
        FracSeries::new(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn normalization_merges_and_drops_zeros() {
        let f = s(&[(1.0, 2.0), (0.0, 1.0), (2.0, 2.0 + 1e-12), (3.0, 0.5)]);
        assert_eq!(f.terms().len(), 2);
        assert_eq!(f.coeff_of(2.0), 3.0);
        assert_eq!(f.terms()[0].exponent, 0.5);
        assert!(FracSeries::new([(1.0, -0.5)]).is_err());
    }

    #[test]
    fn derive_power_rule_examples() {
        let d = s(&[(1.0, 1.0)]).frac_derive(0.5).unwrap();
        assert!((d.coeff_of(0.5) - 2.0 / std::f64::consts::PI.sqrt()).abs() < 1e-14);
        assert!(FracSeries::constant(7.0).frac_derive(0.3).unwrap().is_zero());
        let g15 = gamma(1.5).unwrap();
        let one = s(&[(1.0 / g15, 0.5)]).frac_derive(0.5).unwrap();
        assert_eq!(one.terms().len(), 1);
        assert!((one.coeff_of(0.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn derive_rejects_exponent_below_alpha() {
        let err = s(&[(2.0, 0.2)]).frac_derive(0.5).unwrap_err();
        assert!(matches!(err, Error::Domain(msg) if msg.contains("0.2")));
        assert!(s(&[(1.0, 1.0)]).frac_derive(0.0).is_err());
        assert!(s(&[(1.0, 1.0)]).frac_derive(1.2).is_err());
    }

    #[test]
    fn derive_at_alpha_one_is_classical() {
        let d = s(&[(3.0, 2.0), (1.0, 1.0), (5.0, 0.0)]).frac_derive(1.0).unwrap();
        assert!((d.coeff_of(1.0) - 6.0).abs() < 1e-13);
        assert!((d.coeff_of(0.0) - 1.0).abs() < 1e-14);
        assert_eq!(d.terms().len(), 2);
    }

    #[test]
    fn iterated_examples() {
        let d = s(&[(1.0, 1.0)]).frac_derive_iterated(0.5, 2).unwrap();
        assert_eq!(d.terms().len(), 1);
        assert!((d.coeff_of(0.0) - 1.0).abs() < 1e-14);
        let f = s(&[(2.0, 1.4), (1.0, 0.0)]);
        assert_eq!(f.frac_derive_iterated(0.7, 1).unwrap(), f.frac_derive(0.7).unwrap());
        // telescoping: D^{αm} t^{αm} = Γ(1+αm)
        let (alpha, m) = (0.3, 4);
        let e = alpha * m as f64;
        let d = s(&[(2.5, e)]).frac_derive_iterated(alpha, m).unwrap();
        assert!((d.evaluate(0.0) - 2.5 * gamma(1.0 + e).unwrap()).abs() < 1e-13);
    }

    #[test]
    fn semigroup_examples() {
        assert!(semigroup_check(&s(&[(1.0, 2.0)]), 0.3, 0.8).unwrap() <= 1e-12);
        assert_eq!(semigroup_check(&FracSeries::constant(5.0), 0.3, 0.8).unwrap(), 0.0);
        assert!(semigroup_check(&s(&[(1.0, 0.9), (1.0, 1.7)]), 0.2, 0.9).unwrap() <= 1e-12);
        assert!(semigroup_check(&s(&[(1.0, 0.5)]), 0.3, 0.8).is_err());
        assert!(semigroup_check(&s(&[(1.0, 2.0)]), 0.8, 0.3).is_err());
    }

    #[test]
    fn leibniz_examples() {
        let t = s(&[(1.0, 1.0)]);
        let one = FracSeries::constant(1.0);
        let l = leibniz_series(&t, &one, 0.5, 0).unwrap();
        let d = t.frac_derive(0.5).unwrap();
        assert!(l.sub(&d).max_abs_coeff() < 1e-15);

        // terminates: (d/dt)^2 t = 0
        let l = leibniz_series(&t, &t, 0.5, 1).unwrap();
        let d = s(&[(1.0, 2.0)]).frac_derive(0.5).unwrap();
        assert!(l.sub(&d).max_abs_coeff() < 1e-14);
        let l5 = leibniz_series(&t, &t, 0.5, 5).unwrap();
        assert!(l5.sub(&d).max_abs_coeff() < 1e-14);
    }

    #[test]
    fn leibniz_constant_factor_needs_rl_zeroth_term() {
        // D^α(1 · t) through the product rule
        let l = leibniz_series(&FracSeries::constant(1.0), &s(&[(1.0, 1.0)]), 0.4, 3).unwrap();
        let d = s(&[(1.0, 1.0)]).frac_derive(0.4).unwrap();
        assert!(l.sub(&d).max_abs_coeff() < 1e-14);
        // constant times constant is annihilated
        let c = leibniz_series(&FracSeries::constant(2.0), &FracSeries::constant(3.0), 0.4, 3).unwrap();
        assert!(c.is_zero());
    }

    #[test]
    fn leibniz_pole_case_at_alpha_one() {
        // Γ(1 + 0 - 1 + 0) is a pole: the k = 0 term vanishes, k = 1 gives t' = 1
        let l = leibniz_series(&FracSeries::constant(1.0), &s(&[(1.0, 1.0)]), 1.0, 2).unwrap();
        assert!((l.coeff_of(0.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ml_reconstruct_examples() {
        let f = s(&[(3.0, 0.0), (2.0, 0.5)]);
        let r = ml_reconstruct(&f, 0.5, 1).unwrap();
        assert!(r.sub(&f).max_abs_coeff() <= 1e-12);
        assert!(ml_reconstruct(&FracSeries::zero(), 0.5, 3).unwrap().is_zero());
        let f = s(&[(1.0, 1.5)]);
        let r = ml_reconstruct(&f, 0.5, 3).unwrap();
        assert!(r.sub(&f).max_abs_coeff() <= 1e-12);
        assert!(ml_reconstruct(&s(&[(1.0, 0.7)]), 0.5, 3).is_err());
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(s(&[(1.0, 2.0), (1.0, 0.0)]).evaluate(2.0), 5.0);
        assert_eq!(s(&[(1.0, 0.5)]).evaluate(4.0), 2.0);
        assert_eq!(FracSeries::zero().evaluate(3.0), 0.0);
        assert_eq!(FracSeries::constant(4.0).evaluate(0.0), 4.0);
        let shifted = s(&[(1.0, 2.0)]).with_base_point(1.0);
        assert_eq!(shifted.evaluate(3.0), 4.0);
    }

    #[test]
    fn json_round_trip() {
        let f = s(&[(1.5, 0.0), (-2.0, 0.75)]);
        let text = f.to_json();
        assert_eq!(text, "[[1.5,0.0],[-2.0,0.75]]");
        assert_eq!(FracSeries::from_json(&text).unwrap(), f);
        assert!(FracSeries::from_json("[[1, 2, 3]]").is_err());
    }

    #[test]
    fn mirrored_series_right_derivative() {
        // f(t) = (1 - t) on [0, 1]; *D^α f(t) = (1-t)^{1-α}/Γ(2-α)
        let m = MirroredSeries::new(s(&[(1.0, 1.0)]), 1.0);
        let d = m.right_derive(0.5).unwrap();
        let expect = 0.75f64.powf(0.5) / gamma(1.5).unwrap();
        assert!((d.evaluate(0.25) - expect).abs() < 1e-14);
        assert_eq!(m.evaluate(0.25), 0.75);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Admissible series for order `alpha`: exponents 0 or in [alpha, 3].
        fn admissible(min_exp: f64) -> impl Strategy<Value = FracSeries> {
            prop::collection::vec((-4.0f64..4.0, prop::bool::ANY, 0.0f64..1.0), 0..5).prop_map(move |raw| {
                FracSeries::new(raw.into_iter().map(|(c, constant, u)| {
                    (c, if constant { 0.0 } else { min_exp + u * (3.0 - min_exp) })
                }))
                .unwrap()
            })
        }

        proptest! {
            #[test]
            fn linearity(f in admissible(1.0), g in admissible(1.0), a in -3.0f64..3.0, b in -3.0f64..3.0, alpha in 0.05f64..1.0) {
                let lhs = f.scale(a).add(&g.scale(b)).frac_derive(alpha).unwrap();
                let rhs = f.frac_derive(alpha).unwrap().scale(a).add(&g.frac_derive(alpha).unwrap().scale(b));
                prop_assert!(lhs.sub(&rhs).max_abs_coeff() <= 1e-12);
            }

            #[test]
            fn semigroup_on_admissible_class(f in admissible(1.0), alpha in 0.05f64..0.5, gap in 0.05f64..0.5) {
                let beta = alpha + gap;
                prop_assert!(semigroup_check(&f, alpha, beta).unwrap() <= 1e-12);
            }

            #[test]
            fn kernel_is_exactly_the_constants(f in admissible(0.5), alpha in 0.05f64..0.5) {
                let d = f.frac_derive(alpha).unwrap();
                let non_constant = f.terms().iter().any(|t| t.exponent > 0.0);
                prop_assert_eq!(d.is_zero(), !non_constant);
            }

            #[test]
            fn ml_reconstruct_is_identity(
                coeffs in prop::collection::vec(-5.0f64..5.0, 1..11),
                alpha in prop::sample::select(vec![0.1, 0.2, 0.25, 0.5, 1.0]),
            ) {
                let f = FracSeries::new(coeffs.iter().enumerate().map(|(h, c)| (*c, alpha * h as f64))).unwrap();
                let r = ml_reconstruct(&f, alpha, 10).unwrap();
                prop_assert!(r.sub(&f).max_abs_coeff() <= 1e-12);
            }
        }

        #[test]
        fn classical_limit_is_monotone() {
            // |D^α t^2 - 2t| at t = 1
            let f = FracSeries::monomial(1.0, 2.0).unwrap();
            let errs: Vec<f64> = [0.9, 0.99, 0.999]
                .iter()
                .map(|a| (f.frac_derive(*a).unwrap().evaluate(1.0) - 2.0).abs())
                .collect();
            assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        }
    }
}

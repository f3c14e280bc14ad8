//! Chart-level fractional geometry: fractional Jacobians of coordinate
//! changes and the fractional exterior derivative on 0- and 1-forms.
//!
//! All charts live in the open positive orthant: the closed-form Jacobian
//! divides by powers of the coordinates.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::{parse_in, x_var, Expr, MonomialSum, Scope, VarBinding};
use crate::fracnum::numeric_frac_partial;

/// Step of the central differences used off the monomial fragment.
pub const FD_STEP: f64 = 1e-6;

/// A coordinate function with its monomial normal form when it has one.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordFn {
    pub expr: Expr,
    pub monomials: Option<MonomialSum>,
}

impl CoordFn {
    pub fn new(expr: Expr) -> Self {
        let monomials = expr.to_monomials().ok();
        Self { expr, monomials }
    }

    pub fn eval(&self, env: &VarBinding) -> Result<f64> {
        match &self.monomials {
            Some(m) => Ok(m.eval(env)?),
            None => Ok(self.expr.eval(env)?),
        }
    }
}

pub fn chart_binding(x: &[f64]) -> VarBinding {
    x.iter().enumerate().map(|(i, v)| (x_var(i + 1), *v)).collect()
}

/// Change of chart `x̄ = x̄(x)` together with its inverse. Both sides name
/// their coordinates `x1..xn`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartMap {
    pub alpha: f64,
    pub forward: Vec<CoordFn>,
    pub inverse: Vec<CoordFn>,
}

/// Which Jacobian of a chart map to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `J(x̄, x)`, from the forward map at `x`.
    Forward,
    /// `J(x, x̄)`, from the inverse map at `x̄ = x̄(x)`.
    Inverse,
}

impl ChartMap {
    pub fn new(forward: Vec<Expr>, inverse: Vec<Expr>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::domain(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if forward.is_empty() || forward.len() != inverse.len() {
            return Err(Error::Dimension(format!(
                "chart map needs n >= 1 forward and inverse components, got {} and {}",
                forward.len(),
                inverse.len()
            )));
        }
        Ok(Self {
            alpha,
            forward: forward.into_iter().map(CoordFn::new).collect(),
            inverse: inverse.into_iter().map(CoordFn::new).collect(),
        })
    }

    pub fn parse(forward: &[&str], inverse: &[&str], alpha: f64) -> Result<Self> {
        let scope = Scope::chart(forward.len());
        let fw = forward.iter().map(|s| parse_in(s, scope)).collect::<Result<Vec<_>, _>>()?;
        let inv = inverse.iter().map(|s| parse_in(s, scope)).collect::<Result<Vec<_>, _>>()?;
        Self::new(fw, inv, alpha)
    }

    pub fn identity(n: usize, alpha: f64) -> Result<Self> {
        let ids: Vec<Expr> = (1..=n).map(|i| Expr::var(x_var(i))).collect();
        Self::new(ids.clone(), ids, alpha)
    }

    pub fn n(&self) -> usize {
        self.forward.len()
    }

    /// The map with forward and inverse swapped.
    pub fn inverted(&self) -> Self {
        Self {
            alpha: self.alpha,
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
        }
    }

    pub fn forward_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        apply(&self.forward, x)
    }

    pub fn inverse_point(&self, xbar: &[f64]) -> Result<Vec<f64>> {
        apply(&self.inverse, xbar)
    }

    /// Max-norm of `inverse(forward(x)) - x`.
    pub fn inverse_residual(&self, x: &[f64]) -> Result<f64> {
        let back = self.inverse_point(&self.forward_point(x)?)?;
        Ok(back.iter().zip(x).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

fn apply(fns: &[CoordFn], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != fns.len() {
        return Err(Error::Dimension(format!(
            "point has {} coordinates, chart has {}",
            x.len(),
            fns.len()
        )));
    }
    let env = chart_binding(x);
    fns.iter().map(|f| f.eval(&env)).collect()
}

fn check_positive(x: &[f64], what: &str) -> Result<()> {
    match x.iter().position(|v| !(*v > 0.0)) {
        Some(i) => Err(Error::Singular(format!(
            "{what} coordinate x{} = {} is not positive; fractional Jacobians need the open positive orthant",
            i + 1,
            x[i]
        ))),
        None => Ok(()),
    }
}

/// Classical Jacobian `∂f^i/∂x^j`: exact on the monomial fragment, central
/// differences with step [`FD_STEP`] otherwise.
pub fn classical_jacobian(fns: &[CoordFn], x: &[f64]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let env = chart_binding(x);
    let mut jac = DMatrix::zeros(fns.len(), n);
    for (i, f) in fns.iter().enumerate() {
        for j in 0..n {
            jac[(i, j)] = match &f.monomials {
                Some(m) => m.partial(&x_var(j + 1)).eval(&env)?,
                None => {
                    let mut env = env.clone();
                    let name = x_var(j + 1);
                    env.insert(name.clone(), x[j] + FD_STEP);
                    let up = f.expr.eval(&env)?;
                    env.insert(name, x[j] - FD_STEP);
                    let down = f.expr.eval(&env)?;
                    (up - down) / (2.0 * FD_STEP)
                }
            };
        }
    }
    Ok(jac)
}

fn check_rank(jac: &DMatrix<f64>) -> Result<()> {
    let sv = jac.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::Singular(format!(
            "classical Jacobian is rank deficient (singular values {:?})",
            sv.as_slice()
        )));
    }
    Ok(())
}

/// Power-weighted Jacobian `(u^i)^{α-1} ∂u^i/∂v^j (v^j)^{1-α}` of `u = f(v)`.
fn weighted_jacobian(fns: &[CoordFn], v: &[f64], alpha: f64) -> Result<DMatrix<f64>> {
    check_positive(v, "source")?;
    let u = apply(fns, v)?;
    check_positive(&u, "target")?;
    let jac = classical_jacobian(fns, v)?;
    check_rank(&jac)?;
    let n = v.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        u[i].powf(alpha - 1.0) * jac[(i, j)] * v[j].powf(1.0 - alpha)
    }))
}

/// Fractional Jacobian at the point `at` of the source chart.
pub fn frac_jacobian(m: &ChartMap, at: &[f64], direction: Direction) -> Result<DMatrix<f64>> {
    match direction {
        Direction::Forward => weighted_jacobian(&m.forward, at, m.alpha),
        Direction::Inverse => {
            check_positive(at, "source")?;
            let xbar = m.forward_point(at)?;
            weighted_jacobian(&m.inverse, &xbar, m.alpha)
        }
    }
}

/// Max-norm of `J(x, x̄)·J(x̄, x) - I`.
pub fn jacobian_identity_residual(m: &ChartMap, at: &[f64]) -> Result<f64> {
    let inv = frac_jacobian(m, at, Direction::Inverse)?;
    let fwd = frac_jacobian(m, at, Direction::Forward)?;
    let prod = inv * fwd;
    let n = at.len();
    Ok((prod - DMatrix::<f64>::identity(n, n)).amax())
}

/// The Γ-normalized variant `D^α_{v^j}(u^i)^α / Γ(1+α)`, available when every
/// component of the relevant map is a single monomial.
///
/// It coincides with [`frac_jacobian`] for linear diagonal maps; for
/// `u = v^p` the two differ by `Γ(1+pα)/(Γ(1+pα-α)Γ(1+α))` versus `p`.
pub fn gamma_form_jacobian(m: &ChartMap, at: &[f64], direction: Direction) -> Result<DMatrix<f64>> {
    let (fns, v) = match direction {
        Direction::Forward => (&m.forward, at.to_vec()),
        Direction::Inverse => (&m.inverse, m.forward_point(at)?),
    };
    check_positive(&v, "source")?;
    let n = v.len();
    let env = chart_binding(&v);
    let g = crate::specfun::gamma(1.0 + m.alpha)?;
    let mut out = DMatrix::zeros(n, n);
    for (i, f) in fns.iter().enumerate() {
        let mono = f
            .monomials
            .as_ref()
            .filter(|s| s.terms().len() == 1)
            .ok_or_else(|| Error::Unsupported(format!("component {} is not a single monomial", i + 1)))?;
        let powered = mono.pow(m.alpha)?;
        for j in 0..n {
            out[(i, j)] = powered.frac_partial(&x_var(j + 1), m.alpha)?.eval(&env)? / g;
        }
    }
    Ok(out)
}

/// Basis a 1-form is written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormBasis {
    /// `dx^j`
    Differential,
    /// `d(x^j)^α`
    Fractional,
}

/// 1-form `Σ a_j e^j` with symbolic components.
#[derive(Debug, Clone, PartialEq)]
pub struct FracOneForm {
    pub components: Vec<MonomialSum>,
    pub basis: FormBasis,
}

/// 2-form coefficients `c[i][j]` on `d(x^i)^α ∧ e^j`, where `e^j` is the
/// basis of the 1-form it came from. For the fractional basis the table is
/// antisymmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoForm {
    pub coeffs: Vec<Vec<MonomialSum>>,
    pub basis: FormBasis,
}

impl TwoForm {
    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().flatten().all(MonomialSum::is_zero)
    }
}

/// `d^α f = Σ D^α_{x^i} f · d(x^i)^α` on the monomial fragment.
pub fn exterior_d0(f: &Expr, n: usize, alpha: f64) -> Result<FracOneForm> {
    let m = f.to_monomials()?;
    let components = (1..=n)
        .map(|i| m.frac_partial(&x_var(i), alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(FracOneForm {
        components,
        basis: FormBasis::Fractional,
    })
}

/// Pointwise `d^α f` for expressions outside the monomial fragment, each
/// component by a Grünwald-Letnikov sweep along its axis with step `h`.
pub fn exterior_d0_numeric(f: &Expr, alpha: f64, at: &[f64], h: f64) -> Result<Vec<f64>> {
    let env = chart_binding(at);
    (1..=at.len())
        .map(|i| numeric_frac_partial(f, &env, &x_var(i), alpha, h))
        .collect()
}

/// `d^α(a_j e^j)`: coefficient `D^α_{x^i} a_j` on `d(x^i)^α ∧ dx^j`, or
/// `D^α_{x^i} b_j - D^α_{x^j} b_i` on `d(x^i)^α ∧ d(x^j)^α`.
pub fn exterior_d1(w: &FracOneForm, alpha: f64) -> Result<TwoForm> {
    let n = w.components.len();
    let mut d = vec![vec![MonomialSum::zero(); n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = w.components[j].frac_partial(&x_var(i + 1), alpha)?;
        }
    }
    let coeffs = match w.basis {
        FormBasis::Differential => d,
        FormBasis::Fractional => (0..n)
            .map(|i| (0..n).map(|j| d[i][j].sub(&d[j][i])).collect())
            .collect(),
    };
    Ok(TwoForm {
        coeffs,
        basis: w.basis,
    })
}

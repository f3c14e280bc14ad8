//! The k-order fractional osculator bundle `E^{αk}`.
//!
//! Natural slots are ordered `x, y_1, …, y_k`, each block holding `n`
//! components, so slot `(a, i)` sits at index `a·n + i`. Connection
//! coefficients are stored as matrices with `N^{(a)}[i][j] = N^{(αa)}{}^i_j`,
//! the coefficient of `D_{y_a^i}` in the adapted vector `Δ_{x^j}`.

use log::warn;
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::expr::{parse_in, x_var, y_var, Expr, MonomialSum, Scope, VarBinding};
use crate::geometry::{frac_jacobian, ChartMap, Direction};
use crate::specfun::{gamma, rgamma};

/// Coordinates `(x, y_1, …, y_k)` of a point of `E^{αk}`.
#[derive(Debug, Clone, PartialEq)]
pub struct JetPoint {
    pub x: Vec<f64>,
    /// Row `a-1` holds `y^{i(αa)}`.
    pub y: Vec<Vec<f64>>,
}

impl JetPoint {
    pub fn new(x: Vec<f64>, y: Vec<Vec<f64>>) -> Result<Self> {
        if x.is_empty() || y.is_empty() || y.iter().any(|r| r.len() != x.len()) {
            return Err(Error::Dimension(format!(
                "jet point needs n >= 1, k >= 1 and k rows of n values (n = {}, rows = {:?})",
                x.len(),
                y.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn k(&self) -> usize {
        self.y.len()
    }

    pub fn binding(&self) -> VarBinding {
        let mut env: VarBinding = self.x.iter().enumerate().map(|(i, v)| (x_var(i + 1), *v)).collect();
        for (a, row) in self.y.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                env.insert(y_var(i + 1, a + 1), *v);
            }
        }
        env
    }

    /// Value in slot order `order` (0 for `x`), component `i`.
    pub fn coord(&self, order: usize, i: usize) -> f64 {
        if order == 0 {
            self.x[i]
        } else {
            self.y[order - 1][i]
        }
    }

    /// Whether the first jet row is nonzero (a point of the slit bundle).
    pub fn is_slit(&self) -> bool {
        self.y[0].iter().any(|v| *v != 0.0)
    }
}

/// Name of the slot variable of order `order` (0 for `x`), component `i` (0-based).
pub fn slot_var(order: usize, i: usize) -> String {
    if order == 0 {
        x_var(i + 1)
    } else {
        y_var(i + 1, order)
    }
}

/// Weights of the Liouville fields and of the spray.
///
/// `Consistent` uses `λ_1 = Γ(1+α)`, `λ_b = Γ(bα)/Γ(α)` throughout, which is
/// the ladder for which `J(Γ^{αa}) = Γ^{α(a-1)}` and `J(S) = Γ^{αk}` both hold.
/// `AsPrinted` reproduces the displayed fields literally: `Γ^α` with weight 1
/// and, for `k >= 3`, the top weight `Γ(α(k-1))/Γ(α)` in `Γ^{αk}` and `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LiouvilleConvention {
    #[default]
    Consistent,
    AsPrinted,
}

/// `λ_b` of the consistent ladder.
pub fn ladder_weight(alpha: f64, b: usize) -> f64 {
    if b == 1 {
        gamma(1.0 + alpha).expect("1 + alpha > 0")
    } else {
        gamma(b as f64 * alpha).expect("b alpha > 0") * rgamma(alpha)
    }
}

fn printed_weight(alpha: f64, k: usize, a: usize, b: usize) -> f64 {
    if a == 1 && k > 1 {
        return 1.0;
    }
    if a == k && b == k && k >= 3 {
        return gamma(alpha * (k - 1) as f64).expect("positive") * rgamma(alpha);
    }
    if a == 1 && k == 1 {
        // Γ^α = Γ^{αk}: the first line of the display gives weight 1
        return 1.0;
    }
    ladder_weight(alpha, b)
}

/// Weight of `y_b` in `Γ^{αa}` on a bundle of order `k`.
pub fn liouville_weight(conv: LiouvilleConvention, alpha: f64, k: usize, a: usize, b: usize) -> f64 {
    match conv {
        LiouvilleConvention::Consistent => ladder_weight(alpha, b),
        LiouvilleConvention::AsPrinted => printed_weight(alpha, k, a, b),
    }
}

/// `Γ^{αa} = Σ_{b≤a} w_b y_b^i D_{y_{k-a+b}^i}` as a natural-slot table.
pub fn liouville_field(a: usize, at: &JetPoint, alpha: f64, conv: LiouvilleConvention) -> Result<Vec<f64>> {
    let (n, k) = (at.n(), at.k());
    if a == 0 || a > k {
        return Err(Error::domain(format!("Liouville field index {a} outside 1..={k}")));
    }
    let mut v = vec![0.0; (k + 1) * n];
    for b in 1..=a {
        let w = liouville_weight(conv, alpha, k, a, b);
        let slot = k - a + b;
        for i in 0..n {
            v[slot * n + i] += w * at.y[b - 1][i];
        }
    }
    Ok(v)
}

/// Tangent structure: slot order `a` moves to `a+1`, the top order dies.
pub fn tangent_structure(v: &[f64], n: usize, k: usize) -> Result<Vec<f64>> {
    if v.len() != (k + 1) * n {
        return Err(Error::Dimension(format!(
            "table has {} slots, expected (k+1)n = {}",
            v.len(),
            (k + 1) * n
        )));
    }
    let mut out = vec![0.0; v.len()];
    out[n..].copy_from_slice(&v[..k * n]);
    Ok(out)
}

/// Matrix of the tangent structure on the `(k+1)n` natural slots.
pub fn tangent_structure_matrix(n: usize, k: usize) -> DMatrix<f64> {
    let dim = (k + 1) * n;
    DMatrix::from_fn(dim, dim, |r, c| if r == c + n { 1.0 } else { 0.0 })
}

/// `αk`-fractional spray: components `G^i(x, y_1, …, y_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FracSpray {
    pub k: usize,
    pub n: usize,
    pub alpha: f64,
    pub g: Vec<Expr>,
    pub convention: LiouvilleConvention,
}

impl FracSpray {
    pub fn new(k: usize, n: usize, alpha: f64, g: Vec<Expr>) -> Result<Self> {
        check_dims(k, n, alpha)?;
        if g.len() != n {
            return Err(Error::Dimension(format!("spray needs {n} components, got {}", g.len())));
        }
        let scope = Scope::jet(n, k);
        for e in &g {
            for v in e.vars() {
                if parse_in(&v, scope).is_err() {
                    return Err(Error::domain(format!("spray component uses `{v}` outside the (n, k) = ({n}, {k}) bundle")));
                }
            }
        }
        Ok(Self {
            k,
            n,
            alpha,
            g,
            convention: LiouvilleConvention::default(),
        })
    }

    pub fn parse(k: usize, n: usize, alpha: f64, g: &[&str]) -> Result<Self> {
        let scope = Scope::jet(n, k);
        let g = g.iter().map(|s| parse_in(s, scope)).collect::<Result<Vec<_>, _>>()?;
        Self::new(k, n, alpha, g)
    }

    pub fn from_monomials(k: usize, n: usize, alpha: f64, g: &[MonomialSum]) -> Result<Self> {
        Self::new(k, n, alpha, g.iter().map(MonomialSum::to_expr).collect())
    }

    pub fn with_convention(mut self, convention: LiouvilleConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn eval_g(&self, at: &JetPoint) -> Result<Vec<f64>> {
        let env = at.binding();
        self.g.iter().map(|e| Ok(e.eval(&env)?)).collect()
    }

    pub fn g_monomials(&self) -> Result<Vec<MonomialSum>> {
        self.g.iter().map(Expr::to_monomials).collect()
    }

    /// Weight `μ_k` of `-G` on the top slots.
    pub fn top_weight(&self) -> f64 {
        let k = self.k;
        if k == 1 {
            return 1.0;
        }
        match self.convention {
            LiouvilleConvention::Consistent => ladder_weight(self.alpha, k),
            LiouvilleConvention::AsPrinted => {
                gamma(self.alpha * k as f64).expect("positive") * rgamma(self.alpha)
            }
        }
    }

    /// Weight of `y_b` on the slots of order `b-1`.
    fn shift_weight(&self, b: usize) -> f64 {
        liouville_weight(self.convention, self.alpha, self.k, self.k, b)
    }

    /// `S(f) = Σ_b w_b y_b^i D^α_{y_{b-1}^i} f - μ_k G^i D^α_{y_k^i} f`.
    pub fn apply(&self, f: &MonomialSum, g: &[MonomialSum]) -> Result<MonomialSum> {
        let mut parts = Vec::new();
        for b in 1..=self.k {
            let w = self.shift_weight(b);
            for i in 0..self.n {
                let d = f.frac_partial(&slot_var(b - 1, i), self.alpha)?;
                if !d.is_zero() {
                    parts.push(d.mul(&MonomialSum::var(&slot_var(b, i))).scale(w));
                }
            }
        }
        let mu = self.top_weight();
        for (i, gi) in g.iter().enumerate() {
            let d = f.frac_partial(&slot_var(self.k, i), self.alpha)?;
            if !d.is_zero() {
                parts.push(d.mul(gi).scale(-mu));
            }
        }
        Ok(MonomialSum::sum(parts.iter()))
    }
}

fn check_dims(k: usize, n: usize, alpha: f64) -> Result<()> {
    if k == 0 || n == 0 {
        return Err(Error::Dimension(format!("need k >= 1 and n >= 1, got k = {k}, n = {n}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Natural-slot table of the spray at a point.
pub fn spray_field(s: &FracSpray, at: &JetPoint) -> Result<Vec<f64>> {
    if at.n() != s.n || at.k() != s.k {
        return Err(Error::Dimension("jet point does not match the spray's (n, k)".into()));
    }
    let n = s.n;
    let mut v = vec![0.0; (s.k + 1) * n];
    for b in 1..=s.k {
        let w = s.shift_weight(b);
        for i in 0..n {
            v[(b - 1) * n + i] = w * at.y[b - 1][i];
        }
    }
    let g = s.eval_g(at)?;
    let mu = s.top_weight();
    for i in 0..n {
        v[s.k * n + i] = -mu * g[i];
    }
    Ok(v)
}

/// `n × n` matrix of symbolic fields.
pub type FieldMatrix = Vec<Vec<MonomialSum>>;

pub fn field_zero(n: usize) -> FieldMatrix {
    vec![vec![MonomialSum::zero(); n]; n]
}

pub fn field_mul(a: &FieldMatrix, b: &FieldMatrix) -> FieldMatrix {
    let n = a.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let prods: Vec<MonomialSum> = (0..n).map(|l| a[i][l].mul(&b[l][j])).collect();
                    MonomialSum::sum(prods.iter())
                })
                .collect()
        })
        .collect()
}

pub fn field_add(a: &FieldMatrix, b: &FieldMatrix) -> FieldMatrix {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x.add(y)).collect())
        .collect()
}

pub fn field_sub(a: &FieldMatrix, b: &FieldMatrix) -> FieldMatrix {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x.sub(y)).collect())
        .collect()
}

pub fn field_scale(a: &FieldMatrix, s: f64) -> FieldMatrix {
    a.iter().map(|r| r.iter().map(|x| x.scale(s)).collect()).collect()
}

pub fn field_eval(a: &FieldMatrix, env: &VarBinding) -> Result<DMatrix<f64>> {
    let n = a.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = a[i][j].eval(env)?;
        }
    }
    Ok(m)
}

pub fn field_max_diff(a: &FieldMatrix, b: &FieldMatrix) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (x, y)| m.max(x.max_coeff_diff(y)))
}

/// Per-order coefficient fields of a nonlinear connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub k: usize,
    pub n: usize,
    pub alpha: f64,
    /// `blocks[a-1]` is the order-`a` matrix.
    pub blocks: Vec<FieldMatrix>,
}

impl Coefficients {
    pub fn new(k: usize, n: usize, alpha: f64, blocks: Vec<FieldMatrix>) -> Result<Self> {
        check_dims(k, n, alpha)?;
        if blocks.len() != k || blocks.iter().any(|b| b.len() != n || b.iter().any(|r| r.len() != n)) {
            return Err(Error::Dimension(format!("expected {k} blocks of {n}x{n} fields")));
        }
        Ok(Self { k, n, alpha, blocks })
    }

    pub fn zero(k: usize, n: usize, alpha: f64) -> Self {
        Self {
            k,
            n,
            alpha,
            blocks: vec![field_zero(n); k],
        }
    }

    /// Constant coefficients from numeric blocks.
    pub fn constant(alpha: f64, blocks: &[DMatrix<f64>]) -> Result<Self> {
        let n = blocks.first().map_or(0, |b| b.nrows());
        let fields = blocks
            .iter()
            .map(|b| {
                (0..n)
                    .map(|i| (0..n).map(|j| MonomialSum::constant(b[(i, j)])).collect())
                    .collect()
            })
            .collect();
        Self::new(blocks.len(), n, alpha, fields)
    }

    pub fn block(&self, a: usize) -> &FieldMatrix {
        &self.blocks[a - 1]
    }

    pub fn eval(&self, a: usize, at: &JetPoint) -> Result<DMatrix<f64>> {
        field_eval(self.block(a), &at.binding())
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().flatten().flatten().all(MonomialSum::is_zero)
    }

    pub fn max_diff(&self, other: &Self) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .fold(0.0, |m, (a, b)| m.max(field_max_diff(a, b)))
    }

    /// Max deviation between the two coefficient sets at a point.
    pub fn max_diff_at(&self, other: &Self, at: &JetPoint) -> Result<f64> {
        let mut worst = 0.0f64;
        for a in 1..=self.k {
            worst = worst.max((self.eval(a, at)? - other.eval(a, at)?).amax());
        }
        Ok(worst)
    }

    pub fn to_json(&self) -> Value {
        let blocks: Vec<Vec<Vec<String>>> = self
            .blocks
            .iter()
            .map(|b| b.iter().map(|r| r.iter().map(|f| f.to_string()).collect()).collect())
            .collect();
        json!({ "k": self.k, "n": self.n, "alpha": self.alpha, "blocks": blocks })
    }
}

/// Dual coefficients `M^{(αa)}{}^i_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCoefficients(pub Coefficients);

/// Primal coefficients `N^{(αa)}{}^i_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalCoefficients(pub Coefficients);

impl std::ops::Deref for DualCoefficients {
    type Target = Coefficients;
    fn deref(&self) -> &Coefficients {
        &self.0
    }
}

impl std::ops::Deref for PrimalCoefficients {
    type Target = Coefficients;
    fn deref(&self) -> &Coefficients {
        &self.0
    }
}

/// Dual coefficients of the connection defined by a spray:
/// `M^{(1)} = D^α_{y_1^j} G^i`,
/// `M^{(a+1)} = Γ(αa)/Γ(α(a+1)) (S(M^{(a)}) + M^{(1)} M^{(a)})`.
pub fn spray_to_dual(s: &FracSpray) -> Result<DualCoefficients> {
    let g = s.g_monomials()?;
    let n = s.n;
    let mut m1 = field_zero(n);
    for (i, gi) in g.iter().enumerate() {
        for j in 0..n {
            m1[i][j] = gi.frac_partial(&slot_var(1, j), s.alpha)?;
        }
    }
    let mut blocks = vec![m1.clone()];
    for a in 1..s.k {
        let prev = &blocks[a - 1];
        let mut next = field_mul(&m1, prev);
        for i in 0..n {
            for j in 0..n {
                next[i][j] = next[i][j].add(&s.apply(&prev[i][j], &g)?);
            }
        }
        let w = gamma(s.alpha * a as f64)? * rgamma(s.alpha * (a + 1) as f64);
        blocks.push(field_scale(&next, w));
    }
    Ok(DualCoefficients(Coefficients::new(s.k, n, s.alpha, blocks)?))
}

/// `M^{(a)} = N^{(a)} + Σ_{b<a} M^{(b)} N^{(a-b)}`, the relation under which the
/// dual coframe is the inverse of the adapted frame.
pub fn primal_to_dual(p: &PrimalCoefficients) -> DualCoefficients {
    let mut m: Vec<FieldMatrix> = Vec::with_capacity(p.k);
    for a in 1..=p.k {
        let mut cur = p.block(a).clone();
        for b in 1..a {
            cur = field_add(&cur, &field_mul(&m[b - 1], p.block(a - b)));
        }
        m.push(cur);
    }
    DualCoefficients(Coefficients {
        blocks: m,
        ..p.0.clone()
    })
}

/// Inverse of [`primal_to_dual`]: `N^{(a)} = M^{(a)} - Σ_{b<a} M^{(b)} N^{(a-b)}`.
pub fn dual_to_primal(d: &DualCoefficients) -> PrimalCoefficients {
    let mut nb: Vec<FieldMatrix> = Vec::with_capacity(d.k);
    for a in 1..=d.k {
        let mut cur = d.block(a).clone();
        for b in 1..a {
            cur = field_sub(&cur, &field_mul(d.block(b), &nb[a - b - 1]));
        }
        nb.push(cur);
    }
    PrimalCoefficients(Coefficients {
        blocks: nb,
        ..d.0.clone()
    })
}

/// The displayed quadratic-only relation `M^{(a)} = N^{(a)} + Σ_{b<a} N^{(a-b)} N^{(b)}`.
/// It agrees with [`primal_to_dual`] for `k <= 2` and lacks the higher products
/// from `k = 3` on.
pub fn primal_to_dual_displayed(p: &PrimalCoefficients) -> DualCoefficients {
    let mut m = Vec::with_capacity(p.k);
    for a in 1..=p.k {
        let mut cur = p.block(a).clone();
        for b in 1..a {
            cur = field_add(&cur, &field_mul(p.block(a - b), p.block(b)));
        }
        m.push(cur);
    }
    DualCoefficients(Coefficients {
        blocks: m,
        ..p.0.clone()
    })
}

fn block_matrix(n: usize, k: usize, mut entry: impl FnMut(usize, usize) -> Option<DMatrix<f64>>) -> DMatrix<f64> {
    let dim = (k + 1) * n;
    let mut out = DMatrix::zeros(dim, dim);
    for r in 0..=k {
        for c in 0..=k {
            if let Some(b) = entry(r, c) {
                out.view_mut((r * n, c * n), (n, n)).copy_from(&b);
            }
        }
    }
    out
}

/// Adapted frame as a matrix whose columns are `Δ_x, Δ_{y_1}, …, Δ_{y_{k-1}},
/// D_{y_k}` in natural components: identity diagonal, block `(r, c)` equal to
/// `-N^{(r-c)}` below it.
pub fn adapted_basis(p: &PrimalCoefficients, at: &JetPoint) -> Result<DMatrix<f64>> {
    let evals = (1..=p.k).map(|a| p.eval(a, at)).collect::<Result<Vec<_>>>()?;
    let n = p.n;
    Ok(block_matrix(n, p.k, |r, c| match r.cmp(&c) {
        std::cmp::Ordering::Equal => Some(DMatrix::identity(n, n)),
        std::cmp::Ordering::Greater => Some(-&evals[r - c - 1]),
        std::cmp::Ordering::Less => None,
    }))
}

/// Dual coframe as a matrix whose rows are `d(x)^α, δy_1, …, δy_k`: identity
/// diagonal, block `(a, c)` equal to `M^{(a-c)}` below it.
pub fn dual_basis(d: &DualCoefficients, at: &JetPoint) -> Result<DMatrix<f64>> {
    let evals = (1..=d.k).map(|a| d.eval(a, at)).collect::<Result<Vec<_>>>()?;
    let n = d.n;
    Ok(block_matrix(n, d.k, |r, c| match r.cmp(&c) {
        std::cmp::Ordering::Equal => Some(DMatrix::identity(n, n)),
        std::cmp::Ordering::Greater => Some(evals[r - c - 1].clone()),
        std::cmp::Ordering::Less => None,
    }))
}

/// Max-norm of `dual · adapted - I`.
pub fn basis_pairing_residual(p: &PrimalCoefficients, d: &DualCoefficients, at: &JetPoint) -> Result<f64> {
    let prod = dual_basis(d, at)? * adapted_basis(p, at)?;
    let dim = prod.nrows();
    Ok((prod - DMatrix::<f64>::identity(dim, dim)).amax())
}

/// Symmetric metric `g_ij(x, y_1, …, y_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    pub n: usize,
    pub g: FieldMatrix,
}

impl MetricField {
    pub fn new(g: FieldMatrix) -> Result<Self> {
        let n = g.len();
        if n == 0 || g.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("metric must be a non-empty square table".into()));
        }
        for i in 0..n {
            for j in 0..i {
                if g[i][j].max_coeff_diff(&g[j][i]) > 0.0 {
                    return Err(Error::domain(format!("metric is not symmetric in ({}, {})", i + 1, j + 1)));
                }
            }
        }
        Ok(Self { n, g })
    }

    /// Row-major entries; the table must be symmetric.
    pub fn parse(rows: &[Vec<&str>], scope: Scope) -> Result<Self> {
        let g = rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|s| parse_in(s, scope).map_err(Error::from).and_then(|e| e.to_monomials()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(g)
    }

    pub fn eval(&self, at: &JetPoint) -> Result<DMatrix<f64>> {
        field_eval(&self.g, &at.binding())
    }

    /// Inverse by LU, with a warning above condition number `1e12`.
    pub fn inverse(&self, at: &JetPoint) -> Result<DMatrix<f64>> {
        invert_metric(&self.eval(at)?)
    }
}

pub(crate) fn invert_metric(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sv = g.clone().svd(false, false).singular_values;
    let (max, min) = (sv.max(), sv.min());
    if !(min > 0.0) || min <= f64::EPSILON * max {
        return Err(Error::Singular(format!(
            "metric is singular (rank {} of {}, singular values {:?})",
            sv.iter().filter(|s| **s > f64::EPSILON * max).count(),
            g.nrows(),
            sv.as_slice()
        )));
    }
    if max / min > 1e12 {
        warn!("metric condition number {:.3e} exceeds 1e12", max / min);
    }
    g.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("LU factorization of the metric failed".into()))
}

/// Adapted derivative `Δ_{slot(order, m)} f` at a point:
/// `D^α_{slot} f - Σ_{a=1}^{k-order} N^{(a)}{}^j_m D^α_{y_{order+a}^j} f`.
pub fn adapted_derivative(
    f: &MonomialSum,
    order: usize,
    m: usize,
    p: &PrimalCoefficients,
    at: &JetPoint,
) -> Result<f64> {
    let env = at.binding();
    let mut v = f.frac_partial(&slot_var(order, m), p.alpha)?.eval(&env)?;
    for a in 1..=(p.k - order.min(p.k)) {
        let target = order + a;
        let nb = p.eval(a, at)?;
        for j in 0..p.n {
            let c = nb[(j, m)];
            if c != 0.0 {
                v -= c * f.frac_partial(&slot_var(target, j), p.alpha)?.eval(&env)?;
            }
        }
    }
    Ok(v)
}

/// `n³` table indexed `[i][j][l]` for `T^i_{jl}`.
pub type Christoffel = Vec<Vec<Vec<f64>>>;

/// Metrical linear connection evaluated at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricalConnection {
    pub l: Christoffel,
    /// `c[a-1]` holds `C^{(αa)}`.
    pub c: Vec<Christoffel>,
}

impl MetricalConnection {
    pub fn zero(n: usize, k: usize) -> Self {
        let z = vec![vec![vec![0.0; n]; n]; n];
        Self {
            l: z.clone(),
            c: vec![z; k],
        }
    }

    pub fn max_abs(&self) -> f64 {
        std::iter::once(&self.l)
            .chain(&self.c)
            .flatten()
            .flatten()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|T^i_{jl} - T^i_{lj}|` over L and every C.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for t in std::iter::once(&self.l).chain(&self.c) {
            let n = t.len();
            for i in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        worst = worst.max((t[i][j][l] - t[i][l][j]).abs());
                    }
                }
            }
        }
        worst
    }

    pub fn to_json(&self) -> Value {
        json!({ "L": self.l, "C": self.c })
    }
}

/// `½ g^{is}(Δ_j g_sl + Δ_l g_js - Δ_s g_jl)` with `Δ` of slot order `order`.
fn christoffel_with(
    g: &MetricField,
    ginv: &DMatrix<f64>,
    order: usize,
    p: &PrimalCoefficients,
    at: &JetPoint,
) -> Result<Christoffel> {
    let n = g.n;
    // dg[m][a][b] = Δ_m g_ab
    let mut dg = vec![vec![vec![0.0; n]; n]; n];
    for (m, slab) in dg.iter_mut().enumerate() {
        for a in 0..n {
            for b in 0..n {
                slab[a][b] = adapted_derivative(&g.g[a][b], order, m, p, at)?;
            }
        }
    }
    let mut out = vec![vec![vec![0.0; n]; n]; n];
    for (i, oi) in out.iter_mut().enumerate() {
        for j in 0..n {
            for l in 0..n {
                let mut s = 0.0;
                for q in 0..n {
                    s += ginv[(i, q)] * (dg[j][q][l] + dg[l][j][q] - dg[q][j][l]);
                }
                oi[j][l] = 0.5 * s;
            }
        }
    }
    Ok(out)
}

/// The metrical connection `(L, C^{(α1)}, …, C^{(αk)})` at a point.
pub fn metrical_connection(g: &MetricField, p: &PrimalCoefficients, at: &JetPoint) -> Result<MetricalConnection> {
    if g.n != p.n || at.n() != p.n || at.k() != p.k {
        return Err(Error::Dimension("metric, connection and point disagree on (n, k)".into()));
    }
    let ginv = g.inverse(at)?;
    let l = christoffel_with(g, &ginv, 0, p, at)?;
    let c = (1..=p.k)
        .map(|a| christoffel_with(g, &ginv, a, p, at))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricalConnection { l, c })
}

/// Covariant `(0, r)` d-tensor with symbolic components, row-major over the
/// multi-index.
#[derive(Debug, Clone, PartialEq)]
pub struct DTensor {
    pub n: usize,
    pub rank: usize,
    pub comps: Vec<MonomialSum>,
}

impl DTensor {
    pub fn new(n: usize, rank: usize, comps: Vec<MonomialSum>) -> Result<Self> {
        if comps.len() != n.pow(rank as u32) {
            return Err(Error::Dimension(format!(
                "rank-{rank} tensor in dimension {n} needs {} components, got {}",
                n.pow(rank as u32),
                comps.len()
            )));
        }
        Ok(Self { n, rank, comps })
    }

    pub fn from_metric(g: &MetricField) -> Self {
        Self {
            n: g.n,
            rank: 2,
            comps: g.g.iter().flatten().cloned().collect(),
        }
    }

    fn digits(&self, mut idx: usize) -> Vec<usize> {
        let mut d = vec![0; self.rank];
        for p in (0..self.rank).rev() {
            d[p] = idx % self.n;
            idx /= self.n;
        }
        d
    }

    fn index(&self, digits: &[usize]) -> usize {
        digits.iter().fold(0, |acc, d| acc * self.n + d)
    }
}

/// Horizontal (`|m`) and vertical (`|^{(αb)} m`) covariant derivatives at a
/// point, `[m][flat index]` and `[b-1][m][flat index]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariantDerivatives {
    pub horizontal: Vec<Vec<f64>>,
    pub vertical: Vec<Vec<Vec<f64>>>,
}

impl CovariantDerivatives {
    pub fn max_abs(&self) -> f64 {
        self.horizontal
            .iter()
            .flatten()
            .chain(self.vertical.iter().flatten().flatten())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Covariant derivatives of a d-tensor. Connection terms act on every lower
/// index, which is what makes `g_{ij|m} = 0` for the metrical connection.
pub fn covariant_derivative_d_tensor(
    t: &DTensor,
    conn: &MetricalConnection,
    p: &PrimalCoefficients,
    at: &JetPoint,
) -> Result<CovariantDerivatives> {
    let env = at.binding();
    let values = t.comps.iter().map(|c| Ok(c.eval(&env)?)).collect::<Result<Vec<f64>>>()?;
    let derive = |order: usize, table: &Christoffel| -> Result<Vec<Vec<f64>>> {
        let mut out = vec![vec![0.0; t.comps.len()]; t.n];
        for (m, row) in out.iter_mut().enumerate() {
            for (idx, slot) in row.iter_mut().enumerate() {
                let mut v = adapted_derivative(&t.comps[idx], order, m, p, at)?;
                let digits = t.digits(idx);
                for pos in 0..t.rank {
                    let mut moved = digits.clone();
                    for s in 0..t.n {
                        moved[pos] = s;
                        v -= table[s][digits[pos]][m] * values[t.index(&moved)];
                    }
                }
                *slot = v;
            }
        }
        Ok(out)
    };
    let horizontal = derive(0, &conn.l)?;
    let vertical = (1..=p.k)
        .map(|b| derive(b, &conn.c[b - 1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(CovariantDerivatives { horizontal, vertical })
}

/// Fractional Sasaki lift `Bᵀ diag(g, …, g) B` in the natural coframe, `B`
/// the dual coframe matrix.
pub fn sasaki_lift(g: &MetricField, d: &DualCoefficients, at: &JetPoint) -> Result<DMatrix<f64>> {
    let gm = g.eval(at)?;
    invert_metric(&gm)?;
    let b = dual_basis(d, at)?;
    let n = g.n;
    let blocks = block_matrix(n, d.k, |r, c| (r == c).then(|| gm.clone()));
    Ok(b.transpose() * blocks * b)
}

/// Jet coordinates in the new chart.
///
/// Order 1 is `ȳ_1 = J(x̄, x) y_1`. Higher orders follow the recursion
/// `ȳ_a = Γ(α)/Γ(α(a-1)) Σ_{b≤a} λ_b y_b^j D^α_{y_{b-1}^j} ȳ_{a-1}` with the
/// consistent ladder `λ_b`, which needs every forward component to be a single
/// monomial so `ȳ_1` is available symbolically.
pub fn jet_transform(p: &JetPoint, m: &ChartMap) -> Result<JetPoint> {
    let n = p.n();
    if m.n() != n {
        return Err(Error::Dimension(format!("chart map has n = {}, point has n = {n}", m.n())));
    }
    let alpha = m.alpha;
    let xbar = m.forward_point(&p.x)?;
    let jac = frac_jacobian(m, &p.x, Direction::Forward)?;
    let y1 = nalgebra::DVector::from_column_slice(&p.y[0]);
    let mut rows = vec![(jac * y1).as_slice().to_vec()];
    if p.k() > 1 {
        let mut prev = symbolic_first_jet(m)?;
        let env = p.binding();
        for a in 2..=p.k() {
            let pre = gamma(alpha)? * rgamma(alpha * (a - 1) as f64);
            let mut next = Vec::with_capacity(n);
            for field in &prev {
                let mut parts = Vec::new();
                for b in 1..=a {
                    let w = ladder_weight(alpha, b);
                    for j in 0..n {
                        let d = field.frac_partial(&slot_var(b - 1, j), alpha)?;
                        if !d.is_zero() {
                            parts.push(d.mul(&MonomialSum::var(&slot_var(b, j))).scale(w * pre));
                        }
                    }
                }
                next.push(MonomialSum::sum(parts.iter()));
            }
            rows.push(next.iter().map(|f| Ok(f.eval(&env)?)).collect::<Result<Vec<f64>>>()?);
            prev = next;
        }
    }
    JetPoint::new(xbar, rows)
}

/// `ȳ_1^i = (x̄^i)^{α-1} ∂x̄^i/∂x^j (x^j)^{1-α} y_1^j` as fields.
fn symbolic_first_jet(m: &ChartMap) -> Result<Vec<MonomialSum>> {
    let n = m.n();
    let alpha = m.alpha;
    let mut out = Vec::with_capacity(n);
    for (i, f) in m.forward.iter().enumerate() {
        let mono = f
            .monomials
            .as_ref()
            .filter(|s| s.terms().len() == 1)
            .ok_or_else(|| {
                Error::Unsupported(format!(
                    "higher-order jet transform needs single-monomial chart components; x̄{} is not",
                    i + 1
                ))
            })?;
        let weight = mono.pow(alpha - 1.0)?;
        let mut parts = Vec::new();
        for j in 0..n {
            let xj = x_var(j + 1);
            let term = weight
                .mul(&mono.partial(&xj))
                .mul(&MonomialSum::monomial(1.0, &[(xj.as_str(), 1.0 - alpha)]))
                .mul(&MonomialSum::var(&slot_var(1, j)));
            parts.push(term);
        }
        out.push(MonomialSum::sum(parts.iter()));
    }
    Ok(out)
}

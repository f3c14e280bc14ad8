//! Expression language for chart and jet functions.
//!
//! ```text
//! expr     = term { ("+" | "-") term } ;
//! term     = unary { ("*" | "/") unary } ;
//! unary    = "-" unary | power ;
//! power    = primary [ "^" exponent ] ;
//! exponent = [ "-" ] number | "(" [ "-" ] number ")" ;
//! primary  = number | variable | call | "(" expr ")" ;
//! call     = "gamma" "(" expr ")" | "ml" "(" expr "," expr ")" ;
//! variable = "x" index | "y" index "_" index | "t" ;
//! ```
//!
//! `yi_a` denotes the jet coordinate `y^{i(αa)}`. Expressions that are sums
//! of monomials `c · Π v^e` (after distributing products) form the *monomial
//! fragment*; on it fractional partials are exact, see [`MonomialSum`].

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::error::{Error, Result};
use crate::specfun::{gamma, gamma_ratio, mittag_leffler, MlParams};

/// Values for the free variables of an expression.
pub type VarBinding = HashMap<String, f64>;

/// Name of the chart coordinate `x^i` (1-based).
pub fn x_var(i: usize) -> String {
    format!("x{i}")
}

/// Name of the jet coordinate `y^{i(αa)}` (both 1-based).
pub fn y_var(i: usize, a: usize) -> String {
    format!("y{i}_{a}")
}

/// Structured reading of a variable name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarName {
    X(usize),
    Y(usize, usize),
    T,
}

impl VarName {
    pub fn parse(name: &str) -> Option<Self> {
        fn index(s: &str) -> Option<usize> {
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || s.starts_with('0') {
                return None;
            }
            s.parse().ok()
        }
        if name == "t" {
            return Some(Self::T);
        }
        if let Some(rest) = name.strip_prefix('x') {
            return index(rest).map(Self::X);
        }
        let rest = name.strip_prefix('y')?;
        let (i, a) = rest.split_once('_')?;
        Some(Self::Y(index(i)?, index(a)?))
    }
}

/// Which variables a parsed expression may mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scope {
    /// Chart dimension; `None` accepts any index.
    pub n: Option<usize>,
    /// Jet order; `None` accepts any order, `Some(0)` forbids jet variables.
    pub k: Option<usize>,
    pub allow_t: bool,
}

impl Scope {
    pub fn any() -> Self {
        Self {
            n: None,
            k: None,
            allow_t: true,
        }
    }

    pub fn jet(n: usize, k: usize) -> Self {
        Self {
            n: Some(n),
            k: Some(k),
            allow_t: false,
        }
    }

    pub fn chart(n: usize) -> Self {
        Self::jet(n, 0)
    }

    pub fn time() -> Self {
        Self {
            n: Some(0),
            k: Some(0),
            allow_t: true,
        }
    }

    fn admits(&self, name: &str) -> bool {
        let within = |v: usize, bound: Option<usize>| bound.map_or(true, |b| v <= b);
        match VarName::parse(name) {
            Some(VarName::T) => self.allow_t,
            Some(VarName::X(i)) => within(i, self.n),
            Some(VarName::Y(i, a)) => within(i, self.n) && within(a, self.k),
            None => false,
        }
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// Power with a literal exponent.
    Pow(Box<Expr>, f64),
    Gamma(Box<Expr>),
    /// `ml(α, z)`: Mittag-Leffler `E_α(z)`.
    Ml(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}, column {column}: {message}{}", expected_suffix(.expected))]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
    pub expected: Vec<String>,
}

fn expected_suffix(expected: &[String]) -> String {
    if expected.is_empty() {
        String::new()
    } else {
        format!(" (expected {})", expected.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("gamma pole at {0}")]
    GammaPole(f64),
    #[error("{0}")]
    Domain(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let start = (line, col);
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let begin = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[begin..i].iter().collect();
            let value = text.parse::<f64>().map_err(|_| ParseError {
                line: start.0,
                column: start.1,
                message: format!("malformed number `{text}`"),
                expected: vec![],
            })?;
            col += i - begin;
            out.push(Spanned {
                tok: Tok::Num(value),
                line: start.0,
                column: start.1,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let begin = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - begin;
            out.push(Spanned {
                tok: Tok::Ident(chars[begin..i].iter().collect()),
                line: start.0,
                column: start.1,
            });
        } else if "+-*/^(),".contains(c) {
            i += 1;
            col += 1;
            out.push(Spanned {
                tok: Tok::Sym(c),
                line: start.0,
                column: start.1,
            });
        } else {
            return Err(ParseError {
                line,
                column: col,
                message: format!("unexpected character `{c}`"),
                expected: vec![],
            });
        }
    }
    out.push(Spanned {
        tok: Tok::End,
        line,
        column: col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    scope: Scope,
}

const AFTER_OPERAND: [&str; 7] = ["`+`", "`-`", "`*`", "`/`", "`^`", "`)`", "end of input"];
const OPERAND: [&str; 4] = ["number", "variable", "`(`", "`-`"];

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error_at(&self, at: &Spanned, message: String, expected: &[&str]) -> ParseError {
        ParseError {
            line: at.line,
            column: at.column,
            message,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn unexpected(&self, expected: &[&str]) -> ParseError {
        let at = self.peek().clone();
        self.error_at(&at, format!("unexpected {}", at.tok.describe()), expected)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek().tok == Tok::Sym(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            let exp = format!("`{c}`");
            Err(self.unexpected(&[exp.as_str()]))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.eat('^') {
            let e = self.exponent()?;
            Ok(Expr::Pow(Box::new(base), e))
        } else {
            Ok(base)
        }
    }

    fn exponent(&mut self) -> Result<f64, ParseError> {
        let paren = self.eat('(');
        let neg = self.eat('-');
        let value = match self.peek().tok {
            Tok::Num(v) => {
                self.bump();
                v
            }
            _ => {
                let at = self.peek().clone();
                return Err(self.error_at(
                    &at,
                    format!(
                        "power exponents must be numeric literals, found {}",
                        at.tok.describe()
                    ),
                    &["number"],
                ));
            }
        };
        if paren {
            self.expect(')')?;
        }
        Ok(if neg { -value } else { value })
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let at = self.peek().clone();
        match at.tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::Sym('(') => {
                self.bump();
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(ref name) => {
                self.bump();
                match name.as_str() {
                    "gamma" | "ml" => self.call(&at, name),
                    _ if self.scope.admits(name) => Ok(Expr::Var(name.clone())),
                    _ => Err(self.error_at(&at, format!("unknown identifier `{name}`"), &[])),
                }
            }
            _ => Err(self.unexpected(&OPERAND)),
        }
    }

    fn call(&mut self, at: &Spanned, name: &str) -> Result<Expr, ParseError> {
        self.expect('(')?;
        let mut args = vec![self.expr()?];
        while self.eat(',') {
            args.push(self.expr()?);
        }
        self.expect(')')?;
        let arity = if name == "gamma" { 1 } else { 2 };
        if args.len() != arity {
            return Err(self.error_at(
                at,
                format!("`{name}` takes {arity} argument(s), got {}", args.len()),
                &[],
            ));
        }
        let mut args = args.into_iter().map(Box::new);
        let first = args.next().expect("arity checked");
        Ok(match args.next() {
            None => Expr::Gamma(first),
            Some(second) => Expr::Ml(first, second),
        })
    }
}

/// Parses with every well-formed variable name accepted.
pub fn parse(source: &str) -> Result<Expr, ParseError> {
    parse_in(source, Scope::any())
}

/// Parses, rejecting variables outside `scope`.
pub fn parse_in(source: &str, scope: Scope) -> Result<Expr, ParseError> {
    let mut p = Parser {
        toks: lex(source)?,
        pos: 0,
        scope,
    };
    let e = p.expr()?;
    if p.peek().tok != Tok::End {
        return Err(p.unexpected(&AFTER_OPERAND));
    }
    Ok(e)
}

impl Expr {
    pub fn num(v: f64) -> Self {
        Self::Num(v)
    }

    pub fn var(name: impl Into<String>) -> Self {
        Self::Var(name.into())
    }

    /// Free variables, sorted.
    pub fn vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Gamma(a) => a.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Ml(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn eval(&self, env: &VarBinding) -> Result<f64, EvalError> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var(name) => *env.get(name).ok_or_else(|| EvalError::Unbound(name.clone()))?,
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Add(a, b) => a.eval(env)? + b.eval(env)?,
            Expr::Sub(a, b) => a.eval(env)? - b.eval(env)?,
            Expr::Mul(a, b) => a.eval(env)? * b.eval(env)?,
            Expr::Div(a, b) => {
                let d = b.eval(env)?;
                if d == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                a.eval(env)? / d
            }
            Expr::Pow(a, p) => checked_pow(a.eval(env)?, *p)?,
            Expr::Gamma(a) => {
                let x = a.eval(env)?;
                gamma(x).map_err(|e| match e {
                    Error::GammaPole(p) => EvalError::GammaPole(p),
                    other => EvalError::Domain(other.to_string()),
                })?
            }
            Expr::Ml(a, z) => {
                let (alpha, z) = (a.eval(env)?, z.eval(env)?);
                mittag_leffler(alpha, z, &MlParams::default())
                    .map_err(|e| EvalError::Domain(e.to_string()))?
            }
        };
        if v.is_nan() {
            return Err(EvalError::Domain(format!("`{self}` is undefined at this point")));
        }
        Ok(v)
    }

    /// Normal form on the monomial fragment.
    pub fn to_monomials(&self) -> Result<MonomialSum> {
        MonomialSum::from_expr(self)
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }
}

fn checked_pow(base: f64, p: f64) -> Result<f64, EvalError> {
    if base == 0.0 && p < 0.0 {
        return Err(EvalError::DivisionByZero);
    }
    let v = base.powf(p);
    if v.is_nan() {
        return Err(EvalError::Domain(format!("{base}^{p} is not real")));
    }
    Ok(v)
}

fn write_num(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    if v < 0.0 || (v == 0.0 && v.is_sign_negative()) {
        write!(f, "(-{})", -v)
    } else {
        write!(f, "{v}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let child = |f: &mut fmt::Formatter<'_>, e: &Expr, min: u8| -> fmt::Result {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        };
        match self {
            Expr::Num(v) => write_num(f, *v),
            Expr::Var(name) => f.write_str(name),
            Expr::Neg(a) => {
                f.write_str("-")?;
                child(f, a, 3)
            }
            Expr::Add(a, b) => {
                child(f, a, 1)?;
                f.write_str(" + ")?;
                child(f, b, 2)
            }
            Expr::Sub(a, b) => {
                child(f, a, 1)?;
                f.write_str(" - ")?;
                child(f, b, 2)
            }
            Expr::Mul(a, b) => {
                child(f, a, 2)?;
                f.write_str("*")?;
                child(f, b, 3)
            }
            Expr::Div(a, b) => {
                child(f, a, 2)?;
                f.write_str("/")?;
                child(f, b, 3)
            }
            Expr::Pow(a, p) => {
                child(f, a, 5)?;
                f.write_str("^")?;
                write_num(f, *p)
            }
            Expr::Gamma(a) => write!(f, "gamma({a})"),
            Expr::Ml(a, z) => write!(f, "ml({a}, {z})"),
        }
    }
}

/// Exponent tolerance when matching monomials.
const POWER_TOL: f64 = 1e-9;

/// `coeff · Π var^exp` with variables sorted by name and nonzero exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    pub powers: Vec<(String, f64)>,
}

impl Monomial {
    pub fn exponent_of(&self, var: &str) -> f64 {
        self.powers
            .iter()
            .find(|(v, _)| v == var)
            .map_or(0.0, |(_, e)| *e)
    }

    fn same_key(&self, other: &Monomial) -> bool {
        self.powers.len() == other.powers.len()
            && self
                .powers
                .iter()
                .zip(&other.powers)
                .all(|((v1, e1), (v2, e2))| v1 == v2 && (e1 - e2).abs() <= POWER_TOL)
    }

    fn key_cmp(&self, other: &Monomial) -> std::cmp::Ordering {
        for ((v1, e1), (v2, e2)) in self.powers.iter().zip(&other.powers) {
            let o = v1.cmp(v2).then(e1.total_cmp(e2));
            if o.is_ne() {
                return o;
            }
        }
        self.powers.len().cmp(&other.powers.len())
    }

    fn times(&self, other: &Monomial) -> Monomial {
        let mut powers = self.powers.clone();
        for (v, e) in &other.powers {
            match powers.iter_mut().find(|(w, _)| w == v) {
                Some((_, f)) => *f += e,
                None => powers.push((v.clone(), *e)),
            }
        }
        Monomial::from_parts(self.coeff * other.coeff, powers)
    }

    fn from_parts(coeff: f64, mut powers: Vec<(String, f64)>) -> Monomial {
        powers.retain(|(_, e)| e.abs() > POWER_TOL);
        powers.sort_by(|a, b| a.0.cmp(&b.0));
        Monomial { coeff, powers }
    }

    fn eval(&self, env: &VarBinding) -> Result<f64, EvalError> {
        let mut v = self.coeff;
        for (name, e) in &self.powers {
            let x = *env.get(name).ok_or_else(|| EvalError::Unbound(name.clone()))?;
            v *= checked_pow(x, *e)?;
        }
        Ok(v)
    }
}

/// Sum of monomials, the exact carrier for fractional partials.
///
/// Coefficients of equal monomials are combined with exact cancellation of
/// opposite contributions and a compensated sum; results within a few ulps of
/// the contributions' magnitude snap to zero, so symmetric identities such as
/// `D_i D_j f - D_j D_i f = 0` come out exact.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonomialSum {
    terms: Vec<Monomial>,
}

fn combine(mut values: Vec<f64>) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    values.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    let mut kept: Vec<f64> = Vec::with_capacity(values.len());
    for v in values {
        if let Some(pos) = kept.iter().rposition(|k| *k == -v && v != 0.0) {
            kept.remove(pos);
        } else {
            kept.push(v);
        }
    }
    let (mut sum, mut comp, mut mag) = (0.0f64, 0.0f64, 0.0f64);
    for v in kept {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
        mag += v.abs();
    }
    let total = sum + comp;
    if total.abs() <= 8.0 * f64::EPSILON * mag {
        0.0
    } else {
        total
    }
}

impl MonomialSum {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::collect(vec![Monomial {
            coeff: c,
            powers: vec![],
        }])
    }

    pub fn var(name: &str) -> Self {
        Self::monomial(1.0, &[(name, 1.0)])
    }

    pub fn monomial(coeff: f64, powers: &[(&str, f64)]) -> Self {
        let mut m = Monomial {
            coeff,
            powers: vec![],
        };
        for (v, e) in powers {
            m = m.times(&Monomial::from_parts(1.0, vec![(v.to_string(), *e)]));
        }
        Self::collect(vec![m])
    }

    fn collect(mut contribs: Vec<Monomial>) -> Self {
        contribs.retain(|m| m.coeff != 0.0);
        contribs.sort_by(|a, b| a.key_cmp(b));
        let mut terms: Vec<Monomial> = Vec::new();
        let mut pending: Vec<f64> = Vec::new();
        for m in contribs {
            match terms.last() {
                Some(last) if last.same_key(&m) => pending.push(m.coeff),
                _ => {
                    if let Some(last) = terms.last_mut() {
                        last.coeff = combine(std::mem::take(&mut pending));
                    }
                    pending.push(m.coeff);
                    terms.push(m);
                }
            }
        }
        if let Some(last) = terms.last_mut() {
            last.coeff = combine(pending);
        }
        terms.retain(|m| m.coeff != 0.0);
        Self { terms }
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// The value if no variable occurs.
    pub fn constant_value(&self) -> Option<f64> {
        match self.terms.as_slice() {
            [] => Some(0.0),
            [m] if m.powers.is_empty() => Some(m.coeff),
            _ => None,
        }
    }

    pub fn vars(&self) -> BTreeSet<String> {
        self.terms
            .iter()
            .flat_map(|m| m.powers.iter().map(|(v, _)| v.clone()))
            .collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut all = self.terms.clone();
        all.extend(other.terms.iter().cloned());
        Self::collect(all)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::collect(
            self.terms
                .iter()
                .map(|m| Monomial {
                    coeff: m.coeff * s,
                    powers: m.powers.clone(),
                })
                .collect(),
        )
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut all = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                all.push(a.times(b));
            }
        }
        Self::collect(all)
    }

    /// Sum of many fields, combined in a single pass.
    pub fn sum<'a>(items: impl IntoIterator<Item = &'a MonomialSum>) -> Self {
        Self::collect(items.into_iter().flat_map(|s| s.terms.iter().cloned()).collect())
    }

    /// `self^p`. Non-negative integer powers of any sum; other powers only of
    /// a single monomial (with positive coefficient unless `p` is an integer).
    pub fn pow(&self, p: f64) -> Result<Self> {
        if p == 0.0 {
            return Ok(Self::constant(1.0));
        }
        if p > 0.0 && p == p.trunc() && p <= 64.0 {
            let mut acc = Self::constant(1.0);
            for _ in 0..p as u32 {
                acc = acc.mul(self);
            }
            return Ok(acc);
        }
        match self.terms.as_slice() {
            [m] => {
                if m.coeff < 0.0 && p != p.trunc() {
                    return Err(Error::Unsupported(format!(
                        "non-integer power {p} of a negative coefficient"
                    )));
                }
                let powers = m.powers.iter().map(|(v, e)| (v.clone(), e * p)).collect();
                Ok(Self::collect(vec![Monomial::from_parts(m.coeff.powf(p), powers)]))
            }
            [] => Err(Error::Eval(EvalError::DivisionByZero)),
            _ => Err(Error::Unsupported(format!(
                "power {p} of a sum of {} monomials is outside the monomial fragment; use fracnum's numeric fallback",
                self.terms.len()
            ))),
        }
    }

    pub fn from_expr(e: &Expr) -> Result<Self> {
        Ok(match e {
            Expr::Num(v) => Self::constant(*v),
            Expr::Var(name) => Self::var(name),
            Expr::Neg(a) => Self::from_expr(a)?.scale(-1.0),
            Expr::Add(a, b) => Self::from_expr(a)?.add(&Self::from_expr(b)?),
            Expr::Sub(a, b) => Self::from_expr(a)?.sub(&Self::from_expr(b)?),
            Expr::Mul(a, b) => Self::from_expr(a)?.mul(&Self::from_expr(b)?),
            Expr::Div(a, b) => {
                let d = Self::from_expr(b)?;
                if d.terms.len() > 1 {
                    return Err(Error::Unsupported(format!(
                        "division by the sum `{b}` is outside the monomial fragment; use fracnum's numeric fallback"
                    )));
                }
                Self::from_expr(a)?.mul(&d.pow(-1.0)?)
            }
            Expr::Pow(a, p) => Self::from_expr(a)?.pow(*p)?,
            Expr::Gamma(a) => {
                let inner = Self::from_expr(a)?;
                match inner.constant_value() {
                    Some(x) => Self::constant(gamma(x)?),
                    None => {
                        return Err(Error::Unsupported(format!(
                            "gamma of the non-constant `{a}`; use fracnum's numeric fallback"
                        )))
                    }
                }
            }
            Expr::Ml(a, z) => {
                let (alpha, zz) = (Self::from_expr(a)?, Self::from_expr(z)?);
                match (alpha.constant_value(), zz.constant_value()) {
                    (Some(alpha), Some(zz)) => {
                        Self::constant(mittag_leffler(alpha, zz, &MlParams::default())?)
                    }
                    _ => {
                        return Err(Error::Unsupported(format!(
                            "ml of a non-constant argument in `{e}`; use fracnum's numeric fallback"
                        )))
                    }
                }
            }
        })
    }

    pub fn to_expr(&self) -> Expr {
        let mut acc: Option<Expr> = None;
        for m in &self.terms {
            let mut factors: Option<Expr> = None;
            for (v, e) in &m.powers {
                let f = if *e == 1.0 {
                    Expr::Var(v.clone())
                } else {
                    Expr::Pow(Box::new(Expr::Var(v.clone())), *e)
                };
                factors = Some(match factors {
                    None => f,
                    Some(prev) => Expr::Mul(Box::new(prev), Box::new(f)),
                });
            }
            let mag = m.coeff.abs();
            let body = match factors {
                None => Expr::Num(mag),
                Some(f) if mag == 1.0 => f,
                Some(f) => Expr::Mul(Box::new(Expr::Num(mag)), Box::new(f)),
            };
            acc = Some(match acc {
                None if m.coeff < 0.0 => Expr::Neg(Box::new(body)),
                None => body,
                Some(prev) if m.coeff < 0.0 => Expr::Sub(Box::new(prev), Box::new(body)),
                Some(prev) => Expr::Add(Box::new(prev), Box::new(body)),
            });
        }
        acc.unwrap_or(Expr::Num(0.0))
    }

    pub fn eval(&self, env: &VarBinding) -> Result<f64, EvalError> {
        let mut sum = 0.0;
        for m in &self.terms {
            sum += m.eval(env)?;
        }
        Ok(sum)
    }

    /// Reviewed fractional partial `D^α_var`: per term
    /// `c v^γ ↦ c Γ(1+γ)/Γ(1+γ-α) v^{γ-α}`, var-free terms vanish.
    pub fn frac_partial(&self, var: &str, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::domain(format!("derivative order must lie in (0, 1], got {alpha}")));
        }
        let mut out = Vec::with_capacity(self.terms.len());
        for m in &self.terms {
            let g = m.exponent_of(var);
            if g == 0.0 {
                continue;
            }
            if g < 0.0 && alpha == 1.0 {
                // D^1 is the classical derivative away from 0
                let powers = m
                    .powers
                    .iter()
                    .map(|(v, e)| (v.clone(), if v == var { e - 1.0 } else { *e }))
                    .collect();
                out.push(Monomial::from_parts(m.coeff * g, powers));
                continue;
            }
            if g <= -1.0 {
                return Err(Error::Unsupported(format!(
                    "power {g} of `{var}` is not integrable at base point 0; use fracnum's numeric fallback"
                )));
            }
            // for -1 < g < 0 the plain Riemann-Liouville rule applies
            let ratio = gamma_ratio(1.0 + g, 1.0 + g - alpha)?;
            if ratio == 0.0 {
                continue;
            }
            let powers = m
                .powers
                .iter()
                .map(|(v, e)| (v.clone(), if v == var { e - alpha } else { *e }))
                .collect();
            out.push(Monomial::from_parts(m.coeff * ratio, powers));
        }
        Ok(Self::collect(out))
    }

    /// Classical partial derivative.
    pub fn partial(&self, var: &str) -> Self {
        let mut out = Vec::with_capacity(self.terms.len());
        for m in &self.terms {
            let g = m.exponent_of(var);
            if g == 0.0 {
                continue;
            }
            let powers = m
                .powers
                .iter()
                .map(|(v, e)| (v.clone(), if v == var { e - 1.0 } else { *e }))
                .collect();
            out.push(Monomial::from_parts(m.coeff * g, powers));
        }
        Self::collect(out)
    }

    /// Fractional or classical partial, chosen by `kind`.
    pub fn partial_of(&self, var: &str, kind: PartialKind) -> Result<Self> {
        match kind {
            PartialKind::Fractional(alpha) => self.frac_partial(var, alpha),
            PartialKind::Classical => Ok(self.partial(var)),
        }
    }

    /// Largest coefficient of `self - other`.
    pub fn max_coeff_diff(&self, other: &Self) -> f64 {
        self.sub(other)
            .terms
            .iter()
            .fold(0.0, |m, t| m.max(t.coeff.abs()))
    }
}

impl fmt::Display for MonomialSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_expr())
    }
}

/// Partial derivative flavor used by the geometric operators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartialKind {
    Fractional(f64),
    Classical,
}

/// `D^α_var e` as an expression; fails outside the monomial fragment.
pub fn frac_partial(e: &Expr, var: &str, alpha: f64) -> Result<Expr> {
    Ok(MonomialSum::from_expr(e)?.frac_partial(var, alpha)?.to_expr())
}

/// Classical `∂e/∂var` as an expression; fails outside the monomial fragment.
pub fn classical_partial(e: &Expr, var: &str) -> Result<Expr> {
    Ok(MonomialSum::from_expr(e)?.partial(var).to_expr())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn env(pairs: &[(&str, f64)]) -> VarBinding {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parse_structure() {
        let e = parse("x1^2 + 3*y1_1").unwrap();
        assert!(matches!(e, Expr::Add(..)));
        assert_eq!(e.vars().into_iter().collect::<Vec<_>>(), ["x1", "y1_1"]);
        assert_eq!(parse("-x1^2").unwrap(), Expr::Neg(Box::new(Expr::Pow(Box::new(Expr::var("x1")), 2.0))));
        assert_eq!(parse("x1^-0.5").unwrap(), parse("x1^(-0.5)").unwrap());
        assert_eq!(parse("1 - 2 - 3").unwrap().eval(&env(&[])).unwrap(), -4.0);
        assert_eq!(parse("8 / 4 / 2").unwrap().eval(&env(&[])).unwrap(), 1.0);
    }

    #[test]
    fn parse_gamma_call() {
        let e = parse("gamma(1.5)*x1^0.5").unwrap();
        let v = e.eval(&env(&[("x1", 1.0)])).unwrap();
        assert!((v - 0.886226925).abs() < 1e-9);
        let m = parse("ml(0.5, 1)").unwrap().eval(&env(&[])).unwrap();
        assert!((m - 5.008980080762283).abs() < 1e-13);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse("x1 + ").unwrap_err();
        assert_eq!((err.line, err.column), (1, 6));
        assert!(err.expected.iter().any(|s| s == "number"));
        let err = parse("x1 +\n  foo").unwrap_err();
        assert_eq!((err.line, err.column), (2, 3));
        assert!(err.message.contains("unknown identifier"));
        let err = parse("gamma(1, 2)").unwrap_err();
        assert!(err.message.contains("takes 1"));
        assert!(parse("ml(0.5)").is_err());
        assert!(parse("x1^x2").is_err());
        assert!(parse("2 x1").is_err());
        assert!(parse("x1 # 2").is_err());
        assert!(parse("x0").is_err());
    }

    #[test]
    fn scope_limits_variables() {
        assert!(parse_in("x2 + y2_1", Scope::jet(2, 1)).is_ok());
        assert!(parse_in("x3", Scope::jet(2, 1)).is_err());
        assert!(parse_in("y1_2", Scope::jet(2, 1)).is_err());
        assert!(parse_in("t", Scope::jet(2, 1)).is_err());
        assert!(parse_in("t^2", Scope::time()).is_ok());
    }

    #[test]
    fn eval_examples_and_errors() {
        let e = parse("x1*x2").unwrap();
        assert_eq!(e.eval(&env(&[("x1", 3.0), ("x2", 4.0)])).unwrap(), 12.0);
        assert_eq!(parse("x1^0.5").unwrap().eval(&env(&[("x1", 9.0)])).unwrap(), 3.0);
        assert_eq!(
            parse("1/x1").unwrap().eval(&env(&[("x1", 0.0)])),
            Err(EvalError::DivisionByZero)
        );
        assert_eq!(parse("x1").unwrap().eval(&env(&[])), Err(EvalError::Unbound("x1".into())));
        assert_eq!(parse("gamma(0)").unwrap().eval(&env(&[])), Err(EvalError::GammaPole(0.0)));
        assert!(matches!(
            parse("x1^0.5").unwrap().eval(&env(&[("x1", -1.0)])),
            Err(EvalError::Domain(_))
        ));
    }

    #[test]
    fn printer_is_canonical() {
        for src in ["x1 - (x2 - x3)", "-(x1 + 2)^2", "(x1*x2)/(x3*4)", "x1^(-0.5)", "gamma(1.5)*ml(0.5, x1)", "--x1"] {
            let e = parse(src).unwrap();
            assert_eq!(parse(&e.to_string()).unwrap(), e, "{src}");
        }
        assert_eq!(Expr::Num(-2.0).to_string(), "(-2)");
    }

    #[test]
    fn frac_partial_examples() {
        let d = frac_partial(&parse("x1^0.5 / gamma(1.5)").unwrap(), "x1", 0.5).unwrap();
        let v = d.eval(&env(&[("x1", 2.7)])).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        assert_eq!(frac_partial(&parse("x2^3").unwrap(), "x1", 0.5).unwrap(), Expr::Num(0.0));
        let f = parse("x1^1 * x2^1").unwrap().to_monomials().unwrap();
        let a = f.frac_partial("x1", 0.4).unwrap().frac_partial("x2", 0.4).unwrap();
        let b = f.frac_partial("x2", 0.4).unwrap().frac_partial("x1", 0.4).unwrap();
        assert_eq!(a.max_coeff_diff(&b), 0.0);
    }

    #[test]
    fn normalization_distributes_and_rejects() {
        let m = parse("(x1 + 1)*(x1 - 1)").unwrap().to_monomials().unwrap();
        assert_eq!(m, MonomialSum::monomial(1.0, &[("x1", 2.0)]).sub(&MonomialSum::constant(1.0)));
        let m = parse("(2*x1^3)^0.5 / x2").unwrap().to_monomials().unwrap();
        assert_eq!(m.terms().len(), 1);
        assert!((m.terms()[0].exponent_of("x1") - 1.5).abs() < 1e-15);
        assert_eq!(m.terms()[0].exponent_of("x2"), -1.0);
        for bad in ["1/(x1 + x2)", "(x1 + x2)^0.5", "ml(0.5, x1)", "gamma(x1)"] {
            let err = parse(bad).unwrap().to_monomials().unwrap_err();
            assert!(matches!(err, Error::Unsupported(_)), "{bad}");
        }
        assert_eq!(parse("ml(1, 0)*x1").unwrap().to_monomials().unwrap(), MonomialSum::var("x1"));
    }

    #[test]
    fn frac_partial_rejects_negative_powers() {
        let m = parse("1/x1").unwrap().to_monomials().unwrap();
        assert!(matches!(m.frac_partial("x1", 0.5), Err(Error::Unsupported(_))));
        assert!(m.frac_partial("x2", 0.5).unwrap().is_zero());
    }

    #[test]
    fn exponent_below_alpha_gives_negative_power() {
        // D^0.5 x^0.25 = Γ(1.25)/Γ(0.75) x^-0.25
        let d = MonomialSum::monomial(1.0, &[("x1", 0.25)]).frac_partial("x1", 0.5).unwrap();
        let expect = gamma(1.25).unwrap() / gamma(0.75).unwrap();
        assert!((d.terms()[0].coeff - expect).abs() < 1e-15);
        assert!((d.terms()[0].exponent_of("x1") + 0.25).abs() < 1e-15);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|v| Expr::Num(v as f64 / 8.0)),
            prop::sample::select(vec!["x1", "x2", "y1_1", "y2_3", "t"]).prop_map(Expr::var),
        ];
        leaf.prop_recursive(4, 32, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
                (inner.clone(), -8i32..8).prop_map(|(a, p)| Expr::Pow(Box::new(a), p as f64 / 4.0)),
                inner.clone().prop_map(|a| Expr::Gamma(Box::new(a))),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Ml(Box::new(a), Box::new(b))),
            ]
        })
    }

    fn arb_monomial() -> impl Strategy<Value = MonomialSum> {
        (
            -5.0f64..5.0,
            prop::collection::vec(0u32..12, 3),
        )
            .prop_map(|(c, exps)| {
                let names = ["x1", "x2", "x3"];
                let powers: Vec<(&str, f64)> =
                    names.iter().zip(&exps).map(|(n, e)| (*n, *e as f64 / 4.0)).collect();
                MonomialSum::monomial(c, &powers)
            })
    }

    proptest! {
        #[test]
        fn parse_print_parse_is_idempotent(e in arb_expr()) {
            let once = parse(&e.to_string()).unwrap();
            prop_assert_eq!(&once, &e);
            let twice = parse(&once.to_string()).unwrap();
            prop_assert_eq!(twice, once);
        }

        #[test]
        fn frac_partials_commute(
            ms in prop::collection::vec(arb_monomial(), 1..4),
            alpha in 0.05f64..1.0,
            i in 0usize..3,
            shift in 1usize..3,
        ) {
            let j = (i + shift) % 3;
            let f = MonomialSum::sum(ms.iter());
            let names = ["x1", "x2", "x3"];
            let a = f.frac_partial(names[i], alpha).unwrap().frac_partial(names[j], alpha).unwrap();
            let b = f.frac_partial(names[j], alpha).unwrap().frac_partial(names[i], alpha).unwrap();
            prop_assert!(a.max_coeff_diff(&b) <= 1e-12);
        }

        #[test]
        fn alpha_one_is_classical(exps in prop::collection::vec(0u32..6, 2), c in -4i32..5) {
            let f = MonomialSum::monomial(c as f64, &[("x1", exps[0] as f64), ("x2", exps[1] as f64)]);
            let frac = f.frac_partial("x1", 1.0).unwrap();
            prop_assert!(frac.max_coeff_diff(&f.partial("x1")) <= 1e-12);
        }
    }
}

//! The four computations behind the subcommands. Each returns the full
//! output text; nothing here touches stdout or the filesystem.

use std::fmt::{self, Write as _};

use fracosc::expr::{parse_in, Expr, MonomialSum, Scope};
use fracosc::fracnum::{
    gl_derivative, l1_derivative_side, solve_fode, uniform_nodes, FodeProblem, SampledFunction, Side,
};
use fracosc::fracseries::FracSeries;
use fracosc::lagrange::{
    el_operator_classical, el_operator_frac, fundamental_tensor, prolong_finsler, prolong_lagrange,
    prolong_riemann, sample_along, ExtremalCurve, FinslerStructure, FracLagrangian, LagrangeReading,
    RiemannStructure, TotalDerivative,
};
use fracosc::oscbundle::{
    basis_pairing_residual, covariant_derivative_d_tensor, dual_to_primal, liouville_field, metrical_connection,
    spray_field, spray_to_dual, tangent_structure, tangent_structure_matrix, DTensor, DualCoefficients, FracSpray,
    JetPoint, LiouvilleConvention, MetricField,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{sha256_hex, Config, ConfigError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(ConfigError),
    Lib(fracosc::Error),
    Assertion(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Lib(fracosc::Error::Parse(_)) => 1,
            CliError::Lib(_) | CliError::Io(_) => 2,
            CliError::Assertion(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Lib(fracosc::Error::Parse(p)) => write!(f, "parse error at {p}"),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Assertion(m) => write!(f, "assertion failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<fracosc::Error> for CliError {
    fn from(e: fracosc::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<fracosc::expr::ParseError> for CliError {
    fn from(e: fracosc::expr::ParseError) -> Self {
        CliError::Lib(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Run metadata echoed at the top of every output.
#[derive(Debug, Clone)]
pub struct Header {
    pub command: &'static str,
    pub alpha: f64,
    pub k: Option<usize>,
    pub n: usize,
    pub hash: String,
}

impl Header {
    pub fn csv(&self) -> String {
        let k = self.k.map_or_else(|| "n/a".to_string(), |k| k.to_string());
        format!(
            "# fracosc {VERSION}\n# command = {}\n# alpha = {}\n# k = {k}\n# n = {}\n# config_sha256 = {}\n",
            self.command, self.alpha, self.n, self.hash
        )
    }

    pub fn json(&self) -> Value {
        json!({
            "tool": format!("fracosc {VERSION}"),
            "command": self.command,
            "alpha": self.alpha,
            "k": self.k,
            "n": self.n,
            "config_sha256": self.hash,
        })
    }
}

fn num(v: f64) -> String {
    format!("{v:.12e}")
}

fn check_alpha(alpha: f64) -> CliResult<f64> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(alpha)
    } else {
        Err(CliError::Lib(fracosc::Error::Domain(format!("alpha must lie in (0, 1], got {alpha}"))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Gl,
    L1,
    Exact,
}

#[derive(Debug, Clone)]
pub enum Source {
    Expr(String),
    Series(String),
}

#[derive(Debug, Clone)]
pub struct DerivSpec {
    pub alpha: f64,
    pub source: Source,
    pub grid: String,
    pub scheme: Scheme,
    pub side: Side,
}

impl DerivSpec {
    pub fn from_config(c: &Config) -> CliResult<Self> {
        c.check_keys(&["command", "bundle.alpha", "deriv.expr", "deriv.series", "deriv.grid", "deriv.scheme", "deriv.side"])?;
        let source = match (c.get("deriv.expr"), c.get("deriv.series")) {
            (Some(e), None) => Source::Expr(e.to_string()),
            (None, Some(s)) => Source::Series(s.to_string()),
            _ => return Err(CliError::Usage("give exactly one of `deriv.expr` and `deriv.series`".into())),
        };
        let scheme = match c.get("deriv.scheme").unwrap_or("gl") {
            "gl" => Scheme::Gl,
            "l1" => Scheme::L1,
            "exact" => Scheme::Exact,
            s => return Err(CliError::Usage(format!("unknown scheme `{s}`"))),
        };
        let side = match c.get("deriv.side").unwrap_or("left") {
            "left" => Side::Left,
            "right" => Side::Right,
            s => return Err(CliError::Usage(format!("unknown side `{s}`"))),
        };
        Ok(Self {
            alpha: c.required("bundle.alpha")?,
            source,
            grid: c.get("deriv.grid").unwrap_or("0:1:0.001").to_string(),
            scheme,
            side,
        })
    }

    /// Hash of the canonical flag set, for runs without a config file.
    pub fn hash(&self) -> String {
        let (kind, text) = match &self.source {
            Source::Expr(e) => ("expr", e.as_str()),
            Source::Series(s) => ("series", s.as_str()),
        };
        sha256_hex(&format!(
            "alpha={}\n{kind}={text}\ngrid={}\nscheme={:?}\nside={:?}\n",
            self.alpha, self.grid, self.scheme, self.side
        ))
    }
}

fn parse_grid(g: &str) -> CliResult<(f64, f64, f64)> {
    let parts: Vec<&str> = g.split(':').collect();
    let bad = || CliError::Usage(format!("grid must be `a:b:h` with a < b and h > 0, got `{g}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    if !(v[0] < v[1] && v[2] > 0.0 && v.iter().all(|x| x.is_finite())) {
        return Err(bad());
    }
    Ok((v[0], v[1], v[2]))
}

fn series_of(source: &Source) -> CliResult<FracSeries> {
    match source {
        Source::Series(s) => Ok(FracSeries::from_json(s)?),
        Source::Expr(e) => {
            let m = parse_in(e, Scope::time())?.to_monomials()?;
            let pairs: Vec<(f64, f64)> = m.terms().iter().map(|t| (t.coeff, t.exponent_of("t"))).collect();
            Ok(FracSeries::new(pairs)?)
        }
    }
}

/// `(t, f, D^α f)` table.
pub fn deriv(spec: &DerivSpec, hash: &str) -> CliResult<String> {
    let alpha = check_alpha(spec.alpha)?;
    let (a, b, h) = parse_grid(&spec.grid)?;
    let f: Box<dyn Fn(f64) -> f64> = match &spec.source {
        Source::Expr(e) => {
            let expr = parse_in(e, Scope::time())?;
            let mut env = fracosc::expr::VarBinding::new();
            env.insert("t".into(), a);
            expr.eval(&env).map_err(fracosc::Error::from)?;
            Box::new(move |t| {
                let mut env = fracosc::expr::VarBinding::new();
                env.insert("t".into(), t);
                expr.eval(&env).unwrap_or(f64::NAN)
            })
        }
        Source::Series(_) => {
            let s = series_of(&spec.source)?;
            Box::new(move |t| s.evaluate(t))
        }
    };
    let sampled = SampledFunction::from_fn(a, b, h, &f)?;
    if let Some(i) = sampled.values.iter().position(|v| !v.is_finite()) {
        return Err(CliError::Lib(fracosc::Error::Domain(format!(
            "function is not finite at t = {}",
            sampled.t(i)
        ))));
    }
    let d: Vec<f64> = match spec.scheme {
        Scheme::Gl => gl_derivative(&sampled, alpha, spec.side)?.values,
        Scheme::L1 => l1_derivative_side(&sampled, alpha, spec.side)?.values,
        Scheme::Exact => {
            if spec.side == Side::Right {
                return Err(CliError::Usage("the exact scheme supports --side left only".into()));
            }
            let ds = series_of(&spec.source)?.with_base_point(a).frac_derive(alpha)?;
            (0..sampled.len()).map(|i| ds.evaluate(sampled.t(i))).collect()
        }
    };
    let header = Header {
        command: "deriv",
        alpha,
        k: None,
        n: 1,
        hash: hash.to_string(),
    };
    let mut out = header.csv();
    out.push_str("t,f,dalpha_f\n");
    for (i, dv) in d.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", num(sampled.t(i)), num(sampled.values[i]), num(*dv));
    }
    Ok(out)
}

fn bundle(c: &Config) -> CliResult<(f64, usize, usize)> {
    let alpha = check_alpha(c.required("bundle.alpha")?)?;
    let n: usize = c.required("bundle.n")?;
    let k: usize = c.required("bundle.k")?;
    if n == 0 || k == 0 {
        return Err(CliError::Usage("bundle.n and bundle.k must be >= 1".into()));
    }
    Ok((alpha, n, k))
}

fn random_points(n: usize, k: usize, count: usize, seed: u64) -> Vec<JetPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
            let y = (0..k).map(|_| (0..n).map(|_| rng.gen_range(0.1..2.0)).collect()).collect();
            JetPoint::new(x, y).expect("finite coordinates")
        })
        .collect()
}

/// Euler-Lagrange residual tables and their maximum.
pub fn el(c: &Config) -> CliResult<(String, f64)> {
    c.check_keys(&[
        "command",
        "bundle.*",
        "lagrangian.expr",
        "el.form",
        "el.total_derivative",
        "el.target.*",
        "curve.*",
        "grid.nodes",
        "samples.*",
        "assert.tol",
    ])?;
    let (alpha, n, k) = bundle(c)?;
    let lag = FracLagrangian::new(k, n, alpha, parse_in(c.require("lagrangian.expr")?, Scope::jet(n, k))?)?;
    let td = match c.get("el.total_derivative").unwrap_or("full") {
        "full" => TotalDerivative::Full,
        "displayed" => TotalDerivative::Displayed,
        s => return Err(CliError::Usage(format!("unknown total derivative `{s}`"))),
    };
    let (frac, classical) = match c.get("el.form").unwrap_or("both") {
        "both" => (true, true),
        "fractional" => (true, false),
        "classical" => (false, true),
        s => return Err(CliError::Usage(format!("unknown form `{s}`"))),
    };
    let mut ops: Vec<(&str, Vec<MonomialSum>)> = Vec::new();
    if frac {
        ops.push(("frac", el_operator_frac(&lag, td)?));
    }
    if classical {
        ops.push(("classical", el_operator_classical(&lag, td)?));
    }

    let targets = c.indexed("el.target.");
    let curves = c.indexed("curve.x");
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    let first_col = match (targets.is_empty(), curves.is_empty()) {
        (false, true) => {
            if targets.len() != n {
                return Err(CliError::Usage(format!("need el.target.1..{n}, got {}", targets.len())));
            }
            let t: Vec<MonomialSum> = targets
                .iter()
                .map(|s| Ok(parse_in(s, Scope::jet(n, k + 1))?.to_monomials()?))
                .collect::<CliResult<_>>()?;
            let count = c.parsed_or("samples.count", 50usize)?;
            let seed = c.parsed_or("samples.seed", 1u64)?;
            let pts = random_points(n, k + 1, count, seed);
            for (idx, p) in pts.iter().enumerate() {
                let env = p.binding();
                let mut vals = Vec::new();
                for (_, op) in &ops {
                    for (o, tg) in op.iter().zip(&t) {
                        vals.push(o.sub(tg).eval(&env).map_err(fracosc::Error::from)?);
                    }
                }
                rows.push((idx.to_string(), vals));
            }
            "sample"
        }
        (true, false) => {
            if curves.len() != n {
                return Err(CliError::Usage(format!("need curve.x1..x{n}, got {}", curves.len())));
            }
            let comps = curves.iter().map(|s| Ok(FracSeries::from_json(s)?)).collect::<CliResult<Vec<_>>>()?;
            let curve = ExtremalCurve::new(comps);
            let nodes = uniform_nodes(0.0, 1.0, c.parsed_or("grid.nodes", 33usize)?);
            let per_op = ops
                .iter()
                .map(|(_, op)| Ok(sample_along(op, &lag, &curve, &nodes)?))
                .collect::<CliResult<Vec<_>>>()?;
            for (i, t) in nodes.iter().enumerate() {
                let vals = per_op.iter().flat_map(|r| r.values[i].clone()).collect();
                rows.push((format!("{i},{}", num(*t)), vals));
            }
            "node,t"
        }
        _ => return Err(CliError::Usage("give either el.target.* or curve.x*, not both or neither".into())),
    };

    let worst = rows.iter().flat_map(|(_, v)| v.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let header = Header {
        command: "el",
        alpha,
        k: Some(k),
        n,
        hash: c.hash(),
    };
    let mut out = header.csv();
    for (idx, (name, _)) in ops.iter().enumerate() {
        let w = rows.iter().map(|(_, v)| &v[idx * n..(idx + 1) * n]).flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let _ = writeln!(out, "# max_abs_{name} = {}", num(w));
    }
    out.push_str(first_col);
    for (name, _) in &ops {
        for i in 1..=n {
            let _ = write!(out, ",{name}_r{i}");
        }
    }
    out.push('\n');
    for (lead, vals) in &rows {
        out.push_str(lead);
        for v in vals {
            let _ = write!(out, ",{}", num(*v));
        }
        out.push('\n');
    }
    Ok((out, worst))
}

fn metric_rows(c: &Config, n: usize) -> CliResult<Option<Vec<Vec<String>>>> {
    let rows = c.indexed("metric.row");
    if rows.is_empty() {
        return Ok(None);
    }
    if rows.len() != n {
        return Err(CliError::Usage(format!("need metric.row1..row{n}, got {}", rows.len())));
    }
    let table: Vec<Vec<String>> = rows.iter().map(|r| r.split(';').map(|s| s.trim().to_string()).collect()).collect();
    if table.iter().any(|r| r.len() != n) {
        return Err(CliError::Usage(format!("each metric row needs {n} `;`-separated entries")));
    }
    Ok(Some(table))
}

fn point(c: &Config, n: usize, k: usize) -> CliResult<JetPoint> {
    let x = c.reals("point.x")?.unwrap_or_else(|| vec![1.0; n]);
    let y = (1..=k)
        .map(|a| Ok(c.reals(&format!("point.y{a}"))?.unwrap_or_else(|| vec![1.0; n])))
        .collect::<CliResult<Vec<_>>>()?;
    if x.len() != n || y.iter().any(|r| r.len() != n) {
        return Err(CliError::Usage(format!("point coordinates need {n} entries each")));
    }
    Ok(JetPoint::new(x, y)?)
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>())
}

/// Dual and primal coefficients, metrical connection and self-checks as JSON.
pub fn connection(c: &Config) -> CliResult<String> {
    c.check_keys(&[
        "command",
        "bundle.*",
        "structure",
        "metric.row*",
        "finsler.f",
        "lagrangian.expr",
        "lagrange.reading",
        "spray.g*",
        "point.*",
        "checks.*",
    ])?;
    let (alpha, n, k) = bundle(c)?;
    let at = point(c, n, k)?;
    let structure = c.require("structure")?;
    let rows = metric_rows(c, n)?;
    let parse_metric = |scope: Scope| -> CliResult<Option<MetricField>> {
        rows.as_ref()
            .map(|r| {
                let refs: Vec<Vec<&str>> = r.iter().map(|row| row.iter().map(String::as_str).collect()).collect();
                Ok(MetricField::parse(&refs, scope)?)
            })
            .transpose()
    };
    let samples = random_points(n, k, c.parsed_or("checks.samples", 10usize)?, c.parsed_or("checks.seed", 1u64)?);

    let (dual, metric, spray): (DualCoefficients, Option<MetricField>, Option<FracSpray>) = match structure {
        "riemann" => {
            let m = parse_metric(Scope::chart(n))?.ok_or_else(|| CliError::Usage("riemann needs metric.row*".into()))?;
            m.inverse(&at)?;
            let r = RiemannStructure::new(alpha, m.g.clone())?;
            r.check_positive(&samples.iter().map(|p| p.x.clone()).collect::<Vec<_>>())?;
            (prolong_riemann(&r, k)?, Some(m), None)
        }
        "finsler" => {
            let f = FinslerStructure::parse(n, alpha, c.require("finsler.f")?)?;
            let m = MetricField::new(f.fundamental_fields()?)?;
            m.inverse(&at)?;
            (prolong_finsler(&f, k)?, Some(m), None)
        }
        "lagrange" => {
            let lag = FracLagrangian::new(1, n, alpha, parse_in(c.require("lagrangian.expr")?, Scope::jet(n, 1))?)?;
            let reading = match c.get("lagrange.reading").unwrap_or("derived") {
                "derived" => LagrangeReading::Derived,
                "literal" => LagrangeReading::Literal,
                s => return Err(CliError::Usage(format!("unknown lagrange.reading `{s}`"))),
            };
            let probe = JetPoint::new(at.x.clone(), vec![at.y[0].clone()])?;
            let ft = fundamental_tensor(&lag, &probe)?;
            if !ft.regular {
                return Err(CliError::Lib(fracosc::Error::Singular(format!(
                    "fundamental tensor has rank {} of {n} at the check point",
                    ft.g.rank(1e-12)
                ))));
            }
            let m = MetricField::new(lag.fundamental_fields()?)?;
            (prolong_lagrange(&lag, k, reading)?, Some(m), None)
        }
        "spray" => {
            let g = c.indexed("spray.g");
            if g.len() != n {
                return Err(CliError::Usage(format!("need spray.g1..g{n}, got {}", g.len())));
            }
            let s = FracSpray::parse(k, n, alpha, &g)?;
            let m = parse_metric(Scope::jet(n, k))?;
            if let Some(m) = &m {
                m.inverse(&at)?;
            }
            (spray_to_dual(&s)?, m, Some(s))
        }
        s => return Err(CliError::Usage(format!("unknown structure `{s}`"))),
    };
    let primal = dual_to_primal(&dual);

    let j = tangent_structure_matrix(n, k);
    let mut power = DMatrix::<f64>::identity((k + 1) * n, (k + 1) * n);
    for _ in 0..=k {
        power = &j * power;
    }
    let mut pairing = 0.0f64;
    for p in &samples {
        pairing = pairing.max(basis_pairing_residual(&primal, &dual, p)?);
    }
    let mut checks = json!({
        "tangent_nilpotent": power.iter().all(|v| *v == 0.0),
        "tangent_rank": j.rank(1e-12),
        "basis_pairing": pairing,
    });
    let mut conn_json = Value::Null;
    if let Some(m) = &metric {
        let conn = metrical_connection(m, &primal, &at)?;
        conn_json = json!({
            "point": { "x": at.x, "y": at.y },
            "connection": conn.to_json(),
            "symmetry_defect": conn.symmetry_defect(),
        });
        let mut metricity = 0.0f64;
        for p in &samples {
            let conn = metrical_connection(m, &primal, p)?;
            metricity = metricity.max(covariant_derivative_d_tensor(&DTensor::from_metric(m), &conn, &primal, p)?.max_abs());
        }
        checks["metricity"] = json!(metricity);
    }
    if let Some(s) = &spray {
        let mut worst = 0.0f64;
        for p in &samples {
            let js = tangent_structure(&spray_field(s, p)?, n, k)?;
            let lv = liouville_field(k, p, alpha, LiouvilleConvention::Consistent)?;
            worst = js.iter().zip(&lv).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
        checks["spray_property"] = json!(worst);
    }
    let header = Header {
        command: "connection",
        alpha,
        k: Some(k),
        n,
        hash: c.hash(),
    };
    let out = json!({
        "header": header.json(),
        "structure": structure,
        "dual": dual.to_json(),
        "primal": primal.to_json(),
        "metric_at_point": metric.as_ref().map(|m| m.eval(&at)).transpose()?.map(|g| matrix_json(&g)),
        "metrical_connection": conn_json,
        "checks": checks,
    });
    Ok(serde_json::to_string_pretty(&out).expect("serializable") + "\n")
}

/// Trajectory of `D^α x = rhs(t, x)`.
pub fn solve(c: &Config) -> CliResult<String> {
    c.check_keys(&["command", "bundle.alpha", "bundle.n", "ode.*"])?;
    let alpha = c.required("bundle.alpha")?;
    let rhs_src = c.indexed("ode.rhs.");
    if rhs_src.is_empty() {
        return Err(CliError::Usage("need ode.rhs.1 ..".into()));
    }
    let n = rhs_src.len();
    if let Some(bn) = c.parsed::<usize>("bundle.n")? {
        if bn != n {
            return Err(CliError::Usage(format!("bundle.n = {bn} but {n} right-hand sides given")));
        }
    }
    let scope = Scope {
        n: Some(n),
        k: Some(0),
        allow_t: true,
    };
    let rhs = rhs_src.iter().map(|s| parse_in(s, scope)).collect::<Result<Vec<Expr>, _>>()?;
    let x0 = c.reals("ode.x0")?.ok_or_else(|| ConfigError {
        line: 0,
        message: "missing required key `ode.x0`".into(),
    })?;
    let p = FodeProblem {
        alpha,
        rhs,
        x0,
        t_end: c.parsed_or("ode.t_end", 1.0)?,
        h: c.parsed_or("ode.h", 1e-3)?,
    };
    let tr = solve_fode(&p)?;
    let header = Header {
        command: "solve",
        alpha,
        k: None,
        n,
        hash: c.hash(),
    };
    Ok(header.csv() + &tr.to_csv())
}

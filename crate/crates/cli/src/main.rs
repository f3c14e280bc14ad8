mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fracosc::fracnum::Side;

use commands::{CliError, CliResult, DerivSpec, Scheme, Source};
use config::Config;

/// Reviewed Riemann-Liouville derivatives and fractional osculator-bundle geometry.
///
/// Exit codes: 0 ok, 1 usage or parse error, 2 domain or evaluation error,
/// 3 failed assertion.
#[derive(Parser, Debug)]
#[command(name = "fracosc", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fractional derivative of a function of `t` on a grid, as CSV.
    Deriv(DerivArgs),
    /// Euler-Lagrange residuals from a config file, as CSV.
    El(RunArgs),
    /// Connection coefficients and self-checks from a config file, as JSON.
    Connection(RunArgs),
    /// Fractional ODE trajectory from a config file, as CSV.
    Solve(RunArgs),
    /// Dispatch on the config's `command` key.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct DerivArgs {
    #[arg(long)]
    alpha: f64,
    /// Expression in `t`.
    #[arg(long, conflicts_with = "series", required_unless_present = "series")]
    expr: Option<String>,
    /// JSON array of `[coeff, exponent]` pairs.
    #[arg(long)]
    series: Option<String>,
    /// `a:b:h`
    #[arg(long, default_value = "0:1:0.001")]
    grid: String,
    #[arg(long, value_enum, default_value_t = SchemeArg::Gl)]
    scheme: SchemeArg,
    #[arg(long, value_enum, default_value_t = SideArg::Left)]
    side: SideArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    config: PathBuf,
    /// `tol=<value>`: exit 3 when the largest residual exceeds it.
    #[arg(long)]
    assert: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeArg {
    Gl,
    L1,
    Exact,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SideArg {
    Left,
    Right,
}

fn read_config(path: &Path) -> CliResult<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(Config::parse(&text)?)
}

fn assert_tol(flag: Option<&str>, c: &Config) -> CliResult<Option<f64>> {
    if let Some(f) = flag {
        let v = f
            .strip_prefix("tol=")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| *v >= 0.0)
            .ok_or_else(|| CliError::Usage(format!("--assert expects `tol=<non-negative number>`, got `{f}`")))?;
        return Ok(Some(v));
    }
    Ok(c.parsed("assert.tol")?)
}

fn emit(text: &str, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => {
            use std::io::Write;
            let mut s = std::io::stdout().lock();
            s.write_all(text.as_bytes()).and_then(|_| s.flush()).map_err(|e| CliError::Io(e.to_string()))
        }
    }
}

fn run_config(expected: Option<&str>, args: &RunArgs) -> CliResult<()> {
    let c = read_config(&args.config)?;
    let command = match (expected, c.get("command")) {
        (Some(e), Some(got)) if e != got => {
            return Err(CliError::Usage(format!("config is for `{got}`, not `{e}`")));
        }
        (Some(e), _) => e.to_string(),
        (None, Some(got)) => got.to_string(),
        (None, None) => return Err(CliError::Usage("config has no `command` key".into())),
    };
    let out = args.out.as_deref();
    match command.as_str() {
        "el" => {
            let tol = assert_tol(args.assert.as_deref(), &c)?;
            let (text, worst) = commands::el(&c)?;
            emit(&text, out)?;
            if let Some(t) = tol {
                if !(worst <= t) {
                    return Err(CliError::Assertion(format!("max residual {worst:.6e} exceeds tol {t:e}")));
                }
            }
            Ok(())
        }
        "connection" => emit(&commands::connection(&c)?, out),
        "solve" => emit(&commands::solve(&c)?, out),
        "deriv" => {
            let spec = DerivSpec::from_config(&c)?;
            emit(&commands::deriv(&spec, &c.hash())?, out)
        }
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Deriv(a) => {
            let spec = DerivSpec {
                alpha: a.alpha,
                source: match (a.expr, a.series) {
                    (Some(e), _) => Source::Expr(e),
                    (None, Some(s)) => Source::Series(s),
                    (None, None) => return Err(CliError::Usage("need --expr or --series".into())),
                },
                grid: a.grid,
                scheme: match a.scheme {
                    SchemeArg::Gl => Scheme::Gl,
                    SchemeArg::L1 => Scheme::L1,
                    SchemeArg::Exact => Scheme::Exact,
                },
                side: match a.side {
                    SideArg::Left => Side::Left,
                    SideArg::Right => Side::Right,
                },
            };
            emit(&commands::deriv(&spec, &spec.hash())?, a.out.as_deref())
        }
        Cmd::El(a) => run_config(Some("el"), &a),
        Cmd::Connection(a) => run_config(Some("connection"), &a),
        Cmd::Solve(a) => run_config(Some("solve"), &a),
        Cmd::Run(a) => run_config(None, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fracosc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

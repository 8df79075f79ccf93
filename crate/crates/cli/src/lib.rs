//! `symsde` command line: config parsing, experiment orchestration and CSV /
//! Markdown output.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
//! 4 failed check in `report`.

pub mod config;

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use symsde::analytics::{self, CirParams};
use symsde::model::validate_model;
use symsde::montecarlo::{self, ConvergenceReport, LevelError, Payoff, RateFit};
use symsde::pdeoracle;
use symsde::schemes::simulate_path;
use symsde::Error;

pub use config::{ConfigError, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "symsde", version, about = "Symmetrized Euler scheme experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Experiment config; the standard CIR setup when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Monte Carlo sample count (paths for `simulate`).
    #[arg(long, global = true, value_name = "N")]
    paths: Option<u64>,
    /// Output directory; `-` for stdout.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<String>,
    /// Omit the generation-time comment line.
    #[arg(long, global = true)]
    no_timestamp: bool,
    /// Finest ladder level for `converge` / `report`.
    #[arg(long, global = true, value_name = "L")]
    levels: Option<usize>,
    /// `converge`: fit injected errors `0.5 dt` instead of running Monte Carlo.
    #[arg(long, global = true)]
    self_test: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print which hypotheses the model satisfies.
    Validate,
    /// Sample paths: path,k,t,x,z
    Simulate,
    /// Weak-error ladder: level,dt,error,stderr,n_paths
    Converge,
    /// Closed forms: quantity,params_json,value
    Analytics,
    /// Local time at 0: estimator,value,stderr
    Localtime,
    /// Kolmogorov solve: x,u
    Pde,
    /// Markdown check report; exit 4 if a check fails.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Converge => "converge",
            Command::Analytics => "analytics",
            Command::Localtime => "localtime",
            Command::Pde => "pde",
            Command::Report => "report",
        }
    }
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::config(e.0)
    }
}

/// Bad input maps to 2, everything the numerics could not deliver to 3.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter { .. }
        | Error::UnknownDrift(_)
        | Error::UnknownPayoff(_)
        | Error::UnknownScheme(_)
        | Error::LevelOutOfRange { .. }
        | Error::NotIntegrable { .. }
        | Error::ReferenceUnavailable(_) => EXIT_CONFIG,
        Error::StateOverflow { .. }
        | Error::TooFewLevels { .. }
        | Error::Quadrature(_)
        | Error::Tridiagonal { .. }
        | Error::TruncationTooSmall { .. }
        | Error::NoConvergence { .. } => EXIT_NUMERIC,
    }
}

/// A CSV or Markdown document: `#` comment header plus body.
struct Document {
    name: String,
    header: Vec<String>,
    body: String,
}

impl Document {
    fn new(name: &str, cfg: &ExperimentConfig, common: &Common, command: &str) -> Self {
        let mut header = vec![
            format!("symsde {} {}", env!("CARGO_PKG_VERSION"), command),
            format!("config_hash={} seed={}", cfg.hash(), cfg.mc.seed),
        ];
        if !common.no_timestamp {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            header.push(format!("generated_unix={secs}"));
        }
        Self {
            name: name.to_string(),
            header,
            body: String::new(),
        }
    }

    fn render(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            let _ = writeln!(s, "# {h}");
        }
        s.push_str(&self.body);
        s
    }

    fn emit(&self, dir: &str) -> Result<(), Failure> {
        let text = self.render();
        if dir == "-" {
            print!("{text}");
            return Ok(());
        }
        let path = PathBuf::from(dir).join(&self.name);
        std::fs::create_dir_all(dir)
            .and_then(|_| std::fs::write(&path, text))
            .map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

/// Parses `argv` (without the program name), runs the subcommand and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("symsde".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run_parsed(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SYMSDE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::config(format!("SYMSDE_THREADS must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Failure::config(format!("cannot start worker pool: {e}")))
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.mc.seed = seed;
    }
    if let Some(n) = common.paths {
        cfg.mc.n_paths = n;
        cfg.simulate_paths = n;
    }
    if let Some(l) = common.levels {
        cfg.grid.levels = l;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run_parsed(cli: &Cli) -> Result<i32, Failure> {
    let cfg = load_config(&cli.common)?;
    let pool = thread_pool()?;
    pool.install(|| match cli.command {
        Command::Validate => validate(&cfg),
        Command::Simulate => simulate(&cfg, &cli.common),
        Command::Converge => converge(&cfg, &cli.common),
        Command::Analytics => analytics_cmd(&cfg, &cli.common),
        Command::Localtime => localtime(&cfg, &cli.common),
        Command::Pde => pde(&cfg, &cli.common),
        Command::Report => report(&cfg, &cli.common),
    })
    .map_err(|mut f| {
        f.message = format!("{}: {}", cli.command.name(), f.message);
        f
    })
}

fn validate(cfg: &ExperimentConfig) -> Result<i32, Failure> {
    let model = cfg.model_spec()?;
    let report = validate_model(&model, Some(cfg.grid_spec()?.dt()));
    println!("model: {}", model.id());
    println!("{:<6} {:<6} detail", "check", "holds");
    for (name, check) in report.rows() {
        println!("{:<6} {:<6} {}", name, if check.holds { "yes" } else { "no" }, check.detail);
    }
    Ok(EXIT_OK)
}

fn simulate(cfg: &ExperimentConfig, common: &Common) -> Result<i32, Failure> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid_spec()?;
    let mut doc = Document::new("simulate.csv", cfg, common, "simulate");
    doc.header.push(format!("model={} dt={}", model.id(), grid.dt()));
    doc.body.push_str("path,k,t,x,z\n");
    for path in 0..cfg.simulate_paths {
        let rec = simulate_path(&model, &grid, cfg.mc.seed, path)?;
        for (k, &x) in rec.states.iter().enumerate() {
            let z = if k == 0 { x } else { rec.candidates[k - 1] };
            let _ = writeln!(doc.body, "{path},{k},{},{},{}", num(grid.time(k)), num(x), num(z));
        }
    }
    doc.emit(&cfg.output_dir)?;
    Ok(EXIT_OK)
}

/// Errors `0.5 dt` with stderr `1e-6 dt`, exactly rate 1.
fn synthetic_levels(cfg: &ExperimentConfig) -> Vec<LevelError> {
    let spec = cfg.ladder();
    (0..=spec.levels)
        .map(|level| {
            let dt = spec.dt(level);
            LevelError {
                level,
                dt,
                error: 0.5 * dt,
                stderr: 1e-6 * dt,
                n_paths: 0,
            }
        })
        .collect()
}

fn ladder_rows(levels: &[LevelError], fit: &Result<RateFit, Error>) -> String {
    let mut s = String::from("level,dt,error,stderr,n_paths\n");
    for l in levels {
        let _ = writeln!(s, "{},{},{},{},{}", l.level, num(l.dt), num(l.error), num(l.stderr), l.n_paths);
    }
    if let Ok(fit) = fit {
        let half = 0.5 * (fit.ci.1 - fit.ci.0);
        let _ = writeln!(s, "rate,,{:.6},{:.6},{}", fit.rate, half, fit.used.len());
    }
    s
}

fn fit_comment(fit: &Result<RateFit, Error>) -> String {
    match fit {
        Ok(f) => format!(
            "rate={:.6} ci95=[{:.6}, {:.6}] levels_used={:?} noise_floor=3*stderr",
            f.rate, f.ci.0, f.ci.1, f.used
        ),
        Err(e) => format!("rate fit failed: {e}"),
    }
}

fn run_ladder(cfg: &ExperimentConfig) -> Result<ConvergenceReport, Failure> {
    let model = cfg.model_spec()?;
    let payoff = cfg.payoff_spec()?;
    let reference = cfg.reference_spec()?;
    Ok(montecarlo::weak_error_ladder(
        &payoff,
        &model,
        &cfg.ladder(),
        &cfg.mc_config(),
        reference,
    )?)
}

fn converge(cfg: &ExperimentConfig, common: &Common) -> Result<i32, Failure> {
    let mut doc = Document::new("converge.csv", cfg, common, "converge");
    let (levels, fit) = if common.self_test {
        let levels = synthetic_levels(cfg);
        let pts: Vec<_> = levels.iter().map(|l| (l.dt, l.error, l.stderr)).collect();
        doc.header.push("self-test: injected errors 0.5*dt".into());
        (levels, montecarlo::fit_rate(&pts))
    } else {
        let report = run_ladder(cfg)?;
        doc.header.push(format!(
            "model={} payoff={} reference={} value={} stderr={}",
            cfg.model_spec()?.id(),
            cfg.payoff_spec()?,
            report.reference.kind,
            report.reference.value,
            report.reference.stderr
        ));
        (report.levels, report.fit)
    };
    doc.header.push(fit_comment(&fit));
    doc.body = ladder_rows(&levels, &fit);
    doc.emit(&cfg.output_dir)?;
    match fit {
        Ok(_) => Ok(EXIT_OK),
        Err(e) => Err(e.into()),
    }
}

/// Shortest round-trip decimal, scientific outside `[1e-4, 1e15)`.
fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn params_json(params: &[(&str, f64)]) -> String {
    let fields: Vec<String> = params.iter().map(|(k, v)| format!("\"{k}\":{}", json_num(*v))).collect();
    format!("{{{}}}", fields.join(","))
}

fn json_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        "null".into()
    }
}

/// Every formula that applies to the configured model, at `x0`, `dt = T/N`, `T`.
/// Formulas whose preconditions fail are skipped with a note on stderr.
fn analytics_rows(cfg: &ExperimentConfig) -> Result<Vec<(String, String, f64)>, Failure> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid_spec()?;
    let (t, dt, x0) = (grid.horizon(), grid.dt(), model.x0());
    let (k, sigma, b0) = (model.lipschitz(), model.sigma(), model.b0());
    let mut rows = Vec::new();
    let mut push = |name: &str, params: &[(&str, f64)], value: Result<f64, Error>| -> Result<(), Failure> {
        match value {
            Ok(v) => rows.push((name.to_string(), params_json(params), v)),
            Err(e) if exit_code(&e) == EXIT_CONFIG => eprintln!("skipped {name}: {e}"),
            Err(e) => return Err(e.into()),
        }
        Ok(())
    };

    let cir = CirParams::from_model(&model);
    if let Ok(p) = &cir {
        push("cir_laplace", &[("u", 1.0), ("t", t), ("x", x0)], analytics::cir_laplace(1.0, t, p))?;
        push("cir_mean", &[("t", t), ("x", x0)], Ok(p.mean(t)))?;
        push(
            "cir_inverse_moment",
            &[("p", 1.0), ("t", t), ("x", x0)],
            analytics::cir_inverse_moment(1.0, t, p),
        )?;
        push(
            "exponential_inverse_moment_rate",
            &[("a", p.a), ("b", p.b), ("sigma", sigma)],
            analytics::exponential_inverse_moment_rate(p),
        )?;
    }
    let n = grid.steps();
    push(
        "mu_sequence",
        &[("gamma", 1.0), ("dt", dt), ("K", k), ("sigma", sigma), ("j", n as f64)],
        analytics::mu_sequence(1.0, dt, k, sigma, n).map(|m| m.values[n]),
    )?;
    if model.is_square_root() {
        push(
            "sign_flip_bound",
            &[("x", x0), ("dt", dt), ("K", k), ("sigma", sigma)],
            analytics::sign_flip_bound(x0, dt, k, sigma),
        )?;
        push(
            "vncir_bound",
            &[("dt", dt), ("x0", x0), ("b0", b0), ("sigma", sigma), ("C", 1.0)],
            analytics::vncir_bound(dt, x0, b0, sigma, 1.0),
        )?;
        for gamma in [1.0, 2.0] {
            push(
                "exp_neg_moment_bound",
                &[("gamma", gamma), ("dt", dt), ("T", t)],
                analytics::exp_neg_moment_bound(gamma, dt, &model, t).map(|b| b.value),
            )?;
        }
        push(
            "local_time_increment",
            &[("x", x0), ("dt", dt)],
            analytics::local_time_increment(x0, dt, &model),
        )?;
    } else {
        push("lambda_of_a", &[("a", 0.0)], analytics::lambda_of_a(0.0, &model))?;
        let ec = || analytics::explicit_constants(&model, 1.0);
        push("underline_c", &[("p", 1.0)], ec().map(|c| c.underline_c))?;
        push("underline_lambda", &[], ec().map(|c| c.underline_lambda))?;
        let hb = || analytics::moitiealpha_bound(x0, dt, &model);
        push("half_drop_bound_conditional", &[("x", x0), ("dt", dt)], hb().map(|h| h.conditional))?;
        push("half_drop_bound_unconditional", &[("x", x0), ("dt", dt)], hb().map(|h| h.unconditional))?;
    }
    push(
        "hitting_prob_brownian_drift",
        &[("y", 0.0), ("y0", x0), ("mu", -b0), ("t", t)],
        analytics::hitting_prob_brownian_drift(0.0, x0, -b0, t),
    )?;
    Ok(rows)
}

fn analytics_cmd(cfg: &ExperimentConfig, common: &Common) -> Result<i32, Failure> {
    let mut doc = Document::new("analytics.csv", cfg, common, "analytics");
    doc.body.push_str("quantity,params_json,value\n");
    for (name, params, value) in analytics_rows(cfg)? {
        let _ = writeln!(doc.body, "{},{},{}", name, csv_quote(&params), num(value));
    }
    doc.emit(&cfg.output_dir)?;
    Ok(EXIT_OK)
}

fn localtime(cfg: &ExperimentConfig, common: &Common) -> Result<i32, Failure> {
    let model = cfg.model_spec()?;
    let grid = cfg.grid_spec()?;
    let est = montecarlo::estimate_local_time(
        &model,
        &grid,
        cfg.localtime.substeps,
        cfg.localtime.eps,
        &cfg.mc_config(),
    )?;
    let mut doc = Document::new("localtime.csv", cfg, common, "localtime");
    doc.header.push(format!(
        "model={} dt={} substeps={} eps={} n_paths={}",
        model.id(),
        grid.dt(),
        cfg.localtime.substeps,
        cfg.localtime.eps,
        est.occupation.n_paths
    ));
    doc.body = format!(
        "estimator,value,stderr\noccupation,{},{}\nanalytic,{},{}\n",
        num(est.occupation.mean),
        num(est.occupation.stderr),
        num(est.analytic.mean),
        num(est.analytic.stderr)
    );
    doc.emit(&cfg.output_dir)?;
    Ok(EXIT_OK)
}

fn pde(cfg: &ExperimentConfig, common: &Common) -> Result<i32, Failure> {
    let model = cfg.model_spec()?;
    let payoff = cfg.payoff_spec()?;
    let grid = cfg.pde_grid(&model)?;
    let sol = pdeoracle::solve_kolmogorov(&model, &payoff, cfg.grid.horizon, &grid)?;
    let mut doc = Document::new("pde.csv", cfg, common, "pde");
    doc.header.push(format!(
        "model={} payoff={} T={} x_max={} nx={} nt={} theta={} u(0,x0)={}",
        model.id(),
        payoff,
        cfg.grid.horizon,
        grid.x_max,
        grid.nx,
        grid.nt,
        grid.theta,
        sol.value_at(model.x0())
    ));
    doc.body.push_str("x,u\n");
    for (x, u) in sol.x.iter().zip(&sol.u) {
        let _ = writeln!(doc.body, "{},{}", num(*x), num(*u));
    }
    doc.emit(&cfg.output_dir)?;
    Ok(EXIT_OK)
}

struct CheckRow {
    name: String,
    pass: bool,
    detail: String,
}

fn report(cfg: &ExperimentConfig, common: &Common) -> Result<i32, Failure> {
    let model = cfg.model_spec()?;
    let payoff = cfg.payoff_spec()?;
    let mut checks = Vec::new();

    let hyp = validate_model(&model, Some(cfg.ladder().dt(0)));
    for (name, c) in hyp.rows() {
        // H3 is only needed for the square-root model, H3' only for alpha > 1/2.
        let required = match name {
            "H3" => model.is_square_root(),
            "H3'" => !model.is_square_root(),
            _ => true,
        };
        if required {
            checks.push(CheckRow {
                name: format!("hypothesis {name}"),
                pass: c.holds,
                detail: c.detail.clone(),
            });
        }
    }

    let ladder = run_ladder(cfg)?;
    let floor = ladder.levels.iter().all(|l| l.error.abs() > 3.0 * l.stderr);
    checks.push(CheckRow {
        name: "levels above noise floor".into(),
        pass: floor,
        detail: "every |error| > 3 stderr".into(),
    });
    checks.push(match &ladder.fit {
        Ok(f) => CheckRow {
            name: "weak rate".into(),
            pass: (cfg.report.rate_min..=cfg.report.rate_max).contains(&f.rate),
            detail: format!(
                "rate {:.4} (ci95 [{:.4}, {:.4}]) in [{}, {}]",
                f.rate, f.ci.0, f.ci.1, cfg.report.rate_min, cfg.report.rate_max
            ),
        },
        Err(e) => CheckRow {
            name: "weak rate".into(),
            pass: false,
            detail: e.to_string(),
        },
    });

    if let (Ok(p), Payoff::ExpNeg { u }) = (CirParams::from_model(&model), payoff) {
        let exact = analytics::cir_laplace(u, cfg.grid.horizon, &p)?;
        let pde = pdeoracle::pde_reference(&model, &payoff, cfg.grid.horizon, model.x0(), 1e-5)?;
        checks.push(CheckRow {
            name: "pde oracle".into(),
            pass: (pde.value - exact).abs() <= 1e-3,
            detail: format!("|{} - {}| <= 1e-3", pde.value, exact),
        });
    }

    let mut doc = Document::new("report.md", cfg, common, "report");
    let _ = writeln!(doc.body, "\n## symsde report\n");
    let _ = writeln!(
        doc.body,
        "model `{}`, payoff `{}`, reference `{}` = {} (stderr {})\n",
        model.id(),
        payoff,
        ladder.reference.kind,
        ladder.reference.value,
        ladder.reference.stderr
    );
    let _ = writeln!(doc.body, "| level | dt | error | stderr | n_paths |\n|---|---|---|---|---|");
    for l in &ladder.levels {
        let _ = writeln!(doc.body, "| {} | {} | {:.4e} | {:.2e} | {} |", l.level, l.dt, l.error, l.stderr, l.n_paths);
    }
    let _ = writeln!(doc.body, "\nNoise floor: levels with |error| <= 3 stderr are excluded from the fit.\n");
    let _ = writeln!(doc.body, "| check | result | detail |\n|---|---|---|");
    for c in &checks {
        let _ = writeln!(
            doc.body,
            "| {} | {} | {} |",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    doc.emit(&cfg.output_dir)?;
    Ok(if checks.iter().all(|c| c.pass) { EXIT_OK } else { EXIT_CHECK })
}

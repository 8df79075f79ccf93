//! Deterministic parallel Monte Carlo: expectations, weak-error ladders with
//! common random numbers, rate fitting, and the empirical side of the bounds in
//! [`crate::analytics`].
//!
//! Paths are split into fixed-size chunks. Each chunk accumulates its own
//! statistics sequentially; chunk results are merged in chunk-index order, so
//! every estimate is a pure function of `(seed, n_paths, chunk_size)` and does
//! not depend on the number of worker threads.

use std::fmt;

use rayon::prelude::*;

use crate::analytics::{cir_laplace, local_time_increment_tol, CirParams};
use crate::error::{ensure_positive, invalid, Error, Result};
use crate::model::ModelSpec;
use crate::pdeoracle::pde_reference;
use crate::rng::{stream, CounterRng};
use crate::schemes::{
    aggregate_pairs, sym_euler_step, terminal_state, CirTransition, GridSpec, Scheme,
    OVERFLOW_LIMIT,
};

/// Bounded smooth test functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payoff {
    /// `e^{-u x}`
    ExpNeg { u: f64 },
    /// `cos(omega x)`
    Cosine { omega: f64 },
    /// `cap * tanh(x^degree / cap)`
    CappedPoly { degree: u32, cap: f64 },
}

impl Payoff {
    pub const REGISTRY: [&'static str; 3] = ["exp_neg", "cosine", "capped_poly"];

    pub fn named(id: &str, params: &[f64]) -> Result<Self> {
        let get = |i: usize, name: &'static str| {
            params
                .get(i)
                .copied()
                .ok_or_else(|| invalid(name, f64::NAN, format!("payoff `{id}` needs `{name}`")))
        };
        let p = match id {
            "exp_neg" => Payoff::ExpNeg { u: get(0, "u")? },
            "cosine" => Payoff::Cosine {
                omega: get(0, "omega")?,
            },
            "capped_poly" => {
                let d = get(0, "degree")?;
                if !((1.0..=8.0).contains(&d) && d.fract() == 0.0) {
                    return Err(invalid("degree", d, "must be an integer in 1..=8"));
                }
                Payoff::CappedPoly {
                    degree: d as u32,
                    cap: get(1, "cap")?,
                }
            }
            other => return Err(Error::UnknownPayoff(other.to_string())),
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Payoff::ExpNeg { u } => crate::error::ensure_nonnegative("u", u),
            Payoff::Cosine { omega } => {
                if omega.is_finite() {
                    Ok(())
                } else {
                    Err(invalid("omega", omega, "must be finite"))
                }
            }
            Payoff::CappedPoly { cap, .. } => ensure_positive("cap", cap),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Payoff::ExpNeg { .. } => "exp_neg",
            Payoff::Cosine { .. } => "cosine",
            Payoff::CappedPoly { .. } => "capped_poly",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            Payoff::ExpNeg { u } => vec![u],
            Payoff::Cosine { omega } => vec![omega],
            Payoff::CappedPoly { degree, cap } => vec![degree as f64, cap],
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Payoff::ExpNeg { u } => (-u * x).exp(),
            Payoff::Cosine { omega } => (omega * x).cos(),
            Payoff::CappedPoly { degree, cap } => cap * (x.powi(degree as i32) / cap).tanh(),
        }
    }
}

impl fmt::Display for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Payoff::ExpNeg { u } => write!(f, "exp_neg(u={u})"),
            Payoff::Cosine { omega } => write!(f, "cosine(omega={omega})"),
            Payoff::CappedPoly { degree, cap } => write!(f, "capped_poly(degree={degree}, cap={cap})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    /// Number of samples. With `antithetic`, one sample is the average over a
    /// `(dW, -dW)` pair, so twice as many paths are simulated.
    pub n_paths: u64,
    pub seed: u64,
    pub chunk_size: usize,
    /// Only used by [`estimate_expectation`] and [`weak_error_ladder`].
    pub antithetic: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            seed: 0,
            chunk_size: 4096,
            antithetic: true,
        }
    }
}

impl McConfig {
    pub fn new(n_paths: u64, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(invalid("n_paths", self.n_paths as f64, "need at least 2 samples"));
        }
        if self.chunk_size == 0 {
            return Err(invalid("chunk_size", 0.0, "must be positive"));
        }
        Ok(())
    }
}

/// Running mean and sum of squared deviations (Welford), mergeable (Chan et al.).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let w = other.n as f64 / n as f64;
        self.mean += d * w;
        self.m2 += other.m2 + d * d * self.n as f64 * w;
        self.n = n;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: u64,
    pub seed: u64,
    pub scheme: String,
    pub model: String,
}

impl MCEstimate {
    fn new(m: &Moments, seed: u64, scheme: impl Into<String>, model: &ModelSpec) -> Self {
        Self {
            mean: m.mean,
            stderr: m.stderr(),
            n_paths: m.n,
            seed,
            scheme: scheme.into(),
            model: model.id(),
        }
    }
}

/// Runs `work(first_path, end_path)` over consecutive chunks in parallel and
/// returns the results in chunk order.
fn par_chunks<T, F>(n: u64, chunk: usize, work: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, u64) -> Result<T> + Sync,
{
    let chunk = chunk as u64;
    let n_chunks = n.div_ceil(chunk);
    (0..n_chunks)
        .into_par_iter()
        .map(|c| work(c * chunk, ((c + 1) * chunk).min(n)))
        .collect()
}

/// Mean of `sample(path)` over `cfg.n_paths` paths.
fn scalar_estimate<F>(cfg: &McConfig, sample: F) -> Result<Moments>
where
    F: Fn(u64, &mut Vec<f64>) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let parts = par_chunks(cfg.n_paths, cfg.chunk_size, |lo, hi| {
        let mut scratch = Vec::new();
        let mut m = Moments::default();
        for path in lo..hi {
            m.push(sample(path, &mut scratch)?);
        }
        Ok(m)
    })?;
    let mut total = Moments::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// `E f(X_T)` under `scheme`.
pub fn estimate_expectation(
    payoff: &Payoff,
    scheme: Scheme,
    model: &ModelSpec,
    grid: &GridSpec,
    cfg: &McConfig,
) -> Result<MCEstimate> {
    let m = match scheme {
        Scheme::ExactCir => {
            let tr = CirTransition::from_model(model, grid.horizon())?;
            scalar_estimate(cfg, |path, _| {
                let mut rng = CounterRng::new(cfg.seed, stream::EXACT_CIR, path);
                Ok(payoff.eval(tr.sample(model.x0(), &mut rng)))
            })?
        }
        Scheme::Symmetrized | Scheme::Projection => {
            let dt = grid.dt();
            let sd = dt.sqrt();
            scalar_estimate(cfg, |path, dw| {
                dw.resize(grid.steps(), 0.0);
                CounterRng::new(cfg.seed, stream::INCREMENTS, path).fill_normal(dw, sd);
                let plus = payoff.eval(terminal_state(model, scheme, dt, dw, path)?);
                if !cfg.antithetic {
                    return Ok(plus);
                }
                dw.iter_mut().for_each(|v| *v = -*v);
                let minus = payoff.eval(terminal_state(model, scheme, dt, dw, path)?);
                Ok(0.5 * (plus + minus))
            })?
        }
    };
    Ok(MCEstimate::new(&m, cfg.seed, scheme.id(), model))
}

/// Oracle for `E f(X_T)` in a weak-error study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    /// `cir_laplace`; affine square-root model with `exp_neg` payoff only.
    Analytic,
    /// Exact CIR transitions with `factor` times the scheme's path count.
    ExactSampler { factor: u64 },
    /// Kolmogorov PDE solve refined to `tolerance`.
    Pde { tolerance: f64 },
    /// Per-path `2 f_L - f_{L-1}` from the two finest levels.
    Richardson,
}

impl Reference {
    pub fn id(&self) -> &'static str {
        match self {
            Reference::Analytic => "analytic",
            Reference::ExactSampler { .. } => "exact_sampler",
            Reference::Pde { .. } => "pde",
            Reference::Richardson => "richardson",
        }
    }
}

/// `base_steps * 2^l` steps on level `l = 0..=levels` over `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderSpec {
    pub base_steps: usize,
    pub levels: usize,
    pub horizon: f64,
}

impl LadderSpec {
    pub fn dt(&self, level: usize) -> f64 {
        self.horizon / (self.base_steps << level) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelError {
    pub level: usize,
    pub dt: f64,
    /// Scheme minus reference.
    pub error: f64,
    pub stderr: f64,
    pub n_paths: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    /// Slope of `log|error|` against `log dt`.
    pub rate: f64,
    pub intercept: f64,
    /// Bootstrap 95% percentile interval.
    pub ci: (f64, f64),
    /// Indices (into the input) of levels that passed the `3 stderr` filter.
    pub used: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceValue {
    pub kind: &'static str,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// Sorted by `dt` descending.
    pub levels: Vec<LevelError>,
    /// Fails with [`Error::TooFewLevels`] when fewer than three levels clear the noise floor.
    pub fit: Result<RateFit>,
    pub reference: ReferenceValue,
    /// Sample variance of `f(X_T)` per level.
    pub level_variance: Vec<f64>,
    /// Sample variance of `f_l - f_{l+1}` on common random numbers.
    pub diff_variance: Vec<f64>,
}

fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn percentile_interval(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let pick = |q: f64| v[((q * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
    (pick(0.025), pick(0.975))
}

const BOOTSTRAP_RESAMPLES: u64 = 1000;

fn usable_levels(points: &[(f64, f64, f64)]) -> Result<Vec<usize>> {
    let used: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, &(dt, e, se))| dt > 0.0 && e.abs() > 3.0 * se && e != 0.0)
        .map(|(i, _)| i)
        .collect();
    if used.len() < 3 {
        return Err(Error::TooFewLevels {
            usable: used.len(),
            required: 3,
        });
    }
    Ok(used)
}

/// Least-squares rate on `(dt, error, stderr)` triples. Levels with
/// `|error| <= 3 stderr` are dropped; at least three must remain. The
/// interval comes from 1000 residual-bootstrap refits.
pub fn fit_rate(points: &[(f64, f64, f64)]) -> Result<RateFit> {
    let used = usable_levels(points)?;
    let xs: Vec<f64> = used.iter().map(|&i| points[i].0.ln()).collect();
    let ys: Vec<f64> = used.iter().map(|&i| points[i].1.abs().ln()).collect();
    let (rate, intercept) = ols(&xs, &ys);
    let fitted: Vec<f64> = xs.iter().map(|x| intercept + rate * x).collect();
    let resid: Vec<f64> = ys.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let slopes: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|b| {
            let mut rng = CounterRng::new(0, stream::BOOTSTRAP, b);
            let yb: Vec<f64> = fitted
                .iter()
                .map(|f| f + resid[(rng.uniform_open() * resid.len() as f64) as usize])
                .collect();
            ols(&xs, &yb).0
        })
        .collect();
    let (lo, hi) = percentile_interval(slopes);
    Ok(RateFit {
        rate,
        intercept,
        ci: (lo.min(rate), hi.max(rate)),
        used,
    })
}

#[derive(Debug, Clone)]
struct LadderChunk {
    level: Vec<Moments>,
    diff: Vec<Moments>,
    /// `f_l - g` with `g = 2 f_L - f_{L-1}`
    rich: Vec<Moments>,
    g: Moments,
}

impl LadderChunk {
    fn new(levels: usize) -> Self {
        Self {
            level: vec![Moments::default(); levels + 1],
            diff: vec![Moments::default(); levels],
            rich: vec![Moments::default(); levels + 1],
            g: Moments::default(),
        }
    }

    fn merge(&mut self, o: &LadderChunk) {
        for (a, b) in self.level.iter_mut().zip(&o.level) {
            a.merge(b);
        }
        for (a, b) in self.diff.iter_mut().zip(&o.diff) {
            a.merge(b);
        }
        for (a, b) in self.rich.iter_mut().zip(&o.rich) {
            a.merge(b);
        }
        self.g.merge(&o.g);
    }
}

/// Fills `values[l]` with `f(X_T)` on every level for one path of increments.
fn ladder_payoffs(
    payoff: &Payoff,
    model: &ModelSpec,
    spec: &LadderSpec,
    fine: &[f64],
    buf: &mut Vec<f64>,
    values: &mut [f64],
    path: u64,
) -> Result<()> {
    buf.clear();
    buf.extend_from_slice(fine);
    let mut len = buf.len();
    for level in (0..=spec.levels).rev() {
        if level < spec.levels {
            len = aggregate_pairs(buf, len);
        }
        let x = terminal_state(model, Scheme::Symmetrized, spec.dt(level), &buf[..len], path)?;
        values[level] = payoff.eval(x);
    }
    Ok(())
}

/// Signed weak errors `E f(X^{dt}_T) - E f(X_T)` over a dyadic ladder, all
/// levels driven by the same Brownian path, and the fitted rate.
pub fn weak_error_ladder(
    payoff: &Payoff,
    model: &ModelSpec,
    spec: &LadderSpec,
    cfg: &McConfig,
    reference: Reference,
) -> Result<ConvergenceReport> {
    cfg.validate()?;
    ensure_positive("T", spec.horizon)?;
    if spec.base_steps == 0 || spec.levels > 20 {
        return Err(invalid("levels", spec.levels as f64, "need N0 >= 1 and at most 20 levels"));
    }
    if matches!(reference, Reference::Richardson) && spec.levels == 0 {
        return Err(Error::ReferenceUnavailable(
            "richardson needs at least two levels".into(),
        ));
    }
    let t = spec.horizon;
    // Resolve deterministic references first so configuration errors surface early.
    let fixed_ref = match reference {
        Reference::Analytic => {
            let u = match payoff {
                Payoff::ExpNeg { u } => *u,
                _ => {
                    return Err(Error::ReferenceUnavailable(
                        "analytic reference needs the exp_neg payoff".into(),
                    ))
                }
            };
            let p = CirParams::from_model(model)?;
            Some(ReferenceValue {
                kind: reference.id(),
                value: cir_laplace(u, t, &p)?,
                stderr: 0.0,
            })
        }
        Reference::Pde { tolerance } => {
            let r = pde_reference(model, payoff, t, model.x0(), tolerance)?;
            Some(ReferenceValue {
                kind: reference.id(),
                value: r.value,
                stderr: 0.0,
            })
        }
        Reference::ExactSampler { factor } => {
            let grid = GridSpec::new(t, 1)?;
            let rcfg = McConfig {
                n_paths: cfg.n_paths * factor.max(1),
                ..*cfg
            };
            let e = estimate_expectation(payoff, Scheme::ExactCir, model, &grid, &rcfg)?;
            Some(ReferenceValue {
                kind: reference.id(),
                value: e.mean,
                stderr: e.stderr,
            })
        }
        Reference::Richardson => None,
    };

    let nl = spec.levels;
    let n_fine = spec.base_steps << nl;
    let sd = spec.dt(nl).sqrt();
    let chunks = par_chunks(cfg.n_paths, cfg.chunk_size, |lo, hi| {
        let mut acc = LadderChunk::new(nl);
        let mut fine = vec![0.0; n_fine];
        let mut buf = Vec::with_capacity(n_fine);
        let mut plus = vec![0.0; nl + 1];
        let mut minus = vec![0.0; nl + 1];
        for path in lo..hi {
            CounterRng::new(cfg.seed, stream::INCREMENTS, path).fill_normal(&mut fine, sd);
            ladder_payoffs(payoff, model, spec, &fine, &mut buf, &mut plus, path)?;
            if cfg.antithetic {
                fine.iter_mut().for_each(|v| *v = -*v);
                ladder_payoffs(payoff, model, spec, &fine, &mut buf, &mut minus, path)?;
                for (p, m) in plus.iter_mut().zip(&minus) {
                    *p = 0.5 * (*p + m);
                }
            }
            for l in 0..=nl {
                acc.level[l].push(plus[l]);
                if l < nl {
                    acc.diff[l].push(plus[l] - plus[l + 1]);
                }
            }
            if nl >= 1 {
                let g = 2.0 * plus[nl] - plus[nl - 1];
                acc.g.push(g);
                for l in 0..=nl {
                    acc.rich[l].push(plus[l] - g);
                }
            }
        }
        Ok(acc)
    })?;
    let mut total = LadderChunk::new(nl);
    for c in &chunks {
        total.merge(c);
    }

    let reference_value = fixed_ref.unwrap_or(ReferenceValue {
        kind: reference.id(),
        value: total.g.mean,
        stderr: total.g.stderr(),
    });
    let errors_from = |level_means: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..=nl).map(level_means).collect()
    };
    let point_errors = match reference {
        Reference::Richardson => errors_from(&|l| total.rich[l].mean),
        _ => errors_from(&|l| total.level[l].mean - reference_value.value),
    };
    let levels: Vec<LevelError> = (0..=nl)
        .map(|l| {
            let stderr = match reference {
                Reference::Richardson => total.rich[l].stderr(),
                _ => total.level[l].stderr().hypot(reference_value.stderr),
            };
            LevelError {
                level: l,
                dt: spec.dt(l),
                error: point_errors[l],
                stderr,
                n_paths: total.level[l].n,
            }
        })
        .collect();

    let points: Vec<(f64, f64, f64)> = levels.iter().map(|e| (e.dt, e.error, e.stderr)).collect();
    let fit = fit_rate(&points).map(|mut fit| {
        // Replace the residual interval with a chunk-level bootstrap, which
        // keeps the common-random-number correlation between levels.
        if chunks.len() > 1 {
            let xs: Vec<f64> = fit.used.iter().map(|&i| points[i].0.ln()).collect();
            let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES as usize);
            for b in 0..BOOTSTRAP_RESAMPLES {
                let mut rng = CounterRng::new(cfg.seed, stream::BOOTSTRAP, b);
                let mut sums = vec![0.0; nl + 1];
                let mut count = 0.0;
                for _ in 0..chunks.len() {
                    let c = &chunks[(rng.uniform_open() * chunks.len() as f64) as usize];
                    let n = c.level[0].n as f64;
                    for (l, s) in sums.iter_mut().enumerate() {
                        *s += n * match reference {
                            Reference::Richardson => c.rich[l].mean,
                            _ => c.level[l].mean,
                        };
                    }
                    count += n;
                }
                let ys: Vec<f64> = fit
                    .used
                    .iter()
                    .map(|&l| {
                        let m = sums[l] / count;
                        let e = match reference {
                            Reference::Richardson => m,
                            _ => m - reference_value.value,
                        };
                        e.abs().ln()
                    })
                    .collect();
                if ys.iter().all(|y| y.is_finite()) {
                    slopes.push(ols(&xs, &ys).0);
                }
            }
            if slopes.len() > 1 {
                let (lo, hi) = percentile_interval(slopes);
                fit.ci = (lo.min(fit.rate), hi.max(fit.rate));
            }
        }
        fit
    });

    Ok(ConvergenceReport {
        levels,
        fit,
        reference: reference_value,
        level_variance: total.level.iter().map(Moments::variance).collect(),
        diff_variance: total.diff.iter().map(Moments::variance).collect(),
    })
}

/// Symmetrized path from `x0` driven by `dw`; fills `states` (length N+1) and
/// `candidates` (length N).
fn sym_path(
    model: &ModelSpec,
    dt: f64,
    dw: &[f64],
    path: u64,
    states: &mut Vec<f64>,
    candidates: &mut Vec<f64>,
) -> Result<()> {
    states.clear();
    candidates.clear();
    let mut x = model.x0();
    states.push(x);
    for (k, &w) in dw.iter().enumerate() {
        let s = sym_euler_step(x, dt, w, model);
        if !(s.state <= OVERFLOW_LIMIT) {
            return Err(Error::StateOverflow {
                path,
                step: k,
                value: s.state,
            });
        }
        candidates.push(s.candidate);
        x = s.state;
        states.push(x);
    }
    Ok(())
}

/// Per-chunk path functional with vector output; merged in chunk order.
fn path_functional<F>(
    model: &ModelSpec,
    grid: &GridSpec,
    cfg: &McConfig,
    width: usize,
    f: F,
) -> Result<Vec<Moments>>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Sync,
{
    cfg.validate()?;
    let dt = grid.dt();
    let parts = par_chunks(cfg.n_paths, cfg.chunk_size, |lo, hi| {
        let mut acc = vec![Moments::default(); width];
        let mut dw = vec![0.0; grid.steps()];
        let (mut states, mut cands) = (Vec::new(), Vec::new());
        let mut out = vec![0.0; width];
        for path in lo..hi {
            CounterRng::new(cfg.seed, stream::INCREMENTS, path).fill_normal(&mut dw, dt.sqrt());
            sym_path(model, dt, &dw, path, &mut states, &mut cands)?;
            f(&states, &cands, &mut out);
            for (a, v) in acc.iter_mut().zip(&out) {
                a.push(*v);
            }
        }
        Ok(acc)
    })?;
    let mut total = vec![Moments::default(); width];
    for p in &parts {
        for (a, b) in total.iter_mut().zip(p) {
            a.merge(b);
        }
    }
    Ok(total)
}

fn one_step_frequency(
    model: &ModelSpec,
    x: f64,
    dt: f64,
    level: f64,
    cfg: &McConfig,
) -> Result<MCEstimate> {
    crate::error::ensure_nonnegative("x", x)?;
    ensure_positive("dt", dt)?;
    let mean = x + model.drift().value(x) * dt;
    let vol = model.diffusion(x) * dt.sqrt();
    let m = scalar_estimate(cfg, |path, _| {
        let g = CounterRng::new(cfg.seed, stream::ONE_STEP, path).normal();
        Ok(if mean + vol * g <= level { 1.0 } else { 0.0 })
    })?;
    Ok(MCEstimate::new(&m, cfg.seed, "symmetrized/one_step", model))
}

/// `P(Z_{t_{k+1}} <= 0 | X_{t_k} = x)` from one-step draws.
pub fn one_step_flip_frequency(model: &ModelSpec, x: f64, dt: f64, cfg: &McConfig) -> Result<MCEstimate> {
    one_step_frequency(model, x, dt, 0.0, cfg)
}

/// `P(Z_{t_{k+1}} <= x/2 | X_{t_k} = x)` from one-step draws.
pub fn one_step_half_drop_frequency(
    model: &ModelSpec,
    x: f64,
    dt: f64,
    cfg: &McConfig,
) -> Result<MCEstimate> {
    one_step_frequency(model, x, dt, 0.5 * x, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignFlipReport {
    /// Frequency of a non-positive candidate at step `k`.
    pub per_step: Vec<MCEstimate>,
    /// Probability that some step of the path flips sign.
    pub any_flip: MCEstimate,
    /// Mean number of flips per path.
    pub flips_per_path: MCEstimate,
}

pub fn estimate_sign_flip(model: &ModelSpec, grid: &GridSpec, cfg: &McConfig) -> Result<SignFlipReport> {
    if !model.is_square_root() {
        return Err(invalid("alpha", model.alpha(), "sign-flip study is for alpha = 1/2"));
    }
    let n = grid.steps();
    let m = path_functional(model, grid, cfg, n + 2, |_, cands, out| {
        let mut count = 0.0;
        for (k, &c) in cands.iter().enumerate() {
            let flip = if c <= 0.0 { 1.0 } else { 0.0 };
            out[k] = flip;
            count += flip;
        }
        out[n] = if count > 0.0 { 1.0 } else { 0.0 };
        out[n + 1] = count;
    })?;
    let est = |i: usize| MCEstimate::new(&m[i], cfg.seed, "symmetrized", model);
    Ok(SignFlipReport {
        per_step: (0..n).map(est).collect(),
        any_flip: est(n),
        flips_per_path: est(n + 1),
    })
}

/// `E exp(-X_{t_k} / (gamma sigma^2 dt))` for every `k = 0..=N`.
pub fn estimate_exp_neg_moments(
    model: &ModelSpec,
    grid: &GridSpec,
    gamma: f64,
    cfg: &McConfig,
) -> Result<Vec<MCEstimate>> {
    if !(gamma.is_finite() && gamma >= 1.0) {
        return Err(invalid("gamma", gamma, "must be >= 1"));
    }
    let scale = 1.0 / (gamma * model.sigma() * model.sigma() * grid.dt());
    let m = path_functional(model, grid, cfg, grid.steps() + 1, |states, _, out| {
        for (o, x) in out.iter_mut().zip(states) {
            *o = (-x * scale).exp();
        }
    })?;
    Ok(m.iter()
        .map(|mm| MCEstimate::new(mm, cfg.seed, "symmetrized", model))
        .collect())
}

/// `E sup_k X_{t_k}^{2p}`.
pub fn estimate_sup_moment(model: &ModelSpec, grid: &GridSpec, p: f64, cfg: &McConfig) -> Result<MCEstimate> {
    ensure_positive("p", p)?;
    let m = path_functional(model, grid, cfg, 1, |states, _, out| {
        out[0] = states.iter().fold(0.0f64, |a, &x| a.max(x)).powf(2.0 * p);
    })?;
    Ok(MCEstimate::new(&m[0], cfg.seed, "symmetrized", model))
}

fn require_stopping_setting(model: &ModelSpec, grid: &GridSpec) -> Result<()> {
    if model.alpha() <= 0.5 {
        return Err(invalid("alpha", model.alpha(), "stopping-time study needs alpha in (1/2, 1)"));
    }
    let limit = model.b0() * grid.dt() / std::f64::consts::SQRT_2;
    if model.x0() <= limit {
        return Err(invalid(
            "x0",
            model.x0(),
            format!("needs x0 > b(0) dt / sqrt(2) = {limit}"),
        ));
    }
    Ok(())
}

/// `E X_{t_{N ∧ tau}}^{-p}`, the negative moment of the path stopped at the
/// first grid index below `b(0) dt / 2`.
pub fn estimate_negative_moments(
    model: &ModelSpec,
    grid: &GridSpec,
    p: f64,
    cfg: &McConfig,
) -> Result<MCEstimate> {
    ensure_positive("p", p)?;
    require_stopping_setting(model, grid)?;
    let threshold = 0.5 * model.b0() * grid.dt();
    let m = path_functional(model, grid, cfg, 1, |states, _, out| {
        let stop = states.iter().position(|&x| x < threshold).unwrap_or(states.len() - 1);
        out[0] = states[stop].powf(-p);
    })?;
    Ok(MCEstimate::new(&m[0], cfg.seed, "symmetrized", model))
}

/// `P(tau <= T)` with `tau` the first grid time below `b(0) dt / 2`.
pub fn estimate_hitting(model: &ModelSpec, grid: &GridSpec, cfg: &McConfig) -> Result<MCEstimate> {
    require_stopping_setting(model, grid)?;
    let threshold = 0.5 * model.b0() * grid.dt();
    let m = path_functional(model, grid, cfg, 1, |states, _, out| {
        out[0] = if states.iter().any(|&x| x < threshold) { 1.0 } else { 0.0 };
    })?;
    Ok(MCEstimate::new(&m[0], cfg.seed, "symmetrized", model))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeEstimate {
    /// `(1/2eps) sum_k sigma^2 X_{t_k} |{s in step k : |Z_s| <= eps}|`
    pub occupation: MCEstimate,
    /// `sum_k` of the exact conditional one-step expectation at `X_{t_k}`.
    pub analytic: MCEstimate,
}

/// Expected local time at 0 of the scheme by two estimators on the same paths.
///
/// Within step `k` the coefficients stay frozen at `X_{t_k}`, and the Brownian
/// path is generated on `substeps` sub-intervals whose increments sum to the
/// step increment. The occupation time of `[-eps, eps]` is a Riemann sum over
/// the sub-grid points.
pub fn estimate_local_time(
    model: &ModelSpec,
    grid: &GridSpec,
    substeps: usize,
    eps: f64,
    cfg: &McConfig,
) -> Result<LocalTimeEstimate> {
    if !model.is_square_root() {
        return Err(invalid("alpha", model.alpha(), "local-time study is for alpha = 1/2"));
    }
    ensure_positive("eps", eps)?;
    if substeps < 50 {
        return Err(invalid("substeps", substeps as f64, "need at least 50 substeps"));
    }
    cfg.validate()?;
    let dt = grid.dt();
    let h = dt / substeps as f64;
    let sh = h.sqrt();
    let s2 = model.sigma() * model.sigma();
    let parts = par_chunks(cfg.n_paths, cfg.chunk_size, |lo, hi| {
        let (mut occ, mut ana) = (Moments::default(), Moments::default());
        for path in lo..hi {
            let mut rng = CounterRng::new(cfg.seed, stream::LOCAL_TIME, path);
            let mut x = model.x0();
            let (mut o, mut a) = (0.0, 0.0);
            for k in 0..grid.steps() {
                a += local_time_increment_tol(x, dt, model, 1e-8)?;
                let drift = model.drift().value(x);
                let vol = model.diffusion(x);
                let mut w = 0.0;
                let mut inside = 0usize;
                let mut z = x;
                for i in 1..=substeps {
                    w += sh * rng.normal();
                    z = x + drift * (i as f64 * h) + vol * w;
                    if z.abs() <= eps {
                        inside += 1;
                    }
                }
                o += s2 * x * inside as f64 * h / (2.0 * eps);
                x = z.abs();
                if !(x <= OVERFLOW_LIMIT) {
                    return Err(Error::StateOverflow {
                        path,
                        step: k,
                        value: x,
                    });
                }
            }
            occ.push(o);
            ana.push(a);
        }
        Ok((occ, ana))
    })?;
    let (mut occ, mut ana) = (Moments::default(), Moments::default());
    for (o, a) in &parts {
        occ.merge(o);
        ana.merge(a);
    }
    Ok(LocalTimeEstimate {
        occupation: MCEstimate::new(&occ, cfg.seed, "symmetrized/occupation", model),
        analytic: MCEstimate::new(&ana, cfg.seed, "symmetrized/analytic", model),
    })
}

/// `P(inf_{s<t} (y0 + mu s + W_s) <= y)` by simulation on `substeps` points.
///
/// Between sub-grid points the path is a Brownian bridge, so the crossing
/// probability of each sub-interval, `exp(-2 (a-y)(b-y) / h)`, is applied
/// exactly instead of monitoring only the grid points.
pub fn estimate_brownian_min_hit(
    y: f64,
    y0: f64,
    mu: f64,
    t: f64,
    substeps: usize,
    cfg: &McConfig,
) -> Result<Moments> {
    ensure_positive("t", t)?;
    if y > y0 {
        return Err(invalid("y", y, "level must be <= y0"));
    }
    if substeps == 0 {
        return Err(invalid("substeps", 0.0, "must be positive"));
    }
    let h = t / substeps as f64;
    let sh = h.sqrt();
    scalar_estimate(cfg, |path, _| {
        let mut rng = CounterRng::new(cfg.seed, stream::FINE_PATH, path);
        let mut w = y0 - y;
        let mut survive = 1.0;
        for _ in 0..substeps {
            let next = w + mu * h + sh * rng.normal();
            if next <= 0.0 {
                return Ok(1.0);
            }
            let e = 2.0 * w * next / h;
            if e < 40.0 {
                survive *= -(-e).exp_m1();
            }
            w = next;
        }
        Ok(1.0 - survive)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{sign_flip_bound, exp_neg_moment_bound};
    use crate::model::DriftSpec;

    fn std_model() -> ModelSpec {
        ModelSpec::cir(0.5, 1.0, 0.5, 1.0).unwrap()
    }

    #[test]
    fn payoff_registry() {
        assert_eq!(Payoff::named("exp_neg", &[1.0]).unwrap(), Payoff::ExpNeg { u: 1.0 });
        assert!(matches!(Payoff::named("call", &[]), Err(Error::UnknownPayoff(_))));
        assert!(Payoff::named("capped_poly", &[2.5, 1.0]).is_err());
        let p = Payoff::named("capped_poly", &[1.0, 10.0]).unwrap();
        assert!((p.eval(0.3) - 10.0 * (0.03f64).tanh()).abs() < 1e-15);
        assert_eq!(Payoff::named(p.id(), &p.params()).unwrap(), p);
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let (mut a, mut b) = (Moments::default(), Moments::default());
        xs[..333].iter().for_each(|&x| a.push(x));
        xs[333..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert_eq!(a.n, all.n);
        assert!((a.mean - all.mean).abs() < 1e-12);
        assert!((a.m2 - all.m2).abs() < 1e-9 * all.m2);
    }

    #[test]
    fn near_noiseless_matches_recursion() {
        // identity-like capped payoff; sigma tiny so the noise is negligible
        let m = ModelSpec::cir(0.5, 1.0, 1e-9, 1.0).unwrap();
        let g = GridSpec::new(1.0, 10).unwrap();
        let p = Payoff::CappedPoly { degree: 1, cap: 100.0 };
        let e = estimate_expectation(&p, Scheme::Symmetrized, &m, &g, &McConfig::new(100, 0)).unwrap();
        let mut x = 1.0f64;
        for _ in 0..10 {
            x += (0.5 - x) * 0.1;
        }
        assert!((e.mean - p.eval(x)).abs() < 1e-8);
    }

    #[test]
    fn exact_scheme_matches_laplace() {
        let m = std_model();
        let g = GridSpec::new(1.0, 1).unwrap();
        let e = estimate_expectation(
            &Payoff::ExpNeg { u: 1.0 },
            Scheme::ExactCir,
            &m,
            &g,
            &McConfig::new(200_000, 1),
        )
        .unwrap();
        let exact = cir_laplace(1.0, 1.0, &CirParams::from_model(&m).unwrap()).unwrap();
        assert!((e.mean - exact).abs() < 3.0 * e.stderr, "{} vs {exact}", e.mean);
    }

    #[test]
    fn stderr_scales_with_sample_size() {
        let m = std_model();
        let g = GridSpec::new(1.0, 10).unwrap();
        let p = Payoff::ExpNeg { u: 1.0 };
        let cfg = McConfig { antithetic: false, ..McConfig::new(20_000, 4) };
        let a = estimate_expectation(&p, Scheme::Symmetrized, &m, &g, &cfg).unwrap();
        let b = estimate_expectation(&p, Scheme::Symmetrized, &m, &g, &McConfig { n_paths: 80_000, ..cfg }).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let m = std_model();
        let g = GridSpec::new(1.0, 20).unwrap();
        let p = Payoff::Cosine { omega: 2.0 };
        let cfg = McConfig { chunk_size: 512, ..McConfig::new(5000, 9) };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| estimate_expectation(&p, Scheme::Symmetrized, &m, &g, &cfg).unwrap())
        };
        let one = run(1);
        for t in [2, 3, 8] {
            let other = run(t);
            assert_eq!(one.mean.to_bits(), other.mean.to_bits());
            assert_eq!(one.stderr.to_bits(), other.stderr.to_bits());
        }
    }

    #[test]
    fn fit_rate_on_exact_power_laws() {
        for rate in [1.0, 0.5, 2.0] {
            let pts: Vec<(f64, f64, f64)> = (0..5)
                .map(|i| {
                    let dt = 0.1 / f64::powi(2.0, i);
                    (dt, 3.0 * dt.powf(rate), 0.0)
                })
                .collect();
            let fit = fit_rate(&pts).unwrap();
            assert!((fit.rate - rate).abs() < 1e-12);
            assert!(fit.ci.0 <= fit.rate && fit.rate <= fit.ci.1);
        }
    }

    #[test]
    fn fit_rate_drops_noise_floor_levels() {
        let mut pts: Vec<(f64, f64, f64)> = (0..4)
            .map(|i| {
                let dt = 0.1 / f64::powi(2.0, i);
                (dt, 2.0 * dt, 1e-5)
            })
            .collect();
        pts.push((0.1 / 16.0, 1e-6, 1e-5));
        let fit = fit_rate(&pts).unwrap();
        assert_eq!(fit.used, vec![0, 1, 2, 3]);
        assert!((fit.rate - 1.0).abs() < 1e-12);
        pts.truncate(2);
        assert!(matches!(fit_rate(&pts), Err(Error::TooFewLevels { usable: 2, required: 3 })));
    }

    #[test]
    fn fit_rate_ci_contains_estimate_with_noise() {
        let pts: Vec<(f64, f64, f64)> = (0..5)
            .map(|i| {
                let dt = 0.1 / f64::powi(2.0, i);
                (dt, dt * (1.0 + 0.1 * ((i * 7 % 3) as f64 - 1.0)), 0.0)
            })
            .collect();
        let fit = fit_rate(&pts).unwrap();
        assert!(fit.ci.0 <= fit.rate && fit.rate <= fit.ci.1 && fit.ci.0 < fit.ci.1);
    }

    #[test]
    fn ladder_uses_common_random_numbers() {
        let m = std_model();
        let spec = LadderSpec { base_steps: 4, levels: 3, horizon: 1.0 };
        let cfg = McConfig { antithetic: false, ..McConfig::new(20_000, 2) };
        let r = weak_error_ladder(&Payoff::ExpNeg { u: 1.0 }, &m, &spec, &cfg, Reference::Analytic).unwrap();
        assert_eq!(r.levels.len(), 4);
        assert!(r.levels.windows(2).all(|w| w[0].dt > w[1].dt));
        for l in 0..3 {
            // independent sampling would give the sum of the two variances
            assert!(r.diff_variance[l] < 0.2 * (r.level_variance[l] + r.level_variance[l + 1]));
        }
        // the coarse level agrees with a direct estimate on the same seed
        let direct = estimate_expectation(
            &Payoff::ExpNeg { u: 1.0 },
            Scheme::Symmetrized,
            &m,
            &GridSpec::new(1.0, 32).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!((r.levels[3].error + r.reference.value - direct.mean).abs() < 1e-12);
    }

    #[test]
    fn richardson_and_unavailable_references() {
        let m = std_model();
        let spec = LadderSpec { base_steps: 2, levels: 3, horizon: 1.0 };
        let cfg = McConfig::new(4_000, 3);
        let r = weak_error_ladder(&Payoff::Cosine { omega: 1.0 }, &m, &spec, &cfg, Reference::Richardson).unwrap();
        let last = r.levels[3].error;
        let prev = r.levels[2].error;
        assert!((prev - 2.0 * last).abs() < 1e-12);
        assert!(matches!(
            weak_error_ladder(&Payoff::Cosine { omega: 1.0 }, &m, &spec, &cfg, Reference::Analytic),
            Err(Error::ReferenceUnavailable(_))
        ));
        let m75 = ModelSpec::new(DriftSpec::affine(0.4, 1.0).unwrap(), 0.25, 0.75, 1.0).unwrap();
        assert!(matches!(
            weak_error_ladder(&Payoff::ExpNeg { u: 1.0 }, &m75, &spec, &cfg, Reference::ExactSampler { factor: 2 }),
            Err(Error::ReferenceUnavailable(_))
        ));
    }

    #[test]
    fn sign_flips_and_bounds() {
        let m = std_model();
        let cfg = McConfig::new(100_000, 5);
        for (x, dt) in [(0.01, 0.05), (0.1, 0.05)] {
            let f = one_step_flip_frequency(&m, x, dt, &cfg).unwrap();
            let b = sign_flip_bound(x, dt, m.lipschitz(), m.sigma()).unwrap();
            assert!(f.mean <= b + 3.0 * f.stderr, "x={x}: {} > {b}", f.mean);
        }
        // large x0: no flips at all
        let g = GridSpec::new(1.0, 20).unwrap();
        let r = estimate_sign_flip(&m.with_x0(5.0).unwrap(), &g, &McConfig::new(20_000, 1)).unwrap();
        assert_eq!(r.any_flip.mean, 0.0);
        // flips become rarer as dt shrinks
        let small = m.with_x0(0.05).unwrap();
        let coarse = estimate_sign_flip(&small, &GridSpec::new(1.0, 10).unwrap(), &cfg).unwrap();
        let fine = estimate_sign_flip(&small, &GridSpec::new(1.0, 40).unwrap(), &cfg).unwrap();
        assert!(coarse.any_flip.mean > fine.any_flip.mean);
        assert!(coarse.flips_per_path.mean >= coarse.any_flip.mean);
    }

    #[test]
    fn exp_neg_moments_below_bound() {
        let m = std_model();
        let g = GridSpec::new(1.0, 20).unwrap();
        for gamma in [1.0, 2.0] {
            let est = estimate_exp_neg_moments(&m, &g, gamma, &McConfig::new(20_000, 6)).unwrap();
            let bound = exp_neg_moment_bound(gamma, g.dt(), &m, 1.0).unwrap().value;
            assert_eq!(est.len(), 21);
            for e in &est {
                assert!(e.mean <= bound + 3.0 * e.stderr);
            }
        }
    }

    #[test]
    fn sup_moment_stable_over_dt() {
        let m = std_model();
        let cfg = McConfig::new(20_000, 8);
        let vals: Vec<f64> = [10, 20, 40, 80]
            .iter()
            .map(|&n| estimate_sup_moment(&m, &GridSpec::new(1.0, n).unwrap(), 1.0, &cfg).unwrap().mean)
            .collect();
        let (lo, hi) = vals.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 1.2, "{vals:?}");
    }

    #[test]
    fn stopping_time_estimators() {
        let m = ModelSpec::new(DriftSpec::affine(0.4, 1.0).unwrap(), 0.25, 0.75, 1.0).unwrap();
        let g = GridSpec::new(1.0, 50).unwrap();
        let cfg = McConfig::new(20_000, 2);
        assert_eq!(estimate_hitting(&m, &g, &cfg).unwrap().mean, 0.0);
        let neg = estimate_negative_moments(&m, &g, 1.0, &cfg).unwrap();
        assert!(neg.mean.is_finite() && neg.mean > 0.0);
        // starting just above the threshold makes the stopping time observable
        let thr = 0.5 * 0.4 * g.dt();
        let stressed = ModelSpec::new(DriftSpec::affine(0.4, 1.0).unwrap(), 0.8, 0.75, 2.0 * thr).unwrap();
        assert!(estimate_hitting(&stressed, &g, &cfg).unwrap().mean > 0.0);
        assert!(estimate_hitting(&m.with_x0(thr).unwrap(), &g, &cfg).is_err());
        assert!(estimate_hitting(&std_model(), &g, &cfg).is_err());
    }

    #[test]
    fn local_time_far_from_zero_vanishes() {
        let m = std_model();
        let g = GridSpec::new(0.5, 10).unwrap();
        let r = estimate_local_time(&m, &g, 50, 1e-3, &McConfig::new(2_000, 1)).unwrap();
        assert_eq!(r.occupation.mean, 0.0);
        assert!(r.analytic.mean < 1e-6);
    }

    #[test]
    fn brownian_min_matches_closed_form_coarsely() {
        let cfg = McConfig::new(20_000, 3);
        let m = estimate_brownian_min_hit(0.0, 1.0, 0.3, 1.0, 100, &cfg).unwrap();
        let exact = crate::analytics::hitting_prob_brownian_drift(0.0, 1.0, 0.3, 1.0).unwrap();
        assert!((m.mean - exact).abs() < 3.0 * m.stderr() + 1e-3);
    }
}

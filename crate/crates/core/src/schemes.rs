//! Path generation: the symmetrized Euler step, the projection baseline, the
//! exact CIR transition and the dyadic Brownian ladder that couples step sizes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::analytics::cir_scale;
use crate::error::{ensure_nonnegative, ensure_positive, invalid, Error, Result};
use crate::model::ModelSpec;
use crate::rng::{stream, CounterRng};

/// States beyond this magnitude abort the path.
pub const OVERFLOW_LIMIT: f64 = 1e12;

/// Uniform time grid `t_k = k T / N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    horizon: f64,
    steps: usize,
}

impl GridSpec {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        ensure_positive("T", horizon)?;
        if steps == 0 {
            return Err(invalid("N", 0.0, "need at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_k`, with `t_N = T` exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    /// Largest grid point `<= t` (clamped to `[0, T]`).
    pub fn eta(&self, t: f64) -> f64 {
        if t >= self.horizon {
            return self.horizon;
        }
        if t <= 0.0 {
            return 0.0;
        }
        let mut k = (t / self.dt()).floor() as usize;
        // guard against rounding putting t_k just above t
        while k > 0 && self.time(k) > t {
            k -= 1;
        }
        self.time(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// `x + b(x) dt + sigma x^alpha dW`, before the absolute value.
    pub candidate: f64,
    pub state: f64,
}

/// One symmetrized Euler step `|x + b(x) dt + sigma x^alpha dW|`.
#[inline]
pub fn sym_euler_step(x: f64, dt: f64, dw: f64, model: &ModelSpec) -> StepOutcome {
    debug_assert!(x >= 0.0 && dt > 0.0);
    let candidate = x + model.drift().value(x) * dt + model.diffusion(x) * dw;
    StepOutcome {
        candidate,
        state: candidate.abs(),
    }
}

/// One Euler step with the diffusion evaluated at `max(x, 0)`; may go negative.
#[inline]
pub fn projection_euler_step(x: f64, dt: f64, dw: f64, model: &ModelSpec) -> f64 {
    debug_assert!(dt > 0.0);
    x + model.drift().value(x) * dt + model.diffusion(x.max(0.0)) * dw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Symmetrized,
    Projection,
    /// Exact CIR transitions; affine drift with `alpha = 1/2` only.
    ExactCir,
}

impl Scheme {
    pub fn id(&self) -> &'static str {
        match self {
            Scheme::Symmetrized => "symmetrized",
            Scheme::Projection => "projection",
            Scheme::ExactCir => "exact_cir",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetrized" => Ok(Scheme::Symmetrized),
            "projection" => Ok(Scheme::Projection),
            "exact_cir" => Ok(Scheme::ExactCir),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

/// One simulated trajectory of the symmetrized scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    /// `X_{t_k}`, `k = 0..=N`.
    pub states: Vec<f64>,
    /// Pre-reflection values `Z_{t_{k+1}}`, `k = 0..N`.
    pub candidates: Vec<f64>,
    /// Steps (0-based) whose candidate was `<= 0`.
    pub sign_flip_steps: Vec<usize>,
    /// First `k` with `X_{t_k} < b(0) dt / 2`.
    pub tau_index: Option<usize>,
    /// `sum_k E[L^0_{t_{k+1}} - L^0_{t_k} | X_{t_k}]`; only for `alpha = 1/2`.
    pub local_time_analytic: Option<f64>,
}

impl PathRecord {
    pub fn sign_flips(&self) -> usize {
        self.sign_flip_steps.len()
    }

    pub fn terminal(&self) -> f64 {
        *self.states.last().expect("a path has at least the initial state")
    }
}

/// First grid index with `X_{t_k} < b(0) dt / 2`.
pub fn tau_index(states: &[f64], b0: f64, dt: f64) -> Option<usize> {
    let threshold = 0.5 * b0 * dt;
    states.iter().position(|&x| x < threshold)
}

/// Runs the symmetrized scheme on the given increments (one per step).
pub fn simulate_path_with_increments(
    model: &ModelSpec,
    grid: &GridSpec,
    increments: &[f64],
    path: u64,
) -> Result<PathRecord> {
    if increments.len() != grid.steps() {
        return Err(invalid(
            "increments",
            increments.len() as f64,
            format!("need one increment per step ({})", grid.steps()),
        ));
    }
    let dt = grid.dt();
    let mut states = Vec::with_capacity(grid.steps() + 1);
    let mut candidates = Vec::with_capacity(grid.steps());
    let mut sign_flip_steps = Vec::new();
    let mut local_time = model.is_square_root().then_some(0.0);
    let mut x = model.x0();
    states.push(x);
    for (k, &dw) in increments.iter().enumerate() {
        if let Some(acc) = local_time.as_mut() {
            *acc += crate::analytics::local_time_increment(x, dt, model)?;
        }
        let step = sym_euler_step(x, dt, dw, model);
        if !(step.state <= OVERFLOW_LIMIT) {
            return Err(Error::StateOverflow {
                path,
                step: k,
                value: step.state,
            });
        }
        if step.candidate <= 0.0 {
            sign_flip_steps.push(k);
        }
        candidates.push(step.candidate);
        x = step.state;
        states.push(x);
    }
    let tau = tau_index(&states, model.b0(), dt);
    Ok(PathRecord {
        states,
        candidates,
        sign_flip_steps,
        tau_index: tau,
        local_time_analytic: local_time,
    })
}

/// Path `path` of the symmetrized scheme under `seed`; increments come from
/// stream [`stream::INCREMENTS`].
pub fn simulate_path(model: &ModelSpec, grid: &GridSpec, seed: u64, path: u64) -> Result<PathRecord> {
    let mut rng = CounterRng::new(seed, stream::INCREMENTS, path);
    let mut dw = vec![0.0; grid.steps()];
    rng.fill_normal(&mut dw, grid.dt().sqrt());
    simulate_path_with_increments(model, grid, &dw, path)
}

/// Terminal value of a scheme driven by `increments`, without recording the path.
#[inline]
pub fn terminal_state(
    model: &ModelSpec,
    scheme: Scheme,
    dt: f64,
    increments: &[f64],
    path: u64,
) -> Result<f64> {
    let mut x = model.x0();
    for (k, &dw) in increments.iter().enumerate() {
        x = match scheme {
            Scheme::Symmetrized => sym_euler_step(x, dt, dw, model).state,
            Scheme::Projection => projection_euler_step(x, dt, dw, model),
            Scheme::ExactCir => {
                return Err(invalid("scheme", 0.0, "exact_cir is not driven by increments"))
            }
        };
        if !(x.abs() <= OVERFLOW_LIMIT) {
            return Err(Error::StateOverflow {
                path,
                step: k,
                value: x,
            });
        }
    }
    Ok(x)
}

/// Exact transition law of `dr = (a - beta r) dt + sigma sqrt(r) dW` over a
/// fixed elapsed time.
///
/// `r_t = L(t) chi'^2_d(lambda)` with `d = 4a/sigma^2` and
/// `lambda = x e^{-beta t} / L(t)`. The noncentral chi-squared draw uses the
/// Poisson mixture `N ~ Poisson(lambda/2)`, `r = 2 L Gamma(d/2 + N, 1)`,
/// which is exact for every `d > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirTransition {
    scale: f64,
    decay: f64,
    half_dof: f64,
}

impl CirTransition {
    pub fn new(a: f64, beta: f64, sigma: f64, t: f64) -> Result<Self> {
        ensure_positive("a", a)?;
        ensure_positive("sigma", sigma)?;
        ensure_positive("t", t)?;
        if !beta.is_finite() {
            return Err(invalid("beta", beta, "must be finite"));
        }
        Ok(Self {
            scale: cir_scale(beta, sigma, t),
            decay: (-beta * t).exp(),
            half_dof: 2.0 * a / (sigma * sigma),
        })
    }

    pub fn from_model(model: &ModelSpec, t: f64) -> Result<Self> {
        match (model.drift().as_affine(), model.is_square_root()) {
            (Some((a, beta)), true) => Self::new(a, beta, model.sigma(), t),
            _ => Err(Error::ReferenceUnavailable(format!(
                "exact CIR sampling needs an affine drift with alpha = 1/2, got {}",
                model.id()
            ))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> f64 {
        let half_lambda = 0.5 * x * self.decay / self.scale;
        let n = if half_lambda > 0.0 {
            Poisson::new(half_lambda)
                .expect("finite positive Poisson mean")
                .sample(rng)
        } else {
            0.0
        };
        let g = Gamma::new(self.half_dof + n, 1.0)
            .expect("positive Gamma shape")
            .sample(rng);
        2.0 * self.scale * g
    }
}

/// One exact CIR transition from `x` over time `t`.
pub fn exact_cir_sample<R: Rng + ?Sized>(
    a: f64,
    beta: f64,
    sigma: f64,
    x: f64,
    t: f64,
    rng: &mut R,
) -> Result<f64> {
    ensure_nonnegative("x", x)?;
    Ok(CirTransition::new(a, beta, sigma, t)?.sample(x, rng))
}

/// Halves `buf[..len]` in place by pairwise sums `buf[i] = buf[2i] + buf[2i+1]`
/// and returns the new length. This is the only summation order used to
/// build coarse increments.
#[inline]
pub fn aggregate_pairs(buf: &mut [f64], len: usize) -> usize {
    debug_assert!(len % 2 == 0);
    let half = len / 2;
    for i in 0..half {
        buf[i] = buf[2 * i] + buf[2 * i + 1];
    }
    half
}

/// Brownian increments on the finest grid of `base_steps * 2^levels` steps.
/// Level `l` has `base_steps * 2^l` steps; its increments are obtained from
/// level `l + 1` by [`aggregate_pairs`], so every level sees the same path.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianLadder {
    base_steps: usize,
    levels: usize,
    horizon: f64,
    fine: Vec<f64>,
}

impl BrownianLadder {
    pub fn from_increments(
        base_steps: usize,
        levels: usize,
        horizon: f64,
        fine: Vec<f64>,
    ) -> Result<Self> {
        ensure_positive("T", horizon)?;
        if base_steps == 0 {
            return Err(invalid("N0", 0.0, "need at least one base step"));
        }
        if levels > 30 {
            return Err(invalid("levels", levels as f64, "at most 30 refinements"));
        }
        let n = base_steps << levels;
        if fine.len() != n {
            return Err(invalid(
                "increments",
                fine.len() as f64,
                format!("finest level needs {n} increments"),
            ));
        }
        Ok(Self {
            base_steps,
            levels,
            horizon,
            fine,
        })
    }

    /// Draws the finest increments for path `path` from stream [`stream::INCREMENTS`].
    pub fn draw(base_steps: usize, levels: usize, horizon: f64, seed: u64, path: u64) -> Result<Self> {
        ensure_positive("T", horizon)?;
        let n = base_steps << levels.min(30);
        let mut fine = vec![0.0; n];
        if n > 0 {
            let mut rng = CounterRng::new(seed, stream::INCREMENTS, path);
            rng.fill_normal(&mut fine, (horizon / n as f64).sqrt());
        }
        Self::from_increments(base_steps, levels, horizon, fine)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn base_steps(&self) -> usize {
        self.base_steps
    }

    pub fn steps(&self, level: usize) -> usize {
        self.base_steps << level
    }

    pub fn grid(&self, level: usize) -> Result<GridSpec> {
        self.check(level)?;
        GridSpec::new(self.horizon, self.steps(level))
    }

    fn check(&self, level: usize) -> Result<()> {
        if level > self.levels {
            Err(Error::LevelOutOfRange {
                level,
                max: self.levels,
            })
        } else {
            Ok(())
        }
    }

    /// Increments of level `level`.
    pub fn increments(&self, level: usize) -> Result<Vec<f64>> {
        self.check(level)?;
        let mut buf = self.fine.clone();
        let mut len = buf.len();
        for _ in level..self.levels {
            len = aggregate_pairs(&mut buf, len);
        }
        buf.truncate(len);
        Ok(buf)
    }
}

/// Free-function form of [`BrownianLadder::increments`].
pub fn ladder_increments(ladder: &BrownianLadder, level: usize) -> Result<Vec<f64>> {
    ladder.increments(level)
}

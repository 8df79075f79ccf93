//! WebAssembly bindings for the static page in `www/`.
//!
//! Every export returns a flat `Float64Array`; the layouts are documented on
//! the plain Rust functions, which are what the native tests call.

use wasm_bindgen::prelude::*;

use symsde::analytics::{cir_laplace, CirParams};
use symsde::montecarlo::{estimate_expectation, weak_error_ladder, LadderSpec, McConfig, Payoff, Reference};
use symsde::schemes::{simulate_path, Scheme};
use symsde::{DriftSpec, GridSpec, ModelSpec};

/// Largest `paths * (steps + 1)` the page may request from [`paths`].
pub const MAX_PATH_POINTS: usize = 2_000_000;

fn model(a: f64, beta: f64, sigma: f64, alpha: f64, x0: f64) -> Result<ModelSpec, String> {
    let drift = DriftSpec::affine(a, beta).map_err(|e| e.to_string())?;
    ModelSpec::new(drift, sigma, alpha, x0).map_err(|e| e.to_string())
}

/// `n_paths` trajectories of the symmetrized scheme, row-major:
/// `[x_{0,0}, .., x_{0,N}, x_{1,0}, ..]`.
#[allow(clippy::too_many_arguments)]
pub fn paths(
    a: f64,
    beta: f64,
    sigma: f64,
    alpha: f64,
    x0: f64,
    horizon: f64,
    steps: usize,
    n_paths: u32,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let m = model(a, beta, sigma, alpha, x0)?;
    let grid = GridSpec::new(horizon, steps).map_err(|e| e.to_string())?;
    if (n_paths as usize).saturating_mul(steps + 1) > MAX_PATH_POINTS {
        return Err(format!("at most {MAX_PATH_POINTS} points per request"));
    }
    let mut out = Vec::with_capacity(n_paths as usize * (steps + 1));
    for p in 0..n_paths as u64 {
        out.extend(simulate_path(&m, &grid, seed, p).map_err(|e| e.to_string())?.states);
    }
    Ok(out)
}

/// Weak error of `E exp(-X_T)` on `steps = base, 2 base, ..` against the
/// closed-form CIR value (alpha = 1/2) or a PDE solve (alpha > 1/2).
/// Layout: `[rate, dt_0, err_0, se_0, dt_1, err_1, se_1, ..]`; `rate` is NaN
/// when fewer than three levels clear the noise floor.
#[allow(clippy::too_many_arguments)]
pub fn weak_errors(
    a: f64,
    beta: f64,
    sigma: f64,
    alpha: f64,
    x0: f64,
    base_steps: usize,
    levels: usize,
    n_paths: u32,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let m = model(a, beta, sigma, alpha, x0)?;
    let reference = if m.is_square_root() {
        Reference::Analytic
    } else {
        Reference::Pde { tolerance: 1e-5 }
    };
    let spec = LadderSpec {
        base_steps,
        levels,
        horizon: 1.0,
    };
    let cfg = McConfig::new(n_paths as u64, seed);
    let rep = weak_error_ladder(&Payoff::ExpNeg { u: 1.0 }, &m, &spec, &cfg, reference)
        .map_err(|e| e.to_string())?;
    let mut out = vec![rep.fit.map(|f| f.rate).unwrap_or(f64::NAN)];
    for l in &rep.levels {
        out.extend([l.dt, l.error, l.stderr]);
    }
    Ok(out)
}

/// `t -> E exp(-u r_t)` for the CIR process on `points` times in `(0, t_max]`:
/// closed form next to an exact-sampler estimate.
/// Layout: `[t, closed_form, sampler_mean, sampler_stderr]` per point.
#[allow(clippy::too_many_arguments)]
pub fn laplace_curve(
    a: f64,
    beta: f64,
    sigma: f64,
    x0: f64,
    u: f64,
    t_max: f64,
    points: usize,
    n_paths: u32,
    seed: u64,
) -> Result<Vec<f64>, String> {
    let m = ModelSpec::cir(a, beta, sigma, x0).map_err(|e| e.to_string())?;
    let p = CirParams::from_model(&m).map_err(|e| e.to_string())?;
    let payoff = Payoff::ExpNeg { u };
    let cfg = McConfig::new(n_paths as u64, seed);
    let mut out = Vec::with_capacity(4 * points);
    for i in 1..=points {
        let t = t_max * i as f64 / points as f64;
        let exact = cir_laplace(u, t, &p).map_err(|e| e.to_string())?;
        let grid = GridSpec::new(t, 1).map_err(|e| e.to_string())?;
        let mc = estimate_expectation(&payoff, Scheme::ExactCir, &m, &grid, &cfg).map_err(|e| e.to_string())?;
        out.extend([t, exact, mc.mean, mc.stderr]);
    }
    Ok(out)
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = simulatePaths)]
#[allow(clippy::too_many_arguments)]
pub fn simulate_paths_js(
    a: f64,
    beta: f64,
    sigma: f64,
    alpha: f64,
    x0: f64,
    horizon: f64,
    steps: usize,
    n_paths: u32,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    js(paths(a, beta, sigma, alpha, x0, horizon, steps, n_paths, seed))
}

#[wasm_bindgen(js_name = weakErrors)]
#[allow(clippy::too_many_arguments)]
pub fn weak_errors_js(
    a: f64,
    beta: f64,
    sigma: f64,
    alpha: f64,
    x0: f64,
    base_steps: usize,
    levels: usize,
    n_paths: u32,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    js(weak_errors(a, beta, sigma, alpha, x0, base_steps, levels, n_paths, seed))
}

#[wasm_bindgen(js_name = laplaceCurve)]
#[allow(clippy::too_many_arguments)]
pub fn laplace_curve_js(
    a: f64,
    beta: f64,
    sigma: f64,
    x0: f64,
    u: f64,
    t_max: f64,
    points: usize,
    n_paths: u32,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    js(laplace_curve(a, beta, sigma, x0, u, t_max, points, n_paths, seed))
}

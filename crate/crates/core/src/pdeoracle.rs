//! Finite-difference solution of the Kolmogorov backward equation
//!
//! ```text
//! u_t + b(x) u_x + (sigma^2 / 2) x^{2 alpha} u_xx = 0,   u(T, .) = f
//! ```
//!
//! on `[0, x_max]`, so that `u(0, x) = E f(X^x_T)`.
//!
//! In time-to-maturity `tau = T - t` the equation reads `v_tau = A v` and is
//! stepped with the theta scheme. Interior rows use central differences,
//! switching the convection term to upwind where the cell Peclet number
//! `|b| h / (2 D)` exceeds 1, which keeps the fully implicit scheme monotone
//! near 0 where the diffusion degenerates. At `x = 0` the diffusion vanishes
//! and `b(0) > 0` points into the domain, so the row is the one-sided upwind
//! transport `v_tau = b(0) (v_1 - v_0) / h` and no boundary condition is
//! imposed. At `x_max` the solution is taken linear (`u_xx = 0`), eliminated
//! into the last interior row; where the drift at `x_max` is positive the
//! linear closure would feed information from outside the domain, and the
//! payoff value is held instead.

use crate::error::{ensure_positive, invalid, Error, Result};
use crate::model::ModelSpec;
use crate::montecarlo::Payoff;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeGrid {
    pub x_max: f64,
    pub nx: usize,
    pub nt: usize,
    pub theta: f64,
    /// Number of initial time steps replaced by two implicit half steps each.
    pub rannacher: usize,
}

impl PdeGrid {
    pub fn new(x_max: f64, nx: usize, nt: usize, theta: f64) -> Result<Self> {
        ensure_positive("x_max", x_max)?;
        if nx < 64 {
            return Err(invalid("nx", nx as f64, "need at least 64 space points"));
        }
        if nt < 64 {
            return Err(invalid("nt", nt as f64, "need at least 64 time steps"));
        }
        if !(0.5..=1.0).contains(&theta) {
            return Err(invalid("theta", theta, "must lie in [1/2, 1]"));
        }
        Ok(Self {
            x_max,
            nx,
            nt,
            theta,
            rannacher: 0,
        })
    }

    pub fn with_rannacher(mut self, steps: usize) -> Self {
        self.rannacher = steps;
        self
    }

    pub fn h(&self) -> f64 {
        self.x_max / (self.nx - 1) as f64
    }

    /// `12 max(x0, m)` with `m = b(0)/K` (the long-run mean of the affine
    /// model) or `b(0) T` when `K = 0`.
    pub fn default_x_max(model: &ModelSpec, horizon: f64) -> f64 {
        let k = model.lipschitz();
        let level = if k > 0.0 { model.b0() / k } else { model.b0() * horizon };
        12.0 * model.x0().max(level).max(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeSolution {
    pub x: Vec<f64>,
    /// `u(0, x_i)`
    pub u: Vec<f64>,
    pub grid: PdeGrid,
}

impl PdeSolution {
    /// Quadratic interpolation through the three nodes nearest to `x`.
    pub fn value_at(&self, x: f64) -> f64 {
        let h = self.grid.h();
        let n = self.x.len();
        let j0 = ((x / h).round() as isize - 1).clamp(0, n as isize - 3) as usize;
        let (x0, x1, x2) = (self.x[j0], self.x[j0 + 1], self.x[j0 + 2]);
        let (u0, u1, u2) = (self.u[j0], self.u[j0 + 1], self.u[j0 + 2]);
        u0 * (x - x1) * (x - x2) / ((x0 - x1) * (x0 - x2))
            + u1 * (x - x0) * (x - x2) / ((x1 - x0) * (x1 - x2))
            + u2 * (x - x0) * (x - x1) / ((x2 - x0) * (x2 - x1))
    }
}

/// Tridiagonal rows `l_i v_{i-1} + d_i v_i + u_i v_{i+1}` of the operator `A`.
struct Operator {
    l: Vec<f64>,
    d: Vec<f64>,
    u: Vec<f64>,
    /// Coefficient of the held value `v_{n-1}` in row `n-2` (0 with the linear closure).
    held: f64,
}

fn build_operator(model: &ModelSpec, grid: &PdeGrid) -> Operator {
    let n = grid.nx;
    let h = grid.h();
    let m = n - 1; // unknowns 0..m-1; node m = x_max is closed
    let (mut l, mut d, mut u) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let half_s2 = 0.5 * model.sigma() * model.sigma();
    let b0 = model.b0();
    u[0] = b0 / h;
    d[0] = -b0 / h;
    for i in 1..m {
        let x = i as f64 * h;
        let diff = half_s2 * x.powf(2.0 * model.alpha()) / (h * h);
        let b = model.drift().value(x);
        let (li, ui) = if b.abs() * h <= 2.0 * diff * h * h {
            (diff - b / (2.0 * h), diff + b / (2.0 * h))
        } else if b > 0.0 {
            (diff, diff + b / h)
        } else {
            (diff - b / h, diff)
        };
        l[i] = li;
        u[i] = ui;
        d[i] = -(li + ui);
    }
    let b_far = model.drift().value((m - 1) as f64 * h);
    let mut held = 0.0;
    if b_far <= 0.0 {
        // v_m = 2 v_{m-1} - v_{m-2}
        let last = m - 1;
        l[last] -= u[last];
        d[last] += 2.0 * u[last];
        u[last] = 0.0;
    } else {
        held = u[m - 1];
        u[m - 1] = 0.0;
    }
    Operator { l, d, u, held }
}

fn thomas(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    r: &mut [f64],
    scratch: &mut [f64],
    grid: &PdeGrid,
) -> Result<()> {
    let n = b.len();
    let fail = |row: usize, pivot: f64| Error::Tridiagonal {
        row,
        pivot,
        nx: grid.nx,
        nt: grid.nt,
    };
    let mut pivot = b[0];
    if !(pivot.abs() > 1e-300) {
        return Err(fail(0, pivot));
    }
    scratch[0] = c[0] / pivot;
    r[0] /= pivot;
    for i in 1..n {
        pivot = b[i] - a[i] * scratch[i - 1];
        if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
            return Err(fail(i, pivot));
        }
        scratch[i] = c[i] / pivot;
        r[i] = (r[i] - a[i] * r[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        r[i] -= scratch[i] * r[i + 1];
    }
    Ok(())
}

fn march<F: Fn(f64) -> f64>(
    model: &ModelSpec,
    terminal: F,
    horizon: f64,
    grid: &PdeGrid,
) -> Result<PdeSolution> {
    let n = grid.nx;
    let h = grid.h();
    let x: Vec<f64> = (0..n)
        .map(|i| if i + 1 == n { grid.x_max } else { i as f64 * h })
        .collect();
    let mut v: Vec<f64> = x.iter().map(|&xi| terminal(xi)).collect();
    let op = build_operator(model, grid);
    let m = n - 1;
    let held_value = v[m];
    let linear_far = op.held == 0.0;

    let mut a = vec![0.0; m];
    let mut b = vec![0.0; m];
    let mut c = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    let mut step = |v: &mut Vec<f64>, dtau: f64, theta: f64| -> Result<()> {
        for i in 0..m {
            let left = if i > 0 { v[i - 1] } else { 0.0 };
            let av = op.l[i] * left + op.d[i] * v[i] + op.u[i] * v[i + 1];
            rhs[i] = v[i] + (1.0 - theta) * dtau * av;
            a[i] = -theta * dtau * op.l[i];
            b[i] = 1.0 - theta * dtau * op.d[i];
            c[i] = -theta * dtau * op.u[i];
        }
        // the held far value enters both theta parts; zero under the linear closure
        rhs[m - 1] += dtau * op.held * held_value;
        thomas(&a, &b, &c, &mut rhs, &mut scratch, grid)?;
        v[..m].copy_from_slice(&rhs);
        v[m] = if linear_far {
            2.0 * v[m - 1] - v[m - 2]
        } else {
            held_value
        };
        Ok(())
    };

    let dtau = horizon / grid.nt as f64;
    for k in 0..grid.nt {
        if k < grid.rannacher {
            step(&mut v, 0.5 * dtau, 1.0)?;
            step(&mut v, 0.5 * dtau, 1.0)?;
        } else {
            step(&mut v, dtau, grid.theta)?;
        }
    }
    Ok(PdeSolution { x, u: v, grid: *grid })
}

/// `u(0, .) = E f(X^._T)` on the grid.
///
/// Fails with [`Error::TruncationTooSmall`] when the payoff still varies near
/// `x_max` by more than a negligible amount weighted by the probability of
/// ending there from `model.x0()`: the oscillation of `f` on
/// `[0.8 x_max, x_max]` times `E r(X_T)`, with `r` a ramp equal to 1 above
/// `0.8 x_max`, must stay below `1e-6 max|f|`.
pub fn solve_kolmogorov(
    model: &ModelSpec,
    payoff: &Payoff,
    horizon: f64,
    grid: &PdeGrid,
) -> Result<PdeSolution> {
    ensure_positive("T", horizon)?;
    let sol = march(model, |x| payoff.eval(x), horizon, grid)?;
    let lo = 0.8 * grid.x_max;
    let tail = sol.x.iter().filter(|&&x| x >= lo).map(|&x| payoff.eval(x));
    let (tmin, tmax) = tail.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let osc = tmax - tmin;
    if osc > 0.0 {
        let ramp_lo = 0.7 * grid.x_max;
        let ramp = |x: f64| ((x - ramp_lo) / (lo - ramp_lo)).clamp(0.0, 1.0);
        let implicit = PdeGrid {
            theta: 1.0,
            rannacher: 0,
            ..*grid
        };
        let mass = march(model, ramp, horizon, &implicit)?
            .value_at(model.x0().min(grid.x_max))
            .clamp(0.0, 1.0);
        let scale = sol.x.iter().map(|&x| payoff.eval(x).abs()).fold(0.0, f64::max).max(1e-300);
        let leak = osc * mass;
        let limit = 1e-6 * scale;
        if leak > limit {
            return Err(Error::TruncationTooSmall {
                x_max: grid.x_max,
                leak,
                limit,
            });
        }
    }
    Ok(sol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeReference {
    pub value: f64,
    /// `|u_k - u_{k-1}|` at the returned refinement.
    pub delta: f64,
    pub nx: usize,
    pub nt: usize,
    /// Successive differences, coarsest first.
    pub deltas: Vec<f64>,
}

/// Refines `(nx, nt)` from 256 by doubling, at most four times, until two
/// successive values of `u(0, x0)` differ by less than `tolerance`.
/// Crank–Nicolson with two Rannacher start-up steps.
pub fn pde_reference(
    model: &ModelSpec,
    payoff: &Payoff,
    horizon: f64,
    x0: f64,
    tolerance: f64,
) -> Result<PdeReference> {
    ensure_positive("tolerance", tolerance)?;
    let model = model.with_x0(x0)?;
    let x_max = PdeGrid::default_x_max(&model, horizon);
    let mut prev: Option<f64> = None;
    let mut deltas = Vec::new();
    for r in 0..=4 {
        let n = 256usize << r;
        let grid = PdeGrid::new(x_max, n, n, 0.5)?.with_rannacher(2);
        let value = solve_kolmogorov(&model, payoff, horizon, &grid)?.value_at(x0);
        if let Some(p) = prev {
            let delta = (value - p).abs();
            deltas.push(delta);
            if delta < tolerance {
                return Ok(PdeReference {
                    value,
                    delta,
                    nx: n,
                    nt: n,
                    deltas,
                });
            }
        }
        prev = Some(value);
    }
    Err(Error::NoConvergence {
        delta: *deltas.last().unwrap_or(&f64::INFINITY),
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{cir_laplace, CirParams};
    use crate::model::DriftSpec;

    fn std_model() -> ModelSpec {
        ModelSpec::cir(0.5, 1.0, 0.5, 1.0).unwrap()
    }

    fn exact(model: &ModelSpec, x: f64) -> f64 {
        cir_laplace(1.0, 1.0, &CirParams::from_model(&model.with_x0(x).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(PdeGrid::new(12.0, 63, 64, 1.0).is_err());
        assert!(PdeGrid::new(12.0, 64, 63, 1.0).is_err());
        assert!(PdeGrid::new(12.0, 64, 64, 0.4).is_err());
        assert!(PdeGrid::new(0.0, 64, 64, 1.0).is_err());
        assert_eq!(PdeGrid::default_x_max(&std_model(), 1.0), 12.0);
    }

    #[test]
    fn constant_payoff_is_preserved() {
        let g = PdeGrid::new(12.0, 128, 64, 1.0).unwrap();
        for payoff in [Payoff::ExpNeg { u: 0.0 }, Payoff::Cosine { omega: 0.0 }] {
            let s = solve_kolmogorov(&std_model(), &payoff, 1.0, &g).unwrap();
            assert!(s.u.iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
        let r = pde_reference(&std_model(), &Payoff::ExpNeg { u: 0.0 }, 1.0, 1.0, 1e-10).unwrap();
        assert_eq!(r.deltas.len(), 1);
        assert!((r.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transport_limit() {
        let a = 0.5;
        let m = ModelSpec::new(DriftSpec::affine(a, 0.0).unwrap(), 1e-8, 0.5, 1.0).unwrap();
        let g = PdeGrid::new(12.0, 4096, 1024, 1.0).unwrap();
        let f = Payoff::ExpNeg { u: 1.0 };
        let s = solve_kolmogorov(&m, &f, 1.0, &g).unwrap();
        for &x in &[0.0, 0.5, 1.0, 3.0, 6.0] {
            assert!((s.value_at(x) - f.eval(x + a)).abs() < 1e-3, "x={x}");
        }
    }

    #[test]
    fn cir_matches_laplace() {
        let m = std_model();
        let g = PdeGrid::new(12.0, 2048, 2048, 1.0).unwrap();
        let s = solve_kolmogorov(&m, &Payoff::ExpNeg { u: 1.0 }, 1.0, &g).unwrap();
        for &x in &[0.1, 0.5, 1.0, 2.0] {
            assert!((s.value_at(x) - exact(&m, x)).abs() < 1e-3, "x={x}");
        }
    }

    #[test]
    fn maximum_principle_and_total_variation() {
        let models = [
            std_model(),
            ModelSpec::new(DriftSpec::affine(0.4, 1.0).unwrap(), 0.25, 0.9, 1.0).unwrap(),
            ModelSpec::new(DriftSpec::affine_plus_cos(0.5, 1.0, 0.2).unwrap(), 0.6, 0.5, 1.0).unwrap(),
        ];
        let payoffs = [
            Payoff::ExpNeg { u: 1.0 },
            Payoff::Cosine { omega: 3.0 },
            Payoff::CappedPoly { degree: 2, cap: 1.0 },
        ];
        for m in &models {
            for f in &payoffs {
                let g = PdeGrid::new(12.0, 256, 128, 1.0).unwrap();
                let s = solve_kolmogorov(m, f, 1.0, &g).unwrap();
                let fv: Vec<f64> = s.x.iter().map(|&x| f.eval(x)).collect();
                let (fmin, fmax) = fv.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
                let tol = 1e-12 * fmax.abs().max(fmin.abs());
                assert!(s.u.iter().all(|&u| u >= fmin - tol && u <= fmax + tol), "{f}");
                let tv = |v: &[f64]| v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
                assert!(tv(&s.u) <= tv(&fv) + 1e-6 * fmax.abs().max(fmin.abs()), "{f}");
            }
        }
    }

    #[test]
    fn spatial_order_on_cir() {
        let m = std_model();
        let f = Payoff::ExpNeg { u: 1.0 };
        let target = exact(&m, 1.0);
        let errs: Vec<f64> = [128usize, 256, 512]
            .iter()
            .map(|&n| {
                let g = PdeGrid::new(12.0, n, 2048, 0.5).unwrap().with_rannacher(2);
                (solve_kolmogorov(&m, &f, 1.0, &g).unwrap().value_at(1.0) - target).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.5, "errors {errs:?}");
        }
    }

    #[test]
    fn reference_converges_for_cir_and_power_model() {
        let m = std_model();
        let r = pde_reference(&m, &Payoff::ExpNeg { u: 1.0 }, 1.0, 1.0, 1e-6).unwrap();
        assert!((r.value - exact(&m, 1.0)).abs() < 1e-5);
        let m9 = ModelSpec::new(DriftSpec::affine(0.4, 1.0).unwrap(), 0.25, 0.9, 1.0).unwrap();
        let r = pde_reference(&m9, &Payoff::ExpNeg { u: 1.0 }, 1.0, 1.0, 1e-9);
        let deltas = match r {
            Ok(r) => r.deltas,
            Err(Error::NoConvergence { .. }) => {
                // still check the refinement study below
                let mut d = Vec::new();
                let mut prev: Option<f64> = None;
                for k in 0..4 {
                    let n = 256usize << k;
                    let g = PdeGrid::new(12.0, n, n, 0.5).unwrap().with_rannacher(2);
                    let v = solve_kolmogorov(&m9, &Payoff::ExpNeg { u: 1.0 }, 1.0, &g).unwrap().value_at(1.0);
                    if let Some(p) = prev {
                        d.push((v - p).abs());
                    }
                    prev = Some(v);
                }
                d
            }
            Err(e) => panic!("{e}"),
        };
        for w in deltas.windows(2) {
            assert!(w[1] <= 0.5 * w[0], "deltas {deltas:?}");
        }
    }

    #[test]
    fn truncation_check_rejects_small_domain() {
        let m = std_model();
        let g = PdeGrid::new(1.5, 128, 64, 1.0).unwrap();
        assert!(matches!(
            solve_kolmogorov(&m, &Payoff::Cosine { omega: 2.0 }, 1.0, &g),
            Err(Error::TruncationTooSmall { .. })
        ));
    }
}

//! Deterministic formulas: CIR transition transform and inverse moments, the
//! mu-sequence behind the exponential-moment estimate, probability bounds for
//! sign changes and for drops below half the current state, the explicit
//! constants of the negative-moment and martingale estimates, the hitting law
//! of a drifted Brownian motion, and the expected local time at 0 gained by
//! the scheme over one step.
//!
//! Everything here is pure. `erfc` is the standard complementary error
//! function; the normalization `erfc(z) = sqrt(2/pi) ∫_{sqrt(2) z}^∞ e^{-y²/2} dy`
//! is the same function.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{ensure_nonnegative, ensure_positive, invalid, Error, Result};
use crate::model::ModelSpec;
use crate::quadrature::{integrate_pieces, QuadOptions};

/// Parameters of `dr = (a - b r) dt + sigma sqrt(r) dW`, `r_0 = x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirParams {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub x: f64,
}

impl CirParams {
    pub fn new(a: f64, b: f64, sigma: f64, x: f64) -> Result<Self> {
        ensure_positive("a", a)?;
        ensure_positive("sigma", sigma)?;
        if !b.is_finite() {
            return Err(invalid("b", b, "must be finite"));
        }
        ensure_nonnegative("x", x)?;
        Ok(Self { a, b, sigma, x })
    }

    /// CIR parameters of an affine square-root model.
    pub fn from_model(model: &ModelSpec) -> Result<Self> {
        match (model.drift().as_affine(), model.is_square_root()) {
            (Some((a, beta)), true) => Self::new(a, beta, model.sigma(), model.x0()),
            _ => Err(Error::ReferenceUnavailable(format!(
                "CIR closed forms need an affine drift with alpha = 1/2, got {}",
                model.id()
            ))),
        }
    }

    /// `L(t) = sigma^2 (1 - e^{-bt}) / (4b)`, with limit `sigma^2 t / 4` as `b -> 0`.
    pub fn scale(&self, t: f64) -> f64 {
        cir_scale(self.b, self.sigma, t)
    }

    /// `zeta(t, x) = x e^{-bt} / L(t)`.
    pub fn zeta(&self, t: f64) -> f64 {
        self.x * (-self.b * t).exp() / self.scale(t)
    }

    /// `4a / sigma^2`
    pub fn degrees_of_freedom(&self) -> f64 {
        4.0 * self.a / (self.sigma * self.sigma)
    }

    /// `2a / sigma^2 - 1`
    pub fn nu(&self) -> f64 {
        2.0 * self.a / (self.sigma * self.sigma) - 1.0
    }

    /// `E r_t = x e^{-bt} + a (1 - e^{-bt}) / b`
    pub fn mean(&self, t: f64) -> f64 {
        let decay = (-self.b * t).exp();
        self.x * decay + self.a * one_minus_exp_over(self.b, t)
    }
}

/// `(1 - e^{-bt}) / b`, continuous at `b = 0`.
fn one_minus_exp_over(b: f64, t: f64) -> f64 {
    let bt = b * t;
    if bt.abs() < 1e-8 {
        t * (1.0 - 0.5 * bt + bt * bt / 6.0)
    } else {
        -(-bt).exp_m1() / b
    }
}

pub fn cir_scale(b: f64, sigma: f64, t: f64) -> f64 {
    0.25 * sigma * sigma * one_minus_exp_over(b, t)
}

/// `E exp(-u r_t) = (2uL+1)^{-2a/sigma^2} exp(-u L zeta / (2uL+1))`.
pub fn cir_laplace(u: f64, t: f64, p: &CirParams) -> Result<f64> {
    ensure_nonnegative("u", u)?;
    ensure_positive("t", t)?;
    let l = p.scale(t);
    let ul = u * l;
    let power = 2.0 * p.a / (p.sigma * p.sigma);
    let noncentral = if p.x == 0.0 {
        0.0
    } else {
        ul * p.zeta(t) / (2.0 * ul + 1.0)
    };
    Ok((-power * (2.0 * ul).ln_1p() - noncentral).exp())
}

/// `E r_t^{-order}` via the finite theta-integral
///
/// ```text
/// (2L)^{-p} / Gamma(p) ∫_0^1 θ^{p-1} (1-θ)^{2a/σ² - p - 1} exp(-x e^{-bt} θ / (2L)) dθ
/// ```
///
/// obtained from `x^{-p} = Γ(p)^{-1} ∫ u^{p-1} e^{-ux} du` and the substitution
/// `θ = 2uL / (2uL + 1)`. Both endpoint singularities are removed: on
/// `[0, 1/2]` by `θ = w^{1/p}`, on `[1/2, 1]` by `1 - θ = v^{1/m}` with
/// `m = 2a/σ² - p`.
pub fn cir_inverse_moment(order: f64, t: f64, p: &CirParams) -> Result<f64> {
    ensure_positive("order", order)?;
    ensure_positive("t", t)?;
    let limit = 2.0 * p.a / (p.sigma * p.sigma);
    if order >= limit {
        return Err(Error::NotIntegrable { order, limit });
    }
    let m = limit - order;
    let l = p.scale(t);
    let c = p.x * (-p.b * t).exp() / (2.0 * l);
    let opts = QuadOptions {
        abs_tol: 0.0,
        rel_tol: 1e-11,
        max_intervals: 4000,
    };

    let left_end = 0.5f64.powf(order);
    let left = integrate_pieces(
        |w: f64| {
            let theta = w.powf(1.0 / order);
            (1.0 - theta).powf(m - 1.0) * (-c * theta).exp() / order
        },
        &[0.0, left_end],
        opts,
    )?;
    let right_end = 0.5f64.powf(m);
    let right = integrate_pieces(
        |v: f64| {
            let one_minus = v.powf(1.0 / m);
            let theta = 1.0 - one_minus;
            theta.powf(order - 1.0) * (-c * theta).exp() / m
        },
        &[0.0, right_end],
        opts,
    )?;
    let log_prefactor = -libm::lgamma(order) - order * (2.0 * l).ln();
    Ok(log_prefactor.exp() * (left.value + right.value))
}

/// `mu_0 = 1/(γσ²Δt)`, `mu_j = mu_{j-1} (1 - KΔt - (σ²/2) mu_{j-1} Δt)`.
///
/// `values` follow the recursion literally. For `K > 0` the sequence decays
/// geometrically and underflows `f64` after a few thousand terms, so it is
/// also carried in log form, which is what certifies positivity and strict
/// decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct MuSequence {
    pub gamma: f64,
    pub dt: f64,
    pub k: f64,
    pub sigma: f64,
    pub values: Vec<f64>,
    pub log_values: Vec<f64>,
}

impl MuSequence {
    fn half_s2_dt(&self) -> f64 {
        0.5 * self.sigma * self.sigma * self.dt
    }

    /// Lower bound obtained by induction, valid for `j >= 1`:
    /// `mu_1/(1+(σ²/2)Δt(j-1)mu_0) - KΔt(j-1)mu_0/(1+(σ²/2)Δt(j-1)mu_0)`.
    pub fn induction_lower_bound(&self, j: usize) -> f64 {
        assert!(j >= 1, "bound is stated for j >= 1");
        let mu0 = self.values[0];
        let mu1 = self.values[1];
        let jm1 = (j - 1) as f64;
        let denom = 1.0 + self.half_s2_dt() * jm1 * mu0;
        mu1 / denom - self.k * self.dt * jm1 * mu0 / denom
    }

    /// `(2γ-1) / (Δt γ σ² (2γ-1+j)) - 2K/σ²`, valid for every `j >= 0`.
    pub fn closed_lower_bound(&self, j: usize) -> f64 {
        let g = self.gamma;
        let s2 = self.sigma * self.sigma;
        (2.0 * g - 1.0) / (self.dt * g * s2 * (2.0 * g - 1.0 + j as f64)) - 2.0 * self.k / s2
    }

    /// `f_{(σ²/2) j Δt}(mu_0)` with `f_c(x) = x / (1 + c x)`.
    pub fn upper_bound(&self, j: usize) -> f64 {
        let mu0 = self.values[0];
        mu0 / (1.0 + self.half_s2_dt() * j as f64 * mu0)
    }
}

pub fn mu_sequence(gamma: f64, dt: f64, k: f64, sigma: f64, n: usize) -> Result<MuSequence> {
    if !(gamma.is_finite() && gamma >= 1.0) {
        return Err(invalid("gamma", gamma, "must be >= 1"));
    }
    ensure_positive("dt", dt)?;
    ensure_nonnegative("K", k)?;
    ensure_positive("sigma", sigma)?;
    if k > 0.0 && dt > 0.5 / k {
        return Err(invalid("dt", dt, format!("must satisfy dt <= 1/(2K) = {}", 0.5 / k)));
    }
    let half_s2_dt = 0.5 * sigma * sigma * dt;
    let mu0 = 1.0 / (gamma * sigma * sigma * dt);
    let mut values = Vec::with_capacity(n + 1);
    let mut log_values = Vec::with_capacity(n + 1);
    values.push(mu0);
    log_values.push(mu0.ln());
    let (mut mu, mut log_mu) = (mu0, mu0.ln());
    for _ in 0..n {
        let shrink = -k * dt - half_s2_dt * mu;
        log_mu += shrink.ln_1p();
        mu *= 1.0 + shrink;
        values.push(mu);
        log_values.push(log_mu);
    }
    Ok(MuSequence {
        gamma,
        dt,
        k,
        sigma,
        values,
        log_values,
    })
}

/// `P(Z ≤ 0 | X = x) ≤ (1/2) exp(-x (1-KΔt)² / (2σ²Δt))` for the square-root model.
pub fn sign_flip_bound(x: f64, dt: f64, k: f64, sigma: f64) -> Result<f64> {
    ensure_nonnegative("x", x)?;
    ensure_positive("dt", dt)?;
    ensure_nonnegative("K", k)?;
    ensure_positive("sigma", sigma)?;
    if k > 0.0 && dt > 0.5 / k {
        return Err(invalid("dt", dt, "must satisfy dt <= 1/(2K)"));
    }
    let shrink = 1.0 - k * dt;
    Ok(0.5 * (-x * shrink * shrink / (2.0 * sigma * sigma * dt)).exp())
}

/// `P(G ≤ beta) ≤ (1/2) exp(-beta²/2)` for standard normal `G` and `beta < 0`.
pub fn gaussian_tail_bound(beta: f64) -> Result<f64> {
    if !(beta.is_finite() && beta < 0.0) {
        return Err(invalid("beta", beta, "the tail bound needs beta < 0"));
    }
    Ok(0.5 * (-0.5 * beta * beta).exp())
}

/// Reference curve `C (dt/x0)^{b0/σ²}` for the probability of a sign change.
pub fn vncir_bound(dt: f64, x0: f64, b0: f64, sigma: f64, c: f64) -> Result<f64> {
    ensure_positive("dt", dt)?;
    ensure_positive("x0", x0)?;
    ensure_positive("b0", b0)?;
    ensure_positive("sigma", sigma)?;
    ensure_nonnegative("C", c)?;
    Ok(c * (dt / x0).powf(b0 / (sigma * sigma)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpNegMomentBound {
    pub constant: f64,
    pub exponent: f64,
    pub value: f64,
}

/// Bound on `sup_k E exp(-X_{t_k} / (γσ²Δt))` for the square-root model:
///
/// ```text
/// C (Δt/x0)^e,  e = (2b0/σ²)(1 - 1/(2γ)),
/// C = (b0 (2γ-1))^e exp((2/σ²)(b0 (KT - 1 + 1/(2γ)) + x0 K))
/// ```
pub fn exp_neg_moment_bound(
    gamma: f64,
    dt: f64,
    model: &ModelSpec,
    horizon: f64,
) -> Result<ExpNegMomentBound> {
    if !model.is_square_root() {
        return Err(invalid("alpha", model.alpha(), "bound is for alpha = 1/2"));
    }
    if !(gamma.is_finite() && gamma >= 1.0) {
        return Err(invalid("gamma", gamma, "must be >= 1"));
    }
    ensure_positive("dt", dt)?;
    ensure_positive("T", horizon)?;
    ensure_positive("x0", model.x0())?;
    let k = model.lipschitz();
    if k > 0.0 && dt > 0.5 / k {
        return Err(invalid("dt", dt, "must satisfy dt <= 1/(2K)"));
    }
    let b0 = model.b0();
    let s2 = model.sigma() * model.sigma();
    let x0 = model.x0();
    let exponent = 2.0 * b0 / s2 * (1.0 - 0.5 / gamma);
    let constant = (b0 * (2.0 * gamma - 1.0)).powf(exponent)
        * ((2.0 / s2) * (b0 * (k * horizon - 1.0 + 0.5 / gamma) + x0 * k)).exp();
    Ok(ExpNegMomentBound {
        constant,
        exponent,
        value: constant * (dt / x0).powf(exponent),
    })
}

/// Expected local time at 0 accumulated over one step from `X = x`:
///
/// ```text
/// σ ∫_0^Δt sqrt(x) / sqrt(2π s) exp(-(x + b(x) s)² / (2σ² x s)) ds
/// ```
///
/// Evaluated with `s = Δt w²`, which removes the `s^{-1/2}` factor; the
/// integrand tends to 0 as `s -> 0` and the first piece ends at `s = 1e-6 Δt`.
pub fn local_time_increment(x: f64, dt: f64, model: &ModelSpec) -> Result<f64> {
    local_time_increment_tol(x, dt, model, 1e-10)
}

pub(crate) fn local_time_increment_tol(
    x: f64,
    dt: f64,
    model: &ModelSpec,
    rel_tol: f64,
) -> Result<f64> {
    if !model.is_square_root() {
        return Err(invalid("alpha", model.alpha(), "local-time formula is for alpha = 1/2"));
    }
    ensure_nonnegative("x", x)?;
    ensure_positive("dt", dt)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    let sigma = model.sigma();
    // b(x) >= -K x, so the exponent is at least x(1-KΔt)²/(2σ²Δt); past ~745
    // every integrand value underflows.
    let shrink = 1.0 - model.lipschitz() * dt;
    if shrink > 0.0 && x * shrink * shrink / (2.0 * sigma * sigma * dt) > 745.0 {
        return Ok(0.0);
    }
    let b = model.drift().value(x);
    let denom = 2.0 * sigma * sigma * x * dt;
    let integrand = |w: f64| {
        let w2 = w * w;
        let num = x + b * dt * w2;
        (-(num * num) / (denom * w2)).exp()
    };
    let r = integrate_pieces(
        integrand,
        &[0.0, 1e-3, 1.0],
        QuadOptions {
            abs_tol: 0.0,
            rel_tol,
            max_intervals: 2000,
        },
    )?;
    Ok(sigma * x.sqrt() / (2.0 * PI).sqrt() * 2.0 * dt.sqrt() * r.value)
}

/// `e^{z²} erfc(z)` for `z >= 0` without overflow.
fn erfcx(z: f64) -> f64 {
    debug_assert!(z >= 0.0);
    if z < 25.0 {
        (z * z).exp() * libm::erfc(z)
    } else {
        let z2 = z * z;
        let inv = 1.0 / (2.0 * z2);
        (1.0 - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv))) / (z * PI.sqrt())
    }
}

/// `P(inf_{0<s<t} B^mu_s ≤ y)` for a Brownian motion with drift `mu` started at `y0 ≥ y`:
///
/// ```text
/// (1/2) erfc((y0-y)/sqrt(2t) + mu sqrt(t/2)) + (1/2) e^{2mu(y-y0)} erfc((y0-y)/sqrt(2t) - mu sqrt(t/2))
/// ```
pub fn hitting_prob_brownian_drift(y: f64, y0: f64, mu: f64, t: f64) -> Result<f64> {
    ensure_positive("t", t)?;
    if !(y.is_finite() && y0.is_finite() && mu.is_finite()) {
        return Err(invalid("y", y, "arguments must be finite"));
    }
    if y > y0 {
        return Err(invalid("y", y, format!("level must satisfy y <= y0 = {y0}")));
    }
    let d = (y0 - y) / (2.0 * t).sqrt();
    let m = mu * t.sqrt() / SQRT_2;
    let first = 0.5 * libm::erfc(d + m);
    let second = if d - m > 0.0 {
        // e^{2mu(y-y0)} erfc(d-m) = e^{-(d+m)^2} erfcx(d-m)
        0.5 * (-(d + m) * (d + m)).exp() * erfcx(d - m)
    } else {
        0.5 * (2.0 * mu * (y - y0)).exp() * libm::erfc(d - m)
    };
    Ok((first + second).clamp(0.0, 1.0))
}

fn ensure_strict_power(model: &ModelSpec) -> Result<()> {
    if model.alpha() > 0.5 {
        Ok(())
    } else {
        Err(invalid(
            "alpha",
            model.alpha(),
            "formula degenerates at alpha = 1/2; needs alpha in (1/2, 1)",
        ))
    }
}

/// Reversion speed of the CIR process bounding `X^{2(1-α)}` from below:
///
/// ```text
/// λ(a) = 2(1-α)K + ((2α-1)^{2α-1} (a + σ²(1-α)(2α-1)) / b0^{2(1-α)})^{1/(2α-1)}
/// ```
pub fn lambda_of_a(a: f64, model: &ModelSpec) -> Result<f64> {
    ensure_nonnegative("a", a)?;
    ensure_strict_power(model)?;
    let al = model.alpha();
    let e = 2.0 * al - 1.0;
    let s2 = model.sigma() * model.sigma();
    let inner = e.powf(e) * (a + s2 * (1.0 - al) * e) / model.b0().powf(2.0 * (1.0 - al));
    Ok(2.0 * (1.0 - al) * model.lipschitz() + inner.powf(1.0 / e))
}

/// Drift of the comparison process minus its affine minorant,
/// `β̄(z) - a + λ(a) z`, which [`lambda_of_a`] makes non-negative with minimum 0.
pub fn comparison_drift_gap(z: f64, a: f64, lambda: f64, model: &ModelSpec) -> f64 {
    let al = model.alpha();
    let s2 = model.sigma() * model.sigma();
    let beta_bar = 2.0 * (1.0 - al) * model.b0() * z.powf(-(2.0 * al - 1.0) / (2.0 * (1.0 - al)))
        - 2.0 * (1.0 - al) * model.lipschitz() * z
        - s2 * (1.0 - al) * (2.0 * al - 1.0);
    beta_bar - a + lambda * z
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplicitConstants {
    /// Maximum over `x > 0` of [`negative_moment_excess`].
    pub underline_c: f64,
    /// Maximum over `x > 0` of [`martingale_excess`].
    pub underline_lambda: f64,
}

/// ```text
/// C̲ = p(2α-1)(σ²/2) [(p + 2(1-α)) σ² / (2 b0)]^{(p + 2(1-α))/(2α-1)}
/// λ̲ = (α/2)(2α-1) [(1-α)^{3-2α} σ² / b0^{2(1-α)}]^{1/(2α-1)}
/// ```
pub fn explicit_constants(model: &ModelSpec, p: f64) -> Result<ExplicitConstants> {
    ensure_strict_power(model)?;
    ensure_positive("p", p)?;
    let al = model.alpha();
    let e = 2.0 * al - 1.0;
    let s2 = model.sigma() * model.sigma();
    let b0 = model.b0();
    let q = p + 2.0 * (1.0 - al);
    let underline_c = p * e * 0.5 * s2 * (q * s2 / (2.0 * b0)).powf(q / e);
    let underline_lambda =
        0.5 * al * e * ((1.0 - al).powf(3.0 - 2.0 * al) * s2 / b0.powf(2.0 * (1.0 - al))).powf(1.0 / e);
    Ok(ExplicitConstants {
        underline_c,
        underline_lambda,
    })
}

/// `p(p+1)(σ²/2) x^{-(p+2(1-α))} - p b0 x^{-(p+1)}`
pub fn negative_moment_excess(x: f64, model: &ModelSpec, p: f64) -> f64 {
    let al = model.alpha();
    let s2 = model.sigma() * model.sigma();
    p * (p + 1.0) * 0.5 * s2 * x.powf(-(p + 2.0 * (1.0 - al))) - p * model.b0() * x.powf(-(p + 1.0))
}

/// `-b0 α / x + σ² α (1-α) / (2 x^{2(1-α)})`
pub fn martingale_excess(x: f64, model: &ModelSpec) -> f64 {
    let al = model.alpha();
    let s2 = model.sigma() * model.sigma();
    -model.b0() * al / x + s2 * al * (1.0 - al) / (2.0 * x.powf(2.0 * (1.0 - al)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfDropBound {
    /// Bound on `P(Z ≤ x/2 | X = x)`.
    pub conditional: f64,
    /// `exp(-1/(32σ²Δt^α)) + exp(-b0/(4σ²Δt^{α-1/2}))`
    pub unconditional: f64,
}

/// Bounds on the probability that one step ends below half its starting point.
///
/// The conditional bound is
/// `exp(-x^{2(1-α)}(1-2KΔt)²/(8σ²Δt)) exp(-b0(1-2KΔt)/(2σ² x^{2α-1}))`.
pub fn moitiealpha_bound(x: f64, dt: f64, model: &ModelSpec) -> Result<HalfDropBound> {
    ensure_strict_power(model)?;
    ensure_nonnegative("x", x)?;
    ensure_positive("dt", dt)?;
    let k = model.lipschitz();
    let shrink = 1.0 - 2.0 * k * dt;
    if shrink <= 0.0 {
        return Err(invalid("dt", dt, "needs 1 - 2K dt > 0"));
    }
    let al = model.alpha();
    let s2 = model.sigma() * model.sigma();
    let b0 = model.b0();
    let conditional = if x == 0.0 {
        0.0
    } else {
        (-x.powf(2.0 * (1.0 - al)) * shrink * shrink / (8.0 * s2 * dt)).exp()
            * (-b0 * shrink / (2.0 * s2 * x.powf(2.0 * al - 1.0))).exp()
    };
    let unconditional = (-1.0 / (32.0 * s2 * dt.powf(al))).exp()
        + (-b0 / (4.0 * s2 * dt.powf(al - 0.5))).exp();
    Ok(HalfDropBound {
        conditional,
        unconditional,
    })
}

/// `ν² σ² / 8` with `ν = 2a/σ² - 1`: the largest multiplier of `∫ ds / r_s` for
/// which the exponential moment of the CIR process is bounded by
/// `C (1 + x^{-ν/2})` when `a ≥ σ²/2` and `b ≥ 0`. Surfaced as a formula only.
pub fn exponential_inverse_moment_rate(p: &CirParams) -> Result<f64> {
    if p.a < 0.5 * p.sigma * p.sigma || p.b < 0.0 {
        return Err(invalid("a", p.a, "needs a >= sigma^2/2 and b >= 0"));
    }
    let nu = p.nu();
    Ok(nu * nu * p.sigma * p.sigma / 8.0)
}

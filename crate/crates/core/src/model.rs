//! Model class `dX = b(X) dt + sigma |X|^alpha dW` and its hypotheses.
//!
//! Drifts come from a closed registry so that the Lipschitz constant `K` and
//! the derivative bounds are known constants. Every constructor rejects
//! `b(0) <= 0`, `sigma <= 0`, `alpha` outside `[1/2, 1)` and `x0 < 0`.

use std::fmt;

use crate::error::{ensure_nonnegative, ensure_positive, invalid, Error, Result};

/// Registered drift families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftKind {
    /// `b(x) = a - beta x`
    Affine { a: f64, beta: f64 },
    /// `b(x) = a - beta x + c cos(x)`
    AffinePlusCos { a: f64, beta: f64, c: f64 },
}

/// A validated drift with `b(0) > 0` and a declared Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftSpec {
    kind: DriftKind,
}

impl DriftSpec {
    pub const REGISTRY: [&'static str; 2] = ["affine", "affine_plus_cos"];

    pub fn affine(a: f64, beta: f64) -> Result<Self> {
        Self::from_kind(DriftKind::Affine { a, beta })
    }

    pub fn affine_plus_cos(a: f64, beta: f64, c: f64) -> Result<Self> {
        Self::from_kind(DriftKind::AffinePlusCos { a, beta, c })
    }

    /// Looks up a registry entry. Parameters are positional: `[a, beta]` for
    /// `affine`, `[a, beta, c]` for `affine_plus_cos`.
    pub fn named(id: &str, params: &[f64]) -> Result<Self> {
        let get = |i: usize, name: &'static str| {
            params
                .get(i)
                .copied()
                .ok_or_else(|| invalid(name, f64::NAN, format!("missing parameter for `{id}`")))
        };
        match id {
            "affine" => Self::affine(get(0, "a")?, get(1, "beta")?),
            "affine_plus_cos" => Self::affine_plus_cos(get(0, "a")?, get(1, "beta")?, get(2, "c")?),
            other => Err(Error::UnknownDrift(other.to_string())),
        }
    }

    pub fn from_kind(kind: DriftKind) -> Result<Self> {
        let params: &[(&'static str, f64)] = match &kind {
            DriftKind::Affine { a, beta } => &[("a", *a), ("beta", *beta)],
            DriftKind::AffinePlusCos { a, beta, c } => &[("a", *a), ("beta", *beta), ("c", *c)],
        };
        for &(name, v) in params {
            if !v.is_finite() {
                return Err(invalid(name, v, "must be finite"));
            }
        }
        let drift = Self { kind };
        let b0 = drift.b0();
        if b0 <= 0.0 {
            return Err(invalid("b(0)", b0, "drift must satisfy b(0) > 0"));
        }
        Ok(drift)
    }

    pub fn kind(&self) -> DriftKind {
        self.kind
    }

    pub fn id(&self) -> &'static str {
        match self.kind {
            DriftKind::Affine { .. } => "affine",
            DriftKind::AffinePlusCos { .. } => "affine_plus_cos",
        }
    }

    /// `(a, beta)` when the drift is exactly affine.
    pub fn as_affine(&self) -> Option<(f64, f64)> {
        match self.kind {
            DriftKind::Affine { a, beta } => Some((a, beta)),
            DriftKind::AffinePlusCos { .. } => None,
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self.kind {
            DriftKind::Affine { a, beta } => a - beta * x,
            DriftKind::AffinePlusCos { a, beta, c } => a - beta * x + c * x.cos(),
        }
    }

    /// `b^(order)(x)` for `order <= 4`.
    pub fn eval(&self, x: f64, order: u8) -> Result<f64> {
        let v = match (self.kind, order) {
            (_, 0) => self.value(x),
            (DriftKind::Affine { beta, .. }, 1) => -beta,
            (DriftKind::Affine { .. }, 2..=4) => 0.0,
            (DriftKind::AffinePlusCos { beta, c, .. }, 1) => -beta - c * x.sin(),
            (DriftKind::AffinePlusCos { c, .. }, 2) => -c * x.cos(),
            (DriftKind::AffinePlusCos { c, .. }, 3) => c * x.sin(),
            (DriftKind::AffinePlusCos { c, .. }, 4) => c * x.cos(),
            _ => {
                return Err(invalid(
                    "order",
                    f64::from(order),
                    "derivatives are available up to order 4",
                ))
            }
        };
        Ok(v)
    }

    pub fn b0(&self) -> f64 {
        self.value(0.0)
    }

    /// Declared Lipschitz constant `K`.
    pub fn lipschitz(&self) -> f64 {
        match self.kind {
            DriftKind::Affine { beta, .. } => beta.abs(),
            DriftKind::AffinePlusCos { beta, c, .. } => beta.abs() + c.abs(),
        }
    }

    /// `sup_x |b^(order)(x)|` for `1 <= order <= 4`.
    pub fn derivative_bound(&self, order: u8) -> Option<f64> {
        match (self.kind, order) {
            (_, 1) => Some(self.lipschitz()),
            (DriftKind::Affine { .. }, 2..=4) => Some(0.0),
            (DriftKind::AffinePlusCos { c, .. }, 2..=4) => Some(c.abs()),
            _ => None,
        }
    }
}

impl fmt::Display for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DriftKind::Affine { a, beta } => write!(f, "affine(a={a}, beta={beta})"),
            DriftKind::AffinePlusCos { a, beta, c } => {
                write!(f, "affine_plus_cos(a={a}, beta={beta}, c={c})")
            }
        }
    }
}

/// Free-function form of [`DriftSpec::eval`].
pub fn drift_eval(spec: &DriftSpec, x: f64, order: u8) -> Result<f64> {
    spec.eval(x, order)
}

/// Validated model parameters. Immutable after construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    drift: DriftSpec,
    sigma: f64,
    alpha: f64,
    x0: f64,
    nu: Option<f64>,
}

impl ModelSpec {
    pub fn new(drift: DriftSpec, sigma: f64, alpha: f64, x0: f64) -> Result<Self> {
        ensure_positive("sigma", sigma)?;
        if !(alpha.is_finite() && (0.5..1.0).contains(&alpha)) {
            return Err(invalid("alpha", alpha, "must lie in [1/2, 1)"));
        }
        ensure_nonnegative("x0", x0)?;
        let nu = (alpha == 0.5).then(|| 2.0 * drift.b0() / (sigma * sigma) - 1.0);
        Ok(Self {
            drift,
            sigma,
            alpha,
            x0,
            nu,
        })
    }

    /// The CIR model `dX = (a - beta X) dt + sigma sqrt(X) dW`.
    pub fn cir(a: f64, beta: f64, sigma: f64, x0: f64) -> Result<Self> {
        Self::new(DriftSpec::affine(a, beta)?, sigma, 0.5, x0)
    }

    /// Same drift, diffusion and exponent, started elsewhere.
    pub fn with_x0(&self, x0: f64) -> Result<Self> {
        Self::new(self.drift, self.sigma, self.alpha, x0)
    }

    pub fn drift(&self) -> &DriftSpec {
        &self.drift
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn b0(&self) -> f64 {
        self.drift.b0()
    }

    pub fn lipschitz(&self) -> f64 {
        self.drift.lipschitz()
    }

    /// `2 b(0) / sigma^2 - 1`, stored only for `alpha = 1/2`.
    pub fn nu(&self) -> Option<f64> {
        self.nu
    }

    pub fn is_square_root(&self) -> bool {
        self.alpha == 0.5
    }

    /// `sigma x^alpha` for `x >= 0`.
    #[inline]
    pub fn diffusion(&self, x: f64) -> f64 {
        if self.alpha == 0.5 {
            self.sigma * x.sqrt()
        } else {
            self.sigma * x.powf(self.alpha)
        }
    }

    pub fn id(&self) -> String {
        format!(
            "{} sigma={} alpha={} x0={}",
            self.drift, self.sigma, self.alpha, self.x0
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub holds: bool,
    pub detail: String,
}

impl Check {
    fn new(holds: bool, detail: impl Into<String>) -> Self {
        Self {
            holds,
            detail: detail.into(),
        }
    }
}

/// Which hypotheses hold for a model (and optionally a step size).
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub h0: Check,
    pub h1: Check,
    pub h2: Check,
    pub h3: Check,
    /// Needs a step size.
    pub h3prime: Option<Check>,
    /// `dt <= 1/(2K) ∧ x0` for alpha = 1/2, `dt <= 1/(4K)` for alpha > 1/2.
    pub step_constraint: Option<Check>,
}

impl HypothesisReport {
    pub fn rows(&self) -> Vec<(&'static str, &Check)> {
        let mut rows = vec![
            ("H0", &self.h0),
            ("H1", &self.h1),
            ("H2", &self.h2),
            ("H3", &self.h3),
        ];
        if let Some(c) = &self.h3prime {
            rows.push(("H3'", c));
        }
        if let Some(c) = &self.step_constraint {
            rows.push(("step", c));
        }
        rows
    }
}

pub fn validate_model(spec: &ModelSpec, dt: Option<f64>) -> HypothesisReport {
    let alpha = spec.alpha();
    let sigma = spec.sigma();
    let b0 = spec.b0();
    let k = spec.lipschitz();
    let drift = spec.drift();

    let h0 = Check::new(
        (0.5..1.0).contains(&alpha),
        format!("alpha = {alpha} in [1/2, 1)"),
    );
    let h1 = Check::new(
        b0 > 0.0,
        format!("b(0) = {b0} > 0, Lipschitz constant K = {k}"),
    );
    let bounds: Vec<String> = (1..=4)
        .filter_map(|o| drift.derivative_bound(o).map(|b| format!("|b^({o})| <= {b}")))
        .collect();
    let h2 = Check::new(
        true,
        format!("{} is C^4 with {}", drift.id(), bounds.join(", ")),
    );
    let sigma2 = sigma * sigma;
    let h3 = if alpha == 0.5 {
        Check::new(b0 > sigma2, format!("b(0) = {b0} > sigma^2 = {sigma2}"))
    } else {
        Check::new(false, format!("only defined for alpha = 1/2 (alpha = {alpha})"))
    };

    let (h3prime, step_constraint) = match dt {
        None => (None, None),
        Some(dt) => {
            let threshold = b0 * dt / std::f64::consts::SQRT_2;
            let h3p = Check::new(
                spec.x0() > threshold,
                format!("x0 = {} > b(0) dt / sqrt(2) = {threshold}", spec.x0()),
            );
            let step = if alpha == 0.5 {
                let limit = inv_or_inf(2.0 * k).min(spec.x0());
                Check::new(dt <= limit, format!("dt = {dt} <= 1/(2K) ∧ x0 = {limit}"))
            } else {
                let limit = inv_or_inf(4.0 * k);
                Check::new(dt <= limit, format!("dt = {dt} <= 1/(4K) = {limit}"))
            };
            (Some(h3p), Some(step))
        }
    };

    HypothesisReport {
        h0,
        h1,
        h2,
        h3,
        h3prime,
        step_constraint,
    }
}

fn inv_or_inf(x: f64) -> f64 {
    if x > 0.0 {
        1.0 / x
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(d: &DriftSpec, x: f64, order: u8) -> f64 {
        let h = 1e-5;
        (d.eval(x + h, order - 1).unwrap() - d.eval(x - h, order - 1).unwrap()) / (2.0 * h)
    }

    #[test]
    fn h3_examples() {
        let m = ModelSpec::cir(0.5, 1.0, 0.5, 1.0).unwrap();
        assert!(validate_model(&m, None).h3.holds);
        let m = ModelSpec::cir(0.2, 1.0, 0.5, 1.0).unwrap();
        assert!(!validate_model(&m, None).h3.holds);
    }

    #[test]
    fn h3prime_example() {
        let m = ModelSpec::new(DriftSpec::affine(0.4, 1.0).unwrap(), 0.25, 0.75, 1.0).unwrap();
        let r = validate_model(&m, Some(0.1));
        assert!(r.h3prime.unwrap().holds);
        assert!(!r.h3.holds);
    }

    #[test]
    fn step_constraints() {
        let m = ModelSpec::cir(0.5, 1.0, 0.5, 1.0).unwrap();
        assert!(validate_model(&m, Some(0.5)).step_constraint.unwrap().holds);
        assert!(!validate_model(&m, Some(0.6)).step_constraint.unwrap().holds);
        let m = m.with_x0(0.05).unwrap();
        assert!(!validate_model(&m, Some(0.1)).step_constraint.unwrap().holds);

        let m = ModelSpec::new(DriftSpec::affine(0.4, 1.0).unwrap(), 0.25, 0.9, 1.0).unwrap();
        assert!(validate_model(&m, Some(0.25)).step_constraint.unwrap().holds);
        assert!(!validate_model(&m, Some(0.3)).step_constraint.unwrap().holds);
    }

    #[test]
    fn construction_errors() {
        let d = DriftSpec::affine(0.5, 1.0).unwrap();
        assert!(ModelSpec::new(d, 0.0, 0.5, 1.0).is_err());
        assert!(ModelSpec::new(d, -1.0, 0.5, 1.0).is_err());
        assert!(ModelSpec::new(d, 0.5, 0.49, 1.0).is_err());
        assert!(ModelSpec::new(d, 0.5, 1.0, 1.0).is_err());
        assert!(ModelSpec::new(d, 0.5, 0.5, -0.1).is_err());
        assert!(DriftSpec::affine(0.0, 1.0).is_err());
        assert!(DriftSpec::affine_plus_cos(0.5, 1.0, -0.6).is_err());
        assert!(matches!(
            DriftSpec::named("quadratic", &[1.0]),
            Err(Error::UnknownDrift(_))
        ));
    }

    #[test]
    fn nu_stored_for_square_root_only() {
        let m = ModelSpec::cir(0.5, 1.0, 0.5, 1.0).unwrap();
        assert_eq!(m.nu(), Some(3.0));
        let m = ModelSpec::new(*m.drift(), 0.5, 0.75, 1.0).unwrap();
        assert_eq!(m.nu(), None);
    }

    #[test]
    fn drift_eval_examples() {
        let d = DriftSpec::affine(0.5, 1.0).unwrap();
        assert_eq!(drift_eval(&d, 2.0, 0).unwrap(), -1.5);
        assert_eq!(drift_eval(&d, 2.0, 1).unwrap(), -1.0);
        assert_eq!(drift_eval(&d, 2.0, 2).unwrap(), 0.0);
        assert!(drift_eval(&d, 2.0, 5).is_err());
        let c = DriftSpec::named("affine_plus_cos", &[1.0, 1.0, 0.1]).unwrap();
        assert_eq!(drift_eval(&c, 0.0, 1).unwrap(), -1.0);
        assert_eq!(c.b0(), 1.1);
    }

    #[test]
    fn named_derivatives_match_finite_differences() {
        let d = DriftSpec::affine_plus_cos(1.0, 0.7, 0.3).unwrap();
        for i in 0..200 {
            let x = -5.0 + 0.05 * i as f64;
            for order in 1..=4u8 {
                let exact = d.eval(x, order).unwrap();
                let fd = central_diff(&d, x, order);
                let scale = exact.abs().max(1.0);
                assert!(
                    (exact - fd).abs() <= 1e-6 * scale,
                    "order {order} at x={x}: {exact} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn declared_lipschitz_holds_on_grid() {
        let drifts = [
            DriftSpec::affine(0.5, 1.0).unwrap(),
            DriftSpec::affine(0.3, -0.4).unwrap(),
            DriftSpec::affine_plus_cos(1.0, 1.0, 0.1).unwrap(),
            DriftSpec::affine_plus_cos(0.2, 0.5, 0.9).unwrap(),
        ];
        let grid: Vec<f64> = (0..=400).map(|i| 0.25 * i as f64).collect();
        for d in &drifts {
            let k = d.lipschitz();
            for (i, &x) in grid.iter().enumerate() {
                for &y in &grid[i + 1..] {
                    let ratio = (d.value(x) - d.value(y)).abs() / (x - y).abs();
                    assert!(ratio <= k * (1.0 + 1e-12), "{d}: ratio {ratio} > K {k}");
                }
            }
        }
    }

    #[test]
    fn validate_is_pure() {
        let m = ModelSpec::cir(0.5, 1.0, 0.5, 1.0).unwrap();
        assert_eq!(validate_model(&m, Some(0.1)), validate_model(&m, Some(0.1)));
    }
}

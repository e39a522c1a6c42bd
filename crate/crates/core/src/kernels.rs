//! Localizing kernels: the scalar exchange kernel ρ and the vector DMI kernel ν.
//!
//! Kernels are immutable. Evaluation is pure, so one spec can be shared by
//! every worker. Values returned by [`KernelSpec::eval`] and
//! [`VectorKernelSpec::eval`] always carry the analytic normalization; in
//! [`Normalization::Quadrature`] mode the ξ-lattice rescales its cached node
//! values so that the lattice L¹ sum is exactly one.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cell::XiLattice;
use crate::error::{Error, Result};
use crate::expr::{Env, Expression};
use crate::quadrature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Closed-form constant (expression families are used as given).
    Analytic,
    /// Rescaled by the lattice L¹ sum when tabulated on a lattice.
    Quadrature,
}

/// Radial profile `p(|ξ|)`; shared by scalar families and the `g` of vector families.
#[derive(Debug, Clone, PartialEq)]
pub enum RadialProfile {
    /// `1_{|ξ| ≤ radius}`
    Indicator { radius: f64 },
    /// `|ξ|² 1_{|ξ| ≤ radius}`
    Quadratic { radius: f64 },
    /// `exp(-|ξ|²/σ²)`, optionally cut off at `cutoff`.
    Gaussian { sigma: f64, cutoff: Option<f64> },
    /// `1_{inner ≤ |ξ| ≤ outer}`
    Shell { inner: f64, outer: f64 },
    /// Expression in `r`, supported in `|ξ| ≤ support`.
    Expression { expr: Expression, support: f64 },
}

impl RadialProfile {
    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Input(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match self {
            RadialProfile::Indicator { radius } | RadialProfile::Quadratic { radius } => {
                positive("radius", *radius)
            }
            RadialProfile::Gaussian { sigma, cutoff } => {
                positive("sigma", *sigma)?;
                if let Some(c) = cutoff {
                    positive("cutoff radius", *c)?;
                }
                Ok(())
            }
            RadialProfile::Shell { inner, outer } => {
                if !(inner.is_finite() && *inner >= 0.0 && outer > inner && outer.is_finite()) {
                    return Err(Error::Input(format!(
                        "shell radii must satisfy 0 <= r1 < r2, got r1 = {inner}, r2 = {outer}"
                    )));
                }
                Ok(())
            }
            RadialProfile::Expression { support, .. } => positive("support radius", *support),
        }
    }

    pub fn eval(&self, r: f64) -> Result<f64> {
        Ok(match self {
            RadialProfile::Indicator { radius } => f64::from(u8::from(r <= *radius)),
            RadialProfile::Quadratic { radius } => {
                if r <= *radius {
                    r * r
                } else {
                    0.0
                }
            }
            RadialProfile::Gaussian { sigma, cutoff } => {
                if cutoff.is_some_and(|c| r > c) {
                    0.0
                } else {
                    (-(r * r) / (sigma * sigma)).exp()
                }
            }
            RadialProfile::Shell { inner, outer } => f64::from(u8::from(r >= *inner && r <= *outer)),
            RadialProfile::Expression { expr, support } => {
                if r > *support {
                    0.0
                } else {
                    expr.eval(&Env::new().with_r(r))?
                }
            }
        })
    }

    pub fn support(&self) -> Option<f64> {
        match self {
            RadialProfile::Indicator { radius } | RadialProfile::Quadratic { radius } => Some(*radius),
            RadialProfile::Gaussian { cutoff, .. } => *cutoff,
            RadialProfile::Shell { outer, .. } => Some(*outer),
            RadialProfile::Expression { support, .. } => Some(*support),
        }
    }

    /// Breakpoints for piecewise-smooth radial integration.
    fn breakpoints(&self) -> Vec<f64> {
        match self {
            RadialProfile::Shell { inner, outer } => vec![0.0, *inner, *outer],
            RadialProfile::Gaussian { sigma, cutoff } => vec![0.0, cutoff.unwrap_or(40.0 * sigma)],
            _ => vec![0.0, self.support().unwrap_or(0.0)],
        }
    }

    /// `∫_{ℝ³} |p(|ξ|)| dξ`, closed form where available.
    pub fn mass(&self) -> Result<f64> {
        Ok(match self {
            RadialProfile::Indicator { radius } => 4.0 * PI / 3.0 * radius.powi(3),
            RadialProfile::Quadratic { radius } => 4.0 * PI / 5.0 * radius.powi(5),
            RadialProfile::Gaussian { sigma, cutoff } => gaussian_ball_mass(*sigma, *cutoff),
            RadialProfile::Shell { inner, outer } => 4.0 * PI / 3.0 * (outer.powi(3) - inner.powi(3)),
            RadialProfile::Expression { .. } => self.radial_abs_integral(0.0, f64::INFINITY, 1.0)?,
        })
    }

    /// `4π ∫_{lo}^{hi} |p(r/λ)| r² dr` by composite Gauss–Legendre.
    fn radial_abs_integral(&self, lo: f64, hi: f64, lambda: f64) -> Result<f64> {
        let bps: Vec<f64> = self.breakpoints().into_iter().map(|b| b * lambda).collect();
        let mut total = 0.0;
        let mut err = None;
        for w in bps.windows(2) {
            let a = w[0].max(lo);
            let b = w[1].min(hi);
            if b > a {
                total += quadrature::integrate(a, b, 64, |r| match self.eval(r / lambda) {
                    Ok(v) => v.abs() * r * r,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                });
            }
        }
        if let Some(e) = err {
            return Err(e);
        }
        Ok(4.0 * PI * total)
    }
}

/// Mass of `exp(-|ξ|²/σ²)` over the ball of radius `cutoff` (all of ℝ³ if `None`).
fn gaussian_ball_mass(sigma: f64, cutoff: Option<f64>) -> f64 {
    let full = PI.powf(1.5) * sigma.powi(3);
    match cutoff {
        None => full,
        Some(r) => {
            full * libm::erf(r / sigma) - 2.0 * PI * sigma * sigma * r * (-(r * r) / (sigma * sigma)).exp()
        }
    }
}

fn check_xi(xi: [f64; 3]) -> Result<()> {
    if xi.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input(format!("xi must be finite, got {xi:?}")))
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScalarFamily {
    Radial(RadialProfile),
    /// Expression in `xi1..xi3, r`, supported in `|ξ| ≤ support`.
    Expression { expr: Expression, support: f64 },
}

/// Scalar kernel ρ.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    family: ScalarFamily,
    normalization: Normalization,
    coercivity_radius: Option<f64>,
    scale: f64,
    constant: f64,
}

impl KernelSpec {
    pub fn new(family: ScalarFamily, normalization: Normalization) -> Result<Self> {
        let constant = match &family {
            ScalarFamily::Radial(p) => {
                p.validate()?;
                1.0 / p.mass()?
            }
            ScalarFamily::Expression { support, .. } => {
                if !(support.is_finite() && *support > 0.0) {
                    return Err(Error::Input(format!("support radius must be positive, got {support}")));
                }
                1.0
            }
        };
        Ok(Self {
            family,
            normalization,
            coercivity_radius: None,
            scale: 1.0,
            constant,
        })
    }

    /// `c |ξ|² 1_{B_r}`.
    pub fn bump_quadratic(radius: f64) -> Result<Self> {
        Self::new(ScalarFamily::Radial(RadialProfile::Quadratic { radius }), Normalization::Analytic)
    }

    /// `c exp(-|ξ|²/σ²) 1_{B_R}`; `radius = None` leaves the Gaussian untruncated.
    pub fn truncated_gaussian(sigma: f64, radius: Option<f64>) -> Result<Self> {
        Self::new(
            ScalarFamily::Radial(RadialProfile::Gaussian { sigma, cutoff: radius }),
            Normalization::Analytic,
        )
    }

    /// `c 1_{r1 ≤ |ξ| ≤ r2}`.
    pub fn indicator_shell(r1: f64, r2: f64) -> Result<Self> {
        Self::new(
            ScalarFamily::Radial(RadialProfile::Shell { inner: r1, outer: r2 }),
            Normalization::Analytic,
        )
    }

    pub fn expression(expr: Expression, support: f64) -> Result<Self> {
        Self::new(ScalarFamily::Expression { expr, support }, Normalization::Quadrature)
    }

    pub fn with_normalization(mut self, mode: Normalization) -> Self {
        self.normalization = mode;
        self
    }

    pub fn with_coercivity_radius(mut self, r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Input(format!("coercivity radius must be positive, got {r}")));
        }
        self.coercivity_radius = Some(r);
        Ok(self)
    }

    pub fn family(&self) -> &ScalarFamily {
        &self.family
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_radial(&self) -> bool {
        matches!(self.family, ScalarFamily::Radial(_))
    }

    /// Evaluates ρ(ξ); zero outside the support.
    pub fn eval(&self, xi: [f64; 3]) -> Result<f64> {
        check_xi(xi)?;
        let inv = 1.0 / self.scale;
        let y = [xi[0] * inv, xi[1] * inv, xi[2] * inv];
        let base = match &self.family {
            ScalarFamily::Radial(p) => p.eval(norm3(y))?,
            ScalarFamily::Expression { expr, support } => {
                if norm3(y) > *support {
                    0.0
                } else {
                    expr.eval(&Env::new().with_xi(y))?
                }
            }
        };
        Ok(self.constant * inv.powi(3) * base)
    }

    /// Support radius after λ-scaling; `None` for unbounded families.
    pub fn support_radius(&self) -> Option<f64> {
        let base = match &self.family {
            ScalarFamily::Radial(p) => p.support(),
            ScalarFamily::Expression { support, .. } => Some(*support),
        };
        base.map(|r| r * self.scale)
    }

    /// Radius `r` over which `essinf ρ/|ξ|²` is checked.
    pub fn coercivity_radius(&self) -> f64 {
        if let Some(r) = self.coercivity_radius {
            return r * self.scale;
        }
        let base = match &self.family {
            ScalarFamily::Radial(RadialProfile::Gaussian { sigma, .. }) => *sigma,
            ScalarFamily::Radial(p) => p.support().unwrap_or(1.0),
            ScalarFamily::Expression { support, .. } => *support,
        };
        base * self.scale
    }

    /// `ρ_λ(ξ) = λ^{-3} ρ(ξ/λ)`.
    pub fn scale_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Input(format!("lambda must be positive, got {lambda}")));
        }
        let mut out = self.clone();
        out.scale *= lambda;
        Ok(out)
    }

    /// Continuum `‖ρ‖_{L¹}` by reference quadrature on the evaluated kernel.
    pub fn l1_quadrature(&self) -> Result<f64> {
        self.abs_mass_between(0.0, f64::INFINITY)
    }

    /// `∫_{|ξ| > radius} |ρ|`, by reference quadrature.
    pub fn tail_mass(&self, radius: f64) -> Result<f64> {
        self.abs_mass_between(radius, f64::INFINITY)
    }

    fn abs_mass_between(&self, lo: f64, hi: f64) -> Result<f64> {
        match &self.family {
            ScalarFamily::Radial(p) => {
                let m = p.radial_abs_integral(lo, hi, self.scale)?;
                Ok(self.constant * self.scale.powi(-3) * m)
            }
            ScalarFamily::Expression { support, .. } => {
                let top = (support * self.scale).min(hi);
                if top <= lo {
                    return Ok(0.0);
                }
                let mut err = None;
                let v = quadrature::shell_integral(lo, top, 16, |xi| match self.eval(xi) {
                    Ok(v) => v.abs(),
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                });
                err.map_or(Ok(v), Err)
            }
        }
    }

    /// Radius enclosing all but `tail_tol` of the L¹ mass.
    pub fn mass_radius(&self, tail_tol: f64) -> Result<f64> {
        if let Some(r) = self.support_radius() {
            return Ok(r);
        }
        enclosing_radius(|r| self.tail_mass(r), self.l1_quadrature()?, tail_tol, self.scale)
    }
}

fn enclosing_radius<F: Fn(f64) -> Result<f64>>(tail: F, total: f64, tol: f64, scale: f64) -> Result<f64> {
    let mut lo = 0.0;
    let mut hi = scale;
    while tail(hi)? > tol * total {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 * scale {
            return Err(Error::Input("kernel tail does not decay".into()));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if tail(mid)? > tol * total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, PartialEq)]
pub enum VectorFamily {
    /// `ν(ξ) = (ξ/|ξ|) g(|ξ|)`
    Axial(RadialProfile),
    /// `ν(ξ) = e g(|ξ|)` with unit `e`.
    FixedDirection { direction: [f64; 3], profile: RadialProfile },
    /// Three component expressions in `xi1..xi3, r`.
    Expression { components: Box<[Expression; 3]>, support: f64 },
}

/// Vector kernel ν.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorKernelSpec {
    family: VectorFamily,
    normalization: Normalization,
    scale: f64,
    constant: f64,
}

impl VectorKernelSpec {
    pub fn new(family: VectorFamily, normalization: Normalization) -> Result<Self> {
        let (family, constant) = match family {
            VectorFamily::Axial(p) => {
                p.validate()?;
                let c = 1.0 / p.mass()?;
                (VectorFamily::Axial(p), c)
            }
            VectorFamily::FixedDirection { direction, profile } => {
                profile.validate()?;
                let len = norm3(direction);
                if !(len.is_finite() && len > 1e-12) {
                    return Err(Error::Input(format!("direction must be nonzero, got {direction:?}")));
                }
                let e = [direction[0] / len, direction[1] / len, direction[2] / len];
                let c = 1.0 / profile.mass()?;
                (VectorFamily::FixedDirection { direction: e, profile }, c)
            }
            VectorFamily::Expression { components, support } => {
                if !(support.is_finite() && support > 0.0) {
                    return Err(Error::Input(format!("support radius must be positive, got {support}")));
                }
                (VectorFamily::Expression { components, support }, 1.0)
            }
        };
        Ok(Self {
            family,
            normalization,
            scale: 1.0,
            constant,
        })
    }

    pub fn axial(profile: RadialProfile) -> Result<Self> {
        Self::new(VectorFamily::Axial(profile), Normalization::Analytic)
    }

    pub fn fixed_direction(direction: [f64; 3], profile: RadialProfile) -> Result<Self> {
        Self::new(VectorFamily::FixedDirection { direction, profile }, Normalization::Analytic)
    }

    pub fn expression(components: [Expression; 3], support: f64) -> Result<Self> {
        Self::new(
            VectorFamily::Expression {
                components: Box::new(components),
                support,
            },
            Normalization::Quadrature,
        )
    }

    pub fn with_normalization(mut self, mode: Normalization) -> Self {
        self.normalization = mode;
        self
    }

    pub fn family(&self) -> &VectorFamily {
        &self.family
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Evaluates ν(ξ). The axial family returns 0 at ξ = 0.
    pub fn eval(&self, xi: [f64; 3]) -> Result<[f64; 3]> {
        check_xi(xi)?;
        let inv = 1.0 / self.scale;
        let y = [xi[0] * inv, xi[1] * inv, xi[2] * inv];
        let r = norm3(y);
        let base = match &self.family {
            VectorFamily::Axial(p) => {
                if r == 0.0 {
                    [0.0; 3]
                } else {
                    let g = p.eval(r)?;
                    [y[0] / r * g, y[1] / r * g, y[2] / r * g]
                }
            }
            VectorFamily::FixedDirection { direction, profile } => {
                let g = profile.eval(r)?;
                [direction[0] * g, direction[1] * g, direction[2] * g]
            }
            VectorFamily::Expression { components, support } => {
                if r > *support {
                    [0.0; 3]
                } else {
                    let env = Env::new().with_xi(y);
                    [
                        components[0].eval(&env)?,
                        components[1].eval(&env)?,
                        components[2].eval(&env)?,
                    ]
                }
            }
        };
        let c = self.constant * inv.powi(3);
        Ok([c * base[0], c * base[1], c * base[2]])
    }

    pub fn support_radius(&self) -> Option<f64> {
        let base = match &self.family {
            VectorFamily::Axial(p) | VectorFamily::FixedDirection { profile: p, .. } => p.support(),
            VectorFamily::Expression { support, .. } => Some(*support),
        };
        base.map(|r| r * self.scale)
    }

    /// `ν_λ(ξ) = λ^{-3} ν(ξ/λ)`.
    pub fn scale_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Input(format!("lambda must be positive, got {lambda}")));
        }
        let mut out = self.clone();
        out.scale *= lambda;
        Ok(out)
    }

    pub fn l1_quadrature(&self) -> Result<f64> {
        self.abs_mass_between(0.0, f64::INFINITY)
    }

    pub fn tail_mass(&self, radius: f64) -> Result<f64> {
        self.abs_mass_between(radius, f64::INFINITY)
    }

    fn abs_mass_between(&self, lo: f64, hi: f64) -> Result<f64> {
        match &self.family {
            VectorFamily::Axial(p) | VectorFamily::FixedDirection { profile: p, .. } => {
                let m = p.radial_abs_integral(lo, hi, self.scale)?;
                Ok(self.constant * self.scale.powi(-3) * m)
            }
            VectorFamily::Expression { support, .. } => {
                let top = (support * self.scale).min(hi);
                if top <= lo {
                    return Ok(0.0);
                }
                let mut err = None;
                let v = quadrature::shell_integral(lo, top, 16, |xi| match self.eval(xi) {
                    Ok(v) => norm3(v),
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                });
                err.map_or(Ok(v), Err)
            }
        }
    }

    pub fn mass_radius(&self, tail_tol: f64) -> Result<f64> {
        if let Some(r) = self.support_radius() {
            return Ok(r);
        }
        enclosing_radius(|r| self.tail_mass(r), self.l1_quadrature()?, tail_tol, self.scale)
    }
}

/// Lattice diagnostics of the kernel assumptions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub l1_rho: f64,
    pub l1_nu: f64,
    /// `min ρ(ξ_q)/|ξ_q|²` over nodes with `|ξ_q| ≤ r`; infinite when no node qualifies.
    pub coercivity_min: f64,
    pub coercivity_radius: f64,
    /// Lattice value of `‖ν/ρ^{1/2}‖_{L²}`.
    pub ratio_l2: f64,
    /// Continuum mass of ρ beyond the lattice radius.
    pub tail_mass: f64,
    pub tail_mass_nu: f64,
    /// Volume of the excluded ξ = 0 cell.
    pub omitted_origin_volume: f64,
    pub pass: bool,
    pub failures: Vec<String>,
}

/// Evaluates the kernel hypotheses on the lattice nodes.
///
/// Fails with [`Error::H4Violation`] at the first node where ρ vanishes but ν does not.
pub fn validate_assumptions(
    rho: &KernelSpec,
    nu: &VectorKernelSpec,
    lattice: &XiLattice,
) -> Result<AssumptionReport> {
    let h3 = lattice.weight();
    let mut l1_rho = crate::reduce::Neumaier::new();
    let mut l1_nu = crate::reduce::Neumaier::new();
    let mut ratio = crate::reduce::Neumaier::new();
    let r_coerc = rho.coercivity_radius();
    let mut coercivity_min = f64::INFINITY;
    for q in 0..lattice.len() {
        let node = lattice.node(q);
        let nu_norm = norm3(node.nu);
        l1_rho.add(h3 * node.rho);
        l1_nu.add(h3 * nu_norm);
        if node.rho <= 0.0 {
            if nu_norm > 0.0 {
                return Err(Error::H4Violation {
                    xi: node.xi,
                    nu_norm,
                });
            }
        } else {
            ratio.add(h3 * nu_norm * nu_norm / node.rho);
        }
        if node.dist <= r_coerc * (1.0 + 1e-12) {
            coercivity_min = coercivity_min.min(node.rho / (node.dist * node.dist));
        }
    }
    let radius = lattice.radius();
    let l1_rho = l1_rho.value();
    let l1_nu = l1_nu.value();
    let ratio_l2 = ratio.value().sqrt();
    let mut failures = Vec::new();
    if (l1_rho - 1.0).abs() > 1e-3 {
        failures.push(format!("lattice L1 norm of rho is {l1_rho}, not 1"));
    }
    if (l1_nu - 1.0).abs() > 1e-3 {
        failures.push(format!("lattice L1 norm of nu is {l1_nu}, not 1"));
    }
    if !(coercivity_min > 0.0 && coercivity_min.is_finite()) {
        failures.push(format!(
            "coercivity minimum of rho/|xi|^2 within r = {r_coerc} is {coercivity_min}"
        ));
    }
    if !ratio_l2.is_finite() {
        failures.push("ratio norm |nu/sqrt(rho)|_2 is not finite".into());
    }
    Ok(AssumptionReport {
        l1_rho,
        l1_nu,
        coercivity_min,
        coercivity_radius: r_coerc,
        ratio_l2,
        tail_mass: rho.tail_mass(radius)?,
        tail_mass_nu: nu.tail_mass(radius)?,
        omitted_origin_volume: h3,
        pass: failures.is_empty(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VarSet;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn bump_outside_support_is_zero() {
        let k = KernelSpec::bump_quadratic(1.0).unwrap();
        assert_eq!(k.eval([2.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn bump_analytic_normalization() {
        let k = KernelSpec::bump_quadratic(1.0).unwrap();
        close(k.eval([0.5, 0.0, 0.0]).unwrap(), 0.25 * 5.0 / (4.0 * PI), 1e-15);
    }

    #[test]
    fn non_finite_xi_rejected() {
        let k = KernelSpec::bump_quadratic(1.0).unwrap();
        assert!(matches!(k.eval([f64::NAN, 0.0, 0.0]), Err(Error::Input(_))));
        let nu = VectorKernelSpec::axial(RadialProfile::Indicator { radius: 1.0 }).unwrap();
        assert!(nu.eval([0.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn gaussian_analytic_constant_matches_radial_quadrature() {
        // Oracle: 4π∫ r² e^{-r²/σ²} dr on a fine uniform midpoint grid.
        let sigma: f64 = 0.3;
        let k = KernelSpec::truncated_gaussian(sigma, Some(1.0)).unwrap();
        let steps = 200_000;
        let h = 1.0 / steps as f64;
        let mut mass = 0.0;
        for i in 0..steps {
            let r = (i as f64 + 0.5) * h;
            mass += 4.0 * PI * r * r * k.eval([r, 0.0, 0.0]).unwrap() * h;
        }
        close(mass, 1.0, 1e-6);
        close(k.l1_quadrature().unwrap(), 1.0, 1e-10);
    }

    #[test]
    fn axial_direction_times_profile() {
        let nu = VectorKernelSpec::axial(RadialProfile::Indicator { radius: 1.0 }).unwrap();
        let v = nu.eval([0.0, 0.0, 0.5]).unwrap();
        close(v[0], 0.0, 0.0);
        close(v[1], 0.0, 0.0);
        close(v[2], 3.0 / (4.0 * PI), 1e-15);
        assert_eq!(nu.eval([0.0; 3]).unwrap(), [0.0; 3]);
    }

    #[test]
    fn fixed_direction_outside_support() {
        let nu = VectorKernelSpec::fixed_direction([1.0, 0.0, 0.0], RadialProfile::Indicator { radius: 1.0 })
            .unwrap();
        assert_eq!(nu.eval([0.0, 0.0, 2.0]).unwrap(), [0.0; 3]);
    }

    #[test]
    fn expression_vector_kernel() {
        let q = 0.7;
        let comps = [
            Expression::parse_with(&format!("xi2/r*{q}"), VarSet::KERNEL).unwrap(),
            Expression::parse_with(&format!("-xi1/r*{q}"), VarSet::KERNEL).unwrap(),
            Expression::parse_with("0", VarSet::KERNEL).unwrap(),
        ];
        let nu = VectorKernelSpec::expression(comps, 2.0)
            .unwrap()
            .with_normalization(Normalization::Analytic);
        let v = nu.eval([1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, [0.0, -q, 0.0]);
    }

    #[test]
    fn lambda_one_is_identity_and_two_rescales() {
        let k = KernelSpec::bump_quadratic(1.0).unwrap();
        let same = k.scale_lambda(1.0).unwrap();
        for xi in [[0.1, 0.2, 0.3], [0.9, 0.0, 0.1], [0.0, 0.0, 1.5]] {
            assert_eq!(k.eval(xi).unwrap().to_bits(), same.eval(xi).unwrap().to_bits());
        }
        let k2 = k.scale_lambda(2.0).unwrap();
        assert_eq!(k2.support_radius(), Some(2.0));
        close(
            k2.eval([1.0, 0.0, 0.0]).unwrap(),
            k.eval([0.5, 0.0, 0.0]).unwrap() / 8.0,
            1e-16,
        );
        assert!(k.scale_lambda(0.0).is_err());
        assert!(k.scale_lambda(-1.0).is_err());
    }

    #[test]
    fn l1_invariant_under_scaling() {
        let kernels = [
            KernelSpec::bump_quadratic(1.0).unwrap(),
            KernelSpec::truncated_gaussian(0.3, None).unwrap(),
            KernelSpec::indicator_shell(0.2, 0.8).unwrap(),
        ];
        for k in &kernels {
            let base = k.l1_quadrature().unwrap();
            close(base, 1.0, 1e-10);
            for lambda in [0.5, 2.0, 3.7] {
                close(k.scale_lambda(lambda).unwrap().l1_quadrature().unwrap(), base, 1e-6);
            }
        }
        let nu = VectorKernelSpec::axial(RadialProfile::Indicator { radius: 1.0 }).unwrap();
        close(nu.scale_lambda(2.5).unwrap().l1_quadrature().unwrap(), 1.0, 1e-6);
    }

    #[test]
    fn gaussian_tail_matches_closed_form() {
        let sigma: f64 = 0.3;
        let k = KernelSpec::truncated_gaussian(sigma, None).unwrap();
        let r = 3.0 * sigma;
        let t = r / sigma;
        let analytic = 1.0 - libm::erf(t) + 2.0 * t / PI.sqrt() * (-t * t).exp();
        close(k.tail_mass(r).unwrap(), analytic, 1e-9);
        let r8 = k.mass_radius(1e-8).unwrap();
        close(k.tail_mass(r8).unwrap(), 1e-8, 1e-10);
    }

    #[test]
    fn radial_second_moment_is_isotropic() {
        let k = KernelSpec::truncated_gaussian(0.4, Some(1.0)).unwrap();
        let mut m = [[0.0; 3]; 3];
        for (a, row) in m.iter_mut().enumerate() {
            for (b, entry) in row.iter_mut().enumerate() {
                *entry = quadrature::shell_integral(0.0, 1.0, 8, |xi| {
                    let r2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
                    k.eval(xi).unwrap() * xi[a] * xi[b] / r2
                });
            }
        }
        for (a, row) in m.iter().enumerate() {
            for (b, entry) in row.iter().enumerate() {
                close(*entry, if a == b { 1.0 / 3.0 } else { 0.0 }, 1e-9);
            }
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(KernelSpec::bump_quadratic(0.0).is_err());
        assert!(KernelSpec::truncated_gaussian(-1.0, None).is_err());
        assert!(KernelSpec::indicator_shell(0.5, 0.5).is_err());
        assert!(VectorKernelSpec::fixed_direction([0.0; 3], RadialProfile::Indicator { radius: 1.0 }).is_err());
    }
}

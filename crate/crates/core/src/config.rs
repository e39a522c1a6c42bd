//! JSON experiment configuration.
//!
//! The file is parsed into raw serde structs, scalar overrides of the form
//! `path.to.field=value` are applied to the JSON tree first, and the result
//! is validated into typed specs.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use crate::cell::default_radius;
use crate::error::{Error, Result};
use crate::expr::{Expression, VarSet};
use crate::kernels::{KernelSpec, Normalization, RadialProfile, ScalarFamily, VectorFamily, VectorKernelSpec};
use crate::macro_energy::{MacroGrid, MagnetizationFamily};
use crate::microstructure::{CoefficientKind, CoefficientSpec, FourierMode};
use crate::solver::{CellInputs, Preconditioner, SolverOptions};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kernels: RawKernels,
    coefficients: RawCoefficients,
    #[serde(default)]
    lattice: RawLattice,
    #[serde(default, rename = "macro")]
    macro_grid: Option<RawMacro>,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    sweep: Option<RawSweep>,
    #[serde(default)]
    verification: VerificationConfig,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKernels {
    rho: RawScalarKernel,
    nu: RawVectorKernel,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScalarKernel {
    family: String,
    radius: Option<f64>,
    sigma: Option<f64>,
    r1: Option<f64>,
    r2: Option<f64>,
    expr: Option<String>,
    support: Option<f64>,
    normalization: Option<Normalization>,
    coercivity_radius: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    kind: String,
    radius: Option<f64>,
    sigma: Option<f64>,
    cutoff: Option<f64>,
    inner: Option<f64>,
    outer: Option<f64>,
    expr: Option<String>,
    support: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVectorKernel {
    family: String,
    profile: Option<RawProfile>,
    direction: Option<[f64; 3]>,
    components: Option<[String; 3]>,
    support: Option<f64>,
    normalization: Option<Normalization>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoefficients {
    a: RawCoefficient,
    kappa: RawCoefficient,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoefficient {
    kind: String,
    value: Option<f64>,
    mean: Option<f64>,
    modes: Option<Vec<FourierMode>>,
    expr: Option<String>,
    f: Option<String>,
    g: Option<String>,
    a0: Option<f64>,
    sup_bound: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLattice {
    #[serde(default = "default_n")]
    n: usize,
    radius: Option<f64>,
    #[serde(default = "default_tail_tol")]
    tail_tol: f64,
}

impl Default for RawLattice {
    fn default() -> Self {
        Self {
            n: default_n(),
            radius: None,
            tail_tol: default_tail_tol(),
        }
    }
}

fn default_n() -> usize {
    8
}

fn default_tail_tol() -> f64 {
    1e-6
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMacro {
    m: Option<usize>,
    p: Option<Vec<usize>>,
    eps: Option<Vec<f64>>,
    magnetization: RawMagnetization,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMagnetization {
    family: String,
    direction: Option<[f64; 3]>,
    axis: Option<usize>,
    pitch: Option<f64>,
    center: Option<f64>,
    width: Option<f64>,
    components: Option<[String; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    #[serde(default = "default_cg_tol")]
    cg_tol: f64,
    #[serde(default = "default_max_iter_factor")]
    max_iter_factor: usize,
    #[serde(default)]
    preconditioner: Preconditioner,
    #[serde(default)]
    cache: bool,
}

impl Default for RawSolver {
    fn default() -> Self {
        Self {
            cg_tol: default_cg_tol(),
            max_iter_factor: default_max_iter_factor(),
            preconditioner: Preconditioner::default(),
            cache: false,
        }
    }
}

fn default_cg_tol() -> f64 {
    1e-10
}

fn default_max_iter_factor() -> usize {
    10
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    gap_tolerance: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

/// Settings for the property checks run by `selftest`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub seed: u64,
    pub adjoint_sizes: Vec<usize>,
    pub adjoint_seeds: u64,
    pub poincare_samples: usize,
    pub decomposition_draws: usize,
    pub antisym_draws: usize,
    pub antisym_n: usize,
    pub antisym_p: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            adjoint_sizes: vec![2, 4, 8],
            adjoint_seeds: 10,
            poincare_samples: 50,
            decomposition_draws: 20,
            antisym_draws: 20,
            antisym_n: 4,
            antisym_p: 4,
        }
    }
}

/// Ω-grid and magnetization settings.
#[derive(Debug, Clone)]
pub struct MacroConfig {
    /// Fixed grid size, when given.
    pub m: Option<usize>,
    /// `P = 1/ε` values, in the order given.
    pub periods: Vec<usize>,
    pub magnetization: MagnetizationFamily,
}

impl MacroConfig {
    /// Grid for period `p` at cell size `n`: the fixed `M` if one was given,
    /// `P·n` otherwise.
    pub fn grid(&self, n: usize, p: usize) -> Result<MacroGrid> {
        MacroGrid::new(self.m.unwrap_or(p * n), n, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub gap_tolerance: f64,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct Config {
    pub rho: KernelSpec,
    pub nu: VectorKernelSpec,
    pub a: CoefficientSpec,
    pub kappa: CoefficientSpec,
    pub n: usize,
    pub radius: f64,
    pub tail_tol: f64,
    pub solver: SolverOptions,
    pub macro_grid: Option<MacroConfig>,
    pub sweep: Option<SweepConfig>,
    pub verification: VerificationConfig,
    /// Directory for command outputs; `None` writes to stdout.
    pub output_dir: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text` after applying `path=value` overrides to scalar fields.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let raw: RawConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<document>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        raw.validate()
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_with_overrides(&text, overrides)
    }

    /// Cell inputs at the configured grid size.
    pub fn inputs(&self) -> Result<CellInputs> {
        self.inputs_at(self.n)
    }

    /// Cell inputs at grid size `n`, keeping every other setting.
    pub fn inputs_at(&self, n: usize) -> Result<CellInputs> {
        CellInputs::new(
            self.rho.clone(),
            self.nu.clone(),
            self.a.clone(),
            self.kappa.clone(),
            n,
            self.radius,
            self.solver,
        )
    }

    pub fn macro_config(&self) -> Result<&MacroConfig> {
        self.macro_grid
            .as_ref()
            .ok_or_else(|| Error::config("macro", "this command needs a `macro` section"))
    }
}

/// Sets a scalar at a dotted path. Values are read as JSON when possible and
/// as strings otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like path.to.field=value"))?;
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    if value.is_object() || value.is_array() {
        return Err(Error::config(path, "only scalar fields can be overridden"));
    }
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty path segment"));
    }
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(keys[..i].join("."), "not an object"))?;
        if i + 1 == keys.len() {
            if let Some(old) = obj.get(*key) {
                if old.is_object() || old.is_array() {
                    return Err(Error::config(path, "only scalar fields can be overridden"));
                }
            }
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment")
}

fn need<T: Copy>(v: Option<T>, field: &str, family: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(field, format!("required for `{family}`")))
}

fn need_ref<'a, T>(v: &'a Option<T>, field: &str, family: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::config(field, format!("required for `{family}`")))
}

fn expression(text: &str, vars: VarSet, field: &str) -> Result<Expression> {
    Expression::parse_with(text, vars).map_err(|e| match e {
        Error::Parse { span, message } => {
            let marker = " ".repeat(span.start) + &"^".repeat((span.end - span.start).max(1));
            Error::config(field, format!("parse error at {span}: {message}\n    {text}\n    {marker}"))
        }
        other => Error::config(field, other.to_string()),
    })
}

fn at(field: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config { .. } | Error::Commensurability { .. } => e,
        other => Error::config(field, other.to_string()),
    }
}

fn profile(raw: &RawProfile, field: &str) -> Result<RadialProfile> {
    let f = |name: &str| format!("{field}.{name}");
    let k = raw.kind.as_str();
    Ok(match k {
        "indicator" => RadialProfile::Indicator {
            radius: need(raw.radius, &f("radius"), k)?,
        },
        "quadratic" => RadialProfile::Quadratic {
            radius: need(raw.radius, &f("radius"), k)?,
        },
        "gaussian" => RadialProfile::Gaussian {
            sigma: need(raw.sigma, &f("sigma"), k)?,
            cutoff: raw.cutoff,
        },
        "shell" => RadialProfile::Shell {
            inner: need(raw.inner, &f("inner"), k)?,
            outer: need(raw.outer, &f("outer"), k)?,
        },
        "expression" => RadialProfile::Expression {
            expr: expression(need_ref(&raw.expr, &f("expr"), k)?, VarSet::RADIAL, &f("expr"))?,
            support: need(raw.support, &f("support"), k)?,
        },
        other => {
            return Err(Error::config(
                f("kind"),
                format!("unknown profile `{other}` (expected indicator, quadratic, gaussian, shell or expression)"),
            ))
        }
    })
}

fn scalar_kernel(raw: &RawScalarKernel) -> Result<KernelSpec> {
    let field = "kernels.rho";
    let f = |name: &str| format!("{field}.{name}");
    let fam = raw.family.as_str();
    let family = match fam {
        "bump_quadratic" => ScalarFamily::Radial(RadialProfile::Quadratic {
            radius: need(raw.radius, &f("radius"), fam)?,
        }),
        "truncated_gaussian" => ScalarFamily::Radial(RadialProfile::Gaussian {
            sigma: need(raw.sigma, &f("sigma"), fam)?,
            cutoff: raw.radius,
        }),
        "indicator_shell" => ScalarFamily::Radial(RadialProfile::Shell {
            inner: need(raw.r1, &f("r1"), fam)?,
            outer: need(raw.r2, &f("r2"), fam)?,
        }),
        "expression" => ScalarFamily::Expression {
            expr: expression(need_ref(&raw.expr, &f("expr"), fam)?, VarSet::KERNEL, &f("expr"))?,
            support: need(raw.support, &f("support"), fam)?,
        },
        other => {
            return Err(Error::config(
                f("family"),
                format!(
                    "unknown family `{other}` (expected bump_quadratic, truncated_gaussian, indicator_shell or expression)"
                ),
            ))
        }
    };
    let mut spec = KernelSpec::new(family, raw.normalization.unwrap_or(Normalization::Quadrature)).map_err(at(field))?;
    if let Some(r) = raw.coercivity_radius {
        spec = spec.with_coercivity_radius(r).map_err(at(&f("coercivity_radius")))?;
    }
    Ok(spec)
}

fn vector_kernel(raw: &RawVectorKernel) -> Result<VectorKernelSpec> {
    let field = "kernels.nu";
    let f = |name: &str| format!("{field}.{name}");
    let fam = raw.family.as_str();
    let family = match fam {
        "axial" => VectorFamily::Axial(profile(need_ref(&raw.profile, &f("profile"), fam)?, &f("profile"))?),
        "fixed_direction" => VectorFamily::FixedDirection {
            direction: need(raw.direction, &f("direction"), fam)?,
            profile: profile(need_ref(&raw.profile, &f("profile"), fam)?, &f("profile"))?,
        },
        "expression" => {
            let c = need_ref(&raw.components, &f("components"), fam)?;
            let parse = |i: usize| expression(&c[i], VarSet::KERNEL, &format!("{field}.components[{i}]"));
            VectorFamily::Expression {
                components: Box::new([parse(0)?, parse(1)?, parse(2)?]),
                support: need(raw.support, &f("support"), fam)?,
            }
        }
        other => {
            return Err(Error::config(
                f("family"),
                format!("unknown family `{other}` (expected axial, fixed_direction or expression)"),
            ))
        }
    };
    VectorKernelSpec::new(family, raw.normalization.unwrap_or(Normalization::Quadrature)).map_err(at(field))
}

fn coefficient(raw: &RawCoefficient, field: &str) -> Result<CoefficientSpec> {
    let f = |name: &str| format!("{field}.{name}");
    let k = raw.kind.as_str();
    let kind = match k {
        "constant" => CoefficientKind::Constant(need(raw.value, &f("value"), k)?),
        "fourier" => CoefficientKind::Fourier {
            mean: need(raw.mean, &f("mean"), k)?,
            modes: raw.modes.clone().unwrap_or_default(),
        },
        "expression" => {
            CoefficientKind::Expression(expression(need_ref(&raw.expr, &f("expr"), k)?, VarSet::COEFFICIENT, &f("expr"))?)
        }
        "separable" => CoefficientKind::Separable {
            f: expression(need_ref(&raw.f, &f("f"), k)?, VarSet::CELL, &f("f"))?,
            g: expression(need_ref(&raw.g, &f("g"), k)?, VarSet::CELL, &f("g"))?,
        },
        other => {
            return Err(Error::config(
                f("kind"),
                format!("unknown kind `{other}` (expected constant, fourier, expression or separable)"),
            ))
        }
    };
    let mut spec = CoefficientSpec::new(kind).map_err(at(field))?;
    if let Some(a0) = raw.a0 {
        spec = spec.with_a0(a0).map_err(at(&f("a0")))?;
    }
    if let Some(b) = raw.sup_bound {
        spec = spec.with_sup_bound(b).map_err(at(&f("sup_bound")))?;
    }
    Ok(spec)
}

fn magnetization(raw: &RawMagnetization) -> Result<MagnetizationFamily> {
    let field = "macro.magnetization";
    let f = |name: &str| format!("{field}.{name}");
    let fam = raw.family.as_str();
    let axis = |default: usize| -> Result<usize> {
        let a = raw.axis.unwrap_or(default);
        if a > 2 {
            return Err(Error::config(f("axis"), format!("must be 0, 1 or 2, got {a}")));
        }
        Ok(a)
    };
    let out = match fam {
        "constant" => MagnetizationFamily::Constant {
            direction: need(raw.direction, &f("direction"), fam)?,
        },
        "helix" => MagnetizationFamily::Helix {
            axis: axis(2)?,
            pitch: raw.pitch.unwrap_or(1.0),
        },
        "bloch_wall" => MagnetizationFamily::BlochWall {
            axis: axis(0)?,
            center: raw.center.unwrap_or(0.5),
            width: need(raw.width, &f("width"), fam)?,
        },
        "expression" => {
            let c = need_ref(&raw.components, &f("components"), fam)?;
            let parse = |i: usize| expression(&c[i], VarSet::MACRO, &format!("{field}.components[{i}]"));
            MagnetizationFamily::Expression(Box::new([parse(0)?, parse(1)?, parse(2)?]))
        }
        other => {
            return Err(Error::config(
                f("family"),
                format!("unknown family `{other}` (expected constant, helix, bloch_wall or expression)"),
            ))
        }
    };
    // Catch bad parameters at load time rather than on first use.
    if let MagnetizationFamily::BlochWall { width, .. } = out {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::config(f("width"), "must be positive"));
        }
    }
    if let MagnetizationFamily::Constant { direction } = out {
        if !(crate::linalg::norm(direction) > 1e-12) {
            return Err(Error::config(f("direction"), "must be nonzero"));
        }
    }
    Ok(out)
}

fn positive(v: f64, field: &str) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive, got {v}")))
    }
}

impl RawConfig {
    fn validate(self) -> Result<Config> {
        let rho = scalar_kernel(&self.kernels.rho)?;
        let nu = vector_kernel(&self.kernels.nu)?;
        let a = coefficient(&self.coefficients.a, "coefficients.a")?;
        let kappa = coefficient(&self.coefficients.kappa, "coefficients.kappa")?;

        let n = self.lattice.n;
        if n == 0 {
            return Err(Error::config("lattice.n", "must be at least 1"));
        }
        positive(self.lattice.tail_tol, "lattice.tail_tol")?;
        let radius = match self.lattice.radius {
            Some(r) => {
                positive(r, "lattice.radius")?;
                r
            }
            None => default_radius(&rho, &nu, self.lattice.tail_tol).map_err(at("lattice.radius"))?,
        };

        positive(self.solver.cg_tol, "solver.cg_tol")?;
        if self.solver.max_iter_factor == 0 {
            return Err(Error::config("solver.max_iter_factor", "must be positive"));
        }
        let solver = SolverOptions {
            tol: self.solver.cg_tol,
            max_iter_factor: self.solver.max_iter_factor,
            preconditioner: self.solver.preconditioner,
            cache: self.solver.cache,
        };

        let macro_grid = match self.macro_grid {
            None => None,
            Some(raw) => {
                let periods = match (&raw.p, &raw.eps) {
                    (Some(_), Some(_)) => return Err(Error::config("macro", "give either `p` or `eps`, not both")),
                    (Some(p), None) => p.clone(),
                    (None, Some(eps)) => eps
                        .iter()
                        .map(|&e| crate::macro_energy::period_from_eps(e, raw.m.unwrap_or(0), n))
                        .collect::<Result<_>>()?,
                    (None, None) => {
                        let m = raw
                            .m
                            .ok_or_else(|| Error::config("macro", "needs `m`, `p` or `eps`"))?;
                        if m % n != 0 {
                            return Err(Error::Commensurability {
                                m,
                                n,
                                p: m as f64 / n as f64,
                            });
                        }
                        vec![m / n]
                    }
                };
                if periods.is_empty() {
                    return Err(Error::config("macro.p", "must not be empty"));
                }
                let cfg = MacroConfig {
                    m: raw.m,
                    periods,
                    magnetization: magnetization(&raw.magnetization)?,
                };
                for &p in &cfg.periods {
                    cfg.grid(n, p)?;
                }
                Some(cfg)
            }
        };

        let sweep = match self.sweep {
            None => None,
            Some(s) => {
                positive(s.gap_tolerance, "sweep.gap_tolerance")?;
                Some(SweepConfig {
                    gap_tolerance: s.gap_tolerance,
                })
            }
        };

        let v = &self.verification;
        if v.adjoint_sizes.contains(&0) {
            return Err(Error::config("verification.adjoint_sizes", "sizes must be at least 1"));
        }
        if v.antisym_n == 0 || v.antisym_p == 0 {
            return Err(Error::config("verification", "antisym_n and antisym_p must be at least 1"));
        }

        Ok(Config {
            rho,
            nu,
            a,
            kappa,
            n,
            radius,
            tail_tol: self.lattice.tail_tol,
            solver,
            macro_grid,
            sweep,
            verification: self.verification,
            output_dir: self.output.dir,
        })
    }
}

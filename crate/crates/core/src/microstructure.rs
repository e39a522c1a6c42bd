//! Periodic microstructure coefficients `a(z, z')` and `κ(z, z')`.

use serde::{Deserialize, Serialize};

use crate::cell::{wrap_add, XiLattice};
use crate::error::{Error, Result};
use crate::expr::{Env, Expression, Var, VarSet};
use crate::reduce;

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// One term `amplitude · cos(2π(k·z + kp·z') + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub amplitude: f64,
    pub k: [i32; 3],
    pub kp: [i32; 3],
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientKind {
    Constant(f64),
    /// `f(z) · g(z')`; both expressions are written in `z1..z3`.
    Separable { f: Expression, g: Expression },
    Fourier { mean: f64, modes: Vec<FourierMode> },
    /// Expression in `z1..z3, zp1..zp3`.
    Expression(Expression),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSpec {
    kind: CoefficientKind,
    a0_declared: Option<f64>,
    sup_bound: Option<f64>,
}

#[inline]
fn wrap1(v: f64) -> f64 {
    let w = v - v.floor();
    // v - floor(v) can round up to exactly 1 for tiny negative v.
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

impl CoefficientSpec {
    pub fn new(kind: CoefficientKind) -> Result<Self> {
        match &kind {
            CoefficientKind::Constant(c) if !c.is_finite() => {
                return Err(Error::Input(format!("constant coefficient {c} is not finite")))
            }
            CoefficientKind::Separable { f, g } => {
                for e in [f, g] {
                    if [Var::Zp1, Var::Zp2, Var::Zp3].iter().any(|v| e.uses(*v)) {
                        return Err(Error::Input(format!(
                            "separable factor `{}` must use z1..z3 only",
                            e.source()
                        )));
                    }
                }
            }
            CoefficientKind::Fourier { mean, modes } => {
                let finite = mean.is_finite() && modes.iter().all(|m| m.amplitude.is_finite() && m.phase.is_finite());
                if !finite {
                    return Err(Error::Input("Fourier coefficient parameters must be finite".into()));
                }
            }
            _ => {}
        }
        Ok(Self {
            kind,
            a0_declared: None,
            sup_bound: None,
        })
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(CoefficientKind::Constant(c))
    }

    pub fn fourier(mean: f64, modes: Vec<FourierMode>) -> Result<Self> {
        Self::new(CoefficientKind::Fourier { mean, modes })
    }

    pub fn expression(text: &str) -> Result<Self> {
        Self::new(CoefficientKind::Expression(Expression::parse_with(text, VarSet::COEFFICIENT)?))
    }

    pub fn separable(f: &str, g: &str) -> Result<Self> {
        Self::new(CoefficientKind::Separable {
            f: Expression::parse_with(f, VarSet::CELL)?,
            g: Expression::parse_with(g, VarSet::CELL)?,
        })
    }

    pub fn with_a0(mut self, a0: f64) -> Result<Self> {
        if !(a0.is_finite() && a0 > 0.0) {
            return Err(Error::Input(format!("a0 must be positive, got {a0}")));
        }
        self.a0_declared = Some(a0);
        Ok(self)
    }

    pub fn with_sup_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound >= 0.0) {
            return Err(Error::Input(format!("sup bound must be finite and nonnegative, got {bound}")));
        }
        self.sup_bound = Some(bound);
        Ok(self)
    }

    pub fn kind(&self) -> &CoefficientKind {
        &self.kind
    }

    pub fn a0_declared(&self) -> Option<f64> {
        self.a0_declared
    }

    pub fn sup_bound(&self) -> Option<f64> {
        self.sup_bound
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.kind {
            CoefficientKind::Constant(c) => Some(c),
            _ => None,
        }
    }

    /// Same coefficient multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let kind = match &self.kind {
            CoefficientKind::Constant(c) => CoefficientKind::Constant(c * factor),
            CoefficientKind::Fourier { mean, modes } => CoefficientKind::Fourier {
                mean: mean * factor,
                modes: modes
                    .iter()
                    .map(|m| FourierMode {
                        amplitude: m.amplitude * factor,
                        ..m.clone()
                    })
                    .collect(),
            },
            CoefficientKind::Separable { f, g } => CoefficientKind::Separable {
                f: Expression::parse_with(&format!("({}) * ({factor:e})", f.source()), VarSet::CELL)?,
                g: g.clone(),
            },
            CoefficientKind::Expression(e) => CoefficientKind::Expression(Expression::parse_with(
                &format!("({}) * ({factor:e})", e.source()),
                VarSet::COEFFICIENT,
            )?),
        };
        Self::new(kind)
    }

    /// Evaluates at `(z, z')` after wrapping both arguments into `[0, 1)³`.
    pub fn eval(&self, z: [f64; 3], zp: [f64; 3]) -> Result<f64> {
        if z.iter().chain(&zp).any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite coefficient argument {z:?}, {zp:?}")));
        }
        let z = z.map(wrap1);
        let zp = zp.map(wrap1);
        self.eval_wrapped(z, zp)
    }

    fn eval_wrapped(&self, z: [f64; 3], zp: [f64; 3]) -> Result<f64> {
        match &self.kind {
            CoefficientKind::Constant(c) => Ok(*c),
            CoefficientKind::Fourier { mean, modes } => {
                let mut v = *mean;
                for m in modes {
                    let mut t = 0.0;
                    for a in 0..3 {
                        t += f64::from(m.k[a]) * z[a] + f64::from(m.kp[a]) * zp[a];
                    }
                    v += m.amplitude * (TAU * t + m.phase).cos();
                }
                Ok(v)
            }
            CoefficientKind::Separable { f, g } => {
                let fz = f.eval(&Env::new().with_z(z, [0.0; 3]))?;
                let gz = g.eval(&Env::new().with_z(zp, [0.0; 3]))?;
                Ok(fz * gz)
            }
            CoefficientKind::Expression(e) => e.eval(&Env::new().with_z(z, zp)),
        }
    }

    /// Value at the cell-grid pair `(i/n, (i + r)/n)` with `r` a residue offset.
    pub fn eval_grid(&self, n: usize, site: [usize; 3], residue: [usize; 3]) -> Result<f64> {
        let zp = wrap_add(site, residue, n);
        let inv = 1.0 / n as f64;
        let z = site.map(|i| i as f64 * inv);
        let zp = zp.map(|i| i as f64 * inv);
        self.eval_wrapped(z, zp)
    }
}

/// Sampled H1 bounds over the lattice pairs `(z, z + ξ_q)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct H1Report {
    pub min_sample: f64,
    pub max_sample: f64,
    pub max_abs_sample: f64,
    pub argmin: ([f64; 3], [f64; 3]),
    pub argmax_abs: ([f64; 3], [f64; 3]),
    pub a0_declared: Option<f64>,
    pub sup_bound: Option<f64>,
    pub pass: bool,
}

/// Samples every pair `(z, z + ξ_q)` of the cell grid and lattice.
///
/// Evaluation errors are reported as config errors naming the expression.
pub fn sample_bounds(spec: &CoefficientSpec, lattice: &XiLattice) -> Result<H1Report> {
    let n = lattice.n();
    let inv = 1.0 / n as f64;
    let point = |s: usize, r: [usize; 3]| {
        let site = lattice.site_coords(s);
        (site.map(|i| i as f64 * inv), wrap_add(site, r, n).map(|i| i as f64 * inv))
    };
    let mut min = (f64::INFINITY, 0usize, 0usize);
    let mut max = f64::NEG_INFINITY;
    let mut max_abs = (0.0f64, 0usize, 0usize);
    for (ri, &r) in lattice.residues().iter().enumerate() {
        for s in 0..lattice.sites() {
            let v = spec.eval_grid(n, lattice.site_coords(s), r).map_err(|e| match e {
                Error::Eval { source_text, message } => Error::config(
                    "coefficient",
                    format!("evaluating `{source_text}` at {:?}: {message}", point(s, r)),
                ),
                other => other,
            })?;
            if !v.is_finite() || v < min.0 {
                min = (v, ri, s);
            }
            max = max.max(v);
            if !v.is_finite() || v.abs() > max_abs.0 {
                max_abs = (v.abs(), ri, s);
            }
            if !v.is_finite() {
                max = f64::NAN;
            }
        }
    }
    let residues = lattice.residues();
    let pass_a0 = spec.a0_declared.is_none_or(|a0| min.0 >= a0);
    let pass_sup = spec.sup_bound.is_none_or(|b| max_abs.0 <= b);
    Ok(H1Report {
        min_sample: min.0,
        max_sample: max,
        max_abs_sample: max_abs.0,
        argmin: point(min.2, residues[min.1]),
        argmax_abs: point(max_abs.2, residues[max_abs.1]),
        a0_declared: spec.a0_declared,
        sup_bound: spec.sup_bound,
        pass: pass_a0 && pass_sup && max.is_finite() && min.0.is_finite(),
    })
}

/// Like [`sample_bounds`] but turns a failed check into [`Error::H1Violation`].
pub fn check_h1(spec: &CoefficientSpec, lattice: &XiLattice) -> Result<H1Report> {
    let report = sample_bounds(spec, lattice)?;
    if report.pass {
        return Ok(report);
    }
    let (message, (z, zp), value) = if !report.min_sample.is_finite() || !report.max_sample.is_finite() {
        ("non-finite coefficient value".to_string(), report.argmax_abs, report.max_abs_sample)
    } else if spec.a0_declared.is_some_and(|a0| report.min_sample < a0) {
        (
            format!("minimum {} below a0 = {}", report.min_sample, spec.a0_declared.unwrap_or(0.0)),
            report.argmin,
            report.min_sample,
        )
    } else {
        (
            format!(
                "|value| {} above sup bound {}",
                report.max_abs_sample,
                spec.sup_bound.unwrap_or(0.0)
            ),
            report.argmax_abs,
            report.max_abs_sample,
        )
    };
    Err(Error::H1Violation { message, z, zp, value })
}

/// Largest sampled `|a(z, z') - a(z', z)|` over the lattice pairs.
pub fn symmetry_defect(spec: &CoefficientSpec, lattice: &XiLattice) -> Result<f64> {
    if spec.as_constant().is_some() {
        return Ok(0.0);
    }
    let n = lattice.n();
    let inv = 1.0 / n as f64;
    let mut defect = 0.0f64;
    for &r in lattice.residues() {
        for s in 0..lattice.sites() {
            let site = lattice.site_coords(s);
            let z = site.map(|i| i as f64 * inv);
            let zp = wrap_add(site, r, n).map(|i| i as f64 * inv);
            defect = defect.max((spec.eval_wrapped(z, zp)? - spec.eval_wrapped(zp, z)?).abs());
        }
    }
    if defect > 1e-8 {
        log::warn!(
            "coefficient is not symmetric (sampled defect {defect:e}); the model is still evaluated as given"
        );
    }
    Ok(defect)
}

/// Values `a(z, z + ξ_q)` for every cell site and lattice node.
///
/// Values depend on `ξ_q` only through `j mod n`, so they are indexed by
/// residue. Construction sweeps every pair once, which both validates the
/// coefficient and, when caching is requested, fills the table.
#[derive(Debug, Clone)]
pub struct PairCoefficients {
    spec: CoefficientSpec,
    n: usize,
    residues: Vec<[usize; 3]>,
    constant: Option<f64>,
    table: Option<Vec<f64>>,
    residue_means: Vec<f64>,
    min: f64,
    max_abs: f64,
}

impl PairCoefficients {
    pub fn new(spec: &CoefficientSpec, lattice: &XiLattice, cache: bool) -> Result<Self> {
        let n = lattice.n();
        let sites = lattice.sites();
        let residues = lattice.residues().to_vec();
        if let Some(c) = spec.as_constant() {
            return Ok(Self {
                spec: spec.clone(),
                n,
                residue_means: vec![c; residues.len()],
                residues,
                constant: Some(c),
                table: None,
                min: c,
                max_abs: c.abs(),
            });
        }
        let mut table = cache.then(|| Vec::with_capacity(residues.len() * sites));
        let mut residue_means = Vec::with_capacity(residues.len());
        let mut min = f64::INFINITY;
        let mut max_abs = 0.0f64;
        for &r in &residues {
            let mut vals = Vec::with_capacity(sites);
            for s in 0..sites {
                let v = spec.eval_grid(n, lattice.site_coords(s), r)?;
                if !v.is_finite() {
                    return Err(Error::Input(format!(
                        "coefficient is not finite at site {:?}, offset {r:?}",
                        lattice.site_coords(s)
                    )));
                }
                min = min.min(v);
                max_abs = max_abs.max(v.abs());
                vals.push(v);
            }
            residue_means.push(reduce::sum(sites, |s| vals[s]) / sites as f64);
            if let Some(t) = table.as_mut() {
                t.extend_from_slice(&vals);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            n,
            residues,
            constant: None,
            table,
            residue_means,
            min,
            max_abs,
        })
    }

    pub fn constant(&self) -> Option<f64> {
        self.constant
    }

    pub fn is_cached(&self) -> bool {
        self.table.is_some()
    }

    /// `a(z_site, z_site + r)` for residue index `ri`.
    #[inline]
    pub fn at(&self, site: usize, coords: [usize; 3], ri: usize) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        if let Some(t) = &self.table {
            return t[ri * self.n * self.n * self.n + site];
        }
        // The constructor evaluated every pair successfully, and evaluation is pure.
        self.spec.eval_grid(self.n, coords, self.residues[ri]).unwrap_or(f64::NAN)
    }

    /// Largest `|a(z, z+r) - a(z+r, z)|` over the sampled pairs.
    pub fn symmetry_defect(&self) -> f64 {
        if self.constant.is_some() {
            return 0.0;
        }
        let n = self.n;
        let lookup: std::collections::HashMap<[usize; 3], usize> =
            self.residues.iter().enumerate().map(|(i, r)| (*r, i)).collect();
        let coords = |s: usize| [s % n, (s / n) % n, s / (n * n)];
        let index = |i: [usize; 3]| i[0] + n * (i[1] + n * i[2]);
        let mut defect = 0.0f64;
        for (ri, r) in self.residues.iter().enumerate() {
            let Some(&neg) = lookup.get(&r.map(|v| (n - v) % n)) else {
                continue;
            };
            for s in 0..n * n * n {
                let c = coords(s);
                let t = wrap_add(c, *r, n);
                defect = defect.max((self.at(s, c, ri) - self.at(index(t), t, neg)).abs());
            }
        }
        defect
    }

    /// `n⁻³ Σ_z a(z, z + r)` for residue index `ri`.
    pub fn residue_mean(&self, ri: usize) -> f64 {
        self.residue_means[ri]
    }

    /// Smallest sampled value.
    pub fn min(&self) -> f64 {
        self.min
    }

    /// Largest sampled `|value|`.
    pub fn max_abs(&self) -> f64 {
        self.max_abs
    }
}

/// Per-node `ρ̄_a(ξ_q) = ρ(ξ_q) · n⁻³ Σ_z a(z, z+ξ_q)` and
/// `ν̄_κ(ξ_q) = ν(ξ_q) · n⁻³ Σ_z κ(z, z+ξ_q)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AveragedKernels {
    pub rho_bar: Vec<f64>,
    pub nu_bar: Vec<[f64; 3]>,
}

pub fn averaged_kernels(
    a: &CoefficientSpec,
    kappa: &CoefficientSpec,
    lattice: &XiLattice,
) -> Result<AveragedKernels> {
    let pa = PairCoefficients::new(a, lattice, false)?;
    let pk = PairCoefficients::new(kappa, lattice, false)?;
    Ok(averaged_from_pairs(&pa, &pk, lattice))
}

pub fn averaged_from_pairs(a: &PairCoefficients, kappa: &PairCoefficients, lattice: &XiLattice) -> AveragedKernels {
    let nodes = lattice.nodes();
    AveragedKernels {
        rho_bar: nodes.iter().map(|nd| nd.rho * a.residue_mean(nd.residue_index)).collect(),
        nu_bar: nodes
            .iter()
            .map(|nd| nd.nu.map(|v| v * kappa.residue_mean(nd.residue_index)))
            .collect(),
    }
}

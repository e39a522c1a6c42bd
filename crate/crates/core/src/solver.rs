//! Discrete cell problems and their conjugate-gradient solution.
//!
//! All three problems share one scalar operator applied to each component:
//!
//! `(Hv)(z) = Σ_q w_q [a(z-ξ_q, z)(v(z) - v(z-ξ_q)) - a(z, z+ξ_q)(v(z+ξ_q) - v(z))]`
//!
//! with `w_q = 2 n⁻³ ρ(ξ_q)/|ξ_q|²`. Because `a(z, z+ξ)` depends on `ξ` only
//! through `j mod n`, nodes are grouped by residue before the site loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{wrap_add, wrap_sub, PeriodicField, TangentFrame, XiLattice};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, VectorKernelSpec};
use crate::linalg::{self, Mat3};
use crate::microstructure::{sample_bounds, CoefficientSpec, PairCoefficients};
use crate::reduce;

/// Sites per parallel work item in operator applications.
const SITE_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    #[default]
    None,
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    /// Relative residual target `‖r‖/‖b‖`.
    pub tol: f64,
    /// Iteration cap as a multiple of the unknown count.
    pub max_iter_factor: usize,
    pub preconditioner: Preconditioner,
    /// Tabulate `a(z, z+ξ)` and `κ(z, z+ξ)` once instead of per application.
    pub cache: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter_factor: 10,
            preconditioner: Preconditioner::None,
            cache: false,
        }
    }
}

#[derive(Debug, Clone)]
struct ResidueTerm {
    ri: usize,
    r: [usize; 3],
    /// `Σ 2h³ρ/|ξ|²` over the nodes in this residue class.
    weight: f64,
    /// `Σ 2h³ρ ξ/|ξ|²`
    g_a: [f64; 3],
    /// `Σ h³ ν/|ξ|`
    g_kappa: [f64; 3],
}

/// Kernels, coefficients and lattice shared by every cell problem.
#[derive(Debug, Clone)]
pub struct CellInputs {
    rho: KernelSpec,
    nu: VectorKernelSpec,
    a_spec: CoefficientSpec,
    kappa_spec: CoefficientSpec,
    lattice: XiLattice,
    a: PairCoefficients,
    kappa: PairCoefficients,
    options: SolverOptions,
    terms: Vec<ResidueTerm>,
}

impl CellInputs {
    /// Builds the lattice at grid size `n` and radius `radius`, then validates
    /// the coefficients on it.
    pub fn new(
        rho: KernelSpec,
        nu: VectorKernelSpec,
        a: CoefficientSpec,
        kappa: CoefficientSpec,
        n: usize,
        radius: f64,
        options: SolverOptions,
    ) -> Result<Self> {
        let lattice = XiLattice::build(n, radius, &rho, &nu)?;
        Self::from_lattice(rho, nu, a, kappa, lattice, options)
    }

    pub fn from_lattice(
        rho: KernelSpec,
        nu: VectorKernelSpec,
        a_spec: CoefficientSpec,
        kappa_spec: CoefficientSpec,
        lattice: XiLattice,
        options: SolverOptions,
    ) -> Result<Self> {
        if !(options.tol > 0.0 && options.tol.is_finite()) {
            return Err(Error::config("solver.cg_tol", "must be positive"));
        }
        if options.max_iter_factor == 0 {
            return Err(Error::config("solver.max_iter_factor", "must be positive"));
        }
        let a = PairCoefficients::new(&a_spec, &lattice, options.cache)?;
        let kappa = PairCoefficients::new(&kappa_spec, &lattice, options.cache)?;
        let a_ok = a.min() > 0.0 && a_spec.a0_declared().is_none_or(|a0| a.min() >= a0);
        let k_ok = kappa_spec.sup_bound().is_none_or(|b| kappa.max_abs() <= b);
        let a_sup_ok = a_spec.sup_bound().is_none_or(|b| a.max_abs() <= b);
        for (ok, spec, what) in [(a_ok && a_sup_ok, &a_spec, "a"), (k_ok, &kappa_spec, "kappa")] {
            if !ok {
                let report = sample_bounds(spec, &lattice)?;
                let (message, (z, zp), value) = if what == "a" && !a_ok {
                    (
                        format!("coefficient a has sampled minimum {} (needs a >= a0 > 0)", report.min_sample),
                        report.argmin,
                        report.min_sample,
                    )
                } else {
                    (
                        format!("coefficient {what} exceeds its sup bound"),
                        report.argmax_abs,
                        report.max_abs_sample,
                    )
                };
                return Err(Error::H1Violation { message, z, zp, value });
            }
        }
        let defect = a.symmetry_defect();
        if defect > 1e-8 {
            log::warn!("coefficient a is not symmetric (sampled defect {defect:e}); evaluating as given");
        }
        let h3 = lattice.weight();
        let mut terms: Vec<ResidueTerm> = lattice
            .residues()
            .iter()
            .enumerate()
            .map(|(ri, &r)| ResidueTerm {
                ri,
                r,
                weight: 0.0,
                g_a: [0.0; 3],
                g_kappa: [0.0; 3],
            })
            .collect();
        for nd in lattice.nodes() {
            let t = &mut terms[nd.residue_index];
            let w = 2.0 * h3 * nd.rho / (nd.dist * nd.dist);
            t.weight += w;
            for k in 0..3 {
                t.g_a[k] += w * nd.xi[k];
                t.g_kappa[k] += h3 * nd.nu[k] / nd.dist;
            }
        }
        terms.retain(|t| t.r != [0, 0, 0]);
        Ok(Self {
            rho,
            nu,
            a_spec,
            kappa_spec,
            lattice,
            a,
            kappa,
            options,
            terms,
        })
    }

    pub fn lattice(&self) -> &XiLattice {
        &self.lattice
    }

    pub fn rho(&self) -> &KernelSpec {
        &self.rho
    }

    pub fn nu(&self) -> &VectorKernelSpec {
        &self.nu
    }

    pub fn a_spec(&self) -> &CoefficientSpec {
        &self.a_spec
    }

    pub fn kappa_spec(&self) -> &CoefficientSpec {
        &self.kappa_spec
    }

    pub fn a(&self) -> &PairCoefficients {
        &self.a
    }

    pub fn kappa(&self) -> &PairCoefficients {
        &self.kappa
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    pub fn n(&self) -> usize {
        self.lattice.n()
    }

    /// Same problem data with different solver options.
    pub fn with_options(&self, options: SolverOptions) -> Result<Self> {
        Self::from_lattice(
            self.rho.clone(),
            self.nu.clone(),
            self.a_spec.clone(),
            self.kappa_spec.clone(),
            self.lattice.clone(),
            options,
        )
    }

    /// Same problem with `κ` replaced.
    pub fn with_kappa(&self, kappa: CoefficientSpec) -> Result<Self> {
        Self::from_lattice(
            self.rho.clone(),
            self.nu.clone(),
            self.a_spec.clone(),
            kappa,
            self.lattice.clone(),
            self.options,
        )
    }

    /// Kernels replaced by `ρ_λ = λ⁻³ρ(·/λ)`, `ν_λ = λ⁻³ν(·/λ)` on a lattice of
    /// radius `λR`.
    pub fn scale_lambda(&self, lambda: f64) -> Result<Self> {
        let rho = self.rho.scale_lambda(lambda)?;
        let nu = self.nu.scale_lambda(lambda)?;
        let radius = lambda * self.lattice.radius();
        let tail = rho.tail_mass(radius)?;
        if tail > 1e-6 {
            log::warn!("lambda-scaled kernel has tail mass {tail:e} beyond the lattice radius {radius}");
        }
        let lattice = XiLattice::build(self.lattice.n(), radius, &rho, &nu)?;
        Self::from_lattice(
            rho,
            nu,
            self.a_spec.clone(),
            self.kappa_spec.clone(),
            lattice,
            self.options,
        )
    }

    /// Scalar Hessian applied to every component of `v`.
    pub fn apply_hessian(&self, v: &PeriodicField) -> PeriodicField {
        let n = self.n();
        assert_eq!(v.n(), n, "field grid does not match the lattice");
        let c = v.components();
        let mut out = PeriodicField::zeros(n, c);
        let data = v.data();
        out.data_mut()
            .par_chunks_mut(c * SITE_BLOCK)
            .enumerate()
            .for_each(|(blk, chunk)| {
                for (local, val) in chunk.chunks_mut(c).enumerate() {
                    let s = blk * SITE_BLOCK + local;
                    let coords = self.lattice.site_coords(s);
                    let mut acc = [0.0; 3];
                    for t in &self.terms {
                        let fc = wrap_add(coords, t.r, n);
                        let bc = wrap_sub(coords, t.r, n);
                        let f = self.lattice.site_index(fc);
                        let b = self.lattice.site_index(bc);
                        let cf = self.a.at(s, coords, t.ri);
                        let cb = self.a.at(b, bc, t.ri);
                        for k in 0..c {
                            let x = data[k + c * s];
                            acc[k] += t.weight * (cb * (x - data[k + c * b]) - cf * (data[k + c * f] - x));
                        }
                    }
                    val.copy_from_slice(&acc[..c]);
                }
            });
        out
    }

    /// Diagonal of the scalar Hessian.
    pub fn hessian_diagonal(&self) -> Vec<f64> {
        let n = self.n();
        (0..self.lattice.sites())
            .into_par_iter()
            .map(|s| {
                let coords = self.lattice.site_coords(s);
                let mut d = 0.0;
                for t in &self.terms {
                    let bc = wrap_sub(coords, t.r, n);
                    let b = self.lattice.site_index(bc);
                    d += t.weight * (self.a.at(s, coords, t.ri) + self.a.at(b, bc, t.ri));
                }
                d
            })
            .collect()
    }

    /// Right-hand sides of the two corrector problems (each with three components).
    pub fn corrector_rhs(&self) -> (PeriodicField, PeriodicField) {
        let n = self.n();
        let sites = self.lattice.sites();
        let rows: Vec<[f64; 6]> = (0..sites)
            .into_par_iter()
            .map(|s| {
                let coords = self.lattice.site_coords(s);
                let mut out = [0.0; 6];
                for t in &self.terms {
                    let bc = wrap_sub(coords, t.r, n);
                    let b = self.lattice.site_index(bc);
                    let da = self.a.at(b, bc, t.ri) - self.a.at(s, coords, t.ri);
                    let dk = self.kappa.at(b, bc, t.ri) - self.kappa.at(s, coords, t.ri);
                    for k in 0..3 {
                        out[k] += da * t.g_a[k];
                        out[3 + k] += dk * t.g_kappa[k];
                    }
                }
                out
            })
            .collect();
        let ba = PeriodicField::from_fn(n, 3, |i, k| rows[i[0] + n * (i[1] + n * i[2])][k]);
        let bk = PeriodicField::from_fn(n, 3, |i, k| rows[i[0] + n * (i[1] + n * i[2])][3 + k]);
        (ba, bk)
    }

    /// Splits `J(v) = n⁻³ Σ_z Σ_q h³ [a ρ |Aξ + Dv|²/|ξ|² + κ (Aξ + Dv)·(Lν)/|ξ|]`
    /// into its symmetric and antisymmetric parts.
    pub fn energy_parts(&self, amat: &Mat3, lmat: &Mat3, v: &PeriodicField) -> (f64, f64) {
        assert_eq!(v.components(), 3);
        let h3 = self.lattice.weight();
        struct NodeData {
            axi: [f64; 3],
            rho_w: f64,
            nu_w: [f64; 3],
            ri: usize,
            r: [usize; 3],
        }
        let nodes: Vec<NodeData> = self
            .lattice
            .nodes()
            .iter()
            .map(|nd| {
                let lnu = linalg::mat_vec(lmat, nd.nu);
                NodeData {
                    axi: linalg::mat_vec(amat, nd.xi),
                    rho_w: h3 * nd.rho / (nd.dist * nd.dist),
                    nu_w: lnu.map(|x| h3 * x / nd.dist),
                    ri: nd.residue_index,
                    r: nd.residue,
                }
            })
            .collect();
        let n = self.n();
        let sites = self.lattice.sites();
        let [f, h] = reduce::sum_array::<2, _>(sites, |s| {
            let coords = self.lattice.site_coords(s);
            let vs = v.at(s);
            let mut fs = reduce::Neumaier::new();
            let mut hs = reduce::Neumaier::new();
            for nd in &nodes {
                let fwd = self.lattice.site_index(wrap_add(coords, nd.r, n));
                let vf = v.at(fwd);
                let d = [
                    nd.axi[0] + vf[0] - vs[0],
                    nd.axi[1] + vf[1] - vs[1],
                    nd.axi[2] + vf[2] - vs[2],
                ];
                fs.add(self.a.at(s, coords, nd.ri) * nd.rho_w * linalg::dot(d, d));
                hs.add(self.kappa.at(s, coords, nd.ri) * linalg::dot(d, nd.nu_w));
            }
            [fs.value(), hs.value()]
        });
        (f / sites as f64, h / sites as f64)
    }

    /// `B(u, w) = n⁻³ Σ_z Σ_q h³ a ρ Du·Dw/|ξ|²`, so `B(v, v) = ⟨Hv, v⟩/2`.
    pub fn bilinear(&self, u: &PeriodicField, w: &PeriodicField) -> f64 {
        assert_eq!(u.components(), w.components());
        let n = self.n();
        let c = u.components();
        let sites = self.lattice.sites();
        reduce::sum(sites, |s| {
            let coords = self.lattice.site_coords(s);
            let mut acc = 0.0;
            for t in &self.terms {
                let f = self.lattice.site_index(wrap_add(coords, t.r, n));
                let mut d = 0.0;
                for k in 0..c {
                    d += (u.get(f, k) - u.get(s, k)) * (w.get(f, k) - w.get(s, k));
                }
                acc += 0.5 * t.weight * self.a.at(s, coords, t.ri) * d;
            }
            acc
        }) / sites as f64
    }

    /// Gram matrix `B(f_a, f_b)` of six scalar fields, row-major.
    pub fn gram6(&self, fields: &[PeriodicField; 6]) -> [[f64; 6]; 6] {
        let n = self.n();
        let sites = self.lattice.sites();
        let flat = reduce::sum_array::<36, _>(sites, |s| {
            let coords = self.lattice.site_coords(s);
            let mut acc = [0.0; 36];
            for t in &self.terms {
                let f = self.lattice.site_index(wrap_add(coords, t.r, n));
                let w = 0.5 * t.weight * self.a.at(s, coords, t.ri);
                let mut d = [0.0; 6];
                for (k, fld) in fields.iter().enumerate() {
                    d[k] = fld.get(f, 0) - fld.get(s, 0);
                }
                for i in 0..6 {
                    for j in 0..6 {
                        acc[6 * i + j] += w * d[i] * d[j];
                    }
                }
            }
            acc
        });
        let mut out = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                out[i][j] = flat[6 * i + j] / sites as f64;
            }
        }
        out
    }
}

/// Which cell problem to solve.
#[derive(Debug, Clone, PartialEq)]
pub enum CellMode {
    /// Affine term `ξ`, three decoupled scalar problems.
    CorrectorA,
    /// DMI linear term `κ ν·Dv/|ξ|`.
    CorrectorKappa,
    /// Full problem for a tangent pair `(s, A)`, unknowns in frame coordinates.
    Direct { s: [f64; 3], a: Mat3 },
}

#[derive(Debug, Clone)]
pub struct CellProblem<'a> {
    inputs: &'a CellInputs,
    mode: CellMode,
    frame: Option<TangentFrame>,
}

/// Solver statistics exported as JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveStats {
    pub energy: f64,
    pub residual: f64,
    pub iterations: usize,
    pub el_residual: f64,
}

#[derive(Debug, Clone)]
pub struct CellSolution {
    /// Mean-zero corrector in ℝ³.
    pub v: PeriodicField,
    /// `(V1, V2)` in the tangent frame for direct problems.
    pub frame_coords: Option<PeriodicField>,
    pub frame: Option<TangentFrame>,
    pub energy: f64,
    pub residual: f64,
    pub iterations: usize,
    pub el_residual: f64,
    pub history: Vec<f64>,
}

impl CellSolution {
    pub fn stats(&self) -> SolveStats {
        SolveStats {
            energy: self.energy,
            residual: self.residual,
            iterations: self.iterations,
            el_residual: self.el_residual,
        }
    }
}

impl<'a> CellProblem<'a> {
    pub fn new(inputs: &'a CellInputs, mode: CellMode) -> Result<Self> {
        let frame = match &mode {
            CellMode::Direct { s, a } => {
                linalg::check_tangent_pair(*s, a, 1e-8)?;
                Some(TangentFrame::new(*s)?)
            }
            _ => None,
        };
        Ok(Self { inputs, mode, frame })
    }

    pub fn corrector_a(inputs: &'a CellInputs) -> Self {
        Self {
            inputs,
            mode: CellMode::CorrectorA,
            frame: None,
        }
    }

    pub fn corrector_kappa(inputs: &'a CellInputs) -> Self {
        Self {
            inputs,
            mode: CellMode::CorrectorKappa,
            frame: None,
        }
    }

    pub fn direct(inputs: &'a CellInputs, s: [f64; 3], a: Mat3) -> Result<Self> {
        Self::new(inputs, CellMode::Direct { s, a })
    }

    /// Replaces the tangent frame of a direct problem (same `s`).
    pub fn with_frame(mut self, frame: TangentFrame) -> Result<Self> {
        match &self.mode {
            CellMode::Direct { s, .. } => {
                let d = (0..3).map(|k| (s[k] - frame.s[k]).abs()).fold(0.0, f64::max);
                if d > 1e-8 {
                    return Err(Error::Domain("frame does not belong to s".into()));
                }
                self.frame = Some(frame);
                Ok(self)
            }
            _ => Err(Error::Domain("only direct problems carry a tangent frame".into())),
        }
    }

    pub fn mode(&self) -> &CellMode {
        &self.mode
    }

    pub fn frame(&self) -> Option<&TangentFrame> {
        self.frame.as_ref()
    }

    pub fn unknown_components(&self) -> usize {
        match self.mode {
            CellMode::Direct { .. } => 2,
            _ => 3,
        }
    }

    pub fn apply_hessian(&self, v: &PeriodicField) -> PeriodicField {
        self.inputs.apply_hessian(v)
    }

    /// Mean-zero `b` with the minimizer solving `Hv = -b`.
    pub fn assemble_rhs(&self) -> PeriodicField {
        let (ba, bk) = self.inputs.corrector_rhs();
        let mut b = match &self.mode {
            CellMode::CorrectorA => ba,
            CellMode::CorrectorKappa => bk,
            CellMode::Direct { s, a } => {
                let frame = self.frame.expect("direct problems carry a frame");
                let n = ba.n();
                PeriodicField::from_fn(n, 2, |i, k| {
                    let site = i[0] + n * (i[1] + n * i[2]);
                    let va = [ba.get(site, 0), ba.get(site, 1), ba.get(site, 2)];
                    let vk = [bk.get(site, 0), bk.get(site, 1), bk.get(site, 2)];
                    let full = linalg::mat_vec(a, va);
                    let dmi = linalg::cross(*s, vk);
                    let t = frame.tangent(k);
                    linalg::dot(t, full) + linalg::dot(t, dmi)
                })
            }
        };
        b.project_mean_zero_in_place();
        b
    }

    /// Affine and DMI maps `(A, L)` of this problem's energy.
    fn energy_maps(&self) -> (Mat3, Mat3) {
        match &self.mode {
            CellMode::CorrectorA => (linalg::IDENTITY, linalg::ZERO),
            CellMode::CorrectorKappa => (linalg::ZERO, linalg::IDENTITY),
            CellMode::Direct { s, a } => (*a, linalg::cross_matrix(*s)),
        }
    }

    /// Value of the discrete functional at `v` (three components).
    pub fn energy(&self, v: &PeriodicField) -> f64 {
        let (a, l) = self.energy_maps();
        let (f, h) = self.inputs.energy_parts(&a, &l, v);
        f + h
    }

    /// Expands frame coordinates `(V1, V2)` to `V1 t1 + V2 t2`.
    pub fn expand(&self, coords: &PeriodicField) -> PeriodicField {
        match self.frame {
            Some(fr) => PeriodicField::from_fn(coords.n(), 3, |i, k| {
                let s = i[0] + coords.n() * (i[1] + coords.n() * i[2]);
                coords.get(s, 0) * fr.t1[k] + coords.get(s, 1) * fr.t2[k]
            }),
            None => coords.clone(),
        }
    }

    pub fn solve(&self) -> Result<CellSolution> {
        let b = self.assemble_rhs();
        let out = cg(self.inputs, &b)?;
        let mut hx = self.inputs.apply_hessian(&out.x);
        hx.axpy(1.0, &b);
        let el_residual = hx.max_abs();
        let v = self.expand(&out.x);
        let energy = self.energy(&v);
        let frame_coords = self.frame.map(|_| out.x.clone());
        Ok(CellSolution {
            v,
            frame_coords,
            frame: self.frame,
            energy,
            residual: out.residual,
            iterations: out.iterations,
            el_residual,
            history: out.history,
        })
    }
}

pub fn cg_solve(problem: &CellProblem<'_>) -> Result<CellSolution> {
    problem.solve()
}

/// Solves the direct problem for `(s, A)`.
pub fn solve_direct(inputs: &CellInputs, s: [f64; 3], a: Mat3) -> Result<CellSolution> {
    CellProblem::direct(inputs, s, a)?.solve()
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: PeriodicField,
    pub iterations: usize,
    /// Largest final relative residual over components.
    pub residual: f64,
    /// Largest active relative residual after each iteration.
    pub history: Vec<f64>,
}

fn comp_dot(u: &PeriodicField, w: &PeriodicField, k: usize) -> f64 {
    let c = u.components();
    reduce::sum(u.sites(), |s| u.data()[k + c * s] * w.data()[k + c * s])
}

fn comp_project(f: &mut PeriodicField, k: usize) {
    let c = f.components();
    let m = f.mean(k);
    if m != 0.0 {
        for v in f.data_mut().iter_mut().skip(k).step_by(c) {
            *v -= m;
        }
    }
}

/// Conjugate gradients for `Hx = -b`, one independent recurrence per component.
///
/// Components never mix, so a stacked solve reproduces separate scalar
/// solves bit for bit.
pub fn cg(inputs: &CellInputs, b: &PeriodicField) -> Result<CgOutcome> {
    let cap = inputs.options().max_iter_factor * b.components() * b.sites();
    cg_capped(inputs, b, cap)
}

pub(crate) fn cg_capped(inputs: &CellInputs, b: &PeriodicField, cap: usize) -> Result<CgOutcome> {
    let opts = inputs.options();
    let n = b.n();
    let c = b.components();
    let diag = match opts.preconditioner {
        Preconditioner::Jacobi => Some(inputs.hessian_diagonal()),
        Preconditioner::None => None,
    };
    let precondition = |r: &PeriodicField, k: usize, z: &mut PeriodicField| match &diag {
        Some(d) => {
            for s in 0..r.sites() {
                z.set(s, k, r.get(s, k) / d[s]);
            }
            comp_project(z, k);
        }
        None => {
            for s in 0..r.sites() {
                z.set(s, k, r.get(s, k));
            }
        }
    };

    let mut x = PeriodicField::zeros(n, c);
    let mut r = b.scaled(-1.0);
    let mut z = PeriodicField::zeros(n, c);
    let mut bnorm = [0.0; 3];
    let mut rel = [0.0; 3];
    let mut rz = [0.0; 3];
    let mut active = [false; 3];
    for k in 0..c {
        comp_project(&mut r, k);
        bnorm[k] = comp_dot(&r, &r, k).sqrt();
        active[k] = bnorm[k] > 0.0;
        precondition(&r, k, &mut z);
        rz[k] = comp_dot(&r, &z, k);
    }
    let mut p = z.clone();
    let mut history = Vec::new();
    let mut iterations = 0;
    while active.iter().any(|a| *a) {
        if iterations >= cap {
            return Err(Error::Convergence {
                iterations,
                residual: rel.iter().copied().fold(0.0, f64::max),
                history,
            });
        }
        let ap = inputs.apply_hessian(&p);
        iterations += 1;
        let mut worst: f64 = 0.0;
        for k in 0..c {
            if !active[k] {
                continue;
            }
            let pap = comp_dot(&p, &ap, k);
            if !(pap > 0.0) {
                return Err(Error::NonPositiveCurvature {
                    iteration: iterations,
                    curvature: pap,
                });
            }
            let alpha = rz[k] / pap;
            for s in 0..x.sites() {
                let i = k + c * s;
                x.data_mut()[i] += alpha * p.data()[i];
                r.data_mut()[i] -= alpha * ap.data()[i];
            }
            comp_project(&mut x, k);
            comp_project(&mut r, k);
            rel[k] = comp_dot(&r, &r, k).sqrt() / bnorm[k];
            worst = worst.max(rel[k]);
            if rel[k] <= opts.tol {
                active[k] = false;
                continue;
            }
            precondition(&r, k, &mut z);
            let rz_new = comp_dot(&r, &z, k);
            let beta = rz_new / rz[k];
            rz[k] = rz_new;
            for s in 0..p.sites() {
                let i = k + c * s;
                p.data_mut()[i] = z.data()[i] + beta * p.data()[i];
            }
        }
        for k in 0..c {
            if !active[k] {
                for s in 0..p.sites() {
                    p.set(s, k, 0.0);
                }
            }
        }
        history.push(worst);
    }
    Ok(CgOutcome {
        x,
        iterations,
        residual: rel.iter().copied().fold(0.0, f64::max),
        history,
    })
}

//! ε-scale energies on the unit box, the homogenized limit, correctors and
//! recovery sequences.
//!
//! Ω = (0,1)³ is sampled at cell midpoints `x = (i + ½)/M`. With `P = 1/ε`
//! and `M = P·n`, the shift `εξ_q = j/M` is a whole number of grid steps and
//! `x/ε` falls on cell site `i mod n`.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::Serialize;

use crate::cell::PeriodicField;
use crate::error::{Error, Result};
use crate::expr::{Env, Expression};
use crate::homogenized::{fhom_direct, HomogenizedDensity};
use crate::linalg::{self, Mat3};
use crate::reduce;
use crate::solver::CellInputs;

/// Validated macro grid: `M = P·n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MacroGrid {
    pub m: usize,
    pub p: usize,
    pub n: usize,
}

impl MacroGrid {
    pub fn new(m: usize, n: usize, p: usize) -> Result<Self> {
        if p == 0 || n == 0 || m != p * n {
            return Err(Error::Commensurability { m, n, p: p as f64 });
        }
        Ok(Self { m, p, n })
    }

    pub fn eps(&self) -> f64 {
        1.0 / self.p as f64
    }
}

/// `P = 1/ε`, which must be a positive integer.
pub fn period_from_eps(eps: f64, m: usize, n: usize) -> Result<usize> {
    let p = 1.0 / eps;
    if !(eps > 0.0) || !p.is_finite() || (p - p.round()).abs() > 1e-9 * p.max(1.0) {
        return Err(Error::Commensurability { m, n, p });
    }
    Ok(p.round() as usize)
}

/// Midpoint of grid cell `i` on an `M`-grid.
pub fn position(m: usize, i: [usize; 3]) -> [f64; 3] {
    i.map(|k| (k as f64 + 0.5) / m as f64)
}

fn plane(axis: usize) -> (usize, usize) {
    ((axis + 1) % 3, (axis + 2) % 3)
}

/// Built-in magnetization families.
#[derive(Debug, Clone)]
pub enum MagnetizationFamily {
    Constant { direction: [f64; 3] },
    /// `cos(2π p x_k) e_a + sin(2π p x_k) e_b` with `(k, a, b)` cyclic.
    Helix { axis: usize, pitch: f64 },
    /// Rotation by `θ = 2 atan(exp((x_k - c)/w))` in the plane orthogonal to `e_k`.
    BlochWall { axis: usize, center: f64, width: f64 },
    /// Three expressions in `x1..x3`, normalized at each node.
    Expression(Box<[Expression; 3]>),
}

impl MagnetizationFamily {
    fn validate(&self) -> Result<()> {
        match self {
            Self::Constant { direction } => {
                let l = linalg::norm(*direction);
                if !l.is_finite() || l < 1e-12 {
                    return Err(Error::Input("constant magnetization needs a nonzero direction".into()));
                }
            }
            Self::Helix { axis, pitch } => {
                if *axis > 2 || !pitch.is_finite() {
                    return Err(Error::Input(format!("helix needs axis in 0..=2 and a finite pitch (got {axis}, {pitch})")));
                }
            }
            Self::BlochWall { axis, center, width } => {
                if *axis > 2 || !center.is_finite() || !(*width > 0.0) {
                    return Err(Error::Input("Bloch wall needs axis in 0..=2, finite center and width > 0".into()));
                }
            }
            Self::Expression(_) => {}
        }
        Ok(())
    }

    /// Value and, for closed-form families, the gradient (column `k` is `∂_k m`).
    pub fn eval(&self, x: [f64; 3]) -> Result<([f64; 3], Option<Mat3>)> {
        match self {
            Self::Constant { direction } => {
                let l = linalg::norm(*direction);
                Ok((direction.map(|v| v / l), Some(linalg::ZERO)))
            }
            Self::Helix { axis, pitch } => {
                let (a, b) = plane(*axis);
                let w = 2.0 * PI * pitch;
                let (sn, cs) = (w * x[*axis]).sin_cos();
                let mut m = [0.0; 3];
                m[a] = cs;
                m[b] = sn;
                let mut g = linalg::ZERO;
                g[a][*axis] = -w * sn;
                g[b][*axis] = w * cs;
                Ok((m, Some(g)))
            }
            Self::BlochWall { axis, center, width } => {
                let (a, b) = plane(*axis);
                let u = (x[*axis] - center) / width;
                let theta = 2.0 * u.exp().atan();
                let dtheta = 1.0 / (u.cosh() * width);
                let (sn, cs) = theta.sin_cos();
                let mut m = [0.0; 3];
                m[a] = sn;
                m[b] = cs;
                let mut g = linalg::ZERO;
                g[a][*axis] = cs * dtheta;
                g[b][*axis] = -sn * dtheta;
                Ok((m, Some(g)))
            }
            Self::Expression(exprs) => {
                let env = Env::new().with_x(x);
                let v = [exprs[0].eval(&env)?, exprs[1].eval(&env)?, exprs[2].eval(&env)?];
                let l = linalg::norm(v);
                if !l.is_finite() || l < 1e-12 {
                    return Err(Error::Domain(format!("magnetization expression vanishes at x = {x:?}")));
                }
                Ok((v.map(|c| c / l), None))
            }
        }
    }
}

/// Sphere-valued field on the `M`-grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnetization {
    field: PeriodicField,
    gradient: Option<Vec<Mat3>>,
}

impl Magnetization {
    pub fn sample(family: &MagnetizationFamily, m: usize) -> Result<Self> {
        family.validate()?;
        if m == 0 {
            return Err(Error::Input("macro grid needs M >= 1".into()));
        }
        let mut field = PeriodicField::zeros(m, 3);
        let mut grads = Vec::with_capacity(field.sites());
        let mut analytic = true;
        for s in 0..field.sites() {
            let (v, g) = family.eval(position(m, field.site_coords(s)))?;
            for k in 0..3 {
                field.set(s, k, v[k]);
            }
            match g {
                Some(g) => grads.push(g),
                None => analytic = false,
            }
        }
        let mut out = Self::from_field(field)?;
        if analytic {
            out.gradient = Some(grads);
        }
        Ok(out)
    }

    /// Wraps a field whose nodes are unit vectors within 1e-10.
    pub fn from_field(field: PeriodicField) -> Result<Self> {
        if field.components() != 3 {
            return Err(Error::Input(format!("magnetization needs 3 components, got {}", field.components())));
        }
        for s in 0..field.sites() {
            let l = linalg::norm(value_at(&field, s));
            if (l - 1.0).abs() > 1e-10 {
                return Err(Error::Domain(format!(
                    "|m| = {l} at node {:?} is not 1 within 1e-10",
                    field.site_coords(s)
                )));
            }
        }
        Ok(Self { field, gradient: None })
    }

    /// Independent uniform directions at every node.
    pub fn random<R: Rng>(m: usize, rng: &mut R) -> Self {
        let mut field = PeriodicField::zeros(m, 3);
        for s in 0..field.sites() {
            let v = linalg::random_unit(rng);
            for k in 0..3 {
                field.set(s, k, v[k]);
            }
        }
        Self { field, gradient: None }
    }

    pub fn m(&self) -> usize {
        self.field.n()
    }

    pub fn field(&self) -> &PeriodicField {
        &self.field
    }

    pub fn value(&self, site: usize) -> [f64; 3] {
        value_at(&self.field, site)
    }

    pub fn analytic_gradient(&self) -> Option<&[Mat3]> {
        self.gradient.as_deref()
    }

    /// Closed-form gradient when available, finite differences otherwise.
    pub fn gradient(&self) -> Result<Vec<Mat3>> {
        match &self.gradient {
            Some(g) => Ok(g.clone()),
            None => self.fd_gradient(),
        }
    }

    /// Second-order differences: central inside, one-sided three-point at the faces.
    pub fn fd_gradient(&self) -> Result<Vec<Mat3>> {
        let m = self.m();
        if m < 3 {
            return Err(Error::Input(format!("finite-difference gradient needs M >= 3, got {m}")));
        }
        let inv2h = m as f64 / 2.0;
        let f = &self.field;
        Ok((0..f.sites())
            .map(|s| {
                let i = f.site_coords(s);
                let mut g = linalg::ZERO;
                for k in 0..3 {
                    let at = |off: usize| {
                        let mut j = i;
                        j[k] = off;
                        value_at(f, f.site_index(j))
                    };
                    let col = if i[k] == 0 {
                        let (a, b, c) = (at(0), at(1), at(2));
                        [0, 1, 2].map(|r| (-3.0 * a[r] + 4.0 * b[r] - c[r]) * inv2h)
                    } else if i[k] == m - 1 {
                        let (a, b, c) = (at(m - 1), at(m - 2), at(m - 3));
                        [0, 1, 2].map(|r| (3.0 * a[r] - 4.0 * b[r] + c[r]) * inv2h)
                    } else {
                        let (a, b) = (at(i[k] + 1), at(i[k] - 1));
                        [0, 1, 2].map(|r| (a[r] - b[r]) * inv2h)
                    };
                    for r in 0..3 {
                        g[r][k] = col[r];
                    }
                }
                g
            })
            .collect())
    }

    /// `R m` at every node; the gradient transforms as `R ∇m`.
    pub fn rotated(&self, r: &Mat3) -> Self {
        let mut field = self.field.clone();
        for s in 0..field.sites() {
            let v = linalg::mat_vec(r, self.value(s));
            for k in 0..3 {
                field.set(s, k, v[k]);
            }
        }
        Self {
            field,
            gradient: self
                .gradient
                .as_ref()
                .map(|g| g.iter().map(|gi| linalg::mat_mul(r, gi)).collect()),
        }
    }

    /// `M⁻³ Σ_x |m(x)|²`
    pub fn norm_sq(&self) -> f64 {
        self.field.inner(&self.field)
    }
}

fn value_at(f: &PeriodicField, site: usize) -> [f64; 3] {
    let v = f.at(site);
    [v[0], v[1], v[2]]
}

/// `(F_ε, H_ε)` with boundary bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    #[serde(rename = "F_eps")]
    pub f_eps: f64,
    #[serde(rename = "H_eps")]
    pub h_eps: f64,
    pub total: f64,
    /// Admissible `(x, ξ_q)` pairs with `x + εξ_q ∈ Ω`.
    pub pair_count: u64,
    /// Share of the `h³ρ`-weighted pair mass removed by the boundary.
    pub dropped_fraction: f64,
}

struct MacroNode {
    j: [i64; 3],
    ri: usize,
    rho_w: f64,
    nu_w: [f64; 3],
}

fn macro_nodes(inputs: &CellInputs, grid: &MacroGrid) -> Vec<MacroNode> {
    let lat = inputs.lattice();
    let h3 = lat.weight();
    let eps = grid.eps();
    lat.nodes()
        .iter()
        .map(|nd| {
            let d = eps * nd.dist;
            MacroNode {
                j: nd.j,
                ri: nd.residue_index,
                rho_w: h3 * nd.rho / (d * d),
                nu_w: nd.nu.map(|v| h3 * v / d),
            }
        })
        .collect()
}

fn shifted(i: [usize; 3], j: [i64; 3], m: usize) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for k in 0..3 {
        let y = i[k] as i64 + j[k];
        if y < 0 || y >= m as i64 {
            return None;
        }
        out[k] = y as usize;
    }
    Some(out)
}

fn grid_for(m: &Magnetization, inputs: &CellInputs, p: usize) -> Result<MacroGrid> {
    MacroGrid::new(m.m(), inputs.n(), p)
}

fn cell_site(inputs: &CellInputs, x: [usize; 3]) -> (usize, [usize; 3]) {
    let n = inputs.n();
    let c = x.map(|v| v % n);
    (inputs.lattice().site_index(c), c)
}

/// `F_ε` and `H_ε` at `ε = 1/p` in one pass over the Ω-grid.
pub fn energy(m: &Magnetization, inputs: &CellInputs, p: usize) -> Result<EnergyBreakdown> {
    let grid = grid_for(m, inputs, p)?;
    let nodes = macro_nodes(inputs, &grid);
    let mm = grid.m;
    let field = m.field();
    let sites = field.sites();
    let [f, h] = reduce::sum_array::<2, _>(sites, |s| {
        let x = field.site_coords(s);
        let (cs, cc) = cell_site(inputs, x);
        let mx = value_at(field, s);
        let mut fs = reduce::Neumaier::new();
        let mut hs = reduce::Neumaier::new();
        for nd in &nodes {
            let Some(y) = shifted(x, nd.j, mm) else { continue };
            let my = value_at(field, field.site_index(y));
            let d = [my[0] - mx[0], my[1] - mx[1], my[2] - mx[2]];
            fs.add(inputs.a().at(cs, cc, nd.ri) * nd.rho_w * linalg::dot(d, d));
            hs.add(inputs.kappa().at(cs, cc, nd.ri) * linalg::dot(nd.nu_w, linalg::cross(my, mx)));
        }
        [fs.value(), hs.value()]
    });
    let f = f / sites as f64;
    let h = h / sites as f64;

    let lat = inputs.lattice();
    let mut kept = reduce::Neumaier::new();
    let mut mass = reduce::Neumaier::new();
    let mut pairs = 0u64;
    for nd in lat.nodes() {
        let c: u64 = nd.j.iter().map(|&j| (mm as i64 - j.abs()).max(0) as u64).product();
        pairs += c;
        let w = lat.weight() * nd.rho;
        mass.add(w);
        kept.add(w * c as f64 / sites as f64);
    }
    let dropped = if mass.value() > 0.0 {
        1.0 - kept.value() / mass.value()
    } else {
        0.0
    };
    Ok(EnergyBreakdown {
        f_eps: f,
        h_eps: h,
        total: f + h,
        pair_count: pairs,
        dropped_fraction: dropped,
    })
}

pub fn energy_f_eps(m: &Magnetization, inputs: &CellInputs, p: usize) -> Result<f64> {
    Ok(energy(m, inputs, p)?.f_eps)
}

pub fn energy_h_eps(m: &Magnetization, inputs: &CellInputs, p: usize) -> Result<f64> {
    Ok(energy(m, inputs, p)?.h_eps)
}

/// Difference quotients `1_{Ω_εξ}(x) ρ^{1/2} (m(x+εξ) - m(x))/(ε|ξ|)`, one
/// `M`-grid field per lattice node. Memory grows as `len · 3M³`.
pub fn delta_rho_eps(m: &Magnetization, inputs: &CellInputs, p: usize) -> Result<Vec<PeriodicField>> {
    let grid = grid_for(m, inputs, p)?;
    let eps = grid.eps();
    let field = m.field();
    Ok(inputs
        .lattice()
        .nodes()
        .iter()
        .map(|nd| {
            let w = nd.rho.sqrt() / (eps * nd.dist);
            let mut out = PeriodicField::zeros(grid.m, 3);
            for s in 0..field.sites() {
                if let Some(y) = shifted(field.site_coords(s), nd.j, grid.m) {
                    let my = value_at(field, field.site_index(y));
                    let mx = value_at(field, s);
                    for k in 0..3 {
                        out.set(s, k, w * (my[k] - mx[k]));
                    }
                }
            }
            out
        })
        .collect())
}

/// `Σ_q h³ M⁻³ Σ_x a(x/ε, x/ε + ξ_q) |Δ_q(x)|²`, which reproduces `F_ε`.
pub fn weighted_square_sum(delta: &[PeriodicField], inputs: &CellInputs) -> f64 {
    let lat = inputs.lattice();
    let mut acc = reduce::Neumaier::new();
    for (nd, d) in lat.nodes().iter().zip(delta) {
        let sites = d.sites();
        let s = reduce::sum(sites, |x| {
            let (cs, cc) = cell_site(inputs, d.site_coords(x));
            let v = value_at(d, x);
            inputs.a().at(cs, cc, nd.residue_index) * linalg::dot(v, v)
        });
        acc.add(lat.weight() * s / sites as f64);
    }
    acc.value()
}

/// `C = ‖κ‖²_∞/(2a₀) · Σ_q h³ |ν(ξ_q)|²/ρ(ξ_q)` over the sampled pairs, so that
/// `|H_ε| ≤ F_ε/2 + C‖m‖²`.
pub fn antisym_constant(inputs: &CellInputs) -> Result<f64> {
    let lat = inputs.lattice();
    let mut ratio = reduce::Neumaier::new();
    for nd in lat.nodes() {
        let nn = linalg::dot(nd.nu, nd.nu);
        if nn == 0.0 {
            continue;
        }
        if nd.rho <= 0.0 {
            return Err(Error::H4Violation { xi: nd.xi, nu_norm: nn.sqrt() });
        }
        ratio.add(lat.weight() * nn / nd.rho);
    }
    let k = inputs.kappa().max_abs();
    Ok(k * k / (2.0 * inputs.a().min()) * ratio.value())
}

/// `w(x, z) = ∇m₀(x) v_a(z) + m₀(x) × v_κ(z)`, stored as one cell field per
/// distinct `(m₀(x), ∇m₀(x))`.
#[derive(Debug, Clone)]
pub struct CorrectorField {
    m: usize,
    slices: Vec<PeriodicField>,
    slice_of: Vec<u32>,
}

type PairKey = [u64; 12];

fn pair_key(s: [f64; 3], a: &Mat3) -> PairKey {
    let mut k = [0u64; 12];
    for i in 0..3 {
        k[i] = s[i].to_bits();
        for j in 0..3 {
            k[3 + 3 * i + j] = a[i][j].to_bits();
        }
    }
    k
}

type TangentPair = ([f64; 3], Mat3);

/// `(m₀(x), P_T ∇m₀(x))` at every node, plus the largest projection change.
fn tangent_pairs(m0: &Magnetization) -> Result<(Vec<TangentPair>, f64)> {
    let grads = m0.gradient()?;
    let mut defect = 0.0f64;
    let pairs = grads
        .iter()
        .enumerate()
        .map(|(x, g)| {
            let s = m0.value(x);
            let a = linalg::project_columns(s, g);
            for i in 0..3 {
                for j in 0..3 {
                    defect = defect.max((a[i][j] - g[i][j]).abs());
                }
            }
            (s, a)
        })
        .collect();
    Ok((pairs, defect))
}

impl CorrectorField {
    pub fn build(m0: &Magnetization, h: &HomogenizedDensity) -> Result<Self> {
        let (pairs, _) = tangent_pairs(m0)?;
        let mut index: HashMap<PairKey, u32> = HashMap::new();
        let mut slices = Vec::new();
        let mut slice_of = Vec::with_capacity(pairs.len());
        for (s, a) in &pairs {
            let id = *index.entry(pair_key(*s, a)).or_insert_with(|| {
                slices.push(h.combined_corrector(*s, a));
                (slices.len() - 1) as u32
            });
            slice_of.push(id);
        }
        Ok(Self {
            m: m0.m(),
            slices,
            slice_of,
        })
    }

    /// `w ≡ 0` on an `M`-grid × `n`-cell.
    pub fn zero(m: usize, n: usize) -> Self {
        Self {
            m,
            slices: vec![PeriodicField::zeros(n, 3)],
            slice_of: vec![0; m * m * m],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.slices[0].n()
    }

    pub fn slices(&self) -> &[PeriodicField] {
        &self.slices
    }

    pub fn slice_index(&self, x: usize) -> usize {
        self.slice_of[x] as usize
    }

    pub fn slice(&self, x: usize) -> &PeriodicField {
        &self.slices[self.slice_index(x)]
    }

    pub fn value(&self, x: usize, z: usize) -> [f64; 3] {
        value_at(self.slice(x), z)
    }

    /// `max_{x,z} |w(x,z)·m₀(x)|`
    pub fn tangency_defect(&self, m0: &Magnetization) -> f64 {
        let mut worst = 0.0f64;
        for x in 0..self.slice_of.len() {
            let s = m0.value(x);
            let sl = self.slice(x);
            for z in 0..sl.sites() {
                worst = worst.max(linalg::dot(value_at(sl, z), s).abs());
            }
        }
        worst
    }
}

pub fn corrector_field(m0: &Magnetization, h: &HomogenizedDensity) -> Result<CorrectorField> {
    CorrectorField::build(m0, h)
}

/// `π_{S²}(m₀(x) + ε φ(x, x/ε))` with `x/ε` taken on the cell grid.
pub fn recovery_sequence(m0: &Magnetization, phi: &CorrectorField, p: usize) -> Result<Magnetization> {
    let grid = MacroGrid::new(m0.m(), phi.n(), p)?;
    if phi.m() != m0.m() {
        return Err(Error::Input(format!(
            "corrector field grid {} does not match magnetization grid {}",
            phi.m(),
            m0.m()
        )));
    }
    let eps = grid.eps();
    let n = grid.n;
    let mut field = m0.field().clone();
    for x in 0..field.sites() {
        let i = field.site_coords(x);
        let z = i[0] % n + n * ((i[1] % n) + n * (i[2] % n));
        let w = phi.value(x, z);
        if w == [0.0; 3] {
            continue;
        }
        let base = m0.value(x);
        let v = [0, 1, 2].map(|k| base[k] + eps * w[k]);
        let l = linalg::norm(v);
        if !(l >= 0.5) {
            return Err(Error::StepSize { node: i, norm: l });
        }
        for k in 0..3 {
            field.set(x, k, v[k] / l);
        }
    }
    Ok(Magnetization { field, gradient: None })
}

/// Midpoint-rule `∫_Ω f_hom(m₀, ∇m₀)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomogenizedEnergy {
    pub value: f64,
    /// Largest entry change from projecting `∇m₀` onto the tangent planes.
    pub projection_defect: f64,
}

pub const PROJECTION_DEFECT_LIMIT: f64 = 1e-3;

pub fn energy_homogenized(m0: &Magnetization, h: &HomogenizedDensity, strict: bool) -> Result<HomogenizedEnergy> {
    let (pairs, defect) = tangent_pairs(m0)?;
    if defect > PROJECTION_DEFECT_LIMIT {
        if strict {
            return Err(Error::Domain(format!(
                "gradient projection defect {defect:e} exceeds {PROJECTION_DEFECT_LIMIT:e}"
            )));
        }
        log::warn!("gradient projection defect {defect:e} exceeds {PROJECTION_DEFECT_LIMIT:e}");
    }
    let vals: Vec<f64> = pairs
        .iter()
        .map(|(s, a)| h.fhom_decomposed(*s, a))
        .collect::<Result<_>>()?;
    let value = reduce::sum(vals.len(), |i| vals[i]) / vals.len() as f64;
    Ok(HomogenizedEnergy {
        value,
        projection_defect: defect,
    })
}

/// Midpoint-rule `∫_Ω fhom_direct(m₀, ∇m₀)`, one cell solve per distinct pair.
pub fn energy_homogenized_direct(m0: &Magnetization, inputs: &CellInputs) -> Result<f64> {
    let (pairs, _) = tangent_pairs(m0)?;
    let mut cache: HashMap<PairKey, f64> = HashMap::new();
    let mut vals = Vec::with_capacity(pairs.len());
    for (s, a) in &pairs {
        let key = pair_key(*s, a);
        let v = match cache.get(&key) {
            Some(v) => *v,
            None => {
                let v = fhom_direct(inputs, *s, a)?;
                cache.insert(key, v);
                v
            }
        };
        vals.push(v);
    }
    Ok(reduce::sum(vals.len(), |i| vals[i]) / vals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwoScaleEnergy {
    pub f: f64,
    pub h: f64,
}

impl TwoScaleEnergy {
    pub fn total(&self) -> f64 {
        self.f + self.h
    }
}

/// `F(m₀, w)` and `H(m₀, w)`: the triple sums over `(x, ξ_q, z)`.
pub fn energy_two_scale(m0: &Magnetization, w: &CorrectorField, inputs: &CellInputs) -> Result<TwoScaleEnergy> {
    if w.m() != m0.m() || w.n() != inputs.n() {
        return Err(Error::Input(format!(
            "corrector field is {}-grid × {}-cell, expected {} × {}",
            w.m(),
            w.n(),
            m0.m(),
            inputs.n()
        )));
    }
    let (pairs, _) = tangent_pairs(m0)?;
    let mut cache: HashMap<(usize, PairKey), (f64, f64)> = HashMap::new();
    let mut fs = Vec::with_capacity(pairs.len());
    let mut hs = Vec::with_capacity(pairs.len());
    for (x, (s, a)) in pairs.iter().enumerate() {
        let key = (w.slice_index(x), pair_key(*s, a));
        let (f, h) = match cache.get(&key) {
            Some(v) => *v,
            None => {
                let v = inputs.energy_parts(a, &linalg::cross_matrix(*s), w.slice(x));
                cache.insert(key, v);
                v
            }
        };
        fs.push(f);
        hs.push(h);
    }
    let count = pairs.len() as f64;
    Ok(TwoScaleEnergy {
        f: reduce::sum(fs.len(), |i| fs[i]) / count,
        h: reduce::sum(hs.len(), |i| hs[i]) / count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelSpec, Normalization, RadialProfile, VectorKernelSpec};
    use crate::microstructure::{CoefficientSpec, FourierMode};
    use crate::solver::SolverOptions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs_with(n: usize, a: CoefficientSpec, k: CoefficientSpec) -> CellInputs {
        let rho = KernelSpec::bump_quadratic(1.0)
            .unwrap()
            .with_normalization(Normalization::Quadrature);
        let nu = VectorKernelSpec::axial(RadialProfile::Indicator { radius: 1.0 })
            .unwrap()
            .with_normalization(Normalization::Quadrature);
        CellInputs::new(rho, nu, a, k, n, 1.0, SolverOptions::default()).unwrap()
    }

    fn constant(n: usize, a: f64, k: f64) -> CellInputs {
        inputs_with(n, CoefficientSpec::constant(a).unwrap(), CoefficientSpec::constant(k).unwrap())
    }

    fn one_mode(n: usize) -> CellInputs {
        let mode = |amp| FourierMode {
            amplitude: amp,
            k: [0, 0, 1],
            kp: [0, 0, 1],
            phase: 0.0,
        };
        inputs_with(
            n,
            CoefficientSpec::fourier(1.0, vec![mode(0.5)]).unwrap(),
            CoefficientSpec::fourier(0.5, vec![mode(0.3)]).unwrap(),
        )
    }

    fn helix(m: usize) -> Magnetization {
        Magnetization::sample(&MagnetizationFamily::Helix { axis: 2, pitch: 1.0 }, m).unwrap()
    }

    #[test]
    fn commensurability() {
        assert!(MacroGrid::new(24, 8, 3).is_ok());
        assert!(matches!(MacroGrid::new(20, 8, 3), Err(Error::Commensurability { .. })));
        assert_eq!(period_from_eps(0.25, 12, 3).unwrap(), 4);
        assert!(period_from_eps(0.3, 12, 3).is_err());
        let inp = constant(3, 1.0, 0.0);
        assert!(energy(&helix(10), &inp, 4).is_err());
    }

    #[test]
    fn families_are_unit_and_gradients_match_fd() {
        let fams = [
            MagnetizationFamily::Helix { axis: 2, pitch: 1.0 },
            MagnetizationFamily::Helix { axis: 0, pitch: 2.0 },
            MagnetizationFamily::BlochWall { axis: 0, center: 0.5, width: 0.2 },
        ];
        for fam in &fams {
            let m = Magnetization::sample(fam, 48).unwrap();
            let ga = m.analytic_gradient().unwrap().to_vec();
            let gf = m.fd_gradient().unwrap();
            let mut worst = 0.0f64;
            for (a, b) in ga.iter().zip(&gf) {
                for i in 0..3 {
                    for j in 0..3 {
                        worst = worst.max((a[i][j] - b[i][j]).abs());
                    }
                }
            }
            // Second-order stencils, h = 1/48, third derivatives of order (2π·2)³.
            assert!(worst < 0.8, "{fam:?}: {worst}");
        }
        let c = Magnetization::sample(&MagnetizationFamily::Constant { direction: [0.0, 3.0, 4.0] }, 4).unwrap();
        assert_eq!(c.value(5), [0.0, 0.6, 0.8]);
        let e = MagnetizationFamily::Expression(Box::new([
            Expression::parse("x1 - 0.5").unwrap(),
            Expression::parse("1").unwrap(),
            Expression::parse("0").unwrap(),
        ]));
        let m = Magnetization::sample(&e, 4).unwrap();
        assert!(m.analytic_gradient().is_none());
        assert!(m.gradient().is_ok());
    }

    #[test]
    fn fd_gradient_exact_on_quadratics() {
        // Each component quadratic in x: the stencils are exact, unit norm aside.
        let m = 6;
        let mut f = PeriodicField::zeros(m, 3);
        for s in 0..f.sites() {
            let x = position(m, f.site_coords(s));
            f.set(s, 0, x[0] * x[0]);
            f.set(s, 1, 2.0 * x[1]);
            f.set(s, 2, x[2] * x[0]);
        }
        let mag = Magnetization { field: f, gradient: None };
        let g = mag.fd_gradient().unwrap();
        for s in 0..mag.field().sites() {
            let x = position(m, mag.field().site_coords(s));
            let expect = [[2.0 * x[0], 0.0, 0.0], [0.0, 2.0, 0.0], [x[2], 0.0, x[0]]];
            for i in 0..3 {
                for j in 0..3 {
                    assert!((g[s][i][j] - expect[i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_m_has_zero_energy() {
        let inp = one_mode(3);
        let m = Magnetization::sample(&MagnetizationFamily::Constant { direction: [1.0, 2.0, 2.0] }, 12).unwrap();
        let e = energy(&m, &inp, 4).unwrap();
        assert_eq!(e.f_eps, 0.0);
        assert_eq!(e.h_eps, 0.0);
        assert!(delta_rho_eps(&m, &inp, 4).unwrap().iter().all(|d| d.max_abs() == 0.0));
    }

    #[test]
    fn single_pair_hand_enumeration() {
        // m differs only at the far corner; with n = 1 only nodes with
        // all |j_k| <= 1 reach it from inside.
        let inp = constant(1, 1.0, 0.0);
        let p = 4;
        let mm = 4;
        let mut f = PeriodicField::zeros(mm, 3);
        for s in 0..f.sites() {
            f.set(s, 2, 1.0);
        }
        let corner = f.site_index([3, 3, 3]);
        f.set(corner, 2, 0.0);
        f.set(corner, 0, 1.0);
        let m = Magnetization::from_field(f).unwrap();
        let e = energy_f_eps(&m, &inp, p).unwrap();
        let lat = inp.lattice();
        let eps = 1.0 / p as f64;
        let mut expect = 0.0;
        for nd in lat.nodes() {
            // pairs (x, corner) and (corner, x); |Δm|² = 2 for each
            for x in [[3i64, 3, 3]] {
                for sign in [-1i64, 1] {
                    let other = [0, 1, 2].map(|k| x[k] + sign * nd.j[k]);
                    if other.iter().all(|&v| (0..mm as i64).contains(&v)) {
                        expect += lat.weight() * nd.rho * 2.0 / (eps * nd.dist).powi(2);
                    }
                }
            }
        }
        expect /= (mm * mm * mm) as f64;
        assert!((e - expect).abs() <= 1e-12 * expect, "{e} vs {expect}");
    }

    #[test]
    fn helix_closed_form() {
        // Pairs along j shift by exactly j/M; helix differences are
        // 4 sin²(π j3 / M) independent of x.
        let n = 3;
        let a0 = 1.3;
        let inp = constant(n, a0, 0.0);
        for p in [2usize, 4] {
            let mm = p * n;
            let e = energy(&helix(mm), &inp, p).unwrap();
            let lat = inp.lattice();
            let eps = 1.0 / p as f64;
            let mut oracle = 0.0;
            for nd in lat.nodes() {
                let frac: f64 = nd.j.iter().map(|&j| (1.0 - j.abs() as f64 / mm as f64).max(0.0)).product();
                let s = (PI * nd.j[2] as f64 / mm as f64).sin();
                oracle += lat.weight() * a0 * nd.rho * frac * 4.0 * s * s / (eps * nd.dist).powi(2);
            }
            assert!((e.f_eps - oracle).abs() <= 1e-12 * oracle, "{} vs {oracle}", e.f_eps);
            assert!(e.dropped_fraction > 0.0 && e.dropped_fraction < 1.0);
        }
    }

    #[test]
    fn delta_family_reproduces_f_eps() {
        let inp = one_mode(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Magnetization::random(8, &mut rng);
        let d = delta_rho_eps(&m, &inp, 4).unwrap();
        let f = energy_f_eps(&m, &inp, 4).unwrap();
        let g = weighted_square_sum(&d, &inp);
        assert!((f - g).abs() <= 1e-12 * f);
    }

    #[test]
    fn delta_of_affine_field_is_exact() {
        let inp = constant(2, 1.0, 0.0);
        let mm = 8;
        let g = [[0.3, -0.2, 0.1], [0.0, 0.5, 0.4], [-0.6, 0.2, 0.0]];
        let mut f = PeriodicField::zeros(mm, 3);
        for s in 0..f.sites() {
            let x = position(mm, f.site_coords(s));
            let v = linalg::mat_vec(&g, x);
            for k in 0..3 {
                f.set(s, k, v[k]);
            }
        }
        let m = Magnetization { field: f, gradient: None };
        let d = delta_rho_eps(&m, &inp, 4).unwrap();
        for (nd, fam) in inp.lattice().nodes().iter().zip(&d) {
            let gx = linalg::mat_vec(&g, nd.xi);
            let x = fam.site_index([2, 3, 2]);
            for k in 0..3 {
                let expect = nd.rho.sqrt() * gx[k] / nd.dist;
                assert!((fam.get(x, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kappa_sign_flips_h_and_rotation_keeps_f() {
        let inp = one_mode(2);
        let neg = inp.with_kappa(inp.kappa_spec().scaled(-1.0).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Magnetization::random(8, &mut rng);
        let e1 = energy(&m, &inp, 4).unwrap();
        let e2 = energy(&m, &neg, 4).unwrap();
        assert_eq!(e1.h_eps, -e2.h_eps);
        assert_eq!(e1.f_eps, e2.f_eps);
        let angle: f64 = 0.7;
        let (s, c) = angle.sin_cos();
        let r = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let f2 = energy_f_eps(&m.rotated(&r), &inp, 4).unwrap();
        assert!((e1.f_eps - f2).abs() <= 1e-12 * e1.f_eps);
    }

    #[test]
    fn antisym_bound_on_random_fields() {
        let inp = one_mode(4);
        let c = antisym_constant(&inp).unwrap();
        assert!(c > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let m = Magnetization::random(16, &mut rng);
            let e = energy(&m, &inp, 4).unwrap();
            assert!(e.h_eps.abs() <= 0.5 * e.f_eps + c * m.norm_sq());
        }
        let zero = constant(4, 1.0, 0.0);
        assert_eq!(antisym_constant(&zero).unwrap(), 0.0);
    }

    #[test]
    fn corrector_field_cases() {
        let inp = one_mode(4);
        let h = HomogenizedDensity::build(&inp).unwrap();
        let m0 = helix(8);
        let w = corrector_field(&m0, &h).unwrap();
        assert_eq!(w.slices().len(), 8);
        assert!(w.tangency_defect(&m0) < 1e-8);

        let c = Magnetization::sample(&MagnetizationFamily::Constant { direction: [0.0, 1.0, 0.0] }, 8).unwrap();
        let wc = corrector_field(&c, &h).unwrap();
        assert_eq!(wc.slices().len(), 1);
        let expect = h.combined_corrector([0.0, 1.0, 0.0], &linalg::ZERO);
        assert_eq!(wc.slices()[0], expect);

        let cc = constant(4, 1.0, 0.3);
        let hc = HomogenizedDensity::build(&cc).unwrap();
        assert_eq!(corrector_field(&m0, &hc).unwrap().slices()[0].max_abs(), 0.0);
    }

    #[test]
    fn recovery_sequence_cases() {
        let inp = one_mode(2);
        let h = HomogenizedDensity::build(&inp).unwrap();
        let m0 = helix(8);
        let zero = CorrectorField::zero(8, 2);
        let r0 = recovery_sequence(&m0, &zero, 4).unwrap();
        assert_eq!(r0.field(), m0.field());
        let w = corrector_field(&m0, &h).unwrap();
        let r = recovery_sequence(&m0, &w, 4).unwrap();
        for s in 0..r.field().sites() {
            assert!((linalg::norm(r.value(s)) - 1.0).abs() < 1e-15);
        }
        assert!(recovery_sequence(&m0, &w, 3).is_err());

        // eps·phi = -m0 at every node breaks the step-size guard.
        let m1 = Magnetization::sample(&MagnetizationFamily::Constant { direction: [1.0, 0.0, 0.0] }, 8).unwrap();
        let mut near = CorrectorField::zero(8, 2);
        near.slices[0] = PeriodicField::from_fn(2, 3, |_, k| if k == 0 { -4.0 } else { 0.0 });
        assert!(matches!(recovery_sequence(&m1, &near, 4), Err(Error::StepSize { .. })));
    }

    #[test]
    fn homogenized_energy_cases() {
        let a0 = 1.5;
        let inp = constant(4, a0, 0.0);
        let h = HomogenizedDensity::build(&inp).unwrap();
        let e = energy_homogenized(&helix(16), &h, true).unwrap();
        let expect = a0 / 3.0 * 4.0 * PI * PI;
        assert!((e.value - expect).abs() < 1e-10 * expect, "{} vs {expect}", e.value);

        let inp = one_mode(2);
        let h = HomogenizedDensity::build(&inp).unwrap();
        let s = [0.6, 0.0, 0.8];
        let c = Magnetization::sample(&MagnetizationFamily::Constant { direction: s }, 4).unwrap();
        let e = energy_homogenized(&c, &h, true).unwrap();
        assert!((e.value - h.fhom_decomposed(s, &linalg::ZERO).unwrap()).abs() < 1e-15);

        // FD gradient of a coarse helix is visibly non-tangent.
        let coarse = Magnetization::from_field(helix(4).field().clone()).unwrap();
        assert!(energy_homogenized(&coarse, &h, true).is_err());
        assert!(energy_homogenized(&coarse, &h, false).is_ok());
    }

    #[test]
    fn two_scale_collapses_and_matches_homogenized() {
        let inp = constant(3, 1.2, 0.4);
        let h = HomogenizedDensity::build(&inp).unwrap();
        let m0 = helix(6);
        let zero = CorrectorField::zero(6, 3);
        let ts = energy_two_scale(&m0, &zero, &inp).unwrap();
        let grads = m0.gradient().unwrap();
        let mut fq = 0.0;
        let mut hq = 0.0;
        for (x, g) in grads.iter().enumerate() {
            let s = m0.value(x);
            fq += linalg::frobenius(&linalg::mat_mul(g, &h.tbar), g);
            hq += h.moment_part(s, g) - linalg::frobenius(&linalg::mat_mul(g, &h.tbar), g);
        }
        fq /= grads.len() as f64;
        hq /= grads.len() as f64;
        assert!((ts.f - fq).abs() < 1e-12 * fq);
        assert!((ts.h - hq).abs() < 1e-12 * (1.0 + hq.abs()));

        let inp = one_mode(4);
        let h = HomogenizedDensity::build(&inp).unwrap();
        let m0 = helix(8);
        let w = corrector_field(&m0, &h).unwrap();
        let at_w = energy_two_scale(&m0, &w, &inp).unwrap().total();
        let at_0 = energy_two_scale(&m0, &CorrectorField::zero(8, 4), &inp).unwrap().total();
        let hom = energy_homogenized(&m0, &h, true).unwrap().value;
        let direct = energy_homogenized_direct(&m0, &inp).unwrap();
        assert!((at_w - hom).abs() <= 1e-6 * hom.abs());
        assert!((direct - hom).abs() <= 1e-6 * hom.abs());
        assert!(at_0 >= at_w);
    }
}

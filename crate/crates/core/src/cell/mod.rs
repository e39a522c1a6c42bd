//! Periodic cell grid, ξ-lattice and the nonlocal difference operators on it.
//!
//! The cell `Q = [0,1)³` is sampled at `z = i/n`. Lattice nodes are the grid
//! offsets `ξ = j/n` with `0 < |ξ| ≤ R`, each carrying the midpoint weight
//! `n⁻³`, so every shift `z ↦ z + ξ` is an exact cyclic permutation.

pub mod io;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, Normalization, VectorKernelSpec};
use crate::reduce;

/// Component-valued function on the `n³` periodic cell grid.
///
/// Layout: `data[comp + c * (i1 + n * (i2 + n * i3))]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicField {
    n: usize,
    c: usize,
    data: Vec<f64>,
}

impl PeriodicField {
    pub fn zeros(n: usize, c: usize) -> Self {
        assert!(n > 0 && c > 0, "grid size and component count must be positive");
        Self {
            n,
            c,
            data: vec![0.0; c * n * n * n],
        }
    }

    pub fn from_data(n: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 {
            return Err(Error::Input("grid size and component count must be positive".into()));
        }
        if data.len() != c * n * n * n {
            return Err(Error::Input(format!(
                "expected {} values for n = {n}, c = {c}, got {}",
                c * n * n * n,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite entry at index {i}")));
        }
        Ok(Self { n, c, data })
    }

    /// Builds a field from `f(site, comp)` with `site = [i1, i2, i3]`.
    pub fn from_fn<F: Fn([usize; 3], usize) -> f64>(n: usize, c: usize, f: F) -> Self {
        let mut out = Self::zeros(n, c);
        for s in 0..out.sites() {
            let idx = out.site_coords(s);
            for k in 0..c {
                out.data[k + c * s] = f(idx, k);
            }
        }
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn components(&self) -> usize {
        self.c
    }

    pub fn sites(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn site_index(&self, i: [usize; 3]) -> usize {
        i[0] + self.n * (i[1] + self.n * i[2])
    }

    #[inline]
    pub fn site_coords(&self, s: usize) -> [usize; 3] {
        [s % self.n, (s / self.n) % self.n, s / (self.n * self.n)]
    }

    #[inline]
    pub fn get(&self, site: usize, comp: usize) -> f64 {
        self.data[comp + self.c * site]
    }

    #[inline]
    pub fn set(&mut self, site: usize, comp: usize, v: f64) {
        self.data[comp + self.c * site] = v;
    }

    /// Values of all components at one site.
    #[inline]
    pub fn at(&self, site: usize) -> &[f64] {
        &self.data[self.c * site..self.c * (site + 1)]
    }

    /// `(shift f)(i) = f((i + j) mod n)`.
    pub fn shift(&self, j: [i64; 3]) -> Self {
        let n = self.n as i64;
        let r = [j[0].rem_euclid(n) as usize, j[1].rem_euclid(n) as usize, j[2].rem_euclid(n) as usize];
        let mut out = Self::zeros(self.n, self.c);
        for s in 0..self.sites() {
            let src = self.site_index(wrap_add(self.site_coords(s), r, self.n));
            out.data[self.c * s..self.c * (s + 1)].copy_from_slice(self.at(src));
        }
        out
    }

    pub fn mean(&self, comp: usize) -> f64 {
        reduce::sum(self.sites(), |s| self.get(s, comp)) / self.sites() as f64
    }

    /// Subtracts the per-component mean.
    pub fn project_mean_zero(&self) -> Self {
        let mut out = self.clone();
        out.project_mean_zero_in_place();
        out
    }

    pub fn project_mean_zero_in_place(&mut self) {
        for k in 0..self.c {
            let m = self.mean(k);
            if m != 0.0 {
                for s in 0..self.sites() {
                    self.data[k + self.c * s] -= m;
                }
            }
        }
    }

    /// `⟨u, w⟩ = n⁻³ Σ_z u(z)·w(z)`.
    pub fn inner(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "field shapes differ");
        reduce::sum(self.data.len(), |i| self.data[i] * other.data[i]) / self.sites() as f64
    }

    pub fn norm_l2(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            n: self.n,
            c: self.c,
            data: self.data.iter().map(|v| a * v).collect(),
        }
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Self) {
        assert_eq!(self.data.len(), x.data.len(), "field shapes differ");
        for (y, v) in self.data.iter_mut().zip(&x.data) {
            *y += a * v;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Extracts component `k` as a scalar field.
    pub fn component(&self, k: usize) -> Self {
        Self {
            n: self.n,
            c: 1,
            data: (0..self.sites()).map(|s| self.get(s, k)).collect(),
        }
    }

    /// Stacks scalar fields into one multi-component field.
    pub fn stack(parts: &[PeriodicField]) -> Self {
        assert!(!parts.is_empty());
        let n = parts[0].n;
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Self::zeros(n, c);
        for s in 0..out.sites() {
            let mut k = 0;
            for p in parts {
                assert_eq!(p.n, n);
                for pc in 0..p.c {
                    out.data[k + c * s] = p.get(s, pc);
                    k += 1;
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn wrap_add(i: [usize; 3], r: [usize; 3], n: usize) -> [usize; 3] {
    let w = |a: usize, b: usize| {
        let s = a + b;
        if s >= n {
            s - n
        } else {
            s
        }
    };
    [w(i[0], r[0]), w(i[1], r[1]), w(i[2], r[2])]
}

#[inline]
pub(crate) fn wrap_sub(i: [usize; 3], r: [usize; 3], n: usize) -> [usize; 3] {
    let w = |a: usize, b: usize| if a >= b { a - b } else { a + n - b };
    [w(i[0], r[0]), w(i[1], r[1]), w(i[2], r[2])]
}

/// One ξ-lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeNode {
    /// Integer offset `j`, `ξ = j/n`.
    pub j: [i64; 3],
    pub xi: [f64; 3],
    /// `|ξ|`
    pub dist: f64,
    /// Cached ρ(ξ) after normalization.
    pub rho: f64,
    /// Cached ν(ξ) after normalization.
    pub nu: [f64; 3],
    /// `j mod n` componentwise.
    pub residue: [usize; 3],
    /// Index into [`XiLattice::residues`].
    pub residue_index: usize,
}

/// Lattice-commensurate quadrature for the ξ-integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct XiLattice {
    n: usize,
    radius: f64,
    nodes: Vec<LatticeNode>,
    residues: Vec<[usize; 3]>,
    rho_factor: f64,
    nu_factor: f64,
}

/// Diagnostics reported alongside a lattice.
#[derive(Debug, Clone, Serialize)]
pub struct LatticeInfo {
    pub n: usize,
    pub radius: f64,
    pub nodes: usize,
    pub residues: usize,
    pub weight: f64,
    pub omitted_origin_volume: f64,
    /// Factor applied to the analytic kernel values (1 in analytic mode).
    pub rho_normalization_factor: f64,
    pub nu_normalization_factor: f64,
}

impl XiLattice {
    /// Tabulates ρ and ν on the nodes `0 < |j|/n ≤ radius`.
    pub fn build(n: usize, radius: f64, rho: &KernelSpec, nu: &VectorKernelSpec) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("grid size n must be positive".into()));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Input(format!("lattice radius must be positive, got {radius}")));
        }
        let rn = radius * n as f64;
        let kmax = (rn * (1.0 + 1e-12)).floor() as i64;
        let lim2 = rn * rn * (1.0 + 1e-12);
        let nn = n as i64;
        let mut nodes = Vec::new();
        let mut residue_lookup = std::collections::HashMap::new();
        let mut residues = Vec::new();
        for j3 in -kmax..=kmax {
            for j2 in -kmax..=kmax {
                for j1 in -kmax..=kmax {
                    let d2 = (j1 * j1 + j2 * j2 + j3 * j3) as f64;
                    if d2 == 0.0 || d2 > lim2 {
                        continue;
                    }
                    let xi = [j1 as f64 / n as f64, j2 as f64 / n as f64, j3 as f64 / n as f64];
                    let residue = [
                        j1.rem_euclid(nn) as usize,
                        j2.rem_euclid(nn) as usize,
                        j3.rem_euclid(nn) as usize,
                    ];
                    let residue_index = *residue_lookup.entry(residue).or_insert_with(|| {
                        residues.push(residue);
                        residues.len() - 1
                    });
                    nodes.push(LatticeNode {
                        j: [j1, j2, j3],
                        xi,
                        dist: d2.sqrt() / n as f64,
                        rho: rho.eval(xi)?,
                        nu: nu.eval(xi)?,
                        residue,
                        residue_index,
                    });
                }
            }
        }
        if nodes.is_empty() {
            return Err(Error::Input(format!(
                "lattice radius {radius} contains no nonzero offsets at n = {n}"
            )));
        }
        let h3 = 1.0 / (n * n * n) as f64;
        let mut rho_factor = 1.0;
        let mut nu_factor = 1.0;
        if rho.normalization() == Normalization::Quadrature {
            let mass = reduce::sum(nodes.len(), |q| h3 * nodes[q].rho);
            if !(mass > 0.0) {
                return Err(Error::Input("rho has zero mass on the lattice".into()));
            }
            rho_factor = 1.0 / mass;
        }
        if nu.normalization() == Normalization::Quadrature {
            let mass = reduce::sum(nodes.len(), |q| {
                let v = nodes[q].nu;
                h3 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            });
            if mass > 0.0 {
                nu_factor = 1.0 / mass;
            }
        }
        if rho_factor != 1.0 || nu_factor != 1.0 {
            for node in &mut nodes {
                node.rho *= rho_factor;
                for v in &mut node.nu {
                    *v *= nu_factor;
                }
            }
        }
        Ok(Self {
            n,
            radius,
            nodes,
            residues,
            rho_factor,
            nu_factor,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Quadrature weight `h³ = n⁻³` of every node.
    pub fn weight(&self) -> f64 {
        1.0 / (self.n * self.n * self.n) as f64
    }

    pub fn node(&self, q: usize) -> &LatticeNode {
        &self.nodes[q]
    }

    pub fn nodes(&self) -> &[LatticeNode] {
        &self.nodes
    }

    /// Distinct offsets `j mod n` occurring among the nodes.
    pub fn residues(&self) -> &[[usize; 3]] {
        &self.residues
    }

    pub fn sites(&self) -> usize {
        self.n * self.n * self.n
    }

    #[inline]
    pub(crate) fn site_coords(&self, s: usize) -> [usize; 3] {
        [s % self.n, (s / self.n) % self.n, s / (self.n * self.n)]
    }

    #[inline]
    pub(crate) fn site_index(&self, i: [usize; 3]) -> usize {
        i[0] + self.n * (i[1] + self.n * i[2])
    }

    /// Site index of `z + ξ_q`.
    #[inline]
    pub fn forward(&self, site: [usize; 3], q: usize) -> usize {
        self.site_index(wrap_add(site, self.nodes[q].residue, self.n))
    }

    /// Site index of `z - ξ_q`.
    #[inline]
    pub fn backward(&self, site: [usize; 3], q: usize) -> usize {
        self.site_index(wrap_sub(site, self.nodes[q].residue, self.n))
    }

    pub fn info(&self) -> LatticeInfo {
        LatticeInfo {
            n: self.n,
            radius: self.radius,
            nodes: self.nodes.len(),
            residues: self.residues.len(),
            weight: self.weight(),
            omitted_origin_volume: self.weight(),
            rho_normalization_factor: self.rho_factor,
            nu_normalization_factor: self.nu_factor,
        }
    }

    /// Same nodes with ρ multiplied by `factor`; used for homogeneity checks.
    pub fn with_rho_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for node in &mut out.nodes {
            node.rho *= factor;
        }
        out.rho_factor *= factor;
        out
    }
}

/// Default lattice radius: the kernels' common support, or the radius
/// enclosing `1 - tail_tol` of their mass for unbounded families.
pub fn default_radius(rho: &KernelSpec, nu: &VectorKernelSpec, tail_tol: f64) -> Result<f64> {
    Ok(rho.mass_radius(tail_tol)?.max(nu.mass_radius(tail_tol)?))
}

/// A field family `u(ξ_q, ·)` tabulated over the lattice nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFamily {
    fields: Vec<PeriodicField>,
}

impl NodeFamily {
    pub fn from_fields(fields: Vec<PeriodicField>) -> Self {
        Self { fields }
    }

    pub fn zeros(lattice: &XiLattice, c: usize) -> Self {
        Self {
            fields: vec![PeriodicField::zeros(lattice.n(), c); lattice.len()],
        }
    }

    pub fn fields(&self) -> &[PeriodicField] {
        &self.fields
    }

    pub fn field(&self, q: usize) -> &PeriodicField {
        &self.fields[q]
    }

    pub fn field_mut(&mut self, q: usize) -> &mut PeriodicField {
        &mut self.fields[q]
    }

    /// `Σ_q h³ ⟨u_q, v_q⟩`, summed site-major with nodes inner.
    pub fn inner(&self, other: &Self, lattice: &XiLattice) -> f64 {
        assert_eq!(self.fields.len(), other.fields.len());
        let h3 = lattice.weight();
        let first = &self.fields[0];
        let c = first.components();
        let sites = first.sites();
        reduce::sum(sites, |s| {
            let mut acc = reduce::Neumaier::new();
            for (u, v) in self.fields.iter().zip(&other.fields) {
                let mut d = 0.0;
                for k in 0..c {
                    d += u.get(s, k) * v.get(s, k);
                }
                acc.add(h3 * d);
            }
            acc.value()
        }) / sites as f64
    }
}

/// `S_ρ(w)(ξ_q, z) = ρ(ξ_q)^{1/2} (w(z + ξ_q) - w(z)) / |ξ_q|`.
pub fn s_rho_apply(w: &PeriodicField, lattice: &XiLattice) -> NodeFamily {
    check_grid(w, lattice);
    let c = w.components();
    let fields = lattice
        .nodes()
        .par_iter()
        .enumerate()
        .map(|(q, node)| {
            let scale = node.rho.sqrt() / node.dist;
            let mut out = PeriodicField::zeros(w.n(), c);
            for s in 0..w.sites() {
                let fwd = lattice.forward(lattice.site_coords(s), q);
                for k in 0..c {
                    out.set(s, k, scale * (w.get(fwd, k) - w.get(s, k)));
                }
            }
            out
        })
        .collect();
    NodeFamily { fields }
}

/// `S*_ρ(u)(z) = Σ_q h³ ρ(ξ_q)^{1/2} (u(ξ_q, z - ξ_q) - u(ξ_q, z)) / |ξ_q|`.
pub fn s_rho_adjoint_apply(u: &NodeFamily, lattice: &XiLattice) -> PeriodicField {
    assert_eq!(u.fields.len(), lattice.len(), "family does not match the lattice");
    let n = lattice.n();
    let c = u.fields[0].components();
    let h3 = lattice.weight();
    let scales: Vec<f64> = lattice.nodes().iter().map(|nd| h3 * nd.rho.sqrt() / nd.dist).collect();
    let mut out = PeriodicField::zeros(n, c);
    out.data_mut()
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(s, val)| {
            let site = lattice.site_coords(s);
            let mut acc = vec![reduce::Neumaier::new(); c];
            for (q, f) in u.fields.iter().enumerate() {
                let back = lattice.backward(site, q);
                for k in 0..c {
                    acc[k].add(scales[q] * (f.get(back, k) - f.get(s, k)));
                }
            }
            for k in 0..c {
                val[k] = acc[k].value();
            }
        });
    out
}

/// Discrete `‖w‖_ρ = (Σ_q h³ n⁻³ Σ_z ρ(ξ_q) |w(z+ξ_q) - w(z)|² / |ξ_q|²)^{1/2}`.
pub fn norm_rho(w: &PeriodicField, lattice: &XiLattice) -> f64 {
    norm_rho_sq(w, lattice).sqrt()
}

pub fn norm_rho_sq(w: &PeriodicField, lattice: &XiLattice) -> f64 {
    check_grid(w, lattice);
    let h3 = lattice.weight();
    let c = w.components();
    let scales: Vec<f64> = lattice.nodes().iter().map(|nd| nd.rho.sqrt() / nd.dist).collect();
    reduce::sum(w.sites(), |s| {
        let site = lattice.site_coords(s);
        let mut acc = reduce::Neumaier::new();
        for (q, scale) in scales.iter().enumerate() {
            let fwd = lattice.forward(site, q);
            let mut d = 0.0;
            for k in 0..c {
                let u = scale * (w.get(fwd, k) - w.get(s, k));
                d += u * u;
            }
            acc.add(h3 * d);
        }
        acc.value()
    }) / w.sites() as f64
}

fn check_grid(w: &PeriodicField, lattice: &XiLattice) {
    assert_eq!(
        w.n(),
        lattice.n(),
        "field grid size {} does not match lattice grid size {}",
        w.n(),
        lattice.n()
    );
}

/// Orthonormal frame `(t1, t2, s)` with `t1, t2` spanning `T_s S²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentFrame {
    pub s: [f64; 3],
    pub t1: [f64; 3],
    pub t2: [f64; 3],
}

impl TangentFrame {
    /// Picks the coordinate axis least aligned with `s` (ties to the smallest
    /// index), orthogonalizes it against `s` for `t1`, and sets `t2 = s × t1`.
    pub fn new(s: [f64; 3]) -> Result<Self> {
        let len = norm(s);
        if !len.is_finite() || len < 1e-8 {
            return Err(Error::Degenerate(format!("|s| = {len} is too small for a tangent frame")));
        }
        if (len - 1.0).abs() > 1e-8 {
            return Err(Error::Domain(format!("s must be a unit vector, |s| = {len}")));
        }
        let s = [s[0] / len, s[1] / len, s[2] / len];
        let mut k = 0;
        for a in 1..3 {
            if s[a].abs() < s[k].abs() {
                k = a;
            }
        }
        let mut t1 = [0.0; 3];
        t1[k] = 1.0;
        let proj = s[k];
        for a in 0..3 {
            t1[a] -= proj * s[a];
        }
        let l1 = norm(t1);
        for v in &mut t1 {
            *v /= l1;
        }
        let t2 = cross(s, t1);
        Ok(Self { s, t1, t2 })
    }

    /// Same `s` with `(t1, t2)` rotated by `angle` inside `T_s S²`.
    pub fn rotated(&self, angle: f64) -> Self {
        let (sn, cs) = angle.sin_cos();
        let mut t1 = [0.0; 3];
        let mut t2 = [0.0; 3];
        for a in 0..3 {
            t1[a] = cs * self.t1[a] + sn * self.t2[a];
            t2[a] = -sn * self.t1[a] + cs * self.t2[a];
        }
        Self { s: self.s, t1, t2 }
    }

    pub fn tangent(&self, k: usize) -> [f64; 3] {
        if k == 0 {
            self.t1
        } else {
            self.t2
        }
    }
}

pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::RadialProfile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lattice(n: usize) -> XiLattice {
        let rho = KernelSpec::bump_quadratic(1.0)
            .unwrap()
            .with_normalization(Normalization::Quadrature);
        let nu = VectorKernelSpec::axial(RadialProfile::Indicator { radius: 1.0 })
            .unwrap()
            .with_normalization(Normalization::Quadrature);
        XiLattice::build(n, 1.0, &rho, &nu).unwrap()
    }

    fn random_field(n: usize, c: usize, seed: u64) -> PeriodicField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * n * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PeriodicField::from_data(n, c, data).unwrap()
    }

    #[test]
    fn lattice_excludes_origin_and_is_symmetric() {
        let lat = lattice(4);
        assert!(lat.nodes().iter().all(|nd| nd.j != [0, 0, 0]));
        assert!(lat.nodes().iter().all(|nd| nd.dist <= 1.0 + 1e-12));
        for nd in lat.nodes() {
            let neg = [-nd.j[0], -nd.j[1], -nd.j[2]];
            assert!(lat.nodes().iter().any(|m| m.j == neg));
        }
        let mass: f64 = lat.nodes().iter().map(|nd| nd.rho * lat.weight()).sum();
        assert!((mass - 1.0).abs() < 1e-14);
    }

    #[test]
    fn shift_identities() {
        let f = random_field(4, 3, 1);
        assert_eq!(f.shift([0, 0, 0]), f);
        assert_eq!(f.shift([4, 0, 0]), f);
        assert_eq!(f.shift([1, -2, 3]).shift([-1, 2, -3]), f);
        assert_eq!(f.shift([1, 0, 2]).shift([2, 3, 1]), f.shift([3, 3, 3]));
    }

    #[test]
    fn s_rho_of_constant_vanishes() {
        let lat = lattice(4);
        let w = PeriodicField::from_fn(4, 3, |_, k| k as f64 + 0.5);
        let u = s_rho_apply(&w, &lat);
        assert!(u.fields().iter().all(|f| f.max_abs() == 0.0));
    }

    #[test]
    fn s_rho_single_mode_unrolled() {
        let n = 8;
        let lat = lattice(n);
        let w = PeriodicField::from_fn(n, 3, |i, k| {
            if k == 0 {
                (2.0 * std::f64::consts::PI * i[0] as f64 / n as f64).sin()
            } else {
                0.0
            }
        });
        let u = s_rho_apply(&w, &lat);
        let q = lat.nodes().iter().position(|nd| nd.j == [1, 0, 0]).unwrap();
        let rho = lat.node(q).rho;
        for s in 0..w.sites() {
            let z1 = w.site_coords(s)[0] as f64 / n as f64;
            let tpi = 2.0 * std::f64::consts::PI;
            let expected = rho.sqrt() * ((tpi * (z1 + 1.0 / n as f64)).sin() - (tpi * z1).sin()) * n as f64;
            assert!((u.field(q).get(s, 0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_of_zero_and_constant_families() {
        let lat = lattice(4);
        let zero = NodeFamily::zeros(&lat, 3);
        assert_eq!(s_rho_adjoint_apply(&zero, &lat).max_abs(), 0.0);
        let consts = NodeFamily::from_fields(
            (0..lat.len())
                .map(|q| PeriodicField::from_fn(4, 3, |_, k| (q + k) as f64))
                .collect(),
        );
        assert_eq!(s_rho_adjoint_apply(&consts, &lat).max_abs(), 0.0);
    }

    #[test]
    fn norm_rho_matches_family_norm_and_is_homogeneous() {
        let lat = lattice(4);
        let w = random_field(4, 3, 7);
        let u = s_rho_apply(&w, &lat);
        let a = u.inner(&u, &lat);
        let b = norm_rho_sq(&w, &lat);
        assert!((a - b).abs() <= 1e-14 * b);
        let two = norm_rho(&w.scaled(2.0), &lat);
        assert!((two - 2.0 * norm_rho(&w, &lat)).abs() <= 1e-12 * two);
        let c = PeriodicField::from_fn(4, 3, |_, _| 3.0);
        assert_eq!(norm_rho(&c, &lat), 0.0);
    }

    #[test]
    fn norm_rho_hand_enumeration_n4() {
        // Single mode cos(2π z1) on n = 4: |w(z+ξ)-w(z)|² averaged over z
        // equals 1 - cos(2π ξ1), so ‖w‖² = Σ_q h³ ρ_q (1 - cos 2πξ1)/|ξ|².
        let n = 4;
        let lat = lattice(n);
        let w = PeriodicField::from_fn(n, 1, |i, _| (2.0 * std::f64::consts::PI * i[0] as f64 / n as f64).cos());
        let mut expected = 0.0;
        for nd in lat.nodes() {
            let j1 = nd.j[0].rem_euclid(4);
            let one_minus_cos = [0.0, 1.0, 2.0, 1.0][j1 as usize];
            expected += lat.weight() * nd.rho * one_minus_cos / (nd.dist * nd.dist);
        }
        let got = norm_rho_sq(&w, &lat);
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn project_mean_zero_properties() {
        let w = random_field(4, 3, 3);
        let p = w.project_mean_zero();
        for k in 0..3 {
            assert!(p.mean(k).abs() < 1e-14);
        }
        let pp = p.project_mean_zero();
        for (a, b) in p.data().iter().zip(pp.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
        let c = PeriodicField::from_fn(4, 2, |_, k| 1.5 + k as f64);
        assert!(c.project_mean_zero().max_abs() < 1e-15);
    }

    #[test]
    fn tangent_frame_axis_cases() {
        let f = TangentFrame::new([0.0, 0.0, 1.0]).unwrap();
        assert_eq!(f.t1, [1.0, 0.0, 0.0]);
        assert_eq!(f.t2, [0.0, 1.0, 0.0]);
        let f = TangentFrame::new([1.0, 0.0, 0.0]).unwrap();
        assert_eq!(f.t1, [0.0, 1.0, 0.0]);
        assert_eq!(f.t2, [0.0, 0.0, 1.0]);
        assert!(matches!(TangentFrame::new([0.0, 0.0, 1e-9]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tangent_frame_random_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let l = norm(v);
            let s = [v[0] / l, v[1] / l, v[2] / l];
            let f = TangentFrame::new(s).unwrap();
            assert!((norm(f.t1) - 1.0).abs() < 1e-12);
            assert!((norm(f.t2) - 1.0).abs() < 1e-12);
            assert!(dot3(f.t1, f.s).abs() < 1e-12);
            assert!(dot3(f.t2, f.s).abs() < 1e-12);
            assert!(dot3(f.t1, f.t2).abs() < 1e-12);
            assert!((dot3(cross(f.t1, f.t2), f.s) - 1.0).abs() < 1e-12);
        }
    }
}

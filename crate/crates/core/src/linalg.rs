//! Small fixed-size vector and matrix helpers.

use crate::error::{Error, Result};

/// Row-major 3×3 matrix; `m[i][j]` is row `i`, column `j`.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
pub const ZERO: Mat3 = [[0.0; 3]; 3];

pub use crate::cell::{cross, dot3 as dot, norm};

pub fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn column(m: &Mat3, j: usize) -> [f64; 3] {
    [m[0][j], m[1][j], m[2][j]]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = ZERO;
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = ZERO;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Frobenius product `A:B`.
pub fn frobenius(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += a[i][j] * b[i][j];
        }
    }
    s
}

/// Matrix of `v ↦ s × v`.
pub fn cross_matrix(s: [f64; 3]) -> Mat3 {
    [[0.0, -s[2], s[1]], [s[2], 0.0, -s[0]], [-s[1], s[0], 0.0]]
}

/// `(I - s sᵀ) A`: every column projected onto the plane orthogonal to `s`.
pub fn project_columns(s: [f64; 3], a: &Mat3) -> Mat3 {
    let mut out = *a;
    for j in 0..3 {
        let c = column(a, j);
        let d = dot(c, s);
        for i in 0..3 {
            out[i][j] = c[i] - d * s[i];
        }
    }
    out
}

/// Checks that `s` is a unit vector and every column of `A` is orthogonal to it.
pub fn check_tangent_pair(s: [f64; 3], a: &Mat3, tol: f64) -> Result<()> {
    let len = norm(s);
    if !len.is_finite() || (len - 1.0).abs() > tol {
        return Err(Error::Domain(format!("|s| = {len} is not 1 within {tol:e}")));
    }
    let scale = 1.0 + a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for j in 0..3 {
        let d = dot(column(a, j), s);
        if !d.is_finite() || d.abs() > tol * scale {
            return Err(Error::Domain(format!(
                "column {} of A is not tangent to s: A e_{}·s = {d:e}",
                j + 1,
                j + 1
            )));
        }
    }
    Ok(())
}

/// Uniform random unit vector, by rejection from the unit ball.
pub fn random_unit<R: rand::Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let l = norm(v);
        if l > 1e-3 && l <= 1.0 {
            return v.map(|x| x / l);
        }
    }
}

/// Random `(s, A)` with `A` having columns in `T_s S²`, entries of order one.
pub fn random_tangent_pair<R: rand::Rng>(rng: &mut R) -> ([f64; 3], Mat3) {
    let s = random_unit(rng);
    let mut g = ZERO;
    for row in &mut g {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    (s, project_columns(s, &g))
}

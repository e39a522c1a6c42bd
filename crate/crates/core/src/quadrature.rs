//! Reference quadratures for kernel masses, tails and moments.
//!
//! These work on the continuum kernels, independently of the ξ-lattice.

use std::sync::OnceLock;

use gauss_quad::legendre::GaussLegendre;

const DEGREE: usize = 24;

fn rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        GaussLegendre::new(DEGREE)
            .expect("degree >= 2")
            .as_node_weight_pairs()
            .to_vec()
    })
}

/// Composite Gauss–Legendre integral of `f` over `[a, b]` with `panels` equal panels.
pub fn integrate<F: FnMut(f64) -> f64>(a: f64, b: f64, panels: usize, mut f: F) -> f64 {
    if b <= a {
        return 0.0;
    }
    let panels = panels.max(1);
    let h = (b - a) / panels as f64;
    let mut acc = crate::reduce::Neumaier::new();
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for &(x, w) in rule() {
            acc.add(w * f(lo + 0.5 * h * (x + 1.0)));
        }
    }
    0.5 * h * acc.value()
}

/// `∫_{r0 ≤ |ξ| ≤ r1} f(ξ) dξ` by a product rule in spherical coordinates:
/// composite Gauss–Legendre in `r` and `cos θ`, trapezoid in `φ`.
pub fn shell_integral<F: FnMut([f64; 3]) -> f64>(r0: f64, r1: f64, panels: usize, mut f: F) -> f64 {
    const NPHI: usize = 64;
    const THETA_PANELS: usize = 4;
    integrate(r0, r1, panels, |r| {
        let angular = integrate(-1.0, 1.0, THETA_PANELS, |ct| {
            let st = (1.0 - ct * ct).max(0.0).sqrt();
            let mut acc = 0.0;
            for k in 0..NPHI {
                let phi = 2.0 * std::f64::consts::PI * (k as f64) / NPHI as f64;
                acc += f([r * st * phi.cos(), r * st * phi.sin(), r * ct]);
            }
            acc * 2.0 * std::f64::consts::PI / NPHI as f64
        });
        angular * r * r
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exactness() {
        let v = integrate(0.0, 2.0, 1, |x| x.powi(5));
        assert!((v - 64.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ball_volume() {
        let v = shell_integral(0.0, 1.0, 2, |_| 1.0);
        assert!((v - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-12);
    }
}

//! Closed-form spectral analysis of two-point-mass ensembles.
//!
//! For a base measure p delta_{a1} + (1-p) delta_{a2} convolved with a
//! semicircle of variance v, the Stieltjes transform satisfies a cubic in m,
//! so the flow can be evaluated exactly. Cusp formation corresponds to a
//! triple root of that cubic; solving the triple-root system gives the cusp
//! time, location and slope without any density sampling. These values serve
//! as an independent cross-check for the generic flow machinery.

use num_complex::Complex64;

use crate::error::{CuspError, Result};

/// Stieltjes transform of the bare two-atom measure.
pub fn base_m(p: f64, a1: f64, a2: f64, z: Complex64) -> Complex64 {
    p / (a1 - z) + (1.0 - p) / (a2 - z)
}

/// All roots of c3 x^3 + c2 x^2 + c1 x + c0 = 0 with complex coefficients.
fn cubic_roots(c3: Complex64, c2: Complex64, c1: Complex64, c0: Complex64) -> [Complex64; 3] {
    let b = c2 / c3;
    let c = c1 / c3;
    let d = c0 / c3;
    // depressed: x = t - b/3, t^3 + pt + q = 0
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let disc = (q * q / 4.0 + p * p * p / 27.0).sqrt();
    let mut u3 = -q / 2.0 + disc;
    if u3.norm() < (q / 2.0 + disc).norm() {
        u3 = -q / 2.0 - disc;
    }
    let shift = -b / 3.0;
    if u3.norm() == 0.0 {
        return [shift; 3];
    }
    let u = u3.cbrt();
    let omega = Complex64::new(-0.5, 0.75f64.sqrt());
    let mut roots = [Complex64::default(); 3];
    for (k, r) in roots.iter_mut().enumerate() {
        let uk = u * omega.powu(k as u32);
        *r = uk - p / (3.0 * uk) + shift;
    }
    roots
}

/// Stieltjes transform of the two-atom measure convolved with a semicircle of
/// variance `v`, evaluated exactly through the defining cubic.
///
/// `seed` selects the branch by proximity when more than one root is Herglotz.
pub fn flow_m(
    p: f64,
    a1: f64,
    a2: f64,
    v: f64,
    z: Complex64,
    seed: Option<Complex64>,
) -> Result<Complex64> {
    if z.im <= 0.0 {
        return Err(CuspError::DomainError("Im z must be positive".into()));
    }
    if v == 0.0 {
        return Ok(base_m(p, a1, a2, z));
    }
    let q = 1.0 - p;
    let a = a1 - z;
    let b = a2 - z;
    // v^2 m^3 - (A+B) v m^2 + (AB + v) m - (p B + q A) = 0
    let roots = cubic_roots(
        Complex64::new(v * v, 0.0),
        -(a + b) * v,
        a * b + v,
        -(p * b + q * a),
    );
    let herglotz: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > 0.0).collect();
    let pick = match (herglotz.len(), seed) {
        (0, _) => {
            return Err(CuspError::NonConvergence(format!(
                "no Herglotz root of the flow cubic at z = {z}"
            )))
        }
        (1, _) => herglotz[0],
        (_, Some(s)) => herglotz
            .iter()
            .copied()
            .min_by(|x, y| (x - s).norm().partial_cmp(&(y - s).norm()).unwrap())
            .unwrap(),
        (_, None) => {
            // fall back to the branch closest to the large-z asymptote
            let asym = -1.0 / z;
            herglotz
                .iter()
                .copied()
                .min_by(|x, y| (x - asym).norm().partial_cmp(&(y - asym).norm()).unwrap())
                .unwrap()
        }
    };
    Ok(pick)
}

/// Cusp data of the two-atom flow: total variance, location, transform value
/// and slope at the moment the two support intervals merge.
#[derive(Clone, Copy, Debug)]
pub struct CuspPoint {
    pub variance: f64,
    pub location: f64,
    pub m: f64,
    pub gamma: f64,
}

/// Solve the triple-root system F = F_m = F_mm = 0 for a discrete base
/// measure, where F(m, z, v) = m - sum_j w_j / (a_j - z - v m).
///
/// A root of this system is a point where two support intervals of the
/// convolved density merge: the cusp location z, the flow variance v at which
/// it forms, and the (real) transform value m there.
pub fn cusp_point_atoms(atoms: &[(f64, f64)], seed: (f64, f64, f64)) -> Result<CuspPoint> {
    let (mut m, mut z, mut v) = seed;
    let sums = |m: f64, z: f64, v: f64| -> Option<[f64; 5]> {
        let mut s = [0.0; 5];
        for &(a, w) in atoms {
            let d = a - z - v * m;
            if d == 0.0 {
                return None;
            }
            for (k, sk) in s.iter_mut().enumerate().skip(1) {
                *sk += w / d.powi(k as i32);
            }
        }
        Some(s)
    };
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for _ in 0..200 {
        let s = sums(m, z, v).ok_or_else(|| {
            CuspError::NonConvergence("cusp Newton hit a pole of the two-atom transform".into())
        })?;
        let g = [m - s[1], 1.0 - v * s[2], -2.0 * v * v * s[3]];
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if best.map_or(true, |(bn, ..)| norm < bn) {
            best = Some((norm, m, z, v));
        }
        if norm < 1e-13 {
            break;
        }
        // rows: d(F, F_m, F_mm) / d(m, z, v)
        let jac = [
            [1.0 - v * s[2], -s[2], -m * s[2]],
            [-2.0 * v * v * s[3], -2.0 * v * s[3], -s[2] - 2.0 * m * v * s[3]],
            [-6.0 * v * v * v * s[4], -6.0 * v * v * s[4], -4.0 * v * s[3] - 6.0 * m * v * v * s[4]],
        ];
        let det = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
            - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
            + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
        if det.abs() < 1e-300 {
            return Err(CuspError::NonConvergence("singular Jacobian in cusp Newton".into()));
        }
        // Cramer's rule for the 3x3 step
        let col = |idx: usize| -> f64 {
            let mut a = [[0.0; 3]; 3];
            for r in 0..3 {
                for ccol in 0..3 {
                    a[r][ccol] = if ccol == idx { -g[r] } else { jac[r][ccol] };
                }
            }
            (a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]))
                / det
        };
        let (dm, dz, dv) = (col(0), col(1), col(2));
        let mut scale = 1.0;
        // keep v positive
        while v + scale * dv <= 0.0 && scale > 1e-8 {
            scale *= 0.5;
        }
        m += scale * dm;
        z += scale * dz;
        v += scale * dv;
    }
    let (norm, m, z, v) = best.unwrap();
    if norm > 1e-10 {
        return Err(CuspError::NonConvergence(format!(
            "cusp Newton stalled at residual {norm:.3e}"
        )));
    }
    let s = sums(m, z, v).unwrap();
    // local expansion: density grows like (sqrt(3)/2 pi) |6 F_z / F_mmm|^(1/3) |w|^(1/3)
    let kappa = 6.0 * (-s[2]) / (-6.0 * v * v * v * s[4]);
    if !kappa.is_finite() || kappa == 0.0 {
        return Err(CuspError::NonConvergence("degenerate cusp expansion".into()));
    }
    Ok(CuspPoint { variance: v, location: z, m, gamma: kappa.abs().powf(0.25) })
}

/// Two-atom convenience wrapper around [`cusp_point_atoms`].
pub fn cusp_point(p: f64, a1: f64, a2: f64, seed: (f64, f64, f64)) -> Result<CuspPoint> {
    cusp_point_atoms(&[(a1, p), (a2, 1.0 - p)], seed)
}

/// Symmetric reference: atoms at +-1 merge at variance 1 with slope 1.
pub fn symmetric_cusp() -> CuspPoint {
    CuspPoint { variance: 1.0, location: 0.0, m: 0.0, gamma: 1.0 }
}

/// A two-atom ensemble distinct from the symmetric reference, rescaled so its
/// cusp slope is exactly 1.
///
/// The cusp variance of the rescaled ensemble is gamma_p^2 v*_p < 1; a flow
/// that should reach the cusp at a prescribed time t* simply starts from the
/// ensemble with static variance `cusp.variance - t*`.
#[derive(Clone, Copy, Debug)]
pub struct MatchedEnsemble {
    pub p: f64,
    pub a_plus: f64,
    pub a_minus: f64,
    pub cusp: CuspPoint,
}

pub fn matched_asymmetric(p: f64) -> Result<MatchedEnsemble> {
    let mut cp = None;
    for &z_seed in &[0.0, -0.15 * (2.0 * p - 1.0).signum(), 0.15, -0.15, 0.3, -0.3] {
        if let Ok(c) = cusp_point(p, 1.0, -1.0, (0.0, z_seed, 1.0)) {
            cp = Some(c);
            break;
        }
    }
    let cp = cp.ok_or_else(|| {
        CuspError::NonConvergence(format!("no cusp point found for weight p = {p}"))
    })?;
    let s = cp.gamma;
    Ok(MatchedEnsemble {
        p,
        a_plus: s,
        a_minus: -s,
        cusp: CuspPoint {
            variance: s * s * cp.variance,
            location: s * cp.location,
            m: cp.m / s,
            gamma: 1.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_solver_roundtrip() {
        let (c3, c2, c1, c0) = (
            Complex64::new(1.0, 0.3),
            Complex64::new(-2.0, 1.0),
            Complex64::new(0.5, -0.7),
            Complex64::new(1.2, 0.1),
        );
        for r in cubic_roots(c3, c2, c1, c0) {
            let val = ((c3 * r + c2) * r + c1) * r + c0;
            assert!(val.norm() < 1e-9, "residual {val}");
        }
    }

    #[test]
    fn delta_convolved_with_semicircle() {
        // single atom at 0 (p=1 collapses both atoms): m is the semicircle transform
        let z = Complex64::new(0.3, 0.2);
        let m = flow_m(0.5, 0.0, 0.0, 1.0, z, None).unwrap();
        let exact = crate::density::semicircle_m(1.0, z);
        assert!((m - exact).norm() < 1e-12);
    }

    #[test]
    fn flow_matches_subordination() {
        let z = Complex64::new(0.4, 1e-6);
        let (p, a1, a2, v) = (0.6, 1.1, -0.9, 0.8);
        let m = flow_m(p, a1, a2, v, z, None).unwrap();
        let defect = (m - base_m(p, a1, a2, z + v * m)).norm();
        assert!(defect < 1e-10, "defect {defect}");
        assert!(m.im > 0.0);
    }

    #[test]
    fn symmetric_cusp_from_newton() {
        let cp = cusp_point(0.5, 1.0, -1.0, (0.05, 0.05, 0.9)).unwrap();
        assert!((cp.variance - 1.0).abs() < 1e-10);
        assert!(cp.location.abs() < 1e-10);
        assert!((cp.gamma - 1.0).abs() < 1e-10);
    }

    #[test]
    fn symmetric_density_above_cusp() {
        // at variance v > 1 the density at 0 is sqrt(v-1)/(pi v)
        let v = 1.2f64;
        let m = flow_m(0.5, 1.0, -1.0, v, Complex64::new(0.0, 1e-9), None).unwrap();
        let rho = m.im / std::f64::consts::PI;
        let exact = (v - 1.0).sqrt() / (std::f64::consts::PI * v);
        assert!((rho - exact).abs() < 1e-6, "rho {rho} exact {exact}");
    }

    #[test]
    fn matched_ensemble_has_unit_slope() {
        let me = matched_asymmetric(0.65).unwrap();
        assert!((me.cusp.gamma - 1.0).abs() < 1e-10, "gamma {}", me.cusp.gamma);
        // the slope trade-off costs variance: gamma^2 v* < 1 off symmetry
        assert!(me.cusp.variance < 1.0 && me.cusp.variance > 0.5, "v* {}", me.cusp.variance);
        // genuinely different from the symmetric reference
        assert!((me.a_plus - 1.0).abs() > 1e-3);
        assert!(me.cusp.location.abs() > 1e-3);
        // verify against the raw Newton solution of the scaled atoms
        let seed = (me.cusp.m, me.cusp.location, me.cusp.variance);
        let cp = cusp_point(me.p, me.a_plus, me.a_minus, seed).unwrap();
        assert!((cp.variance - me.cusp.variance).abs() < 1e-9);
        assert!((cp.gamma - 1.0).abs() < 1e-9);
        assert!((cp.location - me.cusp.location).abs() < 1e-9);
    }
}

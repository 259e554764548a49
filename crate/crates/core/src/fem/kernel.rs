//! Element-level integrals for the coupled phase/concentration system.
//!
//! Local degrees of freedom are interleaved per node: `2a` is the phase value
//! of local node `a`, `2a + 1` its concentration.

use serde::{Deserialize, Serialize};

use super::scalar::Real;
use crate::materials::PhysicsConstants;

/// Regularization inside `|grad phi|`.
pub const GRAD_SMOOTHING: f64 = 1e-8;

const GAUSS: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
const REF_NODES: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
const GAUSS_POINTS: [[f64; 2]; 4] = [
    [-GAUSS, -GAUSS],
    [GAUSS, -GAUSS],
    [GAUSS, GAUSS],
    [-GAUSS, GAUSS],
];

/// 2x2 Gauss rule on the reference square. All weights are one.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureRule {
    pub points: [[f64; 2]; 4],
    pub weights: [f64; 4],
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self {
            points: GAUSS_POINTS,
            weights: [1.0; 4],
        }
    }
}

/// Mass matrix used for the time-derivative terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassMatrix {
    /// Consistent for both fields.
    Consistent,
    /// Row-sum lumped (diagonal) for both fields.
    Lumped,
    /// Consistent for the phase, lumped for the concentration.
    #[default]
    LumpedConcentration,
}

/// Bilinear shape functions evaluated at the quadrature points of a
/// rectangular `hx x hy` element.
#[derive(Debug, Clone)]
pub struct ElementBasis {
    /// `n[q][a]`
    pub n: [[f64; 4]; 4],
    /// `grad[q][a] = [dN/dx, dN/dy]`
    pub grad: [[[f64; 2]; 4]; 4],
    /// Quadrature weight times Jacobian determinant.
    pub wdet: [f64; 4],
    /// Element mass matrices for the phase and concentration rows.
    pub mass: [[f64; 4]; 4],
    pub mass_c: [[f64; 4]; 4],
}

impl ElementBasis {
    pub fn rectangle(hx: f64, hy: f64, mass: MassMatrix) -> Self {
        let rule = QuadratureRule::default();
        let mut n = [[0.0; 4]; 4];
        let mut grad = [[[0.0; 2]; 4]; 4];
        let mut wdet = [0.0; 4];
        for (q, [xi, eta]) in rule.points.iter().copied().enumerate() {
            for (a, [xa, ya]) in REF_NODES.iter().copied().enumerate() {
                n[q][a] = 0.25 * (1.0 + xa * xi) * (1.0 + ya * eta);
                grad[q][a] = [
                    0.25 * xa * (1.0 + ya * eta) * 2.0 / hx,
                    0.25 * ya * (1.0 + xa * xi) * 2.0 / hy,
                ];
            }
            wdet[q] = rule.weights[q] * 0.25 * hx * hy;
        }
        let mut m = [[0.0; 4]; 4];
        for q in 0..4 {
            for a in 0..4 {
                for b in 0..4 {
                    m[a][b] += wdet[q] * n[q][a] * n[q][b];
                }
            }
        }
        let mut lumped = [[0.0; 4]; 4];
        for a in 0..4 {
            lumped[a][a] = m[a].iter().sum();
        }
        let (mass, mass_c) = match mass {
            MassMatrix::Consistent => (m, m),
            MassMatrix::Lumped => (lumped, lumped),
            MassMatrix::LumpedConcentration => (m, lumped),
        };
        Self {
            n,
            grad,
            wdet,
            mass,
            mass_c,
        }
    }
}

/// Nernst-Brunner forcing in the phase equation, `-(k / rho_s)(C_sat - C)|grad phi|`.
#[inline]
pub fn dissolution_forcing<T: Real>(k: T, c: T, grad_norm: T, constants: &PhysicsConstants) -> T {
    -(k / T::cst(constants.rho_s)) * (T::cst(constants.c_sat) - c) * grad_norm
}

/// Solute source `k (C_sat - C)|grad phi|`.
#[inline]
pub fn source_term<T: Real>(k: T, c: T, grad_norm: T, constants: &PhysicsConstants) -> T {
    k * (T::cst(constants.c_sat) - c) * grad_norm
}

/// Per-element nodal values entering the residual.
#[derive(Debug, Clone, Copy)]
pub struct ElementValues<T> {
    pub phi: [T; 4],
    pub c: [T; 4],
    pub phi_prev: [T; 4],
    pub c_prev: [T; 4],
    pub k: T,
}

#[derive(Debug, Clone, Copy)]
struct PointValues<T> {
    phi: T,
    c: T,
    grad_phi: [T; 2],
    grad_c: [T; 2],
}

#[inline]
fn interpolate<T: Real>(basis: &ElementBasis, q: usize, v: &ElementValues<T>) -> PointValues<T> {
    let z = T::cst(0.0);
    let mut p = PointValues {
        phi: z,
        c: z,
        grad_phi: [z, z],
        grad_c: [z, z],
    };
    for a in 0..4 {
        let na = T::cst(basis.n[q][a]);
        let gx = T::cst(basis.grad[q][a][0]);
        let gy = T::cst(basis.grad[q][a][1]);
        p.phi += na * v.phi[a];
        p.c += na * v.c[a];
        p.grad_phi[0] += gx * v.phi[a];
        p.grad_phi[1] += gy * v.phi[a];
        p.grad_c[0] += gx * v.c[a];
        p.grad_c[1] += gy * v.c[a];
    }
    p
}

/// `sqrt(|g|^2 + eps^2) - eps`: differentiable everywhere and exactly zero
/// for a uniform field.
#[inline]
fn smoothed_norm<T: Real>(g: [T; 2]) -> T {
    smoothed_root(g) - T::cst(GRAD_SMOOTHING)
}

#[inline]
fn smoothed_root<T: Real>(g: [T; 2]) -> T {
    (g[0] * g[0] + g[1] * g[1] + T::cst(GRAD_SMOOTHING * GRAD_SMOOTHING)).sqrt()
}

/// Element residual for one backward-Euler step.
pub fn element_residual<T: Real>(
    basis: &ElementBasis,
    constants: &PhysicsConstants,
    dt: f64,
    v: &ElementValues<T>,
) -> [T; 8] {
    let zero = T::cst(0.0);
    let one = T::cst(1.0);
    let two = T::cst(2.0);
    let inv_dt = T::cst(1.0 / dt);
    let m_phi = T::cst(constants.m_phi);
    let kappa = T::cst(constants.m_phi * constants.w * constants.eps_t * constants.eps_t);
    let w = T::cst(constants.w);
    let d_solvent = T::cst(constants.d_solvent);
    let d_jump = T::cst(constants.d_solid - constants.d_solvent);
    let mut r = [zero; 8];
    for q in 0..4 {
        let p = interpolate(basis, q, v);
        let g = smoothed_norm(p.grad_phi);
        let phi = p.phi;
        let dpsi = two * w * phi * (one - phi) * (one - two * phi);
        let h = phi * phi * phi * (T::cst(10.0) - T::cst(15.0) * phi + T::cst(6.0) * phi * phi);
        let diff = d_solvent + d_jump * h;
        let f_diss = dissolution_forcing(v.k, p.c, g, constants);
        let source = source_term(v.k, p.c, g, constants);
        let wd = T::cst(basis.wdet[q]);
        for a in 0..4 {
            let na = T::cst(basis.n[q][a]);
            let gx = T::cst(basis.grad[q][a][0]);
            let gy = T::cst(basis.grad[q][a][1]);
            let lap_phi = gx * p.grad_phi[0] + gy * p.grad_phi[1];
            let lap_c = gx * p.grad_c[0] + gy * p.grad_c[1];
            r[2 * a] += wd * (na * (m_phi * dpsi - f_diss) + kappa * lap_phi);
            r[2 * a + 1] += wd * (na * (-source) + diff * lap_c);
        }
    }
    for a in 0..4 {
        for b in 0..4 {
            r[2 * a] += T::cst(basis.mass[a][b]) * inv_dt * (v.phi[b] - v.phi_prev[b]);
            r[2 * a + 1] += T::cst(basis.mass_c[a][b]) * inv_dt * (v.c[b] - v.c_prev[b]);
        }
    }
    r
}

/// Element residual and its exact tangent with respect to the current
/// (not previous) nodal values.
pub fn element_tangent(
    basis: &ElementBasis,
    constants: &PhysicsConstants,
    dt: f64,
    v: &ElementValues<f64>,
) -> ([f64; 8], [[f64; 8]; 8]) {
    let inv_dt = 1.0 / dt;
    let kappa = constants.m_phi * constants.w * constants.eps_t * constants.eps_t;
    let inv_rho = 1.0 / constants.rho_s;
    let mut r = [0.0; 8];
    let mut jac = [[0.0; 8]; 8];
    for q in 0..4 {
        let p = interpolate(basis, q, v);
        let g = smoothed_norm(p.grad_phi);
        let phi = p.phi;
        let dpsi = crate::materials::potential_derivative(phi, constants.w);
        let ddpsi = crate::materials::potential_second_derivative(phi, constants.w);
        let diff = crate::materials::diffusivity(phi, constants);
        let ddiff = crate::materials::diffusivity_derivative(phi, constants);
        let f_diss = dissolution_forcing(v.k, p.c, g, constants);
        let source = source_term(v.k, p.c, g, constants);
        let undersat = constants.c_sat - p.c;
        let wd = basis.wdet[q];
        let nq = &basis.n[q];
        let gq = &basis.grad[q];

        // d|grad phi| / d phi_b
        let root = smoothed_root(p.grad_phi);
        let mut dg = [0.0; 4];
        for b in 0..4 {
            dg[b] = (p.grad_phi[0] * gq[b][0] + p.grad_phi[1] * gq[b][1]) / root;
        }
        for a in 0..4 {
            let na = nq[a];
            let lap_phi = gq[a][0] * p.grad_phi[0] + gq[a][1] * p.grad_phi[1];
            let lap_c = gq[a][0] * p.grad_c[0] + gq[a][1] * p.grad_c[1];
            r[2 * a] += wd * (na * (constants.m_phi * dpsi - f_diss) + kappa * lap_phi);
            r[2 * a + 1] += wd * (-na * source + diff * lap_c);
            for b in 0..4 {
                let nb = nq[b];
                let grad_ab = gq[a][0] * gq[b][0] + gq[a][1] * gq[b][1];
                let ds_dphi = v.k * undersat * dg[b];
                // phase row
                jac[2 * a][2 * b] += wd
                    * (na * nb * constants.m_phi * ddpsi
                        + kappa * grad_ab
                        + na * inv_rho * ds_dphi);
                jac[2 * a][2 * b + 1] += wd * (-na * inv_rho * v.k * g * nb);
                // concentration row
                jac[2 * a + 1][2 * b] += wd * (ddiff * nb * lap_c - na * ds_dphi);
                jac[2 * a + 1][2 * b + 1] += wd * (na * nb * v.k * g + diff * grad_ab);
            }
        }
    }
    for a in 0..4 {
        for b in 0..4 {
            let m = basis.mass[a][b] * inv_dt;
            let mc = basis.mass_c[a][b] * inv_dt;
            r[2 * a] += m * (v.phi[b] - v.phi_prev[b]);
            r[2 * a + 1] += mc * (v.c[b] - v.c_prev[b]);
            jac[2 * a][2 * b] += m;
            jac[2 * a + 1][2 * b + 1] += mc;
        }
    }
    (r, jac)
}

/// Derivative of the element residual with respect to the element's rate constant.
pub fn element_rate_derivative(
    basis: &ElementBasis,
    constants: &PhysicsConstants,
    v: &ElementValues<f64>,
) -> [f64; 8] {
    let mut d = [0.0; 8];
    for q in 0..4 {
        let p = interpolate(basis, q, v);
        let g = smoothed_norm(p.grad_phi);
        let undersat = constants.c_sat - p.c;
        let wd = basis.wdet[q];
        for a in 0..4 {
            let na = basis.n[q][a];
            d[2 * a] += wd * na * undersat * g / constants.rho_s;
            d[2 * a + 1] -= wd * na * undersat * g;
        }
    }
    d
}

/// Forcing and source evaluated at each quadrature point of the element.
pub fn element_point_terms(
    basis: &ElementBasis,
    constants: &PhysicsConstants,
    v: &ElementValues<f64>,
) -> [(f64, f64); 4] {
    let mut out = [(0.0, 0.0); 4];
    for (q, o) in out.iter_mut().enumerate() {
        let p = interpolate(basis, q, v);
        let g = smoothed_norm(p.grad_phi);
        *o = (
            dissolution_forcing(v.k, p.c, g, constants),
            source_term(v.k, p.c, g, constants),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_bilinear_products() {
        let basis = ElementBasis::rectangle(0.3, 0.2, MassMatrix::Consistent);
        let m = basis.mass;
        // exact consistent mass for a rectangle: A/36 * [4 2 1 2; ...]
        let area = 0.06;
        let exact = [
            [4.0, 2.0, 1.0, 2.0],
            [2.0, 4.0, 2.0, 1.0],
            [1.0, 2.0, 4.0, 2.0],
            [2.0, 1.0, 2.0, 4.0],
        ];
        for a in 0..4 {
            for b in 0..4 {
                assert!((m[a][b] - area * exact[a][b] / 36.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn partition_of_unity_and_zero_gradient_sum() {
        let basis = ElementBasis::rectangle(0.1, 0.25, MassMatrix::Consistent);
        for q in 0..4 {
            let s: f64 = basis.n[q].iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
            let gx: f64 = basis.grad[q].iter().map(|g| g[0]).sum();
            let gy: f64 = basis.grad[q].iter().map(|g| g[1]).sum();
            assert!(gx.abs() < 1e-12 && gy.abs() < 1e-12);
        }
    }

    #[test]
    fn lumped_mass_preserves_row_sums() {
        let c = ElementBasis::rectangle(0.3, 0.2, MassMatrix::Consistent);
        let l = ElementBasis::rectangle(0.3, 0.2, MassMatrix::Lumped);
        for a in 0..4 {
            let sc: f64 = c.mass[a].iter().sum();
            assert!((l.mass[a][a] - sc).abs() < 1e-16);
            assert_eq!(l.mass_c, l.mass);
            assert!((l.mass[a][a] - 0.015).abs() < 1e-15);
        }
    }

    #[test]
    fn tangent_residual_matches_generic_residual() {
        let basis = ElementBasis::rectangle(0.25, 0.25, MassMatrix::Consistent);
        let c = PhysicsConstants {
            eps_t: 0.05,
            ..Default::default()
        };
        let v = ElementValues {
            phi: [0.9, 0.4, 0.1, 0.7],
            c: [0.1, 0.3, 0.05, 0.2],
            phi_prev: [1.0, 0.5, 0.0, 0.8],
            c_prev: [0.0, 0.2, 0.0, 0.1],
            k: 3e-4,
        };
        let r1 = element_residual(&basis, &c, 2.0, &v);
        let (r2, _) = element_tangent(&basis, &c, 2.0, &v);
        for i in 0..8 {
            assert!((r1[i] - r2[i]).abs() <= 1e-15 * (1.0 + r1[i].abs()));
        }
    }
}

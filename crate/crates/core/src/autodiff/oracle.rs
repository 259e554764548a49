//! Verification oracles: central finite differences and forward-mode
//! differentiation unrolled through every Newton iterate of a step.
//!
//! Only intended for tiny meshes; the Newton solve uses dense elimination.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::fem::assembly::residual_generic;
use crate::fem::scalar::Real;
use crate::fem::{MassMatrix, StructuredMesh};
use crate::materials::PhysicsConstants;

/// Central finite differences of `f` at `params`, one coordinate at a time.
pub fn finite_difference_oracle(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + step;
            let up = f(&p);
            p[i] = x - step;
            let down = f(&p);
            p[i] = x;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// First-order dual number `re + eps * e`, nestable.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Real> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Self { re, eps }
    }

    pub fn variable(re: T) -> Self {
        Self {
            re,
            eps: T::cst(1.0),
        }
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        Self::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

impl<T: Real> AddAssign for Dual<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> SubAssign for Dual<T> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Real> MulAssign for Dual<T> {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<T: Real> Real for Dual<T> {
    fn cst(v: f64) -> Self {
        Self::new(T::cst(v), T::cst(0.0))
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Self::new(s, self.eps / (T::cst(2.0) * s))
    }
    fn re(self) -> f64 {
        self.re.re()
    }
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting on the
/// primal parts. `a` is row-major `n x n`.
pub fn dense_solve<T: Real>(mut a: Vec<T>, mut b: Vec<T>) -> Vec<T> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| {
                a[i * n + col]
                    .re()
                    .abs()
                    .total_cmp(&a[j * n + col].re().abs())
            })
            .expect("non-empty");
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            for k in col..n {
                let v = a[col * n + k];
                a[row * n + k] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    let mut x = vec![T::cst(0.0); n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    x
}

/// One backward-Euler step solved by a fixed number of full Newton
/// iterations in scalar type `T`. Derivative parts carried by the inputs are
/// propagated through every iterate. Returns interleaved `[phi_i, C_i]`.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_step<T: Real>(
    mesh: &StructuredMesh,
    constants: &PhysicsConstants,
    dt: f64,
    mass: MassMatrix,
    k_field: &[T],
    phi_prev: &[T],
    c_prev: &[T],
    iterations: usize,
) -> Vec<T> {
    let n = mesh.n_nodes();
    let mut phi = phi_prev.to_vec();
    let mut c: Vec<T> = c_prev
        .iter()
        .enumerate()
        .map(|(i, v)| if mesh.is_boundary(i) { T::cst(0.0) } else { *v })
        .collect();
    let lift = |v: &[T]| {
        v.iter()
            .map(|x| Dual::new(*x, T::cst(0.0)))
            .collect::<Vec<_>>()
    };
    for _ in 0..iterations {
        let r = residual_generic(
            mesh, constants, dt, mass, k_field, &phi, &c, phi_prev, c_prev,
        );
        let mut jac = vec![T::cst(0.0); 4 * n * n];
        let k_d = lift(k_field);
        let pp = lift(phi_prev);
        let cp = lift(c_prev);
        for j in 0..2 * n {
            let mut phi_d = lift(&phi);
            let mut c_d = lift(&c);
            if j % 2 == 0 {
                phi_d[j / 2].eps = T::cst(1.0);
            } else {
                c_d[j / 2].eps = T::cst(1.0);
            }
            let rd = residual_generic(mesh, constants, dt, mass, &k_d, &phi_d, &c_d, &pp, &cp);
            for (i, v) in rd.iter().enumerate() {
                jac[i * 2 * n + j] = v.eps;
            }
        }
        let dx = dense_solve(jac, r.iter().map(|v| -*v).collect());
        for i in 0..n {
            phi[i] += dx[2 * i];
            c[i] += dx[2 * i + 1];
        }
    }
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        out.push(phi[i]);
        out.push(c[i]);
    }
    out
}

//! Global assembly of the coupled residual and tangent on a fixed sparse pattern.
//!
//! Unknowns are interleaved per node (`2i` phase, `2i + 1` concentration).
//! Concentration on the boundary is prescribed: interior equations see it as
//! zero, and the boundary concentration rows read `R = C`.

use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};

use super::kernel::{
    element_point_terms, element_rate_derivative, element_residual, element_tangent, ElementBasis,
    ElementValues, MassMatrix,
};
use super::mesh::StructuredMesh;
use super::scalar::Real;
use super::StateFields;
use crate::error::{Error, Field, Result};
use crate::materials::PhysicsConstants;

/// Everything needed to evaluate one backward-Euler step residual.
#[derive(Clone, Copy)]
pub struct StepProblem<'a> {
    pub mesh: &'a StructuredMesh,
    pub constants: &'a PhysicsConstants,
    /// Rate constant per element.
    pub k_field: &'a [f64],
    pub dt: f64,
    pub mass: MassMatrix,
}

impl StepProblem<'_> {
    fn basis(&self) -> ElementBasis {
        ElementBasis::rectangle(self.mesh.hx(), self.mesh.hy(), self.mass)
    }
}

/// CSC sparsity pattern of the coupled tangent with element scatter maps.
#[derive(Debug, Clone)]
pub struct SystemPattern {
    symbolic: SymbolicSparseColMat<usize>,
    /// For each element, the value index of local entry `(i, j)` at `i * 8 + j`.
    scatter: Vec<[usize; 64]>,
    /// Value indices belonging to each prescribed row, and the diagonal slot.
    dirichlet_rows: Vec<(Vec<usize>, usize)>,
    n_dof: usize,
}

impl SystemPattern {
    pub fn new(mesh: &StructuredMesh) -> Self {
        let n_nodes = mesh.n_nodes();
        let n_dof = 2 * n_nodes;
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::with_capacity(9); n_nodes];
        for e in mesh.elements() {
            for &a in e {
                for &b in e {
                    neighbors[a].push(b);
                }
            }
        }
        for nb in neighbors.iter_mut() {
            nb.sort_unstable();
            nb.dedup();
        }
        let mut col_ptr = Vec::with_capacity(n_dof + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0usize);
        for node in 0..n_nodes {
            for _field in 0..2 {
                for &p in &neighbors[node] {
                    row_idx.push(2 * p);
                    row_idx.push(2 * p + 1);
                }
                col_ptr.push(row_idx.len());
            }
        }
        let locate = |row: usize, col: usize| -> usize {
            let start = col_ptr[col];
            let rows = &row_idx[start..col_ptr[col + 1]];
            start
                + rows
                    .binary_search(&row)
                    .expect("entry outside sparsity pattern")
        };
        let scatter = mesh
            .elements()
            .iter()
            .map(|e| {
                let mut map = [0usize; 64];
                for i in 0..8 {
                    for j in 0..8 {
                        let row = 2 * e[i / 2] + i % 2;
                        let col = 2 * e[j / 2] + j % 2;
                        map[i * 8 + j] = locate(row, col);
                    }
                }
                map
            })
            .collect();
        let dirichlet_rows = mesh
            .boundary()
            .iter()
            .map(|&node| {
                let row = 2 * node + 1;
                let mut slots = Vec::new();
                for &p in &neighbors[node] {
                    for f in 0..2 {
                        slots.push(locate(row, 2 * p + f));
                    }
                }
                (slots, locate(row, row))
            })
            .collect();
        let symbolic = SymbolicSparseColMat::new_checked(n_dof, n_dof, col_ptr, None, row_idx);
        Self {
            symbolic,
            scatter,
            dirichlet_rows,
            n_dof,
        }
    }

    pub fn n_dof(&self) -> usize {
        self.n_dof
    }

    pub fn nnz(&self) -> usize {
        self.symbolic.row_idx().len()
    }

    pub fn symbolic(&self) -> &SymbolicSparseColMat<usize> {
        &self.symbolic
    }

    pub fn matrix<'a>(&'a self, values: &'a [f64]) -> SparseColMatRef<'a, usize, f64> {
        SparseColMatRef::new(self.symbolic.as_ref(), values)
    }

    /// Entry `(row, col)` of a value array laid out on this pattern.
    pub fn get(&self, values: &[f64], row: usize, col: usize) -> f64 {
        let cp = self.symbolic.col_ptr();
        let rows = &self.symbolic.row_idx()[cp[col]..cp[col + 1]];
        match rows.binary_search(&row) {
            Ok(i) => values[cp[col] + i],
            Err(_) => 0.0,
        }
    }

    /// `y = A^T x` for a value array on this pattern.
    pub fn transpose_apply(&self, values: &[f64], x: &[f64]) -> Vec<f64> {
        let cp = self.symbolic.col_ptr();
        let ri = self.symbolic.row_idx();
        (0..self.n_dof)
            .map(|col| (cp[col]..cp[col + 1]).map(|k| values[k] * x[ri[k]]).sum())
            .collect()
    }
}

fn gather<T: Real>(
    e: &[usize; 4],
    phi: &[T],
    c: &[T],
    phi_prev: &[T],
    c_prev: &[T],
    mesh: &StructuredMesh,
    k: T,
) -> ElementValues<T> {
    let z = T::cst(0.0);
    let mask = |v: &[T], n: usize| if mesh.is_boundary(n) { z } else { v[n] };
    ElementValues {
        phi: e.map(|n| phi[n]),
        c: e.map(|n| mask(c, n)),
        phi_prev: e.map(|n| phi_prev[n]),
        c_prev: e.map(|n| mask(c_prev, n)),
        k,
    }
}

/// Residual of one step for arbitrary scalar type; `k_field` may carry
/// derivative information as well.
pub fn residual_generic<T: Real>(
    mesh: &StructuredMesh,
    constants: &PhysicsConstants,
    dt: f64,
    mass: MassMatrix,
    k_field: &[T],
    phi: &[T],
    c: &[T],
    phi_prev: &[T],
    c_prev: &[T],
) -> Vec<T> {
    let basis = ElementBasis::rectangle(mesh.hx(), mesh.hy(), mass);
    let mut r = vec![T::cst(0.0); 2 * mesh.n_nodes()];
    for (ie, e) in mesh.elements().iter().enumerate() {
        let v = gather(e, phi, c, phi_prev, c_prev, mesh, k_field[ie]);
        let re = element_residual(&basis, constants, dt, &v);
        for (i, val) in re.iter().enumerate() {
            r[2 * e[i / 2] + i % 2] += *val;
        }
    }
    for &n in mesh.boundary() {
        r[2 * n + 1] = c[n];
    }
    r
}

/// Residual vector `(R_phi, R_c)` interleaved per node.
pub fn assemble_residuals(
    problem: &StepProblem<'_>,
    next: &StateFields,
    prev: &StateFields,
) -> Result<Vec<f64>> {
    let r = residual_generic(
        problem.mesh,
        problem.constants,
        problem.dt,
        problem.mass,
        problem.k_field,
        &next.phi,
        &next.c,
        &prev.phi,
        &prev.c,
    );
    check_finite(problem.mesh, &r)?;
    Ok(r)
}

fn check_finite(mesh: &StructuredMesh, r: &[f64]) -> Result<()> {
    if let Some(i) = r.iter().position(|v| !v.is_finite()) {
        let node = i / 2;
        let field = if i % 2 == 0 {
            Field::Phase
        } else {
            Field::Concentration
        };
        let element = mesh
            .elements()
            .iter()
            .position(|e| e.contains(&node))
            .unwrap_or(0);
        return Err(Error::Divergence { element, field });
    }
    Ok(())
}

/// Residual plus tangent values laid out on `pattern`.
pub fn assemble_jacobian(
    problem: &StepProblem<'_>,
    pattern: &SystemPattern,
    next: &StateFields,
    prev: &StateFields,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mesh = problem.mesh;
    let basis = problem.basis();
    let mut r = vec![0.0; pattern.n_dof];
    let mut vals = vec![0.0; pattern.nnz()];
    for (ie, e) in mesh.elements().iter().enumerate() {
        let v = gather(
            e,
            &next.phi,
            &next.c,
            &prev.phi,
            &prev.c,
            mesh,
            problem.k_field[ie],
        );
        let (re, mut ke) = element_tangent(&basis, problem.constants, problem.dt, &v);
        // prescribed concentrations do not vary
        for (b, &node) in e.iter().enumerate() {
            if mesh.is_boundary(node) {
                for row in ke.iter_mut() {
                    row[2 * b + 1] = 0.0;
                }
            }
        }
        let map = &pattern.scatter[ie];
        for i in 0..8 {
            r[2 * e[i / 2] + i % 2] += re[i];
            for j in 0..8 {
                vals[map[i * 8 + j]] += ke[i][j];
            }
        }
    }
    for (&node, (slots, diag)) in mesh.boundary().iter().zip(&pattern.dirichlet_rows) {
        r[2 * node + 1] = next.c[node];
        for &s in slots {
            vals[s] = 0.0;
        }
        vals[*diag] = 1.0;
    }
    check_finite(mesh, &r)?;
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            step: 0,
            detail: "non-finite tangent entry".into(),
        });
    }
    Ok((r, vals))
}

/// `-(dR/d prev)^T lambda`: cotangent on the previous state given the step adjoint.
pub fn previous_state_vjp(
    mesh: &StructuredMesh,
    dt: f64,
    mass: MassMatrix,
    lambda: &[f64],
) -> StateFields {
    let basis = ElementBasis::rectangle(mesh.hx(), mesh.hy(), mass);
    let n = mesh.n_nodes();
    let mut phi = vec![0.0; n];
    let mut c = vec![0.0; n];
    for e in mesh.elements() {
        for a in 0..4 {
            let na = e[a];
            let c_row = !mesh.is_boundary(na);
            for b in 0..4 {
                let nb = e[b];
                phi[nb] += basis.mass[a][b] / dt * lambda[2 * na];
                if c_row && !mesh.is_boundary(nb) {
                    c[nb] += basis.mass_c[a][b] / dt * lambda[2 * na + 1];
                }
            }
        }
    }
    StateFields { phi, c, step: 0 }
}

/// `-(dR/dk)^T lambda`, one entry per element.
pub fn rate_vjp(
    problem: &StepProblem<'_>,
    next: &StateFields,
    prev: &StateFields,
    lambda: &[f64],
) -> Vec<f64> {
    let mesh = problem.mesh;
    let basis = problem.basis();
    mesh.elements()
        .iter()
        .enumerate()
        .map(|(ie, e)| {
            let v = gather(
                e,
                &next.phi,
                &next.c,
                &prev.phi,
                &prev.c,
                mesh,
                problem.k_field[ie],
            );
            let d = element_rate_derivative(&basis, problem.constants, &v);
            let mut acc = 0.0;
            for i in 0..8 {
                let node = e[i / 2];
                if i % 2 == 1 && mesh.is_boundary(node) {
                    continue;
                }
                acc -= d[i] * lambda[2 * node + i % 2];
            }
            acc
        })
        .collect()
}

/// Phase forcing and solute source at every quadrature point of every element.
pub fn quadrature_point_terms(problem: &StepProblem<'_>, state: &StateFields) -> Vec<(f64, f64)> {
    let mesh = problem.mesh;
    let basis = problem.basis();
    let mut out = Vec::with_capacity(4 * mesh.n_elements());
    for (ie, e) in mesh.elements().iter().enumerate() {
        let v = gather(
            e,
            &state.phi,
            &state.c,
            &state.phi,
            &state.c,
            mesh,
            problem.k_field[ie],
        );
        out.extend(element_point_terms(&basis, problem.constants, &v));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize) -> (StructuredMesh, PhysicsConstants, Vec<f64>) {
        let mesh = StructuredMesh::new(n, n, 1.0, 1.0).unwrap();
        let constants = PhysicsConstants {
            eps_t: 0.1,
            ..Default::default()
        };
        let k = vec![2e-4; mesh.n_elements()];
        (mesh, constants, k)
    }

    #[test]
    fn homogeneous_states_have_zero_residual() {
        let (mesh, constants, k) = setup(4);
        let p = StepProblem {
            mesh: &mesh,
            constants: &constants,
            k_field: &k,
            dt: 1.0,
            mass: MassMatrix::Consistent,
        };
        for value in [0.0, 1.0, 0.5] {
            let s = StateFields::uniform(mesh.n_nodes(), value, 0.0);
            let r = assemble_residuals(&p, &s, &s).unwrap();
            // only quadrature round-off in sum_a N_a = 1 remains
            let tol = 1e-14 * mesh.element_volume();
            assert!(r.iter().all(|v| v.abs() <= tol), "phi={value}: {:?}", r);
        }
    }

    #[test]
    fn stencil_bound() {
        let (mesh, _, _) = setup(6);
        let pat = SystemPattern::new(&mesh);
        let cp = pat.symbolic().col_ptr();
        for col in 0..pat.n_dof() {
            assert!(cp[col + 1] - cp[col] <= 18);
        }
    }
}

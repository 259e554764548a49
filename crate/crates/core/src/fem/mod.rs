//! Transient coupled Allen-Cahn / diffusion solver on a structured quad mesh.

pub mod assembly;
pub mod export;
pub mod kernel;
pub mod mesh;
pub mod scalar;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::lu::{
    factorize_symbolic_lu, LuRef, LuSymbolicParams, NumericLu, SymbolicLu,
};
pub use faer::sparse::linalg::SupernodalThreshold;
use faer::{Conj, MatMut, Par};
use serde::{Deserialize, Serialize};

pub use assembly::{assemble_jacobian, assemble_residuals, StepProblem, SystemPattern};
pub use kernel::{MassMatrix, QuadratureRule};
pub use mesh::StructuredMesh;

use crate::error::{Error, Result};
use crate::materials::PhysicsConstants;

/// Nodal phase and concentration at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFields {
    pub phi: Vec<f64>,
    pub c: Vec<f64>,
    /// Time index `n`.
    pub step: usize,
}

impl StateFields {
    pub fn uniform(n_nodes: usize, phi: f64, c: f64) -> Self {
        Self {
            phi: vec![phi; n_nodes],
            c: vec![c; n_nodes],
            step: 0,
        }
    }

    /// Initial state: given phase, zero concentration.
    pub fn initial(phi0: Vec<f64>) -> Self {
        let n = phi0.len();
        Self {
            phi: phi0,
            c: vec![0.0; n],
            step: 0,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.phi.len()
    }

    /// Interleaved unknown vector `[phi_0, C_0, phi_1, C_1, ...]`.
    pub fn interleaved(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.phi.len());
        for (p, c) in self.phi.iter().zip(&self.c) {
            x.push(*p);
            x.push(*c);
        }
        x
    }

    pub fn from_interleaved(x: &[f64], step: usize) -> Self {
        Self {
            phi: x.iter().step_by(2).copied().collect(),
            c: x.iter().skip(1).step_by(2).copied().collect(),
            step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub dt: f64,
    pub n_steps: usize,
    /// Relative residual reduction required for Newton convergence.
    pub newton_tol: f64,
    /// Absolute residual floor.
    pub newton_abs_tol: f64,
    pub newton_max: usize,
    pub max_halvings: usize,
    pub mass_matrix: MassMatrix,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            dt: 25.0,
            n_steps: 100,
            newton_tol: 1e-8,
            newton_abs_tol: 1e-12,
            newton_max: 25,
            max_halvings: 8,
            mass_matrix: MassMatrix::LumpedConcentration,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.dt.is_finite() && self.dt > 0.0) {
            problems.push(format!("solver.dt must be positive (got {})", self.dt));
        }
        if self.n_steps == 0 {
            problems.push("solver.n_steps must be at least 1".to_string());
        }
        if !(self.newton_tol > 0.0) {
            problems.push(format!(
                "solver.newton_tol must be positive (got {})",
                self.newton_tol
            ));
        }
        if !(self.newton_abs_tol > 0.0) {
            problems.push(format!(
                "solver.newton_abs_tol must be positive (got {})",
                self.newton_abs_tol
            ));
        }
        if self.newton_max == 0 {
            problems.push("solver.newton_max must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Sparse LU with the symbolic analysis cached for a fixed pattern.
pub struct LinearSolver {
    pattern: SystemPattern,
    symbolic: SymbolicLu<usize>,
}

/// A numeric factorization of one tangent matrix.
pub struct Factorization<'a> {
    symbolic: &'a SymbolicLu<usize>,
    numeric: NumericLu<usize, f64>,
}

impl LinearSolver {
    pub fn new(mesh: &StructuredMesh) -> Result<Self> {
        Self::with_threshold(mesh, SupernodalThreshold::FORCE_SUPERNODAL)
    }

    pub fn with_threshold(mesh: &StructuredMesh, threshold: SupernodalThreshold) -> Result<Self> {
        let pattern = SystemPattern::new(mesh);
        let params = LuSymbolicParams {
            supernodal_flop_ratio_threshold: threshold,
            ..Default::default()
        };
        let symbolic = factorize_symbolic_lu(pattern.symbolic().as_ref(), params).map_err(|e| {
            Error::Singular {
                step: 0,
                detail: format!("symbolic analysis failed: {e:?}"),
            }
        })?;
        Ok(Self { pattern, symbolic })
    }

    pub fn pattern(&self) -> &SystemPattern {
        &self.pattern
    }

    pub fn factorize(&self, values: &[f64]) -> Result<Factorization<'_>> {
        let mut numeric = NumericLu::new();
        let req = self
            .symbolic
            .factorize_numeric_lu_scratch::<f64>(Par::Seq, Default::default());
        let mut buf = MemBuffer::new(req);
        self.symbolic
            .factorize_numeric_lu(
                &mut numeric,
                self.pattern.matrix(values),
                Par::Seq,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| Error::Singular {
                step: 0,
                detail: format!("LU factorization failed: {e:?}"),
            })?;
        Ok(Factorization {
            symbolic: &self.symbolic,
            numeric,
        })
    }
}

impl Factorization<'_> {
    fn lu(&self) -> LuRef<'_, usize, f64> {
        LuRef::new_unchecked(self.symbolic, &self.numeric)
    }

    /// Solve `A x = rhs` in place.
    pub fn solve(&self, rhs: &mut [f64]) -> Result<()> {
        let n = rhs.len();
        let mut buf = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(1, Par::Seq));
        self.lu().solve_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(rhs, n, 1),
            Par::Seq,
            MemStack::new(&mut buf),
        );
        if rhs.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Singular {
                step: 0,
                detail: "linear solve produced non-finite values".into(),
            })
        }
    }

    /// Solve `A^T x = rhs` in place.
    pub fn solve_transpose(&self, rhs: &mut [f64]) -> Result<()> {
        let n = rhs.len();
        let mut buf = MemBuffer::new(
            self.symbolic
                .solve_transpose_in_place_scratch::<f64>(1, Par::Seq),
        );
        self.lu().solve_transpose_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(rhs, n, 1),
            Par::Seq,
            MemStack::new(&mut buf),
        );
        if rhs.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Adjoint {
                step: 0,
                detail: "transposed solve produced non-finite values".into(),
            })
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outcome of one implicit step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub iterations: usize,
    pub residual: f64,
    pub initial_residual: f64,
}

/// Advance one backward-Euler step with damped Newton iterations.
pub fn solve_timestep(
    solver: &LinearSolver,
    problem: &StepProblem<'_>,
    prev: &StateFields,
    settings: &SolverSettings,
) -> Result<(StateFields, StepReport)> {
    newton(solver, problem, prev, settings, false).map(|(s, r, _)| (s, r))
}

/// Like [`solve_timestep`], also returning the factorization of the first
/// Newton tangent. The tangent does not depend on the previous state, so this
/// is the tangent at `prev` itself, which is what the adjoint of the step
/// that produced `prev` needs. `None` when no Newton iteration was taken.
pub fn solve_timestep_keep_first<'s>(
    solver: &'s LinearSolver,
    problem: &StepProblem<'_>,
    prev: &StateFields,
    settings: &SolverSettings,
) -> Result<(StateFields, StepReport, Option<Factorization<'s>>)> {
    newton(solver, problem, prev, settings, true)
}

fn newton<'s>(
    solver: &'s LinearSolver,
    problem: &StepProblem<'_>,
    prev: &StateFields,
    settings: &SolverSettings,
    keep_first: bool,
) -> Result<(StateFields, StepReport, Option<Factorization<'s>>)> {
    let step = prev.step + 1;
    let mut state = prev.clone();
    state.step = step;
    for &n in problem.mesh.boundary() {
        state.c[n] = 0.0;
    }
    let mut r = assemble_residuals(problem, &state, prev).map_err(|e| e.at_step(step))?;
    let r0 = norm(&r);
    let target = settings.newton_abs_tol.max(settings.newton_tol * r0);
    let mut rn = r0;
    let mut first = None;
    if rn <= settings.newton_abs_tol {
        let report = StepReport {
            iterations: 0,
            residual: rn,
            initial_residual: r0,
        };
        return Ok((state, report, None));
    }
    for it in 1..=settings.newton_max {
        let (_, vals) = assemble_jacobian(problem, solver.pattern(), &state, prev)
            .map_err(|e| e.at_step(step))?;
        let fact = solver.factorize(&vals).map_err(|e| e.at_step(step))?;
        let mut dx: Vec<f64> = r.iter().map(|v| -v).collect();
        fact.solve(&mut dx).map_err(|e| e.at_step(step))?;
        if keep_first && it == 1 {
            first = Some(fact);
        }
        let x = state.interleaved();
        let mut scale = 1.0;
        let mut accepted = None;
        for halving in 0..=settings.max_halvings {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + scale * d).collect();
            let trial = StateFields::from_interleaved(&trial, step);
            let rt = assemble_residuals(problem, &trial, prev).map_err(|e| e.at_step(step))?;
            let nt = norm(&rt);
            if nt < rn || halving == settings.max_halvings {
                accepted = Some((trial, rt, nt));
                break;
            }
            scale *= 0.5;
        }
        let (trial, rt, nt) = accepted.expect("line search always yields a trial");
        state = trial;
        r = rt;
        rn = nt;
        let step_size = dx.iter().fold(0.0f64, |m, v| m.max(v.abs())) * scale;
        if rn <= target || (scale == 1.0 && step_size <= 1e-13) {
            let report = StepReport {
                iterations: it,
                residual: rn,
                initial_residual: r0,
            };
            return Ok((state, report, first));
        }
    }
    Err(Error::NonConvergence {
        step,
        iterations: settings.newton_max,
        residual: rn,
    })
}

/// Solid mass `rho_s * sum_e phi(x_e) v_e` with centre values.
pub fn solid_mass(mesh: &StructuredMesh, phi: &[f64], rho_s: f64) -> f64 {
    rho_s * mesh.integrate_centers(phi)
}

/// Forward simulation summary.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    /// `m_0 .. m_N`.
    pub masses: Vec<f64>,
    pub final_state: StateFields,
    pub newton_iterations: Vec<usize>,
}

/// Run `settings.n_steps` implicit steps from `phi0` with `C = 0`, calling
/// `observer` on every state including the initial one.
pub fn simulate_with(
    phi0: &[f64],
    k_field: &[f64],
    constants: &PhysicsConstants,
    mesh: &StructuredMesh,
    settings: &SolverSettings,
    solver: &LinearSolver,
    mut observer: impl FnMut(&StateFields),
) -> Result<SimulationOutput> {
    assert_eq!(phi0.len(), mesh.n_nodes());
    assert_eq!(k_field.len(), mesh.n_elements());
    let problem = StepProblem {
        mesh,
        constants,
        k_field,
        dt: settings.dt,
        mass: settings.mass_matrix,
    };
    let mut state = StateFields::initial(phi0.to_vec());
    observer(&state);
    let mut masses = Vec::with_capacity(settings.n_steps + 1);
    masses.push(solid_mass(mesh, &state.phi, constants.rho_s));
    let mut newton_iterations = Vec::with_capacity(settings.n_steps);
    for _ in 0..settings.n_steps {
        let (next, report) = solve_timestep(solver, &problem, &state, settings)?;
        log::trace!(
            "step {}: {} Newton iterations, residual {:.3e} -> {:.3e}",
            next.step,
            report.iterations,
            report.initial_residual,
            report.residual
        );
        newton_iterations.push(report.iterations);
        masses.push(solid_mass(mesh, &next.phi, constants.rho_s));
        observer(&next);
        state = next;
    }
    Ok(SimulationOutput {
        masses,
        final_state: state,
        newton_iterations,
    })
}

/// [`simulate_with`] without an observer.
pub fn simulate(
    phi0: &[f64],
    k_field: &[f64],
    constants: &PhysicsConstants,
    mesh: &StructuredMesh,
    settings: &SolverSettings,
) -> Result<SimulationOutput> {
    let solver = LinearSolver::new(mesh)?;
    simulate_with(phi0, k_field, constants, mesh, settings, &solver, |_| {})
}

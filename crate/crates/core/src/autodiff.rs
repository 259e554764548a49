//! Reverse-mode sensitivities through the transient solver.
//!
//! Each implicit step is differentiated at its converged root: with
//! `R(x_n, x_{n-1}, k) = 0`, the step adjoint solves `J^T lambda = x_bar_n`
//! and pushes `-(dR/dx_{n-1})^T lambda` and `-(dR/dk)^T lambda` backwards.
//! States between checkpoints are recomputed segment by segment.

use crate::error::{Error, Result};
use crate::fem::assembly::{previous_state_vjp, rate_vjp};
use crate::fem::{
    assemble_jacobian, solve_timestep_keep_first, Factorization, LinearSolver, SolverSettings,
    StateFields, StepProblem, StructuredMesh,
};
use crate::materials::PhysicsConstants;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

/// Which states the forward pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointSchedule {
    n_steps: usize,
    spacing: usize,
}

impl CheckpointSchedule {
    pub fn new(n_steps: usize, spacing: usize) -> Result<Self> {
        if spacing == 0 {
            return Err(Error::Config(
                "checkpoint spacing must be at least 1".into(),
            ));
        }
        Ok(Self { n_steps, spacing })
    }

    /// Spacing `ceil(sqrt(n_steps))`.
    pub fn balanced(n_steps: usize) -> Self {
        let spacing = ((n_steps as f64).sqrt().ceil() as usize).max(1);
        Self { n_steps, spacing }
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Stored step indices; always starts with 0.
    pub fn stored_steps(&self) -> Vec<usize> {
        (0..self.n_steps.max(1)).step_by(self.spacing).collect()
    }

    pub fn is_stored(&self, step: usize) -> bool {
        step < self.n_steps.max(1) && step % self.spacing == 0
    }

    /// Recomputation spans `(start, end]` covering `1..=n_steps` once.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.stored_steps()
            .into_iter()
            .map(|a| (a, (a + self.spacing).min(self.n_steps)))
            .filter(|(a, b)| b > a)
            .collect()
    }
}

/// Forward-pass record sufficient for a backward sweep.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub schedule: CheckpointSchedule,
    /// States at `schedule.stored_steps()`, in order.
    pub checkpoints: Vec<StateFields>,
    pub masses: Vec<f64>,
    pub final_state: StateFields,
    pub newton_iterations: Vec<usize>,
}

/// Problem data shared by the forward and backward passes.
#[derive(Clone, Copy)]
pub struct Transient<'a> {
    pub mesh: &'a StructuredMesh,
    pub constants: &'a PhysicsConstants,
    pub settings: &'a SolverSettings,
    pub k_field: &'a [f64],
}

impl Transient<'_> {
    fn step_problem(&self) -> StepProblem<'_> {
        StepProblem {
            mesh: self.mesh,
            constants: self.constants,
            k_field: self.k_field,
            dt: self.settings.dt,
            mass: self.settings.mass_matrix,
        }
    }
}

/// Run the forward model keeping only the scheduled checkpoints.
pub fn forward(
    transient: &Transient<'_>,
    phi0: &[f64],
    schedule: CheckpointSchedule,
    solver: &LinearSolver,
    mut observer: impl FnMut(&StateFields),
) -> Result<ForwardTape> {
    let mut settings = *transient.settings;
    settings.n_steps = schedule.n_steps();
    let mut checkpoints = Vec::new();
    let out = crate::fem::simulate_with(
        phi0,
        transient.k_field,
        transient.constants,
        transient.mesh,
        &settings,
        solver,
        |s| {
            if schedule.is_stored(s.step) {
                checkpoints.push(s.clone());
            }
            observer(s);
        },
    )?;
    Ok(ForwardTape {
        schedule,
        checkpoints,
        masses: out.masses,
        final_state: out.final_state,
        newton_iterations: out.newton_iterations,
    })
}

/// Gradients of a step-wise loss with respect to the initial phase and the
/// element rate constants.
#[derive(Debug, Clone)]
pub struct Sensitivities {
    pub phi0: Vec<f64>,
    pub k_field: Vec<f64>,
    /// Most states held at once during the sweep (checkpoints plus one span).
    pub peak_states: usize,
    /// Fresh factorizations performed by the sweep (excluding recomputation).
    pub adjoint_factorizations: usize,
}

fn adjoint_step(
    fact: &Factorization<'_>,
    problem: &StepProblem<'_>,
    next: &StateFields,
    prev: &StateFields,
    cotangent: &StateFields,
) -> Result<(StateFields, Vec<f64>)> {
    let mut lambda = cotangent.interleaved();
    fact.solve_transpose(&mut lambda)
        .map_err(|e| e.at_step(next.step))?;
    let prev_bar = previous_state_vjp(problem.mesh, problem.dt, problem.mass, &lambda);
    let k_bar = rate_vjp(problem, next, prev, &lambda);
    Ok((prev_bar, k_bar))
}

fn factorize_at<'s>(
    solver: &'s LinearSolver,
    problem: &StepProblem<'_>,
    state: &StateFields,
) -> Result<Factorization<'s>> {
    // the tangent does not depend on the previous state
    let (_, vals) = assemble_jacobian(problem, solver.pattern(), state, state)?;
    solver.factorize(&vals).map_err(|e| match e {
        Error::Singular { detail, .. } => Error::Adjoint {
            step: state.step,
            detail,
        },
        other => other,
    })
}

/// Vector-Jacobian product of one converged step: given `dL/d next`, return
/// `dL/d prev` and `dL/dk` (per element).
pub fn vjp_timestep(
    solver: &LinearSolver,
    problem: &StepProblem<'_>,
    next: &StateFields,
    prev: &StateFields,
    cotangent: &StateFields,
) -> Result<(StateFields, Vec<f64>)> {
    let fact = factorize_at(solver, problem, next)?;
    adjoint_step(&fact, problem, next, prev, cotangent)
}

fn add_into(acc: &mut StateFields, other: &StateFields) {
    for (a, b) in acc.phi.iter_mut().zip(&other.phi) {
        *a += b;
    }
    for (a, b) in acc.c.iter_mut().zip(&other.c) {
        *a += b;
    }
}

/// Reverse sweep. `direct(n, x_n)` returns the explicit cotangent `dL/dx_n`.
pub fn backward_sweep(
    transient: &Transient<'_>,
    tape: &ForwardTape,
    solver: &LinearSolver,
    mut direct: impl FnMut(usize, &StateFields) -> StateFields,
) -> Result<Sensitivities> {
    let problem = transient.step_problem();
    let n_nodes = transient.mesh.n_nodes();
    let mut settings = *transient.settings;
    settings.n_steps = tape.schedule.n_steps();
    let mut k_bar = vec![0.0; transient.mesh.n_elements()];
    let mut carried = StateFields::uniform(n_nodes, 0.0, 0.0);
    // tangent at the end state of the span processed next, if a recompute produced it
    let mut carried_fact: Option<Factorization<'_>> = None;
    let mut peak = 0usize;
    let mut fresh = 0usize;
    let spans = tape.schedule.spans();
    for (idx, &(a, b)) in spans.iter().enumerate().rev() {
        let checkpoint = &tape.checkpoints[idx];
        // recomputed states a+1..=b; the span start is borrowed from the tape
        let mut states: Vec<StateFields> = Vec::with_capacity(b - a);
        // facts[i] is the tangent at step a + i
        let mut facts: Vec<Option<Factorization<'_>>> = Vec::with_capacity(b - a + 1);
        for _ in a..b {
            let prev = states.last().unwrap_or(checkpoint);
            let (next, _, first) = solve_timestep_keep_first(solver, &problem, prev, &settings)?;
            facts.push(first);
            states.push(next);
        }
        facts.push(carried_fact.take());
        peak = peak.max(tape.checkpoints.len() + states.len());
        let at = |i: usize| if i == 0 { checkpoint } else { &states[i - 1] };
        for n in (a + 1..=b).rev() {
            let i = n - a;
            let mut xbar = direct(n, at(i));
            add_into(&mut xbar, &carried);
            let fact = match facts[i].take() {
                Some(f) => f,
                None => {
                    fresh += 1;
                    factorize_at(solver, &problem, at(i))?
                }
            };
            let (prev_bar, kb) = adjoint_step(&fact, &problem, at(i), at(i - 1), &xbar)?;
            for (acc, v) in k_bar.iter_mut().zip(kb) {
                *acc += v;
            }
            carried = prev_bar;
            log::trace!(
                "adjoint step {n}: |x_bar| = {:.3e}",
                xbar.phi
                    .iter()
                    .chain(&xbar.c)
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            );
        }
        carried_fact = facts[0].take();
    }
    let mut x0_bar = direct(0, &tape.checkpoints[0]);
    add_into(&mut x0_bar, &carried);
    Ok(Sensitivities {
        phi0: x0_bar.phi,
        k_field: k_bar,
        peak_states: peak.max(tape.checkpoints.len()),
        adjoint_factorizations: fresh,
    })
}

/// Cotangent of `m_n = rho_s * sum_e phi(x_e) v_e` scaled by `m_bar`.
pub fn mass_cotangent(node_weights: &[f64], rho_s: f64, m_bar: f64) -> StateFields {
    StateFields {
        phi: node_weights.iter().map(|w| m_bar * rho_s * w).collect(),
        c: vec![0.0; node_weights.len()],
        step: 0,
    }
}

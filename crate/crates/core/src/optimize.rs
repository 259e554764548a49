//! Objective, constraints, barrier loss and the Adam-driven design loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, CheckpointSchedule, ForwardTape, Transient};
use crate::error::{Error, Result};
use crate::fem::{LinearSolver, SolverSettings, StateFields, StructuredMesh};
use crate::geometry::{self, BoundsBox, Point, SupershapeParams, PARAM_COUNT};
use crate::materials::{ExcipientLibrary, PhysicsConstants};
use crate::matfield::{ForwardCache, NetworkWeights};

/// Solid volume below this fraction of the domain counts as a vanished pill.
pub const MIN_SOLID_FRACTION: f64 = 1e-6;

/// Latent values are clamped to this magnitude so the mapped parameters stay
/// strictly inside their bounds.
pub const LATENT_LIMIT: f64 = 30.0;

/// An initial objective at or below this fraction of the mean squared
/// target counts as a perfect start (rms mismatch under 1e-10 of the target).
pub const PERFECT_START_RTOL: f64 = 1e-20;

/// Loss normalization `J0`: the initial objective, or 1 when the initial
/// design already reproduces the target up to round-off.
pub fn objective_normalization(j_initial: f64, target: &[f64]) -> f64 {
    let energy = target.iter().map(|v| v * v).sum::<f64>() / target.len().max(1) as f64;
    if j_initial > PERFECT_START_RTOL * energy && j_initial > 0.0 {
        j_initial
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub lr: f64,
    pub grad_clip_norm: f64,
    pub max_iters: usize,
    pub loss_tol: f64,
    pub xi_init: f64,
    pub xi_step: f64,
    pub xi_final: f64,
    /// Per-material minimum volume fraction; empty means `lambda_star_default` for all.
    pub lambda_star: Vec<f64>,
    pub lambda_star_default: f64,
    pub alpha: f64,
    pub tau0: f64,
    pub nu: f64,
    /// Weight the grayness measure by the design phase field.
    pub mask_grayness: bool,
    /// Allowed violation of the final grayness slack and of `g_v <= 0` for a
    /// stationary run to count as converged.
    pub feasibility_tol: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            lr: 8e-3,
            grad_clip_norm: 1.0,
            max_iters: 100,
            loss_tol: 1e-3,
            xi_init: 2.0,
            xi_step: 5e-2,
            xi_final: 5e-2,
            lambda_star: Vec::new(),
            lambda_star_default: 5e-2,
            alpha: 10.0,
            tau0: 3.0,
            nu: 1.04,
            mask_grayness: false,
            feasibility_tol: 1e-3,
        }
    }
}

impl OptConfig {
    pub fn validate(&self, n_materials: usize) -> Result<()> {
        let mut problems = Vec::new();
        let positive = [
            ("lr", self.lr),
            ("grad_clip_norm", self.grad_clip_norm),
            ("loss_tol", self.loss_tol),
            ("xi_init", self.xi_init),
            ("xi_step", self.xi_step),
            ("xi_final", self.xi_final),
            ("lambda_star_default", self.lambda_star_default),
            ("alpha", self.alpha),
            ("tau0", self.tau0),
            ("nu", self.nu),
            ("feasibility_tol", self.feasibility_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("optimizer.{name} must be positive (got {v})"));
            }
        }
        if self.max_iters == 0 {
            problems.push("optimizer.max_iters must be at least 1".into());
        }
        if self.xi_final > self.xi_init {
            problems.push(format!(
                "optimizer.xi_final ({}) must not exceed xi_init ({})",
                self.xi_final, self.xi_init
            ));
        }
        if !self.lambda_star.is_empty() && self.lambda_star.len() != n_materials {
            problems.push(format!(
                "optimizer.lambda_star has {} entries but the library has {n_materials} materials",
                self.lambda_star.len()
            ));
        }
        if self
            .lambda_star
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            problems.push("optimizer.lambda_star entries must be positive".into());
        }
        let total: f64 = self.lambda_stars(n_materials).iter().sum();
        if total > 1.0 {
            problems.push(format!(
                "optimizer.lambda_star sums to {total}, so no design can satisfy every minimum"
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn lambda_stars(&self, n_materials: usize) -> Vec<f64> {
        if self.lambda_star.is_empty() {
            vec![self.lambda_star_default; n_materials]
        } else {
            self.lambda_star.clone()
        }
    }

    /// Grayness slack at iteration `j`.
    pub fn xi(&self, j: usize) -> f64 {
        (self.xi_init - j as f64 * self.xi_step).max(self.xi_final)
    }

    /// Barrier sharpness at iteration `j`.
    pub fn tau(&self, j: usize) -> f64 {
        self.tau0 * self.nu.powi(j as i32)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `zeta_i = lo_i + (hi_i - lo_i) sigmoid(latent_i)`.
pub fn from_latent(latent: &[f64; PARAM_COUNT], bounds: &BoundsBox) -> SupershapeParams {
    let mut p = [0.0; PARAM_COUNT];
    for i in 0..PARAM_COUNT {
        let s = sigmoid(latent[i].clamp(-LATENT_LIMIT, LATENT_LIMIT));
        p[i] = bounds.lower[i] + (bounds.upper[i] - bounds.lower[i]) * s;
    }
    SupershapeParams::from_array(p)
}

pub fn from_latent_vjp(
    latent: &[f64; PARAM_COUNT],
    bounds: &BoundsBox,
    params_bar: &[f64; PARAM_COUNT],
) -> [f64; PARAM_COUNT] {
    let mut out = [0.0; PARAM_COUNT];
    for i in 0..PARAM_COUNT {
        if latent[i].abs() > LATENT_LIMIT {
            continue;
        }
        let s = sigmoid(latent[i]);
        out[i] = params_bar[i] * (bounds.upper[i] - bounds.lower[i]) * s * (1.0 - s);
    }
    out
}

/// Inverse of [`from_latent`] for parameters strictly inside the bounds.
pub fn to_latent(params: &SupershapeParams, bounds: &BoundsBox) -> Result<[f64; PARAM_COUNT]> {
    if !bounds.contains_strictly(params) {
        return Err(Error::Config(
            "initial shape parameters must lie strictly inside the bounds".into(),
        ));
    }
    let p = params.to_array();
    let mut out = [0.0; PARAM_COUNT];
    for i in 0..PARAM_COUNT {
        let u = (p[i] - bounds.lower[i]) / (bounds.upper[i] - bounds.lower[i]);
        out[i] = (u / (1.0 - u)).ln();
    }
    Ok(out)
}

/// `mdot_n = (m_n - m_{n-1}) / dt` for `n = 1..N`.
pub fn mass_rate_from_masses(masses: &[f64], dt: f64) -> Vec<f64> {
    masses.windows(2).map(|w| (w[1] - w[0]) / dt).collect()
}

/// Release profile from a nodal phase history.
pub fn mass_rate(history: &[Vec<f64>], mesh: &StructuredMesh, rho_s: f64, dt: f64) -> Vec<f64> {
    let masses: Vec<f64> = history
        .iter()
        .map(|phi| crate::fem::solid_mass(mesh, phi, rho_s))
        .collect();
    mass_rate_from_masses(&masses, dt)
}

pub fn objective_mse(mdot: &[f64], target: &[f64]) -> Result<f64> {
    if mdot.len() != target.len() || mdot.is_empty() {
        return Err(Error::Config(format!(
            "release profile has {} samples but the target has {}",
            mdot.len(),
            target.len()
        )));
    }
    Ok(mdot
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / mdot.len() as f64)
}

fn element_weights(n_elements: usize, mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        Some(m) => m.to_vec(),
        None => vec![1.0; n_elements],
    }
}

/// `(1/(S n_e)) sum_e sum_s gamma_s (1 - gamma_s)`; with `mask`, a
/// `mask`-weighted mean over elements instead.
pub fn grayness(gamma: &[Vec<f64>], mask: Option<&[f64]>) -> f64 {
    let s = gamma.first().map_or(1, Vec::len) as f64;
    let w = element_weights(gamma.len(), mask);
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    gamma
        .iter()
        .zip(&w)
        .map(|(g, we)| we * g.iter().map(|v| v * (1.0 - v)).sum::<f64>())
        .sum::<f64>()
        / (s * total)
}

/// Cotangents of [`grayness`] on `gamma` and on the mask.
pub fn grayness_vjp(
    gamma: &[Vec<f64>],
    mask: Option<&[f64]>,
    bar: f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let s = gamma.first().map_or(1, Vec::len) as f64;
    let w = element_weights(gamma.len(), mask);
    let total: f64 = w.iter().sum();
    let measure = grayness(gamma, mask);
    let gbar = gamma
        .iter()
        .zip(&w)
        .map(|(g, we)| {
            g.iter()
                .map(|v| bar * we * (1.0 - 2.0 * v) / (s * total))
                .collect()
        })
        .collect();
    let mbar = if mask.is_some() {
        gamma
            .iter()
            .map(|g| {
                let ge: f64 = g.iter().map(|v| v * (1.0 - v)).sum();
                bar * (ge / s - measure) / total
            })
            .collect()
    } else {
        vec![0.0; gamma.len()]
    };
    (gbar, mbar)
}

/// `lambda_s = (sum_e gamma_s phi v) / (lambda*_s V_solid) - 1`.
pub fn volume_deficit(
    gamma: &[Vec<f64>],
    phi_centers: &[f64],
    element_volume: f64,
    lambda_star: &[f64],
    min_volume: f64,
) -> Result<Vec<f64>> {
    let v_solid: f64 = phi_centers.iter().sum::<f64>() * element_volume;
    if v_solid <= min_volume {
        return Err(Error::DegenerateDesign(format!(
            "solid volume {v_solid:.3e} is below {min_volume:.3e}; the pill has vanished"
        )));
    }
    Ok(lambda_star
        .iter()
        .enumerate()
        .map(|(s, ls)| {
            let a: f64 = gamma
                .iter()
                .zip(phi_centers)
                .map(|(g, p)| g[s] * p)
                .sum::<f64>()
                * element_volume;
            a / (ls * v_solid) - 1.0
        })
        .collect())
}

/// Cotangents of [`volume_deficit`] on `gamma` and on the centre phase values.
pub fn volume_deficit_vjp(
    gamma: &[Vec<f64>],
    phi_centers: &[f64],
    element_volume: f64,
    lambda_star: &[f64],
    lambda_bar: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let v = element_volume;
    let v_solid: f64 = phi_centers.iter().sum::<f64>() * v;
    let amounts: Vec<f64> = (0..lambda_star.len())
        .map(|s| {
            gamma
                .iter()
                .zip(phi_centers)
                .map(|(g, p)| g[s] * p)
                .sum::<f64>()
                * v
        })
        .collect();
    let coef: Vec<f64> = lambda_bar
        .iter()
        .zip(lambda_star)
        .map(|(b, ls)| b / (ls * v_solid))
        .collect();
    let gbar = phi_centers
        .iter()
        .map(|p| coef.iter().map(|c| c * p * v).collect())
        .collect();
    let pbar = gamma
        .iter()
        .map(|g| {
            coef.iter()
                .enumerate()
                .map(|(s, c)| c * (g[s] * v - amounts[s] * v / v_solid))
                .sum()
        })
        .collect();
    (gbar, pbar)
}

/// Smooth maximum of `-lambda_s`: `(1/alpha) log sum_s exp(-alpha lambda_s)`.
pub fn volume_constraint(lambdas: &[f64], alpha: f64) -> f64 {
    let m = lambdas
        .iter()
        .map(|l| -alpha * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = lambdas.iter().map(|l| (-alpha * l - m).exp()).sum();
    (m + s.ln()) / alpha
}

/// `d g_v / d lambda_s`.
pub fn volume_constraint_gradient(lambdas: &[f64], alpha: f64) -> Vec<f64> {
    let z: Vec<f64> = lambdas.iter().map(|l| -alpha * l).collect();
    crate::matfield::softmax(&z)
        .into_iter()
        .map(|p| -p)
        .collect()
}

pub fn log_barrier(g: f64, tau: f64) -> f64 {
    if g <= -1.0 / (tau * tau) {
        -(-g).ln() / tau
    } else {
        tau * g - (1.0 / (tau * tau)).ln() / tau + 1.0 / tau
    }
}

pub fn log_barrier_derivative(g: f64, tau: f64) -> f64 {
    if g <= -1.0 / (tau * tau) {
        -1.0 / (tau * g)
    } else {
        tau
    }
}

pub fn total_loss(j: f64, j0: f64, g_r: f64, g_v: f64, tau: f64) -> f64 {
    j / j0 + log_barrier(g_r, tau) + log_barrier(g_v, tau)
}

/// Scale every block so the joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(blocks: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = blocks
        .iter()
        .flat_map(|b| b.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for b in blocks.iter_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn iterations(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Trainable design variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDesign {
    pub weights: NetworkWeights,
    pub zeta: [f64; PARAM_COUNT],
}

/// Continuation state used to form the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSchedule {
    pub xi: f64,
    pub tau: f64,
    pub j0: f64,
}

/// Everything the forward pass produces for one design.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub params: SupershapeParams,
    pub phi0: Vec<f64>,
    pub phi_centers: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub k_field: Vec<f64>,
    pub masses: Vec<f64>,
    pub mdot: Vec<f64>,
    pub j: f64,
    pub grayness: f64,
    pub lambdas: Vec<f64>,
    pub g_v: f64,
    pub newton_iterations: Vec<usize>,
}

impl Evaluation {
    pub fn g_r(&self, xi: f64) -> f64 {
        self.grayness - xi
    }

    pub fn loss(&self, schedule: &LossSchedule) -> f64 {
        total_loss(
            self.j,
            schedule.j0,
            self.g_r(schedule.xi),
            self.g_v,
            schedule.tau,
        )
    }

    /// Achieved per-material fractions of the solid volume.
    pub fn volume_fractions(&self, lambda_star: &[f64]) -> Vec<f64> {
        self.lambdas
            .iter()
            .zip(lambda_star)
            .map(|(l, ls)| ls * (l + 1.0))
            .collect()
    }
}

/// Data kept from a forward pass for the reverse pass.
pub struct EvaluationTape {
    forward: ForwardTape,
    network: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct DesignGradient {
    pub weights: Vec<f64>,
    pub zeta: [f64; PARAM_COUNT],
    pub peak_states: usize,
}

/// A fully specified inverse problem: mesh, physics, library, bounds and target.
pub struct DesignProblem {
    pub mesh: StructuredMesh,
    pub constants: PhysicsConstants,
    pub library: ExcipientLibrary,
    pub settings: SolverSettings,
    pub bounds: BoundsBox,
    pub target: Vec<f64>,
    pub config: OptConfig,
    pub schedule: CheckpointSchedule,
    lambda_star: Vec<f64>,
    solver: LinearSolver,
    centers: Vec<Point>,
    node_weights: Vec<f64>,
}

impl DesignProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mesh: StructuredMesh,
        constants: PhysicsConstants,
        library: ExcipientLibrary,
        settings: SolverSettings,
        bounds: BoundsBox,
        target: Vec<f64>,
        config: OptConfig,
        checkpoint_spacing: Option<usize>,
    ) -> Result<Self> {
        constants.validate()?;
        library.validate()?;
        settings.validate()?;
        bounds.validate()?;
        config.validate(library.len())?;
        if target.len() != settings.n_steps {
            return Err(Error::Config(format!(
                "target has {} samples but the run has {} steps",
                target.len(),
                settings.n_steps
            )));
        }
        let schedule = match checkpoint_spacing {
            Some(s) => CheckpointSchedule::new(settings.n_steps, s)?,
            None => CheckpointSchedule::balanced(settings.n_steps),
        };
        let solver = LinearSolver::new(&mesh)?;
        let centers = mesh.element_centers();
        let node_weights = mesh.integrate_centers_weights();
        let lambda_star = config.lambda_stars(library.len());
        Ok(Self {
            mesh,
            constants,
            library,
            settings,
            bounds,
            target,
            config,
            schedule,
            lambda_star,
            solver,
            centers,
            node_weights,
        })
    }

    pub fn lambda_star(&self) -> &[f64] {
        &self.lambda_star
    }

    pub fn element_centers(&self) -> &[Point] {
        &self.centers
    }

    fn min_volume(&self) -> f64 {
        MIN_SOLID_FRACTION * self.mesh.lx * self.mesh.ly
    }

    /// Forward model without a target comparison: phase field, material
    /// layout and the resulting release profile.
    pub fn evaluate(&self, design: &LatentDesign) -> Result<(Evaluation, EvaluationTape)> {
        self.evaluate_with(design, |_| {})
    }

    /// [`Self::evaluate`], calling `observer` on every time level.
    pub fn evaluate_with(
        &self,
        design: &LatentDesign,
        observer: impl FnMut(&StateFields),
    ) -> Result<(Evaluation, EvaluationTape)> {
        let params = from_latent(&design.zeta, &self.bounds);
        let phi0 = geometry::sample_phase_field(&params, self.mesh.nodes(), self.constants.mu)?;
        let phi_centers = self.mesh.center_values(&phi0);
        let network = design.weights.forward_batch(&self.centers);
        let rates = self.library.rates();
        let k_field: Vec<f64> = network
            .gamma
            .iter()
            .map(|g| g.iter().zip(&rates).map(|(a, b)| a * b).sum())
            .collect();
        let transient = Transient {
            mesh: &self.mesh,
            constants: &self.constants,
            settings: &self.settings,
            k_field: &k_field,
        };
        let forward = autodiff::forward(
            &transient,
            &phi0,
            self.schedule.clone(),
            &self.solver,
            observer,
        )?;
        let mdot = mass_rate_from_masses(&forward.masses, self.settings.dt);
        let j = objective_mse(&mdot, &self.target)?;
        let mask = self.config.mask_grayness.then_some(phi_centers.as_slice());
        let gray = grayness(&network.gamma, mask);
        let lambdas = volume_deficit(
            &network.gamma,
            &phi_centers,
            self.mesh.element_volume(),
            &self.lambda_star,
            self.min_volume(),
        )?;
        let g_v = volume_constraint(&lambdas, self.config.alpha);
        let eval = Evaluation {
            params,
            phi0,
            phi_centers,
            gamma: network.gamma.clone(),
            k_field,
            masses: forward.masses.clone(),
            mdot,
            j,
            grayness: gray,
            lambdas,
            g_v,
            newton_iterations: forward.newton_iterations.clone(),
        };
        Ok((eval, EvaluationTape { forward, network }))
    }

    /// Reverse pass: gradient of the loss with respect to the network
    /// parameters and the latent shape vector.
    pub fn gradient(
        &self,
        design: &LatentDesign,
        eval: &Evaluation,
        tape: &EvaluationTape,
        schedule: &LossSchedule,
    ) -> Result<DesignGradient> {
        let n_t = eval.mdot.len();
        let dt = self.settings.dt;
        let mdot_bar: Vec<f64> = eval
            .mdot
            .iter()
            .zip(&self.target)
            .map(|(m, t)| 2.0 * (m - t) / (n_t as f64 * schedule.j0))
            .collect();
        // m_n enters mdot_n with +1/dt and mdot_{n+1} with -1/dt
        let mass_bar: Vec<f64> = (0..=n_t)
            .map(|n| {
                let up = if n >= 1 { mdot_bar[n - 1] } else { 0.0 };
                let down = if n < n_t { mdot_bar[n] } else { 0.0 };
                (up - down) / dt
            })
            .collect();
        let transient = Transient {
            mesh: &self.mesh,
            constants: &self.constants,
            settings: &self.settings,
            k_field: &eval.k_field,
        };
        let sens = autodiff::backward_sweep(&transient, &tape.forward, &self.solver, |n, _| {
            autodiff::mass_cotangent(&self.node_weights, self.constants.rho_s, mass_bar[n])
        })?;

        let rates = self.library.rates();
        let mut gamma_bar: Vec<Vec<f64>> = sens
            .k_field
            .iter()
            .map(|kb| rates.iter().map(|r| kb * r).collect())
            .collect();
        let mut phi_c_bar = vec![0.0; self.mesh.n_elements()];

        let gr_bar = log_barrier_derivative(eval.g_r(schedule.xi), schedule.tau);
        let mask = self
            .config
            .mask_grayness
            .then_some(eval.phi_centers.as_slice());
        let (gb, mb) = grayness_vjp(&eval.gamma, mask, gr_bar);
        let gv_bar = log_barrier_derivative(eval.g_v, schedule.tau);
        let lambda_bar: Vec<f64> = volume_constraint_gradient(&eval.lambdas, self.config.alpha)
            .into_iter()
            .map(|d| d * gv_bar)
            .collect();
        let (vb, pb) = volume_deficit_vjp(
            &eval.gamma,
            &eval.phi_centers,
            self.mesh.element_volume(),
            &self.lambda_star,
            &lambda_bar,
        );
        for e in 0..gamma_bar.len() {
            for s in 0..rates.len() {
                gamma_bar[e][s] += gb[e][s] + vb[e][s];
            }
            phi_c_bar[e] += mb[e] + pb[e];
        }

        let mut phi0_bar = sens.phi0;
        for (a, b) in phi0_bar
            .iter_mut()
            .zip(self.mesh.center_values_transpose(&phi_c_bar))
        {
            *a += b;
        }
        let params_bar = geometry::sample_phase_field_vjp(
            &eval.params,
            self.mesh.nodes(),
            self.constants.mu,
            &phi0_bar,
        )?;
        let zeta = from_latent_vjp(&design.zeta, &self.bounds, &params_bar);
        let weights = design.weights.backward_batch(&tape.network, &gamma_bar);
        Ok(DesignGradient {
            weights,
            zeta,
            peak_states: sens.peak_states,
        })
    }

    /// Loss at `design` under a fixed schedule, for finite-difference checks.
    pub fn loss_at(&self, design: &LatentDesign, schedule: &LossSchedule) -> Result<f64> {
        Ok(self.evaluate(design)?.0.loss(schedule))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "J_norm")]
    pub j_norm: f64,
    pub g_r: f64,
    pub g_v: f64,
    pub loss: f64,
    pub xi: f64,
    pub tau: f64,
    pub grad_norm_w: f64,
    pub grad_norm_zeta: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Stationary loss with the final grayness slack and the volume
    /// constraint satisfied.
    Converged,
    IterationCap,
}

pub struct OptimizationOutcome {
    pub design: LatentDesign,
    pub evaluation: Evaluation,
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
    pub j0: f64,
}

/// Error raised inside the loop, tagged with the iteration it came from.
#[derive(Debug)]
pub struct IterationFailure {
    pub iteration: usize,
    pub error: Error,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Design loop: evaluate, record, test convergence, then take a clipped Adam
/// step on the network and latent shape with separate moment buffers.
///
/// Convergence compares the current loss against the previous design's loss
/// re-evaluated under the current `(xi, tau)`, so changes caused only by the
/// continuation schedule do not count as progress.
pub fn run_optimization(
    problem: &DesignProblem,
    initial: LatentDesign,
    mut on_iteration: impl FnMut(&IterationRecord, &Evaluation),
) -> std::result::Result<OptimizationOutcome, IterationFailure> {
    let cfg = &problem.config;
    let mut design = initial;
    let mut adam_w = Adam::new(design.weights.n_params());
    let mut adam_z = Adam::new(PARAM_COUNT);
    let mut records = Vec::new();
    let mut j0 = 1.0;
    let mut previous: Option<Evaluation> = None;
    let mut j = 0usize;
    loop {
        let t0 = Instant::now();
        let fail = |error| IterationFailure {
            iteration: j,
            error,
        };
        let (eval, tape) = problem.evaluate(&design).map_err(fail)?;
        if j == 0 {
            j0 = objective_normalization(eval.j, &problem.target);
        }
        let schedule = LossSchedule {
            xi: cfg.xi(j),
            tau: cfg.tau(j),
            j0,
        };
        let loss = eval.loss(&schedule);
        let stationary = previous
            .as_ref()
            .is_some_and(|p| (loss - p.loss(&schedule)).abs() <= cfg.loss_tol);
        let feasible =
            eval.grayness <= cfg.xi_final + cfg.feasibility_tol && eval.g_v <= cfg.feasibility_tol;
        let last = j + 1 >= cfg.max_iters;
        let done = stationary && feasible;

        let (gw, gz) = if done || last {
            (0.0, 0.0)
        } else {
            let mut grad = problem
                .gradient(&design, &eval, &tape, &schedule)
                .map_err(fail)?;
            let (nw, nz) = (norm(&grad.weights), norm(&grad.zeta));
            clip_global_norm(&mut [&mut grad.weights, &mut grad.zeta], cfg.grad_clip_norm);
            let mut w = design.weights.params();
            adam_w.step(&mut w, &grad.weights, cfg.lr);
            design.weights.set_params(&w);
            adam_z.step(&mut design.zeta, &grad.zeta, cfg.lr);
            (nw, nz)
        };
        let record = IterationRecord {
            iter: j,
            j: eval.j,
            j_norm: eval.j / j0,
            g_r: eval.g_r(schedule.xi),
            g_v: eval.g_v,
            loss,
            xi: schedule.xi,
            tau: schedule.tau,
            grad_norm_w: gw,
            grad_norm_zeta: gz,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "iter {:3}: J/J0 {:.4e}  g_r {:+.3e}  g_v {:+.3e}  L {:+.5e}  ({:.1}s)",
            j,
            record.j_norm,
            record.g_r,
            record.g_v,
            loss,
            record.seconds
        );
        on_iteration(&record, &eval);
        records.push(record);
        if done || last {
            // the returned design is the one that was evaluated last
            if !done {
                log::warn!(
                    "optimization stopped at the iteration cap ({})",
                    cfg.max_iters
                );
            }
            return Ok(OptimizationOutcome {
                design,
                evaluation: eval,
                records,
                termination: if done {
                    Termination::Converged
                } else {
                    Termination::IterationCap
                },
                j0,
            });
        }
        previous = Some(eval);
        j += 1;
    }
}

/// One coordinate of a gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub loss: f64,
}

/// Compare the adjoint gradient of the loss against central differences for
/// every latent shape coordinate and the chosen network parameters. Errors
/// are relative to `max(|adjoint|, |fd|, 1e-6 * largest gradient entry)`.
#[cfg(any(test, feature = "oracle"))]
pub fn gradient_check(
    problem: &DesignProblem,
    design: &LatentDesign,
    schedule: &LossSchedule,
    weight_indices: &[usize],
    step: f64,
) -> Result<GradCheckReport> {
    use crate::autodiff::oracle::finite_difference_oracle;
    let (eval, tape) = problem.evaluate(design)?;
    let loss = eval.loss(schedule);
    let grad = problem.gradient(design, &eval, &tape, schedule)?;
    let mut failure = None;
    let mut fd_loss = |d: &LatentDesign| match problem.loss_at(d, schedule) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let fd_zeta = finite_difference_oracle(
        |z| {
            let mut d = design.clone();
            d.zeta.copy_from_slice(z);
            fd_loss(&d)
        },
        &design.zeta,
        step,
    );
    let base = design.weights.params();
    let picked: Vec<f64> = weight_indices.iter().map(|&i| base[i]).collect();
    let fd_w = finite_difference_oracle(
        |w| {
            let mut p = base.clone();
            for (&i, v) in weight_indices.iter().zip(w) {
                p[i] = *v;
            }
            let mut d = design.clone();
            d.weights.set_params(&p);
            fd_loss(&d)
        },
        &picked,
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mut pairs: Vec<(String, f64, f64)> = (0..PARAM_COUNT)
        .map(|i| {
            (
                format!("zeta_latent.{}", geometry::PARAM_NAMES[i]),
                grad.zeta[i],
                fd_zeta[i],
            )
        })
        .collect();
    pairs.extend(
        weight_indices
            .iter()
            .zip(&fd_w)
            .map(|(&i, fd)| (format!("w[{i}]"), grad.weights[i], *fd)),
    );
    let floor = 1e-6
        * pairs
            .iter()
            .map(|(_, a, f)| a.abs().max(f.abs()))
            .fold(0.0, f64::max);
    let entries: Vec<GradCheckEntry> = pairs
        .into_iter()
        .map(|(name, adjoint, fd)| GradCheckEntry {
            name,
            adjoint,
            finite_difference: fd,
            rel_error: (adjoint - fd).abs() / adjoint.abs().max(fd.abs()).max(floor).max(1e-300),
        })
        .collect();
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        loss,
    })
}

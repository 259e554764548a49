//! Run orchestration and artifact writing.
//!
//! Output directory layout:
//!
//! | file | modes | content |
//! |---|---|---|
//! | `manifest.toml` | all | version, seed, timestamps, termination, exit code, resolved config |
//! | `resolved_config.toml` | all | the resolved config, directly rerunnable |
//! | `release_curve.csv` | simulate, optimize | `t,mdot,mdot_target,mass` per step `n = 1..=N` |
//! | `iteration_log.csv` | optimize | `iter,J,J_norm,g_r,g_v,loss,xi,tau,grad_norm_w,grad_norm_zeta` |
//! | `timing.csv` | optimize | `iter,seconds` |
//! | `design.toml` | simulate, optimize | shape (physical and latent), weights file, volume fractions |
//! | `weights.txt` | simulate, optimize | network weights |
//! | `gradcheck.toml` | gradcheck | per-coordinate adjoint vs finite difference |
//! | `fields/step_NNNN.vtk` | simulate, optimize | snapshots every `output.field_stride` steps |

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use pilltop::fem::export::vtk_string;
use pilltop::fem::{simulate, StateFields, StructuredMesh};
use pilltop::geometry::{sample_phase_field, SupershapeParams};
use pilltop::materials::ExcipientLibrary;
use pilltop::matfield::{pretrain_uniform, NetworkWeights};
use pilltop::optimize::{
    from_latent, gradient_check, mass_rate_from_masses, objective_normalization, run_optimization,
    to_latent, DesignProblem, Evaluation, GradCheckReport, IterationRecord, LatentDesign,
    LossSchedule, Termination,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigErrors, Mode, RunConfig};
use crate::target::{load_target, TargetError};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: u8 = 0;
pub const EXIT_GRADCHECK_FAILED: u8 = 1;
pub const EXIT_ITERATION_CAP: u8 = 2;
pub const EXIT_CONFIG: u8 = 64;
pub const EXIT_SOLVER: u8 = 70;
pub const EXIT_ADJOINT: u8 = 71;
pub const EXIT_DEGENERATE: u8 = 72;
pub const EXIT_IO: u8 = 74;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n{0}")]
    Config(ConfigErrors),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("solver failure{}: {source}", at_iteration(.iteration))]
    Solver {
        iteration: Option<usize>,
        source: pilltop::Error,
    },
    #[error("adjoint failure{}: {source}", at_iteration(.iteration))]
    Adjoint {
        iteration: Option<usize>,
        source: pilltop::Error,
    },
    #[error("degenerate design{}: {source}", at_iteration(.iteration))]
    Degenerate {
        iteration: Option<usize>,
        source: pilltop::Error,
    },
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

fn at_iteration(it: &Option<usize>) -> String {
    it.map(|i| format!(" at iteration {i}")).unwrap_or_default()
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Target(_) => EXIT_CONFIG,
            RunError::Solver { .. } => EXIT_SOLVER,
            RunError::Adjoint { .. } => EXIT_ADJOINT,
            RunError::Degenerate { .. } => EXIT_DEGENERATE,
            RunError::Io(_) => EXIT_IO,
        }
    }

    fn core(source: pilltop::Error, iteration: Option<usize>) -> Self {
        use pilltop::Error as E;
        match source {
            E::Config(msg) => RunError::Config(ConfigErrors(vec![msg])),
            E::Io(e) => RunError::Io(e),
            E::Adjoint { .. } => RunError::Adjoint { iteration, source },
            E::DegenerateDesign(_) | E::InvalidGeometry(_) => {
                RunError::Degenerate { iteration, source }
            }
            E::Divergence { .. } | E::NonConvergence { .. } | E::Singular { .. } => {
                RunError::Solver { iteration, source }
            }
        }
    }
}

impl From<pilltop::Error> for RunError {
    fn from(e: pilltop::Error) -> Self {
        RunError::core(e, None)
    }
}

/// What a finished run reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub exit_code: u8,
    /// `completed`, `converged`, `iteration_cap`, `gradcheck_passed` or `gradcheck_failed`.
    pub termination: String,
    pub final_j: Option<f64>,
    pub iterations: usize,
    pub max_rel_error: Option<f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    tool: &'static str,
    version: &'static str,
    mode: String,
    seed: u64,
    started: String,
    finished: String,
    termination: &'a str,
    exit_code: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    files: Vec<String>,
    config: toml::Table,
}

fn timestamp(t: SystemTime) -> String {
    humantime::format_rfc3339_seconds(t).to_string()
}

/// Run `mode` and write every artifact, including the manifest on failure.
/// The output directory comes from `cfg.output_dir` (relative to the config).
pub fn execute(cfg: &RunConfig, mode: Mode) -> (Result<RunSummary, RunError>, PathBuf) {
    let out = cfg.resolve(&cfg.output_dir);
    let started = SystemTime::now();
    let result = cfg.validate(mode).map_err(RunError::Config).and_then(|()| {
        fs::create_dir_all(&out)?;
        run_mode(cfg, mode, &out)
    });
    if out.is_dir() {
        let (termination, exit_code, error) = match &result {
            Ok(s) => (s.termination.as_str(), s.exit_code, None),
            Err(e) => ("error", e.exit_code(), Some(e.to_string())),
        };
        let mut files: Vec<String> = fs::read_dir(&out)
            .map(|d| {
                d.filter_map(|e| e.ok())
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .filter(|n| n != "manifest.toml")
                    .collect()
            })
            .unwrap_or_default();
        files.sort();
        let manifest = Manifest {
            format_version: ARTIFACT_FORMAT_VERSION,
            tool: "pilltop",
            version: env!("CARGO_PKG_VERSION"),
            mode: mode.to_string(),
            seed: cfg.network.seed,
            started: timestamp(started),
            finished: timestamp(SystemTime::now()),
            termination,
            exit_code,
            error,
            files,
            config: toml::from_str(&cfg.resolved_toml(mode)).expect("resolved config parses"),
        };
        let text = toml::to_string(&manifest).expect("manifest serializes");
        if let Err(e) = fs::write(out.join("manifest.toml"), text) {
            log::error!("cannot write manifest: {e}");
        }
    }
    (result, out)
}

/// Everything a mode needs: the assembled problem and the starting design.
pub struct Prepared {
    pub problem: DesignProblem,
    pub design: LatentDesign,
    pub target: Option<Vec<f64>>,
}

/// Build the design problem, target and initial design from a validated config.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, RunError> {
    let mesh = cfg.build_mesh()?;
    let h = mesh.hx().max(mesh.hy());
    let width = cfg.constants.interface_width();
    if width < h {
        log::warn!(
            "interface width {width:.3e} is below the element size {h:.3e}; the diffuse interface is under-resolved"
        );
    }
    let settings = cfg.solver.settings();
    let target = resolve_target(cfg, &mesh)?;
    let bounds = cfg.shape.bounds(cfg.domain()).expect("validated bounds");
    let initial = cfg.shape.initial.unwrap_or_else(|| bounds.midpoint());
    let zeta = to_latent(&initial, &bounds)?;
    let problem = DesignProblem::new(
        mesh,
        cfg.constants,
        cfg.library.clone(),
        settings,
        bounds,
        target
            .clone()
            .unwrap_or_else(|| vec![0.0; settings.n_steps]),
        cfg.optimizer.clone(),
        cfg.solver.checkpoint_spacing,
    )?;
    let weights = match &cfg.initial_weights {
        Some(p) => {
            let path = cfg.resolve(p);
            let text = fs::read_to_string(&path).map_err(|e| {
                RunError::Config(ConfigErrors(vec![format!(
                    "cannot read {}: {e}",
                    path.display()
                )]))
            })?;
            let w = NetworkWeights::from_text(&text)?;
            if w.n_materials() != cfg.library.len() {
                return Err(RunError::Config(ConfigErrors(vec![format!(
                    "initial_weights has {} outputs but the library has {} materials",
                    w.n_materials(),
                    cfg.library.len()
                )])));
            }
            w
        }
        None => {
            let mut w = NetworkWeights::init(&cfg.network, cfg.library.len())?;
            let report = pretrain_uniform(&mut w, problem.element_centers(), &cfg.pretrain);
            log::info!(
                "pretraining: {} iterations, mse {:.3e}, max deviation {:.3e}",
                report.iterations,
                report.mse,
                report.max_deviation
            );
            w
        }
    };
    Ok(Prepared {
        problem,
        design: LatentDesign { weights, zeta },
        target,
    })
}

fn resolve_target(cfg: &RunConfig, mesh: &StructuredMesh) -> Result<Option<Vec<f64>>, RunError> {
    let t = &cfg.target;
    let n = cfg.solver.n_steps;
    if let Some(file) = &t.file {
        let profile = load_target(&cfg.resolve(file), cfg.solver.dt, n)?;
        return Ok(Some(profile.mdot));
    }
    if let Some(v) = &t.values {
        return Ok(Some(v.clone()));
    }
    if let Some(r) = &t.reference {
        let phi0 = sample_phase_field(&r.shape, mesh.nodes(), cfg.constants.mu)?;
        let k = r.k_field(&mesh.element_centers());
        let out = simulate(&phi0, &k, &cfg.constants, mesh, &cfg.solver.settings())?;
        log::info!("target generated from the reference design ({} steps)", n);
        return Ok(Some(mass_rate_from_masses(&out.masses, cfg.solver.dt)));
    }
    Ok(None)
}

fn run_mode(cfg: &RunConfig, mode: Mode, out: &Path) -> Result<RunSummary, RunError> {
    log::info!(
        "{mode}: {}x{} mesh, {} steps, {} materials",
        cfg.mesh.nx,
        cfg.mesh.ny,
        cfg.solver.n_steps,
        cfg.library.len()
    );
    fs::write(out.join("resolved_config.toml"), cfg.resolved_toml(mode))?;
    let prep = prepare(cfg)?;
    match mode {
        Mode::Simulate => run_simulate(cfg, prep, out),
        Mode::Optimize => run_optimize(cfg, prep, out),
        Mode::Gradcheck => run_gradcheck(cfg, prep, out),
    }
}

fn snapshot_due(step: usize, stride: usize) -> bool {
    stride > 0 && step % stride == 0
}

/// Evaluate `design`, keeping the states due for export.
fn evaluate_keeping(
    problem: &DesignProblem,
    design: &LatentDesign,
    stride: usize,
) -> Result<(Evaluation, Vec<StateFields>), RunError> {
    let mut kept = Vec::new();
    let (eval, _) = problem.evaluate_with(design, |s| {
        if snapshot_due(s.step, stride) {
            kept.push(s.clone());
        }
    })?;
    Ok((eval, kept))
}

fn run_simulate(cfg: &RunConfig, prep: Prepared, out: &Path) -> Result<RunSummary, RunError> {
    let (eval, states) = evaluate_keeping(&prep.problem, &prep.design, cfg.output.field_stride)?;
    write_design_artifacts(
        cfg,
        &prep.problem,
        &prep.design,
        &eval,
        prep.target.as_deref(),
        out,
    )?;
    export_fields(
        &out.join("fields"),
        &prep.problem.mesh,
        &states,
        &prep.design.weights,
        &eval.k_field,
        &cfg.library,
    )?;
    let released = eval.masses[0] - eval.masses[eval.masses.len() - 1];
    log::info!(
        "released {:.4e} of {:.4e} ({:.1}%)",
        released,
        eval.masses[0],
        100.0 * released / eval.masses[0].max(f64::MIN_POSITIVE)
    );
    Ok(RunSummary {
        exit_code: EXIT_OK,
        termination: "completed".into(),
        final_j: prep.target.is_some().then_some(eval.j),
        iterations: 0,
        max_rel_error: None,
    })
}

fn run_optimize(cfg: &RunConfig, prep: Prepared, out: &Path) -> Result<RunSummary, RunError> {
    let mut log_w = csv::Writer::from_path(out.join("iteration_log.csv")).map_err(csv_io)?;
    let mut timing = fs::File::create(out.join("timing.csv"))?;
    writeln!(timing, "iter,seconds")?;
    let mut write_err: Option<std::io::Error> = None;
    let outcome = run_optimization(&prep.problem, prep.design, |r: &IterationRecord, _| {
        if write_err.is_some() {
            return;
        }
        let res = log_w
            .serialize(r)
            .map_err(csv_io)
            .and_then(|()| log_w.flush())
            .and_then(|()| writeln!(timing, "{},{:.3}", r.iter, r.seconds));
        if let Err(e) = res {
            write_err = Some(e);
        }
    })
    .map_err(|f| RunError::core(f.error, Some(f.iteration)))?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    drop(log_w);
    let eval = if cfg.output.field_stride > 0 {
        let (eval, states) =
            evaluate_keeping(&prep.problem, &outcome.design, cfg.output.field_stride)?;
        export_fields(
            &out.join("fields"),
            &prep.problem.mesh,
            &states,
            &outcome.design.weights,
            &eval.k_field,
            &cfg.library,
        )?;
        eval
    } else {
        outcome.evaluation
    };
    write_design_artifacts(
        cfg,
        &prep.problem,
        &outcome.design,
        &eval,
        prep.target.as_deref(),
        out,
    )?;
    let (exit_code, termination) = match outcome.termination {
        Termination::Converged => (EXIT_OK, "converged"),
        Termination::IterationCap => (EXIT_ITERATION_CAP, "iteration_cap"),
    };
    log::info!(
        "{termination} after {} iterations: J = {:.4e} (J/J0 = {:.4e})",
        outcome.records.len(),
        eval.j,
        eval.j / outcome.j0
    );
    Ok(RunSummary {
        exit_code,
        termination: termination.into(),
        final_j: Some(eval.j),
        iterations: outcome.records.len(),
        max_rel_error: None,
    })
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

#[derive(Serialize)]
struct GradcheckFile<'a> {
    format_version: u32,
    passed: bool,
    tolerance: f64,
    step: f64,
    xi: f64,
    tau: f64,
    j0: f64,
    #[serde(flatten)]
    report: &'a GradCheckReport,
}

fn run_gradcheck(cfg: &RunConfig, prep: Prepared, out: &Path) -> Result<RunSummary, RunError> {
    if prep.target.is_none() {
        log::info!("no target given; checking against a zero target");
    }
    let (eval, _) = prep.problem.evaluate(&prep.design)?;
    let schedule = LossSchedule {
        xi: cfg.optimizer.xi(0),
        tau: cfg.optimizer.tau(0),
        j0: objective_normalization(eval.j, &prep.problem.target),
    };
    let n_params = prep.design.weights.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.network.seed);
    let count = cfg.gradcheck.weight_samples.min(n_params);
    let mut picks = rand::seq::index::sample(&mut rng, n_params, count).into_vec();
    picks.sort_unstable();
    let report = gradient_check(
        &prep.problem,
        &prep.design,
        &schedule,
        &picks,
        cfg.gradcheck.step,
    )?;
    let passed = report.max_rel_error <= cfg.gradcheck.tolerance;
    for e in &report.entries {
        log::info!(
            "{:<24} adjoint {:+.6e}  fd {:+.6e}  rel {:.2e}",
            e.name,
            e.adjoint,
            e.finite_difference,
            e.rel_error
        );
    }
    let file = GradcheckFile {
        format_version: ARTIFACT_FORMAT_VERSION,
        passed,
        tolerance: cfg.gradcheck.tolerance,
        step: cfg.gradcheck.step,
        xi: schedule.xi,
        tau: schedule.tau,
        j0: schedule.j0,
        report: &report,
    };
    fs::write(
        out.join("gradcheck.toml"),
        toml::to_string(&file).expect("report serializes"),
    )?;
    log::info!(
        "max relative error {:.3e} (tolerance {:.1e})",
        report.max_rel_error,
        cfg.gradcheck.tolerance
    );
    Ok(RunSummary {
        exit_code: if passed {
            EXIT_OK
        } else {
            EXIT_GRADCHECK_FAILED
        },
        termination: if passed {
            "gradcheck_passed"
        } else {
            "gradcheck_failed"
        }
        .into(),
        final_j: Some(eval.j),
        iterations: 0,
        max_rel_error: Some(report.max_rel_error),
    })
}

/// `t,mdot,mdot_target,mass` for steps `1..=N`; `mdot_target` is empty without a target.
pub fn release_curve_csv(dt: f64, mdot: &[f64], masses: &[f64], target: Option<&[f64]>) -> String {
    let mut s = String::from("t,mdot,mdot_target,mass\n");
    for (i, m) in mdot.iter().enumerate() {
        let t = (i + 1) as f64 * dt;
        let tgt = target.map(|v| format!("{:e}", v[i])).unwrap_or_default();
        s.push_str(&format!("{t:e},{m:e},{tgt},{:e}\n", masses[i + 1]));
    }
    s
}

#[derive(Serialize)]
struct MaterialSummary<'a> {
    name: &'a str,
    color: &'a str,
    k: f64,
    lambda_star: f64,
    volume_fraction: f64,
}

#[derive(Serialize)]
struct DesignSummary<'a> {
    format_version: u32,
    weights_file: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    objective_j: Option<f64>,
    grayness: f64,
    g_v: f64,
    initial_mass: f64,
    final_mass: f64,
    shape: SupershapeParams,
    shape_latent: SupershapeParams,
    materials: Vec<MaterialSummary<'a>>,
}

fn write_design_artifacts(
    cfg: &RunConfig,
    problem: &DesignProblem,
    design: &LatentDesign,
    eval: &Evaluation,
    target: Option<&[f64]>,
    out: &Path,
) -> Result<(), RunError> {
    fs::write(
        out.join("release_curve.csv"),
        release_curve_csv(cfg.solver.dt, &eval.mdot, &eval.masses, target),
    )?;
    fs::write(out.join("weights.txt"), design.weights.to_text())?;
    let fractions = eval.volume_fractions(problem.lambda_star());
    let summary = DesignSummary {
        format_version: ARTIFACT_FORMAT_VERSION,
        weights_file: "weights.txt",
        objective_j: target.map(|_| eval.j),
        grayness: eval.grayness,
        g_v: eval.g_v,
        initial_mass: eval.masses[0],
        final_mass: eval.masses[eval.masses.len() - 1],
        shape: from_latent(&design.zeta, &problem.bounds),
        shape_latent: SupershapeParams::from_array(design.zeta),
        materials: cfg
            .library
            .materials
            .iter()
            .zip(problem.lambda_star())
            .zip(&fractions)
            .map(|((m, ls), f)| MaterialSummary {
                name: &m.name,
                color: &m.color,
                k: m.k,
                lambda_star: *ls,
                volume_fraction: *f,
            })
            .collect(),
    };
    fs::write(
        out.join("design.toml"),
        toml::to_string(&summary).expect("summary serializes"),
    )?;
    Ok(())
}

/// Write one legacy VTK file per state. Point data: `phi`, `C`, `k_field`
/// and one material fraction array per library entry (network evaluated at
/// the nodes); cell data: `k_element`, the rate field the solver used.
/// Material colours go on the title line.
pub fn export_fields(
    dir: &Path,
    mesh: &StructuredMesh,
    states: &[StateFields],
    weights: &NetworkWeights,
    k_element: &[f64],
    library: &ExcipientLibrary,
) -> std::io::Result<Vec<PathBuf>> {
    if states.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(dir)?;
    let gamma = weights.forward_batch(mesh.nodes()).gamma;
    let rates = library.rates();
    let k_nodes: Vec<f64> = gamma
        .iter()
        .map(|g| g.iter().zip(&rates).map(|(a, b)| a * b).sum())
        .collect();
    let per_material: Vec<Vec<f64>> = (0..library.len())
        .map(|s| gamma.iter().map(|g| g[s]).collect())
        .collect();
    let note = format!(
        "materials={}",
        library
            .materials
            .iter()
            .map(|m| format!("{}:{}", m.name, m.color))
            .collect::<Vec<_>>()
            .join(",")
    );
    let last = states.iter().map(|s| s.step).max().unwrap_or(0);
    let width = last.to_string().len().max(4);
    let mut written = Vec::new();
    for s in states {
        let mut points: Vec<(&str, &[f64])> =
            vec![("phi", &s.phi), ("C", &s.c), ("k_field", &k_nodes)];
        for (m, g) in library.materials.iter().zip(&per_material) {
            points.push((m.name.as_str(), g));
        }
        let doc = vtk_string(mesh, s.step, &note, &points, &[("k_element", k_element)]);
        let path = dir.join(format!("step_{:0width$}.vtk", s.step));
        fs::write(&path, doc)?;
        written.push(path);
    }
    Ok(written)
}

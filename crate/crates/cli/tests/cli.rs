use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pilltop_cli::config::{parse_config, Mode, RunConfig};
use pilltop_cli::run::{
    execute, RunError, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_IO, EXIT_OK, EXIT_SOLVER,
};
use pilltop_cli::target::{load_target, parse_target_csv};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pilltop(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_pilltop"))
        .args(args)
        .env("RUST_LOG", "error")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn errors(text: &str, mode: Mode) -> Vec<String> {
    parse_config(text, Path::new("."))
        .and_then(|c| c.validate(mode))
        .unwrap_err()
        .0
}

#[test]
fn empty_optimize_config_requires_a_target() {
    let e = errors("", Mode::Optimize);
    assert_eq!(e.len(), 1);
    assert!(e[0].contains("target profile required"), "{e:?}");
    assert!(parse_config("", Path::new("."))
        .unwrap()
        .validate(Mode::Simulate)
        .is_ok());
}

#[test]
fn partial_config_keeps_defaults() {
    let cfg = parse_config("[mesh]\nnx = 32\n", Path::new(".")).unwrap();
    let mut expected = RunConfig::default();
    expected.mesh.nx = 32;
    assert_eq!(cfg, expected);
    assert_eq!(cfg.mesh.ny, 75);
    assert_eq!(cfg.solver.n_steps, 100);
    assert_eq!(cfg.optimizer.lr, 8e-3);
    assert_eq!(cfg.library.len(), 5);
}

#[test]
fn validation_names_fields_and_lists_every_problem() {
    let e = errors("[solver]\ndt = -1.0\n", Mode::Simulate);
    assert!(e.iter().any(|m| m.contains("solver.dt")), "{e:?}");

    let e = errors(
        "[mesh]\nnx = 1\n[solver]\ndt = -1.0\n[optimizer]\nlambda_star = [0.1, 0.1]\n",
        Mode::Optimize,
    );
    assert!(e.len() >= 4, "{e:?}");
    assert!(e.iter().any(|m| m.contains("mesh.nx")));
    assert!(e.iter().any(|m| m.contains("lambda_star has 2 entries")));
    assert!(e.iter().any(|m| m.contains("target profile required")));

    let e = parse_config("[mesh]\nnz = 3\n", Path::new("."))
        .unwrap_err()
        .0;
    assert!(e[0].contains("nz"), "{e:?}");
}

#[test]
fn shipped_configs_parse_and_validate() {
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|x| x == "toml") {
            let cfg = pilltop_cli::load_config(&path).unwrap();
            let mode = if path
                .file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with("simulate")
            {
                Mode::Simulate
            } else if path
                .file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with("gradcheck")
            {
                Mode::Gradcheck
            } else {
                Mode::Optimize
            };
            cfg.validate(mode)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
    }
}

#[test]
fn target_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, rows: usize, dt: f64| {
        let mut s = String::from("t,mdot\n");
        for n in 1..=rows {
            s.push_str(&format!("{},{}\n", n as f64 * dt, -1e-4 * n as f64));
        }
        let p = dir.path().join(name);
        fs::write(&p, s).unwrap();
        p
    };
    let on_grid = load_target(&write("a.csv", 100, 25.0), 25.0, 100).unwrap();
    assert!(!on_grid.resampled);
    assert_eq!(on_grid.mdot.len(), 100);

    let coarse = load_target(&write("b.csv", 50, 50.0), 25.0, 100).unwrap();
    assert!(coarse.resampled);
    assert_eq!(coarse.mdot.len(), 100);
    // linear between samples: t = 75 lies halfway between rows 1 and 2
    assert!((coarse.mdot[2] + 1.5e-4).abs() < 1e-18);

    let p = dir.path().join("c.csv");
    fs::write(&p, "25,-1e-4\n50,-2e-4\n").unwrap();
    assert!(load_target(&p, 25.0, 2)
        .unwrap_err()
        .to_string()
        .contains("header"));
    fs::write(&p, "").unwrap();
    assert!(load_target(&p, 25.0, 2).is_err());
    assert!(parse_target_csv("t,mdot\n2,0\n1,0\n").is_err());

    let shipped = configs_dir().join("targets/nonmonotonic.csv");
    assert!(!load_target(&shipped, 25.0, 100).unwrap().resampled);
}

fn simulate_config(out: &Path) -> RunConfig {
    let mut cfg = pilltop_cli::load_config(&configs_dir().join("simulate_circle.toml")).unwrap();
    cfg.mesh.nx = 32;
    cfg.mesh.ny = 32;
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn simulate_writes_release_curve_fields_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate_config(dir.path());
    let (res, out) = execute(&cfg, Mode::Simulate);
    assert_eq!(res.unwrap().exit_code, EXIT_OK);

    let curve = fs::read_to_string(out.join("release_curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "t,mdot,mdot_target,mass");
    assert_eq!(lines.len(), 101);
    let mass: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(mass.windows(2).all(|w| w[1] < w[0]));

    let mut fields: Vec<String> = fs::read_dir(out.join("fields"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    fields.sort();
    assert_eq!(fields.len(), 11);
    assert_eq!(fields[0], "step_0000.vtk");
    assert_eq!(fields[10], "step_0100.vtk");
    let vtk = fs::read_to_string(out.join("fields/step_0050.vtk")).unwrap();
    assert!(vtk
        .lines()
        .nth(1)
        .unwrap()
        .ends_with("materials=solid:#808080"));
    for name in ["phi", "C", "k_field", "solid", "k_element"] {
        assert!(vtk.contains(&format!("SCALARS {name} double 1")), "{name}");
    }

    let manifest: toml::Table =
        toml::from_str(&fs::read_to_string(out.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest["termination"].as_str(), Some("completed"));
    assert_eq!(manifest["exit_code"].as_integer(), Some(0));
    assert!(manifest["config"]["mesh"]["nx"].as_integer() == Some(32));

    // the resolved config reproduces the run byte for byte
    let before = fs::read(out.join("fields/step_0100.vtk")).unwrap();
    let resolved = pilltop_cli::load_config(&out.join("resolved_config.toml")).unwrap();
    let (res, _) = execute(&resolved, Mode::Simulate);
    res.unwrap();
    assert_eq!(
        fs::read_to_string(out.join("release_curve.csv")).unwrap(),
        curve
    );
    assert_eq!(fs::read(out.join("fields/step_0100.vtk")).unwrap(), before);
}

#[test]
fn field_exports_name_every_material() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pilltop_cli::load_config(&configs_dir().join("degraded_case1.toml")).unwrap();
    let cfg = RunConfig {
        mesh: pilltop_cli::config::MeshConfig {
            nx: 10,
            ny: 10,
            ..cfg.mesh
        },
        solver: pilltop_cli::config::SolverConfig {
            n_steps: 4,
            ..cfg.solver
        },
        output: pilltop_cli::config::OutputConfig { field_stride: 2 },
        output_dir: dir.path().to_path_buf(),
        ..cfg
    };
    let (res, out) = execute(&cfg, Mode::Simulate);
    res.unwrap();
    let vtk = fs::read_to_string(out.join("fields/step_0004.vtk")).unwrap();
    for name in ["fresh", "moderate", "aged"] {
        assert!(vtk.contains(&format!("SCALARS {name} double 1")), "{name}");
    }
    assert_eq!(fs::read_dir(out.join("fields")).unwrap().count(), 3);
}

#[test]
fn gradcheck_mode_passes_on_the_shipped_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = configs_dir().join("gradcheck_16.toml");
    assert_eq!(
        pilltop(&["gradcheck", "--config", cfg.to_str().unwrap(), "--out", out]),
        0
    );
    let report: toml::Table =
        toml::from_str(&fs::read_to_string(dir.path().join("gradcheck.toml")).unwrap()).unwrap();
    assert!(report["max_rel_error"].as_float().unwrap() <= 1e-3);
    assert_eq!(report["entries"].as_array().unwrap().len(), 12);
}

#[test]
fn self_target_terminates_early() {
    let dir = tempfile::tempdir().unwrap();
    let shape = "{ cx = 0.5, cy = 0.48, theta = 0.3, a = 0.27, b = 0.22, n = 1.9, m = 2.0 }";
    let cfg = format!(
        "[mesh]\nnx = 12\nny = 12\n[solver]\nn_steps = 8\n[library]\nmaterials = [{{ name = \"solid\", k = 2e-4 }}]\n\
         [shape]\ninitial = {shape}\n[target.reference]\nshape = {shape}\nk = 2e-4\n"
    );
    let path = dir.path().join("self.toml");
    fs::write(&path, cfg).unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        pilltop(&[
            "optimize",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        EXIT_OK as i32
    );
    let log = fs::read_to_string(out.join("iteration_log.csv")).unwrap();
    assert!(log.lines().count() <= 4, "{log}");
    assert!(log.starts_with("iter,J,J_norm,g_r,g_v,loss,xi,tau,grad_norm_w,grad_norm_zeta\n"));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, text: &str, mode: &str| {
        let path = dir.path().join(format!("{name}.toml"));
        fs::write(&path, text).unwrap();
        let out = dir.path().join(name);
        pilltop(&[
            mode,
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
    };
    assert_eq!(run("empty", "", "optimize"), EXIT_CONFIG as i32);
    assert_eq!(
        run("unknown", "bogus = 1\n", "simulate"),
        EXIT_CONFIG as i32
    );
    assert_eq!(
        pilltop(&["nonsense", "--config", "x.toml"]),
        EXIT_CONFIG as i32
    );
    // one Newton iteration with no step halving cannot reach the tolerance
    let stiff = "[mesh]\nnx = 8\nny = 8\n[solver]\nn_steps = 2\nnewton_max = 1\nmax_halvings = 0\nnewton_tol = 1e-14\n";
    assert_eq!(run("stiff", stiff, "simulate"), EXIT_SOLVER as i32);
    let manifest = fs::read_to_string(dir.path().join("stiff/manifest.toml")).unwrap();
    assert!(manifest.contains("termination = \"error\""));

    use pilltop::Error as E;
    let code = |e: E| RunError::from(e).exit_code();
    assert_eq!(code(E::DegenerateDesign("gone".into())), EXIT_DEGENERATE);
    assert_eq!(code(E::InvalidGeometry("a < 0".into())), EXIT_DEGENERATE);
    assert_eq!(code(E::Config("bad".into())), EXIT_CONFIG);
    assert_eq!(code(E::Io(std::io::Error::other("disk"))), EXIT_IO);
}

use pilltop::fem::assembly::quadrature_point_terms;
use pilltop::fem::*;
use pilltop::geometry::{sample_phase_field, SupershapeParams};
use pilltop::materials::PhysicsConstants;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_state(mesh: &StructuredMesh, rng: &mut ChaCha8Rng) -> StateFields {
    let n = mesh.n_nodes();
    StateFields {
        phi: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        c: (0..n)
            .map(|i| {
                if mesh.is_boundary(i) {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect(),
        step: 1,
    }
}

/// Largest entry-wise error per coupling block, relative to the block's largest entry.
fn block_errors(pattern: &SystemPattern, vals: &[f64], fd: &[Vec<f64>]) -> [f64; 4] {
    let n = fd.len();
    let mut err = [0.0f64; 4];
    let mut scale = [0.0f64; 4];
    for i in 0..n {
        for j in 0..n {
            let b = 2 * (i % 2) + j % 2;
            let a = pattern.get(vals, i, j);
            err[b] = err[b].max((a - fd[i][j]).abs());
            scale[b] = scale[b].max(a.abs());
        }
    }
    [0, 1, 2, 3].map(|b| {
        if scale[b] > 0.0 {
            err[b] / scale[b]
        } else {
            err[b]
        }
    })
}

#[test]
fn jacobian_matches_finite_differences() {
    let mesh = StructuredMesh::new(4, 4, 1.0, 1.0).unwrap();
    let constants = PhysicsConstants::default();
    let pattern = SystemPattern::new(&mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for mass in [MassMatrix::Consistent, MassMatrix::LumpedConcentration] {
        for _ in 0..3 {
            let prev = random_state(&mesh, &mut rng);
            let next = random_state(&mesh, &mut rng);
            // large rates so the cross blocks are not negligible
            let k: Vec<f64> = (0..mesh.n_elements())
                .map(|_| rng.random_range(0.0..0.05))
                .collect();
            let problem = StepProblem {
                mesh: &mesh,
                constants: &constants,
                k_field: &k,
                dt: 25.0,
                mass,
            };
            let (_, vals) = assemble_jacobian(&problem, &pattern, &next, &prev).unwrap();
            let h = 1e-7;
            let x = next.interleaved();
            let n = x.len();
            let mut fd = vec![vec![0.0; n]; n];
            for j in 0..n {
                let mut up = x.clone();
                let mut dn = x.clone();
                up[j] += h;
                dn[j] -= h;
                let ru =
                    assemble_residuals(&problem, &StateFields::from_interleaved(&up, 1), &prev)
                        .unwrap();
                let rd =
                    assemble_residuals(&problem, &StateFields::from_interleaved(&dn, 1), &prev)
                        .unwrap();
                for i in 0..n {
                    fd[i][j] = (ru[i] - rd[i]) / (2.0 * h);
                }
            }
            let errs = block_errors(&pattern, &vals, &fd);
            assert!(
                errs.iter().all(|e| *e <= 1e-5),
                "{mass:?}: block errors {errs:?}"
            );
        }
    }
}

#[test]
fn pure_solvent_concentration_block_is_symmetric_positive_definite() {
    let mesh = StructuredMesh::new(4, 4, 1.0, 1.0).unwrap();
    let constants = PhysicsConstants::default();
    let pattern = SystemPattern::new(&mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = vec![2e-4; mesh.n_elements()];
    for mass in [MassMatrix::Consistent, MassMatrix::LumpedConcentration] {
        let mut s = random_state(&mesh, &mut rng);
        s.phi.iter_mut().for_each(|p| *p = 0.0);
        let problem = StepProblem {
            mesh: &mesh,
            constants: &constants,
            k_field: &k,
            dt: 25.0,
            mass,
        };
        let (_, vals) = assemble_jacobian(&problem, &pattern, &s, &s).unwrap();
        let n = mesh.n_nodes();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = pattern.get(&vals, 2 * i + 1, 2 * j + 1);
            }
        }
        for i in 0..n {
            for j in 0..n {
                assert!((a[i][j] - a[j][i]).abs() <= 1e-15 * a[i][i].abs().max(1.0));
            }
        }
        // Cholesky succeeds only for positive definite matrices
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|p| l[i][p] * l[j][p]).sum();
                if i == j {
                    let d = a[i][i] - s;
                    assert!(d > 0.0, "pivot {i} not positive");
                    l[i][j] = d.sqrt();
                } else {
                    l[i][j] = (a[i][j] - s) / l[j][j];
                }
            }
        }
    }
}

#[test]
fn source_and_forcing_are_dual_at_every_gauss_point() {
    let mesh = StructuredMesh::new(6, 6, 1.0, 1.0).unwrap();
    let constants = PhysicsConstants::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let state = random_state(&mesh, &mut rng);
    let k: Vec<f64> = (0..mesh.n_elements())
        .map(|_| rng.random_range(0.0..5e-4))
        .collect();
    let problem = StepProblem {
        mesh: &mesh,
        constants: &constants,
        k_field: &k,
        dt: 25.0,
        mass: MassMatrix::default(),
    };
    let terms = quadrature_point_terms(&problem, &state);
    assert_eq!(terms.len(), 4 * mesh.n_elements());
    for (f, s) in terms {
        let scale = s.abs().max(1e-300);
        assert!(
            (s + constants.rho_s * f).abs() <= 1e-14 * scale,
            "S {s} f {f}"
        );
    }
}

#[test]
fn trivial_states_are_exact_roots() {
    let mesh = StructuredMesh::new(8, 8, 1.0, 1.0).unwrap();
    let constants = PhysicsConstants::default();
    let k = vec![2e-4; mesh.n_elements()];
    let settings = SolverSettings::default();
    let problem = StepProblem {
        mesh: &mesh,
        constants: &constants,
        k_field: &k,
        dt: settings.dt,
        mass: settings.mass_matrix,
    };
    let solver = LinearSolver::new(&mesh).unwrap();
    let zero = StateFields::uniform(mesh.n_nodes(), 0.0, 0.0);
    let (next, report) = solve_timestep(&solver, &problem, &zero, &settings).unwrap();
    assert!(report.iterations <= 1);
    assert!(next.phi.iter().chain(&next.c).all(|v| *v == 0.0));

    let solid = StateFields::uniform(mesh.n_nodes(), 1.0, 0.0);
    let (next, _) = solve_timestep(&solver, &problem, &solid, &settings).unwrap();
    assert!(next
        .phi
        .iter()
        .all(|v| (v - 1.0).abs() <= settings.newton_tol));
    assert!(next.c.iter().all(|v| v.abs() <= 1e-12));
}

#[test]
fn dissolving_circle_on_a_coarse_mesh() {
    let mesh = StructuredMesh::new(16, 16, 1.0, 1.0).unwrap();
    let constants = PhysicsConstants::default();
    let settings = SolverSettings {
        n_steps: 30,
        ..Default::default()
    };
    let phi0 = sample_phase_field(
        &SupershapeParams::circle(0.5, 0.5, 0.25),
        mesh.nodes(),
        constants.mu,
    )
    .unwrap();
    let k = vec![2e-4; mesh.n_elements()];
    let solver = LinearSolver::new(&mesh).unwrap();
    let mut worst = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY);
    let mut boundary_exact = true;
    let out = simulate_with(&phi0, &k, &constants, &mesh, &settings, &solver, |s| {
        for p in &s.phi {
            worst.0 = worst.0.min(*p);
            worst.1 = worst.1.max(*p);
        }
        for c in &s.c {
            worst.2 = worst.2.min(*c);
        }
        boundary_exact &= mesh.boundary().iter().all(|&i| s.c[i] == 0.0);
    })
    .unwrap();
    assert!(out.masses.windows(2).all(|w| w[1] < w[0]));
    assert!(worst.0 >= -0.05 && worst.1 <= 1.05, "{worst:?}");
    assert!(worst.2 >= -1e-8);
    assert!(boundary_exact);

    let empty = simulate(&vec![0.0; mesh.n_nodes()], &k, &constants, &mesh, &settings).unwrap();
    assert!(empty.masses.iter().all(|m| *m == 0.0));
}

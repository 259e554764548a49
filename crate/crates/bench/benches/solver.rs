use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pilltop::fem::*;
use pilltop::geometry::{sample_phase_field, SupershapeParams};
use pilltop::materials::PhysicsConstants;
use pilltop::matfield::{NetworkConfig, NetworkWeights};

struct Setup {
    mesh: StructuredMesh,
    constants: PhysicsConstants,
    settings: SolverSettings,
    k: Vec<f64>,
    state: StateFields,
}

fn setup(n: usize) -> Setup {
    let mesh = StructuredMesh::new(n, n, 1.0, 1.0).unwrap();
    let constants = PhysicsConstants::default();
    let phi0 = sample_phase_field(
        &SupershapeParams::circle(0.5, 0.5, 0.25),
        mesh.nodes(),
        constants.mu,
    )
    .unwrap();
    let k = vec![2e-4; mesh.n_elements()];
    Setup {
        mesh,
        constants,
        settings: SolverSettings::default(),
        k,
        state: StateFields::initial(phi0),
    }
}

fn bench_solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("fem");
    group.sample_size(20);
    for n in [32, 75] {
        let s = setup(n);
        let solver = LinearSolver::new(&s.mesh).unwrap();
        let problem = StepProblem {
            mesh: &s.mesh,
            constants: &s.constants,
            k_field: &s.k,
            dt: s.settings.dt,
            mass: s.settings.mass_matrix,
        };
        group.bench_with_input(BenchmarkId::new("assemble_residuals", n), &n, |b, _| {
            b.iter(|| assemble_residuals(&problem, &s.state, &s.state).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("assemble_jacobian", n), &n, |b, _| {
            b.iter(|| assemble_jacobian(&problem, solver.pattern(), &s.state, &s.state).unwrap())
        });
        let (_, values) =
            assemble_jacobian(&problem, solver.pattern(), &s.state, &s.state).unwrap();
        group.bench_with_input(BenchmarkId::new("factorize", n), &n, |b, _| {
            b.iter(|| {
                solver.factorize(&values).unwrap();
            })
        });
        group.bench_with_input(BenchmarkId::new("timestep", n), &n, |b, _| {
            b.iter(|| solve_timestep(&solver, &problem, &s.state, &s.settings).unwrap())
        });
    }
    group.finish();
}

fn bench_network(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(20);
    let net = NetworkWeights::init(&NetworkConfig::default(), 4).unwrap();
    for n in [32, 75] {
        let centers = StructuredMesh::new(n, n, 1.0, 1.0)
            .unwrap()
            .element_centers();
        group.bench_with_input(BenchmarkId::new("forward_batch", n), &n, |b, _| {
            b.iter(|| net.forward_batch(&centers))
        });
        let cache = net.forward_batch(&centers);
        let bar = vec![vec![1.0; 4]; centers.len()];
        group.bench_with_input(BenchmarkId::new("backward_batch", n), &n, |b, _| {
            b.iter(|| net.backward_batch(&cache, &bar))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_solver, bench_network);
criterion_main!(benches);

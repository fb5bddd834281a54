//! Hot kernels, labelled by the build's execution mode. Compare
//! `cargo bench` against `cargo bench --no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use density_control::chain::ChainModel;
use density_control::cost::{build_cost, DynamicsSpec};
use density_control::grid::{Grid, InteractionPotential, ProbVector};
use density_control::par;
use density_control::particle::interaction_field;
use density_control::sbp::{self, SbpProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn repulsion_problem(d: usize) -> SbpProblem {
    let grid = Grid::new(-1.5, 1.5, d).unwrap();
    let pot = InteractionPotential::power_law(0.15, 1.0, grid.spacing()).unwrap();
    let spec = DynamicsSpec::plain(&grid, pot, 0.1, 20).unwrap();
    let marg = ChainModel::uniform(&grid, 20).forward_backward().unwrap();
    let c = build_cost(&spec, &marg).unwrap();
    let mu = ProbVector::gaussian(&grid, -0.4, 0.2, 1.0).unwrap();
    let nu = ProbVector::gaussian(&grid, 0.4, 0.2, 1.0).unwrap();
    SbpProblem::new(c.node, c.edge, spec.eps, mu, nu).unwrap()
}

fn sbp_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("sbp_solve/{}", par::MODE));
    g.sample_size(10);
    for d in [51, 151] {
        let p = repulsion_problem(d);
        g.bench_with_input(BenchmarkId::from_parameter(d), &p, |b, p| {
            b.iter(|| sbp::solve(p, 1e-9, 10_000).unwrap())
        });
    }
    g.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("forward_backward/{}", par::MODE));
    for d in [51, 151] {
        let grid = Grid::new(-1.5, 1.5, d).unwrap();
        let model = sbp::solve(&repulsion_problem(d), 1e-6, 10_000).unwrap().model;
        g.bench_with_input(BenchmarkId::from_parameter(grid.len()), &model, |b, m| {
            b.iter(|| m.clone().forward_backward().unwrap())
        });
    }
    g.finish();
}

fn particle_interaction(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("interaction_field/{}", par::MODE));
    let pot = InteractionPotential::power_law(0.15, 1.0, 0.02).unwrap();
    for n in [500, 2000] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| b.iter(|| interaction_field(&pot, x)));
    }
    g.finish();
}

criterion_group!(benches, sbp_solve, forward_backward, particle_interaction);
criterion_main!(benches);

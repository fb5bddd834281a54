//! Brute-force oracles over the full path tensor, shared by the integration
//! tests. Every path of a `(T+1)`-node chain on `D` states is enumerated.

#![allow(dead_code)]

use density_control::chain::{ChainModel, MarginalSet};
use density_control::cost::DynamicsSpec;
use density_control::grid::{Grid, InteractionPotential, ProbVector};
use density_control::multispecies::MultiSpec;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn all_paths(d: usize, steps: usize) -> Vec<Vec<usize>> {
    let n = d.pow(steps as u32 + 1);
    (0..n)
        .map(|mut idx| {
            let mut p = vec![0; steps + 1];
            for slot in p.iter_mut().rev() {
                *slot = idx % d;
                idx /= d;
            }
            p
        })
        .collect()
}

/// Strictly positive random probability vector.
pub fn random_prob(grid: &Grid, rng: &mut ChaCha8Rng, total: f64) -> ProbVector {
    let m: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = m.iter().sum();
    ProbVector::new(grid, m.into_iter().map(|v| total * v / s).collect()).unwrap()
}

pub fn random_costs(rng: &mut ChaCha8Rng, d: usize, steps: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let node = Array2::from_shape_fn((steps + 1, d), |_| rng.random_range(-1.0..1.0));
    let edge = (0..steps)
        .map(|_| Array2::from_shape_fn((d, d), |_| rng.random_range(0.0..2.0)))
        .collect();
    (node, edge)
}

pub fn random_model(rng: &mut ChaCha8Rng, grid: &Grid, steps: usize) -> ChainModel {
    let d = grid.len();
    let node = Array2::from_shape_fn((steps + 1, d), |_| rng.random_range(-1.0..1.0));
    let edge = (0..steps)
        .map(|_| Array2::from_shape_fn((d, d), |_| rng.random_range(-1.0..1.0)))
        .collect();
    ChainModel::new(grid, node, edge).unwrap()
}

pub fn path_cost(node: &Array2<f64>, edge: &[Array2<f64>], path: &[usize]) -> f64 {
    let mut c: f64 = path.iter().enumerate().map(|(i, &x)| node[[i, x]]).sum();
    for (i, w) in path.windows(2).enumerate() {
        c += edge[i][[w[0], w[1]]];
    }
    c
}

/// Node and pair marginals of a dense path tensor.
pub fn tensor_marginals(grid: &Grid, steps: usize, paths: &[Vec<usize>], m: &[f64]) -> MarginalSet {
    let d = grid.len();
    let mut node = vec![vec![0.0; d]; steps + 1];
    let mut pair = vec![Array2::zeros((d, d)); steps];
    for (p, v) in paths.iter().zip(m) {
        for (i, &x) in p.iter().enumerate() {
            node[i][x] += v;
        }
        for (i, w) in p.windows(2).enumerate() {
            pair[i][[w[0], w[1]]] += v;
        }
    }
    MarginalSet {
        node: node.into_iter().map(|n| ProbVector::new(grid, n).unwrap()).collect(),
        pair,
    }
}

/// Dense tensor of a normalized chain model.
pub fn model_tensor(model: &ChainModel, paths: &[Vec<usize>]) -> Vec<f64> {
    let log_z = model.log_z().expect("normalized model");
    paths.iter().map(|p| (model.path_log_weight(p) - log_z).exp()).collect()
}

/// Alternating endpoint projections of `exp(−C/ε)` on the full tensor.
pub fn dense_sinkhorn(
    node: &Array2<f64>,
    edge: &[Array2<f64>],
    eps: f64,
    mu: &ProbVector,
    nu: &ProbVector,
    paths: &[Vec<usize>],
) -> Vec<f64> {
    let d = mu.mass().len();
    let steps = edge.len();
    let kern: Vec<f64> = paths.iter().map(|p| (-path_cost(node, edge, p) / eps).exp()).collect();
    let mut a = vec![1.0; d];
    let mut b = vec![1.0; d];
    for _ in 0..100_000 {
        let mut s0 = vec![0.0; d];
        for (p, k) in paths.iter().zip(&kern) {
            s0[p[0]] += k * b[p[steps]];
        }
        for x in 0..d {
            a[x] = mu.mass()[x] / s0[x];
        }
        let mut st = vec![0.0; d];
        for (p, k) in paths.iter().zip(&kern) {
            st[p[steps]] += k * a[p[0]];
        }
        for x in 0..d {
            b[x] = nu.mass()[x] / st[x];
        }
        // the P_T constraint is exact now; measure P_0
        let mut p0 = vec![0.0; d];
        for (p, k) in paths.iter().zip(&kern) {
            p0[p[0]] += k * a[p[0]] * b[p[steps]];
        }
        if p0.iter().zip(mu.mass()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max) < 1e-15 {
            break;
        }
    }
    paths.iter().zip(&kern).map(|(p, k)| k * a[p[0]] * b[p[steps]]).collect()
}

/// `min ⟨G, M⟩ + ε⟨M, log M⟩` under both endpoint constraints, solved by
/// Newton's method on the dual potentials `(f, g)` with `g₀ = 0`.
pub fn dual_newton(g_cost: &[f64], eps: f64, mu: &ProbVector, nu: &ProbVector, paths: &[Vec<usize>]) -> Vec<f64> {
    let d = mu.mass().len();
    let steps = paths[0].len() - 1;
    let n = 2 * d - 1;
    let tensor = |z: &DVector<f64>| -> Vec<f64> {
        paths
            .iter()
            .zip(g_cost)
            .map(|(p, c)| {
                let g = if p[steps] == 0 { 0.0 } else { z[d + p[steps] - 1] };
                ((z[p[0]] + g - c) / eps).exp()
            })
            .collect()
    };
    let dual = |z: &DVector<f64>| -> f64 {
        let m: f64 = tensor(z).iter().sum();
        let lin: f64 = (0..d).map(|x| z[x] * mu.mass()[x]).sum::<f64>()
            + (1..d).map(|y| z[d + y - 1] * nu.mass()[y]).sum::<f64>();
        eps * m - lin
    };
    let mut z = DVector::zeros(n);
    for _ in 0..200 {
        let m = tensor(&z);
        let mut p0 = vec![0.0; d];
        let mut pt = vec![0.0; d];
        let mut joint = DMatrix::<f64>::zeros(d, d);
        for (p, v) in paths.iter().zip(&m) {
            p0[p[0]] += v;
            pt[p[steps]] += v;
            joint[(p[0], p[steps])] += v;
        }
        let mut grad = DVector::zeros(n);
        for x in 0..d {
            grad[x] = p0[x] - mu.mass()[x];
        }
        for y in 1..d {
            grad[d + y - 1] = pt[y] - nu.mass()[y];
        }
        if grad.amax() < 1e-15 {
            break;
        }
        let mut hess = DMatrix::zeros(n, n);
        for x in 0..d {
            hess[(x, x)] = p0[x] / eps;
            for y in 1..d {
                hess[(x, d + y - 1)] = joint[(x, y)] / eps;
                hess[(d + y - 1, x)] = joint[(x, y)] / eps;
            }
        }
        for y in 1..d {
            hess[(d + y - 1, d + y - 1)] = pt[y] / eps;
        }
        let step = hess.cholesky().expect("dual Hessian is positive definite").solve(&(-&grad));
        let f0 = dual(&z);
        let mut t = 1.0;
        // damp only far from the optimum; near it the dual change drowns in rounding
        while grad.amax() > 1e-8 && t > 1e-12 && dual(&(&z + &step * t)) > f0 + 1e-4 * t * grad.dot(&step) {
            t *= 0.5;
        }
        z += step * t;
    }
    tensor(&z)
}

/// Interaction drift field `Σ_y ∇W(x − y) P(y)` evaluated pointwise.
fn field(pot: &InteractionPotential, grid: &Grid, p: &[f64]) -> Vec<f64> {
    grid.nodes()
        .iter()
        .map(|&x| grid.nodes().iter().zip(p).map(|(&y, m)| pot.grad(x - y) * m).sum())
        .collect()
}

/// `F(M)` for one species, straight from the path tensor.
pub fn brute_force_f(spec: &DynamicsSpec, paths: &[Vec<usize>], m: &[f64]) -> f64 {
    let marg = tensor_marginals(&spec.grid, spec.steps, paths, m);
    let t = spec.steps as f64;
    let x = spec.grid.nodes();
    let fields: Vec<Vec<f64>> = (0..spec.steps)
        .map(|i| field(&spec.pot, &spec.grid, marg.node[i].mass()))
        .collect();
    paths
        .iter()
        .zip(m)
        .map(|(p, v)| {
            let mut c = 0.0;
            for i in 0..spec.steps {
                let (a, b) = (p[i], p[i + 1]);
                let r = x[b] - x[a] + (fields[i][a] - spec.drift.eval(x[a])) / t;
                c += 0.5 * t * r * r + spec.state_cost.eval(x[a]) / t;
            }
            v * c
        })
        .sum()
}

/// `Σ_ℓ F^ℓ(M)` for several species; `ms[ℓ]` carries mass `w_ℓ`.
pub fn brute_force_f_multi(spec: &MultiSpec, paths: &[Vec<usize>], ms: &[Vec<f64>]) -> f64 {
    let l = spec.species();
    let margs: Vec<MarginalSet> = ms.iter().map(|m| tensor_marginals(&spec.grid, spec.steps, paths, m)).collect();
    let t = spec.steps as f64;
    let x = spec.grid.nodes();
    let mut total = 0.0;
    for a in 0..l {
        let fields: Vec<Vec<f64>> = (0..spec.steps)
            .map(|i| {
                let mut f = vec![0.0; x.len()];
                for (b, mb) in margs.iter().enumerate() {
                    for (fk, v) in f.iter_mut().zip(field(&spec.pots[a][b], &spec.grid, mb.node[i].mass())) {
                        *fk += v;
                    }
                }
                f
            })
            .collect();
        for (p, v) in paths.iter().zip(&ms[a]) {
            let mut c = 0.0;
            for i in 0..spec.steps {
                let (j, k) = (p[i], p[i + 1]);
                let r = x[k] - x[j] + (fields[i][j] - spec.drifts[a].eval(x[j])) / t;
                c += 0.5 * t * r * r + spec.state_costs[a].eval(x[j]) / t;
            }
            total += v * c;
        }
    }
    total
}

pub fn max_marginal_diff(a: &MarginalSet, b: &MarginalSet) -> f64 {
    let mut m: f64 = 0.0;
    for (p, q) in a.node.iter().zip(&b.node) {
        for (u, v) in p.mass().iter().zip(q.mass()) {
            m = m.max((u - v).abs());
        }
    }
    for (p, q) in a.pair.iter().zip(&b.pair) {
        for (u, v) in p.iter().zip(q) {
            m = m.max((u - v).abs());
        }
    }
    m
}

/// Random single-species dynamics with a nonlinear interaction, affine drift
/// and quadratic state cost on `D` nodes of `[−1, 1]`.
pub fn random_spec(rng: &mut ChaCha8Rng, d: usize, steps: usize, eps: f64) -> DynamicsSpec {
    use density_control::grid::GridField;
    let grid = Grid::new(-1.0, 1.0, d).unwrap();
    let pot = InteractionPotential::power_law(
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.2..0.5),
    )
    .unwrap();
    let (b0, b1, v) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.0..1.0));
    DynamicsSpec::new(
        &grid,
        pot,
        GridField::from_fn(&grid, move |x| b0 + b1 * x),
        GridField::from_fn(&grid, move |x| v * x * x),
        eps,
        steps,
    )
    .unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, n: usize, total: f64) -> Vec<f64> {
    let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = m.iter().sum();
    m.into_iter().map(|v| total * v / s).collect()
}

pub fn random_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Largest relative gap between `⟨C + E, Δ⟩` and the central difference of
/// the brute-force `F` over `directions` random directions.
pub fn gradient_check_single(seed: u64, directions: usize) -> f64 {
    use density_control::cost::{build_cost, build_gradient_correction};
    let mut r = rng(seed);
    let (d, steps) = (4, 3);
    let spec = random_spec(&mut r, d, steps, 0.5);
    let paths = all_paths(d, steps);
    let m = random_tensor(&mut r, paths.len(), 1.0);
    let marg = tensor_marginals(&spec.grid, steps, &paths, &m);
    let c = build_cost(&spec, &marg).unwrap();
    let e = build_gradient_correction(&spec, &marg).unwrap();
    let node = &c.node + &e;
    let grad: Vec<f64> = paths.iter().map(|p| path_cost(&node, &c.edge, p)).collect();
    let h = 1e-5;
    (0..directions)
        .map(|_| {
            let dir = random_direction(&mut r, paths.len());
            let shifted = |s: f64| -> Vec<f64> { m.iter().zip(&dir).map(|(a, b)| a + s * b).collect() };
            let fd = (brute_force_f(&spec, &paths, &shifted(h)) - brute_force_f(&spec, &paths, &shifted(-h))) / (2.0 * h);
            let an: f64 = grad.iter().zip(&dir).map(|(g, v)| g * v).sum();
            relative(an, fd)
        })
        .fold(0.0, f64::max)
}

/// Two species with unequal weights and all three interactions active.
pub fn random_two_species(rng: &mut ChaCha8Rng, d: usize, steps: usize, eps: f64) -> MultiSpec {
    use density_control::grid::GridField;
    let grid = Grid::new(-1.0, 1.0, d).unwrap();
    let mut pl = || {
        InteractionPotential::power_law(
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.2..0.5),
        )
        .unwrap()
    };
    let (w11, w22) = (pl(), pl());
    let w12 = InteractionPotential::Quadratic {
        kappa: rng.random_range(-1.0..1.0),
    };
    let w = rng.random_range(0.2..0.8);
    let b: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
    MultiSpec::new(
        &grid,
        vec![w, 1.0 - w],
        vec![vec![w11, w12], vec![w12, w22]],
        vec![
            GridField::from_fn(&grid, {
                let (p, q) = (b[0], b[1]);
                move |x| p + q * x
            }),
            GridField::from_fn(&grid, {
                let (p, q) = (b[2], b[3]);
                move |x| p + q * x
            }),
        ],
        vec![GridField::from_fn(&grid, |x| 0.3 * x * x), GridField::zero(&grid)],
        eps,
        steps,
    )
    .unwrap()
}

pub fn gradient_check_multi(seed: u64, directions: usize) -> f64 {
    use density_control::multispecies::{build_cost_multi, build_gradient_correction_multi, MultiState};
    let mut r = rng(seed);
    let (d, steps) = (4, 3);
    let spec = random_two_species(&mut r, d, steps, 0.5);
    let paths = all_paths(d, steps);
    let ms: Vec<Vec<f64>> = spec.weights.iter().map(|w| random_tensor(&mut r, paths.len(), *w)).collect();
    let state = MultiState {
        chains: vec![ChainModel::uniform(&spec.grid, steps); 2],
        margs: ms.iter().map(|m| tensor_marginals(&spec.grid, steps, &paths, m)).collect(),
    };
    let grads: Vec<Vec<f64>> = (0..2)
        .map(|l| {
            let c = build_cost_multi(&spec, &state, l).unwrap();
            let e = build_gradient_correction_multi(&spec, &state, l).unwrap();
            let node = &c.node + &e;
            paths.iter().map(|p| path_cost(&node, &c.edge, p)).collect()
        })
        .collect();
    let h = 1e-5;
    (0..directions)
        .map(|_| {
            let dirs: Vec<Vec<f64>> = (0..2).map(|_| random_direction(&mut r, paths.len())).collect();
            let shifted = |s: f64| -> Vec<Vec<f64>> {
                ms.iter()
                    .zip(&dirs)
                    .map(|(m, dir)| m.iter().zip(dir).map(|(a, b)| a + s * b).collect())
                    .collect()
            };
            let fd = (brute_force_f_multi(&spec, &paths, &shifted(h)) - brute_force_f_multi(&spec, &paths, &shifted(-h)))
                / (2.0 * h);
            let an: f64 = grads
                .iter()
                .zip(&dirs)
                .map(|(g, dir)| g.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>())
                .sum();
            relative(an, fd)
        })
        .fold(0.0, f64::max)
}

/// Max-abs marginal gap between the chain SBP and dense Sinkhorn on a random
/// `D=4, T=3` instance, with the SBP wall time in seconds.
pub fn sbp_vs_dense(seed: u64) -> (f64, f64) {
    use density_control::sbp;
    let mut r = rng(seed);
    let (d, steps) = (4, 3);
    let grid = Grid::new(-1.0, 1.0, d).unwrap();
    let (node, edge) = random_costs(&mut r, d, steps);
    let eps = r.random_range(0.2..2.0);
    let mu = random_prob(&grid, &mut r, 1.0);
    let nu = random_prob(&grid, &mut r, 1.0);
    let paths = all_paths(d, steps);
    let start = std::time::Instant::now();
    let problem = sbp::SbpProblem::new(node.clone(), edge.clone(), eps, mu.clone(), nu.clone()).unwrap();
    let sol = sbp::solve(&problem, 1e-14, 100_000).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let dense = dense_sinkhorn(&node, &edge, eps, &mu, &nu, &paths);
    (max_marginal_diff(&sol.marg, &tensor_marginals(&grid, steps, &paths, &dense)), secs)
}

/// Max-abs marginal gap between one proximal step solved by the chain SBP and
/// the same step solved by dual Newton on the full tensor.
pub fn prox_step_vs_dual_newton(seed: u64) -> f64 {
    use density_control::proximal::assemble_effective_problem;
    use density_control::sbp;
    let mut r = rng(seed);
    let (d, steps) = (4, 3);
    let eps = r.random_range(0.2..1.0);
    let spec = random_spec(&mut r, d, steps, eps);
    let eta = r.random_range(0.3..3.0);
    let mut model_k = random_model(&mut r, &spec.grid, steps);
    let marg_k = model_k.forward_backward().unwrap();
    let mu = random_prob(&spec.grid, &mut r, 1.0);
    let nu = random_prob(&spec.grid, &mut r, 1.0);
    let problem = assemble_effective_problem(&spec, &model_k, &marg_k, eta, &mu, &nu).unwrap();
    let sol = sbp::solve(&problem, 1e-14, 100_000).unwrap();

    let paths = all_paths(d, steps);
    let c = density_control::cost::build_cost(&spec, &marg_k).unwrap();
    let e = density_control::cost::build_gradient_correction(&spec, &marg_k).unwrap();
    let node = &c.node + &e;
    let mk = model_tensor(&model_k, &paths);
    let g: Vec<f64> = paths
        .iter()
        .zip(&mk)
        .map(|(p, m)| path_cost(&node, &c.edge, p) - m.ln() / eta)
        .collect();
    let dense = dual_newton(&g, eps + 1.0 / eta, &mu, &nu, &paths);
    max_marginal_diff(&sol.marg, &tensor_marginals(&spec.grid, steps, &paths, &dense))
}

/// Random small instance for the outer loop: `D ∈ {4, 5, 6}`, `T = 3`, with
/// a power-law interaction of moderate stiffness.
pub fn random_descent_instance(seed: u64) -> (DynamicsSpec, ProbVector, ProbVector) {
    let mut r = rng(seed);
    let d = r.random_range(4..=6);
    let eps = r.random_range(0.2..1.0);
    let mut spec = random_spec(&mut r, d, 3, eps);
    spec.pot = InteractionPotential::power_law(
        r.random_range(0.1..1.0),
        r.random_range(0.2..1.0),
        r.random_range(0.3..0.6),
    )
    .unwrap();
    let mu = random_prob(&spec.grid, &mut r, 1.0);
    let nu = random_prob(&spec.grid, &mut r, 1.0);
    (spec, mu, nu)
}

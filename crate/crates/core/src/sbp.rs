//! Entropic multi-marginal transport on the time chain with the two endpoint
//! marginals constrained, solved by Sinkhorn belief propagation.

use ndarray::{Array2, Zip};

use crate::chain::{entropy, ChainModel, MarginalSet};
use crate::error::{invalid, Error, Result};
use crate::grid::{tv_distance, ProbVector};
use crate::logspace::LogKernel;
use crate::par;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// `min ⟨C, M⟩ + ε_eff ⟨M, log M⟩` over path measures with `P₀(M) = μ₀` and
/// `P_T(M) = ν_T`, where `C(x₀..x_T) = Σ cost_node[i](x_i) + Σ cost_edge[i](x_i, x_{i+1})`.
#[derive(Debug, Clone)]
pub struct SbpProblem {
    pub cost_node: Array2<f64>,
    pub cost_edge: Vec<Array2<f64>>,
    pub eps_eff: f64,
    pub mu0: ProbVector,
    pub nu_t: ProbVector,
}

impl SbpProblem {
    pub fn new(
        cost_node: Array2<f64>,
        cost_edge: Vec<Array2<f64>>,
        eps_eff: f64,
        mu0: ProbVector,
        nu_t: ProbVector,
    ) -> Result<Self> {
        let p = Self {
            cost_node,
            cost_edge,
            eps_eff,
            mu0,
            nu_t,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn steps(&self) -> usize {
        self.cost_edge.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.mu0.grid().len();
        self.mu0.grid().ensure_same(self.nu_t.grid())?;
        if !(self.eps_eff > 0.0 && self.eps_eff.is_finite()) {
            return Err(invalid("eps_eff", format!("must be positive, got {}", self.eps_eff)));
        }
        let steps = self.cost_edge.len();
        if steps == 0 {
            return Err(invalid("T", "need at least one time step"));
        }
        if self.cost_node.dim() != (steps + 1, d) {
            return Err(invalid("cost_node", format!("expected shape ({}, {d})", steps + 1)));
        }
        if self.cost_edge.iter().any(|e| e.dim() != (d, d)) {
            return Err(invalid("cost_edge", format!("every slice must be {d}x{d}")));
        }
        // +∞ marks a forbidden state or transition
        if self.cost_node.iter().chain(self.cost_edge.iter().flatten()).any(|c| c.is_nan() || *c == f64::NEG_INFINITY) {
            return Err(invalid("cost", "costs must be finite or +inf"));
        }
        let (a, b) = (self.mu0.total(), self.nu_t.total());
        if !(a > 0.0) || (a - b).abs() > 1e-10 * a.max(1.0) {
            return Err(invalid("mu0/nu_t", format!("endpoint masses differ: {a} vs {b}")));
        }
        Ok(())
    }
}

/// Iteration controls for [`solve_with`].
#[derive(Debug, Clone)]
pub struct SbpOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Initial `log u_T`; zero when absent.
    pub init_log_ut: Option<Vec<f64>>,
}

impl Default for SbpOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            init_log_ut: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SbpSolution {
    /// `M = K ⊙ U` as a normalized chain model.
    pub model: ChainModel,
    pub marg: MarginalSet,
    pub log_u0: Vec<f64>,
    pub log_ut: Vec<f64>,
    pub iterations: usize,
    /// Largest TV error of the two constrained marginals at exit.
    pub residual: f64,
    /// `P_T` TV error observed at each sweep.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl SbpSolution {
    /// `dual_u0` as a positive vector.
    pub fn dual_u0(&self) -> Vec<f64> {
        self.log_u0.iter().map(|v| v.exp()).collect()
    }

    pub fn dual_ut(&self) -> Vec<f64> {
        self.log_ut.iter().map(|v| v.exp()).collect()
    }
}

pub fn solve(problem: &SbpProblem, tol: f64, max_iters: usize) -> Result<SbpSolution> {
    solve_with(
        problem,
        &SbpOptions {
            tol,
            max_iters,
            init_log_ut: None,
        },
    )
}

/// Alternating updates of `u₀` and `u_T`; interior potentials stay at one.
/// Stops once the `P_T` error measured after a `u₀` update is within `tol`.
pub fn solve_with(problem: &SbpProblem, opts: &SbpOptions) -> Result<SbpSolution> {
    problem.validate()?;
    if !(opts.tol > 0.0) {
        return Err(invalid("tol", format!("must be positive, got {}", opts.tol)));
    }
    let grid = problem.mu0.grid().clone();
    let d = grid.len();
    let steps = problem.steps();
    let inv = 1.0 / problem.eps_eff;

    let g = problem.cost_node.mapv(|c| -c * inv);
    let edge_log: Vec<Array2<f64>> = par::map_slice(&problem.cost_edge, |c| c.mapv(|v| -v * inv));
    let kernels: Vec<LogKernel> = par::map_slice(&edge_log, LogKernel::new);

    let log_target = |p: &ProbVector| -> Vec<f64> {
        let t = p.total();
        p.mass().iter().map(|m| (m / t).ln()).collect()
    };
    let log_mu = log_target(&problem.mu0);
    let log_nu = log_target(&problem.nu_t);

    let mut log_u0 = vec![0.0; d];
    let mut log_ut = match &opts.init_log_ut {
        Some(v) if v.len() == d && v.iter().all(|x| !x.is_nan() && *x != f64::INFINITY) => v.clone(),
        Some(_) => return Err(invalid("init_log_ut", "wrong length or non-finite entries")),
        None => vec![0.0; d],
    };

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;

        // messages from the right into node 0
        let mut b: Vec<f64> = (0..d).map(|x| g[[steps, x]] + log_ut[x]).collect();
        for i in (0..steps).rev() {
            let m = kernels[i].backward(&b);
            if i == 0 {
                b = m;
            } else {
                b = m.iter().enumerate().map(|(x, v)| g[[i, x]] + v).collect();
            }
        }
        update_dual(&mut log_u0, &log_mu, g.row(0).as_slice().unwrap(), &b, 0)?;

        // messages from the left into node T
        let mut a: Vec<f64> = (0..d).map(|x| g[[0, x]] + log_u0[x]).collect();
        for (i, k) in kernels.iter().enumerate() {
            let m = k.forward(&a);
            if i + 1 == steps {
                a = m;
            } else {
                a = m.iter().enumerate().map(|(y, v)| g[[i + 1, y]] + v).collect();
            }
        }
        let pt: Vec<f64> = (0..d)
            .map(|y| (g[[steps, y]] + log_ut[y] + a[y]).exp())
            .collect();
        let r = tv_distance(&pt, problem.nu_t.mass());
        history.push(r);
        if r <= opts.tol {
            converged = true;
            break;
        }
        update_dual(&mut log_ut, &log_nu, g.row(steps).as_slice().unwrap(), &a, steps)?;
    }

    let mut node = g;
    Zip::from(node.row_mut(0)).and(&log_u0).for_each(|n, u| *n += u);
    Zip::from(node.row_mut(steps)).and(&log_ut).for_each(|n, u| *n += u);
    let mut model = ChainModel::new(&grid, node, edge_log)?;
    let marg = model.forward_backward()?;
    let residual = marg.node[0]
        .tv_distance(&problem.mu0)
        .max(marg.node[steps].tv_distance(&problem.nu_t));
    Ok(SbpSolution {
        model,
        marg,
        log_u0,
        log_ut,
        iterations,
        residual,
        history,
        converged,
    })
}

/// `log u ← log target − g − m`, refusing targets the model cannot reach.
fn update_dual(log_u: &mut [f64], log_target: &[f64], g: &[f64], msg: &[f64], node: usize) -> Result<()> {
    for x in 0..log_u.len() {
        let reach = g[x] + msg[x];
        if log_target[x] == f64::NEG_INFINITY {
            log_u[x] = f64::NEG_INFINITY;
        } else if reach == f64::NEG_INFINITY || reach.is_nan() {
            return Err(Error::Infeasible { node });
        } else {
            log_u[x] = log_target[x] - reach;
        }
    }
    Ok(())
}

/// `⟨cost, M⟩ + ε_eff ⟨M, log M⟩` through the marginal decomposition.
pub fn objective(sol: &SbpSolution, problem: &SbpProblem) -> f64 {
    linear_cost(&problem.cost_node, &problem.cost_edge, &sol.marg)
        + problem.eps_eff * entropy(&sol.model, &sol.marg)
}

/// `Σ_i ⟨edge[i], pair[i]⟩ + Σ_i ⟨node[i], node marginal i⟩`.
pub fn linear_cost(node: &Array2<f64>, edge: &[Array2<f64>], marg: &MarginalSet) -> f64 {
    let e: f64 = edge
        .iter()
        .zip(&marg.pair)
        .map(|(c, p)| Zip::from(c).and(p).fold(0.0, |acc, c, p| if *p > 0.0 { acc + c * p } else { acc }))
        .sum();
    let n: f64 = marg
        .node
        .iter()
        .enumerate()
        .map(|(i, p)| p.mass().iter().zip(node.row(i)).filter(|(m, _)| **m > 0.0).map(|(m, c)| m * c).sum::<f64>())
        .sum();
    e + n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_problem(seed: u64, d: usize, steps: usize, eps: f64) -> SbpProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(0.0, 1.0, d).unwrap();
        let node = Array2::from_shape_fn((steps + 1, d), |_| rng.random_range(0.0..1.0));
        let edge = (0..steps)
            .map(|_| Array2::from_shape_fn((d, d), |_| rng.random_range(0.0..2.0)))
            .collect();
        let mut w = |_| rng.random_range(0.1..1.0);
        let mu: Vec<f64> = (0..d).map(&mut w).collect();
        let nu: Vec<f64> = (0..d).map(&mut w).collect();
        let (sm, sn): (f64, f64) = (mu.iter().sum(), nu.iter().sum());
        let mu = ProbVector::new(&grid, mu.iter().map(|m| m / sm).collect()).unwrap();
        let nu = ProbVector::new(&grid, nu.iter().map(|m| m / sn).collect()).unwrap();
        SbpProblem::new(node, edge, eps, mu, nu).unwrap()
    }

    #[test]
    fn zero_cost_uniform_constraints() {
        let grid = Grid::new(0.0, 1.0, 3).unwrap();
        let u = ProbVector::uniform(&grid, 1.0);
        let p = SbpProblem::new(Array2::zeros((3, 3)), vec![Array2::zeros((3, 3)); 2], 1.0, u.clone(), u).unwrap();
        let s = solve(&p, 1e-12, 100).unwrap();
        assert!(s.converged);
        for m in &s.marg.node {
            for v in m.mass() {
                assert!((v - 1.0 / 3.0).abs() < 1e-14);
            }
        }
        assert!((objective(&s, &p) + 27f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bimarginal_case_is_matrix_scaling() {
        let p = random_problem(5, 5, 1, 0.5);
        let s = solve(&p, 1e-12, 10_000).unwrap();
        assert!(s.converged && s.residual < 1e-8);
        // B = diag(u) K diag(v) with the node costs absorbed
        let k = p.cost_edge[0].mapv(|c| (-c / 0.5).exp());
        let (u, v) = (s.dual_u0(), s.dual_ut());
        for x in 0..5 {
            for y in 0..5 {
                let b = u[x] * (-p.cost_node[[0, x]] / 0.5).exp()
                    * k[[x, y]]
                    * v[y]
                    * (-p.cost_node[[1, y]] / 0.5).exp();
                assert!((b - s.marg.pair[0][[x, y]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interior_potentials_are_kernel_only() {
        let p = random_problem(9, 4, 3, 0.7);
        let s = solve(&p, 1e-10, 10_000).unwrap();
        for i in 1..3 {
            for x in 0..4 {
                assert!((s.model.node_logpot()[[i, x]] + p.cost_node[[i, x]] / 0.7).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shift_invariance() {
        let p = random_problem(21, 4, 3, 0.3);
        let a = solve(&p, 1e-11, 10_000).unwrap();
        let mut q = p.clone();
        q.cost_node.row_mut(0).mapv_inplace(|c| c + 2.5);
        let b = solve(&q, 1e-11, 10_000).unwrap();
        assert!((objective(&b, &q) - objective(&a, &p) - 2.5).abs() < 1e-9);
        for i in 0..4 {
            for x in 0..4 {
                assert!((a.marg.node[i].mass()[x] - b.marg.node[i].mass()[x]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn infeasible_target_is_reported() {
        let mut p = random_problem(1, 3, 2, 1.0);
        p.cost_edge[1].column_mut(2).fill(f64::INFINITY);
        assert_eq!(solve(&p, 1e-9, 10).unwrap_err(), Error::Infeasible { node: 2 });

        let mut p = random_problem(1, 3, 2, 1.0);
        p.cost_node[[0, 1]] = f64::INFINITY;
        assert_eq!(solve(&p, 1e-9, 10).unwrap_err(), Error::Infeasible { node: 0 });

        // a zero target entry on a forbidden state is fine
        let grid = p.mu0.grid().clone();
        p.mu0 = ProbVector::new(&grid, vec![0.5, 0.0, 0.5]).unwrap();
        let s = solve(&p, 1e-10, 10_000).unwrap();
        assert!(s.converged);
        assert_eq!(s.marg.node[0].mass()[1], 0.0);
        assert!(objective(&s, &p).is_finite());
    }

    #[test]
    fn warm_start_reaches_the_same_solution() {
        let p = random_problem(3, 6, 4, 0.2);
        let cold = solve(&p, 1e-11, 10_000).unwrap();
        let warm = solve_with(
            &p,
            &SbpOptions {
                tol: 1e-11,
                max_iters: 10_000,
                init_log_ut: Some(cold.log_ut.clone()),
            },
        )
        .unwrap();
        assert!(warm.iterations <= 2);
        assert!(warm.marg.max_node_tv(&cold.marg) < 1e-10);
    }

    #[test]
    fn rejects_bad_problems() {
        let p = random_problem(3, 4, 2, 0.5);
        let grid = p.mu0.grid().clone();
        assert!(SbpProblem::new(p.cost_node.clone(), p.cost_edge.clone(), 0.0, p.mu0.clone(), p.nu_t.clone()).is_err());
        let heavy = p.nu_t.rescaled(2.0);
        assert!(SbpProblem::new(p.cost_node.clone(), p.cost_edge.clone(), 1.0, p.mu0.clone(), heavy).is_err());
        let other = ProbVector::uniform(&Grid::new(0.0, 2.0, 4).unwrap(), 1.0);
        assert!(SbpProblem::new(p.cost_node.clone(), p.cost_edge.clone(), 1.0, other, p.nu_t.clone()).is_err());
        let _ = grid;
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn residual_never_increases(seed in any::<u64>()) {
                let p = random_problem(seed, 5, 3, 0.4);
                let s = solve(&p, 1e-12, 2000).unwrap();
                for w in s.history.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", s.history);
                }
            }

            #[test]
            fn constraints_hold_at_exit(seed in any::<u64>()) {
                let p = random_problem(seed, 5, 3, 0.4);
                let s = solve(&p, 1e-10, 10_000).unwrap();
                prop_assert!(s.converged);
                prop_assert!(s.residual <= 1e-10);
            }
        }
    }
}

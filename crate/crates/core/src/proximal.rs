//! Proximal outer loop: linearize `F` at the current path measure, add the KL
//! proximity term, and solve the resulting entropic transport problem.

use std::time::Instant;

use ndarray::{Array2, Zip};

use crate::chain::{entropy, ChainModel, MarginalSet};
use crate::cost::{build_cost, build_gradient_correction, CostFactors, DynamicsSpec};
use crate::error::{invalid, Error, Result};
use crate::grid::ProbVector;
use crate::multispecies::{linearize, MultiSpec};
use crate::par;
use crate::sbp::{self, linear_cost, SbpOptions, SbpProblem, SbpSolution};

#[derive(Debug, Clone, PartialEq)]
pub struct ProximalConfig {
    /// Initial step size `η`.
    pub eta: f64,
    /// Step-size cap for growth after accepted steps.
    pub eta_max: f64,
    /// Factor applied to `η` after each accepted step (1 keeps it fixed).
    pub eta_growth: f64,
    pub outer_iters: usize,
    /// Stop once no node marginal moves more than this in TV, with the
    /// change divided by `η` when `η < 1`.
    pub outer_tol: f64,
    pub backtracking: bool,
    /// Shrink factor `γ` applied to `η` on a rejected step.
    pub shrink: f64,
    pub max_shrinks: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
}

impl Default for ProximalConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            eta_max: 1e4,
            eta_growth: 2.0,
            outer_iters: 200,
            outer_tol: 1e-7,
            backtracking: true,
            shrink: 0.5,
            max_shrinks: 20,
            inner_tol: sbp::DEFAULT_TOL,
            inner_max_iters: sbp::DEFAULT_MAX_ITERS,
        }
    }
}

impl ProximalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(invalid("eta", format!("must be positive, got {}", self.eta)));
        }
        if !(self.eta_max >= self.eta) {
            return Err(invalid("eta_max", "must be at least eta"));
        }
        if !(self.eta_growth >= 1.0 && self.eta_growth.is_finite()) {
            return Err(invalid("eta_growth", "must be finite and at least 1"));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(invalid("shrink", format!("must lie in (0, 1), got {}", self.shrink)));
        }
        if !(self.outer_tol > 0.0) {
            return Err(invalid("outer_tol", "must be positive"));
        }
        if !(self.inner_tol > 0.0) {
            return Err(invalid("inner_tol", "must be positive"));
        }
        if self.outer_iters == 0 || self.inner_max_iters == 0 {
            return Err(invalid("outer_iters", "iteration limits must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    /// Every backtracking shrink failed to decrease the objective.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// `F(M_k) + ε⟨M_k, log M_k⟩` for each accepted iterate.
    pub objectives: Vec<f64>,
    /// Largest endpoint TV error of each accepted iterate.
    pub residuals: Vec<f64>,
    /// Step size that produced each accepted iterate.
    pub step_sizes: Vec<f64>,
    /// Largest node-marginal TV change into each accepted iterate.
    pub changes: Vec<f64>,
    /// Seconds since the start of the solve at each accepted iterate.
    pub wall_times: Vec<f64>,
    pub sinkhorn_iterations: Vec<usize>,
    pub status: Status,
    /// Whether the last inner solve of every species met its tolerance.
    pub inner_converged: bool,
    /// Final chains, one per species, each normalized.
    pub models: Vec<ChainModel>,
    /// Final marginals, species `ℓ` carrying mass `w_ℓ`.
    pub margs: Vec<MarginalSet>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged && self.inner_converged
    }

    /// Marginals of species `ℓ`.
    pub fn marg(&self, l: usize) -> &MarginalSet {
        &self.margs[l]
    }

    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().unwrap()
    }
}

/// Effective cost `C + E − (1/η) log M_k` with `ε_eff = ε + 1/η`; `η = ∞`
/// drops the proximity term.
fn effective(
    cost: &CostFactors,
    correction: &Array2<f64>,
    model_k: &ChainModel,
    eta: f64,
    eps: f64,
    mu: &ProbVector,
    nu: &ProbVector,
) -> Result<SbpProblem> {
    let inv_eta = 1.0 / eta;
    let mut node = &cost.node + correction;
    let mut edge = cost.edge.clone();
    if inv_eta > 0.0 {
        let (nf, ef) = model_k.log_tensor_factors()?;
        Zip::from(&mut node).and(&nf).for_each(|c, f| *c -= inv_eta * f);
        par::for_each_mut(&mut edge, |i, e| Zip::from(e).and(&ef[i]).for_each(|c, f| *c -= inv_eta * f));
    }
    SbpProblem::new(node, edge, eps + inv_eta, mu.clone(), nu.clone())
}

/// The inner problem of one proximal step from `(model_k, marg_k)`.
pub fn assemble_effective_problem(
    spec: &DynamicsSpec,
    model_k: &ChainModel,
    marg_k: &MarginalSet,
    eta: f64,
    mu: &ProbVector,
    nu: &ProbVector,
) -> Result<SbpProblem> {
    if !(eta > 0.0) {
        return Err(invalid("eta", format!("must be positive, got {eta}")));
    }
    model_k.log_z().ok_or(Error::StaleNormalization)?;
    let c = build_cost(spec, marg_k)?;
    let e = build_gradient_correction(spec, marg_k)?;
    effective(&c, &e, model_k, eta, spec.eps, mu, nu)
}

/// `KL(M_a ‖ M_b) = ⟨M_a, log M_a⟩ − ⟨M_a, log M_b⟩` through the chain
/// factors; `+∞` when `M_a` charges a path `M_b` excludes.
pub fn kl_divergence(marg_a: &MarginalSet, model_a: &ChainModel, model_b: &ChainModel) -> Result<f64> {
    let log_z = model_b.log_z().ok_or(Error::StaleNormalization)?;
    let node_b = model_b.node_logpot();
    let edge_b = model_b.edge_logpot();
    if marg_a.steps() != model_b.steps() {
        return Err(invalid("model_b", "step counts differ"));
    }
    let mut cross = -log_z;
    for (i, p) in marg_a.node.iter().enumerate() {
        for (x, m) in p.mass().iter().enumerate() {
            if *m > 0.0 {
                let f = node_b[[i, x]];
                if f == f64::NEG_INFINITY {
                    return Ok(f64::INFINITY);
                }
                cross += m * f;
            }
        }
    }
    for (p, e) in marg_a.pair.iter().zip(edge_b) {
        for (m, f) in p.iter().zip(e) {
            if *m > 0.0 {
                if *f == f64::NEG_INFINITY {
                    return Ok(f64::INFINITY);
                }
                cross += m * f;
            }
        }
    }
    Ok((entropy(model_a, marg_a) - cross).max(0.0))
}

/// Single-species solve.
pub fn solve_density_control(
    spec: &DynamicsSpec,
    mu: &ProbVector,
    nu: &ProbVector,
    cfg: &ProximalConfig,
) -> Result<SolveReport> {
    spec.grid.ensure_same(mu.grid())?;
    spec.grid.ensure_same(nu.grid())?;
    if (mu.total() - nu.total()).abs() > 1e-10 * mu.total().max(1.0) {
        return Err(invalid("mu/nu", format!("masses differ: {} vs {}", mu.total(), nu.total())));
    }
    let multi = MultiSpec::from_single(spec);
    run(&multi, &[mu.rescaled(1.0)], &[nu.rescaled(1.0)], cfg)
}

struct Iterate {
    models: Vec<ChainModel>,
    /// Normalized per-species marginals.
    probs: Vec<MarginalSet>,
    /// Same, scaled to the species weights.
    margs: Vec<MarginalSet>,
    lin: Vec<(CostFactors, Array2<f64>)>,
    objective: f64,
    residual: f64,
    sinkhorn: usize,
    inner_converged: bool,
}

impl Iterate {
    fn from_solutions(spec: &MultiSpec, sols: Vec<SbpSolution>) -> Result<Self> {
        let mut models = Vec::with_capacity(sols.len());
        let mut probs = Vec::with_capacity(sols.len());
        let mut residual: f64 = 0.0;
        let mut sinkhorn = 0;
        let mut inner_converged = true;
        for s in sols {
            residual = residual.max(s.residual);
            sinkhorn += s.iterations;
            inner_converged &= s.converged;
            models.push(s.model);
            probs.push(s.marg);
        }
        let margs: Vec<MarginalSet> = probs.iter().zip(&spec.weights).map(|(p, w)| p.scaled(*w)).collect();
        let lin = linearize(spec, &margs)?;
        let mut objective = 0.0;
        for l in 0..models.len() {
            let w = spec.weights[l];
            let (c, _) = &lin[l];
            objective += linear_cost(&c.node, &c.edge, &margs[l]);
            objective += spec.eps * w * (entropy(&models[l], &probs[l]) + w.ln());
        }
        Ok(Self {
            models,
            probs,
            margs,
            lin,
            objective,
            residual,
            sinkhorn,
            inner_converged,
        })
    }

    fn uniform(spec: &MultiSpec) -> Result<Self> {
        let steps = spec.steps;
        let d = spec.grid.len();
        let models: Vec<ChainModel> = (0..spec.species()).map(|_| ChainModel::uniform(&spec.grid, steps)).collect();
        let u = ProbVector::uniform(&spec.grid, 1.0);
        let probs: Vec<MarginalSet> = (0..spec.species())
            .map(|_| MarginalSet {
                node: vec![u.clone(); steps + 1],
                pair: vec![Array2::from_elem((d, d), 1.0 / (d * d) as f64); steps],
            })
            .collect();
        let margs: Vec<MarginalSet> = probs.iter().zip(&spec.weights).map(|(p, w)| p.scaled(*w)).collect();
        let lin = linearize(spec, &margs)?;
        Ok(Self {
            models,
            probs,
            margs,
            lin,
            objective: f64::INFINITY,
            residual: f64::INFINITY,
            sinkhorn: 0,
            inner_converged: true,
        })
    }

    fn change_from(&self, other: &Iterate) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| a.max_node_tv(b))
            .fold(0.0, f64::max)
    }
}

/// One proximal step from `cur` with step size `eta`.
fn step(
    spec: &MultiSpec,
    cur: &Iterate,
    eta: f64,
    mus: &[ProbVector],
    nus: &[ProbVector],
    cfg: &ProximalConfig,
    warm: bool,
) -> Result<Iterate> {
    let sols = par::map_range(spec.species(), |l| -> Result<SbpSolution> {
        let (c, e) = &cur.lin[l];
        let p = effective(c, e, &cur.models[l], eta, spec.eps, &mus[l], &nus[l])?;
        let steps = spec.steps;
        // keep the previous total node-T potential as the starting guess
        let init_log_ut = warm.then(|| {
            let prev = cur.models[l].node_logpot().row(steps);
            prev.iter()
                .zip(p.cost_node.row(steps))
                .map(|(f, c)| if *f == f64::NEG_INFINITY { 0.0 } else { f + c / p.eps_eff })
                .collect()
        });
        sbp::solve_with(
            &p,
            &SbpOptions {
                tol: cfg.inner_tol,
                max_iters: cfg.inner_max_iters,
                init_log_ut,
            },
        )
    });
    let sols = sols.into_iter().collect::<Result<Vec<_>>>()?;
    Iterate::from_solutions(spec, sols)
}

/// The proximal loop shared by the single- and multi-species entry points.
/// Endpoint measures are normalized per species here.
pub(crate) fn run(spec: &MultiSpec, mus: &[ProbVector], nus: &[ProbVector], cfg: &ProximalConfig) -> Result<SolveReport> {
    cfg.validate()?;
    for p in mus.iter().chain(nus) {
        spec.grid.ensure_same(p.grid())?;
    }
    let mus: Vec<ProbVector> = mus.iter().map(|p| p.rescaled(1.0)).collect();
    let nus: Vec<ProbVector> = nus.iter().map(|p| p.rescaled(1.0)).collect();
    let start = Instant::now();

    let mut report = SolveReport {
        objectives: vec![],
        residuals: vec![],
        step_sizes: vec![],
        changes: vec![],
        wall_times: vec![],
        sinkhorn_iterations: vec![],
        status: Status::MaxIterations,
        inner_converged: true,
        models: vec![],
        margs: vec![],
    };

    // the uniform start is infeasible, so its successor is taken as is
    let mut eta = cfg.eta;
    let init = Iterate::uniform(spec)?;
    let mut cur = step(spec, &init, eta, &mus, &nus, cfg, false)?;
    record(&mut report, &cur, eta, cur.change_from(&init), start);
    let mut prev_change = f64::INFINITY;
    // growth never returns to a step size that was rejected
    let mut eta_cap = cfg.eta_max;

    for _ in 1..cfg.outer_iters {
        let mut shrinks = 0;
        // change of the first candidate, taken at the step size the round started with
        let mut first_change = None;
        let accepted = loop {
            let cand = step(spec, &cur, eta, &mus, &nus, cfg, true)?;
            // objective values carry the inner solver's constraint error
            let slack = cfg.inner_tol.max(1e-12) * (1.0 + cur.objective.abs());
            if !cfg.backtracking || cand.objective <= cur.objective - slack {
                break Some(cand);
            }
            let cand_change = cand.change_from(&cur);
            // within the noise band the objective cannot rank iterates, so the
            // step must also shrink the change to rule out a limit cycle
            if cand.objective <= cur.objective + slack && cand_change <= prev_change {
                break Some(cand);
            }
            let change = *first_change.get_or_insert(cand_change / eta.min(1.0));
            if shrinks == cfg.max_shrinks {
                report.status = if change < cfg.outer_tol {
                    Status::Converged
                } else {
                    Status::Stalled
                };
                break None;
            }
            shrinks += 1;
            eta *= cfg.shrink;
            eta_cap = eta;
        };
        let Some(next) = accepted else { break };
        let change = next.change_from(&cur);
        record(&mut report, &next, eta, change, start);
        cur = next;
        prev_change = change;
        // a short step moves little; compare at unit step size
        if change / eta.min(1.0) < cfg.outer_tol {
            report.status = Status::Converged;
            break;
        }
        eta = (eta * cfg.eta_growth).min(eta_cap);
    }

    report.inner_converged = cur.inner_converged;
    report.models = cur.models;
    report.margs = cur.margs;
    Ok(report)
}

fn record(report: &mut SolveReport, it: &Iterate, eta: f64, change: f64, start: Instant) {
    report.objectives.push(it.objective);
    report.residuals.push(it.residual);
    report.step_sizes.push(eta);
    report.changes.push(change);
    report.wall_times.push(start.elapsed().as_secs_f64());
    report.sinkhorn_iterations.push(it.sinkhorn);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::tests::{all_paths, dense, random_model};
    use crate::grid::{Grid, InteractionPotential};

    fn gauss(grid: &Grid, m: f64, v: f64) -> ProbVector {
        ProbVector::gaussian(grid, m, v, 1.0).unwrap()
    }

    #[test]
    fn kl_of_identical_models_is_zero() {
        let mut m = random_model(3, 4, 3);
        let marg = m.forward_backward().unwrap();
        assert!(kl_divergence(&marg, &m, &m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_brute_force() {
        let mut a = random_model(1, 4, 3);
        let mut b = random_model(2, 4, 3);
        let marg = a.forward_backward().unwrap();
        b.forward_backward().unwrap();
        let (ta, tb) = (dense(&a), dense(&b));
        let bf: f64 = ta.iter().zip(&tb).map(|(p, q)| p * (p / q).ln()).sum();
        assert!((kl_divergence(&marg, &a, &b).unwrap() - bf).abs() < 1e-9);
    }

    #[test]
    fn kl_of_point_mass_against_uniform() {
        let grid = Grid::new(0.0, 1.0, 4).unwrap();
        let node = Array2::from_shape_fn((4, 4), |(_, x)| if x == 2 { 0.0 } else { f64::NEG_INFINITY });
        let mut point = ChainModel::new(&grid, node, vec![Array2::zeros((4, 4)); 3]).unwrap();
        let marg = point.forward_backward().unwrap();
        let mut uni = ChainModel::uniform(&grid, 3);
        uni.forward_backward().unwrap();
        assert!((kl_divergence(&marg, &point, &uni).unwrap() - 4.0 * 4f64.ln()).abs() < 1e-12);
        let umarg = uni.forward_backward().unwrap();
        assert_eq!(kl_divergence(&umarg, &uni, &point).unwrap(), f64::INFINITY);
        assert_eq!(all_paths(4, 3).len(), 256);
    }

    #[test]
    fn uniform_iterate_only_shifts_the_cost() {
        let grid = Grid::new(-1.0, 1.0, 4).unwrap();
        let spec = DynamicsSpec::plain(&grid, InteractionPotential::Quadratic { kappa: 0.3 }, 0.5, 3).unwrap();
        let mut u = ChainModel::uniform(&grid, 3);
        let marg = u.forward_backward().unwrap();
        let (mu, nu) = (gauss(&grid, -0.3, 0.3), gauss(&grid, 0.4, 0.2));
        let p = assemble_effective_problem(&spec, &u, &marg, 2.0, &mu, &nu).unwrap();
        let c = build_cost(&spec, &marg).unwrap();
        let e = build_gradient_correction(&spec, &marg).unwrap();
        let shift = 4.0 * 4f64.ln() / 2.0;
        for i in 0..4 {
            for x in 0..4 {
                let extra = if i == 0 { shift } else { 0.0 };
                assert!((p.cost_node[[i, x]] - c.node[[i, x]] - e[[i, x]] - extra).abs() < 1e-12);
            }
        }
        for (a, b) in p.cost_edge.iter().zip(&c.edge) {
            assert!((a - b).iter().all(|v| v.abs() < 1e-12));
        }
        assert_eq!(p.eps_eff, 1.0);

        let inf = assemble_effective_problem(&spec, &u, &marg, f64::INFINITY, &mu, &nu).unwrap();
        assert_eq!(inf.eps_eff, 0.5);
        assert_eq!(inf.cost_edge, c.edge);
    }

    #[test]
    fn stale_model_is_rejected() {
        let grid = Grid::new(-1.0, 1.0, 4).unwrap();
        let spec = DynamicsSpec::plain(&grid, InteractionPotential::None, 0.5, 3).unwrap();
        let mut m = random_model(1, 4, 3);
        let marg = m.forward_backward().unwrap();
        let stale = ChainModel::new(&grid, m.node_logpot().clone(), m.edge_logpot().to_vec()).unwrap();
        let u = ProbVector::uniform(&grid, 1.0);
        assert_eq!(
            assemble_effective_problem(&spec, &stale, &marg, 1.0, &u, &u).unwrap_err(),
            Error::StaleNormalization
        );
    }

    #[test]
    fn small_quadratic_instance_descends_and_settles() {
        let grid = Grid::new(-1.0, 1.0, 4).unwrap();
        let spec = DynamicsSpec::plain(&grid, InteractionPotential::Quadratic { kappa: 0.3 }, 0.5, 3).unwrap();
        let cfg = ProximalConfig {
            eta_growth: 1.0,
            outer_iters: 50,
            outer_tol: 1e-12,
            inner_tol: 1e-12,
            ..Default::default()
        };
        let r = solve_density_control(&spec, &gauss(&grid, -0.5, 0.2), &gauss(&grid, 0.3, 0.3), &cfg).unwrap();
        for w in r.objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!(*r.changes.last().unwrap() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let bad = [
            ProximalConfig { eta: 0.0, ..Default::default() },
            ProximalConfig { shrink: 1.0, ..Default::default() },
            ProximalConfig { eta_growth: 0.5, ..Default::default() },
            ProximalConfig { outer_iters: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        assert!(ProximalConfig::default().validate().is_ok());
    }
}

//! Several interacting species, each with its own drift, state cost and
//! endpoint marginals, coupled through the pairwise potentials `W_{ℓm}`.
//!
//! Within one proximal step the species label is fixed along every path, so
//! the linearized problem splits into `L` independent chain problems.

use ndarray::Array2;

use crate::chain::{ChainModel, MarginalSet};
use crate::cost::{bracket_moment, correction_add, edge_cost, node_cost, shift, CostFactors, DynamicsSpec};
use crate::error::{invalid, Result};
use crate::grid::{DriftField, GradTable, Grid, InteractionPotential, ProbVector, StateCost};
use crate::par;
use crate::proximal::{self, ProximalConfig, SolveReport};
use crate::sbp::linear_cost;

#[derive(Debug, Clone)]
pub struct MultiSpec {
    pub grid: Grid,
    /// Species masses `w_ℓ`, summing to one.
    pub weights: Vec<f64>,
    /// `pots[ℓ][m] = W_{ℓm}`, symmetric in `(ℓ, m)`.
    pub pots: Vec<Vec<InteractionPotential>>,
    pub drifts: Vec<DriftField>,
    pub state_costs: Vec<StateCost>,
    pub eps: f64,
    pub steps: usize,
}

impl MultiSpec {
    pub fn new(
        grid: &Grid,
        weights: Vec<f64>,
        pots: Vec<Vec<InteractionPotential>>,
        drifts: Vec<DriftField>,
        state_costs: Vec<StateCost>,
        eps: f64,
        steps: usize,
    ) -> Result<Self> {
        let l = weights.len();
        if l == 0 {
            return Err(invalid("weights", "need at least one species"));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(invalid("weights", "species masses must be positive"));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(invalid("weights", format!("must sum to 1, got {s}")));
        }
        if pots.len() != l || pots.iter().any(|r| r.len() != l) {
            return Err(invalid("pots", format!("must be {l}x{l}")));
        }
        for a in 0..l {
            for b in 0..a {
                if pots[a][b] != pots[b][a] {
                    return Err(invalid("pots", format!("W[{a}][{b}] differs from W[{b}][{a}]")));
                }
            }
        }
        if drifts.len() != l || state_costs.len() != l {
            return Err(invalid("drifts/state_costs", format!("need one per species ({l})")));
        }
        if steps < 1 {
            return Err(invalid("T", "need at least one time step"));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(invalid("eps", format!("must be nonnegative, got {eps}")));
        }
        let d = grid.len();
        if drifts.iter().chain(&state_costs).any(|f| f.values().len() != d) {
            return Err(invalid("drifts/state_costs", "fields were evaluated on a different grid"));
        }
        Ok(Self {
            grid: grid.clone(),
            weights,
            pots,
            drifts,
            state_costs,
            eps,
            steps,
        })
    }

    /// Equal weights `1/L` and no drift or state cost.
    pub fn plain(grid: &Grid, pots: Vec<Vec<InteractionPotential>>, eps: f64, steps: usize) -> Result<Self> {
        let l = pots.len();
        Self::new(
            grid,
            vec![1.0 / l as f64; l],
            pots,
            vec![DriftField::zero(grid); l],
            vec![StateCost::zero(grid); l],
            eps,
            steps,
        )
    }

    /// The single-species problem as a one-species instance.
    pub fn from_single(spec: &DynamicsSpec) -> Self {
        Self {
            grid: spec.grid.clone(),
            weights: vec![1.0],
            pots: vec![vec![spec.pot]],
            drifts: vec![spec.drift.clone()],
            state_costs: vec![spec.state_cost.clone()],
            eps: spec.eps,
            steps: spec.steps,
        }
    }

    pub fn species(&self) -> usize {
        self.weights.len()
    }

    /// Species `ℓ` seen in isolation.
    pub fn single(&self, l: usize) -> Result<DynamicsSpec> {
        DynamicsSpec::new(
            &self.grid,
            self.pots[l][l],
            self.drifts[l].clone(),
            self.state_costs[l].clone(),
            self.eps,
            self.steps,
        )
    }
}

/// Species chains (each normalized) and their marginals carrying mass `w_ℓ`.
#[derive(Debug, Clone)]
pub struct MultiState {
    pub chains: Vec<ChainModel>,
    pub margs: Vec<MarginalSet>,
}

/// Cost factors and gradient correction for every species, linearized at the
/// given marginals (each with mass `w_ℓ`).
pub(crate) fn linearize(spec: &MultiSpec, margs: &[MarginalSet]) -> Result<Vec<(CostFactors, Array2<f64>)>> {
    let l = spec.species();
    if margs.len() != l {
        return Err(invalid("margs", format!("need {l} species, got {}", margs.len())));
    }
    for m in margs {
        spec.grid.ensure_same(m.grid())?;
        if m.steps() != spec.steps {
            return Err(invalid("margs", format!("expected {} steps, got {}", spec.steps, m.steps())));
        }
    }
    let d = spec.grid.len();
    let steps = spec.steps;
    let tables: Vec<Vec<GradTable>> = spec
        .pots
        .iter()
        .map(|row| row.iter().map(|p| GradTable::new(p, &spec.grid)).collect())
        .collect();

    // shifts[ℓ][i] and bracket moments r[ℓ][i]
    let shifts: Vec<Vec<Vec<f64>>> = par::map_range(l, |a| {
        (0..steps)
            .map(|i| {
                let mut field = vec![0.0; d];
                for (b, m) in margs.iter().enumerate() {
                    tables[a][b].convolve_add(m.node[i].mass(), 1.0, &mut field);
                }
                shift(&field, spec.drifts[a].values(), steps)
            })
            .collect()
    });
    let moments: Vec<Vec<Vec<f64>>> = par::map_range(l, |a| {
        (0..steps)
            .map(|i| bracket_moment(&spec.grid, &margs[a].pair[i], &shifts[a][i]))
            .collect()
    });

    Ok(par::map_range(l, |a| {
        let edge = (0..steps).map(|i| edge_cost(&spec.grid, &shifts[a][i], steps)).collect();
        let node = node_cost(&spec.state_costs[a], steps);
        let mut e = Array2::zeros((steps + 1, d));
        for (b, r) in moments.iter().enumerate() {
            if tables[a][b].is_inert() {
                continue;
            }
            for i in 0..steps {
                let mut row = e.row_mut(i);
                correction_add(&tables[a][b], &r[i], row.as_slice_mut().unwrap());
            }
        }
        (CostFactors { node, edge }, e)
    }))
}

/// Species-`ℓ` cost with the interaction drift `Σ_m ∇W_{ℓm} ∗ P_i^m`.
pub fn build_cost_multi(spec: &MultiSpec, state: &MultiState, l: usize) -> Result<CostFactors> {
    check_species(spec, l)?;
    Ok(linearize(spec, &state.margs)?.swap_remove(l).0)
}

/// Species-`ℓ` gradient correction, summed over the source species `m` whose
/// brackets depend on the marginals of `ℓ`.
pub fn build_gradient_correction_multi(spec: &MultiSpec, state: &MultiState, l: usize) -> Result<Array2<f64>> {
    check_species(spec, l)?;
    Ok(linearize(spec, &state.margs)?.swap_remove(l).1)
}

fn check_species(spec: &MultiSpec, l: usize) -> Result<()> {
    if l >= spec.species() {
        return Err(invalid("species", format!("index {l} out of range for {} species", spec.species())));
    }
    Ok(())
}

/// `F(M) = Σ_ℓ ⟨C^ℓ(M), M^ℓ⟩`.
#[allow(non_snake_case)]
pub fn evaluate_F_multi(spec: &MultiSpec, margs: &[MarginalSet]) -> Result<f64> {
    Ok(linearize(spec, margs)?
        .iter()
        .zip(margs)
        .map(|((c, _), m)| linear_cost(&c.node, &c.edge, m))
        .sum())
}

/// Proximal solve of the coupled problem; species `ℓ` moves from `mus[ℓ]` to
/// `nus[ℓ]`, both of mass `w_ℓ`.
pub fn solve_multi(
    spec: &MultiSpec,
    mus: &[ProbVector],
    nus: &[ProbVector],
    cfg: &ProximalConfig,
) -> Result<SolveReport> {
    let l = spec.species();
    if mus.len() != l || nus.len() != l {
        return Err(invalid("mus/nus", format!("need one endpoint pair per species ({l})")));
    }
    for (a, (mu, nu)) in mus.iter().zip(nus).enumerate() {
        let w = spec.weights[a];
        for (name, p) in [("mus", mu), ("nus", nu)] {
            if (p.total() - w).abs() > 1e-10 {
                return Err(invalid(name, format!("species {a} has mass {}, weight is {w}", p.total())));
            }
        }
    }
    proximal::run(spec, mus, nus, cfg)
}

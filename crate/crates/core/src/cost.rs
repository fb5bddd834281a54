//! The state-dependent transport cost `C(M)` of the discretized control
//! problem and the correction `E(M)` completing its gradient.

use ndarray::Array2;

use crate::chain::MarginalSet;
use crate::error::{invalid, Result};
use crate::grid::{DriftField, GradTable, Grid, InteractionPotential, StateCost};
use crate::par;
use crate::sbp::linear_cost;

/// Single-species dynamics `dX = (−∇W ∗ ρ + b + u) dt + √ε dB` with running
/// cost `½|u|² + V`, discretized with `T` steps on `grid`.
#[derive(Debug, Clone)]
pub struct DynamicsSpec {
    pub grid: Grid,
    pub pot: InteractionPotential,
    pub drift: DriftField,
    pub state_cost: StateCost,
    pub eps: f64,
    pub steps: usize,
}

impl DynamicsSpec {
    pub fn new(
        grid: &Grid,
        pot: InteractionPotential,
        drift: DriftField,
        state_cost: StateCost,
        eps: f64,
        steps: usize,
    ) -> Result<Self> {
        if steps < 1 {
            return Err(invalid("T", "need at least one time step"));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(invalid("eps", format!("must be nonnegative, got {eps}")));
        }
        if drift.values().len() != grid.len() || state_cost.values().len() != grid.len() {
            return Err(invalid("drift/state_cost", "fields were evaluated on a different grid"));
        }
        Ok(Self {
            grid: grid.clone(),
            pot,
            drift,
            state_cost,
            eps,
            steps,
        })
    }

    /// No drift and no state cost.
    pub fn plain(grid: &Grid, pot: InteractionPotential, eps: f64, steps: usize) -> Result<Self> {
        Self::new(grid, pot, DriftField::zero(grid), StateCost::zero(grid), eps, steps)
    }
}

/// Chain-factored cost: `C(x₀..x_T) = Σ node[i](x_i) + Σ edge[i](x_i, x_{i+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostFactors {
    pub node: Array2<f64>,
    pub edge: Vec<Array2<f64>>,
}

/// `shift_i(x) = (field(x) − b(x)) / T` where `field` is the interaction drift
/// `Σ ∇W ∗ P_i` felt at `x`; the bracket of the cost is `y − x + shift_i(x)`.
pub(crate) fn shift(field: &[f64], drift: &[f64], steps: usize) -> Vec<f64> {
    let t = steps as f64;
    field.iter().zip(drift).map(|(f, b)| (f - b) / t).collect()
}

/// `(T/2)(x_l − x_k + shift(k))²`.
pub(crate) fn edge_cost(grid: &Grid, shift: &[f64], steps: usize) -> Array2<f64> {
    let x = grid.nodes();
    let half_t = 0.5 * steps as f64;
    Array2::from_shape_fn((x.len(), x.len()), |(k, l)| {
        let r = x[l] - x[k] + shift[k];
        half_t * r * r
    })
}

/// `node[i] = V/T` for `i < T`, `node[T] = 0`.
pub(crate) fn node_cost(state_cost: &StateCost, steps: usize) -> Array2<f64> {
    let v = state_cost.values();
    let t = steps as f64;
    Array2::from_shape_fn((steps + 1, v.len()), |(i, k)| if i < steps { v[k] / t } else { 0.0 })
}

/// `r(k) = Σ_l (x_l − x_k + shift(k)) pair(k, l)`: the bracket integrated
/// against the pair marginal with `x_k` held fixed.
pub(crate) fn bracket_moment(grid: &Grid, pair: &Array2<f64>, shift: &[f64]) -> Vec<f64> {
    let x = grid.nodes();
    pair.outer_iter()
        .enumerate()
        .map(|(k, row)| {
            let mut first = 0.0;
            let mut mass = 0.0;
            for (l, p) in row.iter().enumerate() {
                first += x[l] * p;
                mass += p;
            }
            first - (x[k] - shift[k]) * mass
        })
        .collect()
}

/// `out(y) += Σ_k ∇W(x_k − y) r(k) = −(∇W ∗ r)(y)`.
pub(crate) fn correction_add(table: &GradTable, r: &[f64], out: &mut [f64]) {
    table.convolve_add(r, -1.0, out);
}

/// Per-slice interaction field `∇W ∗ P_i` for `i < T`.
fn fields(spec: &DynamicsSpec, marg: &MarginalSet) -> Vec<Vec<f64>> {
    let table = GradTable::new(&spec.pot, &spec.grid);
    par::map_range(spec.steps, |i| table.convolve(marg.node[i].mass()))
}

fn check(spec: &DynamicsSpec, marg: &MarginalSet) -> Result<()> {
    spec.grid.ensure_same(marg.grid())?;
    if marg.steps() != spec.steps {
        return Err(invalid(
            "marg",
            format!("has {} steps, spec has {}", marg.steps(), spec.steps),
        ));
    }
    Ok(())
}

/// `C(M)` with the interaction drift frozen at the marginals of `marg`.
pub fn build_cost(spec: &DynamicsSpec, marg: &MarginalSet) -> Result<CostFactors> {
    check(spec, marg)?;
    let f = fields(spec, marg);
    let edge = par::map_range(spec.steps, |i| {
        edge_cost(&spec.grid, &shift(&f[i], spec.drift.values(), spec.steps), spec.steps)
    });
    Ok(CostFactors {
        node: node_cost(&spec.state_cost, spec.steps),
        edge,
    })
}

/// `E(M)` as a `(T+1)×D` node-cost array whose last row is zero.
pub fn build_gradient_correction(spec: &DynamicsSpec, marg: &MarginalSet) -> Result<Array2<f64>> {
    check(spec, marg)?;
    let d = spec.grid.len();
    let mut out = Array2::zeros((spec.steps + 1, d));
    if spec.pot.is_inert() {
        return Ok(out);
    }
    let table = GradTable::new(&spec.pot, &spec.grid);
    let f = fields(spec, marg);
    let rows = par::map_range(spec.steps, |i| {
        let s = shift(&f[i], spec.drift.values(), spec.steps);
        let r = bracket_moment(&spec.grid, &marg.pair[i], &s);
        let mut e = vec![0.0; d];
        correction_add(&table, &r, &mut e);
        e
    });
    for (i, e) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&e));
    }
    Ok(out)
}

/// `F(M) = ⟨C(M), M⟩`.
#[allow(non_snake_case)]
pub fn evaluate_F(spec: &DynamicsSpec, marg: &MarginalSet) -> Result<f64> {
    let c = build_cost(spec, marg)?;
    Ok(linear_cost(&c.node, &c.edge, marg))
}

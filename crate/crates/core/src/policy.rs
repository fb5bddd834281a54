//! Feedback recovery from the pair marginals of a grid solution.
//!
//! Under the discretized dynamics the transition from `x` over one control
//! interval is Gaussian with mean `x + (−∇W ∗ ρ_i + b + ξ)/T`, so the control
//! is read off the conditional mean of the pair marginal.

use ndarray::Array2;

use crate::chain::MarginalSet;
use crate::cost::{bracket_moment, shift, DynamicsSpec};
use crate::error::{invalid, Error, Result};
use crate::grid::{GradTable, Grid, ProbVector};
use crate::multispecies::MultiSpec;
use crate::par;

/// Relative node mass below which a node is outside the support.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

/// `ξ(i, x_k)` on `T` control intervals, piecewise constant in `t` and
/// piecewise linear in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    grid: Grid,
    values: Array2<f64>,
    support: Array2<bool>,
}

impl PolicyField {
    /// Takes `T×D` values and support mask; values off the support are
    /// replaced by the nearest supported value.
    pub fn new(grid: &Grid, mut values: Array2<f64>, support: Array2<bool>) -> Result<Self> {
        let d = grid.len();
        if values.ncols() != d || support.dim() != values.dim() || values.nrows() == 0 {
            return Err(invalid("values", format!("need a T×{d} array with a matching support mask")));
        }
        for i in 0..values.nrows() {
            let on: Vec<usize> = (0..d).filter(|&k| support[[i, k]]).collect();
            if on.is_empty() {
                return Err(Error::EmptySupport { slice: i });
            }
            if let Some(&k) = on.iter().find(|&&k| !values[[i, k]].is_finite()) {
                return Err(invalid("values", format!("slice {i} node {k} is not finite")));
            }
            for k in (0..d).filter(|&k| !support[[i, k]]) {
                let pos = on.partition_point(|&j| j < k);
                let src = match (pos.checked_sub(1).map(|p| on[p]), on.get(pos)) {
                    (Some(lo), Some(&hi)) if hi - k < k - lo => hi,
                    (Some(lo), _) => lo,
                    (None, Some(&hi)) => hi,
                    (None, None) => unreachable!(),
                };
                values[[i, k]] = values[[i, src]];
            }
        }
        Ok(Self {
            grid: grid.clone(),
            values,
            support,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn support(&self) -> &Array2<bool> {
        &self.support
    }

    /// Control-interval index of `t`; `t = 1` maps to the last interval.
    pub fn interval(&self, t: f64) -> usize {
        let steps = self.steps();
        ((t.max(0.0) * steps as f64).floor() as usize).min(steps - 1)
    }

    /// `ξ(t, x)` with `x` clamped to the grid.
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        self.eval_slice(self.interval(t), x)
    }

    /// Linear interpolation of slice `i` at `x`, clamped to the grid.
    pub fn eval_slice(&self, i: usize, x: f64) -> f64 {
        let d = self.grid.len();
        let row = self.values.row(i);
        if d == 1 || x <= self.grid.lo() {
            return row[0];
        }
        if x >= self.grid.hi() {
            return row[d - 1];
        }
        let s = (x - self.grid.lo()) / self.grid.spacing();
        let k = (s.floor() as usize).min(d - 2);
        let w = s - k as f64;
        row[k] * (1.0 - w) + row[k + 1] * w
    }
}

/// `ξ(t, x)` for a policy field.
pub fn eval_policy(p: &PolicyField, t: f64, x: f64) -> f64 {
    p.eval(t, x)
}

/// `ξ(i, x_k) = T·r(k)/Σ_l pair(k, l)`, where `r` is the bracket moment, on
/// nodes holding at least `SUPPORT_THRESHOLD` of slice `i`.
fn from_shifts(grid: &Grid, marg: &MarginalSet, shifts: &[Vec<f64>]) -> Result<PolicyField> {
    let steps = marg.steps();
    let d = grid.len();
    let rows = par::map_range(steps, |i| {
        let node = marg.node[i].mass();
        let cut = SUPPORT_THRESHOLD * marg.node[i].total();
        let r = bracket_moment(grid, &marg.pair[i], &shifts[i]);
        let rowsum: Vec<f64> = marg.pair[i].outer_iter().map(|row| row.sum()).collect();
        (0..d)
            .map(|k| {
                if node[k] >= cut && node[k] > 0.0 && rowsum[k] > 0.0 {
                    (steps as f64 * r[k] / rowsum[k], true)
                } else {
                    (f64::NAN, false)
                }
            })
            .collect::<Vec<_>>()
    });
    let values = Array2::from_shape_fn((steps, d), |(i, k)| rows[i][k].0);
    let support = Array2::from_shape_fn((steps, d), |(i, k)| rows[i][k].1);
    PolicyField::new(grid, values, support)
}

/// Feedback of a single-species solution.
pub fn recover_policy(spec: &DynamicsSpec, marg: &MarginalSet) -> Result<PolicyField> {
    spec.grid.ensure_same(marg.grid())?;
    if marg.steps() != spec.steps {
        return Err(invalid("marg", format!("has {} steps, spec has {}", marg.steps(), spec.steps)));
    }
    let table = GradTable::new(&spec.pot, &spec.grid);
    let shifts = par::map_range(spec.steps, |i| {
        shift(&table.convolve(marg.node[i].mass()), spec.drift.values(), spec.steps)
    });
    from_shifts(&spec.grid, marg, &shifts)
}

/// Feedback of species `l` in a coupled solution; `margs[m]` carries mass `w_m`.
pub fn recover_policy_multi(spec: &MultiSpec, margs: &[MarginalSet], l: usize) -> Result<PolicyField> {
    if l >= spec.species() || margs.len() != spec.species() {
        return Err(invalid("species", format!("index {l} with {} marginal sets", margs.len())));
    }
    for m in margs {
        spec.grid.ensure_same(m.grid())?;
        if m.steps() != spec.steps {
            return Err(invalid("margs", format!("expected {} steps, got {}", spec.steps, m.steps())));
        }
    }
    let tables: Vec<GradTable> = spec.pots[l].iter().map(|p| GradTable::new(p, &spec.grid)).collect();
    let shifts = par::map_range(spec.steps, |i| {
        let mut field = vec![0.0; spec.grid.len()];
        for (t, m) in tables.iter().zip(margs) {
            t.convolve_add(m.node[i].mass(), 1.0, &mut field);
        }
        shift(&field, spec.drifts[l].values(), spec.steps)
    });
    from_shifts(&spec.grid, &margs[l], &shifts)
}

/// One control interval of the discrete closed loop: node `x_k` moves to a
/// Gaussian with mean `x_k + (−∇W ∗ ρ + b + ξ(i, x_k))/T` and variance `ε/T`,
/// discretized on the grid. With `ε = 0` each node moves to the node nearest
/// to its mean.
pub fn push_forward(spec: &DynamicsSpec, policy: &PolicyField, rho: &ProbVector, i: usize) -> Result<ProbVector> {
    spec.grid.ensure_same(rho.grid())?;
    spec.grid.ensure_same(policy.grid())?;
    if i >= policy.steps() {
        return Err(invalid("i", format!("slice {i} out of range")));
    }
    let t = spec.steps as f64;
    let x = spec.grid.nodes();
    let d = x.len();
    let field = GradTable::new(&spec.pot, &spec.grid).convolve(rho.mass());
    let var = spec.eps / t;
    let rows = par::map_range(d, |k| {
        let mut out = vec![0.0; d];
        let p = rho.mass()[k];
        if p == 0.0 {
            return out;
        }
        let mean = x[k] + (-field[k] + spec.drift.values()[k] + policy.values()[[i, k]]) / t;
        if var == 0.0 {
            out[spec.grid.nearest(mean)] = p;
            return out;
        }
        let w: Vec<f64> = x.iter().map(|y| -(y - mean).powi(2) / (2.0 * var)).collect();
        let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = w.iter().map(|v| (v - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for (o, v) in out.iter_mut().zip(e) {
            *o = p * v / z;
        }
        out
    });
    let mut mass = vec![0.0; d];
    for row in rows {
        for (m, v) in mass.iter_mut().zip(row) {
            *m += v;
        }
    }
    ProbVector::new(&spec.grid, mass)
}

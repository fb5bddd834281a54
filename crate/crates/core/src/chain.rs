//! Chain-structured path distributions `M(x₀, …, x_T)` stored as node and edge
//! log-potentials, with exact inference by forward/backward message passing.

use ndarray::{Array1, Array2};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, ProbVector};
use crate::logspace::log_sum_exp;
use crate::par;

/// Log-factor stand-in for probabilities that are exactly zero.
pub const LOG_ZERO_SENTINEL: f64 = -1e9;

/// Probabilities below this are treated as exact zeros.
pub const PROB_FLOOR: f64 = 1e-300;

/// `M(x₀,…,x_T) ∝ exp(Σ_i φ_i(x_i) + Σ_i ψ_i(x_i, x_{i+1}))`.
#[derive(Debug, Clone)]
pub struct ChainModel {
    grid: Grid,
    node_logpot: Array2<f64>,
    edge_logpot: Vec<Array2<f64>>,
    log_z: Option<f64>,
}

impl ChainModel {
    pub fn new(grid: &Grid, node_logpot: Array2<f64>, edge_logpot: Vec<Array2<f64>>) -> Result<Self> {
        let d = grid.len();
        let steps = edge_logpot.len();
        if steps == 0 {
            return Err(invalid("T", "a chain needs at least one time step"));
        }
        if node_logpot.dim() != (steps + 1, d) {
            return Err(invalid(
                "node_logpot",
                format!("expected shape ({}, {d}), got {:?}", steps + 1, node_logpot.dim()),
            ));
        }
        if let Some(i) = edge_logpot.iter().position(|e| e.dim() != (d, d)) {
            return Err(invalid("edge_logpot", format!("slice {i} is not {d}x{d}")));
        }
        let bad = |v: &f64| v.is_nan() || *v == f64::INFINITY;
        if node_logpot.iter().any(bad) || edge_logpot.iter().any(|e| e.iter().any(bad)) {
            return Err(invalid("logpot", "log-potentials must be finite or -inf"));
        }
        Ok(Self {
            grid: grid.clone(),
            node_logpot,
            edge_logpot,
            log_z: None,
        })
    }

    /// All-zero log-potentials: the uniform distribution over paths.
    pub fn uniform(grid: &Grid, steps: usize) -> Self {
        let d = grid.len();
        Self {
            grid: grid.clone(),
            node_logpot: Array2::zeros((steps + 1, d)),
            edge_logpot: vec![Array2::zeros((d, d)); steps],
            log_z: Some((steps + 1) as f64 * (d as f64).ln()),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Number of time steps `T` (the chain has `T + 1` nodes).
    pub fn steps(&self) -> usize {
        self.edge_logpot.len()
    }

    pub fn node_logpot(&self) -> &Array2<f64> {
        &self.node_logpot
    }

    pub fn edge_logpot(&self) -> &[Array2<f64>] {
        &self.edge_logpot
    }

    /// Cached `log Z`, if fresh.
    pub fn log_z(&self) -> Option<f64> {
        self.log_z
    }

    /// Unnormalized log-weight of one path.
    pub fn path_log_weight(&self, path: &[usize]) -> f64 {
        let mut s = 0.0;
        for (i, &x) in path.iter().enumerate() {
            s += self.node_logpot[[i, x]];
        }
        for (i, w) in path.windows(2).enumerate() {
            s += self.edge_logpot[i][[w[0], w[1]]];
        }
        s
    }

    /// Exact node and pairwise marginals; refreshes the cached `log Z`.
    pub fn forward_backward(&mut self) -> Result<MarginalSet> {
        let d = self.grid.len();
        let steps = self.steps();

        let mut alpha = Vec::with_capacity(steps + 1);
        alpha.push(self.node_logpot.row(0).to_vec());
        for i in 0..steps {
            let prev = &alpha[i];
            let edge = &self.edge_logpot[i];
            let next: Vec<f64> = (0..d)
                .map(|y| {
                    self.node_logpot[[i + 1, y]]
                        + log_sum_exp((0..d).map(|x| prev[x] + edge[[x, y]]))
                })
                .collect();
            check_slice(&next, i + 1)?;
            alpha.push(next);
        }
        let mut beta = vec![vec![0.0; d]; steps + 1];
        for i in (0..steps).rev() {
            let edge = &self.edge_logpot[i];
            let after: Vec<f64> = (0..d)
                .map(|y| self.node_logpot[[i + 1, y]] + beta[i + 1][y])
                .collect();
            beta[i] = (0..d)
                .map(|x| log_sum_exp((0..d).map(|y| edge[[x, y]] + after[y])))
                .collect();
            check_slice(&beta[i], i)?;
        }
        let log_z = log_sum_exp(alpha[steps].iter().copied());
        if !log_z.is_finite() {
            return Err(Error::NumericalFailure {
                slice: steps,
                reason: format!("log normalization is {log_z}"),
            });
        }

        let node: Vec<ProbVector> = (0..=steps)
            .map(|i| {
                let m: Vec<f64> = (0..d)
                    .map(|x| prob(alpha[i][x] + beta[i][x] - log_z))
                    .collect();
                ProbVector::new(&self.grid, m)
            })
            .collect::<Result<_>>()?;

        let pair = par::map_range(steps, |i| {
            let edge = &self.edge_logpot[i];
            Array2::from_shape_fn((d, d), |(x, y)| {
                prob(alpha[i][x] + edge[[x, y]] + self.node_logpot[[i + 1, y]] + beta[i + 1][y] - log_z)
            })
        });

        self.log_z = Some(log_z);
        Ok(MarginalSet { node, pair })
    }

    /// Factors whose sum is exactly `log M` (normalization folded into node 0),
    /// with `-∞` replaced by [`LOG_ZERO_SENTINEL`].
    pub fn log_tensor_factors(&self) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let log_z = self.log_z.ok_or(Error::StaleNormalization)?;
        let clamp = |v: f64| v.max(LOG_ZERO_SENTINEL);
        let mut node = self.node_logpot.mapv(clamp);
        node.row_mut(0).mapv_inplace(|v| v - log_z);
        let edge = self.edge_logpot.iter().map(|e| e.mapv(clamp)).collect();
        Ok((node, edge))
    }
}

fn prob(log_p: f64) -> f64 {
    let p = log_p.exp();
    if p < PROB_FLOOR {
        0.0
    } else {
        p
    }
}

fn check_slice(v: &[f64], slice: usize) -> Result<()> {
    if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NumericalFailure {
            slice,
            reason: "message overflow".into(),
        });
    }
    if v.iter().all(|x| *x == f64::NEG_INFINITY) {
        return Err(Error::NumericalFailure {
            slice,
            reason: "message underflow (all states carry zero mass)".into(),
        });
    }
    Ok(())
}

/// Node marginals `P_i(M)` and pairwise marginals `P_{i,i+1}(M)`.
#[derive(Debug, Clone)]
pub struct MarginalSet {
    pub node: Vec<ProbVector>,
    pub pair: Vec<Array2<f64>>,
}

impl MarginalSet {
    pub fn steps(&self) -> usize {
        self.pair.len()
    }

    pub fn grid(&self) -> &Grid {
        self.node[0].grid()
    }

    /// Every marginal multiplied so the total mass becomes `total`.
    pub fn scaled(&self, total: f64) -> MarginalSet {
        let s = total / self.node[0].total();
        MarginalSet {
            node: self.node.iter().map(|p| p.rescaled(p.total() * s)).collect(),
            pair: self.pair.iter().map(|p| p * s).collect(),
        }
    }

    /// Largest TV distance between corresponding node marginals.
    pub fn max_node_tv(&self, other: &MarginalSet) -> f64 {
        self.node
            .iter()
            .zip(&other.node)
            .map(|(a, b)| a.tv_distance(b))
            .fold(0.0, f64::max)
    }

    /// Row sums of `pair[i]`.
    pub fn pair_row_sums(&self, i: usize) -> Array1<f64> {
        self.pair[i].sum_axis(ndarray::Axis(1))
    }

    /// Column sums of `pair[i]`.
    pub fn pair_col_sums(&self, i: usize) -> Array1<f64> {
        self.pair[i].sum_axis(ndarray::Axis(0))
    }
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `⟨M, log M⟩` for a chain distribution, from its marginals:
/// `Σ_i ⟨P_{i,i+1}, log P_{i,i+1}⟩ − Σ_{0<i<T} ⟨P_i, log P_i⟩`.
pub fn entropy(_model: &ChainModel, marg: &MarginalSet) -> f64 {
    let pairs: f64 = marg.pair.iter().map(|p| p.iter().copied().map(xlogx).sum::<f64>()).sum();
    let steps = marg.steps();
    let nodes: f64 = (1..steps)
        .map(|i| marg.node[i].mass().iter().copied().map(xlogx).sum::<f64>())
        .sum();
    pairs - nodes
}

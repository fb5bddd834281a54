//! Uniform 1-D spatial discretization, discrete measures on the grid, and the
//! interaction/drift/state-cost fields evaluated on it.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};

/// Uniformly spaced nodes on `[lo, hi]`, endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lo: f64,
    hi: f64,
    h: f64,
    nodes: Vec<f64>,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, len: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(invalid("lo/hi", format!("need lo < hi, got [{lo}, {hi}]")));
        }
        if len < 2 {
            return Err(invalid("D", format!("need at least 2 nodes, got {len}")));
        }
        let n = (len - 1) as f64;
        let h = (hi - lo) / n;
        // Built from the center so that nodes mirror exactly about it.
        let (c, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let mut nodes: Vec<f64> = (0..len)
            .map(|k| c + half * (2.0 * k as f64 - n) / n)
            .collect();
        nodes[0] = lo;
        nodes[len - 1] = hi;
        Ok(Self { lo, hi, h, nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// Node spacing.
    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    /// Index of the node closest to `x` (clamped to the domain).
    pub fn nearest(&self, x: f64) -> usize {
        let k = ((x - self.lo) / self.h).round();
        k.clamp(0.0, (self.len() - 1) as f64) as usize
    }

    pub(crate) fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.len() != other.len() || self.lo != other.lo || self.hi != other.hi {
            return Err(Error::GridMismatch(format!(
                "[{}, {}] with {} nodes vs [{}, {}] with {} nodes",
                self.lo,
                self.hi,
                self.len(),
                other.lo,
                other.hi,
                other.len()
            )));
        }
        Ok(())
    }
}

/// A nonnegative measure on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    grid: Grid,
    mass: Vec<f64>,
}

impl ProbVector {
    pub fn new(grid: &Grid, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "mass has {} entries, grid has {} nodes",
                mass.len(),
                grid.len()
            )));
        }
        if let Some(k) = mass.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(invalid("mass", format!("entry {k} is {}", mass[k])));
        }
        Ok(Self {
            grid: grid.clone(),
            mass,
        })
    }

    /// Node-evaluated Gaussian density, rescaled to sum to `total`.
    pub fn gaussian(grid: &Grid, mean: f64, variance: f64, total: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(invalid("variance", format!("must be positive, got {variance}")));
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(invalid("total", format!("must be positive, got {total}")));
        }
        let mut mass: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|x| (-(x - mean).powi(2) / (2.0 * variance)).exp())
            .collect();
        let sum: f64 = mass.iter().sum();
        if sum <= 0.0 {
            return Err(invalid(
                "mean",
                format!("N({mean}, {variance}) has no representable mass on the grid"),
            ));
        }
        mass.iter_mut().for_each(|m| *m *= total / sum);
        Ok(Self {
            grid: grid.clone(),
            mass,
        })
    }

    pub fn uniform(grid: &Grid, total: f64) -> Self {
        let d = grid.len();
        Self {
            grid: grid.clone(),
            mass: vec![total / d as f64; d],
        }
    }

    pub fn point_mass(grid: &Grid, index: usize, total: f64) -> Self {
        let mut mass = vec![0.0; grid.len()];
        mass[index] = total;
        Self {
            grid: grid.clone(),
            mass,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn into_mass(self) -> Vec<f64> {
        self.mass
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        let t = self.total();
        self.grid
            .nodes()
            .iter()
            .zip(&self.mass)
            .map(|(x, m)| x * m)
            .sum::<f64>()
            / t
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        let t = self.total();
        self.grid
            .nodes()
            .iter()
            .zip(&self.mass)
            .map(|(x, m)| (x - mu).powi(2) * m)
            .sum::<f64>()
            / t
    }

    /// Same measure rescaled to total mass `total`.
    pub fn rescaled(&self, total: f64) -> Self {
        let s = total / self.total();
        Self {
            grid: self.grid.clone(),
            mass: self.mass.iter().map(|m| m * s).collect(),
        }
    }

    /// Reflection about the grid center: `mass[k] -> mass[D-1-k]`.
    pub fn mirrored(&self) -> Self {
        let mut mass = self.mass.clone();
        mass.reverse();
        Self {
            grid: self.grid.clone(),
            mass,
        }
    }

    /// Total-variation distance after normalizing both measures.
    pub fn tv_distance(&self, other: &ProbVector) -> f64 {
        tv_distance(&self.mass, &other.mass)
    }
}

/// `½ Σ |p/Σp − q/Σq|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a / sp - b / sq).abs())
        .sum::<f64>()
}

/// Symmetric pairwise potential `W`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InteractionPotential {
    #[default]
    None,
    /// `W(x) = β / (x² + δ²)^{α/2}`, a softened `β/|x|^α`.
    PowerLaw { alpha: f64, beta: f64, delta: f64 },
    /// `W(x) = κ x² / 2`.
    Quadratic { kappa: f64 },
}

impl InteractionPotential {
    pub fn power_law(alpha: f64, beta: f64, delta: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(invalid("alpha", format!("must be positive, got {alpha}")));
        }
        if !(beta >= 0.0) {
            return Err(invalid("beta", format!("must be nonnegative, got {beta}")));
        }
        if !(delta > 0.0) {
            return Err(invalid("delta", format!("must be positive, got {delta}")));
        }
        Ok(Self::PowerLaw { alpha, beta, delta })
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Self::None => 0.0,
            Self::PowerLaw { alpha, beta, delta } => beta * (x * x + delta * delta).powf(-alpha / 2.0),
            Self::Quadratic { kappa } => 0.5 * kappa * x * x,
        }
    }

    /// `∇W(x)`; odd in `x`, zero at the origin.
    pub fn grad(&self, x: f64) -> f64 {
        match *self {
            Self::None => 0.0,
            Self::PowerLaw { alpha, beta, delta } => {
                if beta == 0.0 || x == 0.0 {
                    0.0
                } else {
                    -alpha * beta * x * (x * x + delta * delta).powf(-alpha / 2.0 - 1.0)
                }
            }
            Self::Quadratic { kappa } => kappa * x,
        }
    }

    /// True when `∇W ≡ 0`.
    pub fn is_inert(&self) -> bool {
        match *self {
            Self::None => true,
            Self::PowerLaw { beta, .. } => beta == 0.0,
            Self::Quadratic { kappa } => kappa == 0.0,
        }
    }
}

/// `∇W` tabulated on all node offsets of a uniform grid.
#[derive(Debug, Clone)]
pub struct GradTable {
    len: usize,
    // table[len - 1 + (k - j)] = ∇W(x_k - x_j)
    table: Vec<f64>,
    inert: bool,
}

impl GradTable {
    pub fn new(pot: &InteractionPotential, grid: &Grid) -> Self {
        let d = grid.len();
        let mut table = vec![0.0; 2 * d - 1];
        for off in 1..d {
            let g = pot.grad(off as f64 * grid.spacing());
            table[d - 1 + off] = g;
            table[d - 1 - off] = -g;
        }
        Self {
            len: d,
            table,
            inert: pot.is_inert(),
        }
    }

    /// `∇W(x_k − x_j)`.
    #[inline]
    pub fn at(&self, k: usize, j: usize) -> f64 {
        self.table[self.len - 1 + k - j]
    }

    pub fn is_inert(&self) -> bool {
        self.inert
    }

    /// `out[k] = Σ_j ∇W(x_k − x_j) p[j]`.
    pub fn convolve(&self, p: &[f64]) -> Vec<f64> {
        let d = self.len;
        let mut out = vec![0.0; d];
        if self.inert {
            return out;
        }
        self.convolve_add(p, 1.0, &mut out);
        out
    }

    /// `out[k] += scale · Σ_j ∇W(x_k − x_j) p[j]`.
    pub fn convolve_add(&self, p: &[f64], scale: f64, out: &mut [f64]) {
        if self.inert {
            return;
        }
        let d = self.len;
        for (k, o) in out.iter_mut().enumerate() {
            // table[d-1+k-j] for j = 0..d is the reversed window table[k..k+d]
            let window = &self.table[k..k + d];
            let mut acc = 0.0;
            for (j, pj) in p.iter().enumerate() {
                acc += window[d - 1 - j] * pj;
            }
            *o += scale * acc;
        }
    }
}

/// `out[k] = Σ_j ∇W(x_k − x_j) p.mass[j]` on the grid of `p`.
pub fn conv_grad_w(pot: &InteractionPotential, grid: &Grid, p: &ProbVector) -> Result<Vec<f64>> {
    grid.ensure_same(p.grid())?;
    Ok(GradTable::new(pot, grid).convolve(p.mass()))
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A scalar field `f: ℝ → ℝ` together with its values on grid nodes.
#[derive(Clone)]
pub struct GridField {
    f: ScalarFn,
    values: Vec<f64>,
    zero: bool,
}

impl GridField {
    pub fn from_fn(grid: &Grid, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        let values = grid.nodes().iter().map(|&x| f(x)).collect();
        Self {
            f: Arc::new(f),
            values,
            zero: false,
        }
    }

    pub fn zero(grid: &Grid) -> Self {
        Self {
            f: Arc::new(|_| 0.0),
            values: vec![0.0; grid.len()],
            zero: true,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }
}

impl fmt::Debug for GridField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridField")
            .field("values", &self.values)
            .finish()
    }
}

/// Uncontrolled drift `b`.
pub type DriftField = GridField;
/// Running state cost `V`.
pub type StateCost = GridField;

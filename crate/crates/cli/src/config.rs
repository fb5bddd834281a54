//! Experiment configuration: one JSON document per run.

use std::path::PathBuf;

use density_control::lq::{GaussianEndpoints, LqSpec, DEFAULT_MESH};
use density_control::{
    DynamicsSpec, GridField, Grid, InteractionPotential, MultiSpec, ProbVector, ProximalConfig,
};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

/// Failure while reading or validating a config.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<density_control::Error> for ConfigError {
    fn from(e: density_control::Error) -> Self {
        Self(e.to_string())
    }
}

fn bad(key: &str, reason: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("invalid config key `{key}`: {reason}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    GridSingle,
    GridMulti,
    Lq,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub grid: Option<GridConfig>,
    /// Number of time steps `T`.
    pub steps: Option<usize>,
    pub eps: Option<f64>,
    pub potential: Option<PotentialConfig>,
    pub drift: Option<AffineConfig>,
    pub state_cost: Option<QuadraticConfig>,
    pub mu: Option<GaussianConfig>,
    pub nu: Option<GaussianConfig>,
    pub species: Option<Vec<SpeciesConfig>>,
    /// `potentials[ℓ][m] = W_{ℓm}` in grid_multi mode.
    pub potentials: Option<Vec<Vec<PotentialConfig>>>,
    pub lq: Option<LqConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    pub simulation: Option<SimulationConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    None,
    /// `delta` defaults to the grid spacing.
    PowerLaw {
        alpha: f64,
        beta: f64,
        delta: Option<f64>,
    },
    Quadratic {
        kappa: f64,
    },
}

/// `b(x) = slope·x + offset`.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub offset: f64,
}

/// `V(x) = weight·(x − center)²`.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    #[serde(default)]
    pub weight: f64,
    #[serde(default)]
    pub center: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianConfig {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    pub weight: f64,
    pub mu: GaussianConfig,
    pub nu: GaussianConfig,
    pub drift: Option<AffineConfig>,
    pub state_cost: Option<QuadraticConfig>,
}

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
    pub a: Vec<Matrix>,
    pub abar: Vec<Vec<Matrix>>,
    pub sigma: Matrix,
    pub q: Vec<Matrix>,
    pub eps: f64,
    pub endpoints: Vec<LqEndpointConfig>,
    pub mesh: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqEndpointConfig {
    pub m0: Vec<f64>,
    pub s0: Matrix,
    pub m1: Vec<f64>,
    pub s1: Matrix,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub eta: Option<f64>,
    pub eta_max: Option<f64>,
    pub eta_growth: Option<f64>,
    pub outer_iters: Option<usize>,
    pub outer_tol: Option<f64>,
    pub backtracking: Option<bool>,
    pub shrink: Option<f64>,
    pub max_shrinks: Option<usize>,
    pub inner_tol: Option<f64>,
    pub inner_max_iters: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub agents: usize,
    #[serde(default)]
    pub seed: u64,
    /// Euler substeps over `[0, 1]`; defaults to `10·T` (grid) or the LQ mesh.
    pub substeps: Option<usize>,
    /// Snapshot times; defaults to every control step (grid) or quarters (LQ).
    pub checkpoints: Option<Vec<f64>>,
}

/// Parse a config document.
pub fn parse(text: &str) -> Result<Config, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError(format!("invalid config: {e}")))
}

pub fn parse_value(v: serde_json::Value) -> Result<Config, ConfigError> {
    serde_json::from_value(v).map_err(|e| ConfigError(format!("invalid config: {e}")))
}

fn require<'a, T>(v: &'a Option<T>, key: &str, mode: &str) -> Result<&'a T, ConfigError> {
    v.as_ref().ok_or_else(|| bad(key, format!("required in {mode} mode")))
}

fn forbid<T>(v: &Option<T>, key: &str, mode: &str) -> Result<(), ConfigError> {
    match v {
        Some(_) => Err(bad(key, format!("not used in {mode} mode"))),
        None => Ok(()),
    }
}

fn gaussian(grid: &Grid, g: &GaussianConfig, total: f64, key: &str) -> Result<ProbVector, ConfigError> {
    if !(g.variance > 0.0) {
        return Err(bad(&format!("{key}.variance"), "must be positive"));
    }
    ProbVector::gaussian(grid, g.mean, g.variance, total).map_err(|e| bad(key, e))
}

fn potential(p: &PotentialConfig, grid: &Grid, key: &str) -> Result<InteractionPotential, ConfigError> {
    match *p {
        PotentialConfig::None => Ok(InteractionPotential::None),
        PotentialConfig::PowerLaw { alpha, beta, delta } => {
            InteractionPotential::power_law(alpha, beta, delta.unwrap_or(grid.spacing())).map_err(|e| bad(key, e))
        }
        PotentialConfig::Quadratic { kappa } => Ok(InteractionPotential::Quadratic { kappa }),
    }
}

fn drift(grid: &Grid, c: Option<AffineConfig>) -> GridField {
    let c = c.unwrap_or_default();
    GridField::from_fn(grid, move |x| c.slope * x + c.offset)
}

fn state_cost(grid: &Grid, c: Option<QuadraticConfig>) -> GridField {
    let c = c.unwrap_or_default();
    GridField::from_fn(grid, move |x| c.weight * (x - c.center).powi(2))
}

fn matrix(m: &Matrix, key: &str) -> Result<DMatrix<f64>, ConfigError> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || m.iter().any(|r| r.len() != cols) {
        return Err(bad(key, "must be a non-empty rectangular array of rows"));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| m[i][j]))
}

/// Grid problem with a single species.
pub struct GridSingle {
    pub spec: DynamicsSpec,
    pub mu: ProbVector,
    pub nu: ProbVector,
}

/// Grid problem with several species.
pub struct GridMulti {
    pub spec: MultiSpec,
    pub mus: Vec<ProbVector>,
    pub nus: Vec<ProbVector>,
}

pub struct LqProblem {
    pub spec: LqSpec,
    pub mesh: usize,
}

pub enum Problem {
    GridSingle(GridSingle),
    GridMulti(GridMulti),
    Lq(LqProblem),
}

impl Config {
    /// Every cross-field check, done before any compute.
    pub fn build(&self) -> Result<Problem, ConfigError> {
        self.proximal()?;
        match self.mode {
            Mode::GridSingle => self.grid_single().map(Problem::GridSingle),
            Mode::GridMulti => self.grid_multi().map(Problem::GridMulti),
            Mode::Lq => self.lq_problem().map(Problem::Lq),
        }
    }

    fn grid(&self, mode: &str) -> Result<Grid, ConfigError> {
        let g = require(&self.grid, "grid", mode)?;
        Grid::new(g.lo, g.hi, g.nodes).map_err(|e| bad("grid", e))
    }

    fn eps_steps(&self, mode: &str) -> Result<(f64, usize), ConfigError> {
        let eps = *require(&self.eps, "eps", mode)?;
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(bad("eps", format!("must be nonnegative, got {eps}")));
        }
        let steps = *require(&self.steps, "steps", mode)?;
        if steps == 0 {
            return Err(bad("steps", "need at least one time step"));
        }
        Ok((eps, steps))
    }

    fn check_simulation(&self, steps: usize) -> Result<(), ConfigError> {
        if let Some(s) = &self.simulation {
            if s.agents < 2 {
                return Err(bad("simulation.agents", "need at least 2"));
            }
            if s.substeps.is_some_and(|k| k < steps) {
                return Err(bad("simulation.substeps", format!("need at least {steps}")));
            }
            if let Some(c) = &s.checkpoints {
                if c.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return Err(bad("simulation.checkpoints", "times must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    fn grid_single(&self) -> Result<GridSingle, ConfigError> {
        let mode = "grid_single";
        forbid(&self.species, "species", mode)?;
        forbid(&self.potentials, "potentials", mode)?;
        forbid(&self.lq, "lq", mode)?;
        let grid = self.grid(mode)?;
        let (eps, steps) = self.eps_steps(mode)?;
        let pot = potential(require(&self.potential, "potential", mode)?, &grid, "potential")?;
        let mu = gaussian(&grid, require(&self.mu, "mu", mode)?, 1.0, "mu")?;
        let nu = gaussian(&grid, require(&self.nu, "nu", mode)?, 1.0, "nu")?;
        self.check_simulation(steps)?;
        let spec = DynamicsSpec::new(&grid, pot, drift(&grid, self.drift), state_cost(&grid, self.state_cost), eps, steps)?;
        Ok(GridSingle { spec, mu, nu })
    }

    fn grid_multi(&self) -> Result<GridMulti, ConfigError> {
        let mode = "grid_multi";
        for (v, key) in [
            (self.potential.is_some(), "potential"),
            (self.mu.is_some(), "mu"),
            (self.nu.is_some(), "nu"),
            (self.drift.is_some(), "drift"),
            (self.state_cost.is_some(), "state_cost"),
            (self.lq.is_some(), "lq"),
            (self.simulation.is_some(), "simulation"),
        ] {
            if v {
                return Err(bad(key, format!("not used in {mode} mode")));
            }
        }
        let grid = self.grid(mode)?;
        let (eps, steps) = self.eps_steps(mode)?;
        let species = require(&self.species, "species", mode)?;
        let rows = require(&self.potentials, "potentials", mode)?;
        let l = species.len();
        if l == 0 {
            return Err(bad("species", "need at least one species"));
        }
        if rows.len() != l || rows.iter().any(|r| r.len() != l) {
            return Err(bad("potentials", format!("must be {l}x{l}")));
        }
        let mut pots = Vec::with_capacity(l);
        for (a, row) in rows.iter().enumerate() {
            let mut out = Vec::with_capacity(l);
            for (b, p) in row.iter().enumerate() {
                out.push(potential(p, &grid, &format!("potentials[{a}][{b}]"))?);
            }
            pots.push(out);
        }
        let mut mus = Vec::with_capacity(l);
        let mut nus = Vec::with_capacity(l);
        for (a, s) in species.iter().enumerate() {
            if !(s.weight > 0.0) {
                return Err(bad(&format!("species[{a}].weight"), "must be positive"));
            }
            mus.push(gaussian(&grid, &s.mu, s.weight, &format!("species[{a}].mu"))?);
            nus.push(gaussian(&grid, &s.nu, s.weight, &format!("species[{a}].nu"))?);
        }
        let spec = MultiSpec::new(
            &grid,
            species.iter().map(|s| s.weight).collect(),
            pots,
            species.iter().map(|s| drift(&grid, s.drift)).collect(),
            species.iter().map(|s| state_cost(&grid, s.state_cost)).collect(),
            eps,
            steps,
        )?;
        Ok(GridMulti { spec, mus, nus })
    }

    fn lq_problem(&self) -> Result<LqProblem, ConfigError> {
        let mode = "lq";
        for (v, key) in [
            (self.grid.is_some(), "grid"),
            (self.steps.is_some(), "steps"),
            (self.eps.is_some(), "eps"),
            (self.potential.is_some(), "potential"),
            (self.mu.is_some(), "mu"),
            (self.nu.is_some(), "nu"),
            (self.species.is_some(), "species"),
            (self.potentials.is_some(), "potentials"),
        ] {
            if v {
                return Err(bad(key, format!("not used in {mode} mode; set it inside `lq`")));
            }
        }
        let c = require(&self.lq, "lq", mode)?;
        if !(c.eps > 0.0) {
            return Err(bad("lq.eps", format!("must be positive, got {}", c.eps)));
        }
        let mesh = c.mesh.unwrap_or(DEFAULT_MESH);
        if mesh < 4 || mesh % 2 != 0 {
            return Err(bad("lq.mesh", "must be an even number of at least 4"));
        }
        let a = c.a.iter().enumerate().map(|(i, m)| matrix(m, &format!("lq.a[{i}]"))).collect::<Result<Vec<_>, _>>()?;
        let q = c.q.iter().enumerate().map(|(i, m)| matrix(m, &format!("lq.q[{i}]"))).collect::<Result<Vec<_>, _>>()?;
        let mut abar = Vec::with_capacity(c.abar.len());
        for (i, row) in c.abar.iter().enumerate() {
            abar.push(
                row.iter()
                    .enumerate()
                    .map(|(j, m)| matrix(m, &format!("lq.abar[{i}][{j}]")))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
        let sigma = matrix(&c.sigma, "lq.sigma")?;
        let mut endpoints = Vec::with_capacity(c.endpoints.len());
        for (i, e) in c.endpoints.iter().enumerate() {
            endpoints.push(GaussianEndpoints {
                m0: DVector::from_vec(e.m0.clone()),
                s0: matrix(&e.s0, &format!("lq.endpoints[{i}].s0"))?,
                m1: DVector::from_vec(e.m1.clone()),
                s1: matrix(&e.s1, &format!("lq.endpoints[{i}].s1"))?,
            });
        }
        self.check_simulation(1)?;
        let spec = LqSpec::new(a, abar, sigma, q, c.eps, endpoints).map_err(|e| bad("lq", e))?;
        Ok(LqProblem { spec, mesh })
    }

    pub fn proximal(&self) -> Result<ProximalConfig, ConfigError> {
        let s = &self.solver;
        let d = ProximalConfig::default();
        let cfg = ProximalConfig {
            eta: s.eta.unwrap_or(d.eta),
            eta_max: s.eta_max.unwrap_or(d.eta_max.max(s.eta.unwrap_or(d.eta))),
            eta_growth: s.eta_growth.unwrap_or(d.eta_growth),
            outer_iters: s.outer_iters.unwrap_or(d.outer_iters),
            outer_tol: s.outer_tol.unwrap_or(d.outer_tol),
            backtracking: s.backtracking.unwrap_or(d.backtracking),
            shrink: s.shrink.unwrap_or(d.shrink),
            max_shrinks: s.max_shrinks.unwrap_or(d.max_shrinks),
            inner_tol: s.inner_tol.unwrap_or(d.inner_tol),
            inner_max_iters: s.inner_max_iters.unwrap_or(d.inner_max_iters),
        };
        cfg.validate().map_err(|e| match e {
            density_control::Error::InvalidArgument { name, reason } => bad(&format!("solver.{name}"), reason),
            other => other.into(),
        })?;
        Ok(cfg)
    }
}

//! Experiment execution and artifact export.

use std::fs;
use std::path::{Path, PathBuf};

use density_control::lq::{moments_at, residuals};
use density_control::particle::{empirical_stats, EmpiricalStats};
use density_control::{
    recover_policy, recover_policy_multi, simulate_grid, simulate_lq, solve_density_control, solve_lq,
    solve_multi, Grid, LqSolution, MarginalSet, PolicyField, SimConfig, Simulation, SolveReport,
};
use ndarray::Array2;
use serde_json::{json, Value};

use crate::config::{Config, ConfigError, GridSingle, LqProblem, Problem, SimulationConfig};

/// How a command ended.
#[derive(Debug)]
pub enum Failure {
    /// Bad or inconsistent input; nothing was computed.
    Config(String),
    /// A solver or I/O step failed.
    Numerical(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.0)
    }
}

fn numerical(context: &str) -> impl Fn(density_control::Error) -> Failure + '_ {
    move |e| Failure::Numerical(format!("{context}: {e}"))
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Numerical(format!("{}: {e}", path.display()))
}

/// One row of a sweep summary.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub species: usize,
    pub status: String,
    pub iterations: Option<usize>,
    pub objective: Option<f64>,
    pub mid_t: f64,
    pub mid_mean: f64,
    pub mid_variance: f64,
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub converged: bool,
    pub summary: Vec<SummaryRow>,
}

/// Round-trip representation with 17 significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

struct Csv {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl Csv {
    fn create(dir: &Path, name: &str, header: &[String]) -> Result<Self, Failure> {
        let path = dir.join(name);
        let writer = csv::Writer::from_path(&path).map_err(|e| Failure::Numerical(format!("{}: {e}", path.display())))?;
        let mut c = Self { path, writer };
        c.row(header)?;
        Ok(c)
    }

    fn row(&mut self, fields: &[String]) -> Result<(), Failure> {
        self.writer
            .write_record(fields)
            .map_err(|e| Failure::Numerical(format!("{}: {e}", self.path.display())))
    }

    fn finish(mut self) -> Result<(), Failure> {
        self.writer.flush().map_err(io(&self.path))
    }
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn write_json(dir: &Path, name: &str, v: &Value) -> Result<(), Failure> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(v).expect("JSON values serialize");
    fs::write(&path, text + "\n").map_err(io(&path))
}

fn prepare(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_density(dir: &Path, margs: &[&MarginalSet]) -> Result<(), Failure> {
    let mut w = Csv::create(dir, "density.csv", &header(&["species", "t_index", "node_index", "x", "mass"]))?;
    for (l, m) in margs.iter().enumerate() {
        for (i, p) in m.node.iter().enumerate() {
            for (k, (x, mass)) in p.grid().nodes().iter().zip(p.mass()).enumerate() {
                w.row(&[l.to_string(), i.to_string(), k.to_string(), num(*x), num(*mass)])?;
            }
        }
    }
    w.finish()
}

fn write_policy(dir: &Path, policies: &[PolicyField]) -> Result<(), Failure> {
    let mut w = Csv::create(dir, "policy.csv", &header(&["species", "t_index", "x", "xi"]))?;
    for (l, p) in policies.iter().enumerate() {
        for (i, row) in p.values().outer_iter().enumerate() {
            for (x, xi) in p.grid().nodes().iter().zip(row) {
                w.row(&[l.to_string(), i.to_string(), num(*x), num(*xi)])?;
            }
        }
    }
    w.finish()
}

/// Reads a single-species `policy.csv` back onto `grid`.
pub fn read_policy(path: &Path, grid: &Grid, steps: usize) -> Result<PolicyField, Failure> {
    let bad = |reason: String| Failure::Config(format!("invalid policy file {}: {reason}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let d = grid.len();
    let mut values = Array2::from_elem((steps, d), f64::NAN);
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad(format!("row {} has {} fields, expected 4", line + 1, rec.len())));
        }
        let field = |j: usize| rec[j].trim().to_string();
        let species: usize = field(0).parse().map_err(|_| bad(format!("row {}: bad species", line + 1)))?;
        let i: usize = field(1).parse().map_err(|_| bad(format!("row {}: bad t_index", line + 1)))?;
        let x: f64 = field(2).parse().map_err(|_| bad(format!("row {}: bad x", line + 1)))?;
        let xi: f64 = field(3).parse().map_err(|_| bad(format!("row {}: bad xi", line + 1)))?;
        if species != 0 {
            return Err(bad(format!("row {}: only species 0 can be simulated", line + 1)));
        }
        if i >= steps {
            return Err(bad(format!("row {}: t_index {i} exceeds T = {steps}", line + 1)));
        }
        let k = grid.nearest(x);
        if (grid.node(k) - x).abs() > 1e-9 * grid.spacing() {
            return Err(bad(format!("row {}: x = {x} is not a grid node", line + 1)));
        }
        values[[i, k]] = xi;
    }
    if let Some(((i, k), _)) = values.indexed_iter().find(|(_, v)| v.is_nan()) {
        return Err(bad(format!("missing value for t_index {i}, node {k}")));
    }
    let support = Array2::from_elem((steps, d), true);
    PolicyField::new(grid, values, support).map_err(|e| bad(e.to_string()))
}

fn report_json(mode: &str, r: &SolveReport) -> Value {
    json!({
        "mode": mode,
        "status": format!("{:?}", r.status),
        "converged": r.converged(),
        "inner_converged": r.inner_converged,
        "iterations": r.objectives.len(),
        "objectives": r.objectives,
        "residuals": r.residuals,
        "step_sizes": r.step_sizes,
        "changes": r.changes,
        "wall_times": r.wall_times,
        "sinkhorn_iterations": r.sinkhorn_iterations,
    })
}

fn status(converged: bool, r: Option<&SolveReport>) -> String {
    match r {
        Some(r) if !r.inner_converged => "InnerNotConverged".into(),
        Some(r) => format!("{:?}", r.status),
        None if converged => "Converged".into(),
        None => "Failed".into(),
    }
}

fn grid_summary(margs: &[&MarginalSet], r: &SolveReport) -> Vec<SummaryRow> {
    margs
        .iter()
        .enumerate()
        .map(|(l, m)| {
            let steps = m.steps();
            let i = steps / 2;
            let p = &m.node[i];
            SummaryRow {
                species: l,
                status: status(r.converged(), Some(r)),
                iterations: Some(r.objectives.len()),
                objective: Some(r.final_objective()),
                mid_t: i as f64 / steps as f64,
                mid_mean: p.mean(),
                mid_variance: p.variance(),
            }
        })
        .collect()
}

fn write_trajectories(dir: &Path, sim: &Simulation) -> Result<(), Failure> {
    let dim = sim.snapshots.first().and_then(|s| s.species.first()).and_then(|a| a.first()).map_or(1, Vec::len);
    let mut names = header(&["t", "species", "agent"]);
    names.extend((0..dim).map(|j| format!("x{j}")));
    let mut w = Csv::create(dir, "trajectories.csv", &names)?;
    for snap in &sim.snapshots {
        for (l, agents) in snap.species.iter().enumerate() {
            for (a, x) in agents.iter().enumerate() {
                let mut row = vec![num(snap.t), l.to_string(), a.to_string()];
                row.extend(x.iter().map(|v| num(*v)));
                w.row(&row)?;
            }
        }
    }
    w.finish()
}

fn stats_json(stats: &[EmpiricalStats]) -> Value {
    Value::Array(
        stats
            .iter()
            .map(|s| {
                json!({
                    "t": s.t,
                    "mean": s.species.iter().map(|m| m.mean.clone()).collect::<Vec<_>>(),
                    "cov": s.species.iter().map(|m| m.cov.clone()).collect::<Vec<_>>(),
                    "w1": s.w1,
                })
            })
            .collect(),
    )
}

fn sim_config(s: &SimulationConfig, control_steps: usize, default_substeps: usize, eps: f64) -> SimConfig {
    SimConfig {
        steps: s.substeps.unwrap_or(default_substeps),
        ..SimConfig::new(s.agents, control_steps, s.seed, eps)
    }
}

/// Simulates the grid closed loop, writing trajectories and statistics.
/// `reference` supplies the solution's node marginals for `W1`.
fn simulate_single(
    dir: &Path,
    p: &GridSingle,
    policy: &PolicyField,
    s: &SimulationConfig,
    reference: Option<&MarginalSet>,
) -> Result<Value, Failure> {
    let steps = p.spec.steps;
    let checkpoints = s
        .checkpoints
        .clone()
        .unwrap_or_else(|| (0..=steps).map(|i| i as f64 / steps as f64).collect());
    let cfg = sim_config(s, steps, 10 * steps, p.spec.eps);
    let sim = simulate_grid(&p.spec, policy, &p.mu, &cfg, &checkpoints).map_err(numerical("simulation"))?;
    let mut stats = Vec::with_capacity(sim.snapshots.len());
    for snap in &sim.snapshots {
        let slice = snap.t * steps as f64;
        let refs = reference
            .filter(|_| (slice - slice.round()).abs() < 1e-9)
            .map(|m| vec![m.node[slice.round() as usize].clone()]);
        stats.push(empirical_stats(snap, refs.as_deref()).map_err(numerical("simulation"))?);
    }
    write_trajectories(dir, &sim)?;
    Ok(stats_json(&stats))
}

fn run_grid_single(cfg: &Config, p: &GridSingle) -> Result<RunOutcome, Failure> {
    let dir = &cfg.output_dir;
    let solver = cfg.proximal()?;
    let r = solve_density_control(&p.spec, &p.mu, &p.nu, &solver).map_err(numerical("proximal solver"))?;
    prepare(dir)?;
    let marg = r.marg(0);
    write_density(dir, &[marg])?;
    let policy = recover_policy(&p.spec, marg).map_err(numerical("policy recovery"))?;
    write_policy(dir, std::slice::from_ref(&policy))?;
    let mut report = report_json("grid_single", &r);
    if let Some(s) = &cfg.simulation {
        report["simulation"] = simulate_single(dir, p, &policy, s, Some(marg))?;
    }
    write_json(dir, "report.json", &report)?;
    Ok(RunOutcome {
        converged: r.converged(),
        summary: grid_summary(&[marg], &r),
    })
}

fn run_grid_multi(cfg: &Config, p: &crate::config::GridMulti) -> Result<RunOutcome, Failure> {
    let dir = &cfg.output_dir;
    let solver = cfg.proximal()?;
    let r = solve_multi(&p.spec, &p.mus, &p.nus, &solver).map_err(numerical("proximal solver"))?;
    prepare(dir)?;
    let margs: Vec<&MarginalSet> = r.margs.iter().collect();
    write_density(dir, &margs)?;
    let policies = (0..p.spec.species())
        .map(|l| recover_policy_multi(&p.spec, &r.margs, l))
        .collect::<Result<Vec<_>, _>>()
        .map_err(numerical("policy recovery"))?;
    write_policy(dir, &policies)?;
    write_json(dir, "report.json", &report_json("grid_multi", &r))?;
    Ok(RunOutcome {
        converged: r.converged(),
        summary: grid_summary(&margs, &r),
    })
}

fn write_lq(dir: &Path, sol: &LqSolution) -> Result<(), Failure> {
    let d = sol.species[0].m[0].len();
    let mut names = header(&["t", "species"]);
    for prefix in ["pi", "sigma"] {
        for a in 0..d {
            for b in 0..d {
                names.push(format!("{prefix}_{a}{b}"));
            }
        }
    }
    names.extend((0..d).map(|a| format!("m_{a}")));
    names.extend((0..d).map(|a| format!("n_{a}")));
    let mut w = Csv::create(dir, "lq.csv", &names)?;
    for (k, t) in sol.mesh.iter().enumerate() {
        for (l, p) in sol.species.iter().enumerate() {
            let mut row = vec![num(*t), l.to_string()];
            for m in [&p.pi[k], &p.sigma[k]] {
                for a in 0..d {
                    for b in 0..d {
                        row.push(num(m[(a, b)]));
                    }
                }
            }
            row.extend(p.m[k].iter().map(|v| num(*v)));
            row.extend(p.n[k].iter().map(|v| num(*v)));
            w.row(&row)?;
        }
    }
    w.finish()
}

fn run_lq(cfg: &Config, p: &LqProblem) -> Result<RunOutcome, Failure> {
    let dir = &cfg.output_dir;
    let sol = solve_lq(&p.spec, p.mesh).map_err(numerical("LQ solver"))?;
    prepare(dir)?;
    write_lq(dir, &sol)?;
    let r = residuals(&p.spec, &sol);
    let mut report = json!({
        "mode": "lq",
        "status": "Converged",
        "converged": true,
        "mesh": p.mesh,
        "residuals": {
            "riccati": r.riccati,
            "lyapunov": r.lyapunov,
            "h_riccati": r.h_riccati,
            "costate": r.costate,
            "mean": r.mean,
            "covariance_boundary": r.covariance_boundary,
            "mean_boundary": r.mean_boundary,
            "identity": r.identity,
        },
    });
    if let Some(s) = &cfg.simulation {
        report["simulation"] = simulate_lq_artifacts(dir, p, &sol, s)?;
    }
    write_json(dir, "report.json", &report)?;
    let summary = (0..p.spec.species())
        .map(|l| {
            let (m, s) = moments_at(&sol, l, 0.5);
            SummaryRow {
                species: l,
                status: "Converged".into(),
                iterations: None,
                objective: None,
                mid_t: 0.5,
                mid_mean: m[0],
                mid_variance: s[(0, 0)],
            }
        })
        .collect();
    Ok(RunOutcome { converged: true, summary })
}

fn simulate_lq_artifacts(dir: &Path, p: &LqProblem, sol: &LqSolution, s: &SimulationConfig) -> Result<Value, Failure> {
    let checkpoints = s.checkpoints.clone().unwrap_or_else(|| vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let cfg = sim_config(s, 1, p.mesh, p.spec.eps);
    let sim = simulate_lq(&p.spec, sol, &cfg, &checkpoints).map_err(numerical("simulation"))?;
    let stats = sim
        .snapshots
        .iter()
        .map(|snap| empirical_stats(snap, None))
        .collect::<Result<Vec<_>, _>>()
        .map_err(numerical("simulation"))?;
    write_trajectories(dir, &sim)?;
    Ok(stats_json(&stats))
}

/// Solves the configured experiment and writes its artifacts.
pub fn run(cfg: &Config) -> Result<RunOutcome, Failure> {
    match cfg.build()? {
        Problem::GridSingle(p) => run_grid_single(cfg, &p),
        Problem::GridMulti(p) => run_grid_multi(cfg, &p),
        Problem::Lq(p) => run_lq(cfg, &p),
    }
}

/// Closed-loop simulation only. Grid runs take the policy from `policy`;
/// LQ runs solve for their feedback first.
pub fn simulate(cfg: &Config, policy: Option<&Path>) -> Result<RunOutcome, Failure> {
    let s = cfg
        .simulation
        .as_ref()
        .ok_or_else(|| Failure::Config("invalid config key `simulation`: required by simulate".into()))?;
    let dir = &cfg.output_dir;
    match cfg.build()? {
        Problem::GridSingle(p) => {
            let path = policy.ok_or_else(|| Failure::Config("simulate needs --policy in grid_single mode".into()))?;
            let field = read_policy(path, &p.spec.grid, p.spec.steps)?;
            prepare(dir)?;
            let stats = simulate_single(dir, &p, &field, s, None)?;
            write_json(dir, "report.json", &json!({"mode": "grid_single", "simulation": stats}))?;
        }
        Problem::Lq(p) => {
            if policy.is_some() {
                return Err(Failure::Config("--policy applies to grid_single mode only".into()));
            }
            let sol = solve_lq(&p.spec, p.mesh).map_err(numerical("LQ solver"))?;
            prepare(dir)?;
            let stats = simulate_lq_artifacts(dir, &p, &sol, s)?;
            write_json(dir, "report.json", &json!({"mode": "lq", "simulation": stats}))?;
        }
        Problem::GridMulti(_) => unreachable!("grid_multi configs reject a simulation block"),
    }
    Ok(RunOutcome {
        converged: true,
        summary: vec![],
    })
}

/// Sets the scalar at dotted path `key` (array indices as plain segments).
pub fn set_param(doc: &mut Value, key: &str, value: f64) -> Result<(), Failure> {
    let pointer = format!("/{}", key.replace('.', "/"));
    let slot = doc
        .pointer_mut(&pointer)
        .ok_or_else(|| Failure::Config(format!("invalid sweep parameter `{key}`: no such key in the config")))?;
    *slot = match slot {
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            if value.fract() != 0.0 {
                return Err(Failure::Config(format!("invalid sweep parameter `{key}`: needs integer values")));
            }
            json!(value as i64)
        }
        Value::Number(_) => json!(value),
        _ => return Err(Failure::Config(format!("invalid sweep parameter `{key}`: not a scalar number"))),
    };
    Ok(())
}

/// Runs the experiment once per value into `<output_dir>/<key>=<value>` and
/// writes `summary.csv` to `output_dir`.
pub fn sweep(doc: &Value, key: &str, values: &[f64]) -> Result<bool, Failure> {
    let base: Config = crate::config::parse_value(doc.clone())?;
    let mut runs = Vec::with_capacity(values.len());
    // validate every variant before computing any of them
    for &v in values {
        let mut d = doc.clone();
        set_param(&mut d, key, v)?;
        let mut cfg = crate::config::parse_value(d)?;
        cfg.output_dir = base.output_dir.join(format!("{key}={v}"));
        cfg.build()?;
        runs.push((v, cfg));
    }
    let mut all = true;
    let mut rows = Vec::new();
    for (v, cfg) in &runs {
        let out = run(cfg)?;
        all &= out.converged;
        rows.extend(out.summary.into_iter().map(|r| (*v, r)));
    }
    prepare(&base.output_dir)?;
    let mut w = Csv::create(
        &base.output_dir,
        "summary.csv",
        &header(&["param", "value", "species", "status", "iterations", "objective", "mid_t", "mid_mean", "mid_variance"]),
    )?;
    for (v, r) in rows {
        w.row(&[
            key.to_string(),
            num(v),
            r.species.to_string(),
            r.status,
            r.iterations.map(|i| i.to_string()).unwrap_or_default(),
            opt_num(r.objective),
            num(r.mid_t),
            num(r.mid_mean),
            num(r.mid_variance),
        ])?;
    }
    w.finish()?;
    Ok(all)
}

//! Euler–Maruyama simulation of the interacting agent system under a fixed
//! feedback, with empirical diagnostics.
//!
//! Each agent owns a ChaCha8 stream selected by its global index, so a run is
//! reproducible for a given seed regardless of thread scheduling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cost::DynamicsSpec;
use crate::error::{invalid, Error, Result};
use crate::grid::{InteractionPotential, ProbVector};
use crate::lq::{lq_policy, LqSolution, LqSpec};
use crate::par;
use crate::policy::PolicyField;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Agents per species.
    pub agents: usize,
    /// Euler substeps over `[0, 1]`.
    pub steps: usize,
    pub seed: u64,
    pub eps: f64,
}

impl SimConfig {
    /// `10·T` substeps.
    pub fn new(agents: usize, control_steps: usize, seed: u64, eps: f64) -> Self {
        Self {
            agents,
            steps: 10 * control_steps,
            seed,
            eps,
        }
    }

    fn validate(&self, control_steps: usize) -> Result<()> {
        if self.agents < 2 {
            return Err(invalid("agents", format!("need at least 2, got {}", self.agents)));
        }
        if self.steps < control_steps.max(1) {
            return Err(invalid(
                "steps",
                format!("need at least {control_steps} substeps, got {}", self.steps),
            ));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(invalid("eps", format!("must be nonnegative, got {}", self.eps)));
        }
        Ok(())
    }
}

/// States of every agent at time `t`: `species[ℓ][agent][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub species: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Sample covariance with `1/N` normalization, row-major `d×d`.
    pub cov: Vec<Vec<f64>>,
}

impl Moments {
    pub fn of(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::EmptySamples);
        }
        let d = samples[0].len();
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![vec![0.0; d]; d];
        for s in samples {
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] += (s[a] - mean[a]) * (s[b] - mean[b]);
                }
            }
        }
        cov.iter_mut().flatten().for_each(|c| *c /= n as f64);
        Ok(Self { mean, cov })
    }

    pub fn variance(&self, dim: usize) -> f64 {
        self.cov[dim][dim]
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(d, d, |a, b| self.cov[a][b])
    }
}

/// Moments of each species at one checkpoint, plus `W1` to a reference
/// density for one-dimensional runs when one is supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalStats {
    pub t: f64,
    pub species: Vec<Moments>,
    pub w1: Option<Vec<f64>>,
}

/// Statistics of a snapshot; `refs[ℓ]` is species `ℓ`'s reference density.
pub fn empirical_stats(snap: &Snapshot, refs: Option<&[ProbVector]>) -> Result<EmpiricalStats> {
    let species = snap.species.iter().map(|s| Moments::of(s)).collect::<Result<Vec<_>>>()?;
    let w1 = match refs {
        None => None,
        Some(r) => {
            if r.len() != snap.species.len() {
                return Err(invalid("refs", "need one reference per species"));
            }
            let mut out = Vec::with_capacity(r.len());
            for (s, p) in snap.species.iter().zip(r) {
                if s.first().is_some_and(|v| v.len() != 1) {
                    return Err(invalid("refs", "W1 is only defined for one-dimensional samples"));
                }
                let xs: Vec<f64> = s.iter().map(|v| v[0]).collect();
                out.push(wasserstein1_1d(&xs, p)?);
            }
            Some(out)
        }
    };
    Ok(EmpiricalStats {
        t: snap.t,
        species,
        w1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub snapshots: Vec<Snapshot>,
}

impl Simulation {
    /// Snapshot nearest to `t`.
    pub fn at(&self, t: f64) -> &Snapshot {
        self.snapshots
            .iter()
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .expect("simulation has at least one snapshot")
    }
}

/// `W1` between the empirical measure of `samples` and `reference`, as
/// `∫|F − G|` over the merged sorted support.
pub fn wasserstein1_1d(samples: &[f64], reference: &ProbVector) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let total = reference.total();
    if total <= 0.0 {
        return Err(invalid("reference", "has zero mass"));
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
        return Err(invalid("samples", format!("contains {x}")));
    }
    let w = 1.0 / samples.len() as f64;
    let mut events: Vec<(f64, f64)> = samples.iter().map(|&x| (x, w)).collect();
    events.extend(
        reference
            .grid()
            .nodes()
            .iter()
            .zip(reference.mass())
            .filter(|(_, m)| **m > 0.0)
            .map(|(&x, m)| (x, -m / total)),
    );
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    let mut diff = 0.0;
    for pair in events.windows(2) {
        diff += pair[0].1;
        acc += diff.abs() * (pair[1].0 - pair[0].0);
    }
    Ok(acc)
}

fn stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Inverse-CDF draw of a node of `p`.
fn draw_node(p: &ProbVector, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random::<f64>() * p.total();
    let mut acc = 0.0;
    let mass = p.mass();
    let last = mass.iter().rposition(|m| *m > 0.0).unwrap_or(0);
    for (k, m) in mass.iter().enumerate() {
        acc += m;
        if u < acc || k == last {
            return p.grid().node(k);
        }
    }
    p.grid().node(last)
}

/// `(1/N) Σ_j ∇W(x_i − x_j)` for every agent, exact over all pairs.
pub fn interaction_field(pot: &InteractionPotential, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if pot.is_inert() {
        return vec![0.0; n];
    }
    if let InteractionPotential::Quadratic { kappa } = *pot {
        let mean = x.iter().sum::<f64>() / n as f64;
        return x.iter().map(|xi| kappa * (xi - mean)).collect();
    }
    par::map_range(n, |i| {
        let xi = x[i];
        x.iter().map(|xj| pot.grad(xi - xj)).sum::<f64>() / n as f64
    })
}

fn checkpoint_steps(checkpoints: &[f64], steps: usize) -> Result<Vec<usize>> {
    checkpoints
        .iter()
        .map(|&t| {
            if (0.0..=1.0).contains(&t) {
                Ok((t * steps as f64).round() as usize)
            } else {
                Err(invalid("checkpoints", format!("time {t} outside [0, 1]")))
            }
        })
        .collect()
}

/// Agents start from `mu` and follow
/// `dX = (−(1/N)Σ_j ∇W(X − X_j) + b(X) + ξ(t, X)) dt + √ε dB`, with `ξ` held
/// fixed over each control interval.
pub fn simulate_grid(
    spec: &DynamicsSpec,
    policy: &PolicyField,
    mu: &ProbVector,
    cfg: &SimConfig,
    checkpoints: &[f64],
) -> Result<Simulation> {
    cfg.validate(policy.steps())?;
    spec.grid.ensure_same(mu.grid())?;
    spec.grid.ensure_same(policy.grid())?;
    let marks = checkpoint_steps(checkpoints, cfg.steps)?;
    let n = cfg.agents;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| stream(cfg.seed, i)).collect();
    let mut x: Vec<f64> = rngs.iter_mut().map(|r| draw_node(mu, r)).collect();
    let dt = 1.0 / cfg.steps as f64;
    let noise = (cfg.eps * dt).sqrt();
    let snap = |k: usize, x: &[f64]| Snapshot {
        t: k as f64 * dt,
        species: vec![x.iter().map(|v| vec![*v]).collect()],
    };
    let mut snapshots = Vec::new();
    for k in 0..=cfg.steps {
        for _ in marks.iter().filter(|&&m| m == k) {
            snapshots.push(snap(k, &x));
        }
        if k == cfg.steps {
            break;
        }
        let slice = policy.interval(k as f64 * dt);
        let field = interaction_field(&spec.pot, &x);
        let mut agents: Vec<(f64, &mut ChaCha8Rng)> = x.iter().copied().zip(rngs.iter_mut()).collect();
        par::for_each_mut(&mut agents, |i, (xi, rng)| {
            let drift = -field[i] + spec.drift.eval(*xi) + policy.eval_slice(slice, *xi);
            let z: f64 = rng.sample(StandardNormal);
            *xi += drift * dt + noise * z;
        });
        for (dst, (v, _)) in x.iter_mut().zip(agents) {
            *dst = v;
        }
    }
    Ok(Simulation { snapshots })
}

/// Species `ℓ` starts from `N(m⁰_ℓ, Σ⁰_ℓ)` and follows
/// `dX = (A_ℓX − Σ_m Ā_{ℓm}(X − X̄_m) + σu) dt + √ε σ dB` with the affine LQ
/// feedback `u` and `X̄_m` the current empirical mean of species `m`.
pub fn simulate_lq(spec: &LqSpec, sol: &LqSolution, cfg: &SimConfig, checkpoints: &[f64]) -> Result<Simulation> {
    cfg.validate(1)?;
    let marks = checkpoint_steps(checkpoints, cfg.steps)?;
    let l = spec.species();
    let d = spec.dim();
    let n = cfg.agents;
    let chol: Vec<DMatrix<f64>> = spec
        .endpoints
        .iter()
        .map(|e| e.s0.clone().cholesky().expect("validated SPD").l())
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..l * n).map(|i| stream(cfg.seed, i)).collect();
    let mut x: Vec<DVector<f64>> = rngs
        .iter_mut()
        .enumerate()
        .map(|(i, r)| {
            let s = i / n;
            let z = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
            &spec.endpoints[s].m0 + &chol[s] * z
        })
        .collect();
    let dt = 1.0 / cfg.steps as f64;
    let noise = (cfg.eps * dt).sqrt();
    let p = spec.sigma.ncols();
    let snap = |k: usize, x: &[DVector<f64>]| Snapshot {
        t: k as f64 * dt,
        species: (0..l)
            .map(|s| x[s * n..(s + 1) * n].iter().map(|v| v.iter().copied().collect()).collect())
            .collect(),
    };
    let mut snapshots = Vec::new();
    for k in 0..=cfg.steps {
        for _ in marks.iter().filter(|&&m| m == k) {
            snapshots.push(snap(k, &x));
        }
        if k == cfg.steps {
            break;
        }
        let t = k as f64 * dt;
        let means: Vec<DVector<f64>> = (0..l)
            .map(|s| x[s * n..(s + 1) * n].iter().fold(DVector::zeros(d), |a, v| a + v) / n as f64)
            .collect();
        let mut agents: Vec<(&mut DVector<f64>, &mut ChaCha8Rng)> = x.iter_mut().zip(rngs.iter_mut()).collect();
        let step = |i: usize, (xi, rng): &mut (&mut DVector<f64>, &mut ChaCha8Rng)| -> Result<()> {
            let s = i / n;
            let mut drift = &spec.a[s] * &**xi;
            for (m, mean) in means.iter().enumerate() {
                drift -= &spec.abar[s][m] * (&**xi - mean);
            }
            drift += &spec.sigma * lq_policy(sol, spec, s, t, &**xi)?;
            let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
            **xi += drift * dt + &spec.sigma * z * noise;
            Ok(())
        };
        let failed = std::sync::Mutex::new(None);
        par::for_each_mut(&mut agents, |i, a| {
            if let Err(e) = step(i, a) {
                *failed.lock().unwrap() = Some(e);
            }
        });
        if let Some(e) = failed.into_inner().unwrap() {
            return Err(e);
        }
    }
    Ok(Simulation { snapshots })
}

//! Linear-quadratic density control: Gaussian endpoints, linear drifts
//! `A_ℓ x`, quadratic interactions `½ xᵀĀ_{ℓm}x` and state costs `½ xᵀQ_ℓx`.
//!
//! The optimal density stays Gaussian and the control is the affine feedback
//! `u = σᵀ(−Π_ℓ(t) x + n_ℓ(t))`. `Π_ℓ` and `Σ_ℓ` solve a Riccati/Lyapunov pair
//! with split boundary data, one species at a time; `n_ℓ` and the means `m_ℓ`
//! then solve a coupled linear two-point problem.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::par;

pub const DEFAULT_MESH: usize = 400;

const NEWTON_MAX_ITERS: usize = 100;
const BOUNDARY_TOL: f64 = 1e-8;

/// `N(m⁰, Σ⁰) → N(m¹, Σ¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEndpoints {
    pub m0: DVector<f64>,
    pub s0: DMatrix<f64>,
    pub m1: DVector<f64>,
    pub s1: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LqSpec {
    pub a: Vec<DMatrix<f64>>,
    /// `abar[ℓ][m] = Ā_{ℓm}`.
    pub abar: Vec<Vec<DMatrix<f64>>>,
    /// Input matrix, `d × p`.
    pub sigma: DMatrix<f64>,
    pub q: Vec<DMatrix<f64>>,
    pub eps: f64,
    pub endpoints: Vec<GaussianEndpoints>,
}

fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    (m - m.transpose()).abs().max() <= tol
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    is_symmetric(m, 1e-12 * (1.0 + m.abs().max())) && m.clone().cholesky().is_some()
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

impl LqSpec {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        abar: Vec<Vec<DMatrix<f64>>>,
        sigma: DMatrix<f64>,
        q: Vec<DMatrix<f64>>,
        eps: f64,
        endpoints: Vec<GaussianEndpoints>,
    ) -> Result<Self> {
        let spec = Self {
            a,
            abar,
            sigma,
            q,
            eps,
            endpoints,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn species(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// `σσᵀ`.
    pub fn b(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }

    /// `A_ℓ − Σ_m Ā_{ℓm}`.
    pub fn a_cl(&self, l: usize) -> DMatrix<f64> {
        let mut m = self.a[l].clone();
        for ab in &self.abar[l] {
            m -= ab;
        }
        m
    }

    /// Species `ℓ` alone: its own self-interaction, no cross terms.
    pub fn single(&self, l: usize) -> Result<LqSpec> {
        LqSpec::new(
            vec![self.a[l].clone()],
            vec![vec![self.abar[l][l].clone()]],
            self.sigma.clone(),
            vec![self.q[l].clone()],
            self.eps,
            vec![self.endpoints[l].clone()],
        )
    }

    fn validate(&self) -> Result<()> {
        let l = self.a.len();
        let d = self.sigma.nrows();
        if l == 0 || d == 0 || self.sigma.ncols() == 0 {
            return Err(invalid("A/sigma", "need at least one species and a nonempty input matrix"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid("eps", format!("must be positive, got {}", self.eps)));
        }
        let square = |m: &DMatrix<f64>| m.nrows() == d && m.ncols() == d;
        if !self.a.iter().all(square) {
            return Err(invalid("A", format!("every A must be {d}x{d}")));
        }
        if self.q.len() != l || !self.q.iter().all(square) {
            return Err(invalid("Q", format!("need {l} matrices of size {d}x{d}")));
        }
        for (i, q) in self.q.iter().enumerate() {
            if !is_symmetric(q, 1e-12) || q.clone().symmetric_eigenvalues().min() < -1e-12 {
                return Err(invalid("Q", format!("Q[{i}] must be symmetric positive semidefinite")));
            }
        }
        if self.abar.len() != l || self.abar.iter().any(|r| r.len() != l || !r.iter().all(square)) {
            return Err(invalid("Abar", format!("need {l}x{l} blocks of size {d}x{d}")));
        }
        for i in 0..l {
            for j in 0..l {
                let m = &self.abar[i][j];
                if !is_symmetric(m, 1e-12) {
                    return Err(invalid("Abar", format!("Abar[{i}][{j}] is not symmetric")));
                }
                if (m - &self.abar[j][i]).abs().max() > 1e-12 {
                    return Err(invalid("Abar", format!("Abar[{i}][{j}] differs from Abar[{j}][{i}]")));
                }
            }
        }
        if self.endpoints.len() != l {
            return Err(invalid("endpoints", format!("need {l} endpoint pairs")));
        }
        for (i, e) in self.endpoints.iter().enumerate() {
            if e.m0.len() != d || e.m1.len() != d || !square(&e.s0) || !square(&e.s1) {
                return Err(invalid("endpoints", format!("species {i} has wrong dimensions")));
            }
            if !is_spd(&e.s0) || !is_spd(&e.s1) {
                return Err(invalid("endpoints", format!("species {i} covariances must be SPD")));
            }
        }
        for i in 0..l {
            if !controllable(&self.a_cl(i), &self.sigma) {
                return Err(invalid("A/sigma", format!("species {i} is not controllable")));
            }
        }
        Ok(())
    }
}

/// Kalman rank test with singular-value cutoff `1e-10·σ_max`.
pub fn controllable(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> bool {
    let d = a.nrows();
    let p = sigma.ncols();
    let mut k = DMatrix::zeros(d, d * p);
    let mut block = sigma.clone();
    for j in 0..d {
        k.view_mut((0, j * p), (d, p)).copy_from(&block);
        block = a * block;
    }
    let sv = k.singular_values();
    let cut = 1e-10 * sv.max();
    sv.iter().filter(|s| **s > cut).count() == d
}

/// Per-species trajectories on the mesh `t_k = k/K`.
#[derive(Debug, Clone)]
pub struct SpeciesPath {
    pub pi: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    pub n: Vec<DVector<f64>>,
    pub m: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct CovariancePath {
    pub pi: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    /// Spectral-norm mismatch `‖Σ(1) − Σ¹‖` reached by the boundary matching.
    pub boundary_error: f64,
}

#[derive(Debug, Clone)]
pub struct LqSolution {
    pub mesh: Vec<f64>,
    pub species: Vec<SpeciesPath>,
}

impl LqSolution {
    pub fn steps(&self) -> usize {
        self.mesh.len() - 1
    }
}

fn riccati_rhs(p: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    p * b * p - q - a.transpose() * p - p * a
}

fn h_rhs(h: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    -(h * b * h) + q - a.transpose() * h - h * a
}

fn lyapunov_rhs(s: &DMatrix<f64>, p: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let at = a - b * p;
    &at * s + s * at.transpose() + b * eps
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// One classical RK4 step for `ẏ = f(y)` on a tuple of matrices.
fn rk4<F>(y: &[DMatrix<f64>], h: f64, f: F) -> Vec<DMatrix<f64>>
where
    F: Fn(&[DMatrix<f64>]) -> Vec<DMatrix<f64>>,
{
    let axpy = |y: &[DMatrix<f64>], k: &[DMatrix<f64>], s: f64| -> Vec<DMatrix<f64>> {
        y.iter().zip(k).map(|(a, b)| a + b * s).collect()
    };
    let k1 = f(y);
    let k2 = f(&axpy(y, &k1, h / 2.0));
    let k3 = f(&axpy(y, &k2, h / 2.0));
    let k4 = f(&axpy(y, &k3, h));
    (0..y.len())
        .map(|i| &y[i] + (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (h / 6.0))
        .collect()
}

struct Species<'a> {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: &'a DMatrix<f64>,
    eps: f64,
    s0: &'a DMatrix<f64>,
    s1: &'a DMatrix<f64>,
}

impl Species<'_> {
    /// RK4 of `(Π, Σ)` from `(Π₀, Σ⁰)`; `None` on blow-up.
    fn integrate(&self, pi0: &DMatrix<f64>, steps: usize) -> Option<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
        let h = 1.0 / steps as f64;
        let mut pis = vec![pi0.clone()];
        let mut sig = vec![self.s0.clone()];
        let mut y = vec![pi0.clone(), self.s0.clone()];
        for _ in 0..steps {
            y = rk4(&y, h, |y| {
                vec![
                    riccati_rhs(&y[0], &self.a, &self.b, self.q),
                    lyapunov_rhs(&y[1], &y[0], &self.a, &self.b, self.eps),
                ]
            });
            y = y.into_iter().map(symmetrize).collect();
            if !y.iter().all(|m| m.iter().all(|v| v.is_finite() && v.abs() < 1e12)) {
                return None;
            }
            pis.push(y[0].clone());
            sig.push(y[1].clone());
        }
        Some((pis, sig))
    }

    fn integrate_h(&self, h0: &DMatrix<f64>, steps: usize) -> Vec<DMatrix<f64>> {
        let dt = 1.0 / steps as f64;
        let mut out = vec![h0.clone()];
        let mut y = vec![h0.clone()];
        for _ in 0..steps {
            y = rk4(&y, dt, |y| vec![h_rhs(&y[0], &self.a, &self.b, self.q)]);
            y[0] = symmetrize(y[0].clone());
            out.push(y[0].clone());
        }
        out
    }

    /// `Σ(1)` as an algebraic function of `Π₀` through the Hamiltonian flow
    /// `Φ` of `[[A, −B], [−Q, −Aᵀ]]`: with `X = Φ₁₁ + Φ₁₂Π₀` the transition
    /// matrix of the closed loop, `Σ(1) = X(1)[Σ⁰ + ε∫X⁻¹BX⁻ᵀ]X(1)ᵀ`.
    fn algebraic_terminal(&self, flow: &[DMatrix<f64>], pi0: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let d = self.a.nrows();
        let k = flow.len() - 1;
        let h = 1.0 / k as f64;
        let mut integral = DMatrix::zeros(d, d);
        let mut x_end = None;
        for (j, phi) in flow.iter().enumerate() {
            let x = phi.view((0, 0), (d, d)) + phi.view((0, d), (d, d)) * pi0;
            let xi = x.clone().try_inverse()?;
            let w = if j == 0 || j == k {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            };
            integral += &xi * &self.b * xi.transpose() * (w * h / 3.0);
            if j == k {
                x_end = Some(x);
            }
        }
        let x = x_end?;
        let s = &x * (self.s0 + integral * self.eps) * x.transpose();
        s.iter().all(|v| v.is_finite()).then(|| symmetrize(s))
    }

    fn hamiltonian_flow(&self, steps: usize) -> Vec<DMatrix<f64>> {
        let d = self.a.nrows();
        let mut ham = DMatrix::zeros(2 * d, 2 * d);
        ham.view_mut((0, 0), (d, d)).copy_from(&self.a);
        ham.view_mut((0, d), (d, d)).copy_from(&(-&self.b));
        ham.view_mut((d, 0), (d, d)).copy_from(&(-self.q));
        ham.view_mut((d, d), (d, d)).copy_from(&(-self.a.transpose()));
        let h = 1.0 / steps as f64;
        let mut out = vec![DMatrix::identity(2 * d, 2 * d)];
        for _ in 0..steps {
            let y = rk4(&out[out.len() - 1..], h, |y| vec![&ham * &y[0]]);
            out.push(y.into_iter().next().unwrap());
        }
        out
    }
}

fn vech_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Upper triangle with off-diagonals weighted by √2, so `‖vech‖ = ‖·‖_F`.
fn vech(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut v = Vec::with_capacity(vech_len(d));
    for i in 0..d {
        for j in i..d {
            v.push(if i == j { m[(i, j)] } else { m[(i, j)] * std::f64::consts::SQRT_2 });
        }
    }
    DVector::from_vec(v)
}

fn unvech(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            let x = if i == j { v[k] } else { v[k] / std::f64::consts::SQRT_2 };
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    m
}

/// Damped Newton with a forward-difference Jacobian on `r(p) = 0`.
fn newton<F>(p0: DVector<f64>, tol: f64, r: F) -> Option<(DVector<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut p = p0;
    let mut res = r(&p)?;
    let n = p.len();
    for _ in 0..NEWTON_MAX_ITERS {
        let norm = res.norm();
        if norm < tol {
            return Some((p, norm));
        }
        let mut jac = DMatrix::zeros(res.len(), n);
        for j in 0..n {
            let step = 1e-7 * (1.0 + p[j].abs());
            let mut q = p.clone();
            q[j] += step;
            let rq = r(&q)?;
            jac.set_column(j, &((rq - &res) / step));
        }
        let dp = jac.lu().solve(&(-&res))?;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &p + &dp * t;
            if let Some(rc) = r(&cand) {
                if rc.norm() < norm {
                    p = cand;
                    res = rc;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            return Some((p, norm));
        }
    }
    let norm = res.norm();
    Some((p, norm))
}

/// `Π_ℓ`, `H_ℓ`, `Σ_ℓ` on a uniform mesh of `steps` RK4 steps.
pub fn solve_covariance(spec: &LqSpec, l: usize, steps: usize) -> Result<CovariancePath> {
    if l >= spec.species() {
        return Err(invalid("species", format!("index {l} out of range")));
    }
    if steps < 4 || steps % 2 == 1 {
        return Err(invalid("mesh", "need an even number of at least 4 steps"));
    }
    let e = &spec.endpoints[l];
    let sp = Species {
        a: spec.a_cl(l),
        b: spec.b(),
        q: &spec.q[l],
        eps: spec.eps,
        s0: &e.s0,
        s1: &e.s1,
    };
    let d = spec.dim();
    let scale = 1.0 + spectral_norm(&e.s1);
    let s0_inv = e.s0.clone().try_inverse().expect("SPD endpoint");

    // algebraic boundary map, started from a few splits of εΣ⁰⁻¹
    let flow = sp.hamiltonian_flow(steps);
    let algebraic = |p: &DVector<f64>| sp.algebraic_terminal(&flow, &unvech(p, d)).map(|s| vech(&(s - sp.s1)));
    let starts = [0.0, 0.5, -0.5, 1.0];
    let mut best: Option<(DVector<f64>, f64)> = None;
    for c in starts {
        if let Some((p, r)) = newton(vech(&(&s0_inv * (c * spec.eps))), 1e-13 * scale, &algebraic) {
            if best.as_ref().is_none_or(|b| r < b.1) {
                best = Some((p, r));
            }
            if r < 1e-10 * scale {
                break;
            }
        }
    }
    let (p, _) = best.ok_or(Error::NonConvergence {
        iterations: NEWTON_MAX_ITERS,
        mismatch: f64::INFINITY,
    })?;

    // polish against the RK4 trajectory that is reported
    let direct = |p: &DVector<f64>| sp.integrate(&unvech(p, d), steps).map(|(_, s)| vech(&(s[steps].clone() - sp.s1)));
    let (p, _) = newton(p, 1e-13 * scale, &direct).ok_or(Error::NonConvergence {
        iterations: NEWTON_MAX_ITERS,
        mismatch: f64::INFINITY,
    })?;
    let pi0 = unvech(&p, d);
    let (pi, sigma) = sp.integrate(&pi0, steps).ok_or(Error::NonConvergence {
        iterations: NEWTON_MAX_ITERS,
        mismatch: f64::INFINITY,
    })?;
    let boundary_error = spectral_norm(&(&sigma[steps] - sp.s1));
    if boundary_error > BOUNDARY_TOL {
        return Err(Error::NonConvergence {
            iterations: NEWTON_MAX_ITERS,
            mismatch: boundary_error,
        });
    }
    for (k, s) in sigma.iter().enumerate() {
        if s.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite {
                index: k,
                t: k as f64 / steps as f64,
            });
        }
    }
    let h0 = &s0_inv * spec.eps - &pi0;
    let h = sp.integrate_h(&h0, steps);
    Ok(CovariancePath {
        pi,
        h,
        sigma,
        boundary_error,
    })
}

/// Stacked `(n₁..n_L, m₁..m_L)` dynamics at given `Π_ℓ`.
fn mean_generator(spec: &LqSpec, pis: &[DMatrix<f64>]) -> DMatrix<f64> {
    let l = spec.species();
    let d = spec.dim();
    let b = spec.b();
    let mut g = DMatrix::zeros(2 * l * d, 2 * l * d);
    let n_at = |i: usize| i * d;
    let m_at = |i: usize| (l + i) * d;
    for i in 0..l {
        let at = spec.a_cl(i) - &b * &pis[i];
        // ṅ_ℓ = −Ãᵀn_ℓ − Σ Ā_ℓm n_m + Σ (Π_ℓĀ_ℓm + Ā_ℓmΠ_m) m_m
        let mut blk = g.view_mut((n_at(i), n_at(i)), (d, d));
        blk -= at.transpose();
        for j in 0..l {
            let ab = &spec.abar[i][j];
            let mut blk = g.view_mut((n_at(i), n_at(j)), (d, d));
            blk -= ab;
            let mut blk = g.view_mut((n_at(i), m_at(j)), (d, d));
            blk += &pis[i] * ab + ab * &pis[j];
        }
        // ṁ_ℓ = Ãm_ℓ + Σ Ā_ℓm m_m + B n_ℓ
        let mut blk = g.view_mut((m_at(i), m_at(i)), (d, d));
        blk += &at;
        for j in 0..l {
            let mut blk = g.view_mut((m_at(i), m_at(j)), (d, d));
            blk += &spec.abar[i][j];
        }
        let mut blk = g.view_mut((m_at(i), n_at(i)), (d, d));
        blk += &b;
    }
    g
}

/// RK4 of `Ẏ = G(Π(t)) Y` with every `Π_ℓ` co-integrated from `Π_ℓ(0)`, so
/// that the stages see the same `Π` as the covariance solve.
fn integrate_means(spec: &LqSpec, pi0: &[DMatrix<f64>], y0: DMatrix<f64>, steps: usize) -> Vec<DMatrix<f64>> {
    let l = spec.species();
    let b = spec.b();
    let a: Vec<DMatrix<f64>> = (0..l).map(|i| spec.a_cl(i)).collect();
    let h = 1.0 / steps as f64;
    let mut state: Vec<DMatrix<f64>> = pi0.to_vec();
    state.push(y0);
    let mut out = vec![state[l].clone()];
    for _ in 0..steps {
        state = rk4(&state, h, |s| {
            let mut ds: Vec<DMatrix<f64>> = (0..l).map(|i| riccati_rhs(&s[i], &a[i], &b, &spec.q[i])).collect();
            ds.push(mean_generator(spec, &s[..l]) * &s[l]);
            ds
        });
        for p in state.iter_mut().take(l) {
            *p = symmetrize(p.clone());
        }
        out.push(state[l].clone());
    }
    out
}

/// `n_ℓ`, `m_ℓ` for all species from the covariance-stage `Π_ℓ(0)`.
pub fn solve_means(
    spec: &LqSpec,
    covs: &[CovariancePath],
    steps: usize,
) -> Result<Vec<(Vec<DVector<f64>>, Vec<DVector<f64>>)>> {
    let l = spec.species();
    let d = spec.dim();
    let size = l * d;
    let pi0: Vec<DMatrix<f64>> = covs.iter().map(|c| c.pi[0].clone()).collect();

    let psi = integrate_means(spec, &pi0, DMatrix::identity(2 * size, 2 * size), steps);
    let end = &psi[steps];
    let psi_mn = end.view((size, 0), (size, size)).into_owned();
    let psi_mm = end.view((size, size), (size, size)).into_owned();
    let mut m0 = DVector::zeros(size);
    let mut m1 = DVector::zeros(size);
    for (i, e) in spec.endpoints.iter().enumerate() {
        m0.rows_mut(i * d, d).copy_from(&e.m0);
        m1.rows_mut(i * d, d).copy_from(&e.m1);
    }
    let sv = psi_mn.singular_values();
    if sv.min() <= 1e-12 * sv.max().max(1.0) {
        return Err(Error::SingularBoundaryMap(format!(
            "mean boundary map has condition {:.3e}",
            sv.max() / sv.min()
        )));
    }
    let lu = psi_mn.lu();
    let rhs = &m1 - &psi_mm * &m0;
    let mut n0 = lu.solve(&rhs).ok_or_else(|| Error::SingularBoundaryMap("LU solve failed".into()))?;

    let run = |n0: &DVector<f64>| {
        let mut z0 = DMatrix::zeros(2 * size, 1);
        z0.view_mut((0, 0), (size, 1)).copy_from(n0);
        z0.view_mut((size, 0), (size, 1)).copy_from(&m0);
        integrate_means(spec, &pi0, z0, steps)
    };
    let mut traj = run(&n0);
    // one refinement pass against the integrated endpoint
    let miss: DVector<f64> = &m1 - traj[steps].view((size, 0), (size, 1));
    if miss.amax() > 0.0 {
        if let Some(dn) = lu.solve(&miss) {
            n0 += dn;
            traj = run(&n0);
        }
    }
    let mismatch = (&m1 - traj[steps].view((size, 0), (size, 1))).amax();
    if !(mismatch < BOUNDARY_TOL) {
        return Err(Error::NonConvergence {
            iterations: 2,
            mismatch,
        });
    }
    Ok((0..l)
        .map(|i| {
            let n = traj.iter().map(|z| z.view((i * d, 0), (d, 1)).into_owned().column(0).into_owned()).collect();
            let m = traj
                .iter()
                .map(|z| z.view((size + i * d, 0), (d, 1)).into_owned().column(0).into_owned())
                .collect();
            (n, m)
        })
        .collect())
}

/// Full LQ solution on a `steps`-interval mesh.
pub fn solve_lq(spec: &LqSpec, steps: usize) -> Result<LqSolution> {
    let covs = par::map_range(spec.species(), |l| solve_covariance(spec, l, steps))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let means = solve_means(spec, &covs, steps)?;
    let species = covs
        .into_iter()
        .zip(means)
        .map(|(c, (n, m))| SpeciesPath {
            pi: c.pi,
            h: c.h,
            sigma: c.sigma,
            n,
            m,
        })
        .collect();
    Ok(LqSolution {
        mesh: (0..=steps).map(|k| k as f64 / steps as f64).collect(),
        species,
    })
}

fn lerp_index(sol: &LqSolution, t: f64) -> (usize, f64) {
    let k = sol.steps();
    let s = t * k as f64;
    let i = (s.floor() as usize).min(k - 1);
    (i, s - i as f64)
}

/// `u = σᵀ(−Π_ℓ(t)x + n_ℓ(t))`, with `Π` and `n` linear in `t` between mesh points.
pub fn lq_policy(sol: &LqSolution, spec: &LqSpec, l: usize, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid("t", format!("must lie in [0, 1], got {t}")));
    }
    let p = &sol.species[l];
    let (i, w) = lerp_index(sol, t);
    let pi = &p.pi[i] * (1.0 - w) + &p.pi[i + 1] * w;
    let n = &p.n[i] * (1.0 - w) + &p.n[i + 1] * w;
    Ok(spec.sigma.transpose() * (-(pi * x) + n))
}

/// Mean and covariance of species `ℓ` at time `t`, linear between mesh points.
pub fn moments_at(sol: &LqSolution, l: usize, t: f64) -> (DVector<f64>, DMatrix<f64>) {
    let p = &sol.species[l];
    let (i, w) = lerp_index(sol, t.clamp(0.0, 1.0));
    (
        &p.m[i] * (1.0 - w) + &p.m[i + 1] * w,
        &p.sigma[i] * (1.0 - w) + &p.sigma[i + 1] * w,
    )
}

/// Simpson defect of `ẏ = f(y)` over the window `[t_{k−1}, t_{k+1}]`:
/// `‖y_{k+1} − y_{k−1} − (h/3)(f_{k−1} + 4f_k + f_{k+1})‖ / 2h`, relative to
/// `1 + max ‖f‖` on the window.
fn window_defect<T, N>(y: &[T], f: &[T], h: f64, norm: N) -> f64
where
    T: Clone + std::ops::Sub<Output = T> + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    N: Fn(&T) -> f64,
{
    (1..y.len() - 1)
        .map(|k| {
            let quad = (f[k - 1].clone() + f[k].clone() * 4.0 + f[k + 1].clone()) * (h / 3.0);
            let d = y[k + 1].clone() - y[k - 1].clone() - quad;
            let scale = 1.0 + norm(&f[k - 1]).max(norm(&f[k])).max(norm(&f[k + 1]));
            norm(&d) / (2.0 * h * scale)
        })
        .fold(0.0, f64::max)
}

/// Largest violations of the optimality system on the mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqResiduals {
    pub riccati: f64,
    pub lyapunov: f64,
    pub h_riccati: f64,
    pub costate: f64,
    pub mean: f64,
    pub covariance_boundary: f64,
    pub mean_boundary: f64,
    /// `max ‖εΣ⁻¹ − Π − H‖`.
    pub identity: f64,
}

impl LqResiduals {
    /// Largest differential-equation residual.
    pub fn ode(&self) -> f64 {
        self.riccati.max(self.lyapunov).max(self.h_riccati).max(self.costate).max(self.mean)
    }
}

/// ODE residuals are relative Simpson defects; spectral norms for matrices and
/// max norms for vectors throughout.
pub fn residuals(spec: &LqSpec, sol: &LqSolution) -> LqResiduals {
    let k = sol.steps();
    let h = 1.0 / k as f64;
    let b = spec.b();
    let l = spec.species();
    let mut r = LqResiduals {
        riccati: 0.0,
        lyapunov: 0.0,
        h_riccati: 0.0,
        costate: 0.0,
        mean: 0.0,
        covariance_boundary: 0.0,
        mean_boundary: 0.0,
        identity: 0.0,
    };
    let pis_at = |j: usize| -> Vec<DMatrix<f64>> { sol.species.iter().map(|p| p.pi[j].clone()).collect() };
    for (i, p) in sol.species.iter().enumerate() {
        let a = spec.a_cl(i);
        let e = &spec.endpoints[i];
        r.covariance_boundary = r
            .covariance_boundary
            .max(spectral_norm(&(&p.sigma[0] - &e.s0)))
            .max(spectral_norm(&(&p.sigma[k] - &e.s1)));
        r.mean_boundary = r.mean_boundary.max((&p.m[0] - &e.m0).amax()).max((&p.m[k] - &e.m1).amax());
        let fp: Vec<_> = p.pi.iter().map(|x| riccati_rhs(x, &a, &b, &spec.q[i])).collect();
        r.riccati = r.riccati.max(window_defect(&p.pi, &fp, h, spectral_norm));
        let fs: Vec<_> = (0..=k).map(|j| lyapunov_rhs(&p.sigma[j], &p.pi[j], &a, &b, spec.eps)).collect();
        r.lyapunov = r.lyapunov.max(window_defect(&p.sigma, &fs, h, spectral_norm));
        let fh: Vec<_> = p.h.iter().map(|x| h_rhs(x, &a, &b, &spec.q[i])).collect();
        r.h_riccati = r.h_riccati.max(window_defect(&p.h, &fh, h, spectral_norm));
        for j in 0..=k {
            let inv = p.sigma[j].clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(1, 1, f64::NAN));
            r.identity = r.identity.max(spectral_norm(&(inv * spec.eps - &p.pi[j] - &p.h[j])));
        }
    }
    let d = spec.dim();
    let stacked: Vec<DVector<f64>> = (0..=k)
        .map(|j| {
            let mut z = DVector::zeros(2 * l * d);
            for (i, p) in sol.species.iter().enumerate() {
                z.rows_mut(i * d, d).copy_from(&p.n[j]);
                z.rows_mut((l + i) * d, d).copy_from(&p.m[j]);
            }
            z
        })
        .collect();
    let rhs: Vec<DVector<f64>> = (0..=k).map(|j| mean_generator(spec, &pis_at(j)) * &stacked[j]).collect();
    let split = |part: usize| -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let take = |v: &DVector<f64>| v.rows(part * l * d, l * d).into_owned();
        (stacked.iter().map(take).collect(), rhs.iter().map(take).collect())
    };
    let (ny, nf) = split(0);
    r.costate = window_defect(&ny, &nf, h, |v| v.amax());
    let (my, mf) = split(1);
    r.mean = window_defect(&my, &mf, h, |v| v.amax());
    r
}

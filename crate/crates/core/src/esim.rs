//! Potential Jacobians and the empirical Sinkhorn information matrix.
//!
//! For an OT term between `ᾱ_θ = T_θ♯μ̄` and a second measure `β` (fixed, or
//! `ᾱ_θ` itself for the self term), the value is `max_f H̄₁(f, θ)` with
//!
//! ```text
//! H̄₁(f, θ) = ⟨f, w⟩ + Σⱼ vⱼ Ā(f, ᾱ_θ)(yⱼ).
//! ```
//!
//! Its Hessian in `θ` at the maximizer is
//! `Jᵀ ∇₁₁H̄₁ J + Jᵀ ∇₁₂H̄₁ + ∇₁₂H̄₁ᵀ J + ∇₂₂H̄₁` where `J = ∂f_θ/∂θ` solves the
//! fixed point `J = J₁Ē·J + J₂Ē` of `Ē = B̄ˡ`.
//!
//! All blocks are first assembled in point space (coordinates of the support
//! points of both marginals) and then pulled back through the stacked model
//! Jacobian `Φ`. Second derivatives of the model enter only through
//! contractions `∇²_θ(G · T_θ(z))` with the point-space gradient `G`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{DiscreteMeasure, GroundCost};
use crate::pushforward::{LatentSample, PushforwardModel};
use crate::sinkhorn::{solve_symmetric_with_operator, solve_with_operator, SinkhornConfig, SinkhornOperator, SinkhornSolution};

/// Dense assembly up to this many parameters; matrix-free beyond.
/// Largest support size for which [`JacobianSolver::Auto`] starts with the
/// dense solve.
pub const DIRECT_MAX_POINTS: usize = 1024;

pub const EXPLICIT_MAX_PARAMS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EsimMode {
    Explicit,
    MatrixFree,
    /// Explicit when `d ≤ EXPLICIT_MAX_PARAMS`.
    Auto,
}

/// How the potential-Jacobian fixed point is solved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianSolver {
    /// Sweeps `J ← J₁Ē J + J₂Ē` until the change is below `jac_tol`.
    FixedPoint,
    /// Dense solve of the gauge-fixed fixed-point equation.
    Direct,
    /// Dense solve first when `n ≤ DIRECT_MAX_POINTS`, otherwise at most
    /// `auto_sweeps` sweeps and then the dense solve. Sweeps refine a dense
    /// solution that misses `jac_tol`.
    Auto,
}

#[derive(Clone, Debug)]
pub struct EsimConfig {
    /// Solver settings; `sinkhorn.gamma` is the SIM regularization.
    pub sinkhorn: SinkhornConfig,
    /// Max-entry change tolerance of the potential-Jacobian iteration.
    pub jac_tol: f64,
    pub jac_max_iters: usize,
    pub jac_solver: JacobianSolver,
    pub auto_sweeps: usize,
    /// Number of `B̄` compositions per Jacobian sweep. `None` derives it from
    /// the declared cost bound, or uses 1 when no bound is declared.
    pub compositions: Option<usize>,
    /// The gradient at the center must satisfy `‖∇S‖ ≤ grad0_tol·(1 + ‖θ‖)`.
    pub grad0_tol: f64,
    pub mode: EsimMode,
}

impl Default for EsimConfig {
    fn default() -> Self {
        Self {
            sinkhorn: SinkhornConfig::default(),
            jac_tol: 1e-8,
            jac_max_iters: 100_000,
            jac_solver: JacobianSolver::Auto,
            auto_sweeps: 200,
            compositions: None,
            grad0_tol: 1e-5,
            mode: EsimMode::Auto,
        }
    }
}

impl EsimConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            sinkhorn: SinkhornConfig::with_gamma(gamma),
            ..Self::default()
        }
    }
}

/// `l = ⌈⌈log_λ(1/3)⌉ / 2⌉` for contraction factor `λ`, at least 1.
pub fn compositions_for(cost: &GroundCost, gamma: f64) -> usize {
    match cost.contraction_factor(gamma) {
        Some(lambda) if lambda > 0.0 && lambda < 1.0 => {
            let steps = ((1.0f64 / 3.0).ln() / lambda.ln()).ceil();
            ((steps / 2.0).ceil() as usize).max(1)
        }
        _ => 1,
    }
}

#[derive(Clone, Debug)]
pub struct PotentialJacobian {
    /// `n × d`, gauge-fixed so that row 0 vanishes.
    pub j: DMatrix<f64>,
    pub iters: usize,
    /// Max-entry change of the last sweep.
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub compositions: usize,
    /// Finished by the direct linear solve.
    pub direct: bool,
}

/// Blocks of the second derivative of `H̄₁` at a potential `f`.
#[derive(Clone, Debug)]
pub struct DualHessianBlocks {
    /// `∇₁₁H̄₁`, `n × n`, symmetric.
    pub h11: DMatrix<f64>,
    /// `∇₁₂H̄₁`, `n × d`; `∇₂₁H̄₁ = h12ᵀ`.
    pub h12: DMatrix<f64>,
    /// `∇₂₂H̄₁`, `d × d`.
    pub h22: DMatrix<f64>,
    /// `∇₁H̄₁`, which vanishes at the maximizer.
    pub grad_f: DVector<f64>,
    /// `∇₂H̄₁`, the envelope gradient `∇_θ OT`.
    pub grad_theta: DVector<f64>,
}

impl DualHessianBlocks {
    /// `Jᵀ h11 J + Jᵀ h12 + h12ᵀ J + h22`, symmetrized.
    pub fn hessian(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        let jt_h12 = j.tr_mul(&self.h12);
        let full = j.tr_mul(&(&self.h11 * j)) + &jt_h12 + jt_h12.transpose() + &self.h22;
        symmetrize(&full)
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Couplings and cost derivatives of one OT term at a fixed potential.
struct PairGeometry {
    n: usize,
    m: usize,
    q: usize,
    gamma: f64,
    /// `p[(j, i)] = p_{i|j}`, the softmax weights of `Ā(f, α)(yⱼ)`.
    p: DMatrix<f64>,
    /// `π̃ᵢⱼ = vⱼ p_{i|j}`.
    coupling: DMatrix<f64>,
    /// `q_{j|i}`, the softmax weights of `Ā(g, β)(xᵢ)`.
    qmat: DMatrix<f64>,
    /// `∇₁c(xᵢ, yⱼ)` at `(i·m + j)·q`.
    a: Vec<f64>,
    /// `∇₁c(yⱼ, xᵢ)` at `(i·m + j)·q`, present when the second marginal moves.
    b: Option<Vec<f64>>,
    /// `b̄ⱼ = Σᵢ p_{i|j} ∇₁c(yⱼ, xᵢ)`.
    b_bar: Option<Vec<f64>>,
    v: Vec<f64>,
}

impl PairGeometry {
    fn new(
        op: &SinkhornOperator,
        x: &DiscreteMeasure,
        y: &DiscreteMeasure,
        cost: &GroundCost,
        f: &[f64],
        moving_target: bool,
    ) -> Self {
        let (n, m, q) = (x.len(), y.len(), x.dim());
        let gamma = op.gamma();
        let c = op.cost();
        let g = op.to_target(f);
        let back = op.to_source(g.as_slice());
        let (w, v) = (x.weights(), y.weights());
        let p = DMatrix::from_fn(m, n, |j, i| w[i] * ((f[i] - c.get(i, j) + g[j]) / gamma).exp());
        let coupling = DMatrix::from_fn(n, m, |i, j| v[j] * p[(j, i)]);
        let qmat = DMatrix::from_fn(n, m, |i, j| v[j] * ((g[j] - c.get(i, j) + back[i]) / gamma).exp());

        let mut a = vec![0.0; n * m * q];
        for i in 0..n {
            for j in 0..m {
                let at = (i * m + j) * q;
                cost.grad1_into(x.point(i), y.point(j), &mut a[at..at + q]);
            }
        }
        let (b, b_bar) = if moving_target {
            let mut b = vec![0.0; n * m * q];
            let mut b_bar = vec![0.0; m * q];
            for i in 0..n {
                for j in 0..m {
                    let at = (i * m + j) * q;
                    cost.grad1_into(y.point(j), x.point(i), &mut b[at..at + q]);
                    for r in 0..q {
                        b_bar[j * q + r] += p[(j, i)] * b[at + r];
                    }
                }
            }
            (Some(b), Some(b_bar))
        } else {
            (None, None)
        };
        Self {
            n,
            m,
            q,
            gamma,
            p,
            coupling,
            qmat,
            a,
            b,
            b_bar,
            v: v.to_vec(),
        }
    }

    fn psi_dim(&self) -> usize {
        self.q * (self.n + if self.b.is_some() { self.m } else { 0 })
    }

    fn x_index(&self, i: usize, r: usize) -> usize {
        i * self.q + r
    }

    fn y_index(&self, j: usize, r: usize) -> usize {
        self.n * self.q + j * self.q + r
    }

    fn a(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.m + j) * self.q;
        &self.a[at..at + self.q]
    }

    fn b(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.m + j) * self.q;
        &self.b.as_ref().expect("moving target")[at..at + self.q]
    }

    fn b_bar(&self, j: usize) -> &[f64] {
        &self.b_bar.as_ref().expect("moving target")[j * self.q..(j + 1) * self.q]
    }

    /// `W_r[(j, k)] = p_{k|j} ∇₁c(x_k, y_j)_r`.
    fn w(&self, r: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.n, |j, k| self.p[(j, k)] * self.a(k, j)[r])
    }

    /// `∇₁H̄₁ = w − π̃ 1`.
    fn grad_f(&self, x: &DiscreteMeasure) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| x.weights()[i] - self.coupling.row(i).sum())
    }

    /// `∇_ψ H̄₁` at fixed `f`.
    fn grad_psi(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.psi_dim());
        for i in 0..self.n {
            for j in 0..self.m {
                let pi = self.coupling[(i, j)];
                for r in 0..self.q {
                    out[self.x_index(i, r)] += pi * self.a(i, j)[r];
                }
                if self.b.is_some() {
                    for r in 0..self.q {
                        out[self.y_index(j, r)] += pi * self.b(i, j)[r];
                    }
                }
            }
        }
        out
    }

    /// `∇₁₁H̄₁ = −(diag(π̃1) − π̃ P) / γ`.
    fn h_ff(&self) -> DMatrix<f64> {
        let mut h = &self.coupling * &self.p;
        for i in 0..self.n {
            h[(i, i)] -= self.coupling.row(i).sum();
        }
        h / self.gamma
    }

    /// `∂²H̄₁/∂f∂ψ`, `n × ψ`.
    fn h_fpsi(&self, ws: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.psi_dim());
        for (r, w) in ws.iter().enumerate() {
            let pw = &self.coupling * w;
            for i in 0..self.n {
                for k in 0..self.n {
                    out[(i, self.x_index(k, r))] = -pw[(i, k)];
                }
            }
        }
        for i in 0..self.n {
            for j in 0..self.m {
                let pi = self.coupling[(i, j)];
                for r in 0..self.q {
                    out[(i, self.x_index(i, r))] += pi * self.a(i, j)[r];
                }
                if self.b.is_some() {
                    for r in 0..self.q {
                        out[(i, self.y_index(j, r))] = pi * (self.b(i, j)[r] - self.b_bar(j)[r]);
                    }
                }
            }
        }
        out / self.gamma
    }

    /// `J₂B̄` in point space, `n × ψ`.
    fn sweep_param_jacobian(&self, ws: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.psi_dim());
        for (r, w) in ws.iter().enumerate() {
            let qw = &self.qmat * w;
            for i in 0..self.n {
                for k in 0..self.n {
                    out[(i, self.x_index(k, r))] = -qw[(i, k)];
                }
            }
        }
        for i in 0..self.n {
            for j in 0..self.m {
                let qij = self.qmat[(i, j)];
                for r in 0..self.q {
                    out[(i, self.x_index(i, r))] += qij * self.a(i, j)[r];
                }
                if self.b.is_some() {
                    for r in 0..self.q {
                        out[(i, self.y_index(j, r))] = qij * (self.b(i, j)[r] - self.b_bar(j)[r]);
                    }
                }
            }
        }
        out
    }

    /// `J₁B̄ = Q P`, row-stochastic.
    fn sweep_potential_jacobian(&self) -> DMatrix<f64> {
        &self.qmat * &self.p
    }

    /// `∂²H̄₁/∂ψ²` at fixed `f`.
    fn h_psipsi(&self, x: &DiscreteMeasure, y: &DiscreteMeasure, cost: &GroundCost, ws: &[DMatrix<f64>]) -> DMatrix<f64> {
        let (n, m, q) = (self.n, self.m, self.q);
        let inv_gamma = 1.0 / self.gamma;
        let dim = self.psi_dim();
        let mut h = DMatrix::zeros(dim, dim);
        let se = cost.is_squared_euclidean();
        let moving = self.b.is_some();

        for i in 0..n {
            for j in 0..m {
                let pi = self.coupling[(i, j)];
                let a = self.a(i, j);
                let hxx = if se { None } else { Some(cost.hess11(x.point(i), y.point(j))) };
                for r in 0..q {
                    for s in 0..q {
                        let curv = match &hxx {
                            Some(hm) => hm[(r, s)],
                            None if r == s => 2.0,
                            None => 0.0,
                        };
                        h[(self.x_index(i, r), self.x_index(i, s))] += pi * (curv - inv_gamma * a[r] * a[s]);
                    }
                }
                if !moving {
                    continue;
                }
                let b = self.b(i, j);
                let b_bar = self.b_bar(j);
                let (hyy, hxy) = if se {
                    (None, None)
                } else {
                    (
                        Some(cost.hess11(y.point(j), x.point(i))),
                        Some(cost.hess12(x.point(i), y.point(j))),
                    )
                };
                for r in 0..q {
                    for s in 0..q {
                        let curv_yy = match &hyy {
                            Some(hm) => hm[(r, s)],
                            None if r == s => 2.0,
                            None => 0.0,
                        };
                        h[(self.y_index(j, r), self.y_index(j, s))] += pi * (curv_yy - inv_gamma * b[r] * b[s]);
                        let curv_xy = match &hxy {
                            Some(hm) => hm[(r, s)],
                            None if r == s => -2.0,
                            None => 0.0,
                        };
                        let val = pi * (curv_xy - inv_gamma * a[r] * (b[s] - b_bar[s]));
                        h[(self.x_index(i, r), self.y_index(j, s))] += val;
                        h[(self.y_index(j, s), self.x_index(i, r))] += val;
                    }
                }
            }
        }

        if moving {
            for j in 0..m {
                let b_bar = self.b_bar(j);
                for r in 0..q {
                    for s in 0..q {
                        h[(self.y_index(j, r), self.y_index(j, s))] += inv_gamma * self.v[j] * b_bar[r] * b_bar[s];
                    }
                }
            }
        }

        let vw: Vec<DMatrix<f64>> = ws
            .iter()
            .map(|w| {
                let mut scaled = w.clone();
                for (j, vj) in self.v.iter().enumerate() {
                    scaled.row_mut(j).scale_mut(*vj);
                }
                scaled
            })
            .collect();
        for r in 0..q {
            for s in 0..q {
                let block = ws[r].tr_mul(&vw[s]);
                for k in 0..n {
                    for l in 0..n {
                        h[(self.x_index(k, r), self.x_index(l, s))] += inv_gamma * block[(k, l)];
                    }
                }
            }
        }
        h
    }
}

/// One OT term `OT(ᾱ_θ, β)` set up for differentiation.
struct OtTerm<'a> {
    model: &'a PushforwardModel,
    latents: &'a LatentSample,
    x: DiscreteMeasure,
    y: DiscreteMeasure,
    /// The second marginal is `ᾱ_θ` itself.
    moving_target: bool,
    cost: &'a GroundCost,
    op: SinkhornOperator,
    /// Stacked point Jacobian `Φ`, `ψ × d`.
    phi: DMatrix<f64>,
}

impl<'a> OtTerm<'a> {
    fn cross(
        model: &'a PushforwardModel,
        latents: &'a LatentSample,
        target: &DiscreteMeasure,
        cost: &'a GroundCost,
        gamma: f64,
    ) -> Result<Self> {
        let x = model.push_measure(latents)?;
        let op = SinkhornOperator::new(&x, target, cost, gamma)?;
        let phi = stacked_jacobian(model, latents, false);
        Ok(Self {
            model,
            latents,
            x,
            y: target.clone(),
            moving_target: false,
            cost,
            op,
            phi,
        })
    }

    fn selfterm(model: &'a PushforwardModel, latents: &'a LatentSample, cost: &'a GroundCost, gamma: f64) -> Result<Self> {
        let x = model.push_measure(latents)?;
        let op = SinkhornOperator::new(&x, &x, cost, gamma)?;
        let phi = stacked_jacobian(model, latents, true);
        Ok(Self {
            model,
            latents,
            y: x.clone(),
            x,
            moving_target: true,
            cost,
            op,
            phi,
        })
    }

    fn geometry(&self, f: &[f64]) -> PairGeometry {
        PairGeometry::new(&self.op, &self.x, &self.y, self.cost, f, self.moving_target)
    }

    fn solve(&self, cfg: &SinkhornConfig, f0: Option<&DVector<f64>>) -> Result<SinkhornSolution> {
        if self.moving_target || self.x == self.y {
            solve_symmetric_with_operator(&self.op, cfg, f0)
        } else {
            solve_with_operator(&self.op, cfg, f0)
        }
    }

    /// `‖B̄(f) − f‖∞`.
    fn fixed_point_residual(&self, f: &DVector<f64>) -> f64 {
        (self.op.sweep(f.as_slice()) - f).amax()
    }

    /// `∇_θ` of the term's value via the envelope formula.
    fn gradient(&self, f: &[f64]) -> DVector<f64> {
        self.phi.tr_mul(&self.geometry(f).grad_psi())
    }

    fn potential_jacobian(&self, f: &DVector<f64>, cfg: &EsimConfig) -> Result<PotentialJacobian> {
        let l = cfg.compositions.unwrap_or_else(|| compositions_for(self.cost, self.op.gamma())).max(1);
        let n = self.x.len();
        let d = self.phi.ncols();
        let mut m_e = DMatrix::<f64>::identity(n, n);
        let mut n_e = DMatrix::<f64>::zeros(n, d);
        let mut f_k = f.clone();
        for k in 0..l {
            let geo = self.geometry(f_k.as_slice());
            let ws: Vec<_> = (0..geo.q).map(|r| geo.w(r)).collect();
            let m_k = geo.sweep_potential_jacobian();
            let n_k = geo.sweep_param_jacobian(&ws) * &self.phi;
            n_e = &m_k * n_e + n_k;
            m_e = &m_k * m_e;
            if k + 1 < l {
                f_k = self.op.sweep(f_k.as_slice());
            }
        }

        let sweep = |j: &DMatrix<f64>| {
            let mut next = &m_e * j + &n_e;
            let anchor = next.row(0).into_owned();
            for mut row in next.row_iter_mut() {
                row -= &anchor;
            }
            next
        };
        let direct_first = match cfg.jac_solver {
            JacobianSolver::Direct => true,
            JacobianSolver::Auto => n <= DIRECT_MAX_POINTS,
            JacobianSolver::FixedPoint => false,
        };
        let mut history = Vec::new();
        let mut iters = 0;
        let mut j = DMatrix::<f64>::zeros(n, d);
        let mut used_direct = false;
        if direct_first {
            j = gauge_fixed_solve(&m_e, &n_e).ok_or(Error::JacobianNotConverged {
                iters: 0,
                residual: f64::INFINITY,
            })?;
            used_direct = true;
        }
        let sweep_budget = match cfg.jac_solver {
            JacobianSolver::FixedPoint => cfg.jac_max_iters,
            JacobianSolver::Auto if !direct_first => cfg.jac_max_iters.min(cfg.auto_sweeps),
            _ => cfg.jac_max_iters,
        };
        let converged = |j: DMatrix<f64>, iters, residual, history, direct| PotentialJacobian {
            j,
            iters,
            residual,
            residual_history: history,
            compositions: l,
            direct,
        };
        while iters < sweep_budget.max(1) {
            let next = sweep(&j);
            let residual = (&next - &j).amax();
            history.push(residual);
            iters += 1;
            j = next;
            if !residual.is_finite() {
                return Err(Error::JacobianNotConverged { iters, residual });
            }
            if residual <= cfg.jac_tol {
                return Ok(converged(j, iters, residual, history, used_direct));
            }
        }
        if cfg.jac_solver == JacobianSolver::FixedPoint || used_direct {
            return Err(Error::JacobianNotConverged {
                iters,
                residual: history.last().copied().unwrap_or(f64::INFINITY),
            });
        }

        let direct = gauge_fixed_solve(&m_e, &n_e).ok_or(Error::JacobianNotConverged {
            iters,
            residual: history.last().copied().unwrap_or(f64::INFINITY),
        })?;
        let next = sweep(&direct);
        let residual = (&next - &direct).amax();
        history.push(residual);
        iters += 1;
        if !(residual <= cfg.jac_tol) {
            return Err(Error::JacobianNotConverged { iters, residual });
        }
        Ok(converged(next, iters, residual, history, true))
    }

    /// Factored second derivative of the term at a converged potential.
    fn factors(&self, f: &DVector<f64>, jac: &PotentialJacobian, coef: f64) -> TermFactors {
        let geo = self.geometry(f.as_slice());
        let ws: Vec<_> = (0..geo.q).map(|r| geo.w(r)).collect();
        let h_ff = geo.h_ff();
        let h_ftheta = geo.h_fpsi(&ws) * &self.phi;
        let h_psipsi = geo.h_psipsi(&self.x, &self.y, self.cost, &ws);
        let grad_psi = geo.grad_psi();
        TermFactors {
            coef,
            j: jac.j.clone(),
            h_ff,
            h_ftheta,
            phi: self.phi.clone(),
            h_psipsi,
            covectors: point_covectors(&grad_psi, self.latents.len(), self.x.dim(), self.moving_target),
        }
    }

    fn blocks(&self, f: &DVector<f64>) -> DualHessianBlocks {
        let geo = self.geometry(f.as_slice());
        let ws: Vec<_> = (0..geo.q).map(|r| geo.w(r)).collect();
        let grad_psi = geo.grad_psi();
        let covectors = point_covectors(&grad_psi, self.latents.len(), self.x.dim(), self.moving_target);
        let mut h22 = self.phi.tr_mul(&(geo.h_psipsi(&self.x, &self.y, self.cost, &ws) * &self.phi));
        add_second_order(&mut h22, self.model, self.latents, &covectors, 1.0);
        DualHessianBlocks {
            h11: geo.h_ff(),
            h12: geo.h_fpsi(&ws) * &self.phi,
            h22,
            grad_f: geo.grad_f(&self.x),
            grad_theta: self.phi.tr_mul(&grad_psi),
        }
    }
}

/// Solves the gauge-fixed fixed point `J = M J + N − 1 rᵀ`, `J₀ = 0`, for
/// the rows `J₁..` and the shift `r`.
fn gauge_fixed_solve(m_e: &DMatrix<f64>, n_e: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (n, d) = (m_e.nrows(), n_e.ncols());
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for c in 1..n {
            k[(i, c - 1)] = if i == c { 1.0 } else { 0.0 } - m_e[(i, c)];
        }
        k[(i, n - 1)] = 1.0;
    }
    let sol = k.lu().solve(n_e)?;
    let mut j = DMatrix::<f64>::zeros(n, d);
    if n > 1 {
        j.rows_mut(1, n - 1).copy_from(&sol.rows(0, n - 1));
    }
    Some(j)
}

/// `Φ` with rows `(i, r)` for each pushed point; duplicated when the second
/// marginal is the pushed measure as well.
fn stacked_jacobian(model: &PushforwardModel, latents: &LatentSample, twice: bool) -> DMatrix<f64> {
    let (n, q, d) = (latents.len(), model.output_dim(), model.num_params());
    let copies = if twice { 2 } else { 1 };
    let mut phi = DMatrix::zeros(copies * n * q, d);
    for i in 0..n {
        let jac = model.jacobian_unchecked(latents.point(i));
        for c in 0..copies {
            phi.view_mut((c * n * q + i * q, 0), (q, d)).copy_from(&jac);
        }
    }
    phi
}

/// Per-latent covectors `Gᵢ` so that the model-curvature term is
/// `Σᵢ ∇²_θ(Gᵢ · T_θ(zᵢ))`. For the self term the `x` and `y` blocks of the
/// same latent point add up.
fn point_covectors(grad_psi: &DVector<f64>, n: usize, q: usize, moving_target: bool) -> Vec<DVector<f64>> {
    (0..n)
        .map(|i| {
            let mut g = grad_psi.rows(i * q, q).into_owned();
            if moving_target {
                g += grad_psi.rows(n * q + i * q, q);
            }
            g
        })
        .collect()
}

fn add_second_order(
    h: &mut DMatrix<f64>,
    model: &PushforwardModel,
    latents: &LatentSample,
    covectors: &[DVector<f64>],
    scale: f64,
) {
    if model.is_linear_in_params() {
        return;
    }
    for (i, g) in covectors.iter().enumerate() {
        *h += scale * model.hessian_contract_unchecked(latents.point(i), g.as_slice());
    }
}

/// Second derivative of one OT term in factored form.
#[derive(Clone, Debug)]
struct TermFactors {
    coef: f64,
    j: DMatrix<f64>,
    h_ff: DMatrix<f64>,
    h_ftheta: DMatrix<f64>,
    phi: DMatrix<f64>,
    h_psipsi: DMatrix<f64>,
    covectors: Vec<DVector<f64>>,
}

impl TermFactors {
    fn apply(&self, model: &PushforwardModel, latents: &LatentSample, u: &DVector<f64>) -> DVector<f64> {
        let ju = &self.j * u;
        let mut out = self.j.tr_mul(&(&self.h_ff * &ju + &self.h_ftheta * u));
        out += self.h_ftheta.tr_mul(&ju);
        out += self.phi.tr_mul(&(&self.h_psipsi * (&self.phi * u)));
        if !model.is_linear_in_params() {
            for (i, g) in self.covectors.iter().enumerate() {
                out += model.hvp_unchecked(latents.point(i), g.as_slice(), u.as_slice());
            }
        }
        out * self.coef
    }

    fn dense(&self, model: &PushforwardModel, latents: &LatentSample) -> DMatrix<f64> {
        let jt_hft = self.j.tr_mul(&self.h_ftheta);
        let mut h = self.j.tr_mul(&(&self.h_ff * &self.j)) + &jt_hft + jt_hft.transpose();
        h += self.phi.tr_mul(&(&self.h_psipsi * &self.phi));
        add_second_order(&mut h, model, latents, &self.covectors, 1.0);
        h * self.coef
    }

    fn second_order_diagonal(&self, model: &PushforwardModel, latents: &LatentSample) -> DVector<f64> {
        let d = self.j.ncols();
        let mut diag = DVector::zeros(d);
        if !model.is_linear_in_params() {
            for (i, g) in self.covectors.iter().enumerate() {
                diag += model.hessian_contract_unchecked(latents.point(i), g.as_slice()).diagonal();
            }
        }
        diag
    }

    fn trace(&self, model: &PushforwardModel, latents: &LatentSample) -> f64 {
        let hj = &self.h_ff * &self.j;
        let mut t = self.j.component_mul(&hj).sum() + 2.0 * self.j.component_mul(&self.h_ftheta).sum();
        t += self.phi.component_mul(&(&self.h_psipsi * &self.phi)).sum();
        t += self.second_order_diagonal(model, latents).sum();
        t * self.coef
    }
}

fn check_converged(term: &OtTerm, f: &DVector<f64>, tol: f64) -> Result<()> {
    check_dim(term.x.len(), f.len(), "potential length")?;
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePotential);
    }
    let residual = term.fixed_point_residual(f);
    let slack = 64.0 * f64::EPSILON * (1.0 + f.amax());
    if residual > tol + slack {
        return Err(Error::PotentialNotConverged { residual, tol });
    }
    Ok(())
}

/// `J = ∂f_θ/∂θ` for `OT(T_θ♯μ̄, target)` by iterating `J ← J₁Ē J + J₂Ē`
/// at the converged potential `f_eps`.
pub fn potential_jacobian(
    model: &PushforwardModel,
    latents: &LatentSample,
    target: &DiscreteMeasure,
    cost: &GroundCost,
    cfg: &EsimConfig,
    f_eps: &DVector<f64>,
) -> Result<PotentialJacobian> {
    let term = OtTerm::cross(model, latents, target, cost, cfg.sinkhorn.gamma)?;
    check_converged(&term, f_eps, cfg.sinkhorn.tol)?;
    term.potential_jacobian(f_eps, cfg)
}

/// Analytic blocks `∇₁₁H̄₁`, `∇₁₂H̄₁`, `∇₂₂H̄₁` of the cross term at `f`.
///
/// The first-order residual `‖∇₁H̄₁‖∞` must not exceed
/// `10·tol·max(1, max wᵢ/γ)`; the dual gradient is the fixed-point residual
/// scaled by `wᵢ/γ`.
pub fn dual_hessian_blocks(
    model: &PushforwardModel,
    latents: &LatentSample,
    target: &DiscreteMeasure,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
    f: &DVector<f64>,
    jac: &PotentialJacobian,
) -> Result<DualHessianBlocks> {
    let term = OtTerm::cross(model, latents, target, cost, cfg.gamma)?;
    check_dim(term.x.len(), f.len(), "potential length")?;
    check_dim(term.x.len(), jac.j.nrows(), "potential jacobian rows")?;
    check_dim(model.num_params(), jac.j.ncols(), "potential jacobian columns")?;
    let blocks = term.blocks(f);
    let w_max = term.x.weights().iter().cloned().fold(0.0, f64::max);
    let limit = 10.0 * cfg.tol * (w_max / cfg.gamma).max(1.0);
    let residual = blocks.grad_f.amax();
    if residual > limit {
        return Err(Error::StalePotential { residual, limit });
    }
    Ok(blocks)
}

/// `∇²_θ OT_γ(T_θ♯μ̄, target)` for a target that does not depend on `θ`.
pub fn ot_hessian(
    model: &PushforwardModel,
    latents: &LatentSample,
    target: &DiscreteMeasure,
    cost: &GroundCost,
    cfg: &EsimConfig,
) -> Result<DMatrix<f64>> {
    let term = OtTerm::cross(model, latents, target, cost, cfg.sinkhorn.gamma)?;
    let sol = term.solve(&cfg.sinkhorn, None)?;
    let jac = term.potential_jacobian(&sol.f, cfg)?;
    Ok(term.blocks(&sol.f).hessian(&jac.j))
}

/// Value and envelope gradient of one OT term with the pushed measure as
/// first marginal.
#[derive(Clone, Debug)]
pub struct TermValue {
    pub value: f64,
    pub grad: DVector<f64>,
    pub solution: SinkhornSolution,
}

/// `OT(T_θ♯μ̄, target)` and its gradient in `θ`.
pub fn cross_value_grad(
    model: &PushforwardModel,
    latents: &LatentSample,
    target: &DiscreteMeasure,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
    f0: Option<&DVector<f64>>,
) -> Result<TermValue> {
    let term = OtTerm::cross(model, latents, target, cost, cfg.gamma)?;
    let solution = term.solve(cfg, f0)?;
    Ok(TermValue {
        value: solution.value(&term.x, &term.y),
        grad: term.gradient(solution.f.as_slice()),
        solution,
    })
}

/// `OT(T_θ♯μ̄, T_θ♯μ̄)` and its total derivative in `θ`.
pub fn self_value_grad(
    model: &PushforwardModel,
    latents: &LatentSample,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
    f0: Option<&DVector<f64>>,
) -> Result<TermValue> {
    let term = OtTerm::selfterm(model, latents, cost, cfg.gamma)?;
    let solution = term.solve(cfg, f0)?;
    Ok(TermValue {
        value: solution.value(&term.x, &term.y),
        grad: term.gradient(solution.f.as_slice()),
        solution,
    })
}

/// `S(T_θ♯μ̄, target)` and its gradient. The `OT(target, target)` term is
/// constant in `θ` and enters only the value.
#[derive(Clone, Debug)]
pub struct DivergenceValue {
    pub value: f64,
    pub grad: DVector<f64>,
    /// Potentials of the cross, self and target terms, for warm starts.
    pub potentials: [DVector<f64>; 3],
}

/// Warm starts for [`divergence_value_grad`], in the order of
/// [`DivergenceValue::potentials`].
pub type WarmStarts<'a> = [Option<&'a DVector<f64>>; 3];

pub fn divergence_value_grad(
    model: &PushforwardModel,
    latents: &LatentSample,
    target: &DiscreteMeasure,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
    warm: WarmStarts,
) -> Result<DivergenceValue> {
    let cross = cross_value_grad(model, latents, target, cost, cfg, warm[0])?;
    let selft = self_value_grad(model, latents, cost, cfg, warm[1])?;
    let op = SinkhornOperator::new(target, target, cost, cfg.gamma)?;
    let tt = solve_symmetric_with_operator(&op, cfg, warm[2])?;
    let value = cross.value - 0.5 * selft.value - 0.5 * tt.value(target, target);
    Ok(DivergenceValue {
        value,
        grad: cross.grad - 0.5 * selft.grad,
        potentials: [cross.solution.f, selft.solution.f, tt.f],
    })
}

/// `∇²_θ OT(T_θ♯μ̄, T_θ♯μ̄)`, differentiating through both marginals.
pub fn self_ot_hessian(
    model: &PushforwardModel,
    latents: &LatentSample,
    cost: &GroundCost,
    cfg: &EsimConfig,
) -> Result<DMatrix<f64>> {
    let term = OtTerm::selfterm(model, latents, cost, cfg.sinkhorn.gamma)?;
    let sol = term.solve(&cfg.sinkhorn, None)?;
    let jac = term.potential_jacobian(&sol.f, cfg)?;
    Ok(symmetrize(&term.factors(&sol.f, &jac, 1.0).dense(model, latents)))
}

#[derive(Clone, Debug)]
enum Representation {
    Explicit(DMatrix<f64>),
    MatrixFree {
        model: PushforwardModel,
        latents: LatentSample,
        terms: Vec<TermFactors>,
    },
}

/// The eSIM `H(θᵗ) = ∇²_θ S(ᾱ_θ, ᾱ_{θᵗ})|_{θ=θᵗ}`, either as a dense
/// symmetrized matrix or as a matrix-vector product.
#[derive(Clone, Debug)]
pub struct EsimOperator {
    repr: Representation,
    pub theta_t: DVector<f64>,
    pub gamma_sim: f64,
    /// `1e-6 · trace(H) / d`.
    pub damping_hint: f64,
    /// `‖∇_θ S(ᾱ_θ, ᾱ_{θᵗ})‖` at `θᵗ`; should vanish.
    pub center_grad_norm: f64,
    /// `false` when `center_grad_norm` exceeded `grad0_tol·(1 + ‖θᵗ‖)`.
    pub center_check_passed: bool,
    /// Potential of `OT(ᾱ_{θᵗ}, ᾱ_{θᵗ})`, reusable as a warm start.
    pub potential: DVector<f64>,
    pub jacobian_sweeps: [usize; 2],
}

impl EsimOperator {
    pub fn dim(&self) -> usize {
        self.theta_t.len()
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self.repr, Representation::Explicit(_))
    }

    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.repr {
            Representation::Explicit(h) => Some(h),
            Representation::MatrixFree { .. } => None,
        }
    }

    /// `H u`.
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            Representation::Explicit(h) => h * u,
            Representation::MatrixFree { model, latents, terms } => {
                let mut out = DVector::zeros(u.len());
                for t in terms {
                    out += t.apply(model, latents, u);
                }
                // same symmetrization as the explicit form
                out
            }
        }
    }

    /// Extreme eigenvalues of the explicit matrix.
    pub fn eigen_range(&self) -> Option<(f64, f64)> {
        self.matrix().map(|h| {
            let eig = h.clone().symmetric_eigenvalues();
            (eig.min(), eig.max())
        })
    }

    /// Dense matrix as CSV: `d` rows of `d` decimals.
    pub fn to_csv(&self) -> Option<String> {
        self.matrix().map(|h| {
            let mut out = String::new();
            for r in 0..h.nrows() {
                let row: Vec<String> = h.row(r).iter().map(|v| format!("{v:e}")).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            out
        })
    }
}

/// Builds `H(θᵗ) = ∇²_θ[OT(ᾱ_θ, ᾱ_{θᵗ}) − ½OT(ᾱ_θ, ᾱ_θ)]` at `θ = θᵗ`, the
/// model's current parameters. Both terms share the potential of
/// `OT(ᾱ_{θᵗ}, ᾱ_{θᵗ})`.
pub fn assemble_esim(
    model: &PushforwardModel,
    latents: &LatentSample,
    cost: &GroundCost,
    cfg: &EsimConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<EsimOperator> {
    let gamma = cfg.sinkhorn.gamma;
    let center = model.push_measure(latents)?;
    let cross = OtTerm::cross(model, latents, &center, cost, gamma)?;
    let selft = OtTerm::selfterm(model, latents, cost, gamma)?;
    let sol = cross.solve(&cfg.sinkhorn, warm_start)?;
    let f = &sol.f;

    let cross_grad = cross.gradient(f.as_slice());
    let self_grad = selft.gradient(f.as_slice());
    let center_grad_norm = (&cross_grad - 0.5 * &self_grad).norm();
    let theta_t = model.theta();
    let center_check_passed = center_grad_norm <= cfg.grad0_tol * (1.0 + theta_t.norm());

    let cross_jac = cross.potential_jacobian(f, cfg)?;
    let self_jac = selft.potential_jacobian(f, cfg)?;
    let terms = vec![cross.factors(f, &cross_jac, 1.0), selft.factors(f, &self_jac, -0.5)];

    let d = model.num_params();
    let explicit = match cfg.mode {
        EsimMode::Explicit => true,
        EsimMode::MatrixFree => false,
        EsimMode::Auto => d <= EXPLICIT_MAX_PARAMS,
    };
    let (repr, trace) = if explicit {
        let mut h = DMatrix::zeros(d, d);
        for t in &terms {
            h += t.dense(model, latents);
        }
        let h = symmetrize(&h);
        let trace = h.trace();
        (Representation::Explicit(h), trace)
    } else {
        let trace = terms.iter().map(|t| t.trace(model, latents)).sum();
        (
            Representation::MatrixFree {
                model: model.clone(),
                latents: latents.clone(),
                terms,
            },
            trace,
        )
    };
    Ok(EsimOperator {
        repr,
        theta_t,
        gamma_sim: gamma,
        damping_hint: 1e-6 * trace.max(0.0) / d as f64,
        center_grad_norm,
        center_check_passed,
        potential: sol.f.clone(),
        jacobian_sweeps: [cross_jac.iters, self_jac.iters],
    })
}

//! Damped conjugate gradients, the SiNG direction, and first-order baselines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::esim::{assemble_esim, divergence_value_grad, EsimConfig, EsimMode, EsimOperator};
use crate::geometry::{DiscreteMeasure, GroundCost};
use crate::pushforward::{LatentSample, PushforwardModel};

/// Symmetric operator accessed through products.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, u: &DVector<f64>) -> DVector<f64>;
    /// Default damping, `1e-6 · trace / d`.
    fn damping_hint(&self) -> f64;
}

impl LinearOperator for EsimOperator {
    fn dim(&self) -> usize {
        EsimOperator::dim(self)
    }

    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        EsimOperator::apply(self, u)
    }

    fn damping_hint(&self) -> f64 {
        self.damping_hint
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        self * u
    }

    fn damping_hint(&self) -> f64 {
        1e-6 * self.trace().max(0.0) / self.nrows().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgConfig {
    pub damping: f64,
    /// Relative residual `‖(H + δI)x − g‖ / ‖g‖`.
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            damping: 0.0,
            cg_tol: 1e-10,
            cg_max_iters: 1000,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::InvalidConfig(format!("damping must be >= 0, got {}", self.damping)));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            return Err(Error::InvalidConfig(format!("cg_tol must lie in (0, 1), got {}", self.cg_tol)));
        }
        if self.cg_max_iters == 0 {
            return Err(Error::InvalidConfig("cg_max_iters must be positive".into()));
        }
        Ok(())
    }

    pub fn with_damping(self, damping: f64) -> Self {
        Self { damping, ..self }
    }
}

#[derive(Clone, Debug)]
pub struct CgResult {
    pub x: DVector<f64>,
    /// True relative residual of `x`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn damped<O: LinearOperator + ?Sized>(op: &O, damping: f64, u: &DVector<f64>) -> DVector<f64> {
    let mut out = op.apply(u);
    if damping != 0.0 {
        out.axpy(damping, u, 1.0);
    }
    out
}

/// Solves `(H + damping·I) x = g` by conjugate gradients from `x = 0`.
///
/// On budget exhaustion the best iterate is returned with `converged = false`.
pub fn cg_solve<O: LinearOperator + ?Sized>(op: &O, g: &DVector<f64>, cfg: &CgConfig) -> Result<CgResult> {
    cfg.validate()?;
    check_dim(op.dim(), g.len(), "cg right-hand side")?;
    let g_norm = g.norm();
    let mut x = DVector::zeros(g.len());
    if g_norm == 0.0 {
        return Ok(CgResult {
            x,
            residual: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let mut r = g.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let mut best = (x.clone(), 1.0);
    let mut iterations = 0;
    while iterations < cfg.cg_max_iters {
        iterations += 1;
        let hp = damped(op, cfg.damping, &p);
        let curv = p.dot(&hp);
        if !(curv > 0.0) {
            break;
        }
        let alpha = rr / curv;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &hp, 1.0);
        let rr_next = r.norm_squared();
        if rr_next.sqrt() <= cfg.cg_tol * g_norm {
            // confirm against the true residual before stopping
            r = g - damped(op, cfg.damping, &x);
            let true_rel = r.norm() / g_norm;
            if true_rel < best.1 {
                best = (x.clone(), true_rel);
            }
            if true_rel <= cfg.cg_tol {
                return Ok(CgResult {
                    x,
                    residual: true_rel,
                    iterations,
                    converged: true,
                });
            }
            p = r.clone();
            rr = r.norm_squared();
            continue;
        }
        let beta = rr_next / rr;
        rr = rr_next;
        p = &r + beta * p;
    }
    let true_rel = (g - damped(op, cfg.damping, &x)).norm() / g_norm;
    if true_rel < best.1 {
        best = (x, true_rel);
    }
    Ok(CgResult {
        x: best.0,
        residual: best.1,
        iterations,
        converged: best.1 <= cfg.cg_tol,
    })
}

#[derive(Clone, Debug)]
pub struct SingDirection {
    /// `d = −√2 x / √(xᵀ(H + δI)x)`.
    pub direction: DVector<f64>,
    /// Solution of `(H + δI) x = g`.
    pub x: DVector<f64>,
    /// `xᵀ(H + δI)x`.
    pub quad: f64,
    /// `xᵀg`.
    pub inner: f64,
    pub zero_grad: bool,
    pub cg: CgResult,
}

impl SingDirection {
    /// Step length at which `η·d` equals the damped Newton step `−x`.
    pub fn newton_length(&self) -> f64 {
        (self.quad / 2.0).sqrt()
    }

    /// `d` rescaled so that `η·d` never overshoots the Newton step.
    pub fn capped(&self, eta: f64) -> DVector<f64> {
        let len = self.newton_length();
        if eta > len && eta > 0.0 {
            &self.direction * (len / eta)
        } else {
            self.direction.clone()
        }
    }
}

/// Normalized natural-gradient direction `−√2 H⁻¹g / √⟨H⁻¹g, g⟩`.
///
/// The normalization uses the damped quadratic form of the computed solve,
/// so `⟨(H + δI)d, d⟩ = 2` holds for the returned direction.
pub fn sing_direction<O: LinearOperator + ?Sized>(op: &O, grad: &DVector<f64>, cfg: &CgConfig) -> Result<SingDirection> {
    let cg = cg_solve(op, grad, cfg)?;
    if grad.iter().all(|v| *v == 0.0) {
        return Ok(SingDirection {
            direction: DVector::zeros(grad.len()),
            x: cg.x.clone(),
            quad: 0.0,
            inner: 0.0,
            zero_grad: true,
            cg,
        });
    }
    let x = cg.x.clone();
    let inner = x.dot(grad);
    let quad = x.dot(&damped(op, cfg.damping, &x));
    if !(inner > 0.0) || !(quad > 0.0) {
        return Err(Error::IndefiniteSolve { inner });
    }
    let direction = &x * (-(2.0f64.sqrt()) / quad.sqrt());
    Ok(SingDirection {
        direction,
        x,
        quad,
        inner,
        zero_grad: false,
        cg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sing,
    Gd,
    Adam,
    Rmsprop,
    Amsgrad,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sing => "sing",
            OptimizerKind::Gd => "gd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Amsgrad => "amsgrad",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: DVector<f64>,
    pub v: DVector<f64>,
    pub v_max: DVector<f64>,
    pub t: u64,
}

impl OptimizerState {
    /// Baseline defaults: `lr = 1e-3, β₁ = 0.9, β₂ = 0.999, ε = 1e-8`; SiNG
    /// uses `η = 1`.
    pub fn new(kind: OptimizerKind, d: usize) -> Self {
        let step_size = if kind == OptimizerKind::Sing { 1.0 } else { 1e-3 };
        Self {
            kind,
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: DVector::zeros(d),
            v: DVector::zeros(d),
            v_max: DVector::zeros(d),
            t: 0,
        }
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    /// One update. `input` is the SiNG direction for `Sing` and the raw
    /// gradient otherwise.
    pub fn step(&self, theta: &DVector<f64>, input: &DVector<f64>) -> Result<(DVector<f64>, OptimizerState)> {
        check_dim(theta.len(), input.len(), "optimizer input")?;
        check_dim(self.m.len(), theta.len(), "optimizer state")?;
        let mut next = self.clone();
        next.t += 1;
        let lr = self.step_size;
        let theta_next = match self.kind {
            OptimizerKind::Sing => theta + lr * input,
            OptimizerKind::Gd => theta - lr * input,
            OptimizerKind::Adam | OptimizerKind::Amsgrad => {
                next.m = self.beta1 * &self.m + (1.0 - self.beta1) * input;
                next.v = self.beta2 * &self.v + (1.0 - self.beta2) * input.component_mul(input);
                let bc1 = 1.0 - self.beta1.powi(next.t as i32);
                let bc2 = 1.0 - self.beta2.powi(next.t as i32);
                let second = if self.kind == OptimizerKind::Amsgrad {
                    next.v_max = self.v_max.zip_map(&next.v, f64::max);
                    &next.v_max
                } else {
                    &next.v
                };
                let update = next.m.zip_map(second, |m, v| (m / bc1) / ((v / bc2).sqrt() + self.eps));
                theta - lr * update
            }
            OptimizerKind::Rmsprop => {
                next.v = self.beta2 * &self.v + (1.0 - self.beta2) * input.component_mul(input);
                let update = input.zip_map(&next.v, |g, v| g / (v.sqrt() + self.eps));
                theta - lr * update
            }
        };
        Ok((theta_next, next))
    }
}

/// `‖d̃ − A d‖ / ‖A d‖` where `d` is the undamped SiNG direction for
/// `(H, g)` and `d̃` the one for `(A⁻ᵀHA⁻¹, A⁻ᵀg)`.
pub fn argstep_covariance_error(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, cg: &CgConfig) -> Result<f64> {
    let a_inv = invert(a)?;
    let h_phi = a_inv.tr_mul(&(h * &a_inv));
    let g_phi = a_inv.tr_mul(g);
    let cg0 = cg.with_damping(0.0);
    let d = sing_direction(h, g, &cg0)?.direction;
    let d_phi = sing_direction(&h_phi, &g_phi, &cg0)?.direction;
    let ad = a * d;
    Ok((d_phi - &ad).norm() / ad.norm())
}

fn invert(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::InvalidConfig("reparameterization must be square".into()));
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidConfig("reparameterization matrix is singular".into()))
}

/// Fixed inputs of the reparameterization probe.
#[derive(Clone, Debug)]
pub struct ProbeProblem<'a> {
    pub latents: &'a LatentSample,
    pub target: &'a DiscreteMeasure,
    pub cost: &'a GroundCost,
    /// Objective and SIM settings (shared `γ`).
    pub esim: EsimConfig,
    pub cg: CgConfig,
}

/// Runs `steps` SiNG steps in `θ` and in `φ = Aθ` coordinates and returns
/// `max_t ‖φ_t − Aθ_t‖ / (1 + ‖Aθ_t‖)`.
///
/// The `φ` run uses the exactly pulled-back gradient and SIM. Each run uses
/// its own default damping `1e-6·trace/d`, which is not covariant and makes
/// the deviation `O(η)`.
pub fn reparam_invariance_probe(
    model: &PushforwardModel,
    problem: &ProbeProblem,
    a: &DMatrix<f64>,
    steps: usize,
    eta: f64,
) -> Result<f64> {
    let d = model.num_params();
    check_dim(d, a.nrows(), "reparameterization rows")?;
    let a_inv = invert(a)?;
    let mut esim_cfg = problem.esim.clone();
    esim_cfg.mode = EsimMode::Explicit;

    let local = |theta: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = model.with_theta(theta.as_slice())?;
        let grad = divergence_value_grad(&m, problem.latents, problem.target, problem.cost, &esim_cfg.sinkhorn, [None; 3])?.grad;
        let h = assemble_esim(&m, problem.latents, problem.cost, &esim_cfg, None)?;
        Ok((grad, h.matrix().expect("explicit mode").clone()))
    };

    let mut theta = model.theta();
    let mut phi = a * &theta;
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let (g, h) = local(&theta)?;
        let dir = sing_direction(&h, &g, &problem.cg.with_damping(h.damping_hint()))?;
        theta += eta * dir.direction;

        let (g, h) = local(&(&a_inv * &phi))?;
        let h_phi = symmetrize_exact(&a_inv.tr_mul(&(h * &a_inv)));
        let g_phi = a_inv.tr_mul(&g);
        let dir = sing_direction(&h_phi, &g_phi, &problem.cg.with_damping(h_phi.damping_hint()))?;
        phi += eta * dir.direction;

        let a_theta = a * &theta;
        worst = worst.max((&phi - &a_theta).norm() / (1.0 + a_theta.norm()));
    }
    Ok(worst)
}

fn symmetrize_exact(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tight() -> CgConfig {
        CgConfig {
            damping: 0.0,
            cg_tol: 1e-12,
            cg_max_iters: 200,
        }
    }

    #[test]
    fn cg_diagonal() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let r = cg_solve(&h, &DVector::from_vec(vec![1.0, 2.0]), &tight()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-14 && (r.x[1] - 1.0).abs() < 1e-14);
        assert!(r.converged);
    }

    #[test]
    fn cg_identity_one_iteration() {
        let h = DMatrix::<f64>::identity(4, 4);
        let g = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.0]);
        let r = cg_solve(&h, &g, &tight()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.x, g);
    }

    #[test]
    fn cg_budget_exhaustion_is_flagged() {
        let h = DMatrix::from_diagonal(&DVector::from_fn(6, |i, _| (i + 1) as f64));
        let cfg = CgConfig {
            cg_max_iters: 2,
            ..tight()
        };
        let r = cg_solve(&h, &DVector::from_element(6, 1.0), &cfg).unwrap();
        assert!(!r.converged);
        assert!(r.residual > 1e-12 && r.residual < 1.0);
    }

    #[test]
    fn sing_direction_examples() {
        let h = DMatrix::<f64>::identity(2, 2) * 2.0;
        let s = sing_direction(&h, &DVector::from_vec(vec![2.0, 0.0]), &tight()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-15);
        assert!((s.inner - 2.0).abs() < 1e-15);
        assert!((s.direction[0] + 1.0).abs() < 1e-15 && s.direction[1] == 0.0);

        let h = DMatrix::<f64>::identity(3, 3);
        let s = sing_direction(&h, &DVector::from_vec(vec![1.0, 0.0, 0.0]), &tight()).unwrap();
        assert!((s.direction[0] + 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_gives_zero_direction() {
        let h = DMatrix::<f64>::identity(2, 2);
        let s = sing_direction(&h, &DVector::zeros(2), &tight()).unwrap();
        assert!(s.zero_grad);
        assert_eq!(s.direction, DVector::zeros(2));
    }

    #[test]
    fn indefinite_operator_is_rejected() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let err = sing_direction(&h, &DVector::from_vec(vec![1.0, 1.0]), &tight()).unwrap_err();
        assert!(matches!(err, Error::IndefiniteSolve { .. }));
        assert!(err.to_string().contains("increase damping"));
    }

    #[test]
    fn newton_cap() {
        let h = DMatrix::<f64>::identity(1, 1) * 2.0;
        // Newton step −g/2 = −0.1, normalized direction −1
        let s = sing_direction(&h, &DVector::from_vec(vec![0.2]), &tight()).unwrap();
        assert!((s.newton_length() - 0.1).abs() < 1e-15);
        assert!((s.capped(1.0)[0] * 1.0 + 0.1).abs() < 1e-15);
        assert_eq!(s.capped(0.05), s.direction);
    }

    #[test]
    fn step_examples() {
        let sing = OptimizerState::new(OptimizerKind::Sing, 2).with_step_size(0.5);
        let (t, _) = sing.step(&DVector::zeros(2), &DVector::from_vec(vec![-1.0, 0.0])).unwrap();
        assert_eq!(t.as_slice(), &[-0.5, 0.0]);

        let gd = OptimizerState::new(OptimizerKind::Gd, 2).with_step_size(0.1);
        let (t, _) = gd.step(&DVector::zeros(2), &DVector::from_vec(vec![2.0, -4.0])).unwrap();
        assert!((t[0] + 0.2).abs() < 1e-16 && (t[1] - 0.4).abs() < 1e-16);

        let adam = OptimizerState::new(OptimizerKind::Adam, 1);
        let (t, s) = adam.step(&DVector::zeros(1), &DVector::from_vec(vec![1.0])).unwrap();
        assert!((t[0] + 1e-3).abs() < 1e-10);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn amsgrad_keeps_second_moment_monotone() {
        let mut s = OptimizerState::new(OptimizerKind::Amsgrad, 1);
        let mut theta = DVector::zeros(1);
        let mut prev = 0.0;
        for g in [5.0, 0.1, 0.1, 3.0, 0.0] {
            let (t, next) = s.step(&theta, &DVector::from_vec(vec![g])).unwrap();
            assert!(next.v_max[0] >= prev);
            prev = next.v_max[0];
            theta = t;
            s = next;
        }
    }

    #[test]
    fn rmsprop_first_step() {
        let s = OptimizerState::new(OptimizerKind::Rmsprop, 1);
        let (t, _) = s.step(&DVector::zeros(1), &DVector::from_vec(vec![2.0])).unwrap();
        // v = 0.001·4, step = lr·2/√0.004
        assert!((t[0] + 1e-3 * 2.0 / (0.004f64.sqrt() + 1e-8)).abs() < 1e-15);
    }
}

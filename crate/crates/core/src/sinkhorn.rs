//! Log-domain Sinkhorn potentials for entropic optimal transport between
//! discrete measures.
//!
//! Potentials are always kept as log-domain vectors `f`, `g`; every reduction
//! is a max-shifted log-sum-exp so that small `γ` cannot overflow.
//!
//! The discrete Sinkhorn mapping of a potential `f` on the support of `α` is
//!
//! ```text
//! Ā(f, α)(y) = −γ log Σᵢ wᵢ exp((fᵢ − c(xᵢ, y)) / γ)
//! ```
//!
//! and one sweep of the solver is `B̄(f) = Ā(Ā(f, α)|_supp β, β)|_supp α`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{cost_matrix, CostMatrix, DiscreteMeasure, GroundCost};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic regularization `γ`.
    pub gamma: f64,
    /// Sup-norm tolerance on the change of `f` between sweeps.
    pub tol: f64,
    pub max_iters: usize,
    /// Convergence is tested every `check_every` sweeps.
    pub check_every: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            tol: 1e-9,
            max_iters: 10_000,
            check_every: 1,
        }
    }
}

impl SinkhornConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 || self.check_every == 0 {
            return Err(Error::InvalidConfig("max_iters and check_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Converged potentials, gauge-fixed so that `f[0] = 0`.
#[derive(Clone, Debug)]
pub struct SinkhornSolution {
    pub f: DVector<f64>,
    pub g: DVector<f64>,
    pub iters: usize,
    pub final_delta: f64,
    pub gamma: f64,
    /// `(iteration, sup-norm change)` at every convergence check.
    pub trace: Vec<(usize, f64)>,
}

impl SinkhornSolution {
    /// `⟨f, α⟩ + ⟨g, β⟩`.
    pub fn value(&self, a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
        dot(a.weights(), self.f.as_slice()) + dot(b.weights(), self.g.as_slice())
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,delta\n");
        for (iter, delta) in &self.trace {
            out.push_str(&format!("{iter},{delta:e}\n"));
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `−γ log Σₖ exp(log_wₖ + (potₖ − costₖ)/γ)` with the max shifted out.
fn softmin(costs: &[f64], pot: &[f64], log_w: &[f64], gamma: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for ((c, p), lw) in costs.iter().zip(pot).zip(log_w) {
        max = max.max(lw + (p - c) / gamma);
    }
    let mut sum = 0.0;
    for ((c, p), lw) in costs.iter().zip(pot).zip(log_w) {
        sum += (lw + (p - c) / gamma - max).exp();
    }
    -gamma * (max + sum.ln())
}

fn log_weights(m: &DiscreteMeasure) -> Vec<f64> {
    m.weights().iter().map(|w| w.ln()).collect()
}

/// The two half-steps of the Sinkhorn fixed point for one pair of measures,
/// with the cost matrix and its transpose cached.
#[derive(Clone, Debug)]
pub struct SinkhornOperator {
    gamma: f64,
    /// `n × m`, rows over the source support.
    cost: CostMatrix,
    /// `m × n` transpose, rows over the target support.
    cost_t: Vec<f64>,
    log_w: Vec<f64>,
    log_v: Vec<f64>,
}

impl SinkhornOperator {
    pub fn new(a: &DiscreteMeasure, b: &DiscreteMeasure, cost: &GroundCost, gamma: f64) -> Result<Self> {
        let cost = cost_matrix(cost, a, b)?;
        Ok(Self::from_cost_matrix(cost, a, b, gamma))
    }

    pub(crate) fn from_cost_matrix(cost: CostMatrix, a: &DiscreteMeasure, b: &DiscreteMeasure, gamma: f64) -> Self {
        let (n, m) = (cost.rows(), cost.cols());
        let mut cost_t = vec![0.0; n * m];
        for i in 0..n {
            for (j, c) in cost.row(i).iter().enumerate() {
                cost_t[j * n + i] = *c;
            }
        }
        Self {
            gamma,
            cost,
            cost_t,
            log_w: log_weights(a),
            log_v: log_weights(b),
        }
    }

    pub fn source_len(&self) -> usize {
        self.cost.rows()
    }

    pub fn target_len(&self) -> usize {
        self.cost.cols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn cost(&self) -> &CostMatrix {
        &self.cost
    }

    /// `g = Ā(f, α)` evaluated on the target support.
    pub fn to_target(&self, f: &[f64]) -> DVector<f64> {
        let n = self.source_len();
        DVector::from_iterator(
            self.target_len(),
            self.cost_t
                .chunks(n)
                .map(|col| softmin(col, f, &self.log_w, self.gamma)),
        )
    }

    /// `Ā(g, β)` evaluated on the source support.
    pub fn to_source(&self, g: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.source_len(),
            (0..self.source_len()).map(|i| softmin(self.cost.row(i), g, &self.log_v, self.gamma)),
        )
    }

    /// One composed sweep `B̄(f)`.
    pub fn sweep(&self, f: &[f64]) -> DVector<f64> {
        let g = self.to_target(f);
        self.to_source(g.as_slice())
    }
}

/// Discrete Sinkhorn mapping `Ā(f, α)` evaluated at the columns of `cost`
/// (rows of `cost` are the support of `a`).
pub fn sinkhorn_map(f: &DVector<f64>, a: &DiscreteMeasure, cost: &CostMatrix, gamma: f64) -> Result<DVector<f64>> {
    check_dim(a.len(), f.len(), "potential length")?;
    check_dim(a.len(), cost.rows(), "cost matrix rows")?;
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePotential);
    }
    let log_w = log_weights(a);
    let mut column = vec![0.0; a.len()];
    Ok(DVector::from_iterator(
        cost.cols(),
        (0..cost.cols()).map(|j| {
            for (i, c) in column.iter_mut().enumerate() {
                *c = cost.get(i, j);
            }
            softmin(&column, f.as_slice(), &log_w, gamma)
        }),
    ))
}

/// Iterates `f ← B̄(f)` until the sup-norm change drops to `cfg.tol`.
/// `f0` warm-starts the iteration.
pub fn solve_potentials(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
    f0: Option<&DVector<f64>>,
) -> Result<SinkhornSolution> {
    cfg.validate()?;
    let op = SinkhornOperator::new(a, b, cost, cfg.gamma)?;
    solve_with_operator(&op, cfg, f0)
}

pub(crate) fn solve_with_operator(
    op: &SinkhornOperator,
    cfg: &SinkhornConfig,
    f0: Option<&DVector<f64>>,
) -> Result<SinkhornSolution> {
    let mut f = match f0 {
        Some(f0) => {
            check_dim(op.source_len(), f0.len(), "warm start potential")?;
            if f0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePotential);
            }
            f0.clone()
        }
        None => DVector::zeros(op.source_len()),
    };
    let mut trace = Vec::new();
    let mut last_delta = f64::INFINITY;
    let mut converged_at = None;
    let mut iter = 0;
    while iter < cfg.max_iters {
        iter += 1;
        let next = op.sweep(f.as_slice());
        if iter % cfg.check_every == 0 || iter == cfg.max_iters {
            last_delta = (&next - &f).amax();
            trace.push((iter, last_delta));
            if !last_delta.is_finite() {
                return Err(Error::NonFinitePotential);
            }
        }
        f = next;
        if last_delta <= cfg.tol {
            converged_at = Some(iter);
            break;
        }
        if iter == NEWTON_AFTER && op.source_len() <= NEWTON_MAX_POINTS {
            let budget = NEWTON_MAX_STEPS.min(cfg.max_iters - iter);
            if let Some((polished, steps, delta)) = newton_polish(op, &f, cfg.tol, budget, &mut trace, iter) {
                iter += steps;
                f = polished;
                last_delta = delta;
                converged_at = Some(iter);
                break;
            }
        }
    }
    let iters = converged_at.ok_or(Error::NotConverged {
        iters: cfg.max_iters,
        last_delta,
    })?;
    let mut g = op.to_target(f.as_slice());
    let shift = f[0];
    f.add_scalar_mut(-shift);
    g.add_scalar_mut(shift);
    Ok(SinkhornSolution {
        f,
        g,
        iters,
        final_delta: last_delta,
        gamma: op.gamma(),
        trace,
    })
}

/// Sweeps before a slow solve switches to [`newton_polish`].
const NEWTON_AFTER: usize = 200;
const NEWTON_MAX_POINTS: usize = 2048;
const NEWTON_MAX_STEPS: usize = 50;

/// `H̄₁(f) = ⟨f, α⟩ + ⟨Ā(f, α), β⟩` and the coupling at `g = Ā(f, α)`.
fn dual_with_coupling(op: &SinkhornOperator, f: &DVector<f64>) -> (f64, DMatrix<f64>) {
    let g = op.to_target(f.as_slice());
    let (n, m) = (op.source_len(), op.target_len());
    let value = (0..n).map(|i| op.log_w[i].exp() * f[i]).sum::<f64>() + (0..m).map(|j| op.log_v[j].exp() * g[j]).sum::<f64>();
    let pi = DMatrix::from_fn(n, m, |i, j| {
        (op.log_w[i] + op.log_v[j] + (f[i] + g[j] - op.cost.get(i, j)) / op.gamma).exp()
    });
    (value, pi)
}

/// Damped Newton ascent on the concave dual `H̄₁` with `f[0]` held fixed, for
/// pairs where the sweep contracts slowly (nearly identical measures at small
/// `γ`). Stops on the same sweep criterion as the fixed point and returns
/// `(B̄(f), steps, ‖B̄(f) − f‖∞)`, or `None` if it stalls.
fn newton_polish(
    op: &SinkhornOperator,
    f0: &DVector<f64>,
    tol: f64,
    max_steps: usize,
    trace: &mut Vec<(usize, f64)>,
    offset: usize,
) -> Option<(DVector<f64>, usize, f64)> {
    let n = op.source_len();
    if n < 2 {
        return None;
    }
    let v: Vec<f64> = op.log_v.iter().map(|l| l.exp()).collect();
    let mut f = f0.clone();
    let (mut value, mut pi) = dual_with_coupling(op, &f);
    for step in 1..=max_steps {
        let rows = pi.column_sum();
        let grad = DVector::from_fn(n, |i, _| op.log_w[i].exp() - rows[i]);
        let mut scaled = pi.clone();
        for (j, vj) in v.iter().enumerate() {
            scaled.column_mut(j).scale_mut(1.0 / vj);
        }
        // −∇²H̄₁ = (diag(π1) − π diag(1/v) πᵀ) / γ, restricted to f[1..].
        let mut neg_hess = -(&scaled * pi.transpose());
        for i in 0..n {
            neg_hess[(i, i)] += rows[i];
        }
        let reduced = neg_hess.view((1, 1), (n - 1, n - 1)).into_owned() / op.gamma;
        let dir = reduced.cholesky()?.solve(&grad.rows(1, n - 1).into_owned());
        let slack = 64.0 * f64::EPSILON * value.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = f.clone();
            trial.rows_mut(1, n - 1).axpy(t, &dir, 1.0);
            let (tv, tpi) = dual_with_coupling(op, &trial);
            if tv.is_finite() && tv >= value - slack {
                accepted = Some((trial, tv, tpi));
                break;
            }
            t *= 0.5;
        }
        let (trial, tv, tpi) = accepted?;
        f = trial;
        value = tv;
        pi = tpi;
        let next = op.sweep(f.as_slice());
        let delta = (&next - &f).amax();
        trace.push((offset + step, delta));
        if !delta.is_finite() {
            return None;
        }
        if delta <= tol {
            return Some((next, step, delta));
        }
    }
    None
}

/// Potentials of `OT_γ(α, α)` by the averaged update `f ← ½(f + Ā(f, α))`.
///
/// The plain sweep contracts slowly when the self-coupling is close to the
/// identity; the averaged map has linearization `½(I − P)`, which is small in
/// exactly that regime. Stops when `‖Ā(f) − f‖∞ ≤ tol/2`, so the returned `f`
/// also meets `‖B̄(f) − f‖∞ ≤ tol`.
pub fn solve_self_potentials(
    a: &DiscreteMeasure,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
    f0: Option<&DVector<f64>>,
) -> Result<SinkhornSolution> {
    cfg.validate()?;
    let op = SinkhornOperator::new(a, a, cost, cfg.gamma)?;
    solve_symmetric_with_operator(&op, cfg, f0)
}

/// `op` must map a measure onto itself.
pub(crate) fn solve_symmetric_with_operator(
    op: &SinkhornOperator,
    cfg: &SinkhornConfig,
    f0: Option<&DVector<f64>>,
) -> Result<SinkhornSolution> {
    check_dim(op.source_len(), op.target_len(), "self-transport operator")?;
    let mut f = match f0 {
        Some(f0) => {
            check_dim(op.source_len(), f0.len(), "warm start potential")?;
            if f0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePotential);
            }
            f0.clone()
        }
        None => DVector::zeros(op.source_len()),
    };
    let mut trace = Vec::new();
    let mut last_delta = f64::INFINITY;
    let mut converged_at = None;
    for iter in 1..=cfg.max_iters {
        let mapped = op.to_target(f.as_slice());
        let gap = (&mapped - &f).amax();
        if !gap.is_finite() {
            return Err(Error::NonFinitePotential);
        }
        if iter % cfg.check_every == 0 || iter == cfg.max_iters {
            last_delta = gap;
            trace.push((iter, gap));
        }
        if gap <= 0.5 * cfg.tol {
            last_delta = gap;
            converged_at = Some(iter);
            break;
        }
        f = (f + mapped) * 0.5;
    }
    let iters = converged_at.ok_or(Error::NotConverged {
        iters: cfg.max_iters,
        last_delta,
    })?;
    let mut g = op.to_target(f.as_slice());
    let shift = f[0];
    f.add_scalar_mut(-shift);
    g.add_scalar_mut(shift);
    Ok(SinkhornSolution {
        f,
        g,
        iters,
        final_delta: last_delta,
        gamma: op.gamma(),
        trace,
    })
}

/// Entropic OT value `OT_γ(α, β) = ⟨f, α⟩ + ⟨g, β⟩`.
pub fn ot_gamma(a: &DiscreteMeasure, b: &DiscreteMeasure, cost: &GroundCost, cfg: &SinkhornConfig) -> Result<f64> {
    if a == b {
        return Ok(solve_self_potentials(a, cost, cfg, None)?.value(a, b));
    }
    Ok(solve_potentials(a, b, cost, cfg, None)?.value(a, b))
}

/// Single-potential dual `H̄₁(f) = ⟨f, α⟩ + ⟨Ā(f, α), β⟩`.
pub fn dual_objective(
    f: &DVector<f64>,
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cost: &GroundCost,
    gamma: f64,
) -> Result<f64> {
    let c = cost_matrix(cost, a, b)?;
    let g = sinkhorn_map(f, a, &c, gamma)?;
    Ok(dot(a.weights(), f.as_slice()) + dot(b.weights(), g.as_slice()))
}

/// Debiased divergence `OT(α, β) − ½OT(α, α) − ½OT(β, β)`.
pub fn sinkhorn_divergence(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
) -> Result<f64> {
    let cross = ot_gamma(a, b, cost, cfg)?;
    let self_a = solve_self_potentials(a, cost, cfg, None)?.value(a, a);
    let self_b = solve_self_potentials(b, cost, cfg, None)?.value(b, b);
    Ok(cross - 0.5 * self_a - 0.5 * self_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> DiscreteMeasure {
        DiscreteMeasure::uniform(vec![0.0, 1.0], 1).unwrap()
    }

    #[test]
    fn map_single_dirac_is_cost_minus_potential() {
        let a = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let y = DiscreteMeasure::dirac(&[3.0]).unwrap();
        let c = cost_matrix(&GroundCost::squared_euclidean(), &a, &y).unwrap();
        let g = sinkhorn_map(&DVector::from_vec(vec![0.0]), &a, &c, 1.0).unwrap();
        assert_eq!(g[0], 9.0);
        let g = sinkhorn_map(&DVector::from_vec(vec![2.5]), &a, &c, 1.0).unwrap();
        assert_eq!(g[0], 6.5);
    }

    #[test]
    fn map_two_point_closed_form() {
        let a = two_point();
        let y = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let c = cost_matrix(&GroundCost::squared_euclidean(), &a, &y).unwrap();
        let g = sinkhorn_map(&DVector::zeros(2), &a, &c, 1.0).unwrap();
        let expected = -(0.5 * (1.0 + (-1.0f64).exp())).ln();
        assert!((g[0] - expected).abs() < 1e-15);
        assert!((g[0] - 0.37988549).abs() < 1e-8);
    }

    #[test]
    fn map_rejects_non_finite() {
        let a = two_point();
        let c = cost_matrix(&GroundCost::squared_euclidean(), &a, &a).unwrap();
        let err = sinkhorn_map(&DVector::from_vec(vec![0.0, f64::NAN]), &a, &c, 1.0).unwrap_err();
        assert!(matches!(err, Error::NonFinitePotential));
    }

    #[test]
    fn map_survives_tiny_gamma() {
        let a = DiscreteMeasure::uniform(vec![0.0, 5.0, 10.0], 1).unwrap();
        let c = cost_matrix(&GroundCost::squared_euclidean(), &a, &a).unwrap();
        let g = sinkhorn_map(&DVector::from_vec(vec![0.0, 3.0, -2.0]), &a, &c, 1e-3).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forced_coupling() {
        let a = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let b = DiscreteMeasure::dirac(&[3.0]).unwrap();
        let cost = GroundCost::squared_euclidean();
        let sol = solve_potentials(&a, &b, &cost, &SinkhornConfig::default(), None).unwrap();
        assert_eq!(sol.f[0], 0.0);
        assert_eq!(sol.g[0], 9.0);
        assert_eq!(sol.iters, 1);
        for gamma in [0.01, 1.0, 100.0] {
            let cfg = SinkhornConfig::with_gamma(gamma);
            assert_eq!(ot_gamma(&a, &b, &cost, &cfg).unwrap(), 9.0);
            assert_eq!(ot_gamma(&a, &a, &cost, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn identical_measures_have_equal_potentials_up_to_gauge() {
        let a = DiscreteMeasure::uniform(vec![0.0, 0.3, 1.2, -0.7, 0.5], 1).unwrap();
        let sol = solve_potentials(&a, &a, &GroundCost::squared_euclidean(), &SinkhornConfig::default(), None).unwrap();
        let diff = &sol.f - &sol.g;
        let spread = diff.max() - diff.min();
        assert!(spread < 1e-8, "f − g not constant: {spread}");
    }

    /// Scaling-domain Sinkhorn run for a fixed 10⁴ iterations; independent of
    /// the log-domain solver and safe at γ = 1 on unit-scale data.
    fn scaling_domain_reference(a: &DiscreteMeasure, b: &DiscreteMeasure, gamma: f64) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = (a.len(), b.len());
        let k: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let d = a.point(i)[0] - b.point(j)[0];
                        (-d * d / gamma).exp()
                    })
                    .collect()
            })
            .collect();
        let mut u = vec![1.0; n];
        let mut v = vec![1.0; m];
        for _ in 0..10_000 {
            for j in 0..m {
                let s: f64 = (0..n).map(|i| a.weights()[i] * k[i][j] * u[i]).sum();
                v[j] = 1.0 / s;
            }
            for i in 0..n {
                let s: f64 = (0..m).map(|j| b.weights()[j] * k[i][j] * v[j]).sum();
                u[i] = 1.0 / s;
            }
        }
        let f: Vec<f64> = u.iter().map(|x| gamma * x.ln()).collect();
        let g: Vec<f64> = v.iter().map(|x| gamma * x.ln()).collect();
        let s = f[0];
        (f.iter().map(|x| x - s).collect(), g.iter().map(|x| x + s).collect())
    }

    #[test]
    fn two_point_potentials_match_long_run_reference() {
        let a = two_point();
        let b = DiscreteMeasure::weighted(vec![0.0, 1.0], 1, vec![0.3, 0.7]).unwrap();
        let cfg = SinkhornConfig {
            tol: 1e-14,
            ..SinkhornConfig::default()
        };
        for (x, y) in [(&a, &a), (&a, &b)] {
            let sol = solve_potentials(x, y, &GroundCost::squared_euclidean(), &cfg, None).unwrap();
            let (f_ref, g_ref) = scaling_domain_reference(x, y, 1.0);
            for i in 0..2 {
                assert!((sol.f[i] - f_ref[i]).abs() < 1e-12);
                assert!((sol.g[i] - g_ref[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn budget_exhaustion_reports_last_delta() {
        let a = DiscreteMeasure::uniform(vec![0.0, 0.5, 3.0], 1).unwrap();
        let b = DiscreteMeasure::uniform(vec![1.0, 2.0], 1).unwrap();
        let cfg = SinkhornConfig {
            gamma: 0.05,
            max_iters: 2,
            ..SinkhornConfig::default()
        };
        match solve_potentials(&a, &b, &GroundCost::squared_euclidean(), &cfg, None) {
            Err(Error::NotConverged { iters, last_delta }) => {
                assert_eq!(iters, 2);
                assert!(last_delta > cfg.tol);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_converges_faster() {
        let a = DiscreteMeasure::uniform(vec![0.0, 0.4, 0.9, 1.3], 1).unwrap();
        let b = DiscreteMeasure::uniform(vec![0.1, 0.7, 1.5], 1).unwrap();
        let cost = GroundCost::squared_euclidean();
        let cfg = SinkhornConfig::with_gamma(0.1);
        let cold = solve_potentials(&a, &b, &cost, &cfg, None).unwrap();
        let warm = solve_potentials(&a, &b, &cost, &cfg, Some(&cold.f)).unwrap();
        assert!(warm.iters < cold.iters);
        assert!((warm.value(&a, &b) - cold.value(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn dual_objective_cases() {
        let a = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let b = DiscreteMeasure::dirac(&[3.0]).unwrap();
        let cost = GroundCost::squared_euclidean();
        for f in [-4.0, 0.0, 1.5, 17.0] {
            let v = dual_objective(&DVector::from_vec(vec![f]), &a, &b, &cost, 1.0).unwrap();
            assert!((v - 9.0).abs() < 1e-12);
        }

        let a = DiscreteMeasure::uniform(vec![0.0, 1.0], 1).unwrap();
        let b = DiscreteMeasure::weighted(vec![0.2, 1.4], 1, vec![0.4, 0.6]).unwrap();
        let cfg = SinkhornConfig {
            tol: 1e-13,
            ..SinkhornConfig::default()
        };
        let sol = solve_potentials(&a, &b, &cost, &cfg, None).unwrap();
        let at_opt = dual_objective(&sol.f, &a, &b, &cost, 1.0).unwrap();
        assert!((at_opt - sol.value(&a, &b)).abs() < 1e-10);
        for eps in [1e-3, 1e-2, 0.1] {
            let perturbed = &sol.f + DVector::from_vec(vec![eps, -eps]);
            assert!(dual_objective(&perturbed, &a, &b, &cost, 1.0).unwrap() <= at_opt);
        }
    }

    #[test]
    fn divergence_cases() {
        let cost = GroundCost::squared_euclidean();
        let cfg = SinkhornConfig::with_gamma(0.5);
        let a = DiscreteMeasure::uniform(vec![0.0, 0.3, 1.1, 0.2, -0.4, 0.9], 2).unwrap();
        assert_eq!(sinkhorn_divergence(&a, &a, &cost, &cfg).unwrap(), 0.0);

        let p = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let q = DiscreteMeasure::dirac(&[3.0]).unwrap();
        assert_eq!(sinkhorn_divergence(&p, &q, &cost, &cfg).unwrap(), 9.0);

        let delta = [0.7, -0.25];
        let b = a.translated(&delta).unwrap();
        let s = sinkhorn_divergence(&a, &b, &cost, &cfg).unwrap();
        assert!((s - (0.49 + 0.0625)).abs() < 1e-8, "{s}");
    }

    #[test]
    fn nearly_identical_measures_converge() {
        let cost = GroundCost::squared_euclidean();
        let pts = vec![0.0, 0.1, 0.35, 0.5, 0.8, 1.1, -0.3, 0.65];
        let a = DiscreteMeasure::uniform(pts, 2).unwrap();
        let b = a.translated(&[1e-4, -2e-4]).unwrap();
        let cfg = SinkhornConfig {
            gamma: 0.01,
            tol: 1e-12,
            max_iters: 5000,
            check_every: 1,
        };
        let sol = solve_potentials(&a, &b, &cost, &cfg, None).unwrap();
        assert!(sol.iters < 5000);
        let op = SinkhornOperator::new(&a, &b, &cost, cfg.gamma).unwrap();
        assert!((op.sweep(sol.f.as_slice()) - &sol.f).amax() <= 2e-12);
        let s = sinkhorn_divergence(&a, &b, &cost, &cfg).unwrap();
        assert!((s - 5e-8).abs() < 1e-9, "{s}");
    }

    #[test]
    fn trace_csv_format() {
        let a = DiscreteMeasure::uniform(vec![0.0, 1.0], 1).unwrap();
        let sol = solve_potentials(&a, &a, &GroundCost::squared_euclidean(), &SinkhornConfig::default(), None).unwrap();
        let csv = sol.trace_csv();
        assert!(csv.starts_with("iter,delta\n1,"));
        assert_eq!(csv.lines().count(), sol.trace.len() + 1);
    }

    #[test]
    fn config_validation() {
        assert!(SinkhornConfig::with_gamma(0.0).validate().is_err());
        assert!(SinkhornConfig {
            max_iters: 0,
            ..SinkhornConfig::default()
        }
        .validate()
        .is_err());
    }
}

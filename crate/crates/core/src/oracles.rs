//! Finite-difference and brute-force reference computations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{DiscreteMeasure, GroundCost};

/// Central differences with step `h`, optionally with one Richardson level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSpec {
    pub h: f64,
    pub richardson: bool,
}

impl FdSpec {
    pub const GRADIENT: FdSpec = FdSpec {
        h: 1e-5,
        richardson: false,
    };
    pub const HESSIAN: FdSpec = FdSpec {
        h: 1e-4,
        richardson: false,
    };

    pub fn new(h: f64) -> Self {
        Self { h, richardson: false }
    }

    pub fn richardson(self) -> Self {
        Self {
            richardson: true,
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.h > 0.0 && self.h.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("fd step must be positive, got {}", self.h)))
        }
    }
}

fn probe<F>(fun: &mut F, theta: &DVector<f64>) -> Result<f64>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let v = fun(theta)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteProbe {
            point: theta.as_slice().to_vec(),
        })
    }
}

fn probe_vec<F>(fun: &mut F, theta: &DVector<f64>) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let v = fun(theta)?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFiniteProbe {
            point: theta.as_slice().to_vec(),
        })
    }
}

fn shifted(theta: &DVector<f64>, k: usize, dk: f64) -> DVector<f64> {
    let mut t = theta.clone();
    t[k] += dk;
    t
}

fn shifted2(theta: &DVector<f64>, k: usize, dk: f64, l: usize, dl: f64) -> DVector<f64> {
    let mut t = shifted(theta, k, dk);
    t[l] += dl;
    t
}

/// Richardson combination `(4·D(h/2) − D(h)) / 3` when requested.
fn extrapolate<T, F>(spec: &FdSpec, mut at_step: F) -> Result<T>
where
    T: std::ops::Mul<f64, Output = T> + std::ops::Sub<Output = T>,
    F: FnMut(f64) -> Result<T>,
{
    let coarse = at_step(spec.h)?;
    if !spec.richardson {
        return Ok(coarse);
    }
    let fine = at_step(spec.h / 2.0)?;
    Ok(fine * (4.0 / 3.0) - coarse * (1.0 / 3.0))
}

pub fn fd_gradient<F>(mut fun: F, theta: &DVector<f64>, spec: &FdSpec) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    spec.validate()?;
    extrapolate(spec, |h| {
        let mut g = DVector::zeros(theta.len());
        for k in 0..theta.len() {
            let plus = probe(&mut fun, &shifted(theta, k, h))?;
            let minus = probe(&mut fun, &shifted(theta, k, -h))?;
            g[k] = (plus - minus) / (2.0 * h);
        }
        Ok(g)
    })
}

/// Central second differences `[f(++) − f(+−) − f(−+) + f(−−)] / 4h²`,
/// symmetrized.
pub fn fd_hessian<F>(mut fun: F, theta: &DVector<f64>, spec: &FdSpec) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    spec.validate()?;
    let d = theta.len();
    let h = extrapolate(spec, |h| {
        let mut out = DMatrix::zeros(d, d);
        let center = probe(&mut fun, theta)?;
        for k in 0..d {
            let plus = probe(&mut fun, &shifted(theta, k, 2.0 * h))?;
            let minus = probe(&mut fun, &shifted(theta, k, -2.0 * h))?;
            out[(k, k)] = (plus - 2.0 * center + minus) / (4.0 * h * h);
            for l in 0..k {
                let pp = probe(&mut fun, &shifted2(theta, k, h, l, h))?;
                let pm = probe(&mut fun, &shifted2(theta, k, h, l, -h))?;
                let mp = probe(&mut fun, &shifted2(theta, k, -h, l, h))?;
                let mm = probe(&mut fun, &shifted2(theta, k, -h, l, -h))?;
                let v = (pp - pm - mp + mm) / (4.0 * h * h);
                out[(k, l)] = v;
                out[(l, k)] = v;
            }
        }
        Ok(out)
    })?;
    Ok((&h + h.transpose()) * 0.5)
}

/// Central-difference Jacobian of a vector-valued function, `len(f) × d`.
pub fn fd_jacobian<F>(mut fun: F, theta: &DVector<f64>, spec: &FdSpec) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    spec.validate()?;
    extrapolate(spec, |h| {
        let mut cols = Vec::with_capacity(theta.len());
        for k in 0..theta.len() {
            let plus = probe_vec(&mut fun, &shifted(theta, k, h))?;
            let minus = probe_vec(&mut fun, &shifted(theta, k, -h))?;
            cols.push((plus - minus) / (2.0 * h));
        }
        if cols.is_empty() {
            return Ok(DMatrix::zeros(0, 0));
        }
        Ok(DMatrix::from_columns(&cols))
    })
}

/// Entropic OT by direct minimization of `⟨c, π⟩ + γ KL(π ‖ a⊗b)` over the
/// coupling polytope, for at most 3 points per side.
///
/// Couplings are parametrized as `a⊗b + N t` with `N` spanning the kernel of
/// the marginal constraints; damped Newton with a positivity-preserving
/// backtracking line search runs to machine precision.
pub fn primal_ot_bruteforce(a: &DiscreteMeasure, b: &DiscreteMeasure, cost: &GroundCost, gamma: f64) -> Result<f64> {
    if a.len() > 3 || b.len() > 3 {
        return Err(Error::InvalidConfig("brute-force primal supports at most 3 points per side".into()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidConfig(format!("gamma must be positive, got {gamma}")));
    }
    // zero-mass points carry no coupling mass
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a.weights()[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b.weights()[j] > 0.0).collect();
    let (n, m) = (rows.len(), cols.len());
    let mut c = DMatrix::zeros(n, m);
    for (ii, &i) in rows.iter().enumerate() {
        for (jj, &j) in cols.iter().enumerate() {
            c[(ii, jj)] = cost.cost(a.point(i), b.point(j))?;
        }
    }
    let prod = DMatrix::from_fn(n, m, |i, j| a.weights()[rows[i]] * b.weights()[cols[j]]);

    let mut basis = Vec::new();
    for k in 0..n.saturating_sub(1) {
        for l in 0..m.saturating_sub(1) {
            let mut e = DMatrix::zeros(n, m);
            e[(k, l)] = 1.0;
            e[(k, m - 1)] = -1.0;
            e[(n - 1, l)] = -1.0;
            e[(n - 1, m - 1)] = 1.0;
            basis.push(e);
        }
    }

    let objective = |pi: &DMatrix<f64>| -> f64 {
        let mut v = 0.0;
        for i in 0..n {
            for j in 0..m {
                let p = pi[(i, j)];
                v += c[(i, j)] * p + gamma * p * (p / prod[(i, j)]).ln();
            }
        }
        v
    };
    let coupling = |t: &DVector<f64>| -> DMatrix<f64> {
        let mut pi = prod.clone();
        for (k, e) in basis.iter().enumerate() {
            pi += e * t[k];
        }
        pi
    };

    let k = basis.len();
    let mut t = DVector::zeros(k);
    let mut pi = coupling(&t);
    let mut value = objective(&pi);
    for _ in 0..200 {
        if k == 0 {
            break;
        }
        let grad_pi = DMatrix::from_fn(n, m, |i, j| c[(i, j)] + gamma * ((pi[(i, j)] / prod[(i, j)]).ln() + 1.0));
        let curv = pi.map(|p| gamma / p);
        let grad = DVector::from_fn(k, |r, _| basis[r].component_mul(&grad_pi).sum());
        let hess = DMatrix::from_fn(k, k, |r, s| basis[r].component_mul(&basis[s]).component_mul(&curv).sum());
        let step = hess
            .cholesky()
            .map(|ch| ch.solve(&grad))
            .ok_or_else(|| Error::InvalidConfig("primal Hessian not positive definite".into()))?;
        let decrement = grad.dot(&step);
        if decrement <= 1e-30 {
            break;
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-20 {
            let cand_t = &t - alpha * &step;
            let cand = coupling(&cand_t);
            if cand.iter().all(|p| *p > 0.0) {
                let cand_value = objective(&cand);
                if cand_value <= value - 0.25 * alpha * decrement || cand_value <= value {
                    t = cand_t;
                    pi = cand;
                    value = cand_value;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(value)
}

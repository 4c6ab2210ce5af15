//! Self-checks run by `sing verify`: closed-form values, duality, and
//! finite-difference agreement on small instances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::esim::{assemble_esim, divergence_value_grad, EsimConfig, EsimMode};
use crate::geometry::{DiscreteMeasure, GroundCost};
use crate::optim::{argstep_covariance_error, sing_direction, CgConfig};
use crate::oracles::{fd_gradient, fd_hessian, primal_ot_bruteforce, FdSpec};
use crate::pushforward::{LatentSample, PushforwardModel};
use crate::sinkhorn::{ot_gamma, sinkhorn_divergence, solve_potentials, SinkhornConfig, SinkhornOperator};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Tiny,
    Full,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Suite::Tiny),
            "full" => Ok(Suite::Full),
            other => Err(Error::InvalidConfig(format!("unknown suite {other:?} (tiny|full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= limit,
            value,
            limit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suite: &'static str,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn tight(gamma: f64) -> SinkhornConfig {
    SinkhornConfig {
        gamma,
        tol: 1e-12,
        max_iters: 200_000,
        check_every: 1,
    }
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn dirac_divergence() -> Result<Vec<Check>> {
    let a = DiscreteMeasure::dirac(&[0.0])?;
    let b = DiscreteMeasure::dirac(&[3.0])?;
    let cost = GroundCost::squared_euclidean();
    [0.01, 1.0, 100.0]
        .iter()
        .map(|&g| {
            let s = sinkhorn_divergence(&a, &b, &cost, &SinkhornConfig::with_gamma(g))?;
            Ok(Check::at_most(format!("dirac_divergence/gamma={g}"), (s - 9.0).abs(), 1e-8))
        })
        .collect()
}

fn random_measure(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Result<DiscreteMeasure> {
    let pts = (0..n * dim).map(|_| rng.random::<f64>()).collect();
    let raw: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let rest: f64 = w[..n - 1].iter().sum();
    w[n - 1] = 1.0 - rest;
    DiscreteMeasure::weighted(pts, dim, w)
}

/// `|OT_γ − primal|` over all shapes up to 3×3 for several `γ`.
pub fn duality_gaps() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cost = GroundCost::squared_euclidean();
    let mut out = Vec::new();
    for n in 1..=3 {
        for m in 1..=3 {
            for gamma in [0.1, 1.0, 10.0] {
                let a = random_measure(&mut rng, n, 2)?;
                let b = random_measure(&mut rng, m, 2)?;
                let dual = ot_gamma(&a, &b, &cost, &tight(gamma))?;
                let primal = primal_ot_bruteforce(&a, &b, &cost, gamma)?;
                out.push(Check::at_most(format!("duality_gap/{n}x{m}/gamma={gamma}"), (dual - primal).abs(), 1e-8));
            }
        }
    }
    Ok(out)
}

pub fn translation_esim(dims: &[usize], sizes: &[usize], gammas: &[f64]) -> Result<Vec<Check>> {
    let cost = GroundCost::squared_euclidean();
    let mut out = Vec::new();
    for &d in dims {
        for &n in sizes {
            for &gamma in gammas {
                let latents = LatentSample::gaussian(n, d, 100 + d as u64);
                let model = PushforwardModel::translation(&vec![0.25; d]);
                let mut cfg = EsimConfig::with_gamma(gamma);
                cfg.sinkhorn.max_iters = 100_000;
                cfg.mode = EsimMode::Explicit;
                let h = assemble_esim(&model, &latents, &cost, &cfg, None)?;
                let err = (h.matrix().expect("explicit") - DMatrix::identity(d, d) * 2.0).amax();
                out.push(Check::at_most(format!("translation_esim/d={d}/n={n}/gamma={gamma}"), err, 1e-6));
            }
        }
    }
    Ok(out)
}

/// A small random instance: model, latents, and a target cloud.
pub fn random_instance(seed: u64, mlp: bool, n: usize) -> Result<(PushforwardModel, LatentSample, DiscreteMeasure)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, latents) = if mlp {
        (
            PushforwardModel::mlp_random(1, 2, 2, 0.8, seed),
            LatentSample::gaussian(n, 1, seed + 1),
        )
    } else if seed.is_multiple_of(2) {
        let w = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
        (PushforwardModel::affine(w, b)?, LatentSample::gaussian(n, 2, seed + 1))
    } else {
        let w = DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
        (PushforwardModel::affine(w, b)?, LatentSample::gaussian(n, 1, seed + 1))
    };
    let pts = (0..(n + 1) * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok((model, latents, DiscreteMeasure::uniform(pts, 2)?))
}

/// Relative error of the analytic `∇_θ S(ᾱ_θ, β)` against central differences.
pub fn gradient_fd_error(model: &PushforwardModel, latents: &LatentSample, target: &DiscreteMeasure, gamma: f64) -> Result<f64> {
    let cost = GroundCost::squared_euclidean();
    let cfg = tight(gamma);
    let analytic = divergence_value_grad(model, latents, target, &cost, &cfg, [None; 3])?.grad;
    let fd = fd_gradient(
        |t| {
            let m = model.with_theta(t.as_slice())?;
            Ok(divergence_value_grad(&m, latents, target, &cost, &cfg, [None; 3])?.value)
        },
        &model.theta(),
        &FdSpec::GRADIENT,
    )?;
    Ok((&analytic - &fd).norm() / fd.norm().max(1e-12))
}

/// Relative error of the explicit eSIM against the central-difference
/// Hessian of `θ ↦ S(ᾱ_θ, ᾱ_{θᵗ})` at `θᵗ`.
pub fn esim_fd_error(model: &PushforwardModel, latents: &LatentSample, gamma: f64) -> Result<f64> {
    let cost = GroundCost::squared_euclidean();
    let mut cfg = EsimConfig::with_gamma(gamma);
    cfg.sinkhorn = tight(gamma);
    cfg.jac_tol = 1e-12;
    cfg.mode = EsimMode::Explicit;
    let h = assemble_esim(model, latents, &cost, &cfg, None)?;
    let center = model.push_measure(latents)?;
    let fd = fd_hessian(
        |t| {
            let m = model.with_theta(t.as_slice())?;
            Ok(divergence_value_grad(&m, latents, &center, &cost, &cfg.sinkhorn, [None; 3])?.value)
        },
        &model.theta(),
        &FdSpec::HESSIAN,
    )?;
    Ok(rel(h.matrix().expect("explicit"), &fd))
}

/// Largest per-sweep ratio of `min_s ‖fᵗ − f* − s‖∞` on a random instance in
/// `[0, 1]` with `γ = 1`.
pub fn contraction_ratio(seed: u64, n: usize, m: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DiscreteMeasure::uniform((0..n).map(|_| rng.random::<f64>()).collect(), 1)?;
    let b = DiscreteMeasure::uniform((0..m).map(|_| rng.random::<f64>()).collect(), 1)?;
    let cost = GroundCost::squared_euclidean().with_bound(1.0);
    let reference = solve_potentials(&a, &b, &cost, &tight(1.0), None)?.f;
    let op = SinkhornOperator::new(&a, &b, &cost, 1.0)?;
    let gauge_err = |f: &DVector<f64>| {
        let diff = f - &reference;
        (diff.max() - diff.min()) / 2.0
    };
    let mut f = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let mut err = gauge_err(&f);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        f = op.sweep(f.as_slice());
        let next = gauge_err(&f);
        if err < 1e-11 {
            break;
        }
        worst = worst.max(next / err);
        err = next;
    }
    Ok(worst)
}

pub fn run_suite(suite: Suite) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    checks.extend(dirac_divergence()?);
    checks.extend(duality_gaps()?);

    let h = DMatrix::<f64>::identity(2, 2) * 2.0;
    let cg = CgConfig {
        damping: 0.0,
        cg_tol: 1e-12,
        cg_max_iters: 100,
    };
    let dir = sing_direction(&h, &DVector::from_vec(vec![2.0, 0.0]), &cg)?;
    checks.push(Check::at_most(
        "sing_direction/example",
        (&dir.direction - DVector::from_vec(vec![-1.0, 0.0])).amax(),
        1e-14,
    ));

    match suite {
        Suite::Tiny => {
            checks.extend(translation_esim(&[2], &[8], &[1.0])?);
            let (model, latents, target) = random_instance(2, false, 4)?;
            checks.push(Check::at_most("gradient_fd/affine", gradient_fd_error(&model, &latents, &target, 1.0)?, 1e-4));
        }
        Suite::Full => {
            checks.extend(translation_esim(&[1, 2, 5], &[8, 64], &[0.5, 1.0])?);
            for seed in 0..4u64 {
                let mlp = seed >= 2;
                let (model, latents, target) = random_instance(seed, mlp, 8)?;
                let kind = if mlp { "mlp" } else { "affine" };
                let g = gradient_fd_error(&model, &latents, &target, 1.0)?;
                checks.push(Check::at_most(format!("gradient_fd/{kind}/seed={seed}"), g, 1e-4));
                let e = esim_fd_error(&model, &latents, 1.0)?;
                checks.push(Check::at_most(format!("esim_fd/{kind}/seed={seed}"), e, 2e-3));
            }
            let lambda = GroundCost::squared_euclidean().with_bound(1.0).contraction_factor(1.0).expect("bounded");
            for seed in 0..3u64 {
                checks.push(Check::at_most(
                    format!("contraction/seed={seed}"),
                    contraction_ratio(seed, 6, 5)?,
                    lambda * lambda + 0.02,
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let m = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let h = m.tr_mul(&m) + DMatrix::identity(4, 4);
            let g = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let a = DMatrix::from_fn(4, 4, |r, c| if r == c { 2.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
            checks.push(Check::at_most(
                "argstep_covariance",
                argstep_covariance_error(&h, &g, &a, &cg)?,
                10.0 * cg.cg_tol,
            ));
        }
    }
    Ok(VerifyReport {
        suite: match suite {
            Suite::Tiny => "tiny",
            Suite::Full => "full",
        },
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

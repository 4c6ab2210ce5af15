//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sing::esim::{assemble_esim, EsimConfig, EsimMode};
use sing::geometry::{DiscreteMeasure, GroundCost};
use sing::harness::verify::{
    contraction_ratio, dirac_divergence, duality_gaps, esim_fd_error, gradient_fd_error, random_instance, translation_esim,
};
use sing::harness::{build_problem, run_problem, ExperimentConfig, RunRecord, SingCheck};
use sing::optim::{argstep_covariance_error, reparam_invariance_probe, CgConfig, ProbeProblem};
use sing::pushforward::{LatentSample, PushforwardModel};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> sing::Result<Outcome>) -> Outcome {
    let start = Instant::now();
    let out = match f() {
        Ok(o) => o,
        Err(e) => Outcome::new(false, format!("error: {e}")),
    };
    let took = start.elapsed();
    match limit {
        Some(l) if took > l => Outcome::new(false, format!("{} (took {took:.1?}, limit {l:?})", out.detail)),
        _ => Outcome::new(out.passed, format!("{} [{took:.2?}]", out.detail)),
    }
}

fn worst(checks: &[sing::harness::verify::Check]) -> (bool, f64) {
    let passed = checks.iter().all(|c| c.passed);
    (passed, checks.iter().map(|c| c.value).fold(0.0, f64::max))
}

fn ac1() -> sing::Result<Outcome> {
    let (ok, err) = worst(&dirac_divergence()?);
    Ok(Outcome::new(ok, format!("max |S - 9| = {err:.2e} over gamma in {{0.01, 1, 100}}")))
}

fn ac2() -> sing::Result<Outcome> {
    let checks = translation_esim(&[1, 2, 5], &[8, 64], &[0.1, 0.5, 1.0, 10.0])?;
    let (ok, err) = worst(&checks);
    Ok(Outcome::new(ok, format!("{} cases, max |H - 2I| = {err:.2e}", checks.len())))
}

fn ac3() -> sing::Result<Outcome> {
    let mut grad_worst = 0.0f64;
    let mut hess_worst = 0.0f64;
    for k in 0..20u64 {
        let mlp = k % 2 == 1;
        let gamma = if (k / 2) % 2 == 0 { 1.0 } else { 0.1 };
        let n = 6 + 4 * (k % 3) as usize;
        let (model, latents, target) = random_instance(100 + k, mlp, n)?;
        assert!(model.num_params() <= 10 && n <= 16);
        grad_worst = grad_worst.max(gradient_fd_error(&model, &latents, &target, gamma)?);
        hess_worst = hess_worst.max(esim_fd_error(&model, &latents, gamma)?);
    }
    Ok(Outcome::new(
        grad_worst <= 1e-4 && hess_worst <= 2e-3,
        format!("20 instances: gradient rel err {grad_worst:.2e} (<= 1e-4), eSIM rel err {hess_worst:.2e} (<= 2e-3)"),
    ))
}

fn ac4() -> sing::Result<Outcome> {
    let checks = duality_gaps()?;
    let (ok, gap) = worst(&checks);
    Ok(Outcome::new(ok, format!("{} instances up to 3x3, max gap {gap:.2e}", checks.len())))
}

fn ac5() -> sing::Result<Outcome> {
    let lambda = GroundCost::squared_euclidean()
        .with_bound(1.0)
        .contraction_factor(1.0)
        .expect("bounded cost");
    let limit = lambda * lambda + 0.02;
    let mut ratio = 0.0f64;
    for seed in 0..8u64 {
        for (n, m) in [(2, 3), (5, 4), (8, 8), (12, 7)] {
            ratio = ratio.max(contraction_ratio(seed, n, m)?);
        }
    }
    Ok(Outcome::new(
        ratio <= limit,
        format!("max sweep ratio {ratio:.4} (lambda = {lambda:.4}, limit {limit:.4})"),
    ))
}

fn ac6(checks: &[SingCheck], runs: usize) -> sing::Result<Outcome> {
    let bad = checks.iter().filter(|c| !c.passed()).count();
    let scale_err = checks.iter().map(|c| (c.scale - 2.0).abs()).fold(0.0, f64::max);
    Ok(Outcome::new(
        bad == 0 && !checks.is_empty(),
        format!(
            "{} SiNG steps in {runs} runs, {bad} violations, max |<(H+dI)d,d> - 2| = {scale_err:.2e}",
            checks.len()
        ),
    ))
}

fn ac7() -> sing::Result<Outcome> {
    let cg = CgConfig {
        damping: 0.0,
        cg_tol: 1e-12,
        cg_max_iters: 200,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let d = 6;
    let mut cov_worst = 0.0f64;
    for _ in 0..5 {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let h = m.tr_mul(&m) + DMatrix::identity(d, d) * 0.5;
        let g = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(d, d, |r, c| if r == c { 1.5 } else { 0.0 } + rng.random_range(-0.25..0.25));
        cov_worst = cov_worst.max(argstep_covariance_error(&h, &g, &a, &cg)?);
    }

    let model = PushforwardModel::mlp_random(1, 2, 2, 0.8, 5);
    let latents = LatentSample::gaussian(8, 1, 6);
    let target = DiscreteMeasure::uniform((0..18).map(|_| rng.random_range(-1.0..1.0)).collect(), 2)?;
    let cost = GroundCost::squared_euclidean();
    let dm = model.num_params();
    let a = DMatrix::from_fn(dm, dm, |r, c| if r == c { 1.0 } else { 0.0 } + rng.random_range(-0.2..0.2));
    let problem = ProbeProblem {
        latents: &latents,
        target: &target,
        cost: &cost,
        esim: EsimConfig::with_gamma(1.0),
        cg: CgConfig {
            cg_tol: 1e-12,
            ..CgConfig::default()
        },
    };
    let dev = reparam_invariance_probe(&model, &problem, &a, 3, 1e-2)?;
    let dev_half = reparam_invariance_probe(&model, &problem, &a, 3, 5e-3)?;
    let ratio = dev_half / dev;
    Ok(Outcome::new(
        cov_worst <= 10.0 * cg.cg_tol && ratio <= 0.75,
        format!("argstep rel err {cov_worst:.2e} over 5 A; probe deviation {dev:.2e} -> {dev_half:.2e} (ratio {ratio:.3})"),
    ))
}

fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().amax()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn ac8() -> sing::Result<Outcome> {
    let model = PushforwardModel::mlp_random(1, 4, 1, 0.8, 11);
    let cost = GroundCost::squared_euclidean();
    let mut cfg = EsimConfig::with_gamma(1.0);
    cfg.mode = EsimMode::Explicit;
    let sizes = [16usize, 64, 256, 1024];
    let drifts: Vec<Vec<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..10u64)
            .map(|seed| {
                let (model, cost, cfg) = (&model, &cost, &cfg);
                s.spawn(move || -> sing::Result<Vec<f64>> {
                    let hs = sizes
                        .iter()
                        .map(|&n| {
                            let latents = LatentSample::gaussian(n, 1, 1000 * seed + n as u64);
                            Ok(assemble_esim(model, &latents, cost, cfg, None)?.matrix().expect("explicit").clone())
                        })
                        .collect::<sing::Result<Vec<_>>>()?;
                    Ok(hs.windows(2).map(|w| op_norm(&(&w[0] - &w[1]))).collect())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker")).collect::<sing::Result<Vec<_>>>()
    })?;
    let med: Vec<f64> = (0..3).map(|k| median(drifts.iter().map(|d| d[k]).collect())).collect();
    Ok(Outcome::new(
        med[0] > med[1] && med[1] > med[2],
        format!(
            "median drift 16->64 {:.3e}, 64->256 {:.3e}, 256->1024 {:.3e} over 10 seeds",
            med[0], med[1], med[2]
        ),
    ))
}

fn mixture_config(kind: &str, seed: u64) -> ExperimentConfig {
    let cg = if kind == "sing" { r#""cg": {"damping": 0.01},"# } else { "" };
    ExperimentConfig::from_json(&format!(
        r#"{{
            "dataset": {{"kind": "gaussian-mixture", "k": 4, "cov_scale": 0.2}},
            "model": {{"kind": "mlp", "hidden": 16}},
            "n_samples": 256, "gamma": 1.0, {cg}
            "optimizer": {{"kind": "{kind}"}},
            "iterations": 50, "seed": {seed}
        }}"#
    ))
    .expect("valid config")
}

fn run(cfg: &ExperimentConfig) -> sing::Result<RunRecord> {
    let record = run_problem(cfg, &build_problem(cfg)?)?;
    if let Some(e) = &record.error {
        return Err(sing::Error::RunAborted(e.clone()));
    }
    Ok(record)
}

/// SiNG and Adam on the four-Gaussian task, five seeds, run in parallel.
fn ac9(sing_records: &mut Vec<RunRecord>) -> sing::Result<Outcome> {
    let results: Vec<(RunRecord, RunRecord)> = std::thread::scope(|s| {
        let handles: Vec<_> = (1..=5u64)
            .map(|seed| {
                s.spawn(move || -> sing::Result<(RunRecord, RunRecord)> {
                    Ok((run(&mixture_config("sing", seed))?, run(&mixture_config("adam", seed))?))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker")).collect::<sing::Result<Vec<_>>>()
    })?;
    let at50 = |r: &RunRecord| r.rows.iter().find(|row| row.iter == 50).map(|row| row.objective).unwrap_or(f64::NAN);
    let sing_med = median(results.iter().map(|(s, _)| at50(s)).collect());
    let adam_med = median(results.iter().map(|(_, a)| at50(a)).collect());
    sing_records.extend(results.into_iter().map(|(s, _)| s));
    Ok(Outcome::new(
        sing_med <= adam_med,
        format!("median objective at iteration 50: SiNG {sing_med:.4e}, Adam {adam_med:.4e}"),
    ))
}

fn translation_runs(sing_records: &mut Vec<RunRecord>) -> sing::Result<()> {
    for (eta, seed) in [(0.5, 1u64), (1.0, 2), (1.5, 3)] {
        let cfg = ExperimentConfig::from_json(&format!(
            r#"{{
                "dataset": {{"kind": "translated-latents", "offset": [1.5, -0.5, 0.25]}},
                "model": {{"kind": "translation"}},
                "n_samples": 32, "gamma": 0.5,
                "optimizer": {{"kind": "sing", "step_size": {eta}}},
                "iterations": 5, "seed": {seed}
            }}"#
        ))?;
        sing_records.push(run(&cfg)?);
    }
    Ok(())
}

fn cli(args: &[&str]) -> sing::Result<Vec<u8>> {
    let out = Command::new(env!("CARGO_BIN_EXE_sing"))
        .args(args)
        .output()
        .map_err(|e| sing::Error::RunAborted(e.to_string()))?;
    if !out.status.success() {
        return Err(sing::Error::RunAborted(format!(
            "sing {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        )));
    }
    Ok(out.stdout)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap_or_default()))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

fn ac10() -> sing::Result<Outcome> {
    let tmp = tempfile::tempdir().map_err(|e| sing::Error::RunAborted(e.to_string()))?;
    let root = tmp.path();
    let configs = [
        (
            "sing",
            r#"{"dataset": {"kind": "two-rings", "radii": [1.0, 2.0], "noise": 0.05},
                "model": {"kind": "mlp", "hidden": 4}, "n_samples": 24, "gamma": 1.0,
                "optimizer": {"kind": "sing", "step_size": 0.5}, "cg": {"damping": 0.01},
                "iterations": 4, "seed": 7}"#,
        ),
        (
            "adam",
            r#"{"dataset": {"kind": "gaussian-mixture", "k": 3, "cov_scale": 0.3},
                "model": {"kind": "affine"}, "n_samples": 32, "gamma": 0.5,
                "optimizer": {"kind": "adam", "step_size": 0.05}, "iterations": 10, "seed": 7}"#,
        ),
    ];
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for (name, json) in configs {
        let path = root.join(format!("{name}.json"));
        std::fs::write(&path, json).map_err(|e| sing::Error::io(&path, e))?;
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = root.join(format!("{name}-{rep}"));
            let stdout = cli(&[
                "--threads",
                "1",
                "--out-dir",
                out.to_str().expect("utf-8 path"),
                "run",
                path.to_str().expect("utf-8 path"),
            ])?;
            let mut files = dir_bytes(&out);
            files.push(("stdout".into(), String::from_utf8_lossy(&stdout).replace(out.to_str().unwrap_or(""), "").into_bytes()));
            outputs.push(files);
        }
        compared += outputs[0].len();
        if outputs[0] != outputs[1] || outputs[0].len() < 4 {
            mismatches.push(format!("run {name}"));
        }
    }
    for suite in ["tiny", "full"] {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = root.join(format!("verify-{suite}-{rep}"));
            let stdout = cli(&["--threads", "1", "--out-dir", out.to_str().expect("utf-8 path"), "verify", "--suite", suite])?;
            let mut files = dir_bytes(&out);
            files.push(("stdout".into(), stdout));
            outputs.push(files);
        }
        compared += outputs[0].len();
        if outputs[0] != outputs[1] || outputs[0].len() < 2 {
            mismatches.push(format!("verify {suite}"));
        }
    }
    Ok(Outcome::new(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{compared} output streams identical across repeated invocations")
        } else {
            format!("differing outputs: {}", mismatches.join(", "))
        },
    ))
}

fn main() {
    let mut sing_records = Vec::new();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "Dirac divergence", timed(Some(Duration::from_secs(1)), ac1)));
    results.push((2, "translation-family eSIM", timed(Some(Duration::from_secs(10)), ac2)));
    results.push((3, "finite-difference parity", timed(Some(Duration::from_secs(300)), ac3)));
    results.push((4, "duality gap", timed(None, ac4)));
    results.push((5, "contraction rate", timed(None, ac5)));
    results.push((7, "reparameterization covariance", timed(None, ac7)));
    results.push((8, "eSIM sampling stability", timed(None, ac8)));
    results.push((9, "SiNG vs Adam", timed(Some(Duration::from_secs(600)), || ac9(&mut sing_records))));
    let extra = translation_runs(&mut sing_records);
    let checks: Vec<SingCheck> = sing_records.iter().flat_map(|r| r.sing_checks.iter().cloned()).collect();
    let runs = sing_records.len();
    results.push((
        6,
        "SiNG direction identities",
        timed(None, || {
            extra?;
            ac6(&checks, runs)
        }),
    ));
    results.push((10, "determinism", timed(None, ac10)));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, title, out) in &results {
        let tag = if out.passed { "PASS" } else { "FAIL" };
        if !out.passed {
            failed += 1;
        }
        println!("{tag} AC{id} {title}: {}", out.detail);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Distribution-matching experiments: configuration, datasets, the
//! optimization loop, and run records.

mod output;
pub mod verify;

pub use output::{emit_csv, emit_svg, emit_svg_multi, read_csv, CSV_HEADER};

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esim::{assemble_esim, divergence_value_grad, EsimConfig, EsimMode, EsimOperator};
use crate::geometry::{DiscreteMeasure, GroundCost};
use crate::optim::{sing_direction, CgConfig, LinearOperator, OptimizerKind, OptimizerState};
use crate::pushforward::{LatentSample, PushforwardModel};
use crate::sinkhorn::SinkhornConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// `k` isotropic Gaussians. Means default to `k` points evenly spaced on
    /// a circle of the given radius.
    GaussianMixture {
        k: usize,
        #[serde(default)]
        means: Option<Vec<Vec<f64>>>,
        #[serde(default = "default_radius")]
        radius: f64,
        cov_scale: f64,
    },
    /// Concentric rings in the plane, picked uniformly, with Gaussian noise.
    TwoRings { radii: Vec<f64>, noise: f64 },
    /// Point cloud file, `x0,..,x{q-1}[,w]` with a header row.
    Csv { path: PathBuf },
    /// The latent sample shifted by `offset`; reachable exactly by the
    /// translation model.
    TranslatedLatents { offset: Vec<f64> },
}

fn default_radius() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `T_θ(z) = z + θ`, starting at `init` (zeros by default).
    Translation {
        #[serde(default)]
        init: Option<Vec<f64>>,
    },
    /// `T(z) = W z + b` starting at `W = I`, `b = 0`.
    Affine,
    /// One hidden tanh layer with Gaussian initialization.
    Mlp {
        hidden: usize,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
    },
}

fn default_init_scale() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// SiNG `η` (default 1) or baseline learning rate (default 1e-3).
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Shorten SiNG steps that would overshoot the damped Newton step.
    #[serde(default = "default_true")]
    pub newton_cap: bool,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgSettings {
    /// `None` uses `1e-6 · trace(H) / d`.
    #[serde(default)]
    pub damping: Option<f64>,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_max_iters")]
    pub cg_max_iters: usize,
}

fn default_cg_tol() -> f64 {
    1e-10
}
fn default_cg_max_iters() -> usize {
    1000
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            damping: None,
            cg_tol: default_cg_tol(),
            cg_max_iters: default_cg_max_iters(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub n_samples: usize,
    /// Size of the sampled target cloud; defaults to `n_samples`.
    #[serde(default)]
    pub target_samples: Option<usize>,
    /// Latent dimension; defaults to the data dimension.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    pub gamma: f64,
    /// SIM regularization; defaults to `gamma`.
    #[serde(default)]
    pub sim_gamma: Option<f64>,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub cg: CgSettings,
    pub iterations: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_sinkhorn_tol")]
    pub sinkhorn_tol: f64,
    #[serde(default = "default_sinkhorn_max_iters")]
    pub sinkhorn_max_iters: usize,
    #[serde(default = "default_jac_tol")]
    pub jac_tol: f64,
    /// Redraw the latent sample every iteration.
    #[serde(default)]
    pub resample_latents: bool,
    /// Fill the `seconds` column; off by default so outputs are reproducible.
    #[serde(default)]
    pub record_wall_clock: bool,
}

fn default_eval_every() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_sinkhorn_tol() -> f64 {
    1e-9
}
fn default_sinkhorn_max_iters() -> usize {
    10_000
}
fn default_jac_tol() -> f64 {
    1e-8
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let positive = [
            ("gamma", self.gamma),
            ("sim_gamma", self.sim_gamma.unwrap_or(1.0)),
            ("sinkhorn_tol", self.sinkhorn_tol),
            ("jac_tol", self.jac_tol),
            ("cg_tol", self.cg.cg_tol),
            ("step_size", self.optimizer.step_size.unwrap_or(1.0)),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let counts = [
            ("n_samples", self.n_samples),
            ("target_samples", self.target_samples.unwrap_or(1)),
            ("latent_dim", self.latent_dim.unwrap_or(1)),
            ("eval_every", self.eval_every),
            ("sinkhorn_max_iters", self.sinkhorn_max_iters),
            ("cg_max_iters", self.cg.cg_max_iters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if let Some(d) = self.cg.damping {
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!("damping must be >= 0, got {d}"));
            }
        }
        match &self.dataset {
            DatasetConfig::GaussianMixture {
                k, means, radius, cov_scale,
            } => {
                if *k == 0 || !(*cov_scale > 0.0) || !(*radius >= 0.0) {
                    return bad("gaussian-mixture needs k > 0, cov_scale > 0, radius >= 0".into());
                }
                if let Some(means) = means {
                    if means.len() != *k || means.iter().any(|m| m.is_empty() || m.len() != means[0].len()) {
                        return bad("gaussian-mixture means must be k rows of equal length".into());
                    }
                }
            }
            DatasetConfig::TwoRings { radii, noise } => {
                if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) || !(*noise >= 0.0) {
                    return bad("two-rings needs positive radii and noise >= 0".into());
                }
            }
            DatasetConfig::Csv { .. } => {}
            DatasetConfig::TranslatedLatents { offset } => {
                if offset.is_empty() {
                    return bad("translated-latents needs a nonempty offset".into());
                }
            }
        }
        if let ModelConfig::Mlp { hidden, init_scale } = &self.model {
            if *hidden == 0 || !(*init_scale >= 0.0) {
                return bad("mlp needs hidden > 0 and init_scale >= 0".into());
            }
        }
        Ok(())
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            gamma: self.gamma,
            tol: self.sinkhorn_tol,
            max_iters: self.sinkhorn_max_iters,
            check_every: 1,
        }
    }

    pub fn esim(&self) -> EsimConfig {
        EsimConfig {
            sinkhorn: SinkhornConfig {
                gamma: self.sim_gamma.unwrap_or(self.gamma),
                ..self.sinkhorn()
            },
            jac_tol: self.jac_tol,
            ..EsimConfig::default()
        }
    }

    fn step_size(&self) -> f64 {
        self.optimizer.step_size.unwrap_or(match self.optimizer.kind {
            OptimizerKind::Sing => 1.0,
            _ => 1e-3,
        })
    }
}

/// Everything a run needs besides the optimizer.
#[derive(Clone, Debug)]
pub struct Problem {
    pub model: PushforwardModel,
    pub latents: LatentSample,
    pub target: DiscreteMeasure,
    pub cost: GroundCost,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TARGET_STREAM: u64 = 1;
const LATENT_STREAM: u64 = 2;
const MODEL_STREAM: u64 = 3;

fn gaussian_latents(n: usize, dim: usize, seed: u64, stream: u64) -> LatentSample {
    let mut rng = stream_rng(seed, stream);
    let points = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut s = LatentSample::from_points(points, dim).expect("consistent latent shape");
    s.seed = seed;
    s
}

/// Builds the target cloud, latent sample and initial model from `cfg`.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    cfg.validate()?;
    let n_target = cfg.target_samples.unwrap_or(cfg.n_samples);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let target_from = |latents: Option<&LatentSample>| -> Result<DiscreteMeasure> {
        match &cfg.dataset {
            DatasetConfig::GaussianMixture {
                k, means, radius, cov_scale,
            } => {
                let means: Vec<Vec<f64>> = match means {
                    Some(m) => m.clone(),
                    None => (0..*k)
                        .map(|c| {
                            let a = 2.0 * std::f64::consts::PI * c as f64 / *k as f64;
                            vec![radius * a.cos(), radius * a.sin()]
                        })
                        .collect(),
                };
                let dim = means[0].len();
                let mut rng = stream_rng(cfg.seed, TARGET_STREAM);
                let mut pts = Vec::with_capacity(n_target * dim);
                for _ in 0..n_target {
                    let c = rng.random_range(0..*k);
                    for r in 0..dim {
                        pts.push(means[c][r] + cov_scale * normal(&mut rng));
                    }
                }
                DiscreteMeasure::uniform(pts, dim)
            }
            DatasetConfig::TwoRings { radii, noise } => {
                let mut rng = stream_rng(cfg.seed, TARGET_STREAM);
                let mut pts = Vec::with_capacity(n_target * 2);
                for _ in 0..n_target {
                    let r = radii[rng.random_range(0..radii.len())];
                    let a = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                    pts.push(r * a.cos() + noise * normal(&mut rng));
                    pts.push(r * a.sin() + noise * normal(&mut rng));
                }
                DiscreteMeasure::uniform(pts, 2)
            }
            DatasetConfig::Csv { path } => DiscreteMeasure::from_csv_path(path),
            DatasetConfig::TranslatedLatents { offset } => {
                let l = latents.expect("latents drawn first");
                let pts = l
                    .points()
                    .chunks(l.dim())
                    .flat_map(|z| z.iter().zip(offset).map(|(a, b)| a + b).collect::<Vec<_>>())
                    .collect();
                DiscreteMeasure::uniform(pts, l.dim())
            }
        }
    };

    let (target, latents) = match &cfg.dataset {
        DatasetConfig::TranslatedLatents { offset } => {
            let latents = gaussian_latents(cfg.n_samples, offset.len(), cfg.seed, LATENT_STREAM);
            (target_from(Some(&latents))?, latents)
        }
        _ => {
            let target = target_from(None)?;
            let latent_dim = cfg.latent_dim.unwrap_or(target.dim());
            (target, gaussian_latents(cfg.n_samples, latent_dim, cfg.seed, LATENT_STREAM))
        }
    };

    let q = target.dim();
    let qbar = latents.dim();
    let model = match &cfg.model {
        ModelConfig::Translation { init } => {
            if qbar != q {
                return Err(Error::InvalidConfig(format!(
                    "translation model needs latent_dim = data dim ({q}), got {qbar}"
                )));
            }
            let init = init.clone().unwrap_or_else(|| vec![0.0; q]);
            if init.len() != q {
                return Err(Error::InvalidConfig(format!("translation init must have length {q}")));
            }
            PushforwardModel::translation(&init)
        }
        ModelConfig::Affine => {
            let w = nalgebra::DMatrix::from_fn(q, qbar, |r, c| if r == c { 1.0 } else { 0.0 });
            PushforwardModel::affine(w, DVector::zeros(q))?
        }
        ModelConfig::Mlp { hidden, init_scale } => {
            let seed = stream_rng(cfg.seed, MODEL_STREAM).random::<u64>();
            PushforwardModel::mlp_random(qbar, *hidden, q, *init_scale, seed)
        }
    };
    Ok(Problem {
        model,
        latents,
        target,
        cost: GroundCost::squared_euclidean(),
    })
}

/// `S(T_θ♯μ̄, target)` and its gradient.
pub fn objective_grad(
    model: &PushforwardModel,
    latents: &LatentSample,
    target: &DiscreteMeasure,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
) -> Result<(f64, DVector<f64>)> {
    let out = divergence_value_grad(model, latents, target, cost, cfg, [None; 3])?;
    Ok((out.value, out.grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub iter: usize,
    pub seconds: Option<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub eig_min: Option<f64>,
    pub eig_max: Option<f64>,
    pub step_norm: Option<f64>,
}

/// Per-step check of the SiNG direction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingCheck {
    pub iter: usize,
    /// `⟨(H + δI)d, d⟩`, expected 2.
    pub scale: f64,
    /// `⟨d, ∇F⟩`, expected negative.
    pub descent: f64,
    pub cg_residual: f64,
    pub cg_tol: f64,
    pub damping: f64,
    /// `‖∇S(·, ᾱ_{θᵗ})‖` at `θᵗ`.
    pub center_grad_norm: f64,
}

impl SingCheck {
    pub fn passed(&self) -> bool {
        (self.scale - 2.0).abs() <= 10.0 * self.cg_tol && self.descent < 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub optimizer: String,
    pub rows: Vec<RunRow>,
    pub sing_checks: Vec<SingCheck>,
    pub final_theta: DVector<f64>,
    /// Set when the run aborted; `rows` then holds the partial record.
    pub error: Option<String>,
    pub warnings: Vec<String>,
}

impl RunRecord {
    pub fn final_objective(&self) -> Option<f64> {
        self.rows.last().map(|r| r.objective)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "optimizer": self.optimizer,
            "iterations": self.rows.last().map(|r| r.iter),
            "final_objective": self.final_objective(),
            "final_theta": self.final_theta.as_slice(),
            "sing_checks_passed": self.sing_checks.iter().all(SingCheck::passed),
            "sing_checks": self.sing_checks,
            "warnings": self.warnings,
            "error": self.error,
        })
    }
}

/// Runs `op` and, on a solver failure, once more with 4× the budgets.
fn with_retry<T>(
    sinkhorn: &SinkhornConfig,
    esim: &EsimConfig,
    warnings: &mut Vec<String>,
    mut op: impl FnMut(&SinkhornConfig, &EsimConfig) -> Result<T>,
) -> Result<T> {
    match op(sinkhorn, esim) {
        Ok(v) => Ok(v),
        Err(e @ (Error::NotConverged { .. } | Error::JacobianNotConverged { .. })) => {
            warnings.push(format!("{e}; retrying with 4x budget"));
            let s = SinkhornConfig {
                max_iters: sinkhorn.max_iters * 4,
                ..*sinkhorn
            };
            let mut e4 = esim.clone();
            e4.sinkhorn.max_iters *= 4;
            e4.jac_max_iters *= 4;
            op(&s, &e4)
        }
        Err(e) => Err(e),
    }
}

/// Runs the optimization loop without touching the filesystem.
pub fn run_problem(cfg: &ExperimentConfig, problem: &Problem) -> Result<RunRecord> {
    let sinkhorn = cfg.sinkhorn();
    let mut esim_cfg = cfg.esim();
    esim_cfg.mode = EsimMode::Auto;
    let kind = cfg.optimizer.kind;
    let eta = cfg.step_size();
    let mut state = OptimizerState::new(kind, problem.model.num_params()).with_step_size(eta);
    state.beta1 = cfg.optimizer.beta1;
    state.beta2 = cfg.optimizer.beta2;
    state.eps = cfg.optimizer.eps;

    let start = Instant::now();
    let mut model = problem.model.clone();
    let mut latents = problem.latents.clone();
    let mut record = RunRecord {
        optimizer: kind.name().to_string(),
        rows: Vec::new(),
        sing_checks: Vec::new(),
        final_theta: model.theta(),
        error: None,
        warnings: Vec::new(),
    };
    let mut warm: [Option<DVector<f64>>; 3] = [None, None, None];
    let mut warm_sim: Option<DVector<f64>> = None;

    for iter in 0..=cfg.iterations {
        if cfg.resample_latents && iter > 0 {
            latents = gaussian_latents(latents.len(), latents.dim(), cfg.seed.wrapping_add(iter as u64), LATENT_STREAM);
            warm = [None, None, None];
            warm_sim = None;
        }
        let evaluated = with_retry(&sinkhorn, &esim_cfg, &mut record.warnings, |s, _| {
            divergence_value_grad(
                &model,
                &latents,
                &problem.target,
                &problem.cost,
                s,
                [warm[0].as_ref(), warm[1].as_ref(), warm[2].as_ref()],
            )
        });
        let value = match evaluated {
            Ok(v) => v,
            Err(e) => {
                record.error = Some(e.to_string());
                break;
            }
        };
        let grad_norm = value.grad.norm();
        let theta = model.theta();
        let log_row = iter % cfg.eval_every == 0 || iter == cfg.iterations;
        let seconds = cfg.record_wall_clock.then(|| start.elapsed().as_secs_f64());

        if iter == cfg.iterations {
            record.rows.push(RunRow {
                iter,
                seconds,
                objective: value.value,
                grad_norm,
                eig_min: None,
                eig_max: None,
                step_norm: None,
            });
            break;
        }

        let mut eig = None;
        let input = if kind == OptimizerKind::Sing {
            let op: Result<EsimOperator> = with_retry(&sinkhorn, &esim_cfg, &mut record.warnings, |_, e| {
                assemble_esim(&model, &latents, &problem.cost, e, warm_sim.as_ref())
            });
            let op = match op {
                Ok(op) => op,
                Err(e) => {
                    record.error = Some(e.to_string());
                    break;
                }
            };
            if !op.center_check_passed {
                record.warnings.push(format!(
                    "iteration {iter}: gradient at the SIM center is {:e}",
                    op.center_grad_norm
                ));
            }
            if log_row {
                eig = op.eigen_range();
            }
            let damping = cfg.cg.damping.unwrap_or_else(|| op.damping_hint());
            let cg = CgConfig {
                damping,
                cg_tol: cfg.cg.cg_tol,
                cg_max_iters: cfg.cg.cg_max_iters,
            };
            let dir = match sing_direction(&op, &value.grad, &cg) {
                Ok(d) => d,
                Err(e) => {
                    record.error = Some(e.to_string());
                    break;
                }
            };
            if !dir.zero_grad {
                let hd = op.apply(&dir.direction) + damping * &dir.direction;
                record.sing_checks.push(SingCheck {
                    iter,
                    scale: hd.dot(&dir.direction),
                    descent: dir.direction.dot(&value.grad),
                    cg_residual: dir.cg.residual,
                    cg_tol: cg.cg_tol,
                    damping,
                    center_grad_norm: op.center_grad_norm,
                });
            }
            warm_sim = Some(op.potential.clone());
            if cfg.optimizer.newton_cap {
                dir.capped(eta)
            } else {
                dir.direction
            }
        } else {
            value.grad.clone()
        };

        let (next_theta, next_state) = state.step(&theta, &input)?;
        let step_norm = (&next_theta - &theta).norm();
        if log_row {
            record.rows.push(RunRow {
                iter,
                seconds,
                objective: value.value,
                grad_norm,
                eig_min: eig.map(|e| e.0),
                eig_max: eig.map(|e| e.1),
                step_norm: Some(step_norm),
            });
        }
        state = next_state;
        model = model.with_theta(next_theta.as_slice())?;
        record.final_theta = next_theta;
        let [p0, p1, p2] = value.potentials;
        warm = [Some(p0), Some(p1), Some(p2)];
    }
    Ok(record)
}

/// Builds the problem from `cfg`, runs it, and writes `run.csv`, `loss.svg`
/// and `summary.json` to the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let problem = build_problem(cfg)?;
    let record = run_problem(cfg, &problem)?;
    write_outputs(&record, &cfg.output_dir)?;
    Ok(record)
}

pub fn write_outputs(record: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if record.rows.is_empty() {
        let path = dir.join("summary.json");
        write_file(&path, &pretty(&record.summary_json())?)?;
        return Err(Error::EmptyRecord);
    }
    emit_csv(record, &dir.join("run.csv"))?;
    emit_svg(record, &dir.join("loss.svg"))?;
    write_file(&dir.join("summary.json"), &pretty(&record.summary_json())?)
}

pub(crate) fn pretty(v: &serde_json::Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Explicit eSIM at the configuration's initial parameters.
pub fn export_sim(cfg: &ExperimentConfig) -> Result<EsimOperator> {
    let problem = build_problem(cfg)?;
    let mut esim_cfg = cfg.esim();
    esim_cfg.mode = EsimMode::Explicit;
    assemble_esim(&problem.model, &problem.latents, &problem.cost, &esim_cfg, None)
}

//! Parametric push-forward maps `T_θ: Z → X` with exact first derivatives and
//! second-derivative contractions in `θ`.
//!
//! Flat parameter order:
//! - affine: `W` row-major, then `b` (only `b` when the weight is frozen);
//! - mlp: `W₁` row-major, `b₁`, `W₂` row-major, `b₂`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::DiscreteMeasure;

/// `T(z) = W z + b`. With `train_weight == false` only `b` is a parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub train_weight: bool,
}

/// `T(z) = W₂ tanh(W₁ z + b₁) + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PushforwardModel {
    Affine(AffineMap),
    Mlp(Mlp),
}

impl PushforwardModel {
    /// Translation family `T_θ(z) = z + θ` (identity weight, frozen).
    pub fn translation(offset: &[f64]) -> Self {
        let q = offset.len();
        PushforwardModel::Affine(AffineMap {
            weight: DMatrix::identity(q, q),
            bias: DVector::from_column_slice(offset),
            train_weight: false,
        })
    }

    pub fn affine(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        check_dim(weight.nrows(), bias.len(), "affine bias")?;
        Ok(PushforwardModel::Affine(AffineMap {
            weight,
            bias,
            train_weight: true,
        }))
    }

    pub fn mlp(w1: DMatrix<f64>, b1: DVector<f64>, w2: DMatrix<f64>, b2: DVector<f64>) -> Result<Self> {
        check_dim(w1.nrows(), b1.len(), "mlp hidden bias")?;
        check_dim(w1.nrows(), w2.ncols(), "mlp hidden width")?;
        check_dim(w2.nrows(), b2.len(), "mlp output bias")?;
        Ok(PushforwardModel::Mlp(Mlp { w1, b1, w2, b2 }))
    }

    /// MLP with i.i.d. `N(0, scale²)` weights and biases.
    pub fn mlp_random(latent: usize, hidden: usize, output: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            })
        };
        let w1 = draw(hidden, latent);
        let b1 = draw(hidden, 1).column(0).into_owned();
        let w2 = draw(output, hidden);
        let b2 = draw(output, 1).column(0).into_owned();
        PushforwardModel::Mlp(Mlp { w1, b1, w2, b2 })
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            PushforwardModel::Affine(m) => m.weight.ncols(),
            PushforwardModel::Mlp(m) => m.w1.ncols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            PushforwardModel::Affine(m) => m.weight.nrows(),
            PushforwardModel::Mlp(m) => m.w2.nrows(),
        }
    }

    /// Number of parameters `d`.
    pub fn num_params(&self) -> usize {
        match self {
            PushforwardModel::Affine(m) => m.bias.len() + if m.train_weight { m.weight.len() } else { 0 },
            PushforwardModel::Mlp(m) => m.w1.len() + m.b1.len() + m.w2.len() + m.b2.len(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PushforwardModel::Affine(_) => "affine",
            PushforwardModel::Mlp(_) => "mlp",
        }
    }

    pub fn theta(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        match self {
            PushforwardModel::Affine(m) => {
                if m.train_weight {
                    push_row_major(&mut out, &m.weight);
                }
                out.extend(m.bias.iter());
            }
            PushforwardModel::Mlp(m) => {
                push_row_major(&mut out, &m.w1);
                out.extend(m.b1.iter());
                push_row_major(&mut out, &m.w2);
                out.extend(m.b2.iter());
            }
        }
        DVector::from_vec(out)
    }

    /// Same architecture with parameters replaced by `theta`.
    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        check_dim(self.num_params(), theta.len(), "parameter vector")?;
        let mut rest = theta;
        let mut take = |len: usize| {
            let (head, tail) = rest.split_at(len);
            rest = tail;
            head
        };
        Ok(match self {
            PushforwardModel::Affine(m) => {
                let weight = if m.train_weight {
                    DMatrix::from_row_slice(m.weight.nrows(), m.weight.ncols(), take(m.weight.len()))
                } else {
                    m.weight.clone()
                };
                PushforwardModel::Affine(AffineMap {
                    weight,
                    bias: DVector::from_column_slice(take(m.bias.len())),
                    train_weight: m.train_weight,
                })
            }
            PushforwardModel::Mlp(m) => {
                let w1 = DMatrix::from_row_slice(m.w1.nrows(), m.w1.ncols(), take(m.w1.len()));
                let b1 = DVector::from_column_slice(take(m.b1.len()));
                let w2 = DMatrix::from_row_slice(m.w2.nrows(), m.w2.ncols(), take(m.w2.len()));
                let b2 = DVector::from_column_slice(take(m.b2.len()));
                PushforwardModel::Mlp(Mlp { w1, b1, w2, b2 })
            }
        })
    }

    pub fn forward(&self, z: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.latent_dim(), z.len(), "latent point")?;
        Ok(self.forward_unchecked(z))
    }

    /// `∂T_θ(z)/∂θ`, a `q × d` matrix in flat parameter order.
    pub fn param_jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.latent_dim(), z.len(), "latent point")?;
        Ok(self.jacobian_unchecked(z))
    }

    /// `[∇²_θ (v · T_θ(z))] u`.
    pub fn param_hvp(&self, z: &[f64], v: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.latent_dim(), z.len(), "latent point")?;
        check_dim(self.output_dim(), v.len(), "output covector")?;
        check_dim(self.num_params(), u.len(), "parameter direction")?;
        Ok(self.hvp_unchecked(z, v, u))
    }

    /// `∇²_θ (v · T_θ(z))` as a dense symmetric `d × d` matrix.
    pub fn param_hessian_contract(&self, z: &[f64], v: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.latent_dim(), z.len(), "latent point")?;
        check_dim(self.output_dim(), v.len(), "output covector")?;
        Ok(self.hessian_contract_unchecked(z, v))
    }

    /// True when `T_θ(z)` is affine in `θ`, so all second derivatives vanish.
    pub fn is_linear_in_params(&self) -> bool {
        matches!(self, PushforwardModel::Affine(_))
    }

    /// Uniform measure on `{T_θ(zᵢ)}`.
    pub fn push_measure(&self, latents: &LatentSample) -> Result<DiscreteMeasure> {
        check_dim(self.latent_dim(), latents.dim(), "latent dimension")?;
        let mut points = Vec::with_capacity(latents.len() * self.output_dim());
        for i in 0..latents.len() {
            points.extend(self.forward_unchecked(latents.point(i)).iter());
        }
        DiscreteMeasure::uniform(points, self.output_dim())
    }

    pub(crate) fn forward_unchecked(&self, z: &[f64]) -> DVector<f64> {
        let z = DVector::from_column_slice(z);
        match self {
            PushforwardModel::Affine(m) => &m.weight * z + &m.bias,
            PushforwardModel::Mlp(m) => {
                let h = (&m.w1 * z + &m.b1).map(f64::tanh);
                &m.w2 * h + &m.b2
            }
        }
    }

    pub(crate) fn jacobian_unchecked(&self, z: &[f64]) -> DMatrix<f64> {
        let q = self.output_dim();
        let mut jac = DMatrix::zeros(q, self.num_params());
        match self {
            PushforwardModel::Affine(m) => {
                let mut offset = 0;
                if m.train_weight {
                    let cols = m.weight.ncols();
                    for r in 0..q {
                        for (s, zs) in z.iter().enumerate() {
                            jac[(r, r * cols + s)] = *zs;
                        }
                    }
                    offset = m.weight.len();
                }
                for r in 0..q {
                    jac[(r, offset + r)] = 1.0;
                }
            }
            PushforwardModel::Mlp(m) => {
                let lay = MlpLayout::of(m);
                let h = m.hidden(z);
                for r in 0..q {
                    for k in 0..lay.hidden {
                        let dk = m.w2[(r, k)] * (1.0 - h[k] * h[k]);
                        for (s, zs) in z.iter().enumerate() {
                            jac[(r, lay.w1(k, s))] = dk * zs;
                        }
                        jac[(r, lay.b1(k))] = dk;
                        jac[(r, lay.w2(r, k))] = h[k];
                    }
                    jac[(r, lay.b2(r))] = 1.0;
                }
            }
        }
        jac
    }

    pub(crate) fn hvp_unchecked(&self, z: &[f64], v: &[f64], u: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.num_params());
        let PushforwardModel::Mlp(m) = self else {
            return out;
        };
        let lay = MlpLayout::of(m);
        let h = m.hidden(z);
        for k in 0..lay.hidden {
            let d1 = 1.0 - h[k] * h[k];
            let d2 = -2.0 * h[k] * d1;
            // u-directional change of the pre-activation a_k
            let da = z.iter().enumerate().map(|(s, zs)| u[lay.w1(k, s)] * zs).sum::<f64>() + u[lay.b1(k)];
            // v-weighted outgoing weight of unit k, and its u-directional change
            let back: f64 = (0..lay.output).map(|r| v[r] * m.w2[(r, k)]).sum();
            let dback: f64 = (0..lay.output).map(|r| v[r] * u[lay.w2(r, k)]).sum();
            let coef = back * d2 * da + d1 * dback;
            for (s, zs) in z.iter().enumerate() {
                out[lay.w1(k, s)] = coef * zs;
            }
            out[lay.b1(k)] = coef;
            for r in 0..lay.output {
                out[lay.w2(r, k)] = v[r] * d1 * da;
            }
        }
        out
    }

    pub(crate) fn hessian_contract_unchecked(&self, z: &[f64], v: &[f64]) -> DMatrix<f64> {
        let d = self.num_params();
        let mut out = DMatrix::zeros(d, d);
        let PushforwardModel::Mlp(m) = self else {
            return out;
        };
        let lay = MlpLayout::of(m);
        let h = m.hidden(z);
        // Indices of the first-layer parameters of unit k, paired with ∂a_k/∂θ.
        let first_layer = |k: usize| {
            z.iter()
                .enumerate()
                .map(move |(s, zs)| (lay.w1(k, s), *zs))
                .chain(std::iter::once((lay.b1(k), 1.0)))
        };
        for k in 0..lay.hidden {
            let d1 = 1.0 - h[k] * h[k];
            let d2 = -2.0 * h[k] * d1;
            let back: f64 = (0..lay.output).map(|r| v[r] * m.w2[(r, k)]).sum();
            for (p, xp) in first_layer(k) {
                for (p2, xp2) in first_layer(k) {
                    out[(p, p2)] = back * d2 * (xp * xp2);
                }
                for r in 0..lay.output {
                    let val = v[r] * d1 * xp;
                    out[(p, lay.w2(r, k))] = val;
                    out[(lay.w2(r, k), p)] = val;
                }
            }
        }
        out
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let (hidden, frozen_weight) = match self {
            PushforwardModel::Affine(m) => {
                let mut w = Vec::new();
                if !m.train_weight {
                    push_row_major(&mut w, &m.weight);
                }
                (None, (!m.train_weight).then_some(w))
            }
            PushforwardModel::Mlp(m) => (Some(m.w1.nrows()), None),
        };
        ModelCheckpoint {
            kind: self.kind_name().to_string(),
            dims: ModelDims {
                latent: self.latent_dim(),
                output: self.output_dim(),
                hidden,
            },
            theta: self.theta().as_slice().to_vec(),
            frozen_weight,
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let ModelDims { latent, output, hidden } = ckpt.dims;
        let template = match (ckpt.kind.as_str(), hidden) {
            ("affine", None) => match &ckpt.frozen_weight {
                Some(w) => {
                    check_dim(output * latent, w.len(), "frozen weight")?;
                    PushforwardModel::Affine(AffineMap {
                        weight: DMatrix::from_row_slice(output, latent, w),
                        bias: DVector::zeros(output),
                        train_weight: false,
                    })
                }
                None => PushforwardModel::affine(DMatrix::zeros(output, latent), DVector::zeros(output))?,
            },
            ("mlp", Some(h)) => PushforwardModel::Mlp(Mlp {
                w1: DMatrix::zeros(h, latent),
                b1: DVector::zeros(h),
                w2: DMatrix::zeros(output, h),
                b2: DVector::zeros(output),
            }),
            (kind, _) => {
                return Err(Error::InvalidConfig(format!(
                    "unknown model kind {kind:?} or missing/extra hidden width"
                )))
            }
        };
        template.with_theta(&ckpt.theta)
    }
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
}

impl Mlp {
    fn hidden(&self, z: &[f64]) -> DVector<f64> {
        (&self.w1 * DVector::from_column_slice(z) + &self.b1).map(f64::tanh)
    }
}

#[derive(Clone, Copy)]
struct MlpLayout {
    latent: usize,
    hidden: usize,
    output: usize,
}

impl MlpLayout {
    fn of(m: &Mlp) -> Self {
        Self {
            latent: m.w1.ncols(),
            hidden: m.w1.nrows(),
            output: m.w2.nrows(),
        }
    }

    fn w1(&self, k: usize, s: usize) -> usize {
        k * self.latent + s
    }

    fn b1(&self, k: usize) -> usize {
        self.hidden * self.latent + k
    }

    fn w2(&self, r: usize, k: usize) -> usize {
        self.hidden * (self.latent + 1) + r * self.hidden + k
    }

    fn b2(&self, r: usize) -> usize {
        self.hidden * (self.latent + 1) + self.output * self.hidden + r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub latent: usize,
    pub output: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

/// JSON checkpoint `{kind, dims, theta}`; frozen affine weights ride along.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub kind: String,
    pub dims: ModelDims,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_weight: Option<Vec<f64>>,
}

/// Latent points `zᵢ ~ N(0, I)`, reproducible from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    points: Vec<f64>,
    dim: usize,
    pub seed: u64,
}

impl LatentSample {
    pub fn gaussian(n: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { points, dim, seed }
    }

    /// Explicit latent points; `seed` is recorded as 0.
    pub fn from_points(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidMeasure("latent points do not match dimension".into()));
        }
        Ok(Self { points, dim, seed: 0 })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

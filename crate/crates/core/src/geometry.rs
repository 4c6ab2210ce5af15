//! Discrete measures, ground costs and cost matrices.
//!
//! Every cost here has the form `c(x, y) = ‖φ(x) − φ(y)‖²` where `φ` is either
//! the identity (squared Euclidean) or a frozen embedding. Derivatives are
//! taken in the first argument; symmetry gives the second-argument ones:
//! `∇₂c(x, y) = ∇₁c(y, x)` and `∇₂₂c(x, y) = ∇₁₁c(y, x)`.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A weighted point cloud `Σ wᵢ δ_{xᵢ}` with points stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<f64>,
    dim: usize,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Uniform weights `1/n` on the given rows.
    pub fn uniform(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates do not form points of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        Self::weighted(points, dim, vec![1.0 / n as f64; n])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            check_dim(dim, row.len(), "measure point")?;
            flat.extend_from_slice(row);
        }
        Self::uniform(flat, dim)
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::uniform(point.to_vec(), point.len())
    }

    /// Arbitrary nonnegative weights summing to one.
    pub fn weighted(points: Vec<f64>, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates do not form points of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        check_dim(n, weights.len(), "measure weights")?;
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite point coordinate".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            points,
            dim,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
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

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim);
        for (i, &w) in self.weights.iter().enumerate() {
            for (k, x) in self.point(i).iter().enumerate() {
                mean[k] += w * x;
            }
        }
        mean
    }

    /// Same weights, every point shifted by `delta`.
    pub fn translated(&self, delta: &[f64]) -> Result<Self> {
        check_dim(self.dim, delta.len(), "translation")?;
        let points = self
            .points
            .chunks(self.dim)
            .flat_map(|p| p.iter().zip(delta).map(|(x, d)| x + d))
            .collect();
        Self::weighted(points, self.dim, self.weights.clone())
    }

    /// Reads a cloud from CSV: header `x0,x1,...[,w]`, one point per row.
    /// A trailing `w` column holds weights, which are normalized to sum to one.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let parse_err = |msg: String| Error::parse("<csv>", msg);
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
        let has_weight = headers.iter().next_back() == Some("w");
        let dim = headers.len() - usize::from(has_weight);
        for (k, h) in headers.iter().take(dim).enumerate() {
            if h != format!("x{k}") {
                return Err(parse_err(format!("unexpected header field {h:?} at column {k}")));
            }
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| parse_err(e.to_string()))?;
            if record.len() != headers.len() {
                return Err(parse_err(format!("row {}: expected {} fields", row + 1, headers.len())));
            }
            for (k, field) in record.iter().enumerate() {
                let value: f64 = field
                    .parse()
                    .map_err(|_| parse_err(format!("row {}: bad number {field:?}", row + 1)))?;
                if k < dim {
                    points.push(value);
                } else {
                    weights.push(value);
                }
            }
        }
        if points.is_empty() {
            return Err(parse_err("no points".into()));
        }
        if has_weight {
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(parse_err("weights must have positive sum".into()));
            }
            let weights = weights.iter().map(|w| w / total).collect();
            Self::weighted(points, dim, weights)
        } else {
            Self::uniform(points, dim)
        }
    }

    /// Writes the cloud in the same CSV format (always with a weight column).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",w\n");
        for i in 0..self.len() {
            for x in self.point(i) {
                out.push_str(&format!("{x:e},"));
            }
            out.push_str(&format!("{:e}\n", self.weights[i]));
        }
        out
    }
}

/// A frozen map `φ: R^q → R^p` used by embedded costs.
pub trait Embedding: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> DVector<f64>;
    /// `p × q` Jacobian at `x`.
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64>;
    /// `Σₖ vₖ ∇²φₖ(x)`, a symmetric `q × q` matrix.
    fn hessian_contract(&self, x: &[f64], v: &[f64]) -> DMatrix<f64>;
}

/// `φ(x) = A x`.
#[derive(Clone, Debug)]
pub struct LinearEmbedding {
    pub matrix: DMatrix<f64>,
}

impl Embedding for LinearEmbedding {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[f64]) -> DVector<f64> {
        &self.matrix * DVector::from_column_slice(x)
    }

    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }

    fn hessian_contract(&self, x: &[f64], _v: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }
}

/// `φ(x) = tanh(A x + b)`, a frozen single-layer encoder.
#[derive(Clone, Debug)]
pub struct TanhEmbedding {
    pub matrix: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl TanhEmbedding {
    fn activations(&self, x: &[f64]) -> DVector<f64> {
        (&self.matrix * DVector::from_column_slice(x) + &self.bias).map(f64::tanh)
    }
}

impl Embedding for TanhEmbedding {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &[f64]) -> DVector<f64> {
        self.activations(x)
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let h = self.activations(x);
        let mut jac = self.matrix.clone();
        for (k, hk) in h.iter().enumerate() {
            jac.row_mut(k).scale_mut(1.0 - hk * hk);
        }
        jac
    }

    fn hessian_contract(&self, x: &[f64], v: &[f64]) -> DMatrix<f64> {
        let h = self.activations(x);
        let q = x.len();
        let mut out = DMatrix::zeros(q, q);
        for (k, hk) in h.iter().enumerate() {
            // d²tanh(a)/da² = −2 tanh(a) (1 − tanh²(a))
            let scale = v[k] * (-2.0 * hk * (1.0 - hk * hk));
            let row = self.matrix.row(k);
            out += scale * row.transpose() * row;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum CostKind {
    SquaredEuclidean,
    Embedded(Arc<dyn Embedding>),
}

/// Ground cost with an optional declared bound `M_c` on its values over the
/// domain in use. Without a bound, contraction-rate guarantees do not apply.
#[derive(Clone, Debug)]
pub struct GroundCost {
    pub kind: CostKind,
    pub bound: Option<f64>,
}

impl GroundCost {
    pub fn squared_euclidean() -> Self {
        Self {
            kind: CostKind::SquaredEuclidean,
            bound: None,
        }
    }

    pub fn embedded(embedding: Arc<dyn Embedding>) -> Self {
        Self {
            kind: CostKind::Embedded(embedding),
            bound: None,
        }
    }

    /// Declares `0 ≤ c ≤ bound` on the working domain.
    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    /// `(e^{M_c/γ} − 1)/(e^{M_c/γ} + 1)`, the per-map contraction factor of
    /// the Sinkhorn mapping; `None` when no bound is declared.
    pub fn contraction_factor(&self, gamma: f64) -> Option<f64> {
        self.bound.map(|m| (m / (2.0 * gamma)).tanh())
    }

    fn check_pair(&self, x: &[f64], y: &[f64]) -> Result<()> {
        check_dim(x.len(), y.len(), "cost arguments")?;
        if let CostKind::Embedded(e) = &self.kind {
            check_dim(e.input_dim(), x.len(), "embedding input")?;
        }
        Ok(())
    }

    pub fn cost(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_pair(x, y)?;
        Ok(self.eval(x, y))
    }

    /// `∇ₓ c(x, y)`.
    pub fn cost_grad1(&self, x: &[f64], y: &[f64]) -> Result<DVector<f64>> {
        self.check_pair(x, y)?;
        let mut out = DVector::zeros(x.len());
        self.grad1_into(x, y, out.as_mut_slice());
        Ok(out)
    }

    /// `∇²ₓₓ c(x, y)`.
    pub fn cost_hess11(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.check_pair(x, y)?;
        Ok(self.hess11(x, y))
    }

    /// `∂²c / ∂x ∂yᵀ`.
    pub fn cost_hess12(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.check_pair(x, y)?;
        Ok(self.hess12(x, y))
    }

    pub(crate) fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.kind {
            CostKind::SquaredEuclidean => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum(),
            CostKind::Embedded(e) => (e.apply(x) - e.apply(y)).norm_squared(),
        }
    }

    pub(crate) fn grad1_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        match &self.kind {
            CostKind::SquaredEuclidean => {
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o = 2.0 * (a - b);
                }
            }
            CostKind::Embedded(e) => {
                let r = e.apply(x) - e.apply(y);
                let g = 2.0 * e.jacobian(x).tr_mul(&r);
                out.copy_from_slice(g.as_slice());
            }
        }
    }

    pub(crate) fn hess11(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        match &self.kind {
            CostKind::SquaredEuclidean => DMatrix::identity(x.len(), x.len()) * 2.0,
            CostKind::Embedded(e) => {
                let r = e.apply(x) - e.apply(y);
                let jac = e.jacobian(x);
                2.0 * jac.tr_mul(&jac) + 2.0 * e.hessian_contract(x, r.as_slice())
            }
        }
    }

    pub(crate) fn hess12(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        match &self.kind {
            CostKind::SquaredEuclidean => DMatrix::identity(x.len(), x.len()) * -2.0,
            CostKind::Embedded(e) => -2.0 * e.jacobian(x).tr_mul(&e.jacobian(y)),
        }
    }

    /// True when the second derivatives do not depend on the arguments and the
    /// mixed block is `−∇₁₁c`, as for squared Euclidean.
    pub(crate) fn is_squared_euclidean(&self) -> bool {
        matches!(self.kind, CostKind::SquaredEuclidean)
    }
}

/// Dense `n × m` matrix of `c(xᵢ, yⱼ)`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    dim: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.entries)
    }
}

/// Materializes the cost between two supports. When called inside a rayon
/// pool rows are filled in parallel; every entry is computed independently so
/// the result does not depend on the thread count.
pub fn cost_matrix(cost: &GroundCost, a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<CostMatrix> {
    check_dim(a.dim(), b.dim(), "cost matrix supports")?;
    if let CostKind::Embedded(e) = &cost.kind {
        check_dim(e.input_dim(), a.dim(), "embedding input")?;
    }
    let (rows, cols) = (a.len(), b.len());
    let mut entries = vec![0.0; rows * cols];
    let fill = |(i, row): (usize, &mut [f64])| {
        for (j, entry) in row.iter_mut().enumerate() {
            *entry = cost.eval(a.point(i), b.point(j));
        }
    };
    if rayon::current_thread_index().is_some() {
        entries.par_chunks_mut(cols).enumerate().for_each(fill);
    } else {
        entries.chunks_mut(cols).enumerate().for_each(fill);
    }
    if entries.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidMeasure("non-finite cost entry".into()));
    }
    Ok(CostMatrix {
        rows,
        cols,
        dim: a.dim(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    fn doubling() -> GroundCost {
        GroundCost::embedded(Arc::new(LinearEmbedding {
            matrix: DMatrix::from_element(1, 1, 2.0),
        }))
    }

    #[test]
    fn cost_examples() {
        let se = GroundCost::squared_euclidean();
        assert_eq!(se.cost(&[0.0], &[3.0]).unwrap(), 9.0);
        assert_eq!(se.cost(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(doubling().cost(&[0.0], &[1.0]).unwrap(), 4.0);
    }

    #[test]
    fn dimension_mismatch_names_both_dims() {
        let err = GroundCost::squared_euclidean().cost(&[0.0, 1.0], &[0.0]).unwrap_err();
        match err {
            Error::DimensionMismatch { expected, actual, .. } => assert_eq!((expected, actual), (2, 1)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn grad_examples() {
        let se = GroundCost::squared_euclidean();
        assert_eq!(se.cost_grad1(&[1.0], &[0.0]).unwrap()[0], 2.0);
        assert_eq!(se.cost_grad1(&[0.5, -1.0], &[0.5, -1.0]).unwrap().norm(), 0.0);

        let g = doubling().cost_grad1(&[0.0], &[1.0]).unwrap()[0];
        assert!(close(g, -8.0, 1e-12));
        let h = 1e-6;
        let c = doubling();
        let fd = (c.cost(&[h], &[1.0]).unwrap() - c.cost(&[-h], &[1.0]).unwrap()) / (2.0 * h);
        assert!(close(fd, g, 1e-8));
    }

    #[test]
    fn hess_examples() {
        let se = GroundCost::squared_euclidean();
        assert_eq!(se.cost_hess11(&[0.3, 0.1], &[-1.0, 2.0]).unwrap(), DMatrix::identity(2, 2) * 2.0);
        assert_eq!(se.cost_hess11(&[0.3], &[7.0]).unwrap()[(0, 0)], 2.0);

        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 0.3, 0.0, 1.5]);
        let c = GroundCost::embedded(Arc::new(LinearEmbedding { matrix: a.clone() }));
        let x = [0.2, -0.4];
        let y = [1.0, 0.7];
        let analytic = c.cost_hess11(&x, &y).unwrap();
        assert!((&analytic - 2.0 * a.tr_mul(&a)).norm() < 1e-12);
        let h = 1e-4;
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let col = (c.cost_grad1(&xp, &y).unwrap() - c.cost_grad1(&xm, &y).unwrap()) / (2.0 * h);
            for r in 0..2 {
                assert!(close(col[r], analytic[(r, k)], 1e-6));
            }
        }
    }

    #[test]
    fn tanh_embedding_derivatives_match_fd() {
        let c = GroundCost::embedded(Arc::new(TanhEmbedding {
            matrix: DMatrix::from_row_slice(3, 2, &[0.7, -0.2, 0.4, 1.1, -0.9, 0.5]),
            bias: DVector::from_vec(vec![0.1, -0.3, 0.2]),
        }));
        let x = [0.3, -0.6];
        let y = [-0.8, 0.4];
        let h = 1e-5;
        let grad = c.cost_grad1(&x, &y).unwrap();
        let hess = c.cost_hess11(&x, &y).unwrap();
        let mixed = c.cost_hess12(&x, &y).unwrap();
        for k in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (c.eval(&xp, &y) - c.eval(&xm, &y)) / (2.0 * h);
            assert!(close(fd, grad[k], 1e-8));
            let col = (c.cost_grad1(&xp, &y).unwrap() - c.cost_grad1(&xm, &y).unwrap()) / (2.0 * h);
            let mut yp = y;
            let mut ym = y;
            yp[k] += h;
            ym[k] -= h;
            let mixed_col = (c.cost_grad1(&x, &yp).unwrap() - c.cost_grad1(&x, &ym).unwrap()) / (2.0 * h);
            for r in 0..2 {
                assert!(close(col[r], hess[(r, k)], 1e-6));
                assert!(close(mixed_col[r], mixed[(r, k)], 1e-6));
            }
        }
    }

    #[test]
    fn cost_matrix_examples() {
        let se = GroundCost::squared_euclidean();
        let a = DiscreteMeasure::uniform(vec![0.0, 1.0], 1).unwrap();
        assert_eq!(cost_matrix(&se, &a, &a).unwrap().to_dmatrix(), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let p = DiscreteMeasure::dirac(&[0.0]).unwrap();
        assert_eq!(cost_matrix(&se, &p, &p).unwrap().get(0, 0), 0.0);
        let q = DiscreteMeasure::dirac(&[3.0]).unwrap();
        assert_eq!(cost_matrix(&se, &p, &q).unwrap().get(0, 0), 9.0);
        let r = DiscreteMeasure::dirac(&[3.0, 1.0]).unwrap();
        assert!(cost_matrix(&se, &p, &r).is_err());
    }

    #[test]
    fn cost_matrix_parallel_matches_sequential() {
        let se = GroundCost::squared_euclidean();
        let pts: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = DiscreteMeasure::uniform(pts, 3).unwrap();
        let seq = cost_matrix(&se, &a, &a).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let par = pool.install(|| cost_matrix(&se, &a, &a).unwrap());
        assert_eq!(seq, par);
    }

    #[test]
    fn measure_validation() {
        assert!(DiscreteMeasure::weighted(vec![0.0, 1.0], 1, vec![0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::weighted(vec![0.0, 1.0], 1, vec![-0.5, 1.5]).is_err());
        assert!(DiscreteMeasure::uniform(vec![0.0, 1.0, 2.0], 2).is_err());
        assert!(DiscreteMeasure::uniform(vec![], 1).is_err());
        assert!(DiscreteMeasure::from_rows(&[vec![0.0, 1.0], vec![2.0]]).is_err());
        let m = DiscreteMeasure::uniform(vec![0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(m.weights(), &[0.5, 0.5]);
        assert_eq!(m.mean().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn csv_import() {
        let m = DiscreteMeasure::from_csv_reader("x0,x1\n0,1\n2,3\n".as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.point(1), &[2.0, 3.0]);
        let w = DiscreteMeasure::from_csv_reader("x0,w\n0,1\n2,3\n".as_bytes()).unwrap();
        assert_eq!(w.weights(), &[0.25, 0.75]);
        assert!(DiscreteMeasure::from_csv_reader("a,b\n0,1\n".as_bytes()).is_err());
        assert!(DiscreteMeasure::from_csv_reader("x0,x1\n0,z\n".as_bytes()).is_err());
        let back = DiscreteMeasure::from_csv_reader(w.to_csv_string().as_bytes()).unwrap();
        assert_eq!(back, w);
    }
}

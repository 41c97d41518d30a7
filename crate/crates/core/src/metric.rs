//! The learnable symmetric metric and its eigenbasis.
//!
//! A symmetric metric `M` is factored as `M = U diag(λ) U^T` with the
//! eigenvectors in the columns of `U`. The change of coordinates into the
//! eigenbasis is `C = U^T`, so that `x^T M y = (Cx)^T diag(λ) (Cy)`; network
//! inputs are carried into the diagonal algebra with `C` and outputs are
//! carried back with `C^{-1} = C^T`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::DiagonalMetric;

/// Cyclic Jacobi stops once the off-diagonal Frobenius norm drops below this
/// fraction of the matrix norm.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Eigenvalue gaps smaller than this are clamped in the backward rule.
pub const GAP_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("epsilon must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error("matrix is not square: {len} values for dimension {dim}")]
    NotSquare { dim: usize, len: usize },
    #[error("matrix is not exactly symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown output kind `{0}`")]
    UnknownKind(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// A dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(MetricError::NotSquare { dim: n, len: data.len() });
        }
        Ok(Self { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.data[j * self.n + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// `(A + A^T) / 2`; bit-for-bit symmetric.
    pub fn symmetrized(&self) -> Self {
        let mut s = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                s.data[i * self.n + j] = 0.5 * (self.get(i, j) + self.get(j, i));
            }
        }
        s
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Determinant by Gaussian elimination with partial pivoting.
    pub fn determinant(&self) -> f64 {
        let n = self.n;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .unwrap_or(col);
            if a[pivot * n + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for k in 0..n {
                    a.swap(pivot * n + k, col * n + k);
                }
                det = -det;
            }
            let p = a[col * n + col];
            det *= p;
            for row in col + 1..n {
                let f = a[row * n + col] / p;
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
            }
        }
        det
    }
}

/// A symmetric metric matrix. Symmetry is exact: construction rejects any
/// matrix with `values[i][j] != values[j][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    values: Matrix,
}

impl MetricMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        let n = values.dim();
        for i in 0..n {
            for j in i + 1..n {
                if values.get(i, j).to_bits() != values.get(j, i).to_bits() {
                    return Err(MetricError::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { values })
    }

    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Matrix::from_row_major(n, data)?)
    }

    pub fn from_diagonal(metric: &DiagonalMetric) -> Self {
        Self {
            values: Matrix::from_diagonal(metric.entries()),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let my = self.values.apply(y);
        x.iter().zip(&my).map(|(a, b)| a * b).sum()
    }

    /// Frobenius norm of the strictly off-diagonal part.
    pub fn off_diagonal_norm(&self) -> f64 {
        let n = self.dim();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.values.get(i, j).powi(2);
                }
            }
        }
        sum.sqrt()
    }
}

/// `M = Q + ε (R + R^T)` with `R` uniform on `[0, 1)` from a seeded generator.
pub fn init_metric(q: &DiagonalMetric, epsilon: f64, seed: u64) -> Result<MetricMatrix> {
    if !(epsilon >= 0.0) {
        return Err(MetricError::NegativeEpsilon(epsilon));
    }
    let n = q.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let mut m = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let base = if i == j { q.entries()[i] } else { 0.0 };
            // r_ij + r_ji is commutative, so m_ij and m_ji agree bit-for-bit
            let noise = r[i * n + j] + r[j * n + i];
            m.set(i, j, base + epsilon * noise);
        }
    }
    MetricMatrix::new(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    eigenvalues: Vec<f64>,
    basis: Matrix,
    change_of_coords: Matrix,
    det_c: f64,
}

impl EigenDecomposition {
    /// The decomposition of a diagonal metric that needs no change of basis:
    /// eigenvalues in the given order and `U = C = I`.
    pub fn identity(metric: &DiagonalMetric) -> Self {
        let n = metric.dim();
        Self {
            eigenvalues: metric.entries().to_vec(),
            basis: Matrix::identity(n),
            change_of_coords: Matrix::identity(n),
            det_c: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `U`, eigenvectors as columns.
    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// `C = U^T`.
    pub fn change_of_coords(&self) -> &Matrix {
        &self.change_of_coords
    }

    pub fn det_c(&self) -> f64 {
        self.det_c
    }

    pub fn diagonal_metric(&self) -> DiagonalMetric {
        DiagonalMetric::new(self.eigenvalues.clone()).expect("non-empty spectrum")
    }

    pub fn reconstruct(&self) -> Matrix {
        let scaled = self.basis.matmul(&Matrix::from_diagonal(&self.eigenvalues));
        scaled.matmul(&self.basis.transpose())
    }
}

pub fn eigendecompose(m: &MetricMatrix) -> Result<EigenDecomposition> {
    let n = m.dim();
    let mut a = m.values().clone();
    let mut v = Matrix::identity(n);
    let norm = a.frobenius();
    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j).powi(2);
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) >= JACOBI_TOLERANCE * norm && norm > 0.0 {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(MetricError::NoConvergence { sweeps, off: off(&a) });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        sweeps += 1;
    }

    // ascending, stable for ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)));

    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut basis = Matrix::zeros(n);
    for (col, &src) in order.iter().enumerate() {
        let mut u = v.column(src);
        canonicalize_sign(&mut u);
        for (row, value) in u.into_iter().enumerate() {
            basis.set(row, col, value);
        }
    }
    let change_of_coords = basis.transpose();
    let det_c = change_of_coords.determinant();
    Ok(EigenDecomposition {
        eigenvalues,
        basis,
        change_of_coords,
        det_c,
    })
}

/// Makes the largest-magnitude component positive. Components within a
/// relative 1e-12 of the maximum count as tied; the lowest index wins.
fn canonicalize_sign(u: &mut [f64]) {
    let max = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return;
    }
    let lead = u
        .iter()
        .position(|x| x.abs() >= max * (1.0 - 1e-12))
        .expect("maximum is attained");
    if u[lead] < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Gradient of a scalar loss with respect to the matrix fed to
/// [`eigendecompose`], before symmetrization:
/// `U (diag(gλ) + F ∘ (U^T gU)) U^T` with `F_ij = 1/(λ_j - λ_i)` off the
/// diagonal. Its symmetric part is the gradient along symmetric perturbations.
pub fn eigendecompose_backward_raw(
    decomp: &EigenDecomposition,
    grad_eigenvalues: &[f64],
    grad_basis: &Matrix,
) -> Result<Matrix> {
    let n = decomp.dim();
    if grad_eigenvalues.len() != n {
        return Err(MetricError::DimensionMismatch {
            expected: n,
            got: grad_eigenvalues.len(),
        });
    }
    if grad_basis.dim() != n {
        return Err(MetricError::DimensionMismatch {
            expected: n,
            got: grad_basis.dim(),
        });
    }
    let u = decomp.basis();
    let x = u.transpose().matmul(grad_basis);
    let lambda = decomp.eigenvalues();
    let mut inner = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                inner.set(i, i, grad_eigenvalues[i]);
                continue;
            }
            let mut gap = lambda[j] - lambda[i];
            if gap.abs() < GAP_CLAMP {
                gap = if j > i { GAP_CLAMP } else { -GAP_CLAMP };
            }
            inner.set(i, j, x.get(i, j) / gap);
        }
    }
    Ok(u.matmul(&inner).matmul(&u.transpose()))
}

/// Symmetric gradient with respect to the metric.
pub fn eigendecompose_backward(
    decomp: &EigenDecomposition,
    grad_eigenvalues: &[f64],
    grad_basis: &Matrix,
) -> Result<Matrix> {
    Ok(eigendecompose_backward_raw(decomp, grad_eigenvalues, grad_basis)?.symmetrized())
}

/// How a network output is carried back from the eigenbasis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Point,
    Volume,
    Scalar,
    Probability,
}

impl OutputKind {
    /// Number of reals making up one value of this kind in dimension `dim`.
    pub fn width(self, dim: usize) -> usize {
        match self {
            OutputKind::Point => dim,
            _ => 1,
        }
    }
}

impl FromStr for OutputKind {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(OutputKind::Point),
            "volume" => Ok(OutputKind::Volume),
            "scalar" => Ok(OutputKind::Scalar),
            "probability" => Ok(OutputKind::Probability),
            other => Err(MetricError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for OutputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OutputKind::Point => "point",
            OutputKind::Volume => "volume",
            OutputKind::Scalar => "scalar",
            OutputKind::Probability => "probability",
        };
        f.write_str(s)
    }
}

/// `C x`: coordinates of a point in the eigenbasis.
pub fn transform_input(x: &[f64], decomp: &EigenDecomposition) -> Result<Vec<f64>> {
    if x.len() != decomp.dim() {
        return Err(MetricError::DimensionMismatch {
            expected: decomp.dim(),
            got: x.len(),
        });
    }
    Ok(decomp.change_of_coords().apply(x))
}

/// Volumes scale by `det(C)` on the way in.
pub fn transform_volume_input(v: f64, decomp: &EigenDecomposition) -> f64 {
    decomp.det_c() * v
}

pub fn transform_output(y: &[f64], kind: OutputKind, decomp: &EigenDecomposition) -> Result<Vec<f64>> {
    let expected = kind.width(decomp.dim());
    if y.len() != expected {
        return Err(MetricError::DimensionMismatch {
            expected,
            got: y.len(),
        });
    }
    Ok(match kind {
        OutputKind::Point => decomp.basis().apply(y),
        OutputKind::Volume => vec![y[0] / decomp.det_c()],
        OutputKind::Scalar | OutputKind::Probability => y.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn sym(n: usize, data: &[f64]) -> MetricMatrix {
        MetricMatrix::from_row_major(n, data.to_vec()).unwrap()
    }

    #[test]
    fn init_without_noise_is_q() {
        let q = DiagonalMetric::euclidean(3).unwrap();
        let m = init_metric(&q, 0.0, 5).unwrap();
        assert_eq!(m.values(), &Matrix::identity(3));
    }

    #[test]
    fn init_noise_bounds() {
        let q = DiagonalMetric::euclidean(3).unwrap();
        let m = init_metric(&q, 1e-3, 11).unwrap();
        assert!(m.values().max_abs_diff(&Matrix::identity(3)) <= 2e-3);
        assert_eq!(m, init_metric(&q, 1e-3, 11).unwrap());
        assert_ne!(m, init_metric(&q, 1e-3, 12).unwrap());

        let mink = DiagonalMetric::new(vec![1.0, -1.0, -1.0, -1.0]).unwrap();
        let m = init_metric(&mink, 1e-7, 3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(m.values().get(i, j).abs() <= 2e-7);
                }
            }
        }
    }

    #[test]
    fn init_rejects_negative_epsilon() {
        let q = DiagonalMetric::euclidean(2).unwrap();
        assert_eq!(init_metric(&q, -1.0, 0).unwrap_err(), MetricError::NegativeEpsilon(-1.0));
        assert!(init_metric(&q, f64::NAN, 0).is_err());
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let err = MetricMatrix::from_row_major(2, vec![1.0, 0.5, 0.5 + 1e-17, 1.0]);
        // 0.5 + 1e-17 rounds to 0.5, so this one is fine
        assert!(err.is_ok());
        let err = MetricMatrix::from_row_major(2, vec![1.0, 0.5, 0.5000001, 1.0]).unwrap_err();
        assert_eq!(err, MetricError::NotSymmetric { row: 0, col: 1 });
        assert!(MetricMatrix::from_row_major(2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn diagonal_input_is_already_decomposed() {
        let d = eigendecompose(&sym(2, &[2.0, 0.0, 0.0, 3.0])).unwrap();
        assert_eq!(d.eigenvalues(), &[2.0, 3.0]);
        assert_eq!(d.basis(), &Matrix::identity(2));
        assert_eq!(d.det_c(), 1.0);
    }

    #[test]
    fn identity_canonicalizes_to_identity() {
        let d = eigendecompose(&sym(3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
        assert_eq!(d.eigenvalues(), &[1.0, 1.0, 1.0]);
        assert_eq!(d.change_of_coords(), &Matrix::identity(3));
        let x = [0.3, -1.2, 4.0];
        assert_eq!(transform_input(&x, &d).unwrap(), x.to_vec());
    }

    #[test]
    fn swap_matrix_eigenpairs() {
        let m = sym(2, &[0.0, 1.0, 1.0, 0.0]);
        let d = eigendecompose(&m).unwrap();
        assert!((d.eigenvalues()[0] + 1.0).abs() < 1e-15);
        assert!((d.eigenvalues()[1] - 1.0).abs() < 1e-15);
        let u0 = d.basis().column(0);
        let u1 = d.basis().column(1);
        assert!((u0[0] - SQRT_HALF).abs() < 1e-15 && (u0[1] + SQRT_HALF).abs() < 1e-15);
        assert!((u1[0] - SQRT_HALF).abs() < 1e-15 && (u1[1] - SQRT_HALF).abs() < 1e-15);
        // M u = λ u
        for (k, u) in [u0, u1].iter().enumerate() {
            let mu = m.values().apply(u);
            for i in 0..2 {
                assert!((mu[i] - d.eigenvalues()[k] * u[i]).abs() < 1e-15);
            }
        }
        // C x = U^T x with the canonical signs above
        let cx = transform_input(&[1.0, 0.0], &d).unwrap();
        assert!((cx[0] - SQRT_HALF).abs() < 1e-15 && (cx[1] - SQRT_HALF).abs() < 1e-15);
        assert!((d.det_c().abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_and_orthogonality() {
        let m = sym(3, &[2.0, -0.4, 0.1, -0.4, 1.0, 0.7, 0.1, 0.7, -3.0]);
        let d = eigendecompose(&m).unwrap();
        assert!(d.reconstruct().max_abs_diff(m.values()) < 1e-12);
        let utu = d.basis().transpose().matmul(d.basis());
        assert!(utu.max_abs_diff(&Matrix::identity(3)) < 1e-12);
        assert!(d.eigenvalues().windows(2).all(|w| w[0] <= w[1]));
        let (x, y) = ([0.5, -1.0, 2.0], [1.5, 0.25, -0.75]);
        let lhs = m.bilinear(&x, &y);
        let (cx, cy) = (transform_input(&x, &d).unwrap(), transform_input(&y, &d).unwrap());
        let rhs = d.diagonal_metric().inner(&cx, &cy);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn deterministic_decomposition() {
        let m = sym(3, &[1.0, 0.3, 0.2, 0.3, 1.0, 0.1, 0.2, 0.1, 1.0]);
        assert_eq!(eigendecompose(&m).unwrap(), eigendecompose(&m).unwrap());
    }

    #[test]
    fn eigenvalue_only_gradient() {
        let m = sym(2, &[1.0, 0.0, 0.0, 2.0]);
        let d = eigendecompose(&m).unwrap();
        let g = eigendecompose_backward(&d, &[1.0, 0.0], &Matrix::zeros(2)).unwrap();
        assert_eq!(g, Matrix::from_row_major(2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());

        let m = sym(3, &[2.0, -0.4, 0.1, -0.4, 1.0, 0.7, 0.1, 0.7, -3.0]);
        let d = eigendecompose(&m).unwrap();
        let gl = [0.3, -1.0, 2.0];
        let g = eigendecompose_backward(&d, &gl, &Matrix::zeros(3)).unwrap();
        let expected = d
            .basis()
            .matmul(&Matrix::from_diagonal(&gl))
            .matmul(&d.basis().transpose());
        assert!(g.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn degenerate_spectrum_gradient_is_finite() {
        let m = sym(2, &[1.0, 0.0, 0.0, 1.0]);
        let d = eigendecompose(&m).unwrap();
        let gu = Matrix::from_row_major(2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let g = eigendecompose_backward(&d, &[0.0, 0.0], &gu).unwrap();
        assert!(g.as_slice().iter().all(|v| v.is_finite()));
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn transforms() {
        let m = sym(3, &[2.0, -0.4, 0.1, -0.4, 1.0, 0.7, 0.1, 0.7, -3.0]);
        let d = eigendecompose(&m).unwrap();
        let x = [0.2, 1.0, -3.0];
        let back = transform_output(&transform_input(&x, &d).unwrap(), OutputKind::Point, &d).unwrap();
        for i in 0..3 {
            assert!((back[i] - x[i]).abs() < 1e-12);
        }
        assert_eq!(transform_output(&[0.7], OutputKind::Scalar, &d).unwrap(), vec![0.7]);
        assert_eq!(transform_output(&[0.7], OutputKind::Probability, &d).unwrap(), vec![0.7]);
        let v = transform_volume_input(0.3, &d);
        let round = transform_output(&[v], OutputKind::Volume, &d).unwrap()[0];
        assert!((round - 0.3).abs() < 1e-12);
        assert!(transform_input(&[1.0], &d).is_err());
        assert!(transform_output(&[1.0, 2.0], OutputKind::Volume, &d).is_err());
    }

    #[test]
    fn reflection_flips_volume() {
        // an orthogonal change of basis with det -1
        let d = EigenDecomposition {
            eigenvalues: vec![1.0, 1.0],
            basis: Matrix::from_row_major(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            change_of_coords: Matrix::from_row_major(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            det_c: -1.0,
        };
        assert_eq!(transform_output(&[2.0], OutputKind::Volume, &d).unwrap(), vec![-2.0]);
        assert_eq!(transform_volume_input(0.3, &d), -0.3);
        let id = EigenDecomposition::identity(&DiagonalMetric::euclidean(2).unwrap());
        assert_eq!(transform_volume_input(0.3, &id), 0.3);
    }

    #[test]
    fn output_kind_parsing() {
        assert_eq!("volume".parse::<OutputKind>().unwrap(), OutputKind::Volume);
        assert_eq!(
            "vector".parse::<OutputKind>().unwrap_err(),
            MetricError::UnknownKind("vector".into())
        );
    }

    #[test]
    fn determinant_of_known_matrices() {
        let m = Matrix::from_row_major(3, vec![2., 0., 1., 1., 3., 2., 1., 1., 2.]).unwrap();
        assert!((m.determinant() - 6.0).abs() < 1e-12);
        assert_eq!(Matrix::zeros(2).determinant(), 0.0);
    }
}

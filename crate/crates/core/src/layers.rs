//! CGENN building blocks over batched multivector channels.
//!
//! Every layer takes and returns tape variables of shape `[B, C, 2^n]`, with
//! the last axis indexed by blade bitmask as in [`crate::algebra`].

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::algebra::{self, AlgebraError, DiagonalMetric, Multivector, ProductStructure};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// Magnitude floor for the normalization denominator.
pub const NORM_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// A batch of multivector channels, `coeffs` of shape `[B, C, 2^n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivectorBatch {
    dim: usize,
    coeffs: Tensor,
}

impl MultivectorBatch {
    pub fn new(dim: usize, coeffs: Tensor) -> Result<Self> {
        let s = coeffs.shape();
        if s.len() != 3 || s[2] != 1 << dim {
            return Err(LayerError::Shape {
                what: "multivector batch",
                expected: vec![s.first().copied().unwrap_or(0), s.get(1).copied().unwrap_or(0), 1 << dim],
                got: s.to_vec(),
            });
        }
        Ok(Self { dim, coeffs })
    }

    pub fn from_multivectors(batch: usize, channels: usize, items: &[Multivector]) -> Result<Self> {
        let dim = items.first().map_or(0, Multivector::dim);
        let data: Vec<f64> = items.iter().flat_map(|m| m.coeffs().iter().copied()).collect();
        Self::new(dim, Tensor::new(vec![batch, channels, 1 << dim], data)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batch(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.coeffs.shape()[1]
    }

    pub fn coeffs(&self) -> &Tensor {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Tensor {
        self.coeffs
    }

    /// Channel `c` of sample `b`.
    pub fn get(&self, b: usize, c: usize) -> Multivector {
        let size = 1 << self.dim;
        let start = (b * self.channels() + c) * size;
        Multivector::from_coeffs(self.dim, self.coeffs.data()[start..start + size].to_vec())
            .expect("length is 2^dim")
    }

    /// Applies `f` to every multivector in the batch.
    pub fn map<E>(&self, mut f: impl FnMut(&Multivector) -> std::result::Result<Multivector, E>) -> std::result::Result<Self, E> {
        let mut data = Vec::with_capacity(self.coeffs.len());
        for b in 0..self.batch() {
            for c in 0..self.channels() {
                data.extend_from_slice(f(&self.get(b, c))?.coeffs());
            }
        }
        Ok(Self {
            dim: self.dim,
            coeffs: Tensor::new(self.coeffs.shape().to_vec(), data).expect("shape preserved"),
        })
    }
}

/// Per-pass algebra data shared by the layers: the product structure, the
/// blade grades, and the per-blade metric products as a tape variable.
#[derive(Debug, Clone)]
pub struct AlgebraContext {
    structure: Arc<ProductStructure>,
    grades: Arc<[usize]>,
    blade_metric: Var,
}

impl AlgebraContext {
    /// Builds a context whose metric is the tape variable `eigenvalues`
    /// (shape `[n]`), so gradients reach it.
    pub fn new(tape: &mut Tape, structure: Arc<ProductStructure>, eigenvalues: Var) -> Result<Self> {
        let n = structure.dim();
        if tape.shape(eigenvalues) != [n] {
            return Err(LayerError::Shape {
                what: "metric",
                expected: vec![n],
                got: tape.shape(eigenvalues).to_vec(),
            });
        }
        let blade_metric = tape.blade_metric(eigenvalues)?;
        Ok(Self {
            grades: algebra::blade_grades(n).into(),
            structure,
            blade_metric,
        })
    }

    pub fn constant(tape: &mut Tape, structure: Arc<ProductStructure>, metric: &DiagonalMetric) -> Result<Self> {
        let lambda = tape.constant(Tensor::vector(metric.entries().to_vec()));
        Self::new(tape, structure, lambda)
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    pub fn size(&self) -> usize {
        self.structure.size()
    }

    pub fn grades(&self) -> &Arc<[usize]> {
        &self.grades
    }

    pub fn blade_metric(&self) -> Var {
        self.blade_metric
    }

    fn check(&self, tape: &Tape, x: Var, what: &'static str) -> Result<(usize, usize)> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.size() {
            return Err(LayerError::Shape {
                what,
                expected: vec![s.first().copied().unwrap_or(0), s.get(1).copied().unwrap_or(0), self.size()],
                got: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// `Q̄` of every grade part of every channel, shape `[B, C, n+1]`.
    pub fn grade_norms(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check(tape, x, "grade norms")?;
        let sq = tape.mul(x, x)?;
        let weighted = tape.mul(sq, self.blade_metric)?;
        Ok(tape.scatter_add(weighted, self.grades.clone(), self.dim() + 1)?)
    }
}

/// Embeds task features as multivector channels, in the order points,
/// scalars, volumes. Points `[B, P, n]` fill grade 1, scalars `[B, S]` grade
/// 0, volumes `[B, V]` the pseudoscalar.
pub fn embed(
    tape: &mut Tape,
    dim: usize,
    points: Option<Var>,
    scalars: Option<Var>,
    volumes: Option<Var>,
) -> Result<Var> {
    let size = 1usize << dim;
    let mut parts = Vec::new();
    let mut batch = None;
    let mut agree = |tape: &Tape, v: Var, rank: usize, what: &'static str| -> Result<usize> {
        let s = tape.shape(v).to_vec();
        let b = s.first().copied().unwrap_or(0);
        let ok = s.len() == rank && (rank != 3 || s[2] == dim) && batch.is_none_or(|x| x == b);
        if !ok {
            let mut expected = vec![batch.unwrap_or(b), s.get(1).copied().unwrap_or(0)];
            if rank == 3 {
                expected.push(dim);
            }
            return Err(LayerError::Shape { what, expected, got: s });
        }
        batch = Some(b);
        Ok(b)
    };
    if let Some(p) = points {
        agree(tape, p, 3, "point features")?;
        let idx: Arc<[usize]> = (0..dim).map(|i| 1 << i).collect();
        parts.push(tape.scatter_add(p, idx, size)?);
    }
    if let Some(s) = scalars {
        let b = agree(tape, s, 2, "scalar features")?;
        let c = tape.shape(s)[1];
        let s3 = tape.reshape(s, &[b, c, 1])?;
        parts.push(tape.scatter_add(s3, Arc::from([0usize]), size)?);
    }
    if let Some(v) = volumes {
        let b = agree(tape, v, 2, "volume features")?;
        let c = tape.shape(v)[1];
        let v3 = tape.reshape(v, &[b, c, 1])?;
        parts.push(tape.scatter_add(v3, Arc::from([size - 1]), size)?);
    }
    if parts.is_empty() {
        return Err(LayerError::Shape {
            what: "embedding",
            expected: vec![1],
            got: vec![0],
        });
    }
    Ok(tape.concat(&parts, 1)?)
}

/// Grade-wise channel mixing with `weights` of shape `[Cout, Cin, n+1]`.
pub fn linear_layer(tape: &mut Tape, ctx: &AlgebraContext, x: Var, weights: Var) -> Result<Var> {
    let (_, cin) = ctx.check(tape, x, "linear input")?;
    let ws = tape.shape(weights).to_vec();
    if ws.len() != 3 || ws[1] != cin || ws[2] != ctx.dim() + 1 {
        return Err(LayerError::Shape {
            what: "linear weights",
            expected: vec![ws.first().copied().unwrap_or(0), cin, ctx.dim() + 1],
            got: ws,
        });
    }
    let expanded = tape.gather(weights, ctx.grades.clone())?;
    Ok(tape.channel_mix(x, expanded)?)
}

/// Channelwise weighted geometric product with `weights` of shape
/// `[C, n+1, n+1, n+1]` indexed by (left grade, right grade, output grade).
pub fn geometric_product_layer(tape: &mut Tape, ctx: &AlgebraContext, x1: Var, x2: Var, weights: Var) -> Result<Var> {
    ctx.check(tape, x1, "geometric product input")?;
    Ok(tape.clifford_product(x1, x2, weights, ctx.blade_metric, ctx.structure.clone())?)
}

/// Divides each grade part by `σ(a_m)(Q̄(x^(m)) - 1) + 1`, `a` of shape `[n+1]`.
pub fn norm_layer(tape: &mut Tape, ctx: &AlgebraContext, x: Var, a: Var) -> Result<Var> {
    check_grade_vector(tape, ctx, a, "norm parameters")?;
    let q = ctx.grade_norms(tape, x)?;
    let s = tape.sigmoid(a);
    let shifted = tape.add_scalar(q, -1.0);
    let scaled = tape.mul(shifted, s)?;
    let denom = tape.add_scalar(scaled, 1.0);
    let denom = tape.clamp_abs_min(denom, NORM_CLAMP);
    let expanded = tape.gather(denom, ctx.grades.clone())?;
    Ok(tape.div(x, expanded)?)
}

/// Scales each grade part by `σ(u_k Q̄(x^(k)) + b_k)`.
pub fn nonlinear_layer(tape: &mut Tape, ctx: &AlgebraContext, x: Var, u: Var, b: Var) -> Result<Var> {
    check_grade_vector(tape, ctx, u, "gate weights")?;
    check_grade_vector(tape, ctx, b, "gate bias")?;
    let q = ctx.grade_norms(tape, x)?;
    let f = tape.mul(q, u)?;
    let f = tape.add(f, b)?;
    let gate = tape.sigmoid(f);
    let expanded = tape.gather(gate, ctx.grades.clone())?;
    Ok(tape.mul(x, expanded)?)
}

fn check_grade_vector(tape: &Tape, ctx: &AlgebraContext, v: Var, what: &'static str) -> Result<()> {
    if tape.shape(v) != [ctx.dim() + 1] {
        return Err(LayerError::Shape {
            what,
            expected: vec![ctx.dim() + 1],
            got: tape.shape(v).to_vec(),
        });
    }
    Ok(())
}

/// `U(±Cin^{-1/2})` weights of shape `[Cout, Cin, n+1]`.
pub fn init_linear(rng: &mut impl Rng, cout: usize, cin: usize, dim: usize) -> Tensor {
    let s = (cin as f64).powf(-0.5);
    uniform(rng, vec![cout, cin, dim + 1], s)
}

/// `U(±1/(n+1))` weights of shape `[C, n+1, n+1, n+1]`.
pub fn init_geometric_product(rng: &mut impl Rng, channels: usize, dim: usize) -> Tensor {
    let g = dim + 1;
    uniform(rng, vec![channels, g, g, g], 1.0 / g as f64)
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, s: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(shape, data).expect("length from shape")
}

//! Clifford algebra arithmetic over a diagonal metric.
//!
//! Multivectors are dense arrays of `2^n` coefficients indexed by blade
//! bitmask: bit `i` set means `e_{i+1}` participates, so the coefficient
//! order is `1, e1, e2, e1e2, e3, e1e3, ...`. Every blade is stored in its
//! canonical ascending orientation `e_{i1} e_{i2} ... e_{ik}` with
//! `i1 < i2 < ... < ik`.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

/// Largest supported vector-space dimension. The Cayley table has `4^n` entries.
pub const MAX_DIM: usize = 12;

/// Below this magnitude a vector is treated as null (non-invertible).
pub const NULL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgebraError {
    #[error("dimension {0} exceeds the supported maximum of {MAX_DIM}")]
    DimensionTooLarge(usize),
    #[error("dimension must be at least 1")]
    EmptyMetric,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("expected {expected} coefficients, got {got}")]
    CoefficientCount { expected: usize, got: usize },
    #[error("grade {grade} out of range for dimension {dim}")]
    GradeOutOfRange { grade: usize, dim: usize },
    #[error("multivector is not a pure grade-1 vector")]
    NotAVector,
    #[error("vector is null under the metric (|Q(v)| = {0:e})")]
    NullVector(f64),
    #[error("versor list is empty")]
    EmptyVersor,
    #[error("odd versors are not supported for actions")]
    OddVersor,
    #[error("versor is not invertible (|Q(w)| = {0:e})")]
    NonInvertible(f64),
}

pub type Result<T> = std::result::Result<T, AlgebraError>;

/// The diagonal of a diagonal quadratic form.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMetric {
    entries: Vec<f64>,
}

impl DiagonalMetric {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(AlgebraError::EmptyMetric);
        }
        Ok(Self { entries })
    }

    pub fn euclidean(dim: usize) -> Result<Self> {
        Self::new(vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `v^T diag(entries) w` for plain coordinate vectors.
    pub fn inner(&self, v: &[f64], w: &[f64]) -> f64 {
        self.entries
            .iter()
            .zip(v.iter().zip(w))
            .map(|(d, (a, b))| d * a * b)
            .sum()
    }

    /// Product of the diagonal entries selected by `blade`; this is the value
    /// of `reversal(e_B) e_B` for a basis blade `e_B`.
    pub fn blade_square(&self, blade: Blade) -> f64 {
        blade.indices().map(|i| self.entries[i]).product()
    }
}

/// A basis blade, identified by the set of participating basis vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Blade(u32);

impl Blade {
    pub const UNIT: Blade = Blade(0);

    pub fn from_mask(mask: u32) -> Self {
        Blade(mask)
    }

    /// The basis vector `e_{i+1}` (zero-based `i`).
    pub fn basis(i: usize) -> Self {
        Blade(1 << i)
    }

    /// The pseudoscalar `e1 e2 ... en`.
    pub fn pseudoscalar(dim: usize) -> Self {
        Blade((1u32 << dim) - 1)
    }

    pub fn mask(self) -> u32 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn grade(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Zero-based indices of the participating basis vectors, ascending.
    pub fn indices(self) -> impl Iterator<Item = usize> {
        let mask = self.0;
        (0..32).filter(move |i| mask & (1 << i) != 0)
    }

    /// Sign `(-1)^{k(k-1)/2}` picked up by reversing a grade-`k` blade.
    pub fn reversal_sign(self) -> f64 {
        let k = self.grade();
        if (k * k.saturating_sub(1) / 2) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

impl fmt::Display for Blade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return write!(f, "1");
        }
        for i in self.indices() {
            write!(f, "e{}", i + 1)?;
        }
        Ok(())
    }
}

/// Sign of the permutation that sorts the concatenation `a ++ b` of two
/// canonical blades, i.e. the sign in `e_a e_b = ± e_{a xor b} * (squares)`.
pub fn reorder_sign(a: Blade, b: Blade) -> f64 {
    let mut swaps = 0u32;
    let mut shifted = a.mask() >> 1;
    while shifted != 0 {
        swaps += (shifted & b.mask()).count_ones();
        shifted >>= 1;
    }
    if swaps % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CayleyEntry {
    pub blade: Blade,
    pub scale: f64,
}

/// Blade-pair multiplication table for a diagonal metric.
#[derive(Debug, Clone)]
pub struct CayleyTable {
    metric: DiagonalMetric,
    entries: Vec<CayleyEntry>,
}

impl CayleyTable {
    pub fn new(metric: &DiagonalMetric) -> Result<Self> {
        let n = metric.dim();
        if n > MAX_DIM {
            return Err(AlgebraError::DimensionTooLarge(n));
        }
        let size = 1usize << n;
        let mut entries = Vec::with_capacity(size * size);
        for a in 0..size as u32 {
            for b in 0..size as u32 {
                let (a, b) = (Blade(a), Blade(b));
                let square = metric.blade_square(Blade(a.mask() & b.mask()));
                entries.push(CayleyEntry {
                    blade: Blade(a.mask() ^ b.mask()),
                    scale: reorder_sign(a, b) * square,
                });
            }
        }
        Ok(Self {
            metric: metric.clone(),
            entries,
        })
    }

    pub fn dim(&self) -> usize {
        self.metric.dim()
    }

    pub fn size(&self) -> usize {
        1 << self.dim()
    }

    pub fn metric(&self) -> &DiagonalMetric {
        &self.metric
    }

    pub fn entry(&self, a: Blade, b: Blade) -> CayleyEntry {
        self.entries[a.index() * self.size() + b.index()]
    }

    /// Negates one table entry. Only used to check that the verification
    /// suite notices a corrupted table.
    #[doc(hidden)]
    pub fn flip_sign(&mut self, a: Blade, b: Blade) {
        let size = self.size();
        self.entries[a.index() * size + b.index()].scale *= -1.0;
    }
}

/// Convenience wrapper matching the table constructor.
pub fn build_cayley_table(metric: &DiagonalMetric) -> Result<CayleyTable> {
    CayleyTable::new(metric)
}

/// One nonzero blade pair of the product skeleton.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductTerm {
    pub left: usize,
    pub right: usize,
    pub out: usize,
    /// `left & right`: the basis vectors annihilated by the product.
    pub overlap: usize,
    pub sign: f64,
    pub left_grade: usize,
    pub right_grade: usize,
    pub out_grade: usize,
}

/// The metric-independent part of a Cayley table: for a diagonal metric `Δ`
/// the scale of a term is `sign * prod_{i in overlap} Δ_i`. Keeping the
/// metric factor separate lets the product be differentiated with respect
/// to `Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductStructure {
    dim: usize,
    terms: Vec<ProductTerm>,
}

impl ProductStructure {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(AlgebraError::EmptyMetric);
        }
        if dim > MAX_DIM {
            return Err(AlgebraError::DimensionTooLarge(dim));
        }
        let size = 1u32 << dim;
        let mut terms = Vec::with_capacity((size * size) as usize);
        for a in 0..size {
            for b in 0..size {
                let (left, right) = (Blade(a), Blade(b));
                let out = Blade(a ^ b);
                terms.push(ProductTerm {
                    left: left.index(),
                    right: right.index(),
                    out: out.index(),
                    overlap: (a & b) as usize,
                    sign: reorder_sign(left, right),
                    left_grade: left.grade(),
                    right_grade: right.grade(),
                    out_grade: out.grade(),
                });
            }
        }
        Ok(Self { dim, terms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        1 << self.dim
    }

    pub fn terms(&self) -> &[ProductTerm] {
        &self.terms
    }
}

/// Grade of every blade, in coefficient order.
pub fn blade_grades(dim: usize) -> Vec<usize> {
    (0..1u32 << dim).map(|m| m.count_ones() as usize).collect()
}

/// A dense multivector with `2^dim` coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Multivector {
    dim: usize,
    coeffs: Vec<f64>,
}

impl Multivector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            coeffs: vec![0.0; 1 << dim],
        }
    }

    pub fn from_coeffs(dim: usize, coeffs: Vec<f64>) -> Result<Self> {
        let expected = 1 << dim;
        if coeffs.len() != expected {
            return Err(AlgebraError::CoefficientCount {
                expected,
                got: coeffs.len(),
            });
        }
        Ok(Self { dim, coeffs })
    }

    pub fn scalar(dim: usize, value: f64) -> Self {
        Self::blade(dim, Blade::UNIT, value)
    }

    pub fn blade(dim: usize, blade: Blade, value: f64) -> Self {
        let mut x = Self::zeros(dim);
        x.coeffs[blade.index()] = value;
        x
    }

    /// Grade-1 multivector with the given coordinates on `e1..en`.
    pub fn vector(components: &[f64]) -> Self {
        let mut x = Self::zeros(components.len());
        for (i, &c) in components.iter().enumerate() {
            x.coeffs[1 << i] = c;
        }
        x
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn coeff(&self, blade: Blade) -> f64 {
        self.coeffs[blade.index()]
    }

    /// Coordinates on `e1..en`.
    pub fn vector_part(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.coeffs[1 << i]).collect()
    }

    pub fn scalar_part(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn is_vector(&self) -> bool {
        self.coeffs
            .iter()
            .enumerate()
            .all(|(i, &c)| c == 0.0 || Blade(i as u32).grade() == 1)
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(AlgebraError::DimensionMismatch {
                left: self.dim,
                right: other.dim,
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.dim, other.dim, "multivector dimension mismatch");
        Self {
            dim: self.dim,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

impl fmt::Display for Multivector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (i, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            if !first {
                write!(f, " + ")?;
            }
            write!(f, "{c}*{}", Blade(i as u32))?;
            first = false;
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

impl Add for &Multivector {
    type Output = Multivector;
    fn add(self, rhs: &Multivector) -> Multivector {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl Add for Multivector {
    type Output = Multivector;
    fn add(self, rhs: Multivector) -> Multivector {
        &self + &rhs
    }
}

impl Sub for &Multivector {
    type Output = Multivector;
    fn sub(self, rhs: &Multivector) -> Multivector {
        self.zip_with(rhs, |a, b| a - b)
    }
}

impl Sub for Multivector {
    type Output = Multivector;
    fn sub(self, rhs: Multivector) -> Multivector {
        &self - &rhs
    }
}

impl Neg for Multivector {
    type Output = Multivector;
    fn neg(self) -> Multivector {
        self.scale(-1.0)
    }
}

impl Mul<f64> for &Multivector {
    type Output = Multivector;
    fn mul(self, rhs: f64) -> Multivector {
        self.scale(rhs)
    }
}

impl Mul<f64> for Multivector {
    type Output = Multivector;
    fn mul(self, rhs: f64) -> Multivector {
        self.scale(rhs)
    }
}

pub fn geometric_product(x: &Multivector, y: &Multivector, table: &CayleyTable) -> Result<Multivector> {
    x.check_dim(y)?;
    if x.dim != table.dim() {
        return Err(AlgebraError::DimensionMismatch {
            left: x.dim,
            right: table.dim(),
        });
    }
    let mut out = Multivector::zeros(x.dim);
    for (a, &xa) in x.coeffs.iter().enumerate() {
        if xa == 0.0 {
            continue;
        }
        for (b, &yb) in y.coeffs.iter().enumerate() {
            if yb == 0.0 {
                continue;
            }
            let e = table.entry(Blade(a as u32), Blade(b as u32));
            out.coeffs[e.blade.index()] += e.scale * xa * yb;
        }
    }
    Ok(out)
}

/// Outer product. Blades sharing a basis vector contribute nothing, so the
/// result does not depend on any metric.
pub fn wedge(x: &Multivector, y: &Multivector) -> Result<Multivector> {
    x.check_dim(y)?;
    let mut out = Multivector::zeros(x.dim);
    for (a, &xa) in x.coeffs.iter().enumerate() {
        if xa == 0.0 {
            continue;
        }
        for (b, &yb) in y.coeffs.iter().enumerate() {
            if yb == 0.0 || a & b != 0 {
                continue;
            }
            let sign = reorder_sign(Blade(a as u32), Blade(b as u32));
            out.coeffs[a | b] += sign * xa * yb;
        }
    }
    Ok(out)
}

pub fn grade_project(x: &Multivector, k: usize) -> Result<Multivector> {
    if k > x.dim {
        return Err(AlgebraError::GradeOutOfRange { grade: k, dim: x.dim });
    }
    let coeffs = x
        .coeffs
        .iter()
        .enumerate()
        .map(|(i, &c)| if Blade(i as u32).grade() == k { c } else { 0.0 })
        .collect();
    Ok(Multivector { dim: x.dim, coeffs })
}

pub fn reversal(x: &Multivector) -> Multivector {
    let coeffs = x
        .coeffs
        .iter()
        .enumerate()
        .map(|(i, &c)| Blade(i as u32).reversal_sign() * c)
        .collect();
    Multivector { dim: x.dim, coeffs }
}

/// Scalar part of `reversal(x) x`.
pub fn extended_quadratic_form(x: &Multivector, table: &CayleyTable) -> Result<f64> {
    if x.dim != table.dim() {
        return Err(AlgebraError::DimensionMismatch {
            left: x.dim,
            right: table.dim(),
        });
    }
    // Only a blade times itself lands on the scalar, so this is the diagonal
    // of the table applied to the reversed coefficients.
    Ok(x
        .coeffs
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let b = Blade(i as u32);
            b.reversal_sign() * table.entry(b, b).scale * c * c
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

/// A product of unit vectors.
#[derive(Debug, Clone)]
pub struct Versor {
    value: Multivector,
    factors: Vec<Multivector>,
    parity: Parity,
}

impl Versor {
    pub fn value(&self) -> &Multivector {
        &self.value
    }

    pub fn factors(&self) -> &[Multivector] {
        &self.factors
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    /// `reversal(w) / Q(w)`.
    pub fn inverse(&self, table: &CayleyTable) -> Result<Multivector> {
        let norm = extended_quadratic_form(&self.value, table)?;
        if norm.abs() < NULL_TOLERANCE {
            return Err(AlgebraError::NonInvertible(norm));
        }
        Ok(reversal(&self.value).scale(1.0 / norm))
    }
}

pub fn make_versor(vectors: &[Multivector], table: &CayleyTable) -> Result<Versor> {
    if vectors.is_empty() {
        return Err(AlgebraError::EmptyVersor);
    }
    let mut factors = Vec::with_capacity(vectors.len());
    let mut value = Multivector::scalar(table.dim(), 1.0);
    for v in vectors {
        if v.dim != table.dim() {
            return Err(AlgebraError::DimensionMismatch {
                left: v.dim,
                right: table.dim(),
            });
        }
        if !v.is_vector() {
            return Err(AlgebraError::NotAVector);
        }
        let q = table.metric().inner(&v.vector_part(), &v.vector_part());
        if q.abs() < NULL_TOLERANCE {
            return Err(AlgebraError::NullVector(q));
        }
        let unit = v.scale(1.0 / q.abs().sqrt());
        value = geometric_product(&value, &unit, table)?;
        factors.push(unit);
    }
    let parity = if factors.len() % 2 == 0 {
        Parity::Even
    } else {
        Parity::Odd
    };
    Ok(Versor {
        value,
        factors,
        parity,
    })
}

/// Conjugation `w x w^{-1}` by an even versor.
pub fn versor_action(w: &Versor, x: &Multivector, table: &CayleyTable) -> Result<Multivector> {
    if w.parity == Parity::Odd {
        return Err(AlgebraError::OddVersor);
    }
    let inv = w.inverse(table)?;
    let left = geometric_product(&w.value, x, table)?;
    geometric_product(&left, &inv, table)
}

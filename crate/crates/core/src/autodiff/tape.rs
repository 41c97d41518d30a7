use std::sync::Arc;

use crate::algebra::ProductStructure;
use crate::metric::{self, EigenDecomposition, Matrix, MetricMatrix};

use super::param::ParamId;
use super::{AutodiffError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    /// Elementwise with the right operand broadcast over leading axes.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Powf(Var, f64),
    ClampAbsMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    ChannelMix(Var, Var),
    BladeMetric(Var),
    Clifford {
        left: Var,
        right: Var,
        weights: Var,
        blade_metric: Var,
        structure: Arc<ProductStructure>,
    },
    EigValues(Var, Arc<EigenDecomposition>),
    EigVectors(Var, Arc<EigenDecomposition>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of a forward computation. Parents always precede
/// their children, so the reverse order of the tape is a valid backward
/// schedule.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, value)
    }

    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.push(Op::Leaf { param: Some(id) }, value.clone())
    }

    /// Parameters recorded on this tape, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(id) } => Some((id, Var(i))),
            _ => None,
        })
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if !is_suffix(self.shape(a), self.shape(b)) {
            return Err(self.mismatch(name, a, b));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let inner = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % inner]))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        self.push(Op::AddScalar(a), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = va[i * k + p];
                for j in 0..n {
                    out[i * n + j] += x * vb[p * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::Rank { op: "transpose", shape: s });
        }
        let value = transpose2(self.value(a), s[0], s[1]);
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(Op::Softplus(a), value)
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(exponent));
        self.push(Op::Powf(a, exponent), value)
    }

    /// Pushes values with magnitude below `floor` out to `±floor`, keeping
    /// their sign (zero maps to `+floor`).
    pub fn clamp_abs_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| clamp_abs(x, floor));
        self.push(Op::ClampAbsMin(a, floor), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::Axis { axis, rank: shape.len() });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = if out_shape.is_empty() {
            Tensor::scalar(out[0])
        } else {
            Tensor::new(out_shape, out)?
        };
        Ok(self.push(Op::SumAxis(a, axis), value))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::Axis { axis, rank: base.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(self.mismatch("concat", first, p));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), value))
    }

    /// `out[..., j] = a[..., indices[j]]`.
    pub fn gather(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or(AutodiffError::Rank { op: "gather", shape: shape.clone() })?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= last) {
            return Err(AutodiffError::Index { index: bad, len: last });
        }
        let src = self.value(a).data();
        let rows = src.len() / last;
        let mut out = Vec::with_capacity(rows * indices.len());
        for r in 0..rows {
            out.extend(indices.iter().map(|&i| src[r * last + i]));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank checked") = indices.len();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::Gather(a, indices), value))
    }

    /// `out[..., indices[j]] += a[..., j]` into a last axis of length `width`.
    pub fn scatter_add(&mut self, a: Var, indices: Arc<[usize]>, width: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.last() != Some(&indices.len()) {
            return Err(AutodiffError::BadShape { shape, len: indices.len() });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= width) {
            return Err(AutodiffError::Index { index: bad, len: width });
        }
        let src = self.value(a).data();
        let rows = src.len() / indices.len();
        let mut out = vec![0.0; rows * width];
        for r in 0..rows {
            for (j, &i) in indices.iter().enumerate() {
                out[r * width + i] += src[r * indices.len() + j];
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank checked") = width;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::ScatterAdd(a, indices), value))
    }

    /// Per-blade channel contraction `y[b,o,d] = sum_i w[o,i,d] x[b,i,d]`.
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sx[2] != sw[2] {
            return Err(self.mismatch("channel_mix", x, w));
        }
        let (batch, cin, d, cout) = (sx[0], sx[1], sx[2], sw[0]);
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; batch * cout * d];
        for b in 0..batch {
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * d..(b * cout + o + 1) * d];
                for i in 0..cin {
                    let xs = &vx[(b * cin + i) * d..(b * cin + i + 1) * d];
                    let ws = &vw[(o * cin + i) * d..(o * cin + i + 1) * d];
                    for k in 0..d {
                        dst[k] += ws[k] * xs[k];
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, cout, d], out)?;
        Ok(self.push(Op::ChannelMix(x, w), value))
    }

    /// Maps a diagonal metric `[n]` to per-blade squares `[2^n]`,
    /// `out[B] = prod_{i in B} metric[i]`.
    pub fn blade_metric(&mut self, metric: Var) -> Result<Var> {
        let shape = self.shape(metric).to_vec();
        if shape.len() != 1 || shape[0] > crate::algebra::MAX_DIM {
            return Err(AutodiffError::Rank { op: "blade_metric", shape });
        }
        let diag = self.value(metric).data();
        let out = (0..1usize << diag.len())
            .map(|mask| {
                (0..diag.len())
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| diag[i])
                    .product()
            })
            .collect();
        let value = Tensor::vector(out);
        Ok(self.push(Op::BladeMetric(metric), value))
    }

    /// Weighted geometric product, channel by channel:
    /// `y[b,c,k] = sum over blade pairs (i, j) with i xor j = k of
    /// φ[c, gr(i), gr(j), gr(k)] * sign(i,j) * bm[i & j] * x1[b,c,i] * x2[b,c,j]`
    /// where `bm` is a [`Tape::blade_metric`] output.
    pub fn clifford_product(
        &mut self,
        left: Var,
        right: Var,
        weights: Var,
        blade_metric: Var,
        structure: Arc<ProductStructure>,
    ) -> Result<Var> {
        let size = structure.size();
        let g = structure.dim() + 1;
        let sl = self.shape(left).to_vec();
        if sl.len() != 3 || sl[2] != size || self.shape(right) != sl.as_slice() {
            return Err(self.mismatch("clifford_product", left, right));
        }
        if self.shape(weights) != [sl[1], g, g, g] {
            return Err(self.mismatch("clifford_product", left, weights));
        }
        if self.shape(blade_metric) != [size] {
            return Err(self.mismatch("clifford_product", left, blade_metric));
        }
        let coef = clifford_coefficients(
            &structure,
            sl[1],
            self.value(weights).data(),
            self.value(blade_metric).data(),
        );
        let (x1, x2) = (self.value(left).data(), self.value(right).data());
        let terms = structure.terms();
        let mut out = vec![0.0; x1.len()];
        for row in 0..sl[0] * sl[1] {
            let c = row % sl[1];
            let base = row * size;
            let k = &coef[c * terms.len()..(c + 1) * terms.len()];
            for (t, &kt) in terms.iter().zip(k) {
                if kt != 0.0 {
                    out[base + t.out] += kt * x1[base + t.left] * x2[base + t.right];
                }
            }
        }
        let value = Tensor::new(sl, out)?;
        Ok(self.push(
            Op::Clifford {
                left,
                right,
                weights,
                blade_metric,
                structure,
            },
            value,
        ))
    }

    fn metric_input(&self, m: Var) -> Result<MetricMatrix> {
        let shape = self.shape(m).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(AutodiffError::Rank { op: "eig", shape });
        }
        Ok(MetricMatrix::from_row_major(shape[0], self.value(m).data().to_vec())?)
    }

    /// Records the eigendecomposition of a symmetric matrix node. Returns
    /// the eigenvalues `[n]`, the eigenvector matrix `U` `[n, n]` (columns),
    /// and the decomposition itself.
    pub fn eig(&mut self, m: Var) -> Result<(Var, Var, Arc<EigenDecomposition>)> {
        let decomp = Arc::new(metric::eigendecompose(&self.metric_input(m)?)?);
        let n = decomp.dim();
        let values = Tensor::vector(decomp.eigenvalues().to_vec());
        let vectors = Tensor::new(vec![n, n], decomp.basis().as_slice().to_vec())?;
        let lambda = self.push(Op::EigValues(m, decomp.clone()), values);
        let basis = self.push(Op::EigVectors(m, decomp.clone()), vectors);
        Ok((lambda, basis, decomp))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, reduce_to(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, reduce_to(&g.map(|x| -x), self.value(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let inner = vb.len();
                let ga = zip_index(g, |i, gi| gi * vb.data()[i % inner]);
                let gb = zip_index(g, |i, gi| gi * va.data()[i]);
                send(*a, ga);
                send(*b, reduce_to(&gb, vb.shape()));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let inner = vb.len();
                let ga = zip_index(g, |i, gi| gi / vb.data()[i % inner]);
                let gb = zip_index(g, |i, gi| {
                    let d = vb.data()[i % inner];
                    -gi * va.data()[i] / (d * d)
                });
                send(*a, ga);
                send(*b, reduce_to(&gb, vb.shape()));
            }
            Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            acc += gij * vb.data()[p * n + j];
                            gb[p * n + j] += va.data()[i * k + p] * gij;
                        }
                        ga[i * k + p] = acc;
                    }
                }
                send(*a, Tensor::new(vec![m, k], ga)?);
                send(*b, Tensor::new(vec![k, n], gb)?);
            }
            Op::Transpose(a) => {
                let s = out.shape();
                send(*a, transpose2(g, s[0], s[1]));
            }
            Op::Reshape(a) => send(*a, g.reshaped(self.value(*a).shape())?),
            Op::Sigmoid(a) => send(*a, zip_index(g, |i, gi| {
                let s = out.data()[i];
                gi * s * (1.0 - s)
            })),
            Op::Relu(a) => {
                let va = self.value(*a);
                send(*a, zip_index(g, |i, gi| if va.data()[i] > 0.0 { gi } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                send(*a, zip_index(g, |i, gi| gi * sigmoid(va.data()[i])));
            }
            Op::Powf(a, p) => {
                let va = self.value(*a);
                send(*a, zip_index(g, |i, gi| gi * p * va.data()[i].powf(p - 1.0)));
            }
            Op::ClampAbsMin(a, floor) => {
                let va = self.value(*a);
                send(*a, zip_index(g, |i, gi| if va.data()[i].abs() >= *floor { gi } else { 0.0 }));
            }
            Op::Sum(a) => {
                let gi = g.data()[0];
                send(*a, Tensor::filled(self.value(*a).shape(), gi));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                send(*a, Tensor::filled(va.shape(), g.data()[0] / va.len() as f64));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.value(*a).shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                send(*a, Tensor::new(shape, ga)?);
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let len = ps[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g.data()[start..start + len * inner]);
                    }
                    offset += len;
                    send(p, Tensor::new(ps, gp)?);
                }
            }
            Op::Gather(a, indices) => {
                let shape = self.value(*a).shape().to_vec();
                let last = *shape.last().expect("gather input has rank >= 1");
                let rows = g.len() / indices.len();
                let mut ga = vec![0.0; rows * last];
                for r in 0..rows {
                    for (j, &i) in indices.iter().enumerate() {
                        ga[r * last + i] += g.data()[r * indices.len() + j];
                    }
                }
                send(*a, Tensor::new(shape, ga)?);
            }
            Op::ScatterAdd(a, indices) => {
                let width = *out.shape().last().expect("scatter output has rank >= 1");
                let rows = g.len() / width;
                let mut ga = Vec::with_capacity(rows * indices.len());
                for r in 0..rows {
                    ga.extend(indices.iter().map(|&i| g.data()[r * width + i]));
                }
                send(*a, Tensor::new(self.value(*a).shape().to_vec(), ga)?);
            }
            Op::ChannelMix(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, cin, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let cout = vw.shape()[0];
                let mut gx = vec![0.0; vx.len()];
                let mut gw = vec![0.0; vw.len()];
                for b in 0..batch {
                    for o in 0..cout {
                        let go = &g.data()[(b * cout + o) * d..(b * cout + o + 1) * d];
                        for i in 0..cin {
                            let xo = (b * cin + i) * d;
                            let wo = (o * cin + i) * d;
                            for k in 0..d {
                                gx[xo + k] += vw.data()[wo + k] * go[k];
                                gw[wo + k] += vx.data()[xo + k] * go[k];
                            }
                        }
                    }
                }
                send(*x, Tensor::new(vx.shape().to_vec(), gx)?);
                send(*w, Tensor::new(vw.shape().to_vec(), gw)?);
            }
            Op::BladeMetric(m) => {
                let diag = self.value(*m).data();
                let n = diag.len();
                let mut gm = vec![0.0; n];
                for (mask, gi) in g.data().iter().enumerate() {
                    for (i, slot) in gm.iter_mut().enumerate() {
                        if mask & (1 << i) == 0 {
                            continue;
                        }
                        let others: f64 = (0..n)
                            .filter(|&j| j != i && mask & (1 << j) != 0)
                            .map(|j| diag[j])
                            .product();
                        *slot += gi * others;
                    }
                }
                send(*m, Tensor::vector(gm));
            }
            Op::Clifford {
                left,
                right,
                weights,
                blade_metric,
                structure,
            } => {
                let (x1, x2) = (self.value(*left), self.value(*right));
                let (vw, vm) = (self.value(*weights), self.value(*blade_metric));
                let shape = x1.shape();
                let (batch, channels, size) = (shape[0], shape[1], shape[2]);
                let gsz = structure.dim() + 1;
                let terms = structure.terms();
                let coef = clifford_coefficients(structure, channels, vw.data(), vm.data());
                let mut g1 = vec![0.0; x1.len()];
                let mut g2 = vec![0.0; x2.len()];
                let mut gcoef = vec![0.0; coef.len()];
                for row in 0..batch * channels {
                    let c = row % channels;
                    let base = row * size;
                    let toff = c * terms.len();
                    for (ti, t) in terms.iter().enumerate() {
                        let go = g.data()[base + t.out];
                        if go == 0.0 {
                            continue;
                        }
                        let (a, b) = (x1.data()[base + t.left], x2.data()[base + t.right]);
                        let kt = coef[toff + ti];
                        g1[base + t.left] += kt * b * go;
                        g2[base + t.right] += kt * a * go;
                        gcoef[toff + ti] += a * b * go;
                    }
                }
                let mut gw = vec![0.0; vw.len()];
                let mut gm = vec![0.0; vm.len()];
                for c in 0..channels {
                    for (ti, t) in terms.iter().enumerate() {
                        let gc = gcoef[c * terms.len() + ti];
                        if gc == 0.0 {
                            continue;
                        }
                        let wi = weight_index(c, gsz, t.left_grade, t.right_grade, t.out_grade);
                        gw[wi] += gc * t.sign * vm.data()[t.overlap];
                        gm[t.overlap] += gc * t.sign * vw.data()[wi];
                    }
                }
                send(*left, Tensor::new(x1.shape().to_vec(), g1)?);
                send(*right, Tensor::new(x2.shape().to_vec(), g2)?);
                send(*weights, Tensor::new(vw.shape().to_vec(), gw)?);
                send(*blade_metric, Tensor::vector(gm));
            }
            Op::EigValues(m, decomp) => {
                let n = decomp.dim();
                let gm = metric::eigendecompose_backward_raw(decomp, g.data(), &Matrix::zeros(n))?;
                send(*m, Tensor::new(vec![n, n], gm.as_slice().to_vec())?);
            }
            Op::EigVectors(m, decomp) => {
                let n = decomp.dim();
                let gu = Matrix::from_row_major(n, g.data().to_vec())?;
                let gm = metric::eigendecompose_backward_raw(decomp, &vec![0.0; n], &gu)?;
                send(*m, Tensor::new(vec![n, n], gm.as_slice().to_vec())?);
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn clamp_abs(x: f64, floor: f64) -> f64 {
    if x.abs() >= floor {
        x
    } else if x < 0.0 {
        -floor
    } else {
        floor
    }
}

fn weight_index(c: usize, g: usize, i: usize, j: usize, k: usize) -> usize {
    ((c * g + i) * g + j) * g + k
}

/// Effective scale of every (channel, term) pair.
fn clifford_coefficients(
    structure: &ProductStructure,
    channels: usize,
    weights: &[f64],
    blade_metric: &[f64],
) -> Vec<f64> {
    let g = structure.dim() + 1;
    let terms = structure.terms();
    let mut coef = Vec::with_capacity(channels * terms.len());
    for c in 0..channels {
        for t in terms {
            let w = weights[weight_index(c, g, t.left_grade, t.right_grade, t.out_grade)];
            coef.push(w * t.sign * blade_metric[t.overlap]);
        }
    }
    coef
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose2(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = t.data()[i * cols + j];
        }
    }
    Tensor::new(vec![cols, rows], out).expect("transpose preserves size")
}

fn zip_index(g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let data = g.data().iter().enumerate().map(|(i, &x)| f(i, x)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape as gradient")
}

/// Sums a gradient over the leading axes that were broadcast.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let inner: usize = shape.iter().product();
    let mut out = vec![0.0; inner];
    for (i, x) in g.data().iter().enumerate() {
        out[i % inner] += x;
    }
    if shape.is_empty() {
        Tensor::scalar(out[0])
    } else {
        Tensor::new(shape.to_vec(), out).expect("suffix shape")
    }
}

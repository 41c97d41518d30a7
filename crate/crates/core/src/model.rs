//! The full network, its metric pipeline, and the training loop.
//!
//! Forward pass: if the metric is active, `M = U diag(λ) U^T` is
//! decomposed on the tape; point inputs enter as `Cx`, volumes as
//! `det(C) v`, and the blocks run in `Cl(λ)`. Otherwise the blocks run
//! directly in `Cl(Q)`. Outputs are carried back by their kind.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{AlgebraError, DiagonalMetric, ProductStructure, MAX_DIM};
use crate::autodiff::{AutodiffError, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::layers::{self, AlgebraContext, LayerError};
use crate::metric::{self, MetricError, MetricMatrix, OutputKind};

/// Rows per chunk when evaluating a whole dataset.
const EVAL_CHUNK: usize = 256;
/// Metrics are logged with an eval pass every this many steps.
pub const LOG_INTERVAL: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data does not match the model: {0}")]
    DataMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("non-finite gradient for `{name}` at step {step}")]
    NonFiniteGradient { step: usize, name: String },
    #[error("metric already activated at step {0}")]
    AlreadyActivated(usize),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Number of feature channels of each kind per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub points: usize,
    pub scalars: usize,
    pub volumes: usize,
}

impl InputLayout {
    pub fn channels(&self) -> usize {
        self.points + self.scalars + self.volumes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub q_signature: Vec<f64>,
    pub epsilon: f64,
    pub num_blocks: usize,
    pub hidden_channels: usize,
    pub output_kind: OutputKind,
    pub output_channels: usize,
    pub inputs: InputLayout,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 || self.dim > MAX_DIM {
            return fail(format!("dim must be in 1..={MAX_DIM}, got {}", self.dim));
        }
        if self.q_signature.len() != self.dim {
            return fail(format!(
                "q_signature has {} entries for dim {}",
                self.q_signature.len(),
                self.dim
            ));
        }
        if self.q_signature.iter().any(|q| !q.is_finite()) {
            return fail("q_signature must be finite".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be finite and non-negative, got {}", self.epsilon));
        }
        if self.num_blocks == 0 || self.hidden_channels == 0 || self.output_channels == 0 {
            return fail("num_blocks, hidden_channels and output_channels must be at least 1".into());
        }
        if self.inputs.channels() == 0 {
            return fail("the input layout has no channels".into());
        }
        Ok(())
    }

    pub fn q(&self) -> Result<DiagonalMetric> {
        Ok(DiagonalMetric::new(self.q_signature.clone())?)
    }

    /// Width of one example's target.
    pub fn target_width(&self) -> usize {
        self.output_channels * self.output_kind.width(self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub metric_activation_fraction: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-3,
            metric_activation_fraction: 0.0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return fail("steps and batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.metric_activation_fraction) {
            return fail(format!(
                "metric_activation_fraction must be in [0, 1], got {}",
                self.metric_activation_fraction
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return fail("adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }

    /// `floor(fraction * steps)`, or `None` when that falls past the last step.
    pub fn activation_step(&self) -> Option<usize> {
        let s = (self.metric_activation_fraction * self.steps as f64).floor() as usize;
        (s < self.steps).then_some(s)
    }
}

/// Flat storage for a task's examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    layout: InputLayout,
    target_width: usize,
    offset_width: usize,
    len: usize,
    points: Vec<f64>,
    scalars: Vec<f64>,
    volumes: Vec<f64>,
    offsets: Vec<f64>,
    targets: Vec<f64>,
}

/// One example: `points` holds `P * n` values, `offsets` is either empty or
/// as wide as the target and is added to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub points: Vec<f64>,
    pub scalars: Vec<f64>,
    pub volumes: Vec<f64>,
    pub offsets: Vec<f64>,
    pub target: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, layout: InputLayout, target_width: usize, examples: &[Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let offset_width = examples[0].offsets.len();
        if offset_width != 0 && offset_width != target_width {
            return Err(ModelError::DataMismatch(format!(
                "offset width {offset_width} differs from target width {target_width}"
            )));
        }
        let mut ds = Self {
            dim,
            layout,
            target_width,
            offset_width,
            len: examples.len(),
            points: Vec::new(),
            scalars: Vec::new(),
            volumes: Vec::new(),
            offsets: Vec::new(),
            targets: Vec::new(),
        };
        for (i, ex) in examples.iter().enumerate() {
            let widths = [
                (ex.points.len(), layout.points * dim, "points"),
                (ex.scalars.len(), layout.scalars, "scalars"),
                (ex.volumes.len(), layout.volumes, "volumes"),
                (ex.offsets.len(), offset_width, "offsets"),
                (ex.target.len(), target_width, "target"),
            ];
            for (got, want, what) in widths {
                if got != want {
                    return Err(ModelError::DataMismatch(format!(
                        "example {i}: {what} has {got} values, expected {want}"
                    )));
                }
            }
            ds.points.extend_from_slice(&ex.points);
            ds.scalars.extend_from_slice(&ex.scalars);
            ds.volumes.extend_from_slice(&ex.volumes);
            ds.offsets.extend_from_slice(&ex.offsets);
            ds.targets.extend_from_slice(&ex.target);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layout(&self) -> InputLayout {
        self.layout
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len) {
            return Err(ModelError::DataMismatch(format!("index {bad} out of range for {} examples", self.len)));
        }
        let b = indices.len();
        let take = |src: &[f64], width: usize, shape: Vec<usize>| -> Result<Option<Tensor>> {
            if width == 0 {
                return Ok(None);
            }
            let data = indices
                .iter()
                .flat_map(|&i| src[i * width..(i + 1) * width].iter().copied())
                .collect();
            Ok(Some(Tensor::new(shape, data)?))
        };
        let n = self.dim;
        let l = self.layout;
        Ok(Batch {
            points: take(&self.points, l.points * n, vec![b, l.points, n])?,
            scalars: take(&self.scalars, l.scalars, vec![b, l.scalars])?,
            volumes: take(&self.volumes, l.volumes, vec![b, l.volumes])?,
            offsets: take(&self.offsets, self.offset_width, vec![b, self.offset_width])?,
            targets: take(&self.targets, self.target_width, vec![b, self.target_width])?
                .expect("targets are never empty"),
        })
    }
}

/// Model inputs for a batch of `B` examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, P, n]`
    pub points: Option<Tensor>,
    /// `[B, S]`
    pub scalars: Option<Tensor>,
    /// `[B, V]`
    pub volumes: Option<Tensor>,
    /// `[B, T]`, added to the prediction.
    pub offsets: Option<Tensor>,
    /// `[B, T]`
    pub targets: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.targets.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    GeometricProduct,
    Norm,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerEntry {
    kind: LayerKind,
    params: Vec<(&'static str, ParamId)>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    linear: ParamId,
    right: ParamId,
    product: ParamId,
    norm: ParamId,
    gate_u: ParamId,
    gate_b: ParamId,
}

/// The network parameters together with the metric state.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    q: DiagonalMetric,
    structure: Arc<ProductStructure>,
    params: ParamStore,
    layers: Vec<LayerEntry>,
    blocks: Vec<Block>,
    readout: ParamId,
    metric: ParamId,
    activated: bool,
    activation_step: Option<usize>,
}

/// Tape variables of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Readout channels in the working algebra, `[B, Co, 2^n]`.
    pub readout: Var,
    /// Prediction in input coordinates, `[B, T]`.
    pub prediction: Var,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let q = config.q()?;
        let n = config.dim;
        let h = config.hidden_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut blocks = Vec::new();
        let mut cin = config.inputs.channels();
        for i in 0..config.num_blocks {
            let linear = params.add(format!("blocks.{i}.linear"), layers::init_linear(&mut rng, h, cin, n));
            let right = params.add(format!("blocks.{i}.linear_right"), layers::init_linear(&mut rng, h, h, n));
            let product = params.add(
                format!("blocks.{i}.geometric_product"),
                layers::init_geometric_product(&mut rng, h, n),
            );
            let norm = params.add(format!("blocks.{i}.norm.a"), Tensor::zeros(&[n + 1]));
            let gate_u = params.add(format!("blocks.{i}.nonlinear.u"), Tensor::zeros(&[n + 1]));
            let gate_b = params.add(format!("blocks.{i}.nonlinear.b"), Tensor::zeros(&[n + 1]));
            layers.push(LayerEntry { kind: LayerKind::Linear, params: vec![("weights", linear)] });
            layers.push(LayerEntry { kind: LayerKind::Linear, params: vec![("weights", right)] });
            layers.push(LayerEntry { kind: LayerKind::GeometricProduct, params: vec![("weights", product)] });
            layers.push(LayerEntry { kind: LayerKind::Norm, params: vec![("a", norm)] });
            layers.push(LayerEntry { kind: LayerKind::Nonlinear, params: vec![("u", gate_u), ("b", gate_b)] });
            blocks.push(Block { linear, right, product, norm, gate_u, gate_b });
            cin = h;
        }
        let readout = params.add("readout", layers::init_linear(&mut rng, config.output_channels, h, n));
        layers.push(LayerEntry { kind: LayerKind::Linear, params: vec![("weights", readout)] });
        let metric = params.add("metric.M", metric_tensor(&MetricMatrix::from_diagonal(&q)));
        Ok(Self {
            structure: Arc::new(ProductStructure::new(n)?),
            q,
            config,
            params,
            layers,
            blocks,
            readout,
            metric,
            activated: false,
            activation_step: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn metric_param(&self) -> ParamId {
        self.metric
    }

    pub fn is_activated(&self) -> bool {
        self.activated
    }

    pub fn activation_step(&self) -> Option<usize> {
        self.activation_step
    }

    /// The current metric. Fails if the stored matrix lost exact symmetry.
    pub fn metric(&self) -> Result<MetricMatrix> {
        Ok(MetricMatrix::from_row_major(
            self.config.dim,
            self.params.value(self.metric).data().to_vec(),
        )?)
    }

    /// Replaces `M` by `init_metric(Q, ε, seed)` and makes it trainable.
    pub fn activate_metric(&mut self, step: usize) -> Result<()> {
        if let Some(at) = self.activation_step.filter(|_| self.activated) {
            return Err(ModelError::AlreadyActivated(at));
        }
        let m = metric::init_metric(&self.q, self.config.epsilon, self.config.seed)?;
        self.params.get_mut(self.metric).value = metric_tensor(&m);
        self.activated = true;
        self.activation_step = Some(step);
        Ok(())
    }

    /// Sets `M` directly and marks the metric active.
    pub fn set_metric(&mut self, m: &MetricMatrix, step: usize) -> Result<()> {
        if m.dim() != self.config.dim {
            return Err(ModelError::DataMismatch(format!(
                "metric of dimension {} for a model of dimension {}",
                m.dim(),
                self.config.dim
            )));
        }
        self.params.get_mut(self.metric).value = metric_tensor(m);
        self.activated = true;
        self.activation_step = Some(step);
        Ok(())
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let c = &self.config;
        if data.dim != c.dim {
            return Err(ModelError::DataMismatch(format!("data dimension {} vs model dimension {}", data.dim, c.dim)));
        }
        if data.layout != c.inputs {
            return Err(ModelError::DataMismatch(format!(
                "data layout {:?} vs model layout {:?}",
                data.layout, c.inputs
            )));
        }
        if data.target_width != c.target_width() {
            return Err(ModelError::DataMismatch(format!(
                "target width {} vs model output width {}",
                data.target_width,
                c.target_width()
            )));
        }
        Ok(())
    }

    /// Records the forward pass of `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput> {
        let n = self.config.dim;
        let b = batch.size();
        let (ctx, basis, det_c) = if self.activated {
            let m = self.params.bind(tape, self.metric);
            let (lambda, u, decomp) = tape.eig(m)?;
            let ctx = AlgebraContext::new(tape, self.structure.clone(), lambda)?;
            (ctx, Some(u), decomp.det_c())
        } else {
            (AlgebraContext::constant(tape, self.structure.clone(), &self.q)?, None, 1.0)
        };

        let points = match &batch.points {
            Some(p) => {
                let p = tape.constant(p.clone());
                Some(match basis {
                    Some(u) => rows_times(tape, p, u)?,
                    None => p,
                })
            }
            None => None,
        };
        let scalars = batch.scalars.clone().map(|s| tape.constant(s));
        let volumes = batch.volumes.clone().map(|v| {
            let v = tape.constant(v);
            if basis.is_some() {
                tape.scale(v, det_c)
            } else {
                v
            }
        });
        let mut x = layers::embed(tape, n, points, scalars, volumes)?;

        for block in &self.blocks {
            let w = self.params.bind(tape, block.linear);
            let h = layers::linear_layer(tape, &ctx, x, w)?;
            let w = self.params.bind(tape, block.right);
            let r = layers::linear_layer(tape, &ctx, h, w)?;
            let phi = self.params.bind(tape, block.product);
            let g = layers::geometric_product_layer(tape, &ctx, h, r, phi)?;
            let a = self.params.bind(tape, block.norm);
            let g = layers::norm_layer(tape, &ctx, g, a)?;
            let u = self.params.bind(tape, block.gate_u);
            let bias = self.params.bind(tape, block.gate_b);
            let g = layers::nonlinear_layer(tape, &ctx, g, u, bias)?;
            x = tape.add(h, g)?;
        }
        let w = self.params.bind(tape, self.readout);
        let readout = layers::linear_layer(tape, &ctx, x, w)?;

        let co = self.config.output_channels;
        let size = 1usize << n;
        let mut prediction = match self.config.output_kind {
            OutputKind::Point => {
                let idx: Arc<[usize]> = (0..n).map(|i| 1 << i).collect();
                let y = tape.gather(readout, idx)?;
                let y = match basis {
                    Some(u) => {
                        let ut = tape.transpose(u)?;
                        rows_times(tape, y, ut)?
                    }
                    None => y,
                };
                tape.reshape(y, &[b, co * n])?
            }
            OutputKind::Volume => {
                let y = tape.gather(readout, Arc::from([size - 1]))?;
                let y = tape.reshape(y, &[b, co])?;
                if basis.is_some() {
                    tape.scale(y, 1.0 / det_c)
                } else {
                    y
                }
            }
            OutputKind::Scalar | OutputKind::Probability => {
                let y = tape.gather(readout, Arc::from([0usize]))?;
                tape.reshape(y, &[b, co])?
            }
        };
        if let Some(off) = &batch.offsets {
            let off = tape.constant(off.clone());
            prediction = tape.add(prediction, off)?;
        }
        Ok(ForwardOutput { readout, prediction })
    }

    /// Mean loss of `prediction` against the batch targets.
    pub fn loss(&self, tape: &mut Tape, prediction: Var, targets: &Tensor) -> Result<Var> {
        let t = tape.constant(targets.clone());
        Ok(match self.config.output_kind {
            OutputKind::Probability => {
                // softplus(z) - t z is the logistic loss on logits
                let sp = tape.softplus(prediction);
                let tz = tape.mul(prediction, t)?;
                let l = tape.sub(sp, tz)?;
                tape.mean(l)
            }
            _ => {
                let d = tape.sub(prediction, t)?;
                let sq = tape.mul(d, d)?;
                tape.mean(sq)
            }
        })
    }

    /// Predictions for a batch, without gradients.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        Ok(tape.value(out.prediction).clone())
    }

    pub fn checkpoint_layers(&self) -> Vec<LayerRecord> {
        self.layers
            .iter()
            .map(|l| LayerRecord {
                kind: l.kind,
                weights: l
                    .params
                    .iter()
                    .map(|&(name, id)| (name.to_string(), TensorRecord::from(self.params.value(id))))
                    .collect(),
            })
            .collect()
    }
}

fn metric_tensor(m: &MetricMatrix) -> Tensor {
    let n = m.dim();
    Tensor::new(vec![n, n], m.values().as_slice().to_vec()).expect("square matrix")
}

/// `[B, R, n] x [n, n] -> [B, R, n]`, treating each row as a row vector.
fn rows_times(tape: &mut Tape, x: Var, m: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = shape[2];
    let flat = tape.reshape(x, &[shape[0] * shape[1], n])?;
    let y = tape.matmul(flat, m)?;
    Ok(tape.reshape(y, &shape)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub count: usize,
}

/// Mean loss over the whole dataset (and accuracy at threshold 0.5 for
/// probability outputs).
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalMetrics> {
    model.check_data(data)?;
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut elements = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch)?;
        let loss = model.loss(&mut tape, out.prediction, &batch.targets)?;
        let count = batch.targets.len();
        total += tape.value(loss).data()[0] * count as f64;
        elements += count;
        if model.config.output_kind == OutputKind::Probability {
            let pred = tape.value(out.prediction).data();
            correct += pred
                .iter()
                .zip(batch.targets.data())
                .filter(|(z, t)| (**z >= 0.0) == (**t >= 0.5))
                .count();
        }
    }
    Ok(EvalMetrics {
        loss: total / elements as f64,
        accuracy: (model.config.output_kind == OutputKind::Probability).then(|| correct as f64 / elements as f64),
        count: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: Vec<Moments>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, params: &ParamStore) -> Self {
        Self {
            kind: config.optimizer,
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            moments: params
                .iter()
                .map(|(_, p)| Moments {
                    t: 0,
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                })
                .collect(),
        }
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    /// Applies one update to every parameter for which `active` holds.
    pub fn step(&mut self, params: &mut ParamStore, active: impl Fn(ParamId) -> bool) {
        let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !active(id) {
                continue;
            }
            let p = params.get_mut(id);
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in value.iter_mut().zip(&grad) {
                        *x -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let mo = &mut self.moments[id.0];
                    mo.t += 1;
                    let c1 = 1.0 - self.beta1.powi(mo.t as i32);
                    let c2 = 1.0 - self.beta2.powi(mo.t as i32);
                    for i in 0..value.len() {
                        mo.m[i] = self.beta1 * mo.m[i] + (1.0 - self.beta1) * grad[i];
                        mo.v[i] = self.beta2 * mo.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                        let mh = mo.m[i] / c1;
                        let vh = mo.v[i] / c2;
                        value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// One logged row of the training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub metric_activated: bool,
    pub metric_offdiag_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub activation_step: Option<usize>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    model: Model,
    config: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    step: usize,
    symmetrize_metric_grad: bool,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config)?;
        let optimizer = Optimizer::new(&config, model.params());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            optimizer,
            step: 0,
            symmetrize_metric_grad: true,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    /// Test hook: leave the metric gradient unsymmetrized.
    #[doc(hidden)]
    pub fn set_symmetrize_metric_grad(&mut self, on: bool) {
        self.symmetrize_metric_grad = on;
    }

    pub fn activate_metric(&mut self) -> Result<()> {
        let step = self.step;
        self.model.activate_metric(step)
    }

    /// Draws `batch_size` example indices, with replacement.
    pub fn sample_indices(&mut self, len: usize) -> Vec<usize> {
        (0..self.config.batch_size).map(|_| self.rng.random_range(0..len)).collect()
    }

    /// Gradients of the batch loss, accumulated into the parameter store.
    pub fn compute_gradients(&mut self, batch: &Batch) -> Result<f64> {
        self.model.params_mut().zero_grad();
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, batch)?;
        let loss = self.model.loss(&mut tape, out.prediction, &batch.targets)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss { step: self.step, loss: value });
        }
        let grads: Gradients = tape.backward(loss)?;
        self.model.params_mut().accumulate(&tape, &grads);
        if self.model.activated && self.symmetrize_metric_grad {
            let id = self.model.metric;
            let n = self.model.config.dim;
            let g = &mut self.model.params_mut().get_mut(id).grad;
            let raw = g.data().to_vec();
            for i in 0..n {
                for j in 0..n {
                    g.data_mut()[i * n + j] = (raw[i * n + j] + raw[j * n + i]) / 2.0;
                }
            }
        }
        for (_, p) in self.model.params().iter() {
            if !p.grad.is_finite() {
                return Err(ModelError::NonFiniteGradient { step: self.step, name: p.name.clone() });
            }
        }
        Ok(value)
    }

    /// One optimization step on `batch`; returns the batch loss before the
    /// update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let loss = self.compute_gradients(batch)?;
        let metric_id = self.model.metric;
        let activated = self.model.activated;
        self.optimizer
            .step(self.model.params_mut(), |id| id != metric_id || activated);
        self.model.metric()?;
        self.step += 1;
        Ok(loss)
    }

    /// Trains for the configured number of steps. `observer` sees every
    /// logged row and the state after each step.
    pub fn run(
        &mut self,
        train: &Dataset,
        eval: Option<&Dataset>,
        mut observer: impl FnMut(&StepRecord, &TrainState),
    ) -> Result<TrainSummary> {
        self.model.check_data(train)?;
        if let Some(e) = eval {
            self.model.check_data(e)?;
        }
        let initial = evaluate(&self.model, train)?.loss;
        let activation = self.config.activation_step();
        while self.step < self.config.steps {
            if activation == Some(self.step) && !self.model.activated {
                self.activate_metric()?;
            }
            let indices = self.sample_indices(train.len());
            let batch = train.batch(&indices)?;
            let step = self.step;
            let loss = self.train_step(&batch)?;
            let eval_loss = match eval {
                Some(e) if step % LOG_INTERVAL == 0 => Some(evaluate(&self.model, e)?.loss),
                _ => None,
            };
            let record = StepRecord {
                step,
                train_loss: loss,
                eval_loss,
                metric_activated: self.model.activated,
                metric_offdiag_norm: self.model.metric()?.off_diagonal_norm(),
            };
            observer(&record, self);
        }
        let final_train = evaluate(&self.model, train)?;
        if !final_train.loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { step: self.step, loss: final_train.loss });
        }
        let final_eval = eval.map(|e| evaluate(&self.model, e)).transpose()?;
        observer(
            &StepRecord {
                step: self.step,
                train_loss: final_train.loss,
                eval_loss: final_eval.map(|m| m.loss),
                metric_activated: self.model.activated,
                metric_offdiag_norm: self.model.metric()?.off_diagonal_norm(),
            },
            self,
        );
        Ok(TrainSummary {
            steps: self.step,
            initial_train_loss: initial,
            final_train_loss: final_train.loss,
            final_eval_loss: final_eval.map(|m| m.loss),
            final_eval_accuracy: final_eval.and_then(|m| m.accuracy),
            activation_step: self.model.activation_step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let model = &self.model;
        let m = model.metric_matrix_rows();
        Checkpoint {
            model: model.config.clone(),
            train: self.config.clone(),
            metric: MetricRecord {
                m,
                epsilon: model.config.epsilon,
                q_signature: model.config.q_signature.clone(),
                activated: model.activated,
                activation_step: model.activation_step,
            },
            layers: model.checkpoint_layers(),
            optimizer: OptimizerRecord {
                kind: self.optimizer.kind,
                moments: model
                    .params
                    .iter()
                    .map(|(id, p)| (p.name.clone(), self.optimizer.moments[id.0].clone()))
                    .collect(),
            },
            rng: RngRecord {
                seed: self.config.seed,
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            step: self.step,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(ck.model.clone(), ck.train.clone())?;
        let bad = |m: String| ModelError::Checkpoint(m);
        if ck.layers.len() != state.model.layers.len() {
            return Err(bad(format!(
                "{} layers recorded, model has {}",
                ck.layers.len(),
                state.model.layers.len()
            )));
        }
        for (i, (rec, entry)) in ck.layers.iter().zip(state.model.layers.clone()).enumerate() {
            if rec.kind != entry.kind {
                return Err(bad(format!("layer {i}: kind {:?}, expected {:?}", rec.kind, entry.kind)));
            }
            for (name, id) in entry.params {
                let t = rec
                    .weights
                    .get(name)
                    .ok_or_else(|| bad(format!("layer {i}: missing `{name}`")))?;
                let value = Tensor::new(t.shape.clone(), t.data.clone())?;
                let p = state.model.params.get_mut(id);
                if value.shape() != p.value.shape() {
                    return Err(bad(format!(
                        "layer {i}: `{name}` has shape {:?}, expected {:?}",
                        value.shape(),
                        p.value.shape()
                    )));
                }
                p.value = value;
            }
        }
        let n = ck.model.dim;
        if ck.metric.m.len() != n || ck.metric.m.iter().any(|r| r.len() != n) {
            return Err(bad(format!("metric.M is not {n}x{n}")));
        }
        let m = MetricMatrix::from_row_major(n, ck.metric.m.concat())?;
        state.model.params.get_mut(state.model.metric).value = metric_tensor(&m);
        state.model.activated = ck.metric.activated;
        state.model.activation_step = ck.metric.activation_step;
        if ck.optimizer.kind != ck.train.optimizer {
            return Err(bad("optimizer kind disagrees with the train config".into()));
        }
        for (id, p) in state.model.params.iter() {
            let mo = ck
                .optimizer
                .moments
                .get(&p.name)
                .ok_or_else(|| bad(format!("missing optimizer moments for `{}`", p.name)))?;
            if mo.m.len() != p.value.len() || mo.v.len() != p.value.len() {
                return Err(bad(format!("optimizer moments for `{}` have the wrong length", p.name)));
            }
            state.optimizer.moments[id.0] = mo.clone();
        }
        state.rng = ChaCha8Rng::seed_from_u64(ck.rng.seed);
        state.rng.set_stream(ck.rng.stream);
        state.rng.set_word_pos(ck.rng.word_pos);
        state.step = ck.step;
        Ok(state)
    }
}

impl Model {
    fn metric_matrix_rows(&self) -> Vec<Vec<f64>> {
        let n = self.config.dim;
        self.params
            .value(self.metric)
            .data()
            .chunks(n)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Rebuilds a model (no optimizer state) from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(TrainState::from_checkpoint(ck)?.model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub kind: LayerKind,
    pub weights: BTreeMap<String, TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    pub epsilon: f64,
    pub q_signature: Vec<f64>,
    pub activated: bool,
    pub activation_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub kind: OptimizerKind,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metric: MetricRecord,
    pub layers: Vec<LayerRecord>,
    pub optimizer: OptimizerRecord,
    pub rng: RngRecord,
    pub step: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(kind: OutputKind) -> ModelConfig {
        ModelConfig {
            dim: 3,
            q_signature: vec![1.0; 3],
            epsilon: 1e-3,
            num_blocks: 2,
            hidden_channels: 4,
            output_kind: kind,
            output_channels: 1,
            inputs: InputLayout { points: 2, scalars: 1, volumes: 1 },
            seed: 5,
        }
    }

    fn data(kind: OutputKind, count: usize) -> Dataset {
        let cfg = config(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let examples: Vec<Example> = (0..count)
            .map(|_| Example {
                points: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                scalars: vec![rng.random_range(-1.0..1.0)],
                volumes: vec![rng.random_range(-1.0..1.0)],
                offsets: Vec::new(),
                target: (0..cfg.target_width())
                    .map(|_| if kind == OutputKind::Probability { 1.0 } else { rng.random_range(-1.0..1.0) })
                    .collect(),
            })
            .collect();
        Dataset::new(3, cfg.inputs, cfg.target_width(), &examples).unwrap()
    }

    #[test]
    fn activation_step_is_floor_of_fraction() {
        let mut t = TrainConfig { steps: 1000, metric_activation_fraction: 0.9, ..TrainConfig::default() };
        assert_eq!(t.activation_step(), Some(900));
        t.metric_activation_fraction = 0.0;
        assert_eq!(t.activation_step(), Some(0));
        t.metric_activation_fraction = 1.0;
        assert_eq!(t.activation_step(), None);
    }

    #[test]
    fn identity_metric_activation_matches_fixed_path() {
        let mut cfg = config(OutputKind::Point);
        cfg.epsilon = 0.0;
        let ds = data(OutputKind::Point, 4);
        let batch = ds.batch(&[0, 1, 2, 3]).unwrap();
        let mut model = Model::new(cfg).unwrap();
        let before = model.predict(&batch).unwrap();
        model.activate_metric(0).unwrap();
        let after = model.predict(&batch).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(model.activate_metric(1), Err(ModelError::AlreadyActivated(0))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let train = TrainConfig { steps: 3, learning_rate: 0.0, ..TrainConfig::default() };
        let mut state = TrainState::new(config(OutputKind::Volume), train).unwrap();
        state.activate_metric().unwrap();
        let before = state.model().params().clone();
        let ds = data(OutputKind::Volume, 8);
        let loss = state.train_step(&ds.batch(&[0, 1, 2]).unwrap()).unwrap();
        assert!(loss.is_finite());
        for ((_, a), (_, b)) in before.iter().zip(state.model().params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn metric_stays_exactly_symmetric() {
        let train = TrainConfig { steps: 5, learning_rate: 1e-2, ..TrainConfig::default() };
        let mut state = TrainState::new(config(OutputKind::Point), train).unwrap();
        state.activate_metric().unwrap();
        let ds = data(OutputKind::Point, 8);
        for _ in 0..5 {
            state.train_step(&ds.batch(&[0, 3, 5]).unwrap()).unwrap();
            let m = state.model().metric().unwrap();
            assert!(m.off_diagonal_norm() > 0.0);
        }
    }

    #[test]
    fn unsymmetrized_metric_update_is_rejected() {
        let train = TrainConfig { steps: 5, learning_rate: 1e-2, ..TrainConfig::default() };
        let mut state = TrainState::new(config(OutputKind::Point), train).unwrap();
        state.set_symmetrize_metric_grad(false);
        state.activate_metric().unwrap();
        let ds = data(OutputKind::Point, 8);
        let err = state.train_step(&ds.batch(&[0, 3, 5]).unwrap()).unwrap_err();
        assert!(matches!(err, ModelError::Metric(MetricError::NotSymmetric { .. })));
    }

    #[test]
    fn evaluate_reports_accuracy_for_probabilities() {
        let model = Model::new(config(OutputKind::Probability)).unwrap();
        let ds = data(OutputKind::Probability, 10);
        let m = evaluate(&model, &ds).unwrap();
        assert!(m.loss.is_finite());
        let acc = m.accuracy.unwrap();
        let batch = ds.batch(&(0..10).collect::<Vec<_>>()).unwrap();
        let pred = model.predict(&batch).unwrap();
        let positives = pred.data().iter().filter(|z| **z >= 0.0).count();
        assert_eq!(acc, positives as f64 / 10.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let train = TrainConfig { steps: 4, batch_size: 4, ..TrainConfig::default() };
        let mut state = TrainState::new(config(OutputKind::Scalar), train).unwrap();
        let ds = data(OutputKind::Scalar, 16);
        state.activate_metric().unwrap();
        for _ in 0..2 {
            let idx = state.sample_indices(ds.len());
            state.train_step(&ds.batch(&idx).unwrap()).unwrap();
        }
        let ck = state.checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ck);
        let mut restored = TrainState::from_checkpoint(&back).unwrap();
        assert_eq!(restored.checkpoint(), ck);
        let a = state.sample_indices(ds.len());
        let b = restored.sample_indices(ds.len());
        assert_eq!(a, b);
        let la = state.train_step(&ds.batch(&a).unwrap()).unwrap();
        let lb = restored.train_step(&ds.batch(&b).unwrap()).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let model = Model::new(config(OutputKind::Volume)).unwrap();
        let mut cfg = config(OutputKind::Volume);
        cfg.dim = 2;
        cfg.q_signature = vec![1.0; 2];
        let ex = Example {
            points: vec![0.0; 4],
            scalars: vec![0.0],
            volumes: vec![0.0],
            offsets: Vec::new(),
            target: vec![0.0],
        };
        let ds = Dataset::new(2, cfg.inputs, 1, &[ex]).unwrap();
        assert!(matches!(evaluate(&model, &ds), Err(ModelError::DataMismatch(_))));
    }
}

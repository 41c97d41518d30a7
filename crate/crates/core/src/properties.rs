//! Executable property suite over the algebra, the metric pipeline, the
//! layers and the model.
//!
//! Each property runs a number of randomized cases and records the largest
//! observed error against its tolerance. Measurements carry no tolerance and
//! never fail.

use std::fmt::Display;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    self, extended_quadratic_form, geometric_product, grade_project, make_versor, reversal, versor_action, wedge,
    Blade, CayleyTable, DiagonalMetric, Multivector, ProductStructure,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::layers::{self, AlgebraContext, MultivectorBatch};
use crate::metric::{self, Matrix, MetricMatrix, OutputKind};
use crate::model::{Batch, InputLayout, Model, ModelConfig, TrainConfig, TrainState};
use crate::tasks;

/// Exact identities.
pub const EXACT_TOL: f64 = 1e-10;
/// Identities in a single product or sum.
pub const TIGHT_TOL: f64 = 1e-12;
/// Relative gradient agreement.
pub const GRADIENT_TOL: f64 = 1e-4;
pub const EQUIVARIANCE_TOL: f64 = 1e-5;
pub const LAYER_EQUIVARIANCE_TOL: f64 = 1e-6;
pub const PROOF_TOL: f64 = 1e-9;
pub const FD_STEP: f64 = 1e-5;
/// Cases for the costly properties are capped at this count.
pub const EXPENSIVE_CASES: usize = 50;
pub const METRIC_MATRICES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Algebra,
    Metric,
    Layers,
    Model,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "algebra" => Ok(Suite::Algebra),
            "metric" => Ok(Suite::Metric),
            "layers" => Ok(Suite::Layers),
            "model" => Ok(Suite::Model),
            "all" => Ok(Suite::All),
            other => Err(format!("unknown suite `{other}`")),
        }
    }
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Algebra => "algebra",
            Suite::Metric => "metric",
            Suite::Layers => "layers",
            Suite::Model => "model",
            Suite::All => "all",
        }
    }

    fn modules(self) -> &'static [&'static str] {
        match self {
            Suite::Algebra => &["algebra"],
            Suite::Metric => &["metric"],
            Suite::Layers => &["layers"],
            Suite::Model => &["model"],
            Suite::All => &["algebra", "metric", "layers", "model"],
        }
    }
}

/// Deliberate defects for checking that the suite catches them.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Negates the `e1 e2` entry of every Cayley table the suite builds.
    CayleySign,
    /// Trains without symmetrizing the metric gradient.
    NoMetricSymmetrization,
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cayley-sign" => Ok(Mutation::CayleySign),
            "no-metric-symmetrization" => Ok(Mutation::NoMetricSymmetrization),
            other => Err(format!("unknown mutation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub property: String,
    pub case: usize,
    pub inputs: String,
    pub observed: Option<f64>,
    pub expected: f64,
    pub tolerance: f64,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub module: String,
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    /// `None` for measurements.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub suite: String,
    pub seed: u64,
    pub trials: usize,
    pub cases: usize,
    pub failures: Vec<Failure>,
    pub properties: Vec<PropertyResult>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

pub struct PropertyInfo {
    pub name: &'static str,
    pub module: &'static str,
    pub covers: &'static [&'static str],
}

/// Every stated invariant, by module.
pub const INVARIANTS: &[(&str, &str)] = &[
    ("algebra", "associativity"),
    ("algebra", "bilinearity"),
    ("algebra", "vector-product-identity"),
    ("algebra", "reversal-anti-automorphism"),
    ("algebra", "vector-quadratic-form"),
    ("algebra", "versor-action"),
    ("algebra", "cayley-oracle"),
    ("metric", "init-symmetric-reproducible"),
    ("metric", "reconstruction"),
    ("metric", "quadratic-transfer"),
    ("metric", "anticommutation-transfer"),
    ("metric", "volume-identity"),
    ("metric", "inner-product-functoriality"),
    ("metric", "backward-finite-differences"),
    ("metric", "round-trip"),
    ("metric", "functorial-composition"),
    ("metric", "equivariance-violation"),
    ("layers", "equivariance"),
    ("layers", "grade-separation"),
    ("layers", "unit-weight-product"),
    ("layers", "gradients"),
    ("model", "equivariance-pre-activation"),
    ("model", "equivariance-post-activation"),
    ("model", "reproducibility"),
    ("model", "loss-decreases"),
    ("model", "metric-symmetry"),
    ("model", "activation-continuity"),
    ("model", "end-to-end-gradients"),
];

pub const PROPERTIES: &[PropertyInfo] = &[
    PropertyInfo { name: "algebra.associativity", module: "algebra", covers: &["associativity"] },
    PropertyInfo { name: "algebra.bilinearity", module: "algebra", covers: &["bilinearity"] },
    PropertyInfo { name: "algebra.vector_product", module: "algebra", covers: &["vector-product-identity"] },
    PropertyInfo { name: "algebra.reversal", module: "algebra", covers: &["reversal-anti-automorphism"] },
    PropertyInfo { name: "algebra.quadratic_form", module: "algebra", covers: &["vector-quadratic-form"] },
    PropertyInfo { name: "algebra.versor_action", module: "algebra", covers: &["versor-action"] },
    PropertyInfo { name: "algebra.cayley_oracle", module: "algebra", covers: &["cayley-oracle"] },
    PropertyInfo { name: "metric.init", module: "metric", covers: &["init-symmetric-reproducible"] },
    PropertyInfo { name: "metric.decomposition", module: "metric", covers: &["reconstruction"] },
    PropertyInfo { name: "metric.bilinear_transfer", module: "metric", covers: &["reconstruction", "quadratic-transfer"] },
    PropertyInfo { name: "metric.quadratic_transfer", module: "metric", covers: &["quadratic-transfer"] },
    PropertyInfo { name: "metric.inner_product", module: "metric", covers: &["inner-product-functoriality"] },
    PropertyInfo { name: "metric.anticommutation", module: "metric", covers: &["anticommutation-transfer"] },
    PropertyInfo { name: "metric.anticommutation_converse", module: "metric", covers: &["anticommutation-transfer"] },
    PropertyInfo { name: "metric.volume_identity", module: "metric", covers: &["volume-identity"] },
    PropertyInfo { name: "metric.round_trip", module: "metric", covers: &["round-trip"] },
    PropertyInfo { name: "metric.composition", module: "metric", covers: &["functorial-composition"] },
    PropertyInfo { name: "metric.backward", module: "metric", covers: &["backward-finite-differences"] },
    PropertyInfo { name: "metric.equivariance_exact_metric", module: "metric", covers: &["equivariance-violation"] },
    PropertyInfo { name: "metric.equivariance_violation", module: "metric", covers: &["equivariance-violation"] },
    PropertyInfo { name: "layers.equivariance", module: "layers", covers: &["equivariance"] },
    PropertyInfo { name: "layers.grade_separation", module: "layers", covers: &["grade-separation"] },
    PropertyInfo { name: "layers.unit_weight_product", module: "layers", covers: &["unit-weight-product"] },
    PropertyInfo { name: "layers.gradient_linear", module: "layers", covers: &["gradients"] },
    PropertyInfo { name: "layers.gradient_geometric_product", module: "layers", covers: &["gradients"] },
    PropertyInfo { name: "layers.gradient_norm", module: "layers", covers: &["gradients"] },
    PropertyInfo { name: "layers.gradient_nonlinear", module: "layers", covers: &["gradients"] },
    PropertyInfo { name: "layers.gradient_embed", module: "layers", covers: &["gradients"] },
    PropertyInfo { name: "layers.gradient_mse", module: "layers", covers: &["gradients"] },
    PropertyInfo { name: "layers.gradient_bce", module: "layers", covers: &["gradients"] },
    PropertyInfo { name: "layers.gradient_eig", module: "layers", covers: &["gradients"] },
    PropertyInfo { name: "model.equivariance", module: "model", covers: &["equivariance-pre-activation"] },
    PropertyInfo { name: "model.equivariance_activated", module: "model", covers: &["equivariance-post-activation"] },
    PropertyInfo { name: "model.activation_continuity", module: "model", covers: &["activation-continuity"] },
    PropertyInfo { name: "model.gradients", module: "model", covers: &["end-to-end-gradients"] },
    PropertyInfo { name: "model.reproducibility", module: "model", covers: &["reproducibility"] },
    PropertyInfo { name: "model.metric_symmetry", module: "model", covers: &["metric-symmetry"] },
    PropertyInfo { name: "model.loss_decreases", module: "model", covers: &["loss-decreases"] },
];

/// Invariants that no registered property exercises.
pub fn registry_gaps() -> Vec<String> {
    INVARIANTS
        .iter()
        .filter(|(module, id)| !PROPERTIES.iter().any(|p| p.module == *module && p.covers.contains(id)))
        .map(|(module, id)| format!("{module}.{id}"))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seed: u64,
    pub trials: usize,
    #[doc(hidden)]
    pub mutation: Option<Mutation>,
}

pub fn run_suite(suite: Suite, seed: u64, trials: usize) -> PropertyReport {
    run_suite_with(suite, SuiteOptions { seed, trials, mutation: None })
}

pub fn run_suite_with(suite: Suite, options: SuiteOptions) -> PropertyReport {
    let trials = options.trials.max(1);
    let mut runner = Runner {
        options: SuiteOptions { trials, ..options },
        report: PropertyReport {
            suite: suite.name().to_string(),
            seed: options.seed,
            trials,
            cases: 0,
            failures: Vec::new(),
            properties: Vec::new(),
        },
    };
    for gap in registry_gaps() {
        runner.report.failures.push(Failure {
            property: "registry".into(),
            case: 0,
            inputs: gap.clone(),
            observed: None,
            expected: 0.0,
            tolerance: 0.0,
            message: Some(format!("invariant {gap} has no property")),
        });
    }
    for module in suite.modules() {
        match *module {
            "algebra" => algebra_suite(&mut runner),
            "metric" => metric_suite(&mut runner),
            "layers" => layers_suite(&mut runner),
            _ => model_suite(&mut runner),
        }
    }
    for info in PROPERTIES.iter().filter(|p| suite.modules().contains(&p.module)) {
        if runner.report.property(info.name).is_none_or(|p| p.cases == 0) {
            runner.report.failures.push(Failure {
                property: info.name.into(),
                case: 0,
                inputs: String::new(),
                observed: None,
                expected: 0.0,
                tolerance: 0.0,
                message: Some("property ran no cases".into()),
            });
        }
    }
    runner.report
}

type CaseResult = Result<(f64, String), String>;

struct Runner {
    options: SuiteOptions,
    report: PropertyReport,
}

impl Runner {
    fn trials(&self) -> usize {
        self.options.trials
    }

    fn expensive(&self) -> usize {
        self.options.trials.min(EXPENSIVE_CASES)
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        let index = PROPERTIES
            .iter()
            .position(|p| p.name == name)
            .expect("property is registered");
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }

    /// Runs `cases` cases of `name`; each returns its error and a
    /// description of its inputs.
    fn property(
        &mut self,
        name: &str,
        tolerance: Option<f64>,
        cases: usize,
        mut case: impl FnMut(usize, &mut ChaCha8Rng) -> CaseResult,
    ) {
        let info = PROPERTIES.iter().find(|p| p.name == name).expect("property is registered");
        let mut rng = self.rng(name);
        let mut max_error: f64 = 0.0;
        for i in 0..cases {
            self.report.cases += 1;
            match case(i, &mut rng) {
                Ok((err, inputs)) => {
                    let bad = !err.is_finite() || tolerance.is_some_and(|t| err > t);
                    if err.is_finite() {
                        max_error = max_error.max(err);
                    } else {
                        max_error = f64::INFINITY;
                    }
                    if bad && tolerance.is_some() {
                        self.report.failures.push(Failure {
                            property: name.into(),
                            case: i,
                            inputs,
                            observed: err.is_finite().then_some(err),
                            expected: 0.0,
                            tolerance: tolerance.unwrap_or(0.0),
                            message: None,
                        });
                    }
                }
                Err(message) => {
                    max_error = f64::INFINITY;
                    self.report.failures.push(Failure {
                        property: name.into(),
                        case: i,
                        inputs: String::new(),
                        observed: None,
                        expected: 0.0,
                        tolerance: tolerance.unwrap_or(0.0),
                        message: Some(message),
                    });
                }
            }
        }
        self.report.properties.push(PropertyResult {
            module: info.module.into(),
            name: name.into(),
            cases,
            max_error,
            tolerance,
        });
    }
}

fn s(e: impl Display) -> String {
    e.to_string()
}

fn signatures() -> Vec<DiagonalMetric> {
    let mut out = Vec::new();
    for n in 2..=4 {
        out.push(DiagonalMetric::euclidean(n).expect("valid dimension"));
        let mut minkowski = vec![-1.0; n];
        minkowski[0] = 1.0;
        out.push(DiagonalMetric::new(minkowski).expect("valid dimension"));
    }
    out
}

fn build_table(metric: &DiagonalMetric, mutation: Option<Mutation>) -> Result<CayleyTable, String> {
    let mut t = CayleyTable::new(metric).map_err(s)?;
    if mutation == Some(Mutation::CayleySign) {
        t.flip_sign(Blade::basis(0), Blade::basis(1));
    }
    Ok(t)
}

fn random_mv(rng: &mut impl Rng, dim: usize) -> Multivector {
    let coeffs = (0..1 << dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Multivector::from_coeffs(dim, coeffs).expect("2^dim coefficients")
}

fn random_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn norm_inf(x: &Multivector) -> f64 {
    x.max_abs()
}

fn dist(a: &Multivector, b: &Multivector) -> f64 {
    (a - b).max_abs()
}

/// A random even versor of two or four unit vectors, avoiding near-null
/// factors.
fn random_rotor(rng: &mut impl Rng, table: &CayleyTable) -> Result<algebra::Versor, String> {
    let count = if rng.random::<bool>() { 2 } else { 4 };
    let mut factors = Vec::with_capacity(count);
    while factors.len() < count {
        let v = random_vec(rng, table.dim());
        if table.metric().inner(&v, &v).abs() > 0.1 {
            factors.push(Multivector::vector(&v));
        }
    }
    make_versor(&factors, table).map_err(s)
}

fn algebra_suite(r: &mut Runner) {
    let sigs = signatures();
    let trials = r.trials();
    let mutation = r.options.mutation;
    let tables: Vec<Result<CayleyTable, String>> = sigs.iter().map(|m| build_table(m, mutation)).collect();
    let pick = |i: usize| (&sigs[i % sigs.len()], &tables[i % sigs.len()]);
    let cases = trials * sigs.len();

    r.property("algebra.associativity", Some(EXACT_TOL), cases, |i, rng| {
        let (m, t) = pick(i);
        let t = t.clone()?;
        let (x, y, z) = (random_mv(rng, m.dim()), random_mv(rng, m.dim()), random_mv(rng, m.dim()));
        let left = geometric_product(&geometric_product(&x, &y, &t).map_err(s)?, &z, &t).map_err(s)?;
        let right = geometric_product(&x, &geometric_product(&y, &z, &t).map_err(s)?, &t).map_err(s)?;
        let scale = 1.0 + norm_inf(&x) * norm_inf(&y) * norm_inf(&z);
        Ok((dist(&left, &right) / scale, format!("Δ = {:?}", m.entries())))
    });

    r.property("algebra.bilinearity", Some(TIGHT_TOL), cases, |i, rng| {
        let (m, t) = pick(i);
        let t = t.clone()?;
        let (x, y, z) = (random_mv(rng, m.dim()), random_mv(rng, m.dim()), random_mv(rng, m.dim()));
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let gp = |u: &Multivector, v: &Multivector| geometric_product(u, v, &t).map_err(s);
        let lhs_right = gp(&x, &(y.scale(a) + z.scale(b)))?;
        let rhs_right = gp(&x, &y)?.scale(a) + gp(&x, &z)?.scale(b);
        let lhs_left = gp(&(x.scale(a) + y.scale(b)), &z)?;
        let rhs_left = gp(&x, &z)?.scale(a) + gp(&y, &z)?.scale(b);
        let scale = 1.0 + (a.abs() + b.abs()) * norm_inf(&x).max(norm_inf(&y)) * norm_inf(&y).max(norm_inf(&z)) * 4.0;
        let err = dist(&lhs_right, &rhs_right).max(dist(&lhs_left, &rhs_left)) / scale;
        Ok((err, format!("Δ = {:?}, a = {a}, b = {b}", m.entries())))
    });

    r.property("algebra.vector_product", Some(TIGHT_TOL), cases, |i, rng| {
        let (m, t) = pick(i);
        let t = t.clone()?;
        let (v, w) = (random_vec(rng, m.dim()), random_vec(rng, m.dim()));
        let (mv, mw) = (Multivector::vector(&v), Multivector::vector(&w));
        let product = geometric_product(&mv, &mw, &t).map_err(s)?;
        let expected = Multivector::scalar(m.dim(), m.inner(&v, &w)) + wedge(&mv, &mw).map_err(s)?;
        Ok((dist(&product, &expected), format!("Δ = {:?}, v = {v:?}, w = {w:?}", m.entries())))
    });

    r.property("algebra.reversal", Some(TIGHT_TOL), cases, |i, rng| {
        let (m, t) = pick(i);
        let t = t.clone()?;
        let (x, y) = (random_mv(rng, m.dim()), random_mv(rng, m.dim()));
        let lhs = reversal(&geometric_product(&x, &y, &t).map_err(s)?);
        let rhs = geometric_product(&reversal(&y), &reversal(&x), &t).map_err(s)?;
        let scale = 1.0 + norm_inf(&x) * norm_inf(&y) * (1 << m.dim()) as f64;
        Ok((dist(&lhs, &rhs) / scale, format!("Δ = {:?}", m.entries())))
    });

    r.property("algebra.quadratic_form", Some(TIGHT_TOL), cases, |i, rng| {
        let (m, t) = pick(i);
        let t = t.clone()?;
        let v = random_vec(rng, m.dim());
        let q = extended_quadratic_form(&Multivector::vector(&v), &t).map_err(s)?;
        Ok(((q - m.inner(&v, &v)).abs(), format!("Δ = {:?}, v = {v:?}", m.entries())))
    });

    r.property("algebra.versor_action", Some(EXACT_TOL), cases, |i, rng| {
        let (m, t) = pick(i);
        let t = t.clone()?;
        let w = random_rotor(rng, &t)?;
        let (x, y) = (random_mv(rng, m.dim()), random_mv(rng, m.dim()));
        let act = |u: &Multivector| versor_action(&w, u, &t).map_err(s);
        let xy = geometric_product(&x, &y, &t).map_err(s)?;
        let lhs = act(&xy)?;
        let (wx, wy) = (act(&x)?, act(&y)?);
        let rhs = geometric_product(&wx, &wy, &t).map_err(s)?;
        let mut err = dist(&lhs, &rhs) / (1.0 + norm_inf(&wx) * norm_inf(&wy));
        // grade preservation on each grade part of x
        let wn = norm_inf(w.value()).powi(2) + 1.0;
        for k in 0..=m.dim() {
            let part = grade_project(&x, k).map_err(s)?;
            let moved = act(&part)?;
            let kept = grade_project(&moved, k).map_err(s)?;
            err = err.max(dist(&moved, &kept) / (wn * (1.0 + norm_inf(&part))));
        }
        Ok((err, format!("Δ = {:?}, w = {}", m.entries(), w.value())))
    });

    // Rows (e_a, e_b) -> scale * blade for 1, e1, e2, e12 under diag(d1, d2).
    let oracle = |d1: f64, d2: f64| -> [[(f64, u32); 4]; 4] {
        [
            [(1.0, 0), (1.0, 1), (1.0, 2), (1.0, 3)],
            [(1.0, 1), (d1, 0), (1.0, 3), (d1, 2)],
            [(1.0, 2), (-1.0, 3), (d2, 0), (-d2, 1)],
            [(1.0, 3), (-d1, 2), (d2, 1), (-d1 * d2, 0)],
        ]
    };
    let oracle_metrics = [(1.0, 1.0), (-1.0, 1.0)];
    r.property("algebra.cayley_oracle", Some(0.0), oracle_metrics.len(), |i, _| {
        let (d1, d2) = oracle_metrics[i];
        let t = build_table(&DiagonalMetric::new(vec![d1, d2]).map_err(s)?, mutation)?;
        let expected = oracle(d1, d2);
        let mut err: f64 = 0.0;
        for a in 0..4u32 {
            for b in 0..4u32 {
                let e = t.entry(Blade::from_mask(a), Blade::from_mask(b));
                let (scale, blade) = expected[a as usize][b as usize];
                if e.blade.mask() != blade {
                    err = err.max(1.0);
                }
                err = err.max((e.scale - scale).abs());
            }
        }
        Ok((err, format!("Δ = diag({d1}, {d2})")))
    });
}

fn random_symmetric(rng: &mut impl Rng, n: usize, shift: f64) -> MetricMatrix {
    let mut m = Matrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let v = rng.random_range(-1.0..1.0) + if i == j { shift } else { 0.0 };
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    MetricMatrix::new(m).expect("symmetric by construction")
}

/// A random symmetric matrix whose eigenvalue gaps exceed 0.1 and whose
/// eigenvectors have an unambiguous sign.
fn well_separated(rng: &mut impl Rng, n: usize, shift: f64) -> Result<MetricMatrix, String> {
    for _ in 0..1000 {
        let m = random_symmetric(rng, n, shift);
        let d = metric::eigendecompose(&m).map_err(s)?;
        let gaps_ok = d.eigenvalues().windows(2).all(|w| w[1] - w[0] > 0.1);
        let signs_ok = (0..n).all(|j| {
            let mut mags: Vec<f64> = d.basis().column(j).iter().map(|x| x.abs()).collect();
            mags.sort_by(|a, b| b.total_cmp(a));
            n == 1 || mags[0] - mags[1] > 1e-2
        });
        if gaps_ok && signs_ok {
            return Ok(m);
        }
    }
    Err("no well-separated matrix found".into())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn diag_inner(lambda: &[f64], a: &[f64], b: &[f64]) -> f64 {
    lambda.iter().zip(a.iter().zip(b)).map(|(l, (x, y))| l * x * y).sum()
}

fn vec_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn metric_suite(r: &mut Runner) {
    let trials = r.trials();
    let mutation = r.options.mutation;

    r.property("metric.init", Some(0.0), trials, |_, rng| {
        let n = rng.random_range(2..=4);
        let q: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let q = DiagonalMetric::new(q).map_err(s)?;
        let eps = rng.random_range(0.0..1e-2);
        let seed: u64 = rng.random();
        let a = metric::init_metric(&q, eps, seed).map_err(s)?;
        let b = metric::init_metric(&q, eps, seed).map_err(s)?;
        let same = a.values().as_slice().iter().zip(b.values().as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
        let qm = Matrix::from_diagonal(q.entries());
        let excess = (a.values().max_abs_diff(&qm) - 2.0 * eps).max(0.0);
        let err = if same { excess } else { 1.0 };
        Ok((err, format!("Q = {:?}, ε = {eps}, seed = {seed}", q.entries())))
    });

    let count = METRIC_MATRICES.max(trials);
    let dims = [2, 3, 4, 8];
    let matrices: Vec<MetricMatrix> = {
        let mut rng = r.rng("metric.decomposition");
        (0..count).map(|i| random_symmetric(&mut rng, dims[i % dims.len()], 0.0)).collect()
    };

    r.property("metric.decomposition", Some(EXACT_TOL), count, |i, _| {
        let m = &matrices[i];
        let d = metric::eigendecompose(m).map_err(s)?;
        let n = m.dim();
        let recon = d.reconstruct().max_abs_diff(m.values());
        let ortho = d.basis().matmul(&d.basis().transpose()).max_abs_diff(&Matrix::identity(n));
        let det = (d.det_c().abs() - 1.0).abs();
        let sorted = d.eigenvalues().windows(2).all(|w| w[0] <= w[1]);
        let err = recon.max(ortho).max(det) + if sorted { 0.0 } else { 1.0 };
        Ok((err, format!("n = {n}, M = {:?}", m.values().rows())))
    });

    r.property("metric.bilinear_transfer", Some(EXACT_TOL), count, |i, rng| {
        let m = &matrices[i];
        let d = metric::eigendecompose(m).map_err(s)?;
        let (x, y) = (random_vec(rng, m.dim()), random_vec(rng, m.dim()));
        let cx = metric::transform_input(&x, &d).map_err(s)?;
        let cy = metric::transform_input(&y, &d).map_err(s)?;
        let err = (m.bilinear(&x, &y) - diag_inner(d.eigenvalues(), &cx, &cy)).abs();
        Ok((err, format!("n = {}, x = {x:?}, y = {y:?}", m.dim())))
    });

    r.property("metric.quadratic_transfer", Some(EXACT_TOL), count, |i, rng| {
        let m = &matrices[i];
        let d = metric::eigendecompose(m).map_err(s)?;
        let z = random_vec(rng, m.dim());
        let cz = metric::transform_input(&z, &d).map_err(s)?;
        let err = (m.bilinear(&z, &z) - diag_inner(d.eigenvalues(), &cz, &cz)).abs();
        Ok((err, format!("n = {}, z = {z:?}", m.dim())))
    });

    // products in Cl(λ) for small dimensions
    let small: Vec<&MetricMatrix> = matrices.iter().filter(|m| m.dim() <= 4).collect();
    r.property("metric.inner_product", Some(EXACT_TOL), small.len(), |i, rng| {
        let m = small[i];
        let d = metric::eigendecompose(m).map_err(s)?;
        let t = build_table(&d.diagonal_metric(), mutation)?;
        let (v, w) = (random_vec(rng, m.dim()), random_vec(rng, m.dim()));
        let cv = Multivector::vector(&metric::transform_input(&v, &d).map_err(s)?);
        let cw = Multivector::vector(&metric::transform_input(&w, &d).map_err(s)?);
        let p = geometric_product(&cv, &cw, &t).map_err(s)?;
        Ok(((p.scalar_part() - m.bilinear(&v, &w)).abs(), format!("n = {}, v = {v:?}, w = {w:?}", m.dim())))
    });

    let proof_metric = |rng: &mut ChaCha8Rng| -> Result<(MetricMatrix, metric::EigenDecomposition, CayleyTable), String> {
        let q = DiagonalMetric::euclidean(3).map_err(s)?;
        let m = metric::init_metric(&q, 1e-3, rng.random()).map_err(s)?;
        let d = metric::eigendecompose(&m).map_err(s)?;
        let t = build_table(&d.diagonal_metric(), mutation)?;
        Ok((m, d, t))
    };

    r.property("metric.anticommutation", Some(PROOF_TOL), trials, |_, rng| {
        let (m, d, t) = proof_metric(rng)?;
        let v = random_vec(rng, 3);
        let mut w = random_vec(rng, 3);
        let k = m.bilinear(&v, &w) / m.bilinear(&v, &v);
        w.iter_mut().zip(&v).for_each(|(wi, vi)| *wi -= k * vi);
        let cv = Multivector::vector(&metric::transform_input(&v, &d).map_err(s)?);
        let cw = Multivector::vector(&metric::transform_input(&w, &d).map_err(s)?);
        let anti = geometric_product(&cv, &cw, &t).map_err(s)? + geometric_product(&cw, &cv, &t).map_err(s)?;
        Ok((anti.max_abs(), format!("v = {v:?}, w = {w:?}, vᵀMw = {:e}", m.bilinear(&v, &w))))
    });

    r.property("metric.anticommutation_converse", Some(PROOF_TOL), trials, |i, rng| {
        let (m, d, t) = proof_metric(rng)?;
        let v = random_vec(rng, 3);
        let mut w = random_vec(rng, 3);
        if i % 2 == 0 {
            let k = m.bilinear(&v, &w) / m.bilinear(&v, &v);
            w.iter_mut().zip(&v).for_each(|(wi, vi)| *wi -= k * vi);
        }
        let cv = Multivector::vector(&metric::transform_input(&v, &d).map_err(s)?);
        let cw = Multivector::vector(&metric::transform_input(&w, &d).map_err(s)?);
        let anti = geometric_product(&cv, &cw, &t).map_err(s)? + geometric_product(&cw, &cv, &t).map_err(s)?;
        let inner = m.bilinear(&v, &w);
        let anti_zero = anti.max_abs() <= PROOF_TOL;
        let inner_zero = inner.abs() <= PROOF_TOL / 2.0;
        let mut err = (anti.scalar_part() / 2.0 - inner).abs();
        let mut rest = anti.clone();
        rest.coeffs_mut()[0] = 0.0;
        err = err.max(rest.max_abs());
        if anti_zero != inner_zero && err > PROOF_TOL / 4.0 {
            err = err.max(1.0);
        }
        Ok((err, format!("v = {v:?}, w = {w:?}, vᵀMw = {inner:e}")))
    });

    r.property("metric.volume_identity", Some(EXACT_TOL), trials, |i, rng| {
        let (d, t) = if i % 2 == 0 {
            let (_, d, t) = proof_metric(rng)?;
            (d, t)
        } else {
            let n = [2, 3, 4][i % 3];
            let d = metric::eigendecompose(&random_symmetric(rng, n, 0.0)).map_err(s)?;
            let t = build_table(&d.diagonal_metric(), mutation)?;
            (d, t)
        };
        let n = d.dim();
        let mut product = Multivector::scalar(n, 1.0);
        for j in 0..n {
            let cej = Multivector::vector(&d.change_of_coords().column(j));
            product = geometric_product(&product, &cej, &t).map_err(s)?;
        }
        let top = product.coeff(Blade::pseudoscalar(n));
        Ok(((top - d.det_c()).abs(), format!("n = {n}, λ = {:?}", d.eigenvalues())))
    });

    r.property("metric.round_trip", Some(EXACT_TOL), count, |i, rng| {
        let m = &matrices[i];
        let d = metric::eigendecompose(m).map_err(s)?;
        let x = random_vec(rng, m.dim());
        let back = metric::transform_output(&metric::transform_input(&x, &d).map_err(s)?, OutputKind::Point, &d)
            .map_err(s)?;
        let v: f64 = rng.random_range(-1.0..1.0);
        let vb = metric::transform_output(&[metric::transform_volume_input(v, &d)], OutputKind::Volume, &d)
            .map_err(s)?;
        let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold((vb[0] - v).abs(), f64::max);
        Ok((err, format!("n = {}, x = {x:?}, v = {v}", m.dim())))
    });

    r.property("metric.composition", Some(EXACT_TOL), count, |i, rng| {
        let m = &matrices[i];
        let d = metric::eigendecompose(m).map_err(s)?;
        let n = m.dim();
        let c = d.change_of_coords();
        let ci = c.transpose();
        let mut err = c.matmul(&ci).max_abs_diff(&Matrix::identity(n));
        err = err.max(ci.matmul(c).max_abs_diff(&Matrix::identity(n)));
        let x = random_vec(rng, n);
        let there = ci.apply(&c.apply(&x));
        let back = c.apply(&ci.apply(&x));
        for k in 0..n {
            err = err.max((there[k] - x[k]).abs()).max((back[k] - x[k]).abs());
        }
        let scalar: f64 = rng.random_range(-1.0..1.0);
        let sc = metric::transform_output(&[scalar], OutputKind::Scalar, &d).map_err(s)?;
        err = err.max((sc[0] - scalar).abs());
        let v: f64 = rng.random_range(-1.0..1.0);
        let vol = metric::transform_volume_input(metric::transform_output(&[v], OutputKind::Volume, &d).map_err(s)?[0], &d);
        err = err.max((vol - v).abs());
        Ok((err, format!("n = {n}")))
    });

    r.property("metric.backward", Some(GRADIENT_TOL), r.expensive(), |i, rng| {
        let n = [2, 3, 4][i % 3];
        let m = well_separated(rng, n, 0.0)?;
        let d = metric::eigendecompose(&m).map_err(s)?;
        let gl = random_vec(rng, n);
        let gu = Matrix::from_row_major(n, random_vec(rng, n * n)).map_err(s)?;
        let g = metric::eigendecompose_backward(&d, &gl, &gu).map_err(s)?;
        let loss = |mm: &MetricMatrix| -> Result<f64, String> {
            let dd = metric::eigendecompose(mm).map_err(s)?;
            Ok(dot(dd.eigenvalues(), &gl) + dot(dd.basis().as_slice(), gu.as_slice()))
        };
        let mut err: f64 = 0.0;
        for a in 0..n {
            for b in a..n {
                let shifted = |h: f64| -> Result<f64, String> {
                    let mut v = m.values().clone();
                    v.set(a, b, v.get(a, b) + h);
                    if a != b {
                        v.set(b, a, v.get(b, a) + h);
                    }
                    loss(&MetricMatrix::new(v).map_err(s)?)
                };
                let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
                let analytic = if a == b { g.get(a, a) } else { g.get(a, b) + g.get(b, a) };
                err = err.max(relative_error(analytic, fd));
            }
        }
        let asym = g.max_abs_diff(&g.transpose());
        Ok((err.max(asym), format!("M = {:?}", m.values().rows())))
    });

    r.property("metric.equivariance_exact_metric", Some(EQUIVARIANCE_TOL), r.expensive(), |_, rng| {
        let mut model = random_model(rng, 0.0)?;
        model.activate_metric(0).map_err(s)?;
        Ok((model_equivariance(&model, rng)?, "ε = 0".into()))
    });

    r.property("metric.equivariance_violation", None, r.expensive(), |_, rng| {
        let mut model = random_model(rng, 1e-3)?;
        model.activate_metric(0).map_err(s)?;
        Ok((model_equivariance(&model, rng)?, "ε = 1e-3".into()))
    });
}

/// `|a - b| / max(|a|, |b|, 1e-3)`: relative above 1e-3, absolute below.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest relative disagreement between the tape gradient of
/// `sum(weights * build(inputs))` and central differences. Inputs flagged
/// symmetric are perturbed in `(i, j)`/`(j, i)` pairs.
pub fn gradient_check(
    rng: &mut impl Rng,
    inputs: &[Tensor],
    symmetric: &[bool],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var, String>,
) -> Result<f64, String> {
    let run = |ins: &[Tensor], weights: Option<&Tensor>| -> Result<(Tape, Vec<Var>, Var), String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = match weights {
            Some(w) => {
                let w = tape.constant(w.clone());
                let p = tape.mul(out, w).map_err(s)?;
                tape.sum(p)
            }
            None => out,
        };
        Ok((tape, vars, loss))
    };
    let (probe, _, out) = run(inputs, None)?;
    let shape = probe.shape(out).to_vec();
    let len: usize = shape.iter().product();
    let weights = Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(s)?;
    let (tape, vars, loss) = run(inputs, Some(&weights))?;
    let grads = tape.backward(loss).map_err(s)?;
    let value = |ins: &[Tensor]| -> Result<f64, String> {
        let (t, _, l) = run(ins, Some(&weights))?;
        Ok(t.value(l).data()[0])
    };

    let mut err: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = if symmetric[k] { input.shape()[0] } else { 0 };
        for idx in 0..input.len() {
            let (row, col) = if n > 0 { (idx / n, idx % n) } else { (0, 0) };
            if n > 0 && col < row {
                continue;
            }
            let shifted = |h: f64| -> Result<f64, String> {
                let mut ins = inputs.to_vec();
                ins[k].data_mut()[idx] += h;
                if n > 0 && row != col {
                    ins[k].data_mut()[col * n + row] += h;
                }
                value(&ins)
            };
            let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
            let analytic = if n > 0 && row != col {
                g.data()[idx] + g.data()[col * n + row]
            } else {
                g.data()[idx]
            };
            err = err.max(relative_error(analytic, fd));
        }
    }
    Ok(err)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("length from shape")
}

fn positive_metric(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
}

fn signed_metric(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum LayerProbe {
    Linear,
    Product,
    Norm,
    Nonlinear,
}

const PROBE_DIM: usize = 3;
const PROBE_BATCH: usize = 2;
const PROBE_CHANNELS: usize = 2;

impl LayerProbe {
    /// Inputs in order: multivector data, parameters, then the metric.
    fn inputs(self, rng: &mut impl Rng, metric: Vec<f64>) -> Vec<Tensor> {
        let (b, c, n) = (PROBE_BATCH, PROBE_CHANNELS, PROBE_DIM);
        let g = n + 1;
        let x = random_tensor(rng, &[b, c, 1 << n], 1.0);
        let mut v = match self {
            LayerProbe::Linear => vec![x, random_tensor(rng, &[3, c, g], 1.0)],
            LayerProbe::Product => vec![
                x,
                random_tensor(rng, &[b, c, 1 << n], 1.0),
                random_tensor(rng, &[c, g, g, g], 1.0),
            ],
            LayerProbe::Norm => vec![x, random_tensor(rng, &[g], 1.0)],
            LayerProbe::Nonlinear => vec![x, random_tensor(rng, &[g], 0.5), random_tensor(rng, &[g], 1.0)],
        };
        v.push(Tensor::vector(metric));
        v
    }

    fn build(self, tape: &mut Tape, v: &[Var], structure: &Arc<ProductStructure>) -> Result<Var, String> {
        let ctx = AlgebraContext::new(tape, structure.clone(), *v.last().expect("metric input")).map_err(s)?;
        match self {
            LayerProbe::Linear => layers::linear_layer(tape, &ctx, v[0], v[1]),
            LayerProbe::Product => layers::geometric_product_layer(tape, &ctx, v[0], v[1], v[2]),
            LayerProbe::Norm => layers::norm_layer(tape, &ctx, v[0], v[1]),
            LayerProbe::Nonlinear => layers::nonlinear_layer(tape, &ctx, v[0], v[1], v[2]),
        }
        .map_err(s)
    }

    fn apply(self, inputs: &[Tensor], structure: &Arc<ProductStructure>) -> Result<Tensor, String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.build(&mut tape, &vars, structure)?;
        Ok(tape.value(out).clone())
    }

    fn multivector_inputs(self) -> usize {
        match self {
            LayerProbe::Product => 2,
            _ => 1,
        }
    }
}

fn layers_suite(r: &mut Runner) {
    let structure = Arc::new(ProductStructure::new(PROBE_DIM).expect("small dimension"));
    let mutation = r.options.mutation;
    let probes = [LayerProbe::Linear, LayerProbe::Product, LayerProbe::Norm, LayerProbe::Nonlinear];

    r.property("layers.equivariance", Some(LAYER_EQUIVARIANCE_TOL), r.expensive(), |_, rng| {
        let lambda = positive_metric(rng, PROBE_DIM);
        let table = build_table(&DiagonalMetric::new(lambda.clone()).map_err(s)?, mutation)?;
        let w = random_rotor(rng, &table)?;
        let act = |t: &Tensor| -> Result<Tensor, String> {
            let mb = MultivectorBatch::new(PROBE_DIM, t.clone()).map_err(s)?;
            Ok(mb.map(|m| versor_action(&w, m, &table)).map_err(s)?.into_coeffs())
        };
        let mut err: f64 = 0.0;
        for probe in probes {
            let inputs = probe.inputs(rng, lambda.clone());
            let out = probe.apply(&inputs, &structure)?;
            let mut moved = inputs.clone();
            for t in moved.iter_mut().take(probe.multivector_inputs()) {
                *t = act(t)?;
            }
            let lhs = probe.apply(&moved, &structure)?;
            let rhs = act(&out)?;
            let scale = 1.0 + vec_inf(out.data());
            let diff = lhs.data().iter().zip(rhs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            err = err.max(diff / scale);
        }
        Ok((err, format!("Δ = {lambda:?}, w = {}", w.value())))
    });

    r.property("layers.grade_separation", Some(0.0), r.trials(), |i, rng| {
        let lambda = signed_metric(rng, PROBE_DIM);
        let k = i % (PROBE_DIM + 1);
        let grades = algebra::blade_grades(PROBE_DIM);
        let mut err: f64 = 0.0;
        for probe in [LayerProbe::Linear, LayerProbe::Norm, LayerProbe::Nonlinear] {
            let mut inputs = probe.inputs(rng, lambda.clone());
            for (j, x) in inputs[0].data_mut().iter_mut().enumerate() {
                if grades[j % (1 << PROBE_DIM)] != k {
                    *x = 0.0;
                }
            }
            let out = probe.apply(&inputs, &structure)?;
            for (j, y) in out.data().iter().enumerate() {
                if grades[j % (1 << PROBE_DIM)] != k {
                    err = err.max(y.abs());
                }
            }
        }
        Ok((err, format!("grade {k}, Δ = {lambda:?}")))
    });

    r.property("layers.unit_weight_product", Some(TIGHT_TOL), r.trials(), |_, rng| {
        let lambda = signed_metric(rng, PROBE_DIM);
        let table = build_table(&DiagonalMetric::new(lambda.clone()).map_err(s)?, mutation)?;
        let mut inputs = LayerProbe::Product.inputs(rng, lambda.clone());
        inputs[2] = Tensor::filled(inputs[2].shape(), 1.0);
        let out = MultivectorBatch::new(PROBE_DIM, LayerProbe::Product.apply(&inputs, &structure)?).map_err(s)?;
        let x1 = MultivectorBatch::new(PROBE_DIM, inputs[0].clone()).map_err(s)?;
        let x2 = MultivectorBatch::new(PROBE_DIM, inputs[1].clone()).map_err(s)?;
        let mut err: f64 = 0.0;
        for b in 0..PROBE_BATCH {
            for c in 0..PROBE_CHANNELS {
                let expected = geometric_product(&x1.get(b, c), &x2.get(b, c), &table).map_err(s)?;
                err = err.max(dist(&out.get(b, c), &expected));
            }
        }
        Ok((err, format!("Δ = {lambda:?}")))
    });

    let cases = r.expensive();
    for (name, probe) in [
        ("layers.gradient_linear", LayerProbe::Linear),
        ("layers.gradient_geometric_product", LayerProbe::Product),
        ("layers.gradient_norm", LayerProbe::Norm),
        ("layers.gradient_nonlinear", LayerProbe::Nonlinear),
    ] {
        let structure = structure.clone();
        r.property(name, Some(GRADIENT_TOL), cases, move |_, rng| {
            // positive metrics keep the norm denominator away from its clamp
            let lambda = match probe {
                LayerProbe::Product | LayerProbe::Linear => signed_metric(rng, PROBE_DIM),
                _ => positive_metric(rng, PROBE_DIM),
            };
            let inputs = probe.inputs(rng, lambda.clone());
            let flags = vec![false; inputs.len()];
            let err = gradient_check(rng, &inputs, &flags, &|t, v| probe.build(t, v, &structure))?;
            Ok((err, format!("Δ = {lambda:?}")))
        });
    }

    r.property("layers.gradient_embed", Some(GRADIENT_TOL), cases, |_, rng| {
        let inputs = vec![
            random_tensor(rng, &[2, 2, PROBE_DIM], 1.0),
            random_tensor(rng, &[2, 1], 1.0),
            random_tensor(rng, &[2, 2], 1.0),
        ];
        let err = gradient_check(rng, &inputs, &[false; 3], &|t, v| {
            layers::embed(t, PROBE_DIM, Some(v[0]), Some(v[1]), Some(v[2])).map_err(s)
        })?;
        Ok((err, String::new()))
    });

    r.property("layers.gradient_mse", Some(GRADIENT_TOL), cases, |_, rng| {
        let inputs = vec![random_tensor(rng, &[4, 3], 2.0), random_tensor(rng, &[4, 3], 2.0)];
        let err = gradient_check(rng, &inputs, &[false; 2], &|t, v| {
            let d = t.sub(v[0], v[1]).map_err(s)?;
            let sq = t.mul(d, d).map_err(s)?;
            Ok(t.mean(sq))
        })?;
        Ok((err, String::new()))
    });

    r.property("layers.gradient_bce", Some(GRADIENT_TOL), cases, |_, rng| {
        let targets: Vec<f64> = (0..6).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let inputs = vec![random_tensor(rng, &[6, 1], 3.0), Tensor::new(vec![6, 1], targets).map_err(s)?];
        let err = gradient_check(rng, &inputs, &[false; 2], &|t, v| {
            let sp = t.softplus(v[0]);
            let tz = t.mul(v[0], v[1]).map_err(s)?;
            let l = t.sub(sp, tz).map_err(s)?;
            Ok(t.mean(l))
        })?;
        Ok((err, String::new()))
    });

    r.property("layers.gradient_eig", Some(GRADIENT_TOL), cases, |i, rng| {
        let n = [2, 3, 4][i % 3];
        let m = well_separated(rng, n, 0.0)?;
        let inputs = vec![Tensor::new(vec![n, n], m.values().as_slice().to_vec()).map_err(s)?];
        let err = gradient_check(rng, &inputs, &[true], &|t, v| {
            let (lambda, u, _) = t.eig(v[0]).map_err(s)?;
            let flat = t.reshape(u, &[n * n]).map_err(s)?;
            t.concat(&[lambda, flat], 0).map_err(s)
        })?;
        Ok((err, format!("M = {:?}", m.values().rows())))
    });
}

const MODEL_LAYOUT: InputLayout = InputLayout { points: 2, scalars: 1, volumes: 1 };

fn model_config(rng: &mut impl Rng, epsilon: f64, q: Vec<f64>) -> ModelConfig {
    ModelConfig {
        dim: q.len(),
        q_signature: q,
        epsilon,
        num_blocks: 2,
        hidden_channels: 4,
        output_kind: OutputKind::Point,
        output_channels: 2,
        inputs: MODEL_LAYOUT,
        seed: rng.random(),
    }
}

/// A Euclidean 3D model with every non-metric parameter perturbed, so
/// that norms and gates are exercised.
fn random_model(rng: &mut impl Rng, epsilon: f64) -> Result<Model, String> {
    let mut model = Model::new(model_config(rng, epsilon, vec![1.0; 3])).map_err(s)?;
    randomize(&mut model, rng);
    Ok(model)
}

fn randomize(model: &mut Model, rng: &mut impl Rng) {
    let metric = model.metric_param();
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).filter(|id| *id != metric).collect();
    for id in ids {
        for x in model.params_mut().get_mut(id).value.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

fn random_batch(rng: &mut impl Rng, config: &ModelConfig, size: usize) -> Result<Batch, String> {
    let n = config.dim;
    let l = config.inputs;
    Ok(Batch {
        points: Some(random_tensor(rng, &[size, l.points, n], 1.0)),
        scalars: Some(random_tensor(rng, &[size, l.scalars], 1.0)),
        volumes: Some(random_tensor(rng, &[size, l.volumes], 1.0)),
        offsets: None,
        targets: random_tensor(rng, &[size, config.target_width()], 1.0),
    })
}

/// Max relative deviation from equivariance under a random rotor: point
/// predictions must rotate, scalar and pseudoscalar readouts must not move.
fn model_equivariance(model: &Model, rng: &mut impl Rng) -> Result<f64, String> {
    let config = model.config();
    let n = config.dim;
    let table = CayleyTable::new(&config.q().map_err(s)?).map_err(s)?;
    let w = random_rotor(rng, &table)?;
    let rotate = |p: &[f64]| -> Result<Vec<f64>, String> {
        Ok(versor_action(&w, &Multivector::vector(p), &table).map_err(s)?.vector_part())
    };
    let rotate_rows = |t: &Tensor| -> Result<Tensor, String> {
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            data.extend(rotate(row)?);
        }
        Tensor::new(t.shape().to_vec(), data).map_err(s)
    };
    let batch = random_batch(rng, config, 3)?;
    let mut moved = batch.clone();
    moved.points = Some(rotate_rows(batch.points.as_ref().expect("points present"))?);

    let run = |b: &Batch| -> Result<(Tensor, Tensor), String> {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, b).map_err(s)?;
        Ok((tape.value(out.prediction).clone(), tape.value(out.readout).clone()))
    };
    let (pred, readout) = run(&batch)?;
    let (pred_moved, readout_moved) = run(&moved)?;
    let expected = rotate_rows(&pred)?;
    let scale = 1.0 + vec_inf(pred.data()).max(vec_inf(readout.data()));
    let mut err = pred_moved
        .data()
        .iter()
        .zip(expected.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let size = 1 << n;
    for (j, (a, b)) in readout.data().iter().zip(readout_moved.data()).enumerate() {
        if j % size == 0 || j % size == size - 1 {
            err = err.max((a - b).abs());
        }
    }
    Ok(err / scale)
}

fn model_suite(r: &mut Runner) {
    let cases = r.expensive();
    let mutation = r.options.mutation;

    r.property("model.equivariance", Some(EQUIVARIANCE_TOL), cases, |_, rng| {
        let model = random_model(rng, 1e-3)?;
        Ok((model_equivariance(&model, rng)?, "not activated".into()))
    });

    r.property("model.equivariance_activated", Some(EQUIVARIANCE_TOL), cases, |_, rng| {
        let mut model = random_model(rng, 0.0)?;
        model.activate_metric(0).map_err(s)?;
        Ok((model_equivariance(&model, rng)?, "activated, ε = 0".into()))
    });

    r.property("model.activation_continuity", Some(1e-9), cases, |i, rng| {
        let q = if i % 2 == 0 { vec![1.0; 3] } else { vec![1.0, -1.0, -1.0] };
        let mut model = Model::new(model_config(rng, 0.0, q.clone())).map_err(s)?;
        randomize(&mut model, rng);
        let batch = random_batch(rng, model.config(), 3)?;
        let before = model.predict(&batch).map_err(s)?;
        model.activate_metric(0).map_err(s)?;
        let after = model.predict(&batch).map_err(s)?;
        let mut err = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if model.activate_metric(1).is_ok() {
            err = err.max(1.0);
        }
        Ok((err, format!("Q = {q:?}")))
    });

    r.property("model.gradients", Some(GRADIENT_TOL), cases, |_, rng| {
        let mut config = model_config(rng, 1e-3, vec![1.0; 3]);
        config.num_blocks = 1;
        config.hidden_channels = 2;
        let train = TrainConfig { steps: 1, batch_size: 2, ..TrainConfig::default() };
        let mut state = TrainState::new(config.clone(), train).map_err(s)?;
        randomize(state.model_mut(), rng);
        let m = well_separated(rng, 3, 3.0)?;
        state.model_mut().set_metric(&m, 0).map_err(s)?;
        let batch = random_batch(rng, &config, 2)?;
        state.compute_gradients(&batch).map_err(s)?;
        let loss_of = |model: &Model| -> Result<f64, String> {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch).map_err(s)?;
            let l = model.loss(&mut tape, out.prediction, &batch.targets).map_err(s)?;
            Ok(tape.value(l).data()[0])
        };
        let metric_id = state.model().metric_param();
        let ids: Vec<_> = state.model().params().iter().map(|(id, _)| id).collect();
        let mut err: f64 = 0.0;
        for id in ids {
            let p = state.model().params().get(id).clone();
            let sym = id == metric_id;
            let n = config.dim;
            for idx in 0..p.value.len() {
                let (row, col) = (idx / n, idx % n);
                if sym && col < row {
                    continue;
                }
                let shifted = |h: f64| -> Result<f64, String> {
                    let mut model = state.model().clone();
                    let v = &mut model.params_mut().get_mut(id).value;
                    v.data_mut()[idx] += h;
                    if sym && row != col {
                        v.data_mut()[col * n + row] += h;
                    }
                    loss_of(&model)
                };
                let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
                let analytic = if sym && row != col {
                    p.grad.data()[idx] + p.grad.data()[col * n + row]
                } else {
                    p.grad.data()[idx]
                };
                err = err.max(relative_error(analytic, fd));
            }
        }
        Ok((err, format!("M = {:?}", m.values().rows())))
    });

    let tiny_data = |rng: &mut ChaCha8Rng| -> Result<crate::model::Dataset, String> {
        let samples = tasks::gen_signed_volume(16, rng.random()).map_err(s)?;
        tasks::signed_volume_dataset(&samples).map_err(s)
    };
    let tiny_state = |seed: u64, lr: f64| -> Result<TrainState, String> {
        let mut config = tasks::Task::SignedVolume.model_config(seed);
        config.hidden_channels = 4;
        let train = TrainConfig {
            steps: 8,
            batch_size: 4,
            learning_rate: lr,
            metric_activation_fraction: 0.5,
            seed,
            ..TrainConfig::default()
        };
        TrainState::new(config, train).map_err(s)
    };

    r.property("model.reproducibility", Some(0.0), cases.min(10), |_, rng| {
        let data = tiny_data(rng)?;
        let seed: u64 = rng.random();
        let mut curves = Vec::new();
        let mut checkpoints = Vec::new();
        for _ in 0..2 {
            let mut state = tiny_state(seed, 1e-2)?;
            let mut curve = Vec::new();
            state
                .run(&data, Some(&data), |rec, _| curve.push(rec.train_loss.to_bits()))
                .map_err(s)?;
            curves.push(curve);
            checkpoints.push(state.checkpoint());
        }
        let same = curves[0] == curves[1] && checkpoints[0] == checkpoints[1];
        Ok((if same { 0.0 } else { 1.0 }, format!("seed = {seed}")))
    });

    r.property("model.metric_symmetry", Some(0.0), cases.min(10), |_, rng| {
        let data = tiny_data(rng)?;
        let seed: u64 = rng.random();
        let mut state = tiny_state(seed, 1e-2)?;
        if mutation == Some(Mutation::NoMetricSymmetrization) {
            state.set_symmetrize_metric_grad(false);
        }
        let mut asymmetric = 0usize;
        state
            .run(&data, None, |_, st| {
                let m = st.model().params().value(st.model().metric_param());
                let n = st.model().config().dim;
                for i in 0..n {
                    for j in 0..n {
                        if m.data()[i * n + j].to_bits() != m.data()[j * n + i].to_bits() {
                            asymmetric += 1;
                        }
                    }
                }
            })
            .map_err(s)?;
        Ok((asymmetric as f64, format!("seed = {seed}")))
    });

    r.property("model.loss_decreases", Some(0.01), 1, |_, rng| {
        let samples = tasks::gen_signed_volume(256, rng.random()).map_err(s)?;
        let data = tasks::signed_volume_dataset(&samples).map_err(s)?;
        let config = tasks::Task::SignedVolume.model_config(rng.random());
        let train = TrainConfig { steps: 1000, seed: rng.random(), ..TrainConfig::default() };
        let mut state = TrainState::new(config, train).map_err(s)?;
        let summary = state.run(&data, None, |_, _| {}).map_err(s)?;
        Ok((
            summary.final_train_loss / summary.initial_train_loss,
            format!("initial {:e}, final {:e}", summary.initial_train_loss, summary.final_train_loss),
        ))
    });
}

//! Synthetic datasets: signed tetrahedron volumes and charged-particle
//! trajectories, plus their JSON Lines formats and model layouts.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metric::OutputKind;
use crate::model::{Dataset, Example, InputLayout, ModelConfig, ModelError};

pub const PARTICLES: usize = 5;
pub const SOFTENING: f64 = 0.1;
pub const VELOCITY_STD: f64 = 0.5;
pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_SIM_STEPS: usize = 1000;
/// Samples with any coordinate beyond this are regenerated.
pub const BLOWUP_LIMIT: f64 = 50.0;
pub const MAX_REGENERATIONS: usize = 1000;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("count must be at least 1")]
    EmptyCount,
    #[error("invalid simulation settings: {0}")]
    Settings(String),
    #[error("sample {index} still unstable after {attempts} regenerations")]
    Stalled { index: usize, attempts: usize },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SignedVolume,
    Nbody,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "signed-volume" => Ok(Task::SignedVolume),
            "nbody" => Ok(Task::Nbody),
            other => Err(format!("unknown task `{other}` (expected signed-volume or nbody)")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::SignedVolume => "signed-volume",
            Task::Nbody => "nbody",
        })
    }
}

impl Task {
    /// Default network for the task: `Q = I`, `ε = 1e-3`, two blocks of 16
    /// channels.
    pub fn model_config(self, seed: u64) -> ModelConfig {
        let (inputs, kind, outputs) = match self {
            Task::SignedVolume => (InputLayout { points: 4, scalars: 0, volumes: 0 }, OutputKind::Volume, 1),
            Task::Nbody => (
                InputLayout { points: 2 * PARTICLES, scalars: PARTICLES, volumes: 0 },
                OutputKind::Point,
                PARTICLES,
            ),
        };
        ModelConfig {
            dim: 3,
            q_signature: vec![1.0; 3],
            epsilon: 1e-3,
            num_blocks: 2,
            hidden_channels: 16,
            output_kind: kind,
            output_channels: outputs,
            inputs,
            seed,
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            Task::SignedVolume => 5000,
            Task::Nbody => 10_000,
        }
    }
}

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedVolumeSample {
    pub points: [Point; 4],
    pub target: f64,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// `det[p1 - p0, p2 - p0, p3 - p0] / 6`.
pub fn signed_volume(points: &[Point; 4]) -> f64 {
    let a = sub(points[1], points[0]);
    let b = sub(points[2], points[0]);
    let c = sub(points[3], points[0]);
    let det = a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
        + a[2] * (b[0] * c[1] - b[1] * c[0]);
    det / 6.0
}

pub fn gen_signed_volume(count: usize, seed: u64) -> Result<Vec<SignedVolumeSample>> {
    if count == 0 {
        return Err(TaskError::EmptyCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let mut points = [[0.0; 3]; 4];
            for p in &mut points {
                for x in p.iter_mut() {
                    *x = StandardNormal.sample(&mut rng);
                }
            }
            SignedVolumeSample { target: signed_volume(&points), points }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBodySample {
    pub pos: Vec<Point>,
    pub vel: Vec<Point>,
    pub charge: Vec<f64>,
    pub target_pos: Vec<Point>,
}

/// Integration settings for [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Simulation {
    pub dt: f64,
    pub steps: usize,
    pub softening: f64,
}

impl Default for Simulation {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            steps: DEFAULT_SIM_STEPS,
            softening: SOFTENING,
        }
    }
}

/// Pairwise forces `q_i q_j (x_i - x_j) / (r^2 + s^2)^{3/2}` on unit masses.
pub fn forces(pos: &[Point], charge: &[f64], softening: f64) -> Vec<Point> {
    let mut f = vec![[0.0; 3]; pos.len()];
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let d = sub(pos[i], pos[j]);
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + softening * softening;
            let s = charge[i] * charge[j] / (r2 * r2.sqrt());
            for k in 0..3 {
                f[i][k] += s * d[k];
                f[j][k] -= s * d[k];
            }
        }
    }
    f
}

/// Kinetic plus pairwise potential `q_i q_j / sqrt(r^2 + s^2)`.
pub fn energy(pos: &[Point], vel: &[Point], charge: &[f64], softening: f64) -> f64 {
    let kinetic: f64 = vel.iter().map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).sum();
    let mut potential = 0.0;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let d = sub(pos[i], pos[j]);
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + softening * softening;
            potential += charge[i] * charge[j] / r2.sqrt();
        }
    }
    kinetic + potential
}

/// Kick-drift-kick leapfrog. Returns final positions and velocities.
pub fn simulate(pos: &[Point], vel: &[Point], charge: &[f64], sim: Simulation) -> (Vec<Point>, Vec<Point>) {
    let mut x = pos.to_vec();
    let mut v = vel.to_vec();
    let half = 0.5 * sim.dt;
    let mut f = forces(&x, charge, sim.softening);
    for _ in 0..sim.steps {
        for (vi, fi) in v.iter_mut().zip(&f) {
            for k in 0..3 {
                vi[k] += half * fi[k];
            }
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            for k in 0..3 {
                xi[k] += sim.dt * vi[k];
            }
        }
        f = forces(&x, charge, sim.softening);
        for (vi, fi) in v.iter_mut().zip(&f) {
            for k in 0..3 {
                vi[k] += half * fi[k];
            }
        }
    }
    (x, v)
}

fn draw_nbody(rng: &mut ChaCha8Rng, sim: Simulation) -> NBodySample {
    let vel_dist = Normal::new(0.0, VELOCITY_STD).expect("positive std");
    let pos: Vec<Point> = (0..PARTICLES)
        .map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut *rng)))
        .collect();
    let vel: Vec<Point> = (0..PARTICLES)
        .map(|_| std::array::from_fn(|_| vel_dist.sample(&mut *rng)))
        .collect();
    let charge: Vec<f64> = (0..PARTICLES)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let (target_pos, _) = simulate(&pos, &vel, &charge, sim);
    NBodySample { pos, vel, charge, target_pos }
}

fn stable(s: &NBodySample) -> bool {
    s.target_pos
        .iter()
        .flatten()
        .all(|x| x.is_finite() && x.abs() <= BLOWUP_LIMIT)
}

/// Sample `index` is drawn from stream `(index << 16) | attempt` of the
/// seeded generator, so samples are independent of each other and of
/// `count`.
pub fn gen_nbody(count: usize, seed: u64, dt: f64, steps_sim: usize) -> Result<Vec<NBodySample>> {
    if count == 0 {
        return Err(TaskError::EmptyCount);
    }
    if !(dt > 0.0 && dt.is_finite()) || steps_sim == 0 {
        return Err(TaskError::Settings(format!("dt = {dt}, steps = {steps_sim}")));
    }
    let sim = Simulation { dt, steps: steps_sim, softening: SOFTENING };
    (0..count)
        .map(|index| {
            for attempt in 0..=MAX_REGENERATIONS {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((index as u64) << 16) | attempt as u64);
                let s = draw_nbody(&mut rng, sim);
                if stable(&s) {
                    return Ok(s);
                }
            }
            Err(TaskError::Stalled { index, attempts: MAX_REGENERATIONS })
        })
        .collect()
}

pub fn signed_volume_example(s: &SignedVolumeSample) -> Example {
    Example {
        points: s.points.iter().flatten().copied().collect(),
        scalars: Vec::new(),
        volumes: Vec::new(),
        offsets: Vec::new(),
        target: vec![s.target],
    }
}

/// Centered positions and velocities as points, charges as scalars; the
/// model predicts displacements that are added to the raw positions.
pub fn nbody_features(s: &NBodySample) -> Example {
    let n = s.pos.len() as f64;
    let mut mean = [0.0; 3];
    for p in &s.pos {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let centered = s.pos.iter().flat_map(|p| (0..3).map(move |k| p[k] - mean[k]));
    Example {
        points: centered.chain(s.vel.iter().flatten().copied()).collect(),
        scalars: s.charge.clone(),
        volumes: Vec::new(),
        offsets: s.pos.iter().flatten().copied().collect(),
        target: s.target_pos.iter().flatten().copied().collect(),
    }
}

pub fn signed_volume_dataset(samples: &[SignedVolumeSample]) -> Result<Dataset> {
    let cfg = Task::SignedVolume.model_config(0);
    let examples: Vec<Example> = samples.iter().map(signed_volume_example).collect();
    Ok(Dataset::new(cfg.dim, cfg.inputs, cfg.target_width(), &examples)?)
}

pub fn nbody_dataset(samples: &[NBodySample]) -> Result<Dataset> {
    let cfg = Task::Nbody.model_config(0);
    let examples: Vec<Example> = samples.iter().map(nbody_features).collect();
    Ok(Dataset::new(cfg.dim, cfg.inputs, cfg.target_width(), &examples)?)
}

/// Either task's samples, as read from or written to JSON Lines.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    SignedVolume(Vec<SignedVolumeSample>),
    Nbody(Vec<NBodySample>),
}

impl Samples {
    pub fn generate(task: Task, count: usize, seed: u64) -> Result<Self> {
        Ok(match task {
            Task::SignedVolume => Samples::SignedVolume(gen_signed_volume(count, seed)?),
            Task::Nbody => Samples::Nbody(gen_nbody(count, seed, DEFAULT_DT, DEFAULT_SIM_STEPS)?),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Samples::SignedVolume(_) => Task::SignedVolume,
            Samples::Nbody(_) => Task::Nbody,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Samples::SignedVolume(s) => s.len(),
            Samples::Nbody(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match self {
            Samples::SignedVolume(s) => signed_volume_dataset(s),
            Samples::Nbody(s) => nbody_dataset(s),
        }
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        match self {
            Samples::SignedVolume(s) => write_lines(&mut out, s)?,
            Samples::Nbody(s) => write_lines(&mut out, s)?,
        }
        Ok(())
    }

    pub fn read_jsonl(task: Task, input: impl BufRead) -> Result<Self> {
        Ok(match task {
            Task::SignedVolume => Samples::SignedVolume(read_lines(input, check_signed_volume)?),
            Task::Nbody => Samples::Nbody(read_lines(input, check_nbody)?),
        })
    }
}

fn write_lines<T: Serialize>(out: &mut impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn read_lines<T: for<'de> Deserialize<'de>>(
    input: impl BufRead,
    check: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| TaskError::Record { line: i + 1, message };
        let item: T = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        check(&item).map_err(record)?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(TaskError::EmptyCount);
    }
    Ok(items)
}

fn finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> std::result::Result<(), String> {
    if values.into_iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(format!("non-finite value in `{what}`"))
    }
}

fn check_signed_volume(s: &SignedVolumeSample) -> std::result::Result<(), String> {
    finite(s.points.iter().flatten(), "points")?;
    finite([&s.target], "target")
}

fn check_nbody(s: &NBodySample) -> std::result::Result<(), String> {
    for (len, what) in [
        (s.pos.len(), "pos"),
        (s.vel.len(), "vel"),
        (s.charge.len(), "charge"),
        (s.target_pos.len(), "target_pos"),
    ] {
        if len != PARTICLES {
            return Err(format!("`{what}` has {len} entries, expected {PARTICLES}"));
        }
    }
    finite(s.pos.iter().flatten(), "pos")?;
    finite(s.vel.iter().flatten(), "vel")?;
    finite(&s.charge, "charge")?;
    finite(s.target_pos.iter().flatten(), "target_pos")
}

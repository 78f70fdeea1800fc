//! Synthetic tasks and the three training regimes: fine-tuning from a source
//! teacher, compression into a narrower student, and transfer with
//! compression.
//!
//! Everything is seeded. Within one seed, every arm of an experiment sees the
//! same teacher, the same student initialization and the same batch order, so
//! arms differ only by their regularization term.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::TEMPERATURE_GRID;
use crate::nn::{self, mlp_specs, LayerSpec, ModelError, ModelState, RegTerm};
use crate::ot::{plan_trace_ratio, OtError, SolverSettings};
use crate::representation::{ActivationMatrix, RegularizerKind, RepresentationError};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const BATCH_SIZE_SWEEP: [usize; 5] = [16, 32, 64, 96, 128];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid task: {0}")]
    Task(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl HarnessError {
    /// True when the failure came from a solver rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HarnessError::Model(ModelError::Representation(RepresentationError::Solver(
                OtError::Numerical(_)
            )))
        )
    }
}

/// Mixes a tag into a base seed so derived streams do not overlap.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `k` values evenly spaced in log10 between `lo` and `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    match k {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..k)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (k - 1) as f64))
                .collect()
        }
    }
}

// ---------------------------------------------------------------- tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    GaussianBlobs,
    TwoMoonsVariant,
    RotatedMixture,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    #[default]
    None,
    /// Each class splits into `magnitude` finer classes along its
    /// sub-clusters.
    LabelRefinement,
    /// Inputs rotate by `magnitude` radians in every consecutive coordinate
    /// pair.
    RotationAngle,
    /// Only the first `magnitude` classes are kept.
    ClassSubset,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    #[serde(default)]
    pub kind: ShiftKind,
    #[serde(default)]
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub generator: Generator,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Sub-clusters per class; label refinement splits along them.
    #[serde(default = "default_subclusters")]
    pub subclusters: usize,
    /// Training pool; the validation split is carved out of it.
    pub samples_train: usize,
    pub samples_test: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub shift: Shift,
    /// Seeds the class geometry.
    pub seed: u64,
    /// Seeds the drawn samples; defaults to `seed`.
    #[serde(default)]
    pub sample_seed: Option<u64>,
}

fn default_subclusters() -> usize {
    2
}

fn default_validation_fraction() -> f64 {
    0.2
}

impl TaskSpec {
    pub fn new(generator: Generator, num_classes: usize, seed: u64) -> Self {
        Self {
            generator,
            num_classes,
            input_dim: 20,
            subclusters: default_subclusters(),
            samples_train: 2000,
            samples_test: 1000,
            validation_fraction: default_validation_fraction(),
            shift: Shift::default(),
            seed,
            sample_seed: None,
        }
    }

    pub fn with_shift(mut self, kind: ShiftKind, magnitude: f64) -> Self {
        self.shift = Shift { kind, magnitude };
        self
    }

    /// Classes after the shift is applied.
    pub fn output_classes(&self) -> usize {
        match self.shift.kind {
            ShiftKind::LabelRefinement => self.num_classes * self.shift.magnitude as usize,
            ShiftKind::ClassSubset => self.shift.magnitude as usize,
            _ => self.num_classes,
        }
    }

    fn validation_count(&self) -> usize {
        (self.samples_train as f64 * self.validation_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Task(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_dim == 0 || self.subclusters == 0 {
            return bad("input_dim and subclusters must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            ));
        }
        let val = self.validation_count();
        if self.samples_train <= val || self.samples_test == 0 {
            return bad("every split needs at least one sample".into());
        }
        if self.validation_fraction > 0.0 && val == 0 {
            return bad("validation split is empty".into());
        }
        let m = self.shift.magnitude;
        let integral = m.fract() == 0.0 && m >= 1.0;
        match self.shift.kind {
            ShiftKind::None => {}
            ShiftKind::LabelRefinement => {
                if !integral || self.subclusters % (m as usize) != 0 {
                    return bad(format!(
                        "label_refinement magnitude must be a positive divisor of subclusters ({}), got {m}",
                        self.subclusters
                    ));
                }
            }
            ShiftKind::RotationAngle => {
                if !m.is_finite() {
                    return bad(format!("rotation angle must be finite, got {m}"));
                }
            }
            ShiftKind::ClassSubset => {
                if !integral || (m as usize) < 2 || (m as usize) > self.num_classes {
                    return bad(format!(
                        "class_subset magnitude must be an integer in [2, {}], got {m}",
                        self.num_classes
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Inputs are `input_dim x n`, one example per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (
            self.inputs.select(Axis(1), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `k` examples.
    pub fn prefix(&self, k: usize) -> Dataset {
        let k = k.min(self.len());
        Dataset {
            inputs: self.inputs.slice(ndarray::s![.., ..k]).to_owned(),
            labels: self.labels[..k].to_vec(),
            classes: self.classes,
        }
    }

    fn split_off(&mut self, at: usize) -> Dataset {
        let tail = Dataset {
            inputs: self.inputs.slice(ndarray::s![.., at..]).to_owned(),
            labels: self.labels[at..].to_vec(),
            classes: self.classes,
        };
        *self = self.prefix(at);
        tail
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

struct Component {
    mean: Array1<f64>,
    /// Columns are an orthonormal frame; scaled by `scales` when sampling.
    frame: Array2<f64>,
    scales: Array1<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal))
}

/// `k` orthonormal columns in `R^d` by Gram-Schmidt on Gaussian draws.
fn orthonormal_frame(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Array2<f64> {
    let mut q = Array2::zeros((d, k));
    let mut j = 0;
    while j < k {
        let mut v = normal_vec(rng, d);
        for p in 0..j {
            let c = q.column(p).dot(&v);
            v.scaled_add(-c, &q.column(p));
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            q.column_mut(j).assign(&(v / norm));
            j += 1;
        }
    }
    q
}

const CLASS_SPREAD: f64 = 0.45;
const SUBCLUSTER_SPREAD: f64 = 0.35;
const ARC_RADIUS: f64 = 1.6;
const MOON_NOISE: f64 = 0.45;

struct World {
    generator: Generator,
    subclusters: usize,
    /// Indexed by `class * subclusters + sub`.
    components: Vec<Component>,
}

impl World {
    fn new(spec: &TaskSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "world"));
        let d = spec.input_dim;
        let s = spec.subclusters;
        let mut components = Vec::with_capacity(spec.num_classes * s);
        for _ in 0..spec.num_classes {
            let class_mean = normal_vec(&mut rng, d) * CLASS_SPREAD;
            let class_frame = orthonormal_frame(&mut rng, d, d.min(2));
            for _ in 0..s {
                let c = match spec.generator {
                    Generator::GaussianBlobs => Component {
                        mean: &class_mean + &(normal_vec(&mut rng, d) * SUBCLUSTER_SPREAD),
                        frame: Array2::eye(d),
                        scales: Array1::ones(d),
                    },
                    Generator::TwoMoonsVariant => Component {
                        mean: class_mean.clone(),
                        frame: class_frame.clone(),
                        scales: Array1::from_elem(d.min(2), ARC_RADIUS),
                    },
                    Generator::RotatedMixture => Component {
                        mean: &class_mean + &(normal_vec(&mut rng, d) * SUBCLUSTER_SPREAD),
                        frame: orthonormal_frame(&mut rng, d, d),
                        scales: Array1::from_shape_simple_fn(d, || rng.random_range(0.5..1.5)),
                    },
                };
                components.push(c);
            }
        }
        Self {
            generator: spec.generator,
            subclusters: s,
            components,
        }
    }

    fn sample(&self, class: usize, sub: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let c = &self.components[class * self.subclusters + sub];
        let d = c.mean.len();
        match self.generator {
            Generator::TwoMoonsVariant => {
                // Half circle split into arcs, one per sub-cluster; odd
                // classes open the other way.
                let width = std::f64::consts::PI / self.subclusters as f64;
                let theta = width * (sub as f64 + rng.random::<f64>());
                let flip = if class % 2 == 0 { 1.0 } else { -1.0 };
                let mut x = c.mean.clone();
                x.scaled_add(c.scales[0] * theta.cos(), &c.frame.column(0));
                if c.frame.ncols() > 1 {
                    x.scaled_add(flip * c.scales[1] * theta.sin(), &c.frame.column(1));
                }
                x + normal_vec(rng, d) * MOON_NOISE
            }
            _ => {
                let z = normal_vec(rng, d) * &c.scales;
                &c.mean + &c.frame.dot(&z)
            }
        }
    }
}

fn rotate_pairs(x: &mut Array2<f64>, theta: f64) {
    if theta == 0.0 {
        return;
    }
    let (s, c) = theta.sin_cos();
    let d = x.nrows();
    for mut col in x.columns_mut() {
        for p in (0..d.saturating_sub(1)).step_by(2) {
            let (a, b) = (col[p], col[p + 1]);
            col[p] = c * a - s * b;
            col[p + 1] = s * a + c * b;
        }
    }
}

fn draw(spec: &TaskSpec, world: &World, n: usize, tag: &str) -> Dataset {
    let base = spec.sample_seed.unwrap_or(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, tag));
    let allowed = match spec.shift.kind {
        ShiftKind::ClassSubset => spec.shift.magnitude as usize,
        _ => spec.num_classes,
    };
    let refine = match spec.shift.kind {
        ShiftKind::LabelRefinement => spec.shift.magnitude as usize,
        _ => 1,
    };
    let per_fine = spec.subclusters / refine;
    let mut inputs = Array2::zeros((spec.input_dim, n));
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let class = rng.random_range(0..allowed);
        let sub = rng.random_range(0..spec.subclusters);
        inputs.column_mut(j).assign(&world.sample(class, sub, &mut rng));
        labels.push(class * refine + sub / per_fine);
    }
    if spec.shift.kind == ShiftKind::RotationAngle {
        rotate_pairs(&mut inputs, spec.shift.magnitude);
    }
    Dataset {
        inputs,
        labels,
        classes: spec.output_classes(),
    }
}

/// Train/validation/test splits for `spec`. Deterministic in the seeds.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskData, HarnessError> {
    spec.validate()?;
    let world = World::new(spec);
    let mut train = draw(spec, &world, spec.samples_train, "train");
    let val = train.split_off(spec.samples_train - spec.validation_count());
    let test = draw(spec, &world, spec.samples_test, "test");
    Ok(TaskData { train, val, test })
}

// ---------------------------------------------------------------- training

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    None,
    L2,
    L2Sp,
    OmegaI,
    OmegaU,
    OmegaP,
    OmegaKd,
}

impl Regularizer {
    pub const ALL: [Regularizer; 7] = [
        Regularizer::None,
        Regularizer::L2,
        Regularizer::L2Sp,
        Regularizer::OmegaI,
        Regularizer::OmegaU,
        Regularizer::OmegaP,
        Regularizer::OmegaKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::L2 => "l2",
            Regularizer::L2Sp => "l2_sp",
            Regularizer::OmegaI => "omega_i",
            Regularizer::OmegaU => "omega_u",
            Regularizer::OmegaP => "omega_p",
            Regularizer::OmegaKd => "omega_kd",
        }
    }

    fn representation_kind(self) -> Option<RegularizerKind> {
        match self {
            Regularizer::OmegaI => Some(RegularizerKind::Identity),
            Regularizer::OmegaU => Some(RegularizerKind::Uniform),
            Regularizer::OmegaP => Some(RegularizerKind::OtPlan),
            _ => None,
        }
    }

    fn needs_teacher(self) -> bool {
        self.representation_kind().is_some() || self == Regularizer::OmegaKd
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regularizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Regularizer::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Regularizer::ALL.iter().map(|r| r.name()).collect();
                format!("unknown regularizer `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Iterations at which the learning rate is divided by 10.
    pub decay_at: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    /// Also penalize a mid-depth hidden layer besides the penultimate one.
    pub penalize_mid_layer: bool,
    /// Stride of the in-training trace log.
    pub trace_every: usize,
    pub solver: SolverSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            batch_size: 64,
            learning_rate: 0.05,
            decay_at: vec![450],
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha_grid: logspace(1e-4, 1.0, 5),
            tau_grid: TEMPERATURE_GRID.to_vec(),
            penalize_mid_layer: false,
            trace_every: 10,
            solver: training_solver(),
        }
    }
}

/// IPOT tuned for per-step use inside training: a larger proximal step, a
/// 200-step budget and scaling-domain iterations. On activation costs this is
/// within about 1e-4 relative of the exact optimum at a fraction of the cost
/// of the default settings.
pub fn training_solver() -> SolverSettings {
    SolverSettings {
        ipot_beta: 0.1,
        inner_iterations: 1,
        outer_iterations: 200,
        convergence_tolerance: 1e-6,
        log_domain: false,
        ..SolverSettings::default()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.alpha_grid.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad("alpha_grid values must be positive");
        }
        if self.tau_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("tau_grid values must be positive");
        }
        if self.trace_every == 0 {
            return bad("trace_every must be at least 1");
        }
        self.solver
            .validate()
            .map_err(|e| HarnessError::Config(format!("solver: {e}")))
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let drops = self.decay_at.iter().filter(|&&t| t <= iteration).count();
        self.learning_rate * 0.1f64.powi(drops as i32)
    }
}

/// Seeded mini-batch order: reshuffles after each pass over the data.
pub struct BatchSchedule {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            batch: batch_size.clamp(1, n.max(1)),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One training job: the regularizer with its weight and the frozen
/// references it needs.
#[derive(Clone, Copy)]
pub struct TrainingRun<'a> {
    pub config: &'a TrainConfig,
    pub regularizer: Regularizer,
    pub alpha: f64,
    pub tau: f64,
    pub teacher: Option<&'a ModelState>,
    /// `(student layer, teacher layer)` pairs for representation terms.
    pub layer_pairs: &'a [(usize, usize)],
    pub batch_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSample {
    pub layer: usize,
    pub iteration: usize,
    pub trace_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    /// Trace ratios of the solved couplings, for square OT terms only.
    pub traces: Vec<TraceSample>,
    /// Unweighted regularizer values at iteration 0, one per term.
    pub initial_terms: Vec<f64>,
    pub final_objective: f64,
    pub seconds_per_iteration: f64,
}

/// Runs SGD with momentum on `data` under `run`, mutating `model` in place.
pub fn train(model: &mut ModelState, data: &Dataset, run: &TrainingRun<'_>) -> Result<TrainLog, HarnessError> {
    run.config.validate()?;
    if run.regularizer.needs_teacher() && run.teacher.is_none() {
        return Err(HarnessError::Config(format!(
            "{} needs a teacher model",
            run.regularizer
        )));
    }
    let cfg = run.config;
    let mut schedule = BatchSchedule::new(data.len(), cfg.batch_size, run.batch_seed);
    let mut traces = Vec::new();
    let mut initial_terms = Vec::new();
    let mut final_objective = f64::NAN;
    let start = Instant::now();
    for it in 0..cfg.iterations {
        let idx = schedule.next_batch();
        let (x, y) = data.batch(&idx);
        let teacher_trace = match run.teacher {
            Some(t) if run.regularizer.needs_teacher() => Some(nn::forward(t, x.view())?),
            _ => None,
        };
        let mut refs: Vec<ActivationMatrix> = Vec::new();
        if let (Some(_), Some(tt)) = (run.regularizer.representation_kind(), &teacher_trace) {
            for &(_, lt) in run.layer_pairs {
                refs.push(tt.layer(lt)?);
            }
        }
        let mut terms: Vec<RegTerm<'_>> = Vec::new();
        match run.regularizer {
            Regularizer::None => {}
            Regularizer::L2 => terms.push(RegTerm::L2 { alpha: run.alpha }),
            Regularizer::L2Sp => terms.push(RegTerm::L2Sp { alpha: run.alpha }),
            Regularizer::OmegaKd => terms.push(RegTerm::Distill {
                alpha: run.alpha,
                temperature: run.tau,
                teacher_logits: teacher_trace.as_ref().expect("teacher checked").logits(),
            }),
            r => {
                let kind = r.representation_kind().expect("representation arm");
                for (&(ls, _), teacher) in run.layer_pairs.iter().zip(&refs) {
                    terms.push(RegTerm::Representation {
                        layer: ls,
                        kind,
                        alpha: run.alpha,
                        teacher,
                        solver: &cfg.solver,
                    });
                }
            }
        }
        let out = match nn::loss_and_grad(model, x.view(), &y, &terms) {
            Err(ModelError::Representation(RepresentationError::Solver(OtError::Numerical(_))))
                if !cfg.solver.log_domain =>
            {
                // The scaling kernel under- or overflowed; redo the step in
                // the log domain.
                let log_solver = SolverSettings {
                    log_domain: true,
                    ..cfg.solver.clone()
                };
                for t in terms.iter_mut() {
                    if let RegTerm::Representation { solver, .. } = t {
                        *solver = &log_solver;
                    }
                }
                nn::loss_and_grad(model, x.view(), &y, &terms)?
            }
            other => other?,
        };
        if it == 0 {
            initial_terms = out.terms.iter().map(|t| t.value).collect();
        }
        let last = it + 1 == cfg.iterations;
        if it % cfg.trace_every == 0 || last {
            for (tv, &(ls, _)) in out.terms.iter().zip(run.layer_pairs) {
                if let Some(plan) = &tv.plan {
                    if let Ok(r) = plan_trace_ratio(plan) {
                        traces.push(TraceSample {
                            layer: ls,
                            iteration: it,
                            trace_ratio: r,
                        });
                    }
                }
            }
        }
        final_objective = out.objective;
        nn::sgd_step(
            model,
            &out.grads,
            cfg.learning_rate_at(it),
            cfg.momentum,
            cfg.weight_decay,
        );
    }
    Ok(TrainLog {
        traces,
        initial_terms,
        final_objective,
        seconds_per_iteration: start.elapsed().as_secs_f64() / cfg.iterations as f64,
    })
}

pub fn evaluate(model: &ModelState, data: &Dataset) -> Result<f64, HarnessError> {
    Ok(nn::accuracy(model, data.inputs.view(), &data.labels)?)
}

// ---------------------------------------------------------------- selection

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub alpha: f64,
    pub tau: Option<f64>,
}

/// Evaluates every grid point and returns the one with the highest score.
/// Ties go to the smaller alpha, then the smaller temperature.
pub fn select_hyperparameters<F>(grid: &[Candidate], mut score: F) -> Result<(Candidate, Vec<(Candidate, f64)>), HarnessError>
where
    F: FnMut(&Candidate) -> Result<f64, HarnessError>,
{
    if grid.is_empty() {
        return Err(HarnessError::Config("hyperparameter grid is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| {
        a.alpha
            .total_cmp(&b.alpha)
            .then(a.tau.unwrap_or(0.0).total_cmp(&b.tau.unwrap_or(0.0)))
    });
    let mut scored = Vec::with_capacity(sorted.len());
    let mut best: Option<(Candidate, f64)> = None;
    for c in sorted {
        let s = score(&c)?;
        scored.push((c, s));
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    Ok((best.expect("non-empty").0, scored))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------- experiments

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Finetune,
    Compress,
    TransferCompress,
}

impl RegimeKind {
    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::Finetune => "finetune",
            RegimeKind::Compress => "compress",
            RegimeKind::TransferCompress => "transfer_compress",
        }
    }

    pub fn allowed_arms(self) -> &'static [Regularizer] {
        use Regularizer::*;
        match self {
            RegimeKind::Finetune => &[None, L2, L2Sp, OmegaI, OmegaU, OmegaP],
            RegimeKind::Compress => &[None, OmegaI, OmegaU, OmegaKd, OmegaP],
            RegimeKind::TransferCompress => &[None, OmegaU, OmegaP],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
}

/// Versioned experiment description; the on-disk config file maps onto it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub regime: RegimeKind,
    /// Task the teacher is trained on; unused by `compress`.
    #[serde(default)]
    pub source: Option<TaskSpec>,
    pub target: TaskSpec,
    pub teacher: ArchConfig,
    /// Defaults to the teacher architecture.
    #[serde(default)]
    pub student: Option<ArchConfig>,
    #[serde(default)]
    pub teacher_train: TrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub arms: Vec<Regularizer>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seeds whose mean validation accuracy picks the hyperparameters;
    /// defaults to the first evaluation seed.
    #[serde(default)]
    pub selection_seeds: Vec<u64>,
    /// Share of the source training split used to pre-train the student
    /// (`transfer_compress`).
    #[serde(default)]
    pub pretrain_fraction: f64,
    /// Start the student from the teacher's weights (`compress`, equal
    /// architectures only).
    #[serde(default)]
    pub init_student_from_teacher: bool,
    /// Skip selection and use these values.
    #[serde(default)]
    pub fixed_alpha: Option<f64>,
    #[serde(default)]
    pub fixed_tau: Option<f64>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.arms.is_empty() {
            return bad("arms must name at least one regularizer".into());
        }
        for arm in &self.arms {
            if !self.regime.allowed_arms().contains(arm) {
                return bad(format!("arm {arm} is not available in the {} regime", self.regime.name()));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.regime != RegimeKind::Compress && self.source.is_none() {
            return bad(format!("the {} regime needs a source task", self.regime.name()));
        }
        if !(0.0..=1.0).contains(&self.pretrain_fraction) {
            return bad(format!("pretrain_fraction must lie in [0, 1], got {}", self.pretrain_fraction));
        }
        if self.pretrain_fraction > 0.0 && self.regime != RegimeKind::TransferCompress {
            return bad("pretrain_fraction only applies to transfer_compress".into());
        }
        if self.init_student_from_teacher && self.regime != RegimeKind::Compress {
            return bad("init_student_from_teacher only applies to compress".into());
        }
        if let Some(a) = self.fixed_alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(format!("fixed_alpha must be non-negative, got {a}"));
            }
        }
        if let Some(t) = self.fixed_tau {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("fixed_tau must be positive, got {t}"));
            }
        }
        if self.teacher.hidden.is_empty() || self.teacher.hidden.contains(&0) {
            return bad("teacher.hidden needs at least one positive width".into());
        }
        if let Some(s) = &self.student {
            if s.hidden.is_empty() || s.hidden.contains(&0) {
                return bad("student.hidden needs at least one positive width".into());
            }
            if self.regime == RegimeKind::Finetune && s.hidden != self.teacher.hidden {
                return bad("finetune needs the student architecture to match the teacher".into());
            }
        }
        if let Some(src) = &self.source {
            src.validate()?;
            if src.input_dim != self.target.input_dim {
                return bad("source and target tasks need the same input_dim".into());
            }
        }
        self.target.validate()?;
        self.teacher_train.validate()?;
        self.train.validate()
    }

    fn student_hidden(&self) -> &[usize] {
        self.student
            .as_ref()
            .map(|s| s.hidden.as_slice())
            .unwrap_or(&self.teacher.hidden)
    }
}

fn mid_layer(hidden: usize) -> Option<usize> {
    if hidden >= 2 {
        Some((hidden - 1) / 2)
    } else {
        None
    }
}

/// Penalized `(student, teacher)` hidden-layer pairs: the penultimate layers,
/// plus mid-depth layers when requested and both networks have one.
pub fn layer_pairs(student_hidden: usize, teacher_hidden: usize, with_mid: bool) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if with_mid {
        if let (Some(s), Some(t)) = (mid_layer(student_hidden), mid_layer(teacher_hidden)) {
            pairs.push((s, t));
        }
    }
    pairs.push((student_hidden - 1, teacher_hidden - 1));
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub seed: u64,
    pub layer: usize,
    pub iteration: usize,
    pub trace_ratio: f64,
    pub batch_size: usize,
}

/// Outcome of one arm over all seeds.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub arm: Regularizer,
    pub selected: Candidate,
    /// Validation accuracy per grid point on the selection seed.
    pub selection_scores: Vec<(Candidate, f64)>,
    pub seeds: Vec<u64>,
    pub test_accuracies: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub traces: Vec<TraceRecord>,
    pub seconds_per_iteration: f64,
}

/// One trained student.
#[derive(Clone, Debug)]
pub struct SingleRun {
    pub model: ModelState,
    pub log: TrainLog,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub batch_size: usize,
    pub arm: Regularizer,
    pub alpha: f64,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Holds the generated tasks and caches one teacher per seed so arms share
/// them.
pub struct Lab {
    config: ExperimentConfig,
    source: Option<TaskData>,
    target: TaskData,
    teacher_specs: Vec<LayerSpec>,
    student_specs: Vec<LayerSpec>,
    pairs: Vec<(usize, usize)>,
    teachers: BTreeMap<u64, ModelState>,
    fixed_teacher: Option<ModelState>,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let target = generate_task(&config.target)?;
        let source = match (&config.source, config.regime) {
            (Some(spec), RegimeKind::Finetune | RegimeKind::TransferCompress) => Some(generate_task(spec)?),
            _ => None,
        };
        let teacher_classes = source.as_ref().unwrap_or(&target).train.classes;
        let input_dim = config.target.input_dim;
        let teacher_specs = mlp_specs(input_dim, &config.teacher.hidden, teacher_classes);
        let student_specs = mlp_specs(input_dim, config.student_hidden(), target.train.classes);
        let pairs = layer_pairs(
            config.student_hidden().len(),
            config.teacher.hidden.len(),
            config.train.penalize_mid_layer,
        );
        if config.arms.contains(&Regularizer::OmegaI) {
            for &(ls, lt) in &pairs {
                let (ds, dt) = (student_specs[ls].output_dim, teacher_specs[lt].output_dim);
                if ds != dt {
                    return Err(HarnessError::Config(format!(
                        "omega_i is only applicable when student and teacher layers have the same width \
                         (student layer {ls} has {ds} neurons, teacher layer {lt} has {dt})"
                    )));
                }
            }
        }
        if config.init_student_from_teacher && teacher_specs != student_specs {
            return Err(HarnessError::Config(
                "init_student_from_teacher needs identical student and teacher architectures".into(),
            ));
        }
        Ok(Self {
            config,
            source,
            target,
            teacher_specs,
            student_specs,
            pairs,
            teachers: BTreeMap::new(),
            fixed_teacher: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn target(&self) -> &TaskData {
        &self.target
    }

    pub fn source(&self) -> Option<&TaskData> {
        self.source.as_ref()
    }

    pub fn layer_pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn teacher_specs(&self) -> &[LayerSpec] {
        &self.teacher_specs
    }

    /// Uses `teacher` for every seed instead of training one per seed.
    pub fn set_teacher(&mut self, teacher: ModelState) -> Result<(), HarnessError> {
        if teacher.specs() != self.teacher_specs.as_slice() {
            return Err(HarnessError::Config(
                "teacher checkpoint architecture does not match the configured teacher".into(),
            ));
        }
        self.fixed_teacher = Some(teacher);
        Ok(())
    }

    fn teacher_task(&self) -> &TaskData {
        self.source.as_ref().unwrap_or(&self.target)
    }

    /// The frozen teacher for `seed`, trained on first use.
    pub fn teacher(&mut self, seed: u64) -> Result<&ModelState, HarnessError> {
        if let Some(t) = &self.fixed_teacher {
            return Ok(t);
        }
        if !self.teachers.contains_key(&seed) {
            let model = train_teacher(
                self.teacher_specs.clone(),
                &self.teacher_task().train,
                &self.config.teacher_train,
                seed,
            )?;
            self.teachers.insert(seed, model);
        }
        Ok(&self.teachers[&seed])
    }

    /// Student before target training: a copy of the teacher with a fresh
    /// head (`finetune`), optionally pre-trained on part of the source
    /// (`transfer_compress`), otherwise freshly initialized.
    pub fn initial_student(&mut self, seed: u64) -> Result<ModelState, HarnessError> {
        let classes = self.target.train.classes;
        let head_seed = derive_seed(seed, "head");
        match self.config.regime {
            RegimeKind::Finetune => Ok(self.teacher(seed)?.transfer_to(classes, head_seed)?),
            RegimeKind::Compress if self.config.init_student_from_teacher => {
                let t = self.teacher(seed)?;
                Ok(ModelState::from_params(t.specs().to_vec(), t.params.clone(), seed))
            }
            RegimeKind::TransferCompress if self.config.pretrain_fraction > 0.0 => {
                let source = self.source.as_ref().expect("validated");
                let n = (source.train.len() as f64 * self.config.pretrain_fraction).ceil() as usize;
                let subset = source.train.prefix(n.max(1));
                let specs = mlp_specs(
                    self.config.target.input_dim,
                    self.config.student_hidden(),
                    source.train.classes,
                );
                let mut model = ModelState::new(specs, derive_seed(seed, "student"))?;
                let cfg = &self.config.train;
                train(
                    &mut model,
                    &subset,
                    &TrainingRun {
                        config: cfg,
                        regularizer: Regularizer::None,
                        alpha: 0.0,
                        tau: 1.0,
                        teacher: None,
                        layer_pairs: &[],
                        batch_seed: derive_seed(seed, "pretrain-batches"),
                    },
                )?;
                Ok(model.transfer_to(classes, head_seed)?)
            }
            _ => Ok(ModelState::new(self.student_specs.clone(), derive_seed(seed, "student"))?),
        }
    }

    /// Indices of the first target mini-batch for `seed`; shared by all arms.
    pub fn first_batch(&self, seed: u64, batch_size: usize) -> Vec<usize> {
        BatchSchedule::new(self.target.train.len(), batch_size, derive_seed(seed, "batches")).next_batch()
    }

    /// Trains one student on the target with the given arm and weights.
    pub fn run_single(
        &mut self,
        arm: Regularizer,
        candidate: Candidate,
        seed: u64,
        batch_size: Option<usize>,
    ) -> Result<SingleRun, HarnessError> {
        let mut model = self.initial_student(seed)?;
        let mut cfg = self.config.train.clone();
        if let Some(b) = batch_size {
            cfg.batch_size = b;
        }
        let teacher = if arm.needs_teacher() {
            Some(self.teacher(seed)?.clone())
        } else {
            None
        };
        let log = train(
            &mut model,
            &self.target.train,
            &TrainingRun {
                config: &cfg,
                regularizer: arm,
                alpha: candidate.alpha,
                tau: candidate.tau.unwrap_or(1.0),
                teacher: teacher.as_ref(),
                layer_pairs: &self.pairs,
                batch_seed: derive_seed(seed, "batches"),
            },
        )?;
        Ok(SingleRun {
            val_accuracy: evaluate(&model, &self.target.val)?,
            test_accuracy: evaluate(&model, &self.target.test)?,
            model,
            log,
        })
    }

    fn grid(&self, arm: Regularizer) -> Vec<Candidate> {
        let cfg = &self.config;
        if arm == Regularizer::None {
            return vec![Candidate { alpha: 0.0, tau: None }];
        }
        let alphas = match cfg.fixed_alpha {
            Some(a) => vec![a],
            None => cfg.train.alpha_grid.clone(),
        };
        let taus: Vec<Option<f64>> = if arm == Regularizer::OmegaKd {
            match cfg.fixed_tau {
                Some(t) => vec![Some(t)],
                None => cfg.train.tau_grid.iter().map(|t| Some(*t)).collect(),
            }
        } else {
            vec![None]
        };
        alphas
            .iter()
            .flat_map(|&alpha| taus.iter().map(move |&tau| Candidate { alpha, tau }))
            .collect()
    }

    /// Picks `alpha` (and `tau`) by mean validation accuracy over the
    /// selection seeds.
    pub fn select(&mut self, arm: Regularizer) -> Result<(Candidate, Vec<(Candidate, f64)>), HarnessError> {
        let grid = self.grid(arm);
        if grid.len() == 1 {
            return Ok((grid[0], vec![]));
        }
        let seeds = if self.config.selection_seeds.is_empty() {
            vec![self.config.seeds[0]]
        } else {
            self.config.selection_seeds.clone()
        };
        select_hyperparameters(&grid, |c| {
            let mut total = 0.0;
            for &seed in &seeds {
                total += self.run_single(arm, *c, seed, None)?.val_accuracy;
            }
            Ok(total / seeds.len() as f64)
        })
    }

    fn run_seeds(
        &mut self,
        arm: Regularizer,
        selected: Candidate,
        batch_size: Option<usize>,
    ) -> Result<(Vec<SingleRun>, Vec<u64>), HarnessError> {
        let seeds = self.config.seeds.clone();
        let runs = seeds
            .iter()
            .map(|&s| self.run_single(arm, selected, s, batch_size))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((runs, seeds))
    }

    /// Selects hyperparameters, then trains and tests one student per seed.
    pub fn run_arm(&mut self, arm: Regularizer) -> Result<RunResult, HarnessError> {
        let (selected, selection_scores) = self.select(arm)?;
        let (runs, seeds) = self.run_seeds(arm, selected, None)?;
        let batch_size = self.config.train.batch_size;
        let test: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let (mean, std) = mean_std(&test);
        let traces = runs
            .iter()
            .zip(&seeds)
            .flat_map(|(r, &seed)| {
                r.log.traces.iter().map(move |t| TraceRecord {
                    seed,
                    layer: t.layer,
                    iteration: t.iteration,
                    trace_ratio: t.trace_ratio,
                    batch_size,
                })
            })
            .collect();
        Ok(RunResult {
            arm,
            selected,
            selection_scores,
            val_accuracies: runs.iter().map(|r| r.val_accuracy).collect(),
            test_accuracies: test,
            mean,
            std,
            traces,
            seconds_per_iteration: runs.iter().map(|r| r.log.seconds_per_iteration).sum::<f64>()
                / runs.len() as f64,
            seeds,
        })
    }

    pub fn run_all(&mut self) -> Result<Vec<RunResult>, HarnessError> {
        let arms = self.config.arms.clone();
        arms.into_iter().map(|a| self.run_arm(a)).collect()
    }

    /// Accuracy per batch size for each arm. Hyperparameters are selected
    /// once at the configured batch size and held fixed across the sweep.
    pub fn batch_size_sweep(&mut self, sizes: &[usize]) -> Result<Vec<SweepRow>, HarnessError> {
        let mut rows = Vec::new();
        for arm in self.config.arms.clone() {
            let (selected, _) = self.select(arm)?;
            for &b in sizes {
                let (runs, _) = self.run_seeds(arm, selected, Some(b))?;
                let acc: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
                let (mean, std) = mean_std(&acc);
                rows.push(SweepRow {
                    batch_size: b,
                    arm,
                    alpha: selected.alpha,
                    mean,
                    std,
                    accuracies: acc,
                });
            }
        }
        Ok(rows)
    }
}

/// Trains a teacher from a seeded initialization with no regularizer.
pub fn train_teacher(
    specs: Vec<LayerSpec>,
    data: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<ModelState, HarnessError> {
    let mut model = ModelState::new(specs, derive_seed(seed, "teacher"))?;
    train(
        &mut model,
        data,
        &TrainingRun {
            config,
            regularizer: Regularizer::None,
            alpha: 0.0,
            tau: 1.0,
            teacher: None,
            layer_pairs: &[],
            batch_seed: derive_seed(seed, "teacher-batches"),
        },
    )?;
    Ok(model)
}

fn expect_regime(config: &ExperimentConfig, regime: RegimeKind) -> Result<(), HarnessError> {
    if config.regime != regime {
        return Err(HarnessError::Config(format!(
            "expected a {} config, got {}",
            regime.name(),
            config.regime.name()
        )));
    }
    Ok(())
}

/// Fine-tunes the source teacher on the target under `arm`.
pub fn run_finetune(config: ExperimentConfig, arm: Regularizer) -> Result<RunResult, HarnessError> {
    expect_regime(&config, RegimeKind::Finetune)?;
    Lab::new(config)?.run_arm(arm)
}

/// Trains a student from scratch on the teacher's own task under `arm`.
pub fn run_compress(config: ExperimentConfig, arm: Regularizer) -> Result<RunResult, HarnessError> {
    expect_regime(&config, RegimeKind::Compress)?;
    Lab::new(config)?.run_arm(arm)
}

/// Trains a smaller student on the target against a source teacher.
pub fn run_transfer_compress(config: ExperimentConfig, arm: Regularizer) -> Result<RunResult, HarnessError> {
    expect_regime(&config, RegimeKind::TransferCompress)?;
    Lab::new(config)?.run_arm(arm)
}

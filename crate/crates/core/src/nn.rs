//! A small fully connected classifier trained with hand-written
//! backpropagation and SGD with momentum.
//!
//! Batches are column-major in the statistical sense: inputs are `m x n`
//! (features by examples) and every layer's activations are `d x n`, the same
//! orientation as [`ActivationMatrix`]. The last layer is linear and produces
//! the logits.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{self, DistillError};
use crate::ot::{SolverSettings, TransportPlan};
use crate::representation::{
    self, ActivationMatrix, RegularizerKind, RepresentationError,
};

pub const CHECKPOINT_FORMAT: &str = "neuron-ot-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer index {index} is out of range for a {depth}-layer model")]
    LayerIndex { index: usize, depth: usize },
    #[error("label {label} is out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Identity,
}

impl Nonlinearity {
    fn apply(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => z.max(0.0),
            Nonlinearity::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub nonlinearity: Nonlinearity,
}

/// ReLU hidden layers of the given widths followed by a linear classifier.
pub fn mlp_specs(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input_dim;
    for &w in hidden {
        specs.push(LayerSpec {
            input_dim: prev,
            output_dim: w,
            nonlinearity: Nonlinearity::Relu,
        });
        prev = w;
    }
    specs.push(LayerSpec {
        input_dim: prev,
        output_dim: classes,
        nonlinearity: Nonlinearity::Identity,
    });
    specs
}

fn validate_specs(specs: &[LayerSpec]) -> Result<(), ModelError> {
    if specs.is_empty() {
        return Err(ModelError::Architecture("model has no layers".into()));
    }
    for (l, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(ModelError::Architecture(format!("layer {l} has a zero dimension")));
        }
        if l > 0 && specs[l - 1].output_dim != s.input_dim {
            return Err(ModelError::Architecture(format!(
                "layer {l} expects {} inputs but layer {} produces {}",
                s.input_dim,
                l - 1,
                specs[l - 1].output_dim
            )));
        }
    }
    Ok(())
}

/// Weights (`out x in`) and bias of one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// One [`Dense`] per layer. Also used for gradients and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<Dense>,
}

impl Params {
    pub fn zeros(specs: &[LayerSpec]) -> Self {
        Self {
            layers: specs
                .iter()
                .map(|s| Dense {
                    weights: Array2::zeros((s.output_dim, s.input_dim)),
                    bias: Array1::zeros(s.output_dim),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &Params) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(c, &b.weights);
            a.bias.scaled_add(c, &b.bias);
        }
    }

    pub fn dot(&self, other: &Params) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    /// All scalars in layer order, weights (row-major) before bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Order-sensitive FNV-1a hash over the bit patterns of every scalar.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.iter() {
            for byte in x.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Uniform He initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
fn init_dense(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Dense {
    let bound = (6.0 / spec.input_dim as f64).sqrt();
    Dense {
        weights: Array2::from_shape_simple_fn((spec.output_dim, spec.input_dim), || {
            rng.random_range(-bound..bound)
        }),
        bias: Array1::zeros(spec.output_dim),
    }
}

/// Parameters, momentum, and the frozen starting point used by L2-SP.
#[derive(Clone, Debug)]
pub struct ModelState {
    specs: Vec<LayerSpec>,
    pub params: Params,
    pub momentum: Params,
    starting_point: Arc<Params>,
    seed: u64,
}

impl ModelState {
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self, ModelError> {
        validate_specs(&specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params {
            layers: specs.iter().map(|s| init_dense(s, &mut rng)).collect(),
        };
        Ok(Self::from_params(specs, params, seed))
    }

    /// Wraps existing parameters; they become the starting point.
    pub fn from_params(specs: Vec<LayerSpec>, params: Params, seed: u64) -> Self {
        let momentum = params.zeros_like();
        Self {
            specs,
            starting_point: Arc::new(params.clone()),
            params,
            momentum,
            seed,
        }
    }

    /// A fresh model that keeps every layer but the last, whose output is
    /// resized to `classes` and re-drawn from `seed`. The copied parameters
    /// become the starting point and momentum is reset.
    pub fn transfer_to(&self, classes: usize, seed: u64) -> Result<Self, ModelError> {
        let mut specs = self.specs.clone();
        let last = specs.last_mut().expect("validated non-empty");
        last.output_dim = classes;
        validate_specs(&specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.params.clone();
        *params.layers.last_mut().expect("non-empty") =
            init_dense(specs.last().expect("non-empty"), &mut rng);
        Ok(Self::from_params(specs, params, seed))
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn depth(&self) -> usize {
        self.specs.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.specs.last().expect("non-empty").output_dim
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].input_dim
    }

    pub fn starting_point(&self) -> &Params {
        &self.starting_point
    }

    /// Index of the last hidden layer.
    pub fn penultimate(&self) -> Option<usize> {
        self.depth().checked_sub(2)
    }

    /// Reorders the neurons of hidden layer `layer` and rewires the next
    /// layer's inputs so the network computes the same function. Applied to
    /// parameters, starting point and momentum alike.
    pub fn permute_hidden(&mut self, layer: usize, perm: &[usize]) -> Result<(), ModelError> {
        if layer + 1 >= self.depth() {
            return Err(ModelError::LayerIndex {
                index: layer,
                depth: self.depth(),
            });
        }
        if perm.len() != self.specs[layer].output_dim {
            return Err(ModelError::Shape(format!(
                "permutation has {} entries, layer {layer} has {} neurons",
                perm.len(),
                self.specs[layer].output_dim
            )));
        }
        let apply = |p: &mut Params| {
            let cur = &mut p.layers[layer];
            cur.weights = cur.weights.select(Axis(0), perm);
            cur.bias = cur.bias.select(Axis(0), perm);
            let next = &mut p.layers[layer + 1];
            next.weights = next.weights.select(Axis(1), perm);
        };
        apply(&mut self.params);
        apply(&mut self.momentum);
        apply(Arc::make_mut(&mut self.starting_point));
        Ok(())
    }
}

/// Every layer's post-nonlinearity activations; the last entry is the logits.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.activations.last().expect("non-empty").view()
    }

    pub fn layer(&self, index: usize) -> Result<ActivationMatrix, ModelError> {
        let a = self.activations.get(index).ok_or(ModelError::LayerIndex {
            index,
            depth: self.activations.len(),
        })?;
        Ok(ActivationMatrix::new(a.clone())?)
    }

    pub fn depth(&self) -> usize {
        self.activations.len()
    }
}

pub fn forward(model: &ModelState, inputs: ArrayView2<'_, f64>) -> Result<ForwardTrace, ModelError> {
    if inputs.nrows() != model.input_dim() {
        return Err(ModelError::Shape(format!(
            "model expects {} input features, batch has {}",
            model.input_dim(),
            inputs.nrows()
        )));
    }
    let mut activations = Vec::with_capacity(model.depth());
    let mut pre_activations = Vec::with_capacity(model.depth());
    let mut h = inputs.to_owned();
    for (spec, layer) in model.specs.iter().zip(&model.params.layers) {
        let mut z = layer.weights.dot(&h);
        z += &layer.bias.view().insert_axis(Axis(1));
        h = z.mapv(|v| spec.nonlinearity.apply(v));
        pre_activations.push(z);
        activations.push(h.clone());
    }
    Ok(ForwardTrace {
        activations,
        pre_activations,
    })
}

/// Fraction of columns whose arg-max logit equals the label.
pub fn accuracy(model: &ModelState, inputs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64, ModelError> {
    let trace = forward(model, inputs)?;
    let logits = trace.logits();
    let correct = logits
        .axis_iter(Axis(1))
        .zip(labels)
        .filter(|(col, &y)| {
            let mut best = 0;
            for k in 1..col.len() {
                if col[k] > col[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// One additive term of the training objective, weighted by `alpha`.
#[derive(Clone, Debug)]
pub enum RegTerm<'a> {
    /// Representation regularizer at hidden layer `layer` against frozen
    /// teacher activations on the same batch.
    Representation {
        layer: usize,
        kind: RegularizerKind,
        alpha: f64,
        teacher: &'a ActivationMatrix,
        solver: &'a SolverSettings,
    },
    /// `<plan, M>` with a caller-fixed coupling.
    FixedCoupling {
        layer: usize,
        alpha: f64,
        teacher: &'a ActivationMatrix,
        plan: &'a TransportPlan,
    },
    /// KL between softened teacher and student outputs.
    Distill {
        alpha: f64,
        temperature: f64,
        teacher_logits: ArrayView2<'a, f64>,
    },
    /// `1/2 ||w - w0||^2` on transferred layers, `1/2 ||w||^2` on the last.
    L2Sp { alpha: f64 },
    /// `1/2 ||w||^2` on every layer.
    L2 { alpha: f64 },
}

#[derive(Clone, Debug)]
pub struct TermValue {
    /// Unweighted regularizer value.
    pub value: f64,
    /// Solved coupling for OT terms.
    pub plan: Option<TransportPlan>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub objective: f64,
    pub cross_entropy: f64,
    pub terms: Vec<TermValue>,
    pub grads: Params,
}

/// Mean cross-entropy of the logits against `labels` and `d/dlogits`.
fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (j, (col, &y)) in logits.axis_iter(Axis(1)).zip(labels).enumerate() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = col.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        loss += log_norm - col[y];
        for (k, z) in col.iter().enumerate() {
            grad[[k, j]] = (z - log_norm).exp() / n;
        }
        grad[[y, j]] -= 1.0 / n;
    }
    (loss / n, grad)
}

/// `1/2 sum ||w - w0||^2` over all but the last layer plus `1/2 ||w_last||^2`.
pub fn l2_sp_value_and_grad(model: &ModelState) -> (f64, Params) {
    let last = model.depth() - 1;
    let mut grad = model.params.zeros_like();
    let mut value = 0.0;
    for (l, ((p, w0), g)) in model
        .params
        .layers
        .iter()
        .zip(&model.starting_point.layers)
        .zip(grad.layers.iter_mut())
        .enumerate()
    {
        if l == last {
            g.weights.assign(&p.weights);
            g.bias.assign(&p.bias);
        } else {
            g.weights = &p.weights - &w0.weights;
            g.bias = &p.bias - &w0.bias;
        }
        value += 0.5 * (g.weights.iter().chain(g.bias.iter()).map(|x| x * x).sum::<f64>());
    }
    (value, grad)
}

fn l2_value_and_grad(model: &ModelState) -> (f64, Params) {
    let value = 0.5 * model.params.dot(&model.params);
    (value, model.params.clone())
}

fn check_labels(labels: &[usize], classes: usize, batch: usize) -> Result<(), ModelError> {
    if labels.len() != batch {
        return Err(ModelError::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(ModelError::Label { label, classes });
    }
    Ok(())
}

/// Objective `mean CE + sum_k alpha_k Omega_k` and its exact parameter
/// gradient. Representation gradients are injected at the penalized layers
/// with the coupling held fixed and then backpropagated.
pub fn loss_and_grad(
    model: &ModelState,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    terms: &[RegTerm<'_>],
) -> Result<LossOutput, ModelError> {
    check_labels(labels, model.classes(), inputs.ncols())?;
    let trace = forward(model, inputs)?;
    let depth = model.depth();
    let (ce, mut upstream) = cross_entropy(trace.logits(), labels);

    // Gradients w.r.t. each layer's output activations, beyond the CE path.
    let mut injected: Vec<Option<Array2<f64>>> = vec![None; depth];
    let mut inject = |layer: usize, g: Array2<f64>| {
        match &mut injected[layer] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    };
    let mut objective = ce;
    let mut values = Vec::with_capacity(terms.len());
    let mut param_terms = model.params.zeros_like();
    for term in terms {
        let tv = match term {
            RegTerm::Representation {
                layer,
                kind,
                alpha,
                teacher,
                solver,
            } => {
                let student = trace.layer(*layer)?;
                let r = representation::evaluate(*kind, &student, teacher, solver)?;
                inject(*layer, r.grad_wrt_student * *alpha);
                objective += alpha * r.value;
                TermValue {
                    value: r.value,
                    plan: r.plan_used,
                }
            }
            RegTerm::FixedCoupling {
                layer,
                alpha,
                teacher,
                plan,
            } => {
                let student = trace.layer(*layer)?;
                let r = representation::fixed_plan_value_and_grad(&student, teacher, plan)?;
                inject(*layer, r.grad_wrt_student * *alpha);
                objective += alpha * r.value;
                TermValue {
                    value: r.value,
                    plan: None,
                }
            }
            RegTerm::Distill {
                alpha,
                temperature,
                teacher_logits,
            } => {
                let (value, g) =
                    distill::kd_loss_and_grad(*teacher_logits, trace.logits(), *temperature)?;
                inject(depth - 1, g * *alpha);
                objective += alpha * value;
                TermValue { value, plan: None }
            }
            RegTerm::L2Sp { alpha } => {
                let (value, g) = l2_sp_value_and_grad(model);
                param_terms.add_scaled(*alpha, &g);
                objective += alpha * value;
                TermValue { value, plan: None }
            }
            RegTerm::L2 { alpha } => {
                let (value, g) = l2_value_and_grad(model);
                param_terms.add_scaled(*alpha, &g);
                objective += alpha * value;
                TermValue { value, plan: None }
            }
        };
        values.push(tv);
    }

    let mut grads = model.params.zeros_like();
    for l in (0..depth).rev() {
        if let Some(extra) = injected[l].take() {
            upstream += &extra;
        }
        let spec = &model.specs[l];
        let delta = &upstream * &trace.pre_activations[l].mapv(|z| spec.nonlinearity.derivative(z));
        let below = if l == 0 {
            inputs
        } else {
            trace.activations[l - 1].view()
        };
        grads.layers[l].weights = delta.dot(&below.t());
        grads.layers[l].bias = delta.sum_axis(Axis(1));
        if l > 0 {
            upstream = model.params.layers[l].weights.t().dot(&delta);
        }
    }
    grads.add_scaled(1.0, &param_terms);
    Ok(LossOutput {
        objective,
        cross_entropy: ce,
        terms: values,
        grads,
    })
}

/// `v <- momentum v + g + weight_decay w; w <- w - lr v`.
pub fn sgd_step(
    model: &mut ModelState,
    grads: &Params,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((w, v), g) in model
        .params
        .iter_mut()
        .zip(model.momentum.iter_mut())
        .zip(grads.iter())
    {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= learning_rate * *v;
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    spec: LayerSpec,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    seed: u64,
    layers: Vec<CheckpointLayer>,
}

/// JSON checkpoint of layer specs, parameters and seed. Floats round-trip
/// bit-exactly.
pub fn checkpoint_to_string(model: &ModelState) -> String {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        seed: model.seed,
        layers: model
            .specs
            .iter()
            .zip(&model.params.layers)
            .map(|(spec, l)| CheckpointLayer {
                spec: *spec,
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("checkpoint serializes")
}

pub fn checkpoint_from_str(text: &str) -> Result<ModelState, ModelError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Format(format!("unknown format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(ModelError::Format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let specs: Vec<LayerSpec> = file.layers.iter().map(|l| l.spec).collect();
    validate_specs(&specs)?;
    let mut layers = Vec::with_capacity(specs.len());
    for (l, (spec, cl)) in specs.iter().zip(file.layers).enumerate() {
        let weights = Array2::from_shape_vec((spec.output_dim, spec.input_dim), cl.weights)
            .map_err(|e| ModelError::Format(format!("layer {l} weights: {e}")))?;
        if cl.bias.len() != spec.output_dim {
            return Err(ModelError::Format(format!(
                "layer {l} bias has {} entries, expected {}",
                cl.bias.len(),
                spec.output_dim
            )));
        }
        layers.push(Dense {
            weights,
            bias: Array1::from(cl.bias),
        });
    }
    Ok(ModelState::from_params(specs, Params { layers }, file.seed))
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, checkpoint_to_string(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

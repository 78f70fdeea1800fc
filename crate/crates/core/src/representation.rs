//! Neuron-to-neuron cost matrices and the representation regularizers.
//!
//! A layer's representation on a mini-batch is a `d x n` matrix: one row per
//! neuron, one column per example. Two representations are compared through
//! the cost matrix `M_ij = ||A_i - T_j||_2 / sqrt(n)`, the root-mean-square
//! activation gap between student neuron `i` and teacher neuron `j`. The
//! `1/sqrt(n)` factor keeps regularization strength comparable across batch
//! sizes.
//!
//! Each regularizer is `<P, M>` for some coupling `P`:
//!
//! * [`RegularizerKind::OtPlan`]: the optimal coupling under uniform
//!   marginals, which makes the value invariant to permutations of neurons;
//! * [`RegularizerKind::Identity`]: `I / d`, neuron `i` must match neuron `i`;
//! * [`RegularizerKind::Uniform`]: `1 / (d d')`, every pair weighted equally.
//!
//! Gradients hold the coupling fixed (envelope theorem) and never flow into
//! the teacher.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ot::{
    self, plan_trace_ratio, CostMatrix, DiscreteMeasure, OtError, SolverSettings, TransportPlan,
};

/// Distances below this are treated as zero when differentiating the norm.
pub const ZERO_DISTANCE_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RepresentationError {
    #[error("invalid activations: {0}")]
    InvalidActivations(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(
        "the identity coupling needs equally wide representations, got {student} student \
         and {teacher} teacher neurons"
    )]
    WidthMismatch { student: usize, teacher: usize },
    #[error(transparent)]
    Solver(#[from] OtError),
}

/// Neuron-by-example activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix(Array2<f64>);

impl ActivationMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self, RepresentationError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(RepresentationError::InvalidActivations(format!(
                "need at least one neuron and one example, got {:?}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RepresentationError::InvalidActivations(
                "non-finite activation".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn neurons(&self) -> usize {
        self.0.nrows()
    }

    pub fn examples(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Reorders neurons: row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_neurons(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.neurons());
        Self(self.0.select(ndarray::Axis(0), perm))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    OtPlan,
    Identity,
    Uniform,
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegularizerKind::OtPlan => "ot_plan",
            RegularizerKind::Identity => "identity",
            RegularizerKind::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug)]
pub struct RegularizerValueAndGrad {
    pub value: f64,
    /// Same shape as the student activations.
    pub grad_wrt_student: Array2<f64>,
    /// The solved coupling, for [`RegularizerKind::OtPlan`] only.
    pub plan_used: Option<TransportPlan>,
}

impl RegularizerValueAndGrad {
    /// `tr(P)` of the solved plan, when there is one and it is square.
    pub fn trace_ratio(&self) -> Option<f64> {
        self.plan_used
            .as_ref()
            .and_then(|p| plan_trace_ratio(p).ok())
    }
}

fn check_batch(
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
) -> Result<(), RepresentationError> {
    if student.examples() != teacher.examples() {
        return Err(RepresentationError::ShapeMismatch(format!(
            "student has {} examples, teacher has {}",
            student.examples(),
            teacher.examples()
        )));
    }
    Ok(())
}

/// `M_ij = ||A_i - T_j||_2 / sqrt(n)`.
pub fn cost_matrix(
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
) -> Result<CostMatrix, RepresentationError> {
    check_batch(student, teacher)?;
    let scale = 1.0 / (student.examples() as f64).sqrt();
    let (a, t) = (student.values(), teacher.values());
    let m = Array2::from_shape_fn((a.nrows(), t.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(t.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
            * scale
    });
    Ok(CostMatrix::new(m)?)
}

/// `d/dA <P, M(A)>` with `P` held fixed. Pairs closer than
/// [`ZERO_DISTANCE_GUARD`] contribute nothing.
pub fn grad_activations(
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
    plan: &TransportPlan,
) -> Result<Array2<f64>, RepresentationError> {
    check_batch(student, teacher)?;
    if plan.shape() != (student.neurons(), teacher.neurons()) {
        return Err(RepresentationError::ShapeMismatch(format!(
            "plan is {:?}, activations give {}x{}",
            plan.shape(),
            student.neurons(),
            teacher.neurons()
        )));
    }
    let cost = cost_matrix(student, teacher)?;
    Ok(grad_with_cost(student, teacher, plan.entries(), cost.entries()))
}

fn grad_with_cost(
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
    plan: ArrayView2<'_, f64>,
    cost: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let n = student.examples() as f64;
    let (a, t) = (student.values(), teacher.values());
    let mut grad = Array2::zeros(a.dim());
    for (i, mut g) in grad.rows_mut().into_iter().enumerate() {
        for j in 0..t.nrows() {
            let (p, m) = (plan[[i, j]], cost[[i, j]]);
            if p == 0.0 || m < ZERO_DISTANCE_GUARD {
                continue;
            }
            // dM_ij/dA_ik = (A_ik - T_jk) / (n M_ij)
            let w = p / (n * m);
            for ((gk, ak), tk) in g.iter_mut().zip(a.row(i)).zip(t.row(j)) {
                *gk += w * (ak - tk);
            }
        }
    }
    grad
}

fn with_fixed_plan(
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
    plan: &TransportPlan,
    cost: &CostMatrix,
) -> Result<RegularizerValueAndGrad, RepresentationError> {
    let value = ot::transport_cost(plan, cost)?;
    Ok(RegularizerValueAndGrad {
        value,
        grad_wrt_student: grad_with_cost(student, teacher, plan.entries(), cost.entries()),
        plan_used: None,
    })
}

/// Optimal-transport regularizer: the minimum of `<P, M>` over couplings with
/// uniform marginals, solved with `settings`, and its fixed-plan gradient.
pub fn omega_p(
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
    settings: &SolverSettings,
) -> Result<RegularizerValueAndGrad, RepresentationError> {
    let cost = cost_matrix(student, teacher)?;
    let mu = DiscreteMeasure::uniform(student.neurons());
    let nu = DiscreteMeasure::uniform(teacher.neurons());
    let report = ot::solve(&cost, &mu, &nu, settings)?;
    let mut out = with_fixed_plan(student, teacher, &report.plan, &cost)?;
    out.plan_used = Some(report.plan);
    Ok(out)
}

/// `<I/d, M>`: the mean distance between same-index neurons.
pub fn omega_i(
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
) -> Result<RegularizerValueAndGrad, RepresentationError> {
    if student.neurons() != teacher.neurons() {
        return Err(RepresentationError::WidthMismatch {
            student: student.neurons(),
            teacher: teacher.neurons(),
        });
    }
    let cost = cost_matrix(student, teacher)?;
    with_fixed_plan(
        student,
        teacher,
        &TransportPlan::scaled_identity(student.neurons()),
        &cost,
    )
}

/// `<1/(d d'), M>`: the mean of all pairwise distances.
pub fn omega_u(
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
) -> Result<RegularizerValueAndGrad, RepresentationError> {
    let cost = cost_matrix(student, teacher)?;
    let plan = TransportPlan::independent(
        &DiscreteMeasure::uniform(student.neurons()),
        &DiscreteMeasure::uniform(teacher.neurons()),
    );
    with_fixed_plan(student, teacher, &plan, &cost)
}

pub fn evaluate(
    kind: RegularizerKind,
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
    settings: &SolverSettings,
) -> Result<RegularizerValueAndGrad, RepresentationError> {
    match kind {
        RegularizerKind::OtPlan => omega_p(student, teacher, settings),
        RegularizerKind::Identity => omega_i(student, teacher),
        RegularizerKind::Uniform => omega_u(student, teacher),
    }
}

/// `<plan, M>` and its gradient for a caller-supplied coupling.
pub fn fixed_plan_value_and_grad(
    student: &ActivationMatrix,
    teacher: &ActivationMatrix,
    plan: &TransportPlan,
) -> Result<RegularizerValueAndGrad, RepresentationError> {
    let cost = cost_matrix(student, teacher)?;
    if plan.shape() != cost.shape() {
        return Err(RepresentationError::ShapeMismatch(format!(
            "plan is {:?}, cost matrix is {:?}",
            plan.shape(),
            cost.shape()
        )));
    }
    with_fixed_plan(student, teacher, plan, &cost)
}

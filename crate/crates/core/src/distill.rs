//! Knowledge distillation: temperature-softened class probabilities and the
//! KL objective pulling a student's softened outputs toward a teacher's.
//!
//! The loss is the plain batch mean of `KL(teacher || student)`; it is not
//! multiplied by `tau^2`. The regularization weight absorbs the scale.

use ndarray::{Array2, ArrayView2, Axis};
use thiserror::Error;

/// Temperatures searched by default.
pub const TEMPERATURE_GRID: [f64; 3] = [4.0, 5.0, 10.0];

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("logits contain a non-finite value")]
    NonFinite,
    #[error("teacher logits are {teacher:?}, student logits are {student:?}")]
    ShapeMismatch {
        teacher: (usize, usize),
        student: (usize, usize),
    },
}

/// Class-by-example logits with their softmax temperature.
#[derive(Clone, Debug)]
pub struct TemperedLogits {
    logits: Array2<f64>,
    temperature: f64,
}

impl TemperedLogits {
    pub fn new(logits: Array2<f64>, temperature: f64) -> Result<Self, DistillError> {
        check_temperature(temperature)?;
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(DistillError::NonFinite);
        }
        Ok(Self {
            logits,
            temperature,
        })
    }

    pub fn probabilities(&self) -> Array2<f64> {
        softmax_columns(self.logits.view(), self.temperature)
    }
}

fn check_temperature(tau: f64) -> Result<(), DistillError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(DistillError::Temperature(tau));
    }
    Ok(())
}

fn softmax_columns(logits: ArrayView2<'_, f64>, tau: f64) -> Array2<f64> {
    let mut out = logits.mapv(|z| z / tau);
    for mut col in out.axis_iter_mut(Axis(1)) {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|z| (z - max).exp());
        let total = col.sum();
        col.mapv_inplace(|e| e / total);
    }
    out
}

/// Column-wise `softmax(logits / tau)`.
pub fn soften(logits: ArrayView2<'_, f64>, tau: f64) -> Result<Array2<f64>, DistillError> {
    check_temperature(tau)?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(DistillError::NonFinite);
    }
    Ok(softmax_columns(logits, tau))
}

/// Mean over examples of `KL(soften(teacher) || soften(student))` and its
/// gradient with respect to the student logits.
pub fn kd_loss_and_grad(
    teacher_logits: ArrayView2<'_, f64>,
    student_logits: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>), DistillError> {
    if teacher_logits.dim() != student_logits.dim() {
        return Err(DistillError::ShapeMismatch {
            teacher: teacher_logits.dim(),
            student: student_logits.dim(),
        });
    }
    let p = soften(teacher_logits, tau)?;
    let q = soften(student_logits, tau)?;
    let n = p.ncols() as f64;
    let mut loss = 0.0;
    for (pk, qk) in p.iter().zip(q.iter()) {
        if *pk > 0.0 {
            loss += pk * (pk.ln() - qk.ln());
        }
    }
    // d KL / d s_k = (q_k - p_k) / tau for each example.
    let grad = (&q - &p) / (tau * n);
    Ok((loss / n, grad))
}

//! Transport diagnostics: how many neurons keep their own index, measured by
//! the trace of the optimal coupling between two versions of a layer.
//!
//! Two modes are provided. [`depth_trace_profile`] solves exact transport
//! per layer on an evaluation set after training; [`training_trace_log`]
//! reads back the couplings already solved during training.

use ndarray::ArrayView2;
use serde::Serialize;
use thiserror::Error;

use crate::harness::TraceRecord;
use crate::nn::{self, ModelError, ModelState};
use crate::ot::{plan_trace_ratio, solve_exact, DiscreteMeasure, OtError};
use crate::representation::{cost_matrix, RepresentationError};

/// Default evaluation-set size for depth profiles.
pub const DEFAULT_EVAL_SIZE: usize = 1000;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Representation(#[from] RepresentationError),
    #[error(transparent)]
    Solver(#[from] OtError),
}

/// One point of a trace series, indexed by layer or by iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub index: usize,
    pub trace_ratio: f64,
    pub batch_size: usize,
}

/// Row of the trace CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub run_id: String,
    pub task: String,
    pub layer_or_iteration: usize,
    pub trace_ratio: f64,
    pub batch_size: usize,
}

pub fn rows(run_id: &str, task: &str, points: &[TracePoint]) -> Vec<TraceRow> {
    points
        .iter()
        .map(|p| TraceRow {
            run_id: run_id.to_string(),
            task: task.to_string(),
            layer_or_iteration: p.index,
            trace_ratio: p.trace_ratio,
            batch_size: p.batch_size,
        })
        .collect()
}

/// For every layer, the trace ratio of the exact optimal coupling between the
/// layer's neurons after and before, measured on `eval_inputs` (features by
/// examples) with uniform marginals.
pub fn depth_trace_profile(
    before: &ModelState,
    after: &ModelState,
    eval_inputs: ArrayView2<'_, f64>,
) -> Result<Vec<TracePoint>, AnalysisError> {
    if before.specs() != after.specs() {
        return Err(AnalysisError::Architecture(
            "before and after models have different layer specs".into(),
        ));
    }
    let tb = nn::forward(before, eval_inputs)?;
    let ta = nn::forward(after, eval_inputs)?;
    let n = eval_inputs.ncols();
    (0..tb.depth())
        .map(|l| {
            let m = cost_matrix(&ta.layer(l)?, &tb.layer(l)?)?;
            let u = DiscreteMeasure::uniform(m.shape().0);
            let plan = solve_exact(&m, &u, &u)?.plan;
            Ok(TracePoint {
                index: l,
                trace_ratio: plan_trace_ratio(&plan)?,
                batch_size: n,
            })
        })
        .collect()
}

/// The in-training series of one layer for one seed, ordered by iteration.
pub fn training_trace_log(records: &[TraceRecord], seed: u64, layer: usize) -> Vec<TracePoint> {
    let mut points: Vec<TracePoint> = records
        .iter()
        .filter(|r| r.seed == seed && r.layer == layer)
        .map(|r| TracePoint {
            index: r.iteration,
            trace_ratio: r.trace_ratio,
            batch_size: r.batch_size,
        })
        .collect();
    points.sort_by_key(|p| p.index);
    points
}

/// Whether a depth profile never rises by more than `slack` from one layer to
/// the next. A soft diagnostic, not an invariant.
pub fn is_nonincreasing(profile: &[TracePoint], slack: f64) -> bool {
    profile
        .windows(2)
        .all(|w| w[1].trace_ratio <= w[0].trace_ratio + slack)
}

/// Summary of consecutive points for plotting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bin {
    pub start: usize,
    pub end: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

/// Groups an index-ordered series into bins `width` indices wide.
pub fn bin_series(points: &[TracePoint], width: usize) -> Vec<Bin> {
    let width = width.max(1);
    let mut bins: Vec<Bin> = Vec::new();
    for p in points {
        let start = p.index / width * width;
        match bins.last_mut() {
            Some(b) if b.start == start => {
                b.mean += p.trace_ratio;
                b.min = b.min.min(p.trace_ratio);
                b.max = b.max.max(p.trace_ratio);
                b.count += 1;
            }
            _ => bins.push(Bin {
                start,
                end: start + width - 1,
                mean: p.trace_ratio,
                min: p.trace_ratio,
                max: p.trace_ratio,
                count: 1,
            }),
        }
    }
    for b in &mut bins {
        b.mean /= b.count as f64;
    }
    bins
}

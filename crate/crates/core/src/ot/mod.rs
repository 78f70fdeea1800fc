//! Discrete optimal transport between two weighted sets of points.
//!
//! All solvers take a dense [`CostMatrix`] and two [`DiscreteMeasure`]s and
//! return a [`SolveReport`] whose plan lies in the transport polytope
//! `{P >= 0 : P 1 = mu, P^T 1 = nu}`.

mod exact;
mod ipot;
mod sinkhorn;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use exact::solve_exact;
pub use ipot::{solve_ipot, solve_ipot_with_history};
pub use sinkhorn::solve_sinkhorn;

/// Tolerance on the total mass of a [`DiscreteMeasure`].
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure(Array1<f64>);

impl DiscreteMeasure {
    pub fn new(weights: Array1<f64>) -> Result<Self, OtError> {
        if weights.is_empty() {
            return Err(OtError::InvalidInput("measure has no atoms".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(OtError::InvalidInput(format!(
                "measure weight {w} is negative or not finite"
            )));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(OtError::InvalidInput(format!(
                "measure weights sum to {total}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    /// Rescales arbitrary nonnegative weights to unit mass.
    pub fn normalized(weights: Array1<f64>) -> Result<Self, OtError> {
        let total = weights.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(OtError::InvalidInput(format!(
                "cannot normalize weights with total {total}"
            )));
        }
        Self::new(weights / total)
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform measure needs at least one atom");
        Self(Array1::from_elem(k, 1.0 / k as f64))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }
}

/// Dense matrix of nonnegative, finite transport costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self, OtError> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(OtError::InvalidInput("cost matrix is empty".into()));
        }
        for ((i, j), c) in entries.indexed_iter() {
            if !c.is_finite() {
                return Err(OtError::InvalidInput(format!(
                    "cost entry ({i}, {j}) is not finite"
                )));
            }
            if *c < 0.0 {
                return Err(OtError::InvalidInput(format!(
                    "cost entry ({i}, {j}) = {c} is negative"
                )));
            }
        }
        Ok(Self(entries))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    /// Returns `c * M`.
    pub fn scaled(&self, c: f64) -> Result<Self, OtError> {
        Self::new(&self.0 * c)
    }
}

/// A coupling matrix. Feasibility is checked by [`TransportPlan::marginal_violation`],
/// not at construction, since iterative solvers produce near-feasible plans.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan(Array2<f64>);

impl TransportPlan {
    pub fn new(entries: Array2<f64>) -> Result<Self, OtError> {
        if let Some(p) = entries.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(OtError::InvalidInput(format!(
                "plan entry {p} is negative or not finite"
            )));
        }
        Ok(Self(entries))
    }

    /// `mu nu^T`.
    pub fn independent(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Self {
        let (a, b) = (mu.weights(), nu.weights());
        Self(Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j]))
    }

    /// `I_d / d`.
    pub fn scaled_identity(d: usize) -> Self {
        Self(Array2::eye(d) / d as f64)
    }

    /// Scaled permutation matrix sending row `i` to column `perm[i]`.
    pub fn scaled_permutation(perm: &[usize]) -> Self {
        let d = perm.len();
        let mut p = Array2::zeros((d, d));
        for (i, &j) in perm.iter().enumerate() {
            p[[i, j]] = 1.0 / d as f64;
        }
        Self(p)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// L1 distance of the row and column sums from `mu` and `nu`.
    pub fn marginal_violation(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        marginal_violation(self.0.view(), mu.weights(), nu.weights())
    }

    /// Largest per-row or per-column absolute deviation from the marginals.
    pub fn max_marginal_deviation(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        let rows = self.0.sum_axis(ndarray::Axis(1));
        let cols = self.0.sum_axis(ndarray::Axis(0));
        let r = rows
            .iter()
            .zip(mu.weights())
            .map(|(s, w)| (s - w).abs())
            .fold(0.0, f64::max);
        let c = cols
            .iter()
            .zip(nu.weights())
            .map(|(s, w)| (s - w).abs())
            .fold(0.0, f64::max);
        r.max(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Sinkhorn,
    Ipot,
}

impl std::str::FromStr for Method {
    type Err = OtError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Method::Exact),
            "sinkhorn" => Ok(Method::Sinkhorn),
            "ipot" => Ok(Method::Ipot),
            other => Err(OtError::InvalidInput(format!(
                "unknown method `{other}` (expected exact, sinkhorn or ipot)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Exact => "exact",
            Method::Sinkhorn => "sinkhorn",
            Method::Ipot => "ipot",
        })
    }
}

/// Knobs for the iterative solvers. `outer_iterations` is the sweep budget
/// for Sinkhorn and the proximal-step budget for IPOT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub method: Method,
    pub entropic_epsilon: f64,
    pub ipot_beta: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub convergence_tolerance: f64,
    /// Run the scaling iterations on dual potentials instead of raw scaling
    /// vectors. Turning this off is only useful for comparisons.
    pub log_domain: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            method: Method::Ipot,
            entropic_epsilon: 0.05,
            ipot_beta: 0.05,
            inner_iterations: 5,
            outer_iterations: 5000,
            convergence_tolerance: 1e-8,
            log_domain: true,
        }
    }
}

impl SolverSettings {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OtError> {
        let positive = [
            ("entropic_epsilon", self.entropic_epsilon),
            ("ipot_beta", self.ipot_beta),
            ("convergence_tolerance", self.convergence_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(OtError::InvalidInput(format!(
                    "{name} must be a positive finite number, got {v}"
                )));
            }
        }
        if self.inner_iterations == 0 || self.outer_iterations == 0 {
            return Err(OtError::InvalidInput(
                "iteration budgets must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub plan: TransportPlan,
    /// `<plan, M>_F`, the unregularized cost of the returned plan.
    pub cost: f64,
    pub iterations_used: usize,
    /// L1 marginal violation of the last iterate, before the final rounding
    /// onto the transport polytope.
    pub final_marginal_violation: f64,
    pub converged: bool,
}

/// Dispatches on `settings.method`.
pub fn solve(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    settings: &SolverSettings,
) -> Result<SolveReport, OtError> {
    match settings.method {
        Method::Exact => solve_exact(cost, mu, nu),
        Method::Sinkhorn => solve_sinkhorn(cost, mu, nu, settings),
        Method::Ipot => solve_ipot(cost, mu, nu, settings),
    }
}

/// Frobenius product `sum_ij P_ij M_ij`.
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64, OtError> {
    if plan.shape() != cost.shape() {
        return Err(OtError::DimensionMismatch(format!(
            "plan is {:?} but cost matrix is {:?}",
            plan.shape(),
            cost.shape()
        )));
    }
    Ok(frobenius(plan.0.view(), cost.0.view()))
}

/// `tr(P)` relative to the total mass of `P`: the fraction of mass that stays
/// on its own index. Normalizing by the summed entries makes a diagonal plan
/// report exactly 1 even when `1/d` is not representable.
pub fn plan_trace_ratio(plan: &TransportPlan) -> Result<f64, OtError> {
    let (d, dp) = plan.shape();
    if d != dp {
        return Err(OtError::InvalidInput(format!(
            "trace ratio needs a square plan, got {d}x{dp}"
        )));
    }
    // Sequential sums in row-major order: for a diagonal plan both add the
    // same values in the same order.
    let total = plan.0.iter().fold(0.0, |acc, p| acc + p);
    if total <= 0.0 {
        return Err(OtError::InvalidInput("plan has no mass".into()));
    }
    let diag = plan.0.diag().iter().fold(0.0, |acc, p| acc + p);
    Ok(diag / total)
}

pub(crate) fn frobenius(p: ArrayView2<'_, f64>, m: ArrayView2<'_, f64>) -> f64 {
    p.iter().zip(m.iter()).map(|(a, b)| a * b).sum()
}

pub(crate) fn check_dims(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<(), OtError> {
    let (d, dp) = cost.shape();
    if d != mu.len() || dp != nu.len() {
        return Err(OtError::DimensionMismatch(format!(
            "cost matrix is {d}x{dp} but marginals have lengths {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    Ok(())
}

pub(crate) fn marginal_violation(
    plan: ArrayView2<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
) -> f64 {
    let rows = plan.sum_axis(ndarray::Axis(1));
    let cols = plan.sum_axis(ndarray::Axis(0));
    let r: f64 = rows.iter().zip(mu).map(|(s, w)| (s - w).abs()).sum();
    let c: f64 = cols.iter().zip(nu).map(|(s, w)| (s - w).abs()).sum();
    r + c
}

/// Moves a near-feasible nonnegative matrix onto the transport polytope:
/// rows and columns are first scaled down to fit under the marginals, then
/// the leftover mass is redistributed by a rank-one correction. The L1 change
/// is at most twice the input's marginal violation.
pub(crate) fn round_to_polytope(
    plan: &mut Array2<f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
) {
    let rows = plan.sum_axis(ndarray::Axis(1));
    for (i, mut row) in plan.rows_mut().into_iter().enumerate() {
        if rows[i] > mu[i] {
            row *= mu[i] / rows[i];
        }
    }
    let cols = plan.sum_axis(ndarray::Axis(0));
    for (j, mut col) in plan.columns_mut().into_iter().enumerate() {
        if cols[j] > nu[j] {
            col *= nu[j] / cols[j];
        }
    }
    let err_r: Array1<f64> = &mu - &plan.sum_axis(ndarray::Axis(1));
    let err_c: Array1<f64> = &nu - &plan.sum_axis(ndarray::Axis(0));
    let err_r = err_r.mapv(|e| e.max(0.0));
    let err_c = err_c.mapv(|e| e.max(0.0));
    let total = err_r.sum();
    if total > 0.0 {
        for ((i, j), p) in plan.indexed_iter_mut() {
            *p += err_r[i] * err_c[j] / total;
        }
    }
}

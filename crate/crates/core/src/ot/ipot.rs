//! Inexact proximal point transport (IPOT).
//!
//! Each outer step solves `min <P, M> + beta KL(P || P_t)` approximately with
//! `inner_iterations` Sinkhorn sweeps on the kernel `exp(-M / beta) * P_t`.
//! Unlike plain Sinkhorn, the iterates converge to an unregularized optimum.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use super::sinkhorn::{check_potentials, update_cols, update_rows};
use super::{
    check_dims, frobenius, marginal_violation, round_to_polytope, CostMatrix, DiscreteMeasure,
    OtError, SolveReport, SolverSettings, TransportPlan,
};

/// Outer steps between marginal checks.
const CHECK_EVERY: usize = 10;

pub fn solve_ipot(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    settings: &SolverSettings,
) -> Result<SolveReport, OtError> {
    run(cost, mu, nu, settings, None)
}

/// Like [`solve_ipot`], also returning `<P_t, M>` for every outer step `t`
/// (raw iterates, before rounding).
pub fn solve_ipot_with_history(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    settings: &SolverSettings,
) -> Result<(SolveReport, Vec<f64>), OtError> {
    let mut history = Vec::new();
    let report = run(cost, mu, nu, settings, Some(&mut history))?;
    Ok((report, history))
}

fn run(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    settings: &SolverSettings,
    history: Option<&mut Vec<f64>>,
) -> Result<SolveReport, OtError> {
    check_dims(cost, mu, nu)?;
    settings.validate()?;
    let (mut plan, iterations) = if settings.log_domain {
        ipot_log(cost.entries(), mu.weights(), nu.weights(), settings, history)?
    } else {
        ipot_scaling(cost.entries(), mu.weights(), nu.weights(), settings, history)?
    };
    let violation = marginal_violation(plan.view(), mu.weights(), nu.weights());
    round_to_polytope(&mut plan, mu.weights(), nu.weights());
    Ok(SolveReport {
        cost: frobenius(plan.view(), cost.entries()),
        plan: TransportPlan(plan),
        iterations_used: iterations,
        final_marginal_violation: violation,
        converged: violation <= settings.convergence_tolerance,
    })
}

fn ipot_log(
    m: ArrayView2<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    settings: &SolverSettings,
    mut history: Option<&mut Vec<f64>>,
) -> Result<(Array2<f64>, usize), OtError> {
    let (d, dp) = m.dim();
    let log_mu = mu.mapv(f64::ln);
    let log_nu = nu.mapv(f64::ln);
    let step = m.mapv(|c| c / settings.ipot_beta);
    let mut log_plan = Array2::<f64>::zeros((d, dp));
    let mut log_kernel = Array2::<f64>::zeros((d, dp));
    let mut a = Array1::<f64>::zeros(d);
    let mut b = Array1::<f64>::zeros(dp);
    let mut previous: Option<Array2<f64>> = None;
    let mut iterations = 0;
    for t in 0..settings.outer_iterations {
        iterations += 1;
        Zip::from(&mut log_kernel)
            .and(&log_plan)
            .and(&step)
            .for_each(|k, &lp, &s| *k = lp - s);
        for _ in 0..settings.inner_iterations {
            update_rows(log_kernel.view(), log_mu.view(), b.view(), &mut a);
            update_cols(log_kernel.view(), log_nu.view(), a.view(), &mut b);
        }
        check_potentials(&a, &b)?;
        Zip::indexed(&mut log_plan)
            .and(&log_kernel)
            .for_each(|(i, j), lp, &k| *lp = a[i] + k + b[j]);
        if let Some(h) = history.as_deref_mut() {
            h.push(
                log_plan
                    .iter()
                    .zip(m.iter())
                    .map(|(lp, c)| lp.exp() * c)
                    .sum(),
            );
        }
        let last = t + 1 == settings.outer_iterations;
        if (t + 1) % CHECK_EVERY == 0 && !last {
            let plan = log_plan.mapv(f64::exp);
            if settled(&plan, previous.as_ref(), mu, nu, settings.convergence_tolerance) {
                return Ok((plan, iterations));
            }
            previous = Some(plan);
        }
    }
    Ok((log_plan.mapv(f64::exp), iterations))
}

fn ipot_scaling(
    m: ArrayView2<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    settings: &SolverSettings,
    mut history: Option<&mut Vec<f64>>,
) -> Result<(Array2<f64>, usize), OtError> {
    let (d, dp) = m.dim();
    let gibbs = m.mapv(|c| (-c / settings.ipot_beta).exp());
    let mut plan = Array2::<f64>::ones((d, dp));
    let mut b = Array1::<f64>::from_elem(dp, 1.0 / dp as f64);
    let mut a = Array1::<f64>::ones(d);
    let mut previous: Option<Array2<f64>> = None;
    let mut iterations = 0;
    for t in 0..settings.outer_iterations {
        iterations += 1;
        let q = &gibbs * &plan;
        for _ in 0..settings.inner_iterations {
            a = &mu / &q.dot(&b);
            b = &nu / &q.t().dot(&a);
        }
        if a.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(OtError::Numerical(format!(
                "IPOT scaling vectors overflowed at beta {}; enable log-domain stabilization",
                settings.ipot_beta
            )));
        }
        plan = Array2::from_shape_fn((d, dp), |(i, j)| a[i] * q[[i, j]] * b[j]);
        if let Some(h) = history.as_deref_mut() {
            h.push(frobenius(plan.view(), m));
        }
        let last = t + 1 == settings.outer_iterations;
        if (t + 1) % CHECK_EVERY == 0 && !last {
            if settled(&plan, previous.as_ref(), mu, nu, settings.convergence_tolerance) {
                return Ok((plan, iterations));
            }
            previous = Some(plan.clone());
        }
    }
    Ok((plan, iterations))
}

/// Marginals met and the plan no longer moving between checks.
fn settled(
    plan: &Array2<f64>,
    previous: Option<&Array2<f64>>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    tol: f64,
) -> bool {
    let Some(prev) = previous else {
        return false;
    };
    if marginal_violation(plan.view(), mu, nu) > tol {
        return false;
    }
    let change: f64 = plan.iter().zip(prev.iter()).map(|(x, y)| (x - y).abs()).sum();
    change <= tol
}

//! Entropy-regularized transport by Sinkhorn-Knopp scaling.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::{
    check_dims, frobenius, marginal_violation, round_to_polytope, CostMatrix, DiscreteMeasure,
    OtError, SolveReport, SolverSettings, TransportPlan,
};

/// Solves `min <P, M> - eps H(P)` over couplings of `mu` and `nu`.
///
/// `settings.outer_iterations` bounds the number of row+column sweeps. The
/// reported cost is the unregularized `<P, M>` of the returned plan, which is
/// rounded onto the transport polytope after the last sweep.
pub fn solve_sinkhorn(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    settings: &SolverSettings,
) -> Result<SolveReport, OtError> {
    check_dims(cost, mu, nu)?;
    settings.validate()?;
    let (mut plan, iterations) = if settings.log_domain {
        sinkhorn_log(cost.entries(), mu.weights(), nu.weights(), settings)?
    } else {
        sinkhorn_scaling(cost.entries(), mu.weights(), nu.weights(), settings)?
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

fn sinkhorn_log(
    m: ArrayView2<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    settings: &SolverSettings,
) -> Result<(Array2<f64>, usize), OtError> {
    let target = settings.entropic_epsilon;
    let (d, dp) = m.dim();
    let log_mu = mu.mapv(f64::ln);
    let log_nu = nu.mapv(f64::ln);
    // Column potential in cost units, carried across the epsilon schedule.
    let mut pot_g = Array1::<f64>::zeros(dp);
    let mut f = Array1::<f64>::zeros(d);
    let mut g = Array1::<f64>::zeros(dp);
    let mut iterations = 0;
    let schedule = epsilon_schedule(m.iter().copied().fold(0.0, f64::max), target);
    let mut neg_m = m.mapv(|c| -c / target);
    for (stage, &eps) in schedule.iter().enumerate() {
        let last_stage = stage + 1 == schedule.len();
        let tol = if last_stage {
            settings.convergence_tolerance
        } else {
            settings.convergence_tolerance.max(1e-3)
        };
        neg_m = m.mapv(|c| -c / eps);
        g.assign(&pot_g.mapv(|x| x / eps));
        loop {
            if iterations >= settings.outer_iterations {
                return Ok((assemble(neg_m.view(), f.view(), g.view()), iterations));
            }
            iterations += 1;
            update_rows(neg_m.view(), log_mu.view(), g.view(), &mut f);
            update_cols(neg_m.view(), log_nu.view(), f.view(), &mut g);
            check_potentials(&f, &g)?;
            if row_violation(neg_m.view(), mu, f.view(), g.view()) <= tol {
                break;
            }
        }
        pot_g = g.mapv(|x| x * eps);
    }
    Ok((assemble(neg_m.view(), f.view(), g.view()), iterations))
}

/// Geometric epsilon annealing from the cost scale down to `target`, so the
/// final sweeps start from well-conditioned potentials.
fn epsilon_schedule(max_cost: f64, target: f64) -> Vec<f64> {
    let mut eps = max_cost.max(target);
    let mut out = Vec::new();
    while eps > target {
        out.push(eps);
        eps *= 0.5;
    }
    out.push(target);
    out
}

fn sinkhorn_scaling(
    m: ArrayView2<'_, f64>,
    mu: ArrayView1<'_, f64>,
    nu: ArrayView1<'_, f64>,
    settings: &SolverSettings,
) -> Result<(Array2<f64>, usize), OtError> {
    let eps = settings.entropic_epsilon;
    let kernel = m.mapv(|c| (-c / eps).exp());
    let mut u = Array1::<f64>::ones(m.nrows());
    let mut v = Array1::<f64>::ones(m.ncols());
    let mut iterations = 0;
    for _ in 0..settings.outer_iterations {
        iterations += 1;
        u = &mu / &kernel.dot(&v);
        v = &nu / &kernel.t().dot(&u);
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(OtError::Numerical(format!(
                "Sinkhorn scaling vectors overflowed at epsilon {eps}; \
                 enable log-domain stabilization"
            )));
        }
        let rows = kernel.dot(&v) * &u;
        let viol: f64 = rows.iter().zip(mu).map(|(r, w)| (r - w).abs()).sum();
        if viol <= settings.convergence_tolerance {
            break;
        }
    }
    let plan = Array2::from_shape_fn(kernel.dim(), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
    Ok((plan, iterations))
}

/// Numerically stable `log(sum(exp(x)))`; all-`-inf` input gives `-inf`.
pub(super) fn log_sum_exp<I: Iterator<Item = f64> + Clone>(xs: I) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `f_i = log mu_i - LSE_j(K_ij + g_j)` with `K` a log-kernel.
pub(super) fn update_rows(
    log_kernel: ArrayView2<'_, f64>,
    log_mu: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
    f: &mut Array1<f64>,
) {
    for (i, row) in log_kernel.rows().into_iter().enumerate() {
        let lse = log_sum_exp(row.iter().zip(g.iter()).map(|(k, gj)| k + gj));
        f[i] = if log_mu[i] == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            log_mu[i] - lse
        };
    }
}

/// `g_j = log nu_j - LSE_i(K_ij + f_i)`.
pub(super) fn update_cols(
    log_kernel: ArrayView2<'_, f64>,
    log_nu: ArrayView1<'_, f64>,
    f: ArrayView1<'_, f64>,
    g: &mut Array1<f64>,
) {
    for (j, col) in log_kernel.columns().into_iter().enumerate() {
        let lse = log_sum_exp(col.iter().zip(f.iter()).map(|(k, fi)| k + fi));
        g[j] = if log_nu[j] == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            log_nu[j] - lse
        };
    }
}

pub(super) fn row_violation(
    log_kernel: ArrayView2<'_, f64>,
    mu: ArrayView1<'_, f64>,
    f: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
) -> f64 {
    log_kernel
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let s = if f[i] == f64::NEG_INFINITY {
                0.0
            } else {
                (f[i] + log_sum_exp(row.iter().zip(g.iter()).map(|(k, gj)| k + gj))).exp()
            };
            (s - mu[i]).abs()
        })
        .sum()
}

pub(super) fn assemble(
    log_kernel: ArrayView2<'_, f64>,
    f: ArrayView1<'_, f64>,
    g: ArrayView1<'_, f64>,
) -> Array2<f64> {
    Array2::from_shape_fn(log_kernel.dim(), |(i, j)| {
        (f[i] + log_kernel[[i, j]] + g[j]).exp()
    })
}

pub(super) fn check_potentials(f: &Array1<f64>, g: &Array1<f64>) -> Result<(), OtError> {
    if f.iter().chain(g.iter()).any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(OtError::Numerical(
            "dual potentials became non-finite during scaling iterations".into(),
        ));
    }
    Ok(())
}

//! Quick built-in oracle and invariant checks, runnable from an installed
//! binary.

use ndarray::Array2;
use neuron_ot::distill::{kd_loss_and_grad, soften};
use neuron_ot::nn::{checkpoint_from_str, checkpoint_to_string, loss_and_grad, mlp_specs, ModelState, RegTerm};
use neuron_ot::representation::{omega_i, omega_p, ActivationMatrix, RegularizerKind};
use neuron_ot::{solve_exact, solve_ipot, solve_sinkhorn, CostMatrix, DiscreteMeasure, Method, SolverSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = (&'static str, fn() -> Result<(), String>);

const CHECKS: &[Check] = &[
    ("exact and ipot match brute-force assignment", assignment_oracle),
    ("sinkhorn with huge epsilon is the independent coupling", entropic_limit),
    ("omega_p ignores neuron order, omega_i does not", permutation_invariance),
    ("objective gradient matches finite differences", gradient_check),
    ("softened logits match direct evaluation", kd_values),
    ("checkpoint round-trips bit-exactly", checkpoint_round_trip),
];

/// Runs every check, printing one line each. Returns the number of failures.
pub fn run(quiet: bool) -> usize {
    let mut failures = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => {
                if !quiet {
                    println!("ok    {name}");
                }
            }
            Err(why) => {
                failures += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if !quiet {
        println!("{} checks, {failures} failed", CHECKS.len());
    }
    failures
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn brute_force(m: &Array2<f64>) -> f64 {
    fn go(perm: &mut Vec<usize>, k: usize, m: &Array2<f64>, best: &mut f64) {
        if k == perm.len() {
            *best = best.min(perm.iter().enumerate().map(|(i, &j)| m[[i, j]]).sum());
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            go(perm, k + 1, m, best);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..m.nrows()).collect();
    let mut best = f64::INFINITY;
    go(&mut perm, 0, m, &mut best);
    best / m.nrows() as f64
}

fn assignment_oracle() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let n = rng.random_range(2..=6);
        let m = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let oracle = brute_force(&m);
        let cost = CostMatrix::new(m).map_err(|e| e.to_string())?;
        let u = DiscreteMeasure::uniform(n);
        let exact = solve_exact(&cost, &u, &u).map_err(|e| e.to_string())?.cost;
        let ipot = solve_ipot(&cost, &u, &u, &SolverSettings::default())
            .map_err(|e| e.to_string())?
            .cost;
        for (name, v) in [("exact", exact), ("ipot", ipot)] {
            ensure((v - oracle).abs() / oracle < 1e-5, || format!("{name} {v} vs oracle {oracle}"))?;
        }
    }
    Ok(())
}

fn entropic_limit() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cost = CostMatrix::new(Array2::from_shape_fn((4, 4), |_| rng.random::<f64>())).map_err(|e| e.to_string())?;
    let u = DiscreteMeasure::uniform(4);
    let settings = SolverSettings {
        method: Method::Sinkhorn,
        entropic_epsilon: 1e6 * cost.max(),
        ..SolverSettings::default()
    };
    let plan = solve_sinkhorn(&cost, &u, &u, &settings).map_err(|e| e.to_string())?.plan;
    let dev = plan.entries().iter().map(|p| (p - 1.0 / 16.0).abs()).fold(0.0, f64::max);
    ensure(dev < 1e-3, || format!("max deviation {dev}"))
}

fn random_act(rng: &mut ChaCha8Rng, d: usize, n: usize) -> ActivationMatrix {
    ActivationMatrix::new(Array2::from_shape_fn((d, n), |_| rng.random_range(-1.0..1.0))).expect("finite")
}

fn permutation_invariance() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_act(&mut rng, 8, 16);
    let t = random_act(&mut rng, 8, 16);
    let moved = a.permute_neurons(&[3, 1, 4, 0, 7, 5, 2, 6]);
    let s = SolverSettings::default();
    let p0 = omega_p(&a, &t, &s).map_err(|e| e.to_string())?.value;
    let p1 = omega_p(&moved, &t, &s).map_err(|e| e.to_string())?.value;
    ensure((p0 - p1).abs() < 1e-6, || format!("omega_p {p0} vs {p1}"))?;
    let i0 = omega_i(&a, &t).map_err(|e| e.to_string())?.value;
    let i1 = omega_i(&moved, &t).map_err(|e| e.to_string())?.value;
    ensure(i0 != i1, || "omega_i did not change".into())
}

fn gradient_check() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = ModelState::new(mlp_specs(3, &[5, 4], 3), 4).map_err(|e| e.to_string())?;
    let x = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
    let y: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let teacher = random_act(&mut rng, 4, 6);
    let solver = SolverSettings::default();
    let terms = [RegTerm::Representation {
        layer: 1,
        kind: RegularizerKind::Identity,
        alpha: 0.5,
        teacher: &teacher,
        solver: &solver,
    }];
    let grads = loss_and_grad(&model, x.view(), &y, &terms).map_err(|e| e.to_string())?.grads;
    let h = 1e-5;
    for (idx, g) in grads.iter().enumerate() {
        let eval = |delta: f64| {
            let mut m = model.clone();
            *m.params.iter_mut().nth(idx).expect("index in range") += delta;
            loss_and_grad(&m, x.view(), &y, &terms).map(|o| o.objective)
        };
        let fd = (eval(h).map_err(|e| e.to_string())? - eval(-h).map_err(|e| e.to_string())?) / (2.0 * h);
        let scale = fd.abs().max(g.abs());
        if scale > 1e-7 {
            ensure((fd - g).abs() / scale < 1e-4, || format!("parameter {idx}: {g} vs {fd}"))?;
        }
    }
    Ok(())
}

fn kd_values() -> Result<(), String> {
    let p = soften(ndarray::array![[2.0], [0.0]].view(), 2.0).map_err(|e| e.to_string())?;
    ensure((p[[0, 0]] - 0.731059).abs() < 1e-6 && (p[[1, 0]] - 0.268941).abs() < 1e-6, || {
        format!("got {p:?}")
    })?;
    let z = ndarray::array![[1.0, 0.5], [-2.0, 3.0]];
    let (kl, _) = kd_loss_and_grad(z.view(), z.view(), 4.0).map_err(|e| e.to_string())?;
    ensure(kl.abs() <= 1e-12, || format!("KL at coincidence {kl}"))
}

fn checkpoint_round_trip() -> Result<(), String> {
    let model = ModelState::new(mlp_specs(4, &[6], 3), 99).map_err(|e| e.to_string())?;
    let back = checkpoint_from_str(&checkpoint_to_string(&model)).map_err(|e| e.to_string())?;
    ensure(back.params == model.params, || "parameters changed".into())
}

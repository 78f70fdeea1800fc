//! End-to-end acceptance checks. Each criterion prints one pass/fail line;
//! run with `--nocapture` to see them.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{array, Array1, Array2};
use neuron_ot::analysis::depth_trace_profile;
use neuron_ot::distill::{kd_loss_and_grad, soften};
use neuron_ot::harness::{
    ArchConfig, Candidate, ExperimentConfig, Generator, Lab, Regularizer, RegimeKind, RunResult,
    ShiftKind, TaskSpec, TrainConfig,
};
use neuron_ot::nn::{loss_and_grad, mlp_specs, ModelState, RegTerm};
use neuron_ot::representation::{omega_i, omega_p, omega_u, ActivationMatrix, RegularizerKind};
use neuron_ot::{solve_exact, solve_ipot, solve_sinkhorn, CostMatrix, DiscreteMeasure, Method, SolverSettings};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Minimum over all permutations of the mean assigned cost.
fn assignment_oracle(m: &Array2<f64>) -> f64 {
    fn go(perm: &mut [usize], k: usize, m: &Array2<f64>, best: &mut f64) {
        if k == perm.len() {
            let c: f64 = perm.iter().enumerate().map(|(i, &j)| m[[i, j]]).sum();
            *best = best.min(c);
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

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(2..=6);
        let m = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        let oracle = assignment_oracle(&m);
        let cost = CostMatrix::new(m).map_err(|e| e.to_string())?;
        let u = DiscreteMeasure::uniform(n);
        let exact = solve_exact(&cost, &u, &u).map_err(|e| e.to_string())?.cost;
        let ipot = solve_ipot(&cost, &u, &u, &SolverSettings::default())
            .map_err(|e| e.to_string())?
            .cost;
        worst = worst.max(rel(exact, oracle)).max(rel(ipot, oracle));
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-5, || format!("worst relative error {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("worst relative error {worst:.1e}, {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

fn rational_measure(rng: &mut ChaCha8Rng, k: usize) -> DiscreteMeasure {
    let w: Array1<f64> = (0..k).map(|_| rng.random_range(1..=9) as f64).collect();
    DiscreteMeasure::normalized(w).expect("positive weights")
}

fn rectangular_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(1..=8);
        let dp = rng.random_range(1..=8);
        let cost = CostMatrix::new(Array2::from_shape_fn((d, dp), |_| rng.random::<f64>())).map_err(|e| e.to_string())?;
        let mu = rational_measure(&mut rng, d);
        let nu = rational_measure(&mut rng, dp);
        let exact = solve_exact(&cost, &mu, &nu).map_err(|e| e.to_string())?.cost;
        let ipot = solve_ipot(&cost, &mu, &nu, &SolverSettings::default())
            .map_err(|e| e.to_string())?
            .cost;
        worst = worst.max(rel(ipot, exact));
    }
    ensure(worst < 1e-5, || format!("worst relative error {worst:e}"))?;
    Ok(format!("worst relative error {worst:.1e}"))
}

fn entropic_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let cost = CostMatrix::new(Array2::from_shape_fn((4, 4), |_| rng.random::<f64>())).map_err(|e| e.to_string())?;
        let u = DiscreteMeasure::uniform(4);
        let settings = SolverSettings {
            method: Method::Sinkhorn,
            entropic_epsilon: 1e6 * cost.max(),
            ..SolverSettings::default()
        };
        let plan = solve_sinkhorn(&cost, &u, &u, &settings).map_err(|e| e.to_string())?.plan;
        let dev = plan.entries().iter().map(|p| (p - 1.0 / 16.0).abs()).fold(0.0, f64::max);
        worst = worst.max(dev);
    }
    ensure(worst < 1e-3, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation from independent coupling {worst:.1e}"))
}

fn activations(rng: &mut ChaCha8Rng, d: usize, n: usize) -> ActivationMatrix {
    ActivationMatrix::new(Array2::from_shape_fn((d, n), |_| rng.random_range(-1.0..1.0))).expect("finite")
}

fn nontrivial_permutation(rng: &mut ChaCha8Rng, d: usize) -> Vec<usize> {
    let id: Vec<usize> = (0..d).collect();
    loop {
        let mut p = id.clone();
        p.shuffle(rng);
        if p != id {
            return p;
        }
    }
}

fn permutation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let settings = SolverSettings::default();
    let mut worst: f64 = 0.0;
    let mut changed = 0;
    for _ in 0..20 {
        let d = rng.random_range(2..=16);
        let n = rng.random_range(1..=32);
        let a = activations(&mut rng, d, n);
        let t = activations(&mut rng, d, n);
        let moved = a.permute_neurons(&nontrivial_permutation(&mut rng, d));
        let p0 = omega_p(&a, &t, &settings).map_err(|e| e.to_string())?.value;
        let p1 = omega_p(&moved, &t, &settings).map_err(|e| e.to_string())?.value;
        worst = worst.max((p0 - p1).abs());
        let i0 = omega_i(&a, &t).map_err(|e| e.to_string())?.value;
        let i1 = omega_i(&moved, &t).map_err(|e| e.to_string())?.value;
        if i0 != i1 {
            changed += 1;
        }
    }
    ensure(worst < 1e-6, || format!("omega_p moved by {worst:e}"))?;
    ensure(changed >= 18, || format!("omega_i changed on only {changed}/20"))?;
    Ok(format!("omega_p drift {worst:.1e}, omega_i changed on {changed}/20"))
}

fn coupling_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let settings = SolverSettings::default();
    let mut margin_i = f64::INFINITY;
    let mut margin_u = f64::INFINITY;
    for k in 0..50 {
        let d = rng.random_range(1..=12);
        let dp = if k % 2 == 0 { d } else { rng.random_range(1..=12) };
        let n = rng.random_range(1..=24);
        let a = activations(&mut rng, d, n);
        let t = activations(&mut rng, dp, n);
        let p = omega_p(&a, &t, &settings).map_err(|e| e.to_string())?.value;
        let u = omega_u(&a, &t).map_err(|e| e.to_string())?.value;
        ensure(p <= u + 1e-8, || format!("omega_p {p} > omega_u {u} at {d}x{dp}"))?;
        margin_u = margin_u.min(u - p);
        if d == dp {
            let i = omega_i(&a, &t).map_err(|e| e.to_string())?.value;
            ensure(p <= i + 1e-8, || format!("omega_p {p} > omega_i {i} at {d}x{d}"))?;
            margin_i = margin_i.min(i - p);
        }
    }
    Ok(format!("smallest margins: omega_i {margin_i:.1e}, omega_u {margin_u:.1e}"))
}

struct Tiny {
    model: ModelState,
    x: Array2<f64>,
    y: Vec<usize>,
}

fn tiny(seed: u64) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelState::new(mlp_specs(5, &[8, 6], 4), seed).expect("valid specs");
    model.params.iter_mut().for_each(|w| *w += rng.random_range(-0.2..0.2));
    let x = Array2::from_shape_fn((5, 8), |_| rng.random_range(-1.0..1.0));
    let y = (0..8).map(|_| rng.random_range(0..4)).collect();
    Tiny { model, x, y }
}

/// Worst relative disagreement between analytic and central-difference
/// gradients of the objective.
fn fd_error(t: &Tiny, terms: &[RegTerm<'_>]) -> Result<f64, String> {
    let out = loss_and_grad(&t.model, t.x.view(), &t.y, terms).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (idx, g) in out.grads.iter().enumerate() {
        let eval = |delta: f64| -> Result<f64, String> {
            let mut m = t.model.clone();
            *m.params.iter_mut().nth(idx).expect("index in range") += delta;
            loss_and_grad(&m, t.x.view(), &t.y, terms)
                .map(|o| o.objective)
                .map_err(|e| e.to_string())
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        let scale = fd.abs().max(g.abs());
        if scale > 1e-7 {
            worst = worst.max((fd - g).abs() / scale);
        }
    }
    Ok(worst)
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let t = tiny(16);
    let solver = SolverSettings::with_method(Method::Exact);
    let teacher0 = activations(&mut rng, 8, 8);
    let teacher1 = activations(&mut rng, 6, 8);
    let wide = activations(&mut rng, 7, 8);
    let teacher_logits = Array2::from_shape_fn((4, 8), |_| rng.random_range(-2.0..2.0));

    // Plan solved at the current point, then frozen for the differences.
    let trace = neuron_ot::nn::forward(&t.model, t.x.view()).map_err(|e| e.to_string())?;
    let student0 = trace.layer(0).map_err(|e| e.to_string())?;
    let plan = omega_p(&student0, &teacher0, &solver)
        .map_err(|e| e.to_string())?
        .plan_used
        .ok_or("no plan")?;

    let cases: Vec<(&str, Vec<RegTerm<'_>>)> = vec![
        (
            "frozen-plan omega_p",
            vec![RegTerm::FixedCoupling { layer: 0, alpha: 0.7, teacher: &teacher0, plan: &plan }],
        ),
        (
            "omega_i",
            vec![RegTerm::Representation {
                layer: 1,
                kind: RegularizerKind::Identity,
                alpha: 0.5,
                teacher: &teacher1,
                solver: &solver,
            }],
        ),
        (
            "omega_u",
            vec![RegTerm::Representation {
                layer: 1,
                kind: RegularizerKind::Uniform,
                alpha: 0.5,
                teacher: &wide,
                solver: &solver,
            }],
        ),
        (
            "omega_kd",
            vec![RegTerm::Distill { alpha: 0.8, temperature: 4.0, teacher_logits: teacher_logits.view() }],
        ),
        ("l2_sp", vec![RegTerm::L2Sp { alpha: 0.3 }]),
    ];
    let mut worst: f64 = 0.0;
    for (name, terms) in &cases {
        let e = fd_error(&t, terms)?;
        ensure(e < 1e-4, || format!("{name}: relative error {e:e}"))?;
        worst = worst.max(e);
    }

    // Student equal to the teacher: every cost entry on the diagonal is zero.
    let same = trace.layer(1).map_err(|e| e.to_string())?;
    let at_teacher = [RegTerm::Representation {
        layer: 1,
        kind: RegularizerKind::OtPlan,
        alpha: 1.0,
        teacher: &same,
        solver: &solver,
    }];
    let out = loss_and_grad(&t.model, t.x.view(), &t.y, &at_teacher).map_err(|e| e.to_string())?;
    ensure(out.grads.iter().all(|g| g.is_finite()), || "non-finite gradient at the teacher".into())?;
    Ok(format!("worst relative error {worst:.1e} over {} term sets, finite at M=0", cases.len()))
}

fn kd_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(2..=6);
        let n = rng.random_range(1..=5);
        let z = Array2::from_shape_fn((k, n), |_| rng.random_range(-5.0..5.0));
        let tau = rng.random_range(0.5..10.0);
        let (kl, _) = kd_loss_and_grad(z.view(), z.view(), tau).map_err(|e| e.to_string())?;
        ensure(kl.abs() <= 1e-12, || format!("KL at coincidence {kl:e}"))?;
        let p = soften(z.view(), tau).map_err(|e| e.to_string())?;
        let shifted = soften((&z + 3.25).view(), tau).map_err(|e| e.to_string())?;
        let scaled = soften((&z / tau).view(), 1.0).map_err(|e| e.to_string())?;
        for (a, b) in p.iter().zip(shifted.iter()).chain(p.iter().zip(scaled.iter())) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("identity error {worst:e}"))?;
    let p = soften(array![[2.0], [0.0]].view(), 2.0).map_err(|e| e.to_string())?;
    // Direct evaluation: e^1 / (e^1 + e^0).
    let top = 1f64.exp() / (1f64.exp() + 1.0);
    ensure((p[[0, 0]] - 0.731059).abs() < 1e-6 && (p[[1, 0]] - 0.268941).abs() < 1e-6, || format!("{p:?}"))?;
    ensure((p[[0, 0]] - top).abs() < 1e-15, || format!("{} vs {top}", p[[0, 0]]))?;
    Ok(format!("identities hold to {worst:.1e}, (2,0) at tau 2 -> ({:.6}, {:.6})", p[[0, 0]], p[[1, 0]]))
}

fn task(g: Generator, k: usize, n: usize, seed: u64, sample_seed: u64) -> TaskSpec {
    TaskSpec {
        samples_train: n,
        samples_test: 1000,
        sample_seed: Some(sample_seed),
        ..TaskSpec::new(g, k, seed)
    }
}

fn finetune_config(source: TaskSpec, target: TaskSpec, arms: Vec<Regularizer>) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: 1,
        regime: RegimeKind::Finetune,
        source: Some(source),
        target,
        teacher: ArchConfig { hidden: vec![64, 64] },
        student: None,
        teacher_train: TrainConfig::default(),
        train: TrainConfig::default(),
        arms,
        seeds: (0..10).collect(),
        selection_seeds: vec![100, 101, 102],
        pretrain_fraction: 0.0,
        init_student_from_teacher: false,
        fixed_alpha: None,
        fixed_tau: None,
    }
}

fn run_arms(cfg: ExperimentConfig) -> Result<Vec<RunResult>, String> {
    Lab::new(cfg).and_then(|mut lab| lab.run_all()).map_err(|e| e.to_string())
}

fn arm(results: &[RunResult], which: Regularizer) -> &RunResult {
    results.iter().find(|r| r.arm == which).expect("arm was run")
}

/// `a` is no worse than `b` by more than one pooled standard deviation.
fn non_inferior(a: &RunResult, b: &RunResult) -> Result<String, String> {
    let pooled = ((a.std * a.std + b.std * b.std) / 2.0).sqrt();
    let line = format!(
        "{} {:.4}±{:.4} vs {} {:.4}±{:.4}",
        a.arm.name(),
        a.mean,
        a.std,
        b.arm.name(),
        b.mean,
        b.std
    );
    ensure(a.mean >= b.mean - pooled, || format!("{line}: gap exceeds pooled std {pooled:.4}"))?;
    Ok(line)
}

fn directional_transfer() -> Outcome {
    let start = Instant::now();
    let g = Generator::RotatedMixture;
    // Source labels split each class by subcluster; the target keeps the
    // coarse classes, so the fine-grained source features still apply.
    let coarse = finetune_config(
        task(g, 6, 3000, 1, 100).with_shift(ShiftKind::LabelRefinement, 2.0),
        task(g, 6, 400, 1, 200),
        vec![Regularizer::None, Regularizer::OmegaP],
    );
    let transfer = run_arms(coarse)?;
    let zero = finetune_config(
        task(g, 6, 3000, 1, 100),
        task(g, 6, 400, 1, 200),
        vec![Regularizer::OmegaP, Regularizer::OmegaU],
    );
    let same = run_arms(zero)?;
    let first = non_inferior(arm(&transfer, Regularizer::OmegaP), arm(&transfer, Regularizer::None))?;
    let second = non_inferior(arm(&same, Regularizer::OmegaP), arm(&same, Regularizer::OmegaU))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!("{first}; zero shift {second}; {:.0} s", elapsed.as_secs_f64()))
}

fn directional_compression() -> Outcome {
    let cfg = ExperimentConfig {
        schema_version: 1,
        regime: RegimeKind::Compress,
        source: None,
        target: task(Generator::GaussianBlobs, 8, 1000, 3, 300),
        teacher: ArchConfig { hidden: vec![64, 64] },
        student: Some(ArchConfig { hidden: vec![32, 32] }),
        teacher_train: TrainConfig::default(),
        train: TrainConfig {
            alpha_grid: neuron_ot::harness::logspace(1e-3, 10.0, 5),
            ..TrainConfig::default()
        },
        arms: vec![Regularizer::None, Regularizer::OmegaP, Regularizer::OmegaKd],
        seeds: (0..10).collect(),
        selection_seeds: vec![100, 101, 102],
        pretrain_fraction: 0.0,
        init_student_from_teacher: false,
        fixed_alpha: None,
        fixed_tau: None,
    };
    let results = run_arms(cfg)?;
    let scratch = arm(&results, Regularizer::None);
    let p = non_inferior(arm(&results, Regularizer::OmegaP), scratch)?;
    let kd = non_inferior(arm(&results, Regularizer::OmegaKd), scratch)?;
    Ok(format!("{p}; {kd}"))
}

fn trace_diagnostics() -> Outcome {
    // Positive biases keep every ReLU alive, so no two neurons coincide.
    let mut before = ModelState::new(mlp_specs(6, &[8, 6], 4), 21).map_err(|e| e.to_string())?;
    for layer in &mut before.params.layers {
        layer.bias.fill(3.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = Array2::from_shape_fn((6, 200), |_| rng.random_range(-1.0..1.0));
    let same = depth_trace_profile(&before, &before, x.view()).map_err(|e| e.to_string())?;
    ensure(same.iter().all(|p| p.trace_ratio == 1.0), || format!("identity profile {same:?}"))?;
    let mut swapped = before.clone();
    swapped.permute_hidden(0, &[1, 0, 3, 2, 5, 4, 7, 6]).map_err(|e| e.to_string())?;
    let prof = depth_trace_profile(&before, &swapped, x.view()).map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = prof.iter().map(|p| p.trace_ratio).collect();
    ensure(ratios == [0.0, 1.0, 1.0], || format!("swap profile {ratios:?}"))?;

    let g = Generator::RotatedMixture;
    let mut cfg = finetune_config(
        task(g, 6, 3000, 1, 100),
        task(g, 6, 400, 1, 200).with_shift(ShiftKind::RotationAngle, 0.5),
        vec![Regularizer::OmegaP],
    );
    cfg.seeds = vec![0];
    let mut lab = Lab::new(cfg).map_err(|e| e.to_string())?;
    let run = lab
        .run_single(Regularizer::OmegaP, Candidate { alpha: 0.1, tau: None }, 0, None)
        .map_err(|e| e.to_string())?;
    let lowest = run.log.traces.iter().map(|t| t.trace_ratio).fold(f64::INFINITY, f64::min);
    ensure(lowest < 0.99, || format!("lowest in-training trace ratio {lowest}"))?;
    Ok(format!(
        "identity all 1.0, swap {ratios:?}, lowest in-training trace {lowest:.4} over {} samples",
        run.log.traces.len()
    ))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neuron-ot"))
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.arg("--quiet").output().expect("binary runs").status.code().unwrap_or(-1)
}

const TINY_EXPERIMENT: &str = r#"
schema_version = 1
regime = "finetune"
arms = ["none", "omega_p"]
seeds = [0, 1]
fixed_alpha = 0.1

[source]
generator = "rotated_mixture"
num_classes = 3
input_dim = 6
samples_train = 300
samples_test = 100
seed = 1

[target]
generator = "rotated_mixture"
num_classes = 3
input_dim = 6
samples_train = 100
samples_test = 100
seed = 1
shift = { kind = "rotation_angle", magnitude = 0.3 }

[teacher]
hidden = [16, 16]

[teacher_train]
iterations = 60
batch_size = 32

[train]
iterations = 40
batch_size = 16
trace_every = 5
"#;

fn cli_contract() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |name: &str| dir.path().join(name);
    let write = |name: &str, text: &str| std::fs::write(path(name), text).map_err(|e| e.to_string());
    write("cost.csv", "0.1,0.9,0.4\n0.7,0.2,0.5\n0.3,0.6,0.8\n")?;
    write("exp.toml", TINY_EXPERIMENT)?;
    write("bad-cost.csv", "0.1,0.9\n0.7,oops\n")?;
    write("ragged.csv", "0.1,0.9\n0.7\n")?;
    write("bad.toml", &TINY_EXPERIMENT.replace("fixed_alpha", "fixed_alfa"))?;
    write("starved.toml", "schema_version = 1\n[solver]\nmethod = \"ipot\"\nouter_iterations = 1\n")?;

    let read = |dir: &Path, name: &str| std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"));
    for (cmd, files) in [
        (vec!["solve", "--cost", "cost.csv"], vec!["plan.csv", "manifest.txt"]),
        (
            vec!["finetune", "--config", "exp.toml"],
            vec!["results.csv", "summary.csv", "traces.csv", "manifest.txt"],
        ),
    ] {
        let mut outputs = Vec::new();
        for run in ["a", "b"] {
            let out = path(&format!("{}-{run}", cmd[0]));
            let code = exit_code(bin().current_dir(dir.path()).args(&cmd).arg("--out").arg(&out));
            ensure(code == 0, || format!("{} exited with {code}", cmd[0]))?;
            outputs.push(files.iter().map(|f| read(&out, f)).collect::<Result<Vec<_>, _>>()?);
        }
        ensure(outputs[0] == outputs[1], || format!("{} outputs differ between runs", cmd[0]))?;
    }

    let expected = [
        (vec!["solve", "--cost", "bad-cost.csv"], 2),
        (vec!["solve", "--cost", "ragged.csv"], 2),
        (vec!["solve", "--cost", "missing.csv"], 4),
        (vec!["finetune", "--config", "bad.toml"], 2),
        (vec!["compress", "--config", "exp.toml"], 2),
        (vec!["solve", "--cost", "cost.csv", "--config", "starved.toml"], 3),
        (vec!["selftest"], 0),
    ];
    for (args, want) in &expected {
        let code = exit_code(bin().current_dir(dir.path()).args(args).arg("--out").arg(path("codes")));
        ensure(code == *want, || format!("`{}` exited with {code}, expected {want}", args.join(" ")))?;
    }
    ensure(path("codes").join("plan.csv").exists(), || "no partial plan after non-convergence".into())?;
    Ok(format!("2 commands byte-identical, {} exit codes as expected", expected.len()))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        ("oracle equivalence", oracle_equivalence),
        ("rectangular exactness", rectangular_exactness),
        ("entropic limit", entropic_limit),
        ("permutation invariance", permutation_invariance),
        ("feasible-coupling ordering", coupling_ordering),
        ("gradient correctness", gradient_correctness),
        ("distillation identities", kd_identities),
        ("directional transfer", directional_transfer),
        ("directional compression", directional_compression),
        ("trace diagnostics", trace_diagnostics),
        ("determinism and cli contract", cli_contract),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL {:>2} {name}: {why}", i + 1);
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

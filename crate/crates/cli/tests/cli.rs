use std::path::Path;
use std::process::{Command, Output};

const EXPERIMENT: &str = r#"
schema_version = 1
regime = "finetune"
arms = ["none", "omega_p"]
seeds = [0]
fixed_alpha = 0.1

[source]
generator = "gaussian_blobs"
num_classes = 3
input_dim = 5
samples_train = 200
samples_test = 80
seed = 2

[target]
generator = "gaussian_blobs"
num_classes = 3
input_dim = 5
samples_train = 80
samples_test = 80
seed = 2
shift = { kind = "rotation_angle", magnitude = 0.4 }

[teacher]
hidden = [12, 12]

[teacher_train]
iterations = 40
batch_size = 32

[train]
iterations = 20
batch_size = 16
trace_every = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuron-ot"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), EXPERIMENT).unwrap();
    dir
}

#[test]
fn teacher_checkpoint_feeds_finetune_and_analysis() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["train-teacher", "--config", "exp.toml", "--out", "teachers", "--quiet"]);
    let manifest = read(d.join("teachers/manifest.txt"));
    assert!(manifest.contains("command=train-teacher"));
    assert!(manifest.contains("files=teacher-seed0.json"));

    ok(
        d,
        &["finetune", "--config", "exp.toml", "--teacher", "teachers/teacher-seed0.json", "--out", "ft", "--quiet"],
    );
    let results = read(d.join("ft/results.csv"));
    assert!(results.starts_with("regime,arm,seed,alpha,tau,val_accuracy,test_accuracy\n"), "{results}");
    assert_eq!(results.lines().count(), 3);
    let summary = read(d.join("ft/summary.csv"));
    assert!(summary.starts_with("arm,mean,std,selected_alpha,selected_tau,runs\n"));
    let traces = read(d.join("ft/traces.csv"));
    assert!(traces.starts_with("run_id,task,layer_or_iteration,trace_ratio,batch_size\n"));
    assert!(traces.lines().nth(1).unwrap().starts_with("omega_p/seed0/layer"));
    let manifest = read(d.join("ft/manifest.txt"));
    for key in ["artifact=neuron-ot", "version=", "command=finetune", "config_sha256=", "seeds=0"] {
        assert!(manifest.contains(key), "{manifest}");
    }

    let teacher = "teachers/teacher-seed0.json";
    ok(d, &["analyze", "--config", "exp.toml", "--before", teacher, "--after", teacher, "--out", "an", "--quiet"]);
    let profile = read(d.join("an/depth_profile.csv"));
    let ratios: Vec<&str> = profile.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(ratios.len(), 3);

    ok(
        d,
        &["analyze", "--traces", "ft/traces.csv", "--plot-data", "--bin-width", "10", "--out", "plot", "--quiet"],
    );
    let plot = read(d.join("plot/plot_data.csv"));
    assert!(plot.starts_with("run_id,task,start,end,mean,min,max,count\n"));
    assert!(plot.lines().count() > 1);
}

#[test]
fn seed_and_alpha_flags_override_the_config() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["finetune", "--config", "exp.toml", "--seed", "7", "--alpha", "0.5", "--out", "o", "--quiet"]);
    let results = read(d.join("o/results.csv"));
    let row = results.lines().find(|l| l.contains(",omega_p,")).unwrap();
    assert!(row.starts_with("finetune,omega_p,7,0.5,"), "{row}");
}

#[test]
fn sweep_reports_every_batch_size() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["sweep", "--config", "exp.toml", "--out", "sw", "--quiet"]);
    let sweep = read(d.join("sw/sweep.csv"));
    let sizes: Vec<&str> = sweep.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(sizes, ["16", "32", "64", "96", "128", "16", "32", "64", "96", "128"]);
}

#[test]
fn solve_accepts_weights_and_method() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cost.csv"), "0,1,2\n1,0,1\n").unwrap();
    std::fs::write(d.join("mu.csv"), "1\n3\n").unwrap();
    std::fs::write(d.join("nu.csv"), "2,1,1\n").unwrap();
    let out = ok(d, &["solve", "--cost", "cost.csv", "--mu", "mu.csv", "--nu", "nu.csv", "--method", "exact"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("cost"));
    let plan: Vec<Vec<f64>> = read(d.join("out/plan.csv"))
        .lines()
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    let rows: Vec<f64> = plan.iter().map(|r| r.iter().sum()).collect();
    assert!((rows[0] - 0.25).abs() < 1e-12 && (rows[1] - 0.75).abs() < 1e-12, "{rows:?}");
    assert!(read(d.join("out/report.txt")).contains("method=exact"));
}

#[test]
fn input_errors_name_the_problem() {
    let dir = setup();
    let d = dir.path();
    let out = run(d, &["finetune"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    std::fs::write(d.join("v2.toml"), EXPERIMENT.replace("schema_version = 1", "schema_version = 2")).unwrap();
    let out = run(d, &["finetune", "--config", "v2.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));

    std::fs::write(d.join("broken.json"), "{\"format\": \"something-else\"}").unwrap();
    let out = run(d, &["finetune", "--config", "exp.toml", "--teacher", "broken.json"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(d, &["finetune", "--config", "exp.toml", "--teacher", "absent.json"]);
    assert_eq!(out.status.code(), Some(4));

    let out = run(d, &["solve", "--cost", "exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exp.toml:2:1"));
}

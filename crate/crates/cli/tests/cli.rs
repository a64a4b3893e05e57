use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mlmc-grad"));
    c.env_remove("MLMC_GRAD_OUT");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const MINIMAL: &str = r#"
[instance]
kind = "cso_toy"

[estimator]
kind = "rt-mlmc"
epsilon = 0.01

[optimizer]
iterations = 3000
"#;

#[test]
fn minimal_run_writes_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", MINIMAL);
    let o = run(dir.path(), &["run", "--config", "c.toml", "--out", "out"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let traj = std::fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    let mut lines = traj.lines();
    assert_eq!(lines.next(), Some("t,cum_cost,objective,grad_sq"));
    assert_eq!(lines.count(), 3001);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", MINIMAL);
    for out in ["a", "b"] {
        assert_eq!(code(&run(dir.path(), &["run", "--config", "c.toml", "--seed", "42", "--out", out])), 0);
    }
    let a = std::fs::read(dir.path().join("a/trajectory.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/trajectory.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(code(&run(dir.path(), &["run", "--config", "c.toml", "--seed", "43", "--out", "c"])), 0);
    assert_ne!(a, std::fs::read(dir.path().join("c/trajectory.csv")).unwrap());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", MINIMAL);
    assert_eq!(code(&run(dir.path(), &["run", "--config", "c.toml", "--seed", "5", "--out", "a"])), 0);
    assert_eq!(code(&run(dir.path(), &["run", "--config", "a/config.toml", "--out", "b"])), 0);
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/config.toml"), read("b/config.toml"));
    assert_eq!(read("a/trajectory.csv"), read("b/trajectory.csv"));
}

#[test]
fn inapplicable_estimator_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", &MINIMAL.replace("rt-mlmc", "ru-mlmc"));
    let o = run(dir.path(), &["run", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("inapplicable"));
    assert_eq!(code(&run(dir.path(), &["run", "--config", "c.toml", "--out", "o", "--force", "--quiet"])), 0);
}

#[test]
fn divergence_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "c.toml",
        "[instance]\nkind = \"quadratic\"\n[estimator]\nkind = \"l-sgd\"\nlevel = 0\n[optimizer]\nschedule = \"constant\"\nstep = 3.0\n",
    );
    assert_eq!(code(&run(dir.path(), &["run", "--config", "c.toml", "--out", "o"])), 3);
}

#[test]
fn overflow_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.toml", &MINIMAL.replace("epsilon = 0.01", "level = 70"));
    assert_eq!(code(&run(dir.path(), &["run", "--config", "c.toml", "--out", "o"])), 5);
}

#[test]
fn malformed_configs_report_the_location() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", "[instance]\nkind = \"cso_toy\"\n[optimizer]\niterations = \"many\"\n");
    let o = run(dir.path(), &["run", "--config", "bad.toml", "--out", "o"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml") && err.contains("line 4"), "{err}");
    write(dir.path(), "empty.toml", "[instance]\nkind = \"cso_toy\"\n[bench]\nmethods = []\n");
    let o = run(dir.path(), &["sweep", "--config", "empty.toml", "--out", "o"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bench.methods"));
    assert_eq!(code(&run(dir.path(), &["run", "--out", "o"])), 2);
    assert_eq!(code(&run(dir.path(), &["sweep", "--preset", "nope"])), 2);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn variance_probe_asserts_its_band() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["probe", "--kind", "variance", "--instance", "cso_toy", "--assert", "--out", "p"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = std::fs::read_to_string(dir.path().join("p/probe_variance.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("level,statistic,log2_value"));
    assert_eq!(csv.lines().count(), 9);
    let summary = std::fs::read_to_string(dir.path().join("p/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().ends_with(",true"));
}

#[test]
fn noiseless_probe_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["probe", "--kind", "bias", "--instance", "quadratic", "--out", "p"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("degenerate"));
    let o = run(dir.path(), &["probe", "--kind", "bias", "--instance", "quadratic", "--out", "p", "--assert"]);
    assert_eq!(code(&o), 6);
}

#[test]
fn bad_instance_name_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["probe", "--instance", "nope", "--out", "p"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown instance"));
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().current_dir(dir.path()).env("MLMC_GRAD_OUT", "from-env").args(["grid", "--quiet"]).output().unwrap();
    assert_eq!(code(&o), 0);
    let grid = std::fs::read_to_string(dir.path().join("from-env/grid.csv")).unwrap();
    assert_eq!(grid.lines().next(), Some("mu,p,objective"));
    assert!(grid.lines().nth(1).unwrap().starts_with("2.43,2.3,"));
    let o = bin()
        .current_dir(dir.path())
        .env("MLMC_GRAD_OUT", "from-env")
        .args(["grid", "--quiet", "--out", "flag"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("flag/grid.csv").exists());
}

#[test]
fn sweep_writes_cells_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "s.toml",
        r#"
[instance]
kind = "cso_toy"

[bench]
methods = ["rt-mlmc", "ru-mlmc"]
eps_grid = [0.1, 0.05, 0.02]
seeds = 5
budget = 1000000
bands = { "rt-mlmc" = [-3.0, 0.0] }
"#,
    );
    let o = run(dir.path(), &["sweep", "--config", "s.toml", "--out", "s", "--jobs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cells = std::fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert_eq!(cells.lines().next(), Some("instance,estimator,epsilon,seed,cost_at_crossing,censored,final_gap,wall_ms"));
    assert_eq!(cells.lines().count(), 1 + 2 * 3 * 5);
    let summary = std::fs::read_to_string(dir.path().join("s/summary.csv")).unwrap();
    assert!(summary.contains("rt-mlmc,cost_slope,"));
    assert!(summary.contains("ru-mlmc,cost_slope,,"));
    // The inapplicable method has no slope, so its row fails the assertion.
    let o = run(dir.path(), &["sweep", "--config", "s.toml", "--out", "s", "--assert", "--quiet"]);
    assert_eq!(code(&o), 6);
}

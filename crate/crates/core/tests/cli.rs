use std::path::Path;
use std::process::{Command, Output};

fn slowfast(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slowfast")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn body(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    let (head, rest) = text.split_once('\n').unwrap();
    assert!(head.starts_with("# slowfast ") && head.ends_with(" v1"), "{head}");
    rest.to_string()
}

const SMALL: &str = r#"
[domain]
boundary = "dirichlet"

[eigensystem]
modes = 2

[coefficients]
b1 = { kind = "tanh", fast_gain = 1.0 }
b2 = { kind = "linear", slow = 1.0, fast = -0.5 }
sigma1 = { kind = "constant", value = 1.0 }
sigma2 = { kind = "constant", value = 1.0 }

[initial]
slow = [1.0]

[run]
ergodic_horizon = 100.0
"#;

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&slowfast(&["frobnicate", "preset:tanh"], dir.path())), 1);
    assert_eq!(code(&slowfast(&["average"], dir.path())), 1);
    assert_eq!(code(&slowfast(&["hypcheck", "missing.toml"], dir.path())), 1);
    assert_eq!(code(&slowfast(&["hypcheck", "preset:nonesuch"], dir.path())), 1);
    std::fs::write(dir.path().join("bad.toml"), "[coefficients\nb1 = 3").unwrap();
    assert_eq!(code(&slowfast(&["hypcheck", "bad.toml"], dir.path())), 1);
    assert_eq!(code(&slowfast(&["--help"], dir.path())), 0);
}

#[test]
fn hypcheck_passes_on_bundled_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = slowfast(&["hypcheck", "preset:linear", "--out", "h.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn failed_study_exits_two_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    // At epsilon = 0.5 alone the two Laplace sides are far apart.
    let args = ["laplace", "preset:laplace", "--entry", "0", "--replicas", "256", "--seed", "3", "--gnuplot-stub"];
    let run = |out: &str, workers: &str| {
        let mut a = args.to_vec();
        a.extend(["--out", out]);
        Command::new(env!("CARGO_BIN_EXE_slowfast"))
            .args(&a)
            .env("SLOWFAST_WORKERS", workers)
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("a.csv", "1")), 2);
    assert_eq!(code(&run("b.csv", "2")), 2);
    assert_eq!(body(&dir.path().join("a.csv")), body(&dir.path().join("b.csv")));
    assert!(dir.path().join("a.gp").exists());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.csv", "b.csv"] {
        let o = slowfast(&["simulate", "preset:linear", "--entry", "0", "--seed", "5", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(body(&dir.path().join("a.csv")), body(&dir.path().join("b.csv")));
    assert!(dir.path().join("a.bin").exists());
    assert!(dir.path().join("a.occupation.bin").exists());
}

#[test]
fn measure_round_trips_through_dump() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = slowfast(&["measure", "small.toml", "--modes", "2", "--out", "m.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("m.samples.csv").exists());
    let o = slowfast(&["dump-measure", "m.measure.bin", "--bins", "10", "--out", "h.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hist = body(&dir.path().join("h.csv"));
    assert_eq!(hist.lines().count(), 11);
}

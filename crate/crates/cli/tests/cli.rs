use std::path::Path;
use std::process::{Command, Output};

fn ddn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "\
synthetic.dim = 8
synthetic.n_train_per_class = 40
synthetic.n_test_per_class = 10
model.hidden = 16
ddn.hidden = 16,16
buffer.capacity = 20
batch_size = 16
meta.inner_batch = 8
meta.outer_batch = 8
strategy.use_ddn = true
compare_baseline = true
";

fn run_small(dir: &Path, out: &str) -> Output {
    let cfg = dir.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.join(out);
    ddn(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "1-2",
    ])
}

#[test]
fn run_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_small(dir.path(), "a");
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    assert!(text.contains("er+ddn"));
    assert!(text.contains("sign test p ="));
    for f in ["metrics.csv", "summary.json", "diagnostics.csv"] {
        assert!(dir.path().join("a").join(f).is_file(), "{f}");
    }
    let ckpts = std::fs::read_dir(dir.path().join("a/checkpoints")).unwrap().count();
    assert_eq!(ckpts, 4);

    let b = run_small(dir.path(), "b");
    assert!(b.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("a/metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("b/metrics.csv")).unwrap()
    );
}

#[test]
fn unknown_key_exits_with_one_and_names_the_key() {
    let o = ddn(&["run", "--set", "buffer.size=10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("buffer.size"), "{}", stderr(&o));

    let o = ddn(&["run", "--set", "lr=abc"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`lr`"));

    let o = ddn(&["run", "--config", "/nonexistent/ddn.cfg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_arguments_exit_with_one() {
    assert_eq!(ddn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ddn(&["check-reservoir", "--trials", "many"]).status.code(), Some(1));
    assert_eq!(ddn(&["--help"]).status.code(), Some(0));
}

#[test]
fn check_hypergrad_passes() {
    let o = ddn(&["check-hypergrad", "--instances", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("max relative error"));
    assert!(text.trim_end().ends_with("PASS"));

    let o = ddn(&["check-hypergrad", "--instances", "2", "--set", "ddn.beta=1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("max hypergradient norm: 0.000000e0"));
}

#[test]
fn check_theorems_prints_the_table() {
    let o = ddn(&["check-theorems"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("gm_objective"));
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with("1e-")).count(), 3);
    assert!(text.contains("observed order"));

    let o = ddn(&["check-theorems", "--zero-gradient"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("n/a"));
}

#[test]
fn check_reservoir_json_and_failure_code() {
    let o = ddn(&["check-reservoir", "--trials", "20000", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let end = text.find("\nitem").unwrap();
    let report: serde_json::Value = serde_json::from_str(&text[..end]).unwrap();
    assert_eq!(report["frequencies"].as_array().unwrap().len(), 20);
    assert!(report["p_value"].as_f64().unwrap() > 0.01);

    let o = ddn(&["check-reservoir", "--capacity", "0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

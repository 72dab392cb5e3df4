use std::path::Path;
use std::process::Command;

fn tic(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_tic")).args(args).env("RUST_LOG", "error").output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn list_names_every_experiment_in_order() {
    let (code, out, _) = tic(&["list"]);
    assert_eq!(code, 0);
    let names: Vec<_> = out.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "static-value",
            "duality",
            "geometric-dpp",
            "dynamic-utility-linear",
            "tau-bound",
            "forward-dpp",
            "master-residual",
            "illposed-demo",
            "benchmark-verify"
        ]
    );
    assert!(out.contains("duality") && out.contains("nodal-set duality"));
}

#[test]
fn validate_reports_field_diagnostics_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "experiment = \"forward-dpp\"\nsteps = 0\nmode = \"tree\"\n");
    let (code, _, err) = tic(&["validate", &bad]);
    assert_eq!(code, 2);
    for field in ["seed:", "mode:", "steps:"] {
        assert!(err.contains(field), "missing {field} in {err}");
    }
    let unknown = write(dir.path(), "unknown.toml", "experiment = \"nope\"\n");
    let (code, _, err) = tic(&["validate", &unknown]);
    assert_eq!(code, 2);
    assert!(err.contains("benchmark-verify") && err.contains("tau-bound"));
    let typo = write(dir.path(), "typo.toml", "experiment = \"duality\"\nstep = 3\n");
    assert_eq!(tic(&["validate", &typo]).0, 2);
    let good = write(dir.path(), "good.toml", "experiment = \"illposed-demo\"\nsteps = 4\n");
    let (code, out, _) = tic(&["validate", &good]);
    assert_eq!(code, 0);
    assert!(out.starts_with("ok: illposed-demo"));
}

#[test]
fn run_writes_sorted_json_and_lf_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "demo.toml", "experiment = \"illposed-demo\"\nhorizon = 2.0\nsteps = 6\n");
    let out_dir = dir.path().join("runs");
    let (code, out, _) = tic(&["run", &cfg, "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    let runs: Vec<_> = std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    assert!(run.file_name().unwrap().to_string_lossy().starts_with("illposed-demo-noseed-"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["anchor"], "non-uniqueness for the right-derivative master equation");
    let text = std::fs::read_to_string(run.join("report.json")).unwrap();
    let top: Vec<_> = text.lines().filter(|l| l.starts_with("  \"")).map(|l| l.trim().split('"').nth(1).unwrap().to_string()).collect();
    let mut sorted = top.clone();
    sorted.sort();
    assert_eq!(top, sorted);
    let csv = std::fs::read_to_string(run.join("illposed.csv")).unwrap();
    assert!(!csv.contains('\r'));
    assert!(csv.starts_with("case,rhs_first,rhs_second,psi_first,psi_second,gap\n"));
    assert!(csv.lines().nth(1).unwrap().ends_with(",2.0"));
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // A tolerance no tree value meets at this resolution.
    let cfg = write(
        dir.path(),
        "tight.toml",
        "experiment = \"static-value\"\nlevels = [8]\nspacings = [0.1]\ntolerances = [1e-6]\nprimal_only = true\n",
    );
    let (code, out, _) = tic(&["run", &cfg, "--output-dir", dir.path().join("runs").to_str().unwrap()]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("FAIL primal value n=8"));
}

#[test]
fn out_of_scope_benchmark_is_explained() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "d.toml", "experiment = \"benchmark-verify\"\nbenchmark = \"probability_distortion\"\n");
    let (code, _, err) = tic(&["validate", &cfg]);
    assert_eq!(code, 2);
    assert!(err.contains("benchmark:"), "{err}");
}

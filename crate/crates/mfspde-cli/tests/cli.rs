//! End-to-end tests of the command-line driver: exit codes, diagnostics,
//! result bundles, and the determinism contract (reruns and thread counts
//! must reproduce the manifest hash bit for bit).

use std::path::Path;
use std::process::{Command, Output};

fn mfspde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfspde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn manifest_hash(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["content_hash"].as_str().unwrap().to_owned()
}

const HEAT_CONFIG: &str = r#"
[grid]
n_interior = 8
kappa = 0.5

[time]
t_end = 0.2
n_steps = 10

[noise]
n_scenarios = 40
seed = 11
marks = []
intensities = []

[model]
kind = "heat"
initial = { kind = "sine", amplitude = 1.0, offset = 0.0 }
"#;

const HARVEST_CONFIG: &str = r#"
[grid]
n_interior = 5
kappa = 0.05

[time]
t_end = 0.2
n_steps = 6

[noise]
n_scenarios = 30
seed = 7

[model]
kind = "harvesting"
initial = { kind = "sine", amplitude = 1.0, offset = 1.0 }

[solver]
max_outer = 3
tol_fp = 0.0
"#;

#[test]
fn version_flag_reports_the_binary() {
    let out = mfspde(&["--version"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("mfspde"));
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = mfspde(&["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--config"), "{}", stderr(&out));
}

#[test]
fn invalid_config_reports_field_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "[grid]\nkappa = -1.0\nn_interior = 1\n\n[time]\nt_end = 0.0\n",
    );
    let out = mfspde(&["simulate", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for field in ["grid.kappa", "grid.n_interior", "time.t_end"] {
        assert!(err.contains(field), "missing {field} in:\n{err}");
    }
}

#[test]
fn unknown_verify_suite_is_a_usage_error() {
    let out = mfspde(&["verify", "--suite", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"));
    assert!(stderr(&out).contains("noise"), "lists the catalog");
}

#[test]
fn verify_suite_prints_pass_lines() {
    let out = mfspde(&["verify", "--suite", "meanfield"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("[meanfield]"));
    assert!(text.contains("PASS"));
    assert!(text.contains("all checks passed"));
}

#[test]
fn simulate_writes_a_sealed_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), HEAT_CONFIG);
    let out_dir = tmp.path().join("results");
    let out = mfspde(&[
        "simulate",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("content hash:"));
    for name in [
        "manifest.json",
        "mean_field.csv",
        "simulate_report.json",
        "config.toml",
    ] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("simulate_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["n_scenarios"], 40);
    assert!(report["terminal_mean_norm"].as_f64().unwrap() > 0.0);
}

#[test]
fn reruns_and_thread_counts_preserve_the_manifest_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), HEAT_CONFIG);
    let run = |dir: &str, extra: &[&str]| {
        let out_dir = tmp.path().join(dir);
        let mut args = vec![
            "simulate",
            "--config",
            &config,
            "--out",
            out_dir.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let out = mfspde(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        manifest_hash(&out_dir)
    };
    let base = run("a", &[]);
    let rerun = run("b", &[]);
    let single = run("c", &["--threads", "1"]);
    let many = run("d", &["--threads", "4"]);
    assert_eq!(base, rerun, "rerun changed the results");
    assert_eq!(base, single, "one worker thread changed the results");
    assert_eq!(base, many, "four worker threads changed the results");

    let reseeded = run("e", &["--seed", "999"]);
    assert_ne!(base, reseeded, "the seed must reach the noise");
}

#[test]
fn harvest_requires_the_harvesting_model() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), HEAT_CONFIG);
    let out = mfspde(&["harvest", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.kind"));
}

#[test]
fn harvest_with_zero_tolerance_warns_and_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), HARVEST_CONFIG);
    let out_dir = tmp.path().join("results");
    let out = mfspde(&[
        "harvest",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("warning"));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("harvest_report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["warning"].is_string());
    assert_eq!(report["iterations"], 3, "all sweeps must run at tol 0");
    assert!(out_dir.join("harvest_rate_mean.csv").exists());
    assert!(out_dir.join("population_mean.csv").exists());
}

#[test]
fn adjoint_picard_and_optimize_produce_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        r#"
[grid]
n_interior = 5
kappa = 0.5

[time]
t_end = 0.2
n_steps = 6

[noise]
n_scenarios = 30
seed = 3
marks = []
intensities = []

[model]
kind = "affine"

[model.affine]
by = -0.3
bu = 1.0
s0 = 0.2
fu = 1.0
fuu = -0.5
gy = 1.0

[control]
value = 0.4
u_min = -5.0
u_max = 5.0

[solver]
picard_iters = 3
ascent_iters = 2
ascent_step = 0.1
"#,
    );
    for (cmd, files) in [
        ("adjoint", vec!["adjoint_mean.csv", "adjoint_report.json"]),
        ("picard", vec!["picard_report.json"]),
        ("optimize", vec!["control.csv", "optimize_report.json"]),
    ] {
        let out_dir = tmp.path().join(cmd);
        let out = mfspde(&[cmd, "--config", &config, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
        for name in files {
            assert!(out_dir.join(name).exists(), "{cmd} missing {name}");
        }
        assert!(out_dir.join("manifest.json").exists());
    }
}

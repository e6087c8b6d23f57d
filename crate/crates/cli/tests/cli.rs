//! End-to-end tests driving the `fdp` binary with a deliberately tiny
//! configuration so the whole pipeline runs in seconds.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fdp"))
}

fn tiny_config(dir: &Path, perturbations: &[&str]) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    let cfg = serde_json::json!({
        "env": {"scale": "s", "perturbations": perturbations},
        "demos": [3],
        "methods": ["joint", "fdp_output"],
        "priorities": ["prop_first"],
        "seeds": [1],
        "episodes": 3,
        "training": {"epochs": 2, "batch_size": 32, "learning_rate": 1e-3, "seed": 0},
        "net": {"hidden": 12, "blocks": 2},
        "diffusion_steps": 15
    });
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn run_ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &["none"]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&a).output().unwrap());
    run_ok(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&b).output().unwrap());
    let fa = std::fs::read(a.join("data_s_3_1.fdpd")).unwrap();
    let fb = std::fs::read(b.join("data_s_3_1.fdpd")).unwrap();
    assert_eq!(fa, fb, "datasets differ across identical runs");
}

#[test]
fn eval_without_train_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &["none"]);
    let out = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing"), "stderr: {err}");
}

#[test]
fn invalid_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, "{\"env\": {\"scale\": \"xl\"}}").unwrap();
    let out = bin()
        .args(["sweep", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_matches_staged_commands_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &["none", "occlusion"]);
    let sweep_out = tmp.path().join("sweep");
    run_ok(bin().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(&sweep_out).output().unwrap());

    // staged: gen-data, train, eval into a separate directory
    let staged = tmp.path().join("staged");
    for cmd in ["gen-data", "train", "eval"] {
        run_ok(bin().args([cmd, "--config"]).arg(&cfg).arg("--out").arg(&staged).output().unwrap());
    }
    let cell = "eval_joint_prop_first_s_none_3_1.json";
    let a = std::fs::read_to_string(sweep_out.join(cell)).unwrap();
    let b = std::fs::read_to_string(staged.join(cell)).unwrap();
    assert_eq!(a, b, "sweep and staged pipelines disagree");

    // a second sweep resumes: everything already exists, nothing retrains
    let log = sweep_out.join("train_joint_prop_first_s_3_1.jsonl");
    let before = std::fs::metadata(&log).unwrap().modified().unwrap();
    let stdout =
        run_ok(bin().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(&sweep_out).output().unwrap());
    assert!(stdout.contains("exists"), "resume did not skip: {stdout}");
    let after = std::fs::metadata(&log).unwrap().modified().unwrap();
    assert_eq!(before, after, "resume rewrote a completed training log");

    // report renders tables and plots from the completed cells
    run_ok(bin().args(["report", "--out"]).arg(&sweep_out).output().unwrap());
    let md = std::fs::read_to_string(sweep_out.join("report.md")).unwrap();
    assert!(md.contains("| joint |") && md.contains("| fdp_output |"));
    assert!(sweep_out.join("plot_s_none_3.svg").is_file());
    assert!(sweep_out.join("plot_s_occlusion_3.svg").is_file());
}

#[test]
fn report_refuses_mixed_env_hashes_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), &["none"]);
    let out_dir = tmp.path().join("out");
    run_ok(bin().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap());

    // forge a record from a different environment
    let src = out_dir.join("eval_joint_prop_first_s_none_3_1.json");
    let mut rec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&src).unwrap()).unwrap();
    rec["env_hash"] = serde_json::json!(1234u32);
    std::fs::write(out_dir.join("eval_zzz_forged.json"), rec.to_string()).unwrap();

    let out = bin().args(["report", "--out"]).arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "mixed hashes must be rejected");
    run_ok(bin().args(["report", "--out"]).arg(&out_dir).arg("--force").output().unwrap());
}

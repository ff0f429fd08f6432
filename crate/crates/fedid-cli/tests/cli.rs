//! Exercises the binary end to end: exit codes, artifacts, and the
//! verify/trace/report subcommands.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedid"))
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../fedid/scenarios").join(name)
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fedid-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn run_happy_path_exits_zero_and_writes_artifacts() {
    let out = temp_dir("happy");
    let status = bin()
        .args(["run"])
        .arg(scenario_path("happy_path.toml"))
        .arg("--out")
        .arg(&out)
        .status()
        .expect("binary runs");
    assert_eq!(status.code(), Some(0));
    for artifact in ["transcript.txt", "ledger.dat", "report.txt", "manifest.json"] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn env_var_provides_the_default_output_directory() {
    let out = temp_dir("envvar");
    let status = bin()
        .args(["run"])
        .arg(scenario_path("happy_path.toml"))
        .env("FEDID_OUT_DIR", &out)
        .status()
        .expect("binary runs");
    assert_eq!(status.code(), Some(0));
    assert!(out.join("transcript.txt").exists());
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn expectation_failure_exits_one() {
    // social_denied expects a denial; flipping the expectation to granted
    // makes step 3 fail.
    let out = temp_dir("expect");
    let source = std::fs::read_to_string(scenario_path("social_denied.toml")).unwrap();
    let flipped = source.replacen("expect = \"denied\"", "expect = \"granted\"", 1);
    let scenario = out.join("flipped.toml");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(&scenario, flipped).unwrap();

    let output = bin()
        .args(["run"])
        .arg(&scenario)
        .arg("--out")
        .arg(out.join("artifacts"))
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("step 3"), "stderr: {stderr}");
    assert!(stderr.contains("sp_login"), "stderr: {stderr}");
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn malformed_scenario_exits_two_and_writes_nothing() {
    let out = temp_dir("malformed");
    std::fs::create_dir_all(&out).unwrap();
    let scenario = out.join("broken.toml");
    std::fs::write(&scenario, "schema = 1\nnot really toml [").unwrap();
    let artifacts = out.join("artifacts");

    let output = bin()
        .args(["run"])
        .arg(&scenario)
        .arg("--out")
        .arg(&artifacts)
        .output()
        .expect("binary runs");
    assert_eq!(output.status.code(), Some(2));
    assert!(!artifacts.exists(), "nothing may be written on a parse error");
    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn verify_trace_and_report_work_on_run_artifacts() {
    let out = temp_dir("tools");
    let status = bin()
        .args(["run"])
        .arg(scenario_path("happy_path.toml"))
        .arg("--out")
        .arg(&out)
        .status()
        .expect("binary runs");
    assert_eq!(status.code(), Some(0));
    let ledger_file = out.join("ledger.dat");

    // verify: intact chain passes.
    let verify = bin().args(["verify"]).arg(&ledger_file).output().unwrap();
    assert_eq!(verify.status.code(), Some(0), "{}", String::from_utf8_lossy(&verify.stderr));

    // verify: a flipped byte fails (exit 1 on broken chain, 2 on parse).
    let mut bytes = std::fs::read(&ledger_file).unwrap();
    let target = bytes.len() / 2;
    bytes[target] ^= 0x01;
    let corrupt_file = out.join("corrupt.dat");
    std::fs::write(&corrupt_file, &bytes).unwrap();
    let verify = bin().args(["verify"]).arg(&corrupt_file).output().unwrap();
    assert!(matches!(verify.status.code(), Some(1) | Some(2)));

    // trace: derive the user's pseudo-identifier at the data owner from the
    // manifest and find the recorded transactions.
    let manifest: fedid::scenario::RunManifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let root = fedid::hdkeys::ExtendedPrivateKey::from_base58(&manifest.users["alice"]).unwrap();
    let owner_key = root
        .ckd_priv(fedid::hdkeys::ChildNumber::hardened(0).unwrap())
        .unwrap()
        .neuter()
        .to_base58();
    let trace = bin()
        .args(["trace"])
        .arg(&ledger_file)
        .args(["--key", &owner_key])
        .output()
        .unwrap();
    assert_eq!(trace.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&trace.stdout);
    assert!(stdout.contains("3 transaction(s)"), "stdout: {stdout}");
    assert!(stdout.contains("re-certification"), "stdout: {stdout}");
    assert!(stdout.contains("data-access"), "stdout: {stdout}");

    // report: rebuilds cleanly from the run directory.
    let report = bin().args(["report"]).arg(&out).output().unwrap();
    assert_eq!(report.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&report.stdout);
    assert!(stdout.contains("chain verification: OK"));
    assert!(stdout.contains("privacy scan: clean"));

    let _ = std::fs::remove_dir_all(&out);
}

mod common;

use std::process::Command;

use driverforge::toolchain::Toolchain;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_driverforge"))
}

fn write_config(dir: &std::path::Path, extra: &str) -> std::path::PathBuf {
    let fx = common::toycodec_dir();
    let text = format!(
        "seed = 1\n{extra}\n[library]\nsources = [\"{0}/toycodec.c\"]\ninclude_dirs = [\"{0}\"]\nheaders = [\"toycodec.h\"]\n\
         headers_ast = \"{0}/headers.ast.json\"\n\
         [generator]\nbackend = {{ kind = \"stub\", pool = \"{0}/campaign/pool.toml\" }}\nn_samples = 4\nbudget = 0.001\n\
         [pipeline]\nfuzz_budget_secs = 0\n",
        fx.display()
    );
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "patience = 0");
    let out = bin().args(["fuzz", "-c"]).arg(&cfg).arg("-d").arg(d.path().join("c")).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin().args(["fuzz", "-c", "/nonexistent.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let cfg = write_config(d.path(), "");
    let out = bin().args(["fuzz", "--temperature", "3", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_toolchain_exits_4() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let out = bin().args(["fuzz", "-c"]).arg(&cfg).arg("-d").arg(d.path().join("c")).env("PATH", "").output().unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn budget_exhaustion_exits_3() {
    if Toolchain::detect().is_err() {
        return;
    }
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "");
    let out = bin().args(["fuzz", "-c"]).arg(&cfg).arg("-d").arg(d.path().join("c")).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["stop"], "BudgetExhausted");
    assert_eq!(summary["iterations"], 0);
}

#[test]
fn report_needs_snapshots() {
    let d = tempfile::tempdir().unwrap();
    let out = bin().arg("report").arg(d.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no iteration snapshots"));
}

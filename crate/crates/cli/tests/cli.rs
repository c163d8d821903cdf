//! Exit-code contract and output-artifact checks for the command-line tool.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_predhunt"))
}

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/corpus")
        .join(name)
}

fn temp_out(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("predhunt_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn run_exits_zero_on_clean_exit() {
    let out = bin()
        .args(["run"])
        .arg(corpus("null_index_global.s"))
        .arg(corpus("inputs/i64.txt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["outcome"]["Exit"]["code"], 0);
}

#[test]
fn run_exits_two_on_trap() {
    // the published wraparound witness allocates 4 bytes and overruns it
    let dir = temp_out("trap");
    let witness = dir.join("witness.txt");
    std::fs::write(&witness, b"+01073741825").unwrap();
    let out = bin()
        .args(["run", "--checked"])
        .arg(corpus("malloc_size_overflow.s"))
        .arg(&witness)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["outcome"]["Trap"]["kind"], "OutOfBounds");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_exits_one_on_bad_path() {
    let out = bin()
        .args(["run", "nonexistent.s", "nonexistent.txt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_writes_reports_and_inputs() {
    let dir = temp_out("analyze");
    let out = bin()
        .arg("--out")
        .arg(&dir)
        .arg("--emit-smt")
        .arg("analyze")
        .arg(corpus("malloc_size_overflow.s"))
        .arg(corpus("inputs/i32.txt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("IntOverflowSigned"), "{stdout}");
    assert!(dir.join("reports.json").exists());
    assert!(dir.join("session.json").exists());
    let has_bin = std::fs::read_dir(&dir)
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "bin"));
    assert!(has_bin, "no generated input written");
    let has_smt = std::fs::read_dir(&dir)
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "smt2"));
    assert!(has_smt, "no SMT dump written with --emit-smt");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn analyze_exits_three_without_reports() {
    let dir = temp_out("analyze3");
    let clean = dir.join("clean.s");
    std::fs::write(&clean, "main: mov.64 r0, 0\n halt\n").unwrap();
    let input = dir.join("in.txt");
    std::fs::write(&input, b"x").unwrap();
    let out = bin()
        .arg("--out")
        .arg(&dir)
        .arg("analyze")
        .arg(&clean)
        .arg(&input)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invert_prints_verdicts_and_accuracy() {
    let dir = temp_out("invert");
    let out = bin()
        .arg("--out")
        .arg(&dir)
        .arg("invert")
        .arg(corpus("bench_branches.s"))
        .arg(corpus("inputs/bench10.txt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("-> sat").count(), 10, "{stdout}");
    assert!(stdout.contains("accuracy: 100.00%"), "{stdout}");
    let session: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("session.json")).unwrap()).unwrap();
    assert_eq!(session["branch_constraints"], 10);
    assert!(session["branches"]
        .as_array()
        .unwrap()
        .iter()
        .all(|b| b["invertible"] == "sat"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invert_with_no_symbolic_branches_prints_na() {
    let dir = temp_out("invert_na");
    let clean = dir.join("clean.s");
    std::fs::write(&clean, "main: mov.64 r0, 0\n halt\n").unwrap();
    let input = dir.join("in.txt");
    std::fs::write(&input, b"").unwrap();
    let out = bin()
        .arg("--out")
        .arg(&dir)
        .arg("invert")
        .arg(&clean)
        .arg(&input)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy: N/A"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn list_models_prints_catalog() {
    let out = bin().arg("--list-models").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("strtol"));
    assert!(stdout.contains("memcmp"));
}

#[test]
fn suite_parallel_matches_serial() {
    let dir1 = temp_out("suite1");
    let out1 = bin()
        .arg("--out")
        .arg(&dir1)
        .arg("suite")
        .arg(corpus("manifest.txt"))
        .output()
        .unwrap();
    assert_eq!(out1.status.code(), Some(0), "{}", String::from_utf8_lossy(&out1.stderr));
    let stdout = String::from_utf8_lossy(&out1.stdout);
    assert!(stdout.contains("TOTAL"), "{stdout}");
    assert_eq!(stdout.matches("CWE").count(), 12, "11 class rows + header: {stdout}");

    let dir2 = temp_out("suite4");
    let out2 = bin()
        .arg("--workers")
        .arg("4")
        .arg("--out")
        .arg(&dir2)
        .arg("suite")
        .arg(corpus("manifest.txt"))
        .output()
        .unwrap();
    assert_eq!(out2.status.code(), Some(0));
    let m1 = std::fs::read_to_string(dir1.join("metrics.json")).unwrap();
    let m2 = std::fs::read_to_string(dir2.join("metrics.json")).unwrap();
    assert_eq!(m1, m2, "parallel metrics differ from serial");
    std::fs::remove_dir_all(&dir1).ok();
    std::fs::remove_dir_all(&dir2).ok();
}

#[test]
fn suite_rejects_empty_manifest() {
    let dir = temp_out("suite_empty");
    let manifest = dir.join("empty.txt");
    std::fs::write(&manifest, "# nothing\n").unwrap();
    let out = bin()
        .arg("--out")
        .arg(&dir)
        .arg("suite")
        .arg(&manifest)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    std::fs::remove_dir_all(&dir).ok();
}

//! Corpus-level properties: every bundled program assembles, runs
//! deterministically on its seed input, and checked mode is a strict
//! superset of plain mode on every trap.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use predhunt_core::concolic::{execute_concolic, SessionConfig};
use predhunt_core::harness::parse_manifest;
use predhunt_core::minivm::{assemble, run_program, Mode, Outcome, Program};

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

fn all_programs() -> Vec<(String, Arc<Program>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(corpus_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) == Some("s") {
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            let source = std::fs::read_to_string(&path).unwrap();
            let program = assemble(&source).unwrap_or_else(|e| panic!("{name}: {e}"));
            out.push((name, Arc::new(program)));
        }
    }
    assert!(out.len() >= 44, "corpus unexpectedly small: {}", out.len());
    out
}

#[test]
fn every_corpus_program_assembles() {
    let programs = all_programs();
    for (name, program) in &programs {
        assert!(!program.instructions.is_empty(), "{name} has no instructions");
    }
}

#[test]
fn seed_runs_are_deterministic_and_checked_supersets_plain() {
    let cases = parse_manifest(&corpus_dir().join("manifest.txt")).unwrap();
    for case in &cases {
        let source = std::fs::read_to_string(&case.program).unwrap();
        let program = Arc::new(assemble(&source).unwrap());
        let input = std::fs::read(&case.input).unwrap();

        let a = run_program(&program, &input, Mode::Plain, &[]).unwrap();
        let b = run_program(&program, &input, Mode::Plain, &[]).unwrap();
        assert_eq!(a, b, "{} plain run not deterministic", case.id);

        let checked = run_program(&program, &input, Mode::Checked, &[]).unwrap();
        if let Outcome::Trap { kind, addr } = a.outcome {
            match checked.outcome {
                Outcome::Trap { addr: caddr, .. } => {
                    assert_eq!(addr, caddr, "{}: trap moved between modes", case.id)
                }
                other => panic!("{}: plain trapped {kind:?} but checked gave {other:?}", case.id),
            }
        }
        // seed inputs never trap on the corpus: the flaws need crafted values
        assert!(
            matches!(a.outcome, Outcome::Exit { .. }),
            "{} trapped on its seed input: {:?}",
            case.id,
            a.outcome
        );
    }
}

#[test]
fn short_type_squaring_remains_under_investigation() {
    // squaring of a short-typed value: exercised but not asserted either
    // way; the session must simply complete and stay sound
    let path = corpus_dir().join("short_square_investigate.s");
    let source = std::fs::read_to_string(path).unwrap();
    let program = Arc::new(assemble(&source).unwrap());
    let input = std::fs::read(corpus_dir().join("inputs/i16.txt")).unwrap();
    let out = execute_concolic(&program, &input, &SessionConfig::default()).unwrap();
    assert!(out.check_path_soundness());
    println!(
        "short-square case: {} reports ({:?})",
        out.reports.len(),
        out.reports.iter().map(|r| (r.kind, r.verification)).collect::<Vec<_>>()
    );
}

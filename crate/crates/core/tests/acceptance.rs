//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured evidence. Run with `cargo test --test acceptance -- --nocapture`
//! to see the per-criterion output.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use predhunt_core::concolic::{
    compute_accuracy, execute_concolic, invert_branch, InversionResult, ModelMode, SessionConfig,
};
use predhunt_core::expr::{Model, SymExpr};
use predhunt_core::harness::{parse_manifest, run_suite};
use predhunt_core::minivm::{
    assemble, flag_semantics, run_program, scan_int, Cond, Flags, Mnemonic, Mode, Outcome,
    Program, TrapKind, Width,
};
use predhunt_core::path::{CallFrame, CallStack, ConstraintKind, PathPredicate};
use predhunt_core::secpred::{
    arith_sym_flags, build_overflow_source, shl_overflow_preds, PredicateSet, QueryCtx,
    ReportKind, SecEngine, Signedness, SignednessEvidence, SinkKind, SinkPrecond,
};
use predhunt_core::semantics::{
    conversion_model, memchr_model, memcmp_model, strchr_model, strlen_model, strstr_model,
    ConvVariant, SymBuf,
};
use predhunt_core::solver::SolverSession;

fn corpus(path: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus").join(path)
}

fn load(path: &str) -> Arc<Program> {
    let source = std::fs::read_to_string(corpus(path)).unwrap();
    Arc::new(assemble(&source).unwrap())
}

fn pass(criterion: u32, detail: &str) {
    println!("PASS criterion {criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// criterion 1: function-semantics oracle equivalence

const ALPHABET: [u8; 10] = [0, b'0', b'9', b'a', b'A', b'z', b' ', b'+', b'-', b'x'];

fn assignments(n: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        let mut next = Vec::with_capacity(out.len() * ALPHABET.len());
        for prefix in &out {
            for a in ALPHABET {
                let mut v = prefix.clone();
                v.push(a);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn sym_buf(prefix: &str, addr: u64, bytes: &[u8], sym_at: &[usize]) -> SymBuf {
    let mut buf = SymBuf::concrete(addr, bytes);
    for i in sym_at {
        buf.syms[*i] = Some(SymExpr::var(&format!("{prefix}{i}"), 8));
    }
    buf
}

fn apply(prefix: &str, buf: &SymBuf, a: &[u8], sym_at: &[usize]) -> (Vec<u8>, Model) {
    let mut bytes = buf.bytes.clone();
    let mut m = Model::new();
    for (slot, value) in sym_at.iter().zip(a) {
        bytes[*slot] = *value;
        m.set(&format!("{prefix}{slot}"), *value as u128);
    }
    (bytes, m)
}

fn ref_strlen(b: &[u8]) -> usize {
    b.iter().position(|x| *x == 0).unwrap_or(b.len())
}

#[test]
fn criterion_1_semantics_oracle_equivalence() {
    let t0 = Instant::now();
    let mut checked: u64 = 0;

    // memchr over 4 bytes, two symbolic
    {
        let sym_at = [1usize, 2];
        let buf = sym_buf("a1_", 0x2000, b"x00q", &sym_at);
        for ch in [b'a', 0u8, b'q', b'0'] {
            let m = memchr_model(&buf, &SymExpr::bv(ch as u128, 8), 4).unwrap();
            for a in assignments(2) {
                let (bytes, model) = apply("a1_", &buf, &a, &sym_at);
                let want = bytes[..4]
                    .iter()
                    .position(|b| *b == ch)
                    .map(|i| 0x2000 + i as u64)
                    .unwrap_or(0);
                assert_eq!(m.ret64.evaluate(&model).unwrap() as u64, want);
                checked += 1;
            }
        }
    }

    // strchr and strlen with terminator handling
    {
        let sym_at = [2usize, 3];
        let buf = sym_buf("a2_", 0x2100, b"ab0c\0xx", &sym_at);
        let bound = buf.concrete_strlen() + 1;
        for ch in [b'a', b'z', 0u8] {
            let m = strchr_model(&buf, &SymExpr::bv(ch as u128, 8), bound).unwrap();
            for a in assignments(2) {
                let (bytes, model) = apply("a2_", &buf, &a, &sym_at);
                let mut want = 0u64;
                for (i, b) in bytes.iter().enumerate() {
                    if *b == ch {
                        want = 0x2100 + i as u64;
                        break;
                    }
                    if *b == 0 {
                        break;
                    }
                }
                assert_eq!(m.ret64.evaluate(&model).unwrap() as u64, want);
                checked += 1;
            }
        }
        let m = strlen_model(&buf, bound).unwrap();
        for a in assignments(2) {
            let (bytes, model) = apply("a2_", &buf, &a, &sym_at);
            assert_eq!(m.ret64.evaluate(&model).unwrap() as usize, ref_strlen(&bytes));
            checked += 1;
        }
    }

    // memcmp exact, strcmp/strncmp sign class
    {
        let sym_at = [0usize, 1];
        let lhs = sym_buf("a3_", 0x2200, b"00\0", &sym_at);
        let rhs = SymBuf::concrete(0x2300, b"hi\0");
        let m = memcmp_model(&lhs, &rhs, 2, false).unwrap();
        for a in assignments(2) {
            let (bytes, model) = apply("a3_", &lhs, &a, &sym_at);
            let mut want = 0i64;
            for (b, r) in bytes.iter().zip(&rhs.bytes).take(2) {
                if b != r {
                    want = *b as i64 - *r as i64;
                    break;
                }
            }
            assert_eq!(m.ret64.evaluate(&model).unwrap() as i64, want);
            checked += 1;
        }
        let sm = memcmp_model(&lhs, &rhs, 3, true).unwrap();
        for a in assignments(2) {
            let (bytes, model) = apply("a3_", &lhs, &a, &sym_at);
            let mut want = 0i64;
            for (b, r) in bytes.iter().zip(&rhs.bytes).take(3) {
                if b != r || *b == 0 {
                    want = *b as i64 - *r as i64;
                    break;
                }
            }
            let got = sm.ret64.evaluate(&model).unwrap() as i64;
            assert_eq!(got.signum(), want.signum(), "bytes {bytes:?}");
            checked += 1;
        }
    }

    // strstr over symbolic haystack windows
    {
        let sym_at = [1usize, 2];
        let hay = sym_buf("a4_", 0x2400, b"a00b\0", &sym_at);
        let hay_len = hay.concrete_strlen();
        for needle_text in [&b"zz"[..], &b"a0"[..], &b"0"[..], &b"0b"[..]] {
            let needle = SymBuf::concrete(0x2500, needle_text);
            let m = strstr_model(&hay, hay_len, &needle, needle_text.len()).unwrap();
            for a in assignments(2) {
                let (bytes, model) = apply("a4_", &hay, &a, &sym_at);
                if !m.constraints.iter().all(|c| c.evaluate_bool(&model).unwrap()) {
                    continue;
                }
                let hl = ref_strlen(&bytes);
                let want = if needle_text.len() > hl {
                    0
                } else {
                    (0..=hl - needle_text.len())
                        .find(|i| &bytes[*i..*i + needle_text.len()] == needle_text)
                        .map(|i| 0x2400 + i as u64)
                        .unwrap_or(0)
                };
                assert_eq!(m.ret64.evaluate(&model).unwrap() as u64, want);
                checked += 1;
            }
        }
    }

    // strtol/strtoul over bases 0, 8, 10, 16: every constraint-satisfying
    // assignment evaluates to the concrete reference parse
    {
        let configs: Vec<(&[u8], u32)> = vec![
            (b"+042\0", 10),
            (b"1234\0", 10),
            (b" -77\0", 10),
            (b"0x2f\0", 16),
            (b"2f1x\0", 16),
            (b"0123\0", 8),
            (b"4567\0", 0),
            (b"0123\0", 0),
            (b"0x1f\0", 0),
        ];
        for (initial, base) in configs {
            let sym_at: Vec<usize> = (0..4).collect();
            let buf = sym_buf("a5_", 0x2600, initial, &sym_at);
            for unsigned in [false, true] {
                let variant = if unsigned { ConvVariant::strtoul() } else { ConvVariant::strtol() };
                let m = match conversion_model(&buf, base, variant) {
                    Ok(m) => m,
                    Err(e) => panic!("model failed for {initial:?} base {base}: {e}"),
                };
                let mut satisfying = 0u64;
                for a in assignments(4) {
                    let (bytes, model) = apply("a5_", &buf, &a, &sym_at);
                    if !m.constraints().iter().all(|c| c.evaluate_bool(&model).unwrap()) {
                        continue;
                    }
                    satisfying += 1;
                    let got = m.result64.evaluate(&model).unwrap() as u64;
                    let want = match scan_int(&bytes, base) {
                        Some(s) => {
                            if unsigned {
                                s.unsigned_value(64)
                            } else {
                                s.signed_value(64)
                            }
                        }
                        None => 0,
                    };
                    assert_eq!(got, want, "bytes {bytes:?} base {base} unsigned {unsigned}");
                    checked += 1;
                }
                assert!(satisfying > 0, "no satisfying assignment: {initial:?} base {base}");
            }
        }
    }

    let elapsed = t0.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "oracle took {elapsed:?}, budget 60s"
    );
    pass(1, &format!("{checked} model evaluations matched the concrete reference in {elapsed:?}"));
}

// ---------------------------------------------------------------------------
// criterion 2: null-dereference reproduction

#[test]
fn criterion_2_null_deref_reproduction() {
    let t0 = Instant::now();
    let program = load("null_index_global.s");
    let input = b"+0000000000000000001";
    let out = execute_concolic(&program, input, &SessionConfig::default()).unwrap();
    let report = out
        .reports
        .iter()
        .find(|r| matches!(r.kind, ReportKind::NullDeref | ReportKind::OutOfBoundsRead))
        .expect("null-deref/OOB report at the indexed load");
    // the sink is the indexed load instruction
    let load_addr = program
        .instructions
        .iter()
        .find(|i| i.mnemonic == Mnemonic::Load)
        .unwrap()
        .addr;
    assert_eq!(report.sink_addr, load_addr);
    // the generated input re-executes to a checked-mode trap at that
    // instruction
    let rr = run_program(&program, &report.input, Mode::Checked, &[]).unwrap();
    match rr.outcome {
        Outcome::Trap { kind, addr } => {
            assert!(matches!(kind, TrapKind::NullDeref | TrapKind::OutOfBounds));
            assert_eq!(addr, load_addr);
        }
        other => panic!("expected trap, got {other:?}"),
    }
    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}, budget 10s");
    pass(2, &format!(
        "reported {:?} at {load_addr:#x}; generated input {:?} traps under checked mode ({elapsed:?})",
        report.kind,
        String::from_utf8_lossy(&report.input)
    ));
}

// ---------------------------------------------------------------------------
// criterion 3: malloc-size wraparound reproduction

#[test]
fn criterion_3_malloc_overflow_reproduction() {
    let t0 = Instant::now();
    let program = load("malloc_size_overflow.s");
    let input = b"+00000000002";
    let out = execute_concolic(&program, input, &SessionConfig::default()).unwrap();
    let report = out
        .reports
        .iter()
        .find(|r| r.kind == ReportKind::IntOverflowSigned)
        .expect("signed integer overflow at the multiply");
    assert_eq!(report.signedness_evidence, SignednessEvidence::StrtoFamily);
    let imul_addr = program
        .instructions
        .iter()
        .find(|i| i.mnemonic == Mnemonic::Imul)
        .unwrap()
        .addr;
    assert_eq!(report.source_addr, imul_addr);

    // the solved value satisfies the displayed conjunction:
    // (wide) size*4 != sext(size*4 truncated)  AND  (unsigned) size*4 < 8
    // AND size > 0
    let parsed = scan_int(&report.input, 10).unwrap().signed_value(64) as i64;
    let size32 = parsed as i32;
    let wide = size32 as i64 * 4;
    let truncated = size32.wrapping_mul(4);
    assert_ne!(wide, truncated as i64, "overflow conjunct");
    assert!((truncated as u32) < 8, "precondition conjunct");
    assert!(size32 > 0, "guard conjunct");

    // direct substitution: the published witness satisfies the predicate
    let x = SymExpr::var("c3_size", 32);
    let conj = [
        x.sext(32)
            .mul(&SymExpr::bv(4, 64))
            .neq(&x.mul(&SymExpr::bv(4, 32)).sext(32)),
        x.mul(&SymExpr::bv(4, 32)).ult(&SymExpr::bv(8, 32)),
        x.sgt(&SymExpr::bv(0, 32)),
    ];
    let mut witness = Model::new();
    witness.set("c3_size", 1_073_741_825);
    for c in &conj {
        assert!(c.evaluate_bool(&witness).unwrap(), "witness fails {c}");
    }

    // re-execution allocates 4 bytes and traps OutOfBounds in checked mode
    let rr = run_program(&program, &report.input, Mode::Checked, &[]).unwrap();
    assert!(
        matches!(rr.outcome, Outcome::Trap { kind: TrapKind::OutOfBounds, .. }),
        "expected OutOfBounds, got {:?}",
        rr.outcome
    );
    assert_eq!((size32 as u32 as u64 * 4) & 0xFFFF_FFFF, 4, "allocation wraps to 4 bytes");

    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}, budget 10s");
    pass(3, &format!(
        "signed overflow at {imul_addr:#x} via strto-family, input {:?} wraps malloc to 4 bytes ({elapsed:?})",
        String::from_utf8_lossy(&report.input)
    ));
}

// ---------------------------------------------------------------------------
// criterion 4: micro test-suite scores

#[test]
fn criterion_4_micro_suite_scores() {
    let t0 = Instant::now();
    let cases = parse_manifest(&corpus("manifest.txt")).unwrap();
    assert!(cases.len() >= 44, "corpus has {} cases", cases.len());
    let classes: std::collections::BTreeSet<&str> =
        cases.iter().map(|c| c.cwe.as_str()).collect();
    assert_eq!(classes.len(), 11, "classes: {classes:?}");

    let (_, metrics) = run_suite(&cases, &SessionConfig::default(), 1);
    assert!(metrics.errored.is_empty(), "errored: {:?}", metrics.errored);

    let perfect = ["CWE121", "CWE122", "CWE124", "CWE126", "CWE127", "CWE194", "CWE680"];
    for class in perfect {
        let m = &metrics.classes[class];
        assert_eq!(m.verified.tpr(), Some(100.0), "{class} verified TPR");
        assert_eq!(m.verified.tnr(), Some(100.0), "{class} verified TNR");
    }
    let m195 = &metrics.classes["CWE195"];
    assert!(m195.verified.tpr().unwrap() >= 99.0, "CWE195 TPR");
    assert!(m195.verified.tnr().unwrap() >= 99.0, "CWE195 TNR");
    let total_acc = metrics.total.verified.acc().unwrap();
    assert!(total_acc >= 95.0, "overall verified ACC {total_acc}");

    let elapsed = t0.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}, budget 5min serial");
    pass(4, &format!(
        "{} cases, verified ACC {total_acc:.2}%, 8 classes at 100% ({elapsed:?} serial)",
        cases.len()
    ));
}

// ---------------------------------------------------------------------------
// criterion 5: flag/predicate oracle at width 8

#[test]
fn criterion_5_flag_predicate_oracle() {
    let a = SymExpr::var("c5_a", 8);
    let b = SymExpr::var("c5_b", 8);
    let mut mismatches = 0u64;
    let mut total = 0u64;
    for (m, uses_carry) in [
        (Mnemonic::Add, false),
        (Mnemonic::Sub, false),
        (Mnemonic::Adc, true),
        (Mnemonic::Sbb, true),
        (Mnemonic::Mul, false),
        (Mnemonic::Imul, false),
        (Mnemonic::Neg, false),
    ] {
        for cin in [false, true] {
            if cin && !uses_carry {
                continue;
            }
            let carry = SymExpr::bool_const(cin);
            let flags = arith_sym_flags(m, 8, &a, &b, &carry).unwrap();
            let src = build_overflow_source(0x40, m, 8, &a, &b, &carry, &flags.result, true)
                .unwrap();
            for av in 0..=255u64 {
                for bv in 0..=255u64 {
                    let mut model = Model::new();
                    model.set("c5_a", av as u128);
                    model.set("c5_b", bv as u128);
                    let f_in = Flags { cf: cin, ..Flags::default() };
                    let (_, f) = flag_semantics(m, Width::W8, av, bv, f_in);
                    if src.unsigned_pred.evaluate_bool(&model).unwrap() != f.cf {
                        mismatches += 1;
                    }
                    if src.signed_pred.evaluate_bool(&model).unwrap() != f.of {
                        mismatches += 1;
                    }
                    total += 2;
                }
            }
        }
    }
    // shl for every count 0..=8 against the shifted-out-bits rules
    for count in 0..=8u32 {
        let (u, s) = shl_overflow_preds(&a, count, 8);
        for av in 0..=255u64 {
            let mut model = Model::new();
            model.set("c5_a", av as u128);
            let want_u = predhunt_core::minivm::shift_unsigned_overflow(av, count, Width::W8);
            let want_s = predhunt_core::minivm::shift_signed_overflow(av, count, Width::W8);
            if u.evaluate_bool(&model).unwrap() != want_u {
                mismatches += 1;
            }
            if s.evaluate_bool(&model).unwrap() != want_s {
                mismatches += 1;
            }
            total += 2;
        }
    }
    assert_eq!(mismatches, 0, "{mismatches} mismatches out of {total}");
    pass(5, &format!("{total} exhaustive width-8 predicate/flag comparisons, zero mismatches"));
}

// ---------------------------------------------------------------------------
// criterion 6: signedness detection behaviors

#[test]
fn criterion_6_signedness_detection_suite() {
    let engine = SecEngine::new(PredicateSet::default());
    let x = SymExpr::var("c6_x", 32);
    let mk_path = |items: &[(Cond, Option<u64>)]| {
        let mut p = PathPredicate::new();
        for (i, (cond, site)) in items.iter().enumerate() {
            p.push(
                x.equ(&SymExpr::bv(i as u128, 32)),
                ConstraintKind::Branch { cond: *cond, taken: true },
                0x5000 + i as u64 * 4,
                *site,
                Some(i),
            );
        }
        p
    };
    let stack = CallStack::new();

    // signed mnemonics decide Signed
    for cond in [Cond::S, Cond::Ns, Cond::G, Cond::Ge, Cond::L, Cond::Le] {
        let (s, e) = engine.detect_signedness(&x, &stack, &mk_path(&[(cond, None)]));
        assert_eq!(s, Signedness::Signed, "{cond:?}");
        assert_eq!(e, SignednessEvidence::BranchSlicing);
    }
    // unsigned mnemonics decide Unsigned
    for cond in [Cond::A, Cond::Ae, Cond::B, Cond::Be] {
        let (s, _) = engine.detect_signedness(&x, &stack, &mk_path(&[(cond, None)]));
        assert_eq!(s, Signedness::Unsigned, "{cond:?}");
    }
    // ambiguous jz is skipped; an earlier signed branch decides
    let (s, _) = engine.detect_signedness(&x, &stack, &mk_path(&[(Cond::L, None), (Cond::Z, None)]));
    assert_eq!(s, Signedness::Signed);
    // exhaustion yields Unknown
    let (s, e) = engine.detect_signedness(&x, &stack, &mk_path(&[(Cond::Z, None), (Cond::Nz, None)]));
    assert_eq!(s, Signedness::Unknown);
    assert_eq!(e, SignednessEvidence::None);
    // the call-site-in-stack filter is enforced
    let dead = mk_path(&[(Cond::L, Some(0xBEEF))]);
    let (s, _) = engine.detect_signedness(&x, &stack, &dead);
    assert_eq!(s, Signedness::Unknown);
    let mut live = CallStack::new();
    live.push(CallFrame { call_site: 0xBEEF, callee: 0, ra_slot: 0xFFFFF0 });
    let (s, _) = engine.detect_signedness(&x, &live, &dead);
    assert_eq!(s, Signedness::Signed);

    // unknown-signedness suppression: with only one side satisfiable,
    // nothing is reported
    let mut engine = SecEngine::new(PredicateSet::default());
    let x8 = SymExpr::var("c6_s", 8);
    let carry = SymExpr::bool_const(false);
    let one = SymExpr::bv(1, 8);
    let flags = arith_sym_flags(Mnemonic::Add, 8, &x8, &one, &carry).unwrap();
    let source =
        build_overflow_source(0x60, Mnemonic::Add, 8, &x8, &one, &carry, &flags.result, false)
            .unwrap();
    engine.record_source(source);
    // x >= 128 unsigned makes the unsigned predicate satisfiable (x = 255)
    // but the signed one unsatisfiable (needs x = 127); recorded as a
    // non-branch constraint so signedness stays unknown
    let mut path = PathPredicate::new();
    path.push(
        SymExpr::bv(127, 8).ult(&x8),
        ConstraintKind::Model { fn_name: "guard" },
        0x64,
        None,
        None,
    );
    let call_stack = CallStack::new();
    let mut solver = SolverSession::builtin();
    let original = vec![200u8];
    let input_vars = vec![(std::sync::Arc::from("c6_s"), 0usize)];
    let mut dumps = Vec::new();
    let mut q = QueryCtx {
        path: &path,
        call_stack: &call_stack,
        solver: &mut solver,
        original_input: &original,
        input_vars: &input_vars,
        emit_smt: false,
        smt_dumps: &mut dumps,
    };
    let sink = flags.result.zext(56);
    let reports = engine.check_int_overflow_sink(&mut q, &sink, SinkKind::Branch, 0x68, SinkPrecond::None);
    assert!(reports.is_empty(), "single-sided satisfiability must be suppressed");

    // control 1: with two symbolic operands, carry and signed overflow can
    // coincide, so the conjunction reports both at once
    let mut engine2 = SecEngine::new(PredicateSet::default());
    let y8 = SymExpr::var("c6_y", 8);
    let flags2 = arith_sym_flags(Mnemonic::Add, 8, &x8, &y8, &carry).unwrap();
    let source2 =
        build_overflow_source(0x70, Mnemonic::Add, 8, &x8, &y8, &carry, &flags2.result, false)
            .unwrap();
    engine2.record_source(source2);
    let empty_path = PathPredicate::new();
    let mut q2 = QueryCtx {
        path: &empty_path,
        call_stack: &call_stack,
        solver: &mut solver,
        original_input: &original,
        input_vars: &input_vars,
        emit_smt: false,
        smt_dumps: &mut dumps,
    };
    let sink2 = flags2.result.zext(56);
    let reports2 =
        engine2.check_int_overflow_sink(&mut q2, &sink2, SinkKind::Branch, 0x74, SinkPrecond::None);
    assert_eq!(reports2.len(), 1);
    assert_eq!(reports2[0].kind, ReportKind::IntOverflowBoth);

    // control 2: with a positive constant operand the carry range and the
    // signed-overflow range are disjoint, so the conjunction is
    // unsatisfiable and two separate warnings come out
    let mut engine3 = SecEngine::new(PredicateSet::default());
    let hundred = SymExpr::bv(100, 8);
    let flags3 = arith_sym_flags(Mnemonic::Add, 8, &x8, &hundred, &carry).unwrap();
    let source3 =
        build_overflow_source(0x80, Mnemonic::Add, 8, &x8, &hundred, &carry, &flags3.result, false)
            .unwrap();
    engine3.record_source(source3);
    let mut q3 = QueryCtx {
        path: &empty_path,
        call_stack: &call_stack,
        solver: &mut solver,
        original_input: &original,
        input_vars: &input_vars,
        emit_smt: false,
        smt_dumps: &mut dumps,
    };
    let sink3 = flags3.result.zext(56);
    let reports3 =
        engine3.check_int_overflow_sink(&mut q3, &sink3, SinkKind::Branch, 0x84, SinkPrecond::None);
    assert_eq!(reports3.len(), 2);
    let kinds: std::collections::BTreeSet<_> = reports3.iter().map(|r| r.kind).collect();
    assert!(kinds.contains(&ReportKind::IntOverflowSigned));
    assert!(kinds.contains(&ReportKind::IntOverflowUnsigned));

    pass(6, "signed/unsigned/ambiguous/exhaustion/call-site behaviors, unknown-signedness suppression, and the conjunction/two-warnings flows all hold");
}

// ---------------------------------------------------------------------------
// criterion 7: branch-inversion accuracy and model-vs-trace comparison

#[test]
fn criterion_7_inversion_accuracy_and_model_benefit() {
    let t0 = Instant::now();
    let program = load("bench_branches.s");
    let input = std::fs::read(corpus("inputs/bench10.txt")).unwrap();
    let out = execute_concolic(&program, &input, &SessionConfig::default()).unwrap();
    assert_eq!(out.path.branch_count(), 10);

    let mut solver = SolverSession::builtin();
    let mut satisfiable = Vec::new();
    for c in out.path.iter().filter(|c| c.is_branch()) {
        match invert_branch(&out.path, c.index, &mut solver, &out.original_input, &out.input_vars) {
            InversionResult::NewInput(bytes) => {
                let rr = run_program(&program, &bytes, Mode::Plain, &[]).unwrap();
                satisfiable.push((c.trace_pos.unwrap(), rr.branch_trace));
            }
            other => panic!("branch {} not invertible: {other:?}", c.index),
        }
    }
    assert_eq!(satisfiable.len(), 10);
    let accuracy = compute_accuracy(&satisfiable, &out.run.branch_trace).unwrap();
    assert_eq!(accuracy, 100.0, "inversion accuracy");

    // function-semantics models strictly reduce the path predicate on the
    // string-heavy benchmark
    let strings = load("bench_strings.s");
    let s_input = std::fs::read(corpus("inputs/bench_str.txt")).unwrap();
    let full_cfg = SessionConfig::default();
    let trace_cfg = SessionConfig { models: ModelMode::ByteTrace, ..SessionConfig::default() };
    let full = execute_concolic(&strings, &s_input, &full_cfg).unwrap();
    let byte_trace = execute_concolic(&strings, &s_input, &trace_cfg).unwrap();
    assert!(
        full.path.len() < byte_trace.path.len(),
        "models enabled {} vs disabled {}",
        full.path.len(),
        byte_trace.path.len()
    );

    let elapsed = t0.elapsed();
    pass(7, &format!(
        "10/10 inversions accurate (100%); path {} constraints with models vs {} without ({elapsed:?})",
        full.path.len(),
        byte_trace.path.len()
    ));
}

// ---------------------------------------------------------------------------
// criterion 8: dedup and unsat-index memoization

#[test]
fn criterion_8_dedup_and_memoization() {
    // a looped fault site yields exactly one report
    let looped = "
.text
main:
  sub.64 r15, 16
  mov.64 r0, r15
  mov.64 r1, 4
  icall read
  load.32 r1, [r15]
  mov.64 r2, 0
loop:
  mov.32 r3, r1
  imul.32 r3, 3
  mov.64 r0, r3
  icall print
  add.64 r2, 1
  cmp.64 r2, 100
  jb loop
  mov.64 r0, 0
  halt
";
    let program = Arc::new(assemble(looped).unwrap());
    let out = execute_concolic(&program, b"\x02\x00\x00\x00", &SessionConfig::default()).unwrap();
    let overflow: Vec<_> = out
        .reports
        .iter()
        .filter(|r| {
            matches!(
                r.kind,
                ReportKind::IntOverflowSigned
                    | ReportKind::IntOverflowUnsigned
                    | ReportKind::IntOverflowBoth
            )
        })
        .collect();
    assert_eq!(overflow.len(), 1, "one report per looped site");
    assert!(out.duplicates_suppressed >= 99, "suppressed {}", out.duplicates_suppressed);
    let loop_suppressed = out.duplicates_suppressed;

    // a site proven unsat at constraint index k is never re-solved at >= k
    let guarded = "
.text
main:
  sub.64 r15, 16
  mov.64 r0, r15
  mov.64 r1, 4
  icall read
  load.32 r1, [r15]
  cmp.32 r1, 10
  ja out
  mov.64 r2, 0
loop:
  mov.32 r3, r1
  imul.32 r3, 2
  mov.64 r0, r3
  icall print
  add.64 r2, 1
  cmp.64 r2, 100
  jb loop
  mov.64 r0, 0
  halt
out:
  mov.64 r0, 1
  halt
";
    let program = Arc::new(assemble(guarded).unwrap());
    let out = execute_concolic(&program, b"\x02\x00\x00\x00", &SessionConfig::default()).unwrap();
    assert!(out.reports.is_empty());
    assert!(out.unsat_skips > 0, "memo never engaged");
    for (site, count) in &out.site_queries {
        assert!(
            *count <= 2,
            "site {site:?} was solved {count} times despite the unsat memo"
        );
    }
    pass(8, &format!(
        "looped site reported once ({loop_suppressed} duplicates suppressed); unsat memo skipped {} re-solves",
        out.unsat_skips
    ));
}

//! Test-suite harness: runs positive/negative program pairs through the
//! engine, verifies generated inputs in checked mode, and computes TPR/TNR
//! and accuracy per CWE class in two categories: textual reports and
//! checked-mode (sanitizer-analog) verification.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concolic::{execute_concolic, SessionConfig};
use crate::minivm::{assemble, TrapKind};
use crate::secpred::{ErrorReport, Verification};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Debug)]
pub struct TestCase {
    pub id: String,
    pub cwe: String,
    pub polarity: Polarity,
    pub program: PathBuf,
    pub input: PathBuf,
    pub expected_traps: Vec<TrapKind>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Class4 {
    TP,
    FP,
    TN,
    FN,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub id: String,
    pub cwe: String,
    pub polarity: Polarity,
    pub textual: Option<Class4>,
    pub verified: Option<Class4>,
    #[serde(skip)]
    pub reports: Vec<ErrorReport>,
    pub errored: Option<String>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("manifest line {0}: {1}")]
    Manifest(usize, String),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

pub fn parse_manifest(path: &Path) -> Result<Vec<TestCase>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.into(), e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(HarnessError::Manifest(
                lineno + 1,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let polarity = match fields[2] {
            "positive" => Polarity::Positive,
            "negative" => Polarity::Negative,
            other => {
                return Err(HarnessError::Manifest(
                    lineno + 1,
                    format!("bad polarity {other}"),
                ))
            }
        };
        let expected_traps = if fields[5] == "-" {
            Vec::new()
        } else {
            fields[5]
                .split('|')
                .map(|t| match t {
                    "NullDeref" => Ok(TrapKind::NullDeref),
                    "OutOfBounds" => Ok(TrapKind::OutOfBounds),
                    "DivByZero" => Ok(TrapKind::DivByZero),
                    "OverflowWatch" => Ok(TrapKind::OverflowWatch),
                    "StackSmash" => Ok(TrapKind::StackSmash),
                    other => Err(HarnessError::Manifest(
                        lineno + 1,
                        format!("bad trap kind {other}"),
                    )),
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        cases.push(TestCase {
            id: fields[0].to_string(),
            cwe: fields[1].to_string(),
            polarity,
            program: dir.join(fields[3]),
            input: dir.join(fields[4]),
            expected_traps,
        });
    }
    Ok(cases)
}

/// Runs one case: concolic session, textual classification, then the
/// checked-mode verification downgrade (TP -> FN when no generated input
/// reproduces a matching trap; FP and TN never change).
pub fn run_case(case: &TestCase, config: &SessionConfig) -> CaseResult {
    let mut result = CaseResult {
        id: case.id.clone(),
        cwe: case.cwe.clone(),
        polarity: case.polarity,
        textual: None,
        verified: None,
        reports: Vec::new(),
        errored: None,
    };
    let source = match std::fs::read_to_string(&case.program) {
        Ok(s) => s,
        Err(e) => {
            result.errored = Some(format!("read {}: {e}", case.program.display()));
            return result;
        }
    };
    let program = match assemble(&source) {
        Ok(p) => Arc::new(p),
        Err(e) => {
            result.errored = Some(format!("assemble {}: {e}", case.program.display()));
            return result;
        }
    };
    let input = match std::fs::read(&case.input) {
        Ok(b) => b,
        Err(e) => {
            result.errored = Some(format!("read {}: {e}", case.input.display()));
            return result;
        }
    };
    let mut config = config.clone();
    config.verify = true;
    let outcome = match execute_concolic(&program, &input, &config) {
        Ok(o) => o,
        Err(e) => {
            result.errored = Some(format!("session: {e}"));
            return result;
        }
    };
    let alarmed = !outcome.reports.is_empty();
    let any_verified = outcome
        .reports
        .iter()
        .any(|r| r.verification == Verification::Verified);
    result.reports = outcome.reports;
    let (textual, verified) = match (case.polarity, alarmed) {
        (Polarity::Positive, true) => (
            Class4::TP,
            if any_verified { Class4::TP } else { Class4::FN },
        ),
        (Polarity::Positive, false) => (Class4::FN, Class4::FN),
        (Polarity::Negative, true) => (Class4::FP, Class4::FP),
        (Polarity::Negative, false) => (Class4::TN, Class4::TN),
    };
    result.textual = Some(textual);
    result.verified = Some(verified);
    result
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Counts {
    fn add(&mut self, class: Class4) {
        match class {
            Class4::TP => self.tp += 1,
            Class4::FP => self.fp += 1,
            Class4::TN => self.tn += 1,
            Class4::FN => self.fn_ += 1,
        }
    }

    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| 100.0 * self.tp as f64 / p as f64)
    }

    pub fn tnr(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| 100.0 * self.tn as f64 / n as f64)
    }

    pub fn acc(&self) -> Option<f64> {
        let total = self.tp + self.fp + self.tn + self.fn_;
        (total > 0).then(|| 100.0 * (self.tp + self.tn) as f64 / total as f64)
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ClassMetrics {
    pub p: u64,
    pub n: u64,
    pub textual: Counts,
    pub verified: Counts,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SuiteMetrics {
    pub classes: BTreeMap<String, ClassMetrics>,
    pub total: ClassMetrics,
    pub errored: Vec<String>,
}

impl SuiteMetrics {
    pub fn from_results(results: &[CaseResult]) -> SuiteMetrics {
        let mut metrics = SuiteMetrics::default();
        for r in results {
            if let Some(err) = &r.errored {
                metrics.errored.push(format!("{}: {err}", r.id));
                continue;
            }
            let class = metrics.classes.entry(r.cwe.clone()).or_default();
            for target in [class, &mut metrics.total] {
                match r.polarity {
                    Polarity::Positive => target.p += 1,
                    Polarity::Negative => target.n += 1,
                }
                target.textual.add(r.textual.unwrap());
                target.verified.add(r.verified.unwrap());
            }
        }
        metrics
    }

    /// Text table shaped like the per-CWE results table: textual and
    /// verified categories side by side, percentages at two decimals.
    pub fn render_table(&self) -> String {
        fn pct(v: Option<f64>) -> String {
            match v {
                Some(x) => format!("{x:.2}%"),
                None => "N/A".to_string(),
            }
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>5} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}\n",
            "CWE", "P=N", "TPR", "TNR", "ACC", "vTPR", "vTNR", "vACC"
        ));
        let mut render_row = |name: &str, m: &ClassMetrics| {
            out.push_str(&format!(
                "{:<28} {:>5} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}\n",
                name,
                m.p,
                pct(m.textual.tpr()),
                pct(m.textual.tnr()),
                pct(m.textual.acc()),
                pct(m.verified.tpr()),
                pct(m.verified.tnr()),
                pct(m.verified.acc()),
            ));
        };
        for (name, m) in &self.classes {
            render_row(name, m);
        }
        render_row("TOTAL", &self.total);
        if !self.errored.is_empty() {
            out.push_str(&format!("errored cases: {}\n", self.errored.join("; ")));
        }
        out
    }
}

/// Runs all cases, parallel across a worker count, and aggregates.
pub fn run_suite(
    cases: &[TestCase],
    config: &SessionConfig,
    workers: usize,
) -> (Vec<CaseResult>, SuiteMetrics) {
    let workers = workers.max(1);
    let mut results: Vec<Option<CaseResult>> = vec![None; cases.len()];
    if workers == 1 {
        for (i, case) in cases.iter().enumerate() {
            results[i] = Some(run_case(case, config));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<CaseResult>>> =
            (0..cases.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers.min(cases.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= cases.len() {
                        break;
                    }
                    let r = run_case(&cases[i], config);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        for (i, slot) in slots.into_iter().enumerate() {
            results[i] = slot.into_inner().unwrap();
        }
    }
    let results: Vec<CaseResult> = results.into_iter().map(Option::unwrap).collect();
    let metrics = SuiteMetrics::from_results(&results);
    (results, metrics)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InputType {
    I8,
    I16,
    I32,
    I64,
}

/// Crafted inputs: "+0" then zero padding and a small final digit, sized so
/// the symbolic digits can express the type's full magnitude. The first
/// zero stays concrete under the scanf quirk, and the '+' lets the sign
/// flip.
pub fn craft_input(ty: InputType) -> Vec<u8> {
    match ty {
        InputType::I8 => b"+0002".to_vec(),
        InputType::I16 => b"+000002".to_vec(),
        InputType::I32 => b"+00000000002".to_vec(),
        InputType::I64 => b"+0000000000000000001".to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minivm::scan_int;

    #[test]
    fn crafted_inputs_published_shapes() {
        assert_eq!(craft_input(InputType::I32), b"+00000000002");
        assert_eq!(craft_input(InputType::I64), b"+0000000000000000001");
        assert_eq!(craft_input(InputType::I8), b"+0002");
    }

    #[test]
    fn crafted_i8_expresses_full_range() {
        // with the first zero concrete, the remaining digits and the sign
        // must be able to express every i8 value
        let input = craft_input(InputType::I8);
        for target in -128i64..=127 {
            let digits = input.len() - 2; // '+' and the concrete '0'
            let mag = target.unsigned_abs();
            let mut bytes = vec![if target < 0 { b'-' } else { b'+' }, b'0'];
            let s = format!("{:0width$}", mag, width = digits);
            assert!(s.len() <= digits, "magnitude {mag} needs {} digits", s.len());
            bytes.extend_from_slice(s.as_bytes());
            let scan = scan_int(&bytes, 10).unwrap();
            assert_eq!(scan.signed_value(8) as i8 as i64, target);
        }
    }

    #[test]
    fn metrics_identities() {
        let mk = |id: &str, cwe: &str, pol, t, v| CaseResult {
            id: id.into(),
            cwe: cwe.into(),
            polarity: pol,
            textual: Some(t),
            verified: Some(v),
            reports: Vec::new(),
            errored: None,
        };
        let results = vec![
            mk("a", "CWE369", Polarity::Positive, Class4::TP, Class4::TP),
            mk("b", "CWE369", Polarity::Negative, Class4::TN, Class4::TN),
        ];
        let m = SuiteMetrics::from_results(&results);
        let c = &m.classes["CWE369"];
        assert_eq!(c.textual.tpr(), Some(100.0));
        assert_eq!(c.textual.tnr(), Some(100.0));
        assert_eq!(c.textual.acc(), Some(100.0));
        assert_eq!(m.total.verified.acc(), Some(100.0));

        // one downgraded positive
        let results = vec![
            mk("a", "CWE190", Polarity::Positive, Class4::TP, Class4::FN),
            mk("b", "CWE190", Polarity::Negative, Class4::TN, Class4::TN),
        ];
        let m = SuiteMetrics::from_results(&results);
        let c = &m.classes["CWE190"];
        assert_eq!(c.textual.acc(), Some(100.0));
        assert_eq!(c.verified.acc(), Some(50.0));
        // verified TP <= textual TP; TN identical
        assert!(c.verified.tp <= c.textual.tp);
        assert_eq!(c.verified.tn, c.textual.tn);
    }

    #[test]
    fn manifest_parsing_errors() {
        let dir = std::env::temp_dir().join(format!("ph_manifest_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.txt");
        std::fs::write(&path, "a, CWE369, positive, p.s, i.txt\n").unwrap();
        assert!(matches!(
            parse_manifest(&path),
            Err(HarnessError::Manifest(1, _))
        ));
        std::fs::write(&path, "# comment\na, CWE369, sideways, p.s, i.txt, -\n").unwrap();
        assert!(matches!(
            parse_manifest(&path),
            Err(HarnessError::Manifest(2, _))
        ));
        std::fs::write(
            &path,
            "a, CWE369, positive, p.s, i.txt, DivByZero\nb, CWE369, negative, q.s, i.txt, -\n",
        )
        .unwrap();
        let cases = parse_manifest(&path).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].expected_traps, vec![TrapKind::DivByZero]);
        assert!(cases[1].expected_traps.is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }
}

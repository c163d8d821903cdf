#![forbid(unsafe_code)]

//! Concolic execution engine with security predicates for a deterministic
//! 64-bit register VM, plus symbolic models for common C-library functions
//! and a CWE test-suite harness that scores detection accuracy.

pub mod bitblast;
pub mod expr;
pub mod hashutil;
pub mod concolic;
pub mod harness;
pub mod minivm;
pub mod path;
pub mod secpred;
pub mod semantics;
pub mod smtlib;
pub mod solver;

pub use concolic::{
    compute_accuracy, execute_concolic, generate_input, invert_branch, ConcolicOutcome,
    InversionResult, ModelMode, SessionConfig,
};
pub use expr::{ExprKind, Model, SymExpr};
pub use harness::{craft_input, parse_manifest, run_case, run_suite, InputType, SuiteMetrics};
pub use minivm::{assemble, Mode, Program, RunResult, TrapKind, Watchpoint};
pub use secpred::{ErrorReport, PredicateSet, ReportKind, SignednessEvidence, Verification};
pub use solver::{SolverBackend, SolverSession, SolverVerdict, UnknownReason};

//! Concolic execution: drives the VM, mirrors every instruction over the
//! symbolic state, records the path predicate, dispatches function-semantics
//! models and security-predicate hooks, inverts branches, and rebuilds
//! inputs from models.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::expr::{and_all, or_all, Model, SymExpr, VarName};
use crate::minivm::{
    AllocInfo, BranchRecord, Cond, Event, ExecInfo, InputReadEvent, Instruction, Intrinsic,
    IntrinsicEvent, MemRef, Mnemonic, Mode, Operand, Program, RunResult, Vm, VmError, Width,
};
use crate::path::{CallFrame, CallStack, ConstraintKind, PathPredicate};
use crate::secpred::{
    arith_sym_flags, build_overflow_source, ErrorReport, PredicateSet, QueryCtx, ReportKind,
    SecEngine, SinkKind, SinkPrecond, SiteKey, Verification,
};
use crate::semantics::{
    apply_copy, conversion_model, erase_range, memchr_model, memcmp_model, sign_class_normalizer,
    strchr_model, strcpy_constraints, strlen_model, strstr_model, tie_constraint, BuiltModel,
    ConvVariant, ModelError, SymBuf, TieSpec,
};
use crate::solver::{SolverBackend, SolverSession, SolverStats, SolverVerdict};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("vm error: {0}")]
    Vm(#[from] VmError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ModelMode {
    /// Single-formula function semantics (the default).
    Full,
    /// Emulates model-free DSE: the internal comparison/scan loops of the
    /// wrapped functions are replayed as per-byte constraints pinned to the
    /// concrete trace, and modeled returns stay concrete.
    ByteTrace,
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub predicates: PredicateSet,
    pub models: ModelMode,
    pub solver_backend: SolverBackend,
    pub timeout_ms: u64,
    pub emit_smt: bool,
    pub verify: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            predicates: PredicateSet::default(),
            models: ModelMode::Full,
            solver_backend: SolverBackend::Builtin,
            timeout_ms: crate::solver::DEFAULT_TIMEOUT_MS,
            emit_smt: false,
            verify: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SymbolicTrace {
    pub notes: Vec<String>,
    pub concretizations: u64,
    pub models_applied: u64,
    pub models_skipped: u64,
}

#[derive(Debug)]
pub struct ConcolicOutcome {
    pub run: RunResult,
    pub path: PathPredicate,
    pub trace: SymbolicTrace,
    pub reports: Vec<ErrorReport>,
    pub input_vars: Vec<(VarName, usize)>,
    pub identity: Model,
    pub solver_stats: SolverStats,
    pub site_queries: HashMap<SiteKey, u64>,
    pub duplicates_suppressed: u64,
    pub unsat_skips: u64,
    pub smt_dumps: Vec<(String, String)>,
    pub original_input: Vec<u8>,
}

impl ConcolicOutcome {
    /// Path-predicate soundness: every constraint holds under the actual
    /// input bytes.
    pub fn check_path_soundness(&self) -> bool {
        self.path
            .iter()
            .all(|c| c.expr.evaluate_bool(&self.identity).unwrap_or(false))
    }
}

/// Rebuilds an input from a model: same length, bytes replaced where the
/// model assigns their variables.
pub fn generate_input(model: &Model, original: &[u8], input_vars: &[(VarName, usize)]) -> Vec<u8> {
    let mut out = original.to_vec();
    for (name, offset) in input_vars {
        if let Some(v) = model.get(name) {
            if *offset < out.len() {
                out[*offset] = v as u8;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InversionResult {
    NewInput(Vec<u8>),
    Unsat,
    Unknown,
}

/// Inverts the constraint at `index`: earlier sliced constraints keep their
/// taken orientation, the target is negated.
pub fn invert_branch(
    path: &PathPredicate,
    index: usize,
    solver: &mut SolverSession,
    original_input: &[u8],
    input_vars: &[(VarName, usize)],
) -> InversionResult {
    let target = match path.get(index) {
        Some(c) => c,
        None => return InversionResult::Unknown,
    };
    let prefix = &path.as_slice()[..index];
    let mut assertions: Vec<SymExpr> = crate::path::slice(prefix, target.vars())
        .into_iter()
        .map(|c| c.expr.clone())
        .collect();
    assertions.push(target.expr.not_bool());
    match solver.solve(&assertions) {
        Ok(SolverVerdict::Sat(model)) => {
            InversionResult::NewInput(generate_input(&model, original_input, input_vars))
        }
        Ok(SolverVerdict::Unsat) => InversionResult::Unsat,
        _ => InversionResult::Unknown,
    }
}

/// The branch-inversion accuracy definition: an inversion counts as accurate
/// iff the new trace equals the original up to the target position with the
/// final direction flipped. Returns None when no satisfiable inversions
/// exist.
pub fn compute_accuracy(
    inversions: &[(usize, Vec<BranchRecord>)],
    original: &[BranchRecord],
) -> Option<f64> {
    if inversions.is_empty() {
        return None;
    }
    let mut accurate = 0usize;
    for (pos, new_trace) in inversions {
        let pos = *pos;
        if pos >= original.len() || pos >= new_trace.len() {
            continue;
        }
        let prefix_ok = (0..pos).all(|j| new_trace[j] == original[j]);
        let flipped = new_trace[pos].addr == original[pos].addr
            && new_trace[pos].taken == !original[pos].taken;
        if prefix_ok && flipped {
            accurate += 1;
        }
    }
    Some(100.0 * accurate as f64 / inversions.len() as f64)
}

/// Scan bound above which return-value models are skipped; keeps formula
/// construction finite under attacker-sized count arguments.
const MODEL_SCAN_CAP: usize = 4096;

#[derive(Clone, Debug, Default)]
struct SymFlagState {
    cf: Option<SymExpr>,
    of: Option<SymExpr>,
    zf: Option<SymExpr>,
    sf: Option<SymExpr>,
}

struct Session<'a> {
    vm: Vm,
    program: &'a Arc<Program>,
    config: &'a SessionConfig,
    sym_regs: HashMap<u8, SymExpr>,
    sym_mem: HashMap<u64, SymExpr>,
    sym_flags: SymFlagState,
    path: PathPredicate,
    call_stack: CallStack,
    input_vars: Vec<(VarName, usize)>,
    identity: Model,
    engine: SecEngine,
    solver: SolverSession,
    reports: Vec<ErrorReport>,
    trace: SymbolicTrace,
    smt_dumps: Vec<(String, String)>,
    original_input: Vec<u8>,
    prev_arith: Option<(Mnemonic, Width, Option<u8>)>,
}

/// Runs one full concolic session over the program and input.
pub fn execute_concolic(
    program: &Arc<Program>,
    input: &[u8],
    config: &SessionConfig,
) -> Result<ConcolicOutcome, EngineError> {
    let vm = Vm::new(program.clone(), input.to_vec(), Mode::Plain, Vec::new());
    let mut session = Session {
        vm,
        program,
        config,
        sym_regs: HashMap::new(),
        sym_mem: HashMap::new(),
        sym_flags: SymFlagState::default(),
        path: PathPredicate::new(),
        call_stack: CallStack::new(),
        input_vars: Vec::new(),
        identity: Model::new(),
        engine: SecEngine::new(config.predicates),
        solver: SolverSession::new(config.solver_backend.clone(), config.timeout_ms),
        reports: Vec::new(),
        trace: SymbolicTrace::default(),
        smt_dumps: Vec::new(),
        original_input: input.to_vec(),
        prev_arith: None,
    };
    while !session.vm.done() {
        let event = session.vm.step()?;
        session.handle(event);
    }
    let run = session.vm.run_result().unwrap();
    let mut reports = session.reports;
    if config.verify {
        for report in &mut reports {
            verify_report(program, report);
        }
    }
    Ok(ConcolicOutcome {
        run,
        path: session.path,
        trace: session.trace,
        reports,
        input_vars: session.input_vars,
        identity: session.identity,
        solver_stats: session.solver.stats.clone(),
        site_queries: session.engine.site_queries.clone(),
        duplicates_suppressed: session.engine.dedup.duplicates_suppressed,
        unsat_skips: session.engine.dedup.unsat_skips,
        smt_dumps: session.smt_dumps,
        original_input: session.original_input,
    })
}

/// Re-executes a report's generated input in checked mode with its
/// watchpoints and records the verdict on the report.
pub fn verify_report(program: &Arc<Program>, report: &mut ErrorReport) {
    let mut vm = Vm::new(
        program.clone(),
        report.input.clone(),
        Mode::Checked,
        report.watchpoints.clone(),
    );
    report.verification = match vm.run_to_end() {
        Ok(rr) => match rr.outcome {
            crate::minivm::Outcome::Trap { kind, addr } if trap_matches(report.kind, kind) => {
                report.trap_addr = Some(addr);
                Verification::Verified
            }
            _ => Verification::Refuted,
        },
        Err(_) => Verification::Refuted,
    };
}

pub fn trap_matches(report: ReportKind, trap: crate::minivm::TrapKind) -> bool {
    use crate::minivm::TrapKind as T;
    match report {
        ReportKind::NullDeref => matches!(trap, T::NullDeref),
        ReportKind::DivByZero => matches!(trap, T::DivByZero),
        ReportKind::OutOfBoundsRead
        | ReportKind::OutOfBoundsWrite
        | ReportKind::WriteWhatWhere
        | ReportKind::CopySizeOverflow
        | ReportKind::AllocSizeOverflow => {
            matches!(trap, T::OutOfBounds | T::StackSmash | T::NullDeref)
        }
        ReportKind::IntOverflowSigned
        | ReportKind::IntOverflowUnsigned
        | ReportKind::IntOverflowBoth => matches!(trap, T::OverflowWatch | T::OutOfBounds),
    }
}

/// Builds a QueryCtx from disjoint session fields inline, so the borrow
/// checker can see that the engine borrow does not overlap it.
macro_rules! qctx {
    ($s:expr) => {
        QueryCtx {
            path: &$s.path,
            call_stack: &$s.call_stack,
            solver: &mut $s.solver,
            original_input: &$s.original_input,
            input_vars: &$s.input_vars,
            emit_smt: $s.config.emit_smt,
            smt_dumps: &mut $s.smt_dumps,
        }
    };
}

impl Session<'_> {
    fn note(&mut self, text: String) {
        self.trace.notes.push(text);
    }

    // --- symbolic state accessors ---------------------------------------

    fn reg_expr64(&self, r: u8) -> Option<SymExpr> {
        self.sym_regs.get(&r).cloned()
    }

    fn reg_expr(&self, r: u8, w: Width) -> Option<SymExpr> {
        self.reg_expr64(r)
            .map(|e| e.extract(w.bits() - 1, 0))
            .filter(|e| e.as_const().is_none())
    }

    fn operand_expr(&self, op: &Operand, w: Width) -> Option<SymExpr> {
        match op {
            Operand::Reg(r) => self.reg_expr(*r, w),
            Operand::Imm(_) => None,
            Operand::Mem(_) => None, // loads materialize memory separately
        }
    }

    fn mem_value_expr(&self, addr: u64, w: Width) -> Option<SymExpr> {
        let n = w.bytes();
        if (0..n).all(|i| !self.sym_mem.contains_key(&(addr + i as u64))) {
            return None;
        }
        let bytes = self.vm.peek_bytes(addr, n);
        let mut expr: Option<SymExpr> = None;
        for (i, concrete) in bytes.iter().enumerate() {
            let byte = match self.sym_mem.get(&(addr + i as u64)) {
                Some(e) => e.clone(),
                None => SymExpr::bv(*concrete as u128, 8),
            };
            expr = Some(match expr {
                None => byte,
                Some(acc) => byte.concat(&acc),
            });
        }
        expr.filter(|e| e.as_const().is_none())
    }

    fn addr_expr(&self, m: &MemRef) -> Option<SymExpr> {
        let base_sym = m.base.and_then(|r| self.reg_expr64(r));
        let index_sym = m.index.and_then(|(r, _)| self.reg_expr64(r));
        if base_sym.is_none() && index_sym.is_none() {
            return None;
        }
        let mut expr = match (m.base, &base_sym) {
            (Some(r), None) => SymExpr::bv(self.vm.regs[r as usize] as u128, 64),
            (_, Some(e)) => e.clone(),
            (None, None) => SymExpr::bv(0, 64),
        };
        if let Some((r, scale)) = m.index {
            let idx = match &index_sym {
                Some(e) => e.clone(),
                None => SymExpr::bv(self.vm.regs[r as usize] as u128, 64),
            };
            expr = expr.add(&idx.mul(&SymExpr::bv(scale as u128, 64)));
        }
        if m.disp != 0 {
            expr = expr.add(&SymExpr::bv(m.disp as u128, 64));
        }
        Some(expr).filter(|e| e.as_const().is_none())
    }

    /// Installs a register expression after the state-consistency check:
    /// a mismatch against the concrete value concretizes the location.
    fn set_reg_expr(&mut self, r: u8, w: Width, expr: Option<SymExpr>, concrete: u64) {
        match expr {
            Some(e) => {
                let full = e.zext_to(64);
                match full.evaluate(&self.identity) {
                    Ok(v) if v as u64 == concrete & w.mask() || v as u64 == concrete => {
                        if full.as_const().is_some() {
                            self.sym_regs.remove(&r);
                        } else {
                            self.sym_regs.insert(r, full);
                        }
                    }
                    _ => {
                        self.trace.concretizations += 1;
                        self.sym_regs.remove(&r);
                    }
                }
            }
            None => {
                self.sym_regs.remove(&r);
            }
        }
    }

    fn store_mem_expr(&mut self, addr: u64, w: Width, expr: Option<SymExpr>) {
        let n = w.bytes();
        match expr {
            Some(e) => {
                for i in 0..n {
                    let byte = e.extract(8 * i as u32 + 7, 8 * i as u32);
                    if byte.as_const().is_some() {
                        self.sym_mem.remove(&(addr + i as u64));
                    } else {
                        self.sym_mem.insert(addr + i as u64, byte);
                    }
                }
            }
            None => erase_range(&mut self.sym_mem, addr, n),
        }
    }

    fn clear_sym_flags(&mut self) {
        self.sym_flags = SymFlagState::default();
    }

    // --- constraint recording --------------------------------------------

    fn push_constraint(&mut self, expr: SymExpr, kind: ConstraintKind, inst_addr: u64, trace_pos: Option<usize>) {
        if expr.as_const().is_some() {
            return;
        }
        match expr.evaluate_bool(&self.identity) {
            Ok(true) => {
                self.path.push(expr, kind, inst_addr, self.call_stack.innermost_site(), trace_pos);
            }
            _ => {
                debug_assert!(false, "constraint false under identity at {inst_addr:#x}: {expr}");
                self.trace.concretizations += 1;
                self.note(format!("dropped inconsistent constraint at {inst_addr:#x}"));
            }
        }
    }

    // --- event dispatch ----------------------------------------------------

    fn handle(&mut self, event: Event) {
        match event {
            Event::Exec(info) => self.handle_exec(info),
            Event::Branch { addr, cond, taken, .. } => self.handle_branch(addr, cond, taken),
            Event::InputRead(ev) => self.handle_input_read(ev),
            Event::Intrinsic(ev) => self.handle_intrinsic(ev),
            Event::Halt { .. } | Event::Trap { .. } => {}
        }
    }

    fn handle_exec(&mut self, info: ExecInfo) {
        let inst = self.program.instructions[info.index].clone();
        let w = inst.width;
        match inst.mnemonic {
            Mnemonic::Mov => {
                let e = self.operand_expr(inst.src.as_ref().unwrap(), w);
                self.set_reg_expr(dst_reg(&inst), w, e, info.result.unwrap());
            }
            Mnemonic::Load => {
                let m = mem_ref(&inst.src);
                let ea = info.eff_addr.unwrap();
                self.memory_access_hooks(&m, ea, false, false, info.addr);
                let e = self.mem_value_expr(ea, w);
                self.set_reg_expr(dst_reg(&inst), w, e, info.result.unwrap());
            }
            Mnemonic::Store => {
                let m = mem_ref(&inst.dst);
                let ea = info.eff_addr.unwrap();
                let value_expr = self.operand_expr(inst.src.as_ref().unwrap(), w);
                self.memory_access_hooks(&m, ea, true, value_expr.is_some(), info.addr);
                self.store_mem_expr(ea, w, value_expr);
            }
            Mnemonic::Lea => {
                let m = mem_ref(&inst.src);
                let e = self.addr_expr(&m);
                self.set_reg_expr(dst_reg(&inst), Width::W64, e, info.result.unwrap());
            }
            Mnemonic::Div => {
                let dst = dst_reg(&inst);
                let a = self.reg_expr(dst, w);
                let b = self.operand_expr(inst.src.as_ref().unwrap(), w);
                if let Some(divisor) = &b {
                    let site = info.addr;
                    let report = self.engine.check_div_zero(&mut qctx!(self), divisor, site);
                    if let Some(r) = report {
                        self.reports.push(r);
                    }
                }
                let result_expr = match (&a, &b) {
                    (None, None) => None,
                    _ => {
                        let ae = a.unwrap_or_else(|| SymExpr::bv(info.dst_pre as u128, w.bits()));
                        let be = b.unwrap_or_else(|| SymExpr::bv(info.src_val as u128, w.bits()));
                        Some(ae.udiv(&be))
                    }
                };
                // div leaves flags alone
                self.set_reg_expr(dst, w, result_expr, info.result.unwrap());
                self.prev_arith = Some((inst.mnemonic, w, Some(dst)));
            }
            Mnemonic::Not => {
                let dst = dst_reg(&inst);
                let e = self.reg_expr(dst, w).map(|a| a.bvnot());
                self.set_reg_expr(dst, w, e, info.result.unwrap());
                self.prev_arith = Some((inst.mnemonic, w, Some(dst)));
            }
            Mnemonic::Add
            | Mnemonic::Adc
            | Mnemonic::Sub
            | Mnemonic::Sbb
            | Mnemonic::Mul
            | Mnemonic::Imul
            | Mnemonic::Shl
            | Mnemonic::Shr
            | Mnemonic::Sar
            | Mnemonic::And
            | Mnemonic::Or
            | Mnemonic::Xor
            | Mnemonic::Cmp
            | Mnemonic::Test
            | Mnemonic::Neg => self.handle_arith(&inst, &info),
            Mnemonic::Push => {
                let slot = info.stack_slot.unwrap();
                let e = self.operand_expr(inst.dst.as_ref().unwrap(), Width::W64);
                self.store_mem_expr(slot, Width::W64, e);
            }
            Mnemonic::Pop => {
                let slot = info.stack_slot.unwrap();
                let e = self.mem_value_expr(slot, Width::W64);
                self.set_reg_expr(dst_reg(&inst), Width::W64, e, info.result.unwrap());
            }
            Mnemonic::Call => {
                let slot = info.stack_slot.unwrap();
                self.engine.shadow_stack.on_call(slot);
                self.call_stack.push(CallFrame {
                    call_site: info.addr,
                    callee: info.branch_target.unwrap(),
                    ra_slot: slot,
                });
                erase_range(&mut self.sym_mem, slot, 8);
            }
            Mnemonic::Ret => {
                self.engine.shadow_stack.pop_below(info.sp_after);
                self.call_stack.pop();
            }
            Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Icall | Mnemonic::Halt => {}
        }
    }

    fn handle_arith(&mut self, inst: &Instruction, info: &ExecInfo) {
        let w = inst.width;
        let dst = dst_reg(inst);
        let a_sym = self.reg_expr(dst, w);
        let b_sym = match inst.mnemonic {
            Mnemonic::Neg => None,
            _ => self.operand_expr(inst.src.as_ref().unwrap(), w),
        };
        let writes_back = !matches!(inst.mnemonic, Mnemonic::Cmp | Mnemonic::Test);
        if a_sym.is_none() && b_sym.is_none() {
            self.clear_sym_flags();
            if writes_back {
                self.set_reg_expr(dst, w, None, info.result.unwrap());
            }
            self.prev_arith = Some((inst.mnemonic, w, Some(dst)));
            return;
        }
        let a = a_sym
            .clone()
            .unwrap_or_else(|| SymExpr::bv(info.dst_pre as u128, w.bits()));
        let b = b_sym
            .clone()
            .unwrap_or_else(|| SymExpr::bv(info.src_val as u128, w.bits()));
        let carry = match &self.sym_flags.cf {
            Some(e) => e.clone(),
            None => SymExpr::bool_const(info.carry_in),
        };

        match arith_sym_flags(inst.mnemonic, w.bits(), &a, &b, &carry) {
            Some(flags) => {
                // consistency: flags and result must match the VM
                let f = info.flags_after;
                self.sym_flags = SymFlagState {
                    cf: check_flag(&flags.cf, f.cf, &self.identity, &mut self.trace),
                    of: check_flag(&flags.of, f.of, &self.identity, &mut self.trace),
                    zf: check_flag(&flags.zf, f.zf, &self.identity, &mut self.trace),
                    sf: check_flag(&flags.sf, f.sf, &self.identity, &mut self.trace),
                };
                if writes_back {
                    self.set_reg_expr(dst, w, Some(flags.result.clone()), info.result.unwrap());
                }
                // overflow source bookkeeping
                let pair_final = match (inst.mnemonic, self.prev_arith) {
                    (Mnemonic::Adc, Some((Mnemonic::Add, pw, pdst)))
                    | (Mnemonic::Sbb, Some((Mnemonic::Sub, pw, pdst))) => {
                        pw == w && pdst != Some(dst)
                    }
                    _ => false,
                };
                if self.config.predicates.int_overflow {
                    if let Some(source) = build_overflow_source(
                        info.addr,
                        inst.mnemonic,
                        w.bits(),
                        &a,
                        &b,
                        &carry,
                        &flags.result,
                        pair_final,
                    ) {
                        self.engine.record_source(source);
                    }
                }
            }
            None => {
                // symbolic shift count or zero-count shift: result stays
                // symbolic where possible, flags concretize
                let result_expr = match inst.mnemonic {
                    Mnemonic::Shl => Some(a.shl(&b)),
                    Mnemonic::Shr => Some(a.lshr(&b)),
                    Mnemonic::Sar => Some(a.ashr(&b)),
                    _ => None,
                };
                if b.as_const().map(|c| c as u64 & shift_mask(w) == 0) == Some(true) {
                    // count 0: nothing moved, flags untouched
                    if writes_back {
                        self.set_reg_expr(dst, w, a_sym, info.result.unwrap());
                    }
                    self.prev_arith = Some((inst.mnemonic, w, Some(dst)));
                    return;
                }
                self.clear_sym_flags();
                if writes_back {
                    self.set_reg_expr(dst, w, result_expr, info.result.unwrap());
                }
            }
        }
        self.prev_arith = Some((inst.mnemonic, w, Some(dst)));
    }

    fn handle_branch(&mut self, addr: u64, cond: Cond, taken: bool) {
        let concrete = self.vm.flags;
        let get = |sym: &Option<SymExpr>, conc: bool| -> SymExpr {
            sym.clone().unwrap_or_else(|| SymExpr::bool_const(conc))
        };
        let cf = get(&self.sym_flags.cf, concrete.cf);
        let of = get(&self.sym_flags.of, concrete.of);
        let zf = get(&self.sym_flags.zf, concrete.zf);
        let sf = get(&self.sym_flags.sf, concrete.sf);
        let xor = |a: &SymExpr, b: &SymExpr| {
            or_all(vec![
                and_all(vec![a.clone(), b.not_bool()]),
                and_all(vec![a.not_bool(), b.clone()]),
            ])
        };
        let cond_expr = match cond {
            Cond::Z => zf,
            Cond::Nz => zf.not_bool(),
            Cond::S => sf,
            Cond::Ns => sf.not_bool(),
            Cond::G => and_all(vec![zf.not_bool(), xor(&sf, &of).not_bool()]),
            Cond::Ge => xor(&sf, &of).not_bool(),
            Cond::L => xor(&sf, &of),
            Cond::Le => or_all(vec![zf, xor(&sf, &of)]),
            Cond::A => and_all(vec![cf.not_bool(), zf.not_bool()]),
            Cond::Ae => cf.not_bool(),
            Cond::B => cf,
            Cond::Be => or_all(vec![cf, zf]),
        };
        if cond_expr.as_const().is_some() {
            return; // branch condition is concrete
        }
        // the branch is an integer-overflow sink before it enters the path
        if self.config.predicates.int_overflow {
            let sink = cond_expr.clone();
            let reports = self.engine.check_int_overflow_sink(
                &mut qctx!(self),
                &sink,
                SinkKind::Branch,
                addr,
                SinkPrecond::None,
            );
            self.reports.extend(reports);
        }
        let oriented = if taken { cond_expr } else { cond_expr.not_bool() };
        let trace_pos = self.vm.branch_trace.len() - 1;
        self.push_constraint(
            oriented,
            ConstraintKind::Branch { cond, taken },
            addr,
            Some(trace_pos),
        );
    }

    fn memory_access_hooks(
        &mut self,
        m: &MemRef,
        concrete_addr: u64,
        is_write: bool,
        value_symbolic: bool,
        site: u64,
    ) {
        let addr_expr = match self.addr_expr(m) {
            Some(e) => e,
            None => return,
        };
        // null dereference first, then bounds, then the overflow sink
        let r1 = self.engine.check_null_deref(&mut qctx!(self), &addr_expr, site);
        let r2 = self.engine.check_oob(
            &mut qctx!(self),
            &addr_expr,
            concrete_addr,
            is_write,
            value_symbolic,
            site,
        );
        let r3 = if self.config.predicates.int_overflow {
            self.engine.check_int_overflow_sink(
                &mut qctx!(self),
                &addr_expr,
                SinkKind::MemAddress,
                site,
                SinkPrecond::None,
            )
        } else {
            Vec::new()
        };
        self.reports.extend(r1);
        self.reports.extend(r2);
        self.reports.extend(r3);
    }

    fn handle_input_read(&mut self, ev: InputReadEvent) {
        for (i, byte) in ev.bytes.iter().enumerate() {
            let offset = ev.stream_start + i;
            let addr = ev.buf + i as u64;
            if ev.concrete_mask[i] {
                self.sym_mem.remove(&addr);
                continue;
            }
            let name = format!("in{offset}");
            let var = SymExpr::var(&name, 8);
            self.identity.set(&name, *byte as u128);
            self.input_vars.push((var.var_name().unwrap().clone(), offset));
            self.sym_mem.insert(addr, var);
        }
    }

    fn handle_intrinsic(&mut self, ev: IntrinsicEvent) {
        let arg_exprs: Vec<Option<SymExpr>> = (0u8..6).map(|r| self.reg_expr64(r)).collect();

        // ---- integer-overflow function-argument sinks (before models) ----
        if self.config.predicates.int_overflow {
            let sink_args: Vec<(usize, SinkPrecond)> = match ev.name {
                Intrinsic::Malloc => vec![(0, SinkPrecond::AllocSize { concrete: ev.args[0] })],
                Intrinsic::Calloc => vec![
                    (0, SinkPrecond::AllocSize { concrete: ev.args[0] }),
                    (1, SinkPrecond::AllocSize { concrete: ev.args[1] }),
                ],
                Intrinsic::Realloc => vec![(1, SinkPrecond::AllocSize { concrete: ev.args[1] })],
                Intrinsic::Memcpy | Intrinsic::Memmove | Intrinsic::Memset | Intrinsic::Strncpy => {
                    vec![(2, SinkPrecond::CopySize { concrete: ev.args[2] })]
                }
                _ => (0..3).map(|i| (i, SinkPrecond::None)).collect(),
            };
            for (idx, precond) in sink_args {
                if let Some(Some(sink)) = arg_exprs.get(idx) {
                    let sink = sink.clone();
                    let name = ev.name.name().to_string();
                    let reports = self.engine.check_int_overflow_sink(
                        &mut qctx!(self),
                        &sink,
                        SinkKind::FnArg { name, index: idx },
                        ev.addr,
                        precond,
                    );
                    self.reports.extend(reports);
                }
            }
        }

        // ---- copy-size predicate ----
        if ev.name.is_copy_fn() {
            if let Some(size_expr) = arg_exprs[2].clone() {
                let report =
                    self.engine
                        .check_copy_size(&mut qctx!(self), ev.args[0], &size_expr, ev.addr);
                self.reports.extend(report);
            }
        }

        // ---- calloc element-count wraparound ----
        if ev.name == Intrinsic::Calloc
            && (arg_exprs[0].is_some() || arg_exprs[1].is_some())
        {
            let count = arg_exprs[0]
                .clone()
                .unwrap_or_else(|| SymExpr::bv(ev.args[0] as u128, 64));
            let elem = arg_exprs[1]
                .clone()
                .unwrap_or_else(|| SymExpr::bv(ev.args[1] as u128, 64));
            let concrete_total = ev.args[0].wrapping_mul(ev.args[1]);
            let report = self.engine.check_alloc_count_overflow(
                &mut qctx!(self),
                &count,
                &elem,
                concrete_total,
                ev.addr,
            );
            self.reports.extend(report);
        }

        // ---- shadow heap + symbolic memory maintenance ----
        if let Some(alloc) = &ev.alloc {
            match alloc {
                AllocInfo::Free { base, .. } => {
                    if let Some((b, size)) = self.engine.shadow_heap.lookup(*base) {
                        if b == *base {
                            erase_range(&mut self.sym_mem, b, size as usize);
                        }
                    }
                }
                AllocInfo::Realloc { old_base, old_size, new_base, new_size } => {
                    let copy = (*old_size).min(*new_size) as usize;
                    apply_copy(&mut self.sym_mem, *new_base, *old_base, copy);
                    erase_range(&mut self.sym_mem, *old_base, *old_size as usize);
                }
                AllocInfo::Calloc { base, size, .. } => {
                    erase_range(&mut self.sym_mem, *base, *size as usize);
                }
                AllocInfo::Malloc { .. } => {}
            }
            self.engine.update_shadow_alloc(alloc);
        }

        match self.config.models {
            ModelMode::Full => self.apply_full_models(&ev, &arg_exprs),
            ModelMode::ByteTrace => self.apply_byte_trace(&ev, &arg_exprs),
        }
    }

    fn buf_snapshot(&self, addr: u64, len: usize) -> SymBuf {
        let bytes = self.vm.peek_bytes(addr, len);
        let syms = (0..len)
            .map(|i| self.sym_mem.get(&(addr + i as u64)).cloned())
            .collect();
        SymBuf { addr, bytes, syms }
    }

    fn concrete_strlen_at(&self, addr: u64) -> usize {
        let mut len = 0usize;
        while len < 4096 {
            if self.vm.peek_bytes(addr + len as u64, 1)[0] == 0 {
                break;
            }
            len += 1;
        }
        len
    }

    /// Installs a modeled return value in r0 after the consistency check,
    /// recording the tie constraint.
    fn install_return(&mut self, fn_name: &'static str, model: &BuiltModel, concrete_ret: u64, site: u64) {
        let raw_val = match model.ret64.evaluate(&self.identity) {
            Ok(v) => v as u64,
            Err(_) => {
                self.trace.concretizations += 1;
                self.sym_regs.remove(&0);
                return;
            }
        };
        let installed = if raw_val == concrete_ret {
            model.ret64.clone()
        } else if model.tie == TieSpec::SignClass {
            let normalized = sign_class_normalizer(&model.ret64);
            match normalized.evaluate(&self.identity) {
                Ok(v) if v as u64 == concrete_ret => normalized,
                _ => {
                    self.trace.concretizations += 1;
                    self.sym_regs.remove(&0);
                    return;
                }
            }
        } else {
            self.trace.concretizations += 1;
            self.sym_regs.remove(&0);
            return;
        };
        let tie = tie_constraint(&model.ret64, concrete_ret, model.tie);
        self.push_constraint(tie, ConstraintKind::Tie { fn_name }, site, None);
        for c in &model.constraints {
            self.push_constraint(c.clone(), ConstraintKind::Model { fn_name }, site, None);
        }
        self.sym_regs.insert(0, installed);
        self.trace.models_applied += 1;
    }

    fn apply_full_models(&mut self, ev: &IntrinsicEvent, arg_exprs: &[Option<SymExpr>]) {
        match ev.name {
            Intrinsic::Print => {}
            Intrinsic::Malloc | Intrinsic::Calloc | Intrinsic::Realloc | Intrinsic::Free => {
                // heap group: concrete execution only
                self.sym_regs.remove(&0);
            }
            Intrinsic::Memcpy | Intrinsic::Memmove => {
                let (dst, src, n) = (ev.args[0], ev.args[1], ev.args[2] as usize);
                apply_copy(&mut self.sym_mem, dst, src, n);
                let ret = arg_exprs[0].clone();
                self.set_reg_expr(0, Width::W64, ret, ev.ret);
            }
            Intrinsic::Memset => {
                erase_range(&mut self.sym_mem, ev.args[0], ev.args[2] as usize);
                let ret = arg_exprs[0].clone();
                self.set_reg_expr(0, Width::W64, ret, ev.ret);
            }
            Intrinsic::Strcpy | Intrinsic::Strncpy => {
                let (dst, src) = (ev.args[0], ev.args[1]);
                let scanned = ev.reads.first().map(|(_, b)| b.len()).unwrap_or(0);
                let written = ev.writes.first().map(|(_, n)| *n).unwrap_or(0);
                apply_copy(&mut self.sym_mem, dst, src, scanned.min(written));
                if written > scanned {
                    erase_range(&mut self.sym_mem, dst + scanned as u64, written - scanned);
                }
                // terminator position constraints when the source is symbolic
                let stopped_at_nul = scanned > 0
                    && ev.reads.first().map(|(_, b)| b[b.len() - 1] == 0) == Some(true);
                if stopped_at_nul {
                    let buf = self.buf_snapshot(src, scanned);
                    for c in strcpy_constraints(&buf, scanned - 1) {
                        self.push_constraint(c, ConstraintKind::Model { fn_name: "strcpy" }, ev.addr, None);
                    }
                }
                let ret = arg_exprs[0].clone();
                self.set_reg_expr(0, Width::W64, ret, ev.ret);
            }
            Intrinsic::Memchr => {
                let count = ev.args[2] as usize;
                if count > MODEL_SCAN_CAP {
                    self.trace.models_skipped += 1;
                    self.sym_regs.remove(&0);
                    return;
                }
                let buf = self.buf_snapshot(ev.args[0], count);
                let ch = arg_exprs[1]
                    .clone()
                    .map(|e| e.extract(7, 0))
                    .unwrap_or_else(|| SymExpr::bv((ev.args[1] & 0xFF) as u128, 8));
                match memchr_model(&buf, &ch, count) {
                    Ok(m) => self.install_return("memchr", &m, ev.ret, ev.addr),
                    Err(_) => {
                        self.trace.models_skipped += 1;
                        self.sym_regs.remove(&0);
                    }
                }
            }
            Intrinsic::Strchr => {
                let len = self.concrete_strlen_at(ev.args[0]);
                let buf = self.buf_snapshot(ev.args[0], len + 1);
                let ch = arg_exprs[1]
                    .clone()
                    .map(|e| e.extract(7, 0))
                    .unwrap_or_else(|| SymExpr::bv((ev.args[1] & 0xFF) as u128, 8));
                match strchr_model(&buf, &ch, len + 1) {
                    Ok(m) => self.install_return("strchr", &m, ev.ret, ev.addr),
                    Err(_) => {
                        self.trace.models_skipped += 1;
                        self.sym_regs.remove(&0);
                    }
                }
            }
            Intrinsic::Strlen => {
                let len = self.concrete_strlen_at(ev.args[0]);
                let buf = self.buf_snapshot(ev.args[0], len + 1);
                match strlen_model(&buf, len + 1) {
                    Ok(m) => self.install_return("strlen", &m, ev.ret, ev.addr),
                    Err(_) => {
                        self.trace.models_skipped += 1;
                        self.sym_regs.remove(&0);
                    }
                }
            }
            Intrinsic::Memcmp | Intrinsic::Strcmp | Intrinsic::Strncmp => {
                let string_mode = ev.name != Intrinsic::Memcmp;
                let bound = match ev.name {
                    Intrinsic::Memcmp => ev.args[2] as usize,
                    Intrinsic::Strcmp => {
                        let ll = self.concrete_strlen_at(ev.args[0]);
                        let rl = self.concrete_strlen_at(ev.args[1]);
                        ll.min(rl) + 1
                    }
                    _ => {
                        let ll = self.concrete_strlen_at(ev.args[0]);
                        let rl = self.concrete_strlen_at(ev.args[1]);
                        (ll.min(rl) + 1).min(ev.args[2] as usize)
                    }
                };
                if bound == 0 || bound > MODEL_SCAN_CAP {
                    if bound != 0 {
                        self.trace.models_skipped += 1;
                    }
                    self.sym_regs.remove(&0);
                    return;
                }
                let lhs = self.buf_snapshot(ev.args[0], bound);
                let rhs = self.buf_snapshot(ev.args[1], bound);
                match memcmp_model(&lhs, &rhs, bound, string_mode) {
                    Ok(m) => self.install_return(ev.name.name_static(), &m, ev.ret, ev.addr),
                    Err(_) => {
                        self.trace.models_skipped += 1;
                        self.sym_regs.remove(&0);
                    }
                }
            }
            Intrinsic::Strstr => {
                let hay_len = self.concrete_strlen_at(ev.args[0]);
                let needle_len = self.concrete_strlen_at(ev.args[1]);
                let hay = self.buf_snapshot(ev.args[0], hay_len + 1);
                let needle = self.buf_snapshot(ev.args[1], needle_len + 1);
                match strstr_model(&hay, hay_len, &needle, needle_len) {
                    Ok(m) => self.install_return("strstr", &m, ev.ret, ev.addr),
                    Err(_) => {
                        self.trace.models_skipped += 1;
                        self.sym_regs.remove(&0);
                    }
                }
            }
            Intrinsic::Strtol | Intrinsic::Strtoll | Intrinsic::Strtoul | Intrinsic::Strtoull
            | Intrinsic::Atoi => {
                let variant = match ev.name {
                    Intrinsic::Strtoul | Intrinsic::Strtoull => ConvVariant::strtoul(),
                    Intrinsic::Atoi => ConvVariant::atoi(),
                    _ => ConvVariant::strtol(),
                };
                let base = if ev.name == Intrinsic::Atoi { 10 } else { ev.args[2] as u32 };
                let scanned = match ev.reads.first() {
                    Some((addr, bytes)) => self.buf_snapshot(*addr, bytes.len()),
                    None => {
                        self.sym_regs.remove(&0);
                        return;
                    }
                };
                match conversion_model(&scanned, base, variant) {
                    Ok(m) => {
                        let fn_name = ev.name.name_static();
                        for c in m.constraints() {
                            self.push_constraint(
                                c,
                                ConstraintKind::Model { fn_name },
                                ev.addr,
                                None,
                            );
                        }
                        let built = BuiltModel {
                            ret64: m.result64.clone(),
                            constraints: Vec::new(),
                            tie: TieSpec::Equal,
                        };
                        self.install_return(fn_name, &built, ev.ret, ev.addr);
                        if let Some(installed) = self.reg_expr64(0) {
                            self.engine.register_strto(&installed, !variant.unsigned);
                        }
                    }
                    Err(ModelError::NoDigits) | Err(ModelError::Skipped) => {
                        self.trace.models_skipped += 1;
                        self.sym_regs.remove(&0);
                    }
                }
            }
            Intrinsic::Read | Intrinsic::ReadNumScanfQuirk => unreachable!("read is an InputRead event"),
        }
    }

    /// Model-free emulation: replay the internal comparison/scan branches of
    /// the library function as constraints pinned to the concrete trace and
    /// keep returns concrete.
    fn apply_byte_trace(&mut self, ev: &IntrinsicEvent, arg_exprs: &[Option<SymExpr>]) {
        let _ = arg_exprs;
        let zero8 = SymExpr::bv(0, 8);
        match ev.name {
            Intrinsic::Memcpy | Intrinsic::Memmove => {
                apply_copy(&mut self.sym_mem, ev.args[0], ev.args[1], ev.args[2] as usize);
                self.sym_regs.remove(&0);
            }
            Intrinsic::Memset => {
                erase_range(&mut self.sym_mem, ev.args[0], ev.args[2] as usize);
                self.sym_regs.remove(&0);
            }
            Intrinsic::Strcpy | Intrinsic::Strncpy => {
                let scanned = ev.reads.first().map(|(_, b)| b.len()).unwrap_or(0);
                apply_copy(&mut self.sym_mem, ev.args[0], ev.args[1], scanned);
                let buf = self.buf_snapshot(ev.args[1], scanned);
                if scanned > 0 {
                    for c in strcpy_constraints(&buf, scanned - 1) {
                        self.push_constraint(c, ConstraintKind::Model { fn_name: "strcpy" }, ev.addr, None);
                    }
                }
                self.sym_regs.remove(&0);
            }
            Intrinsic::Strcmp | Intrinsic::Strncmp | Intrinsic::Memcmp => {
                // the concrete loop compared byte pairs until mismatch/NUL
                let l = ev.reads.first().cloned().unwrap_or((0, Vec::new()));
                let r = ev.reads.get(1).cloned().unwrap_or((0, Vec::new()));
                let n = l.1.len().min(r.1.len());
                let lbuf = self.buf_snapshot(l.0, n);
                let rbuf = self.buf_snapshot(r.0, n);
                for i in 0..n {
                    let le = lbuf.byte_expr(i);
                    let re = rbuf.byte_expr(i);
                    let last = i == n - 1;
                    let expr = if !last || l.1[i] == r.1[i] {
                        le.equ(&re)
                    } else {
                        le.neq(&re)
                    };
                    self.push_constraint(expr, ConstraintKind::Model { fn_name: "cmp-loop" }, ev.addr, None);
                    if !last && ev.name != Intrinsic::Memcmp {
                        self.push_constraint(
                            le.neq(&zero8),
                            ConstraintKind::Model { fn_name: "cmp-loop" },
                            ev.addr,
                            None,
                        );
                    }
                }
                self.sym_regs.remove(&0);
            }
            Intrinsic::Strlen | Intrinsic::Strchr | Intrinsic::Memchr | Intrinsic::Strstr => {
                let (addr, bytes) = ev.reads.first().cloned().unwrap_or((0, Vec::new()));
                let buf = self.buf_snapshot(addr, bytes.len());
                for i in 0..bytes.len() {
                    let be = buf.byte_expr(i);
                    let last = i == bytes.len() - 1;
                    let expr = match (ev.name, last) {
                        (Intrinsic::Strlen, false) => be.neq(&zero8),
                        (Intrinsic::Strlen, true) => be.equ(&zero8),
                        _ => {
                            // scan loop: pin each byte to match/mismatch as it did
                            let target = SymExpr::bv(bytes[i] as u128, 8);
                            be.equ(&target)
                        }
                    };
                    self.push_constraint(expr, ConstraintKind::Model { fn_name: "scan-loop" }, ev.addr, None);
                }
                self.sym_regs.remove(&0);
            }
            Intrinsic::Strtol | Intrinsic::Strtoll | Intrinsic::Strtoul | Intrinsic::Strtoull
            | Intrinsic::Atoi => {
                let base = if ev.name == Intrinsic::Atoi { 10 } else { ev.args[2] as u32 };
                if let Some((addr, bytes)) = ev.reads.first() {
                    if let Some(scan) = crate::minivm::scan_int(bytes, base) {
                        let buf = self.buf_snapshot(*addr, bytes.len());
                        // the digit loop's per-character class checks
                        for p in scan.digits_start..scan.digits_end {
                            let c = buf.byte_expr(p);
                            let lo = SymExpr::bv(b'0' as u128, 8);
                            let hi = SymExpr::bv(b'9' as u128, 8);
                            self.push_constraint(
                                and_all(vec![c.uge(&lo), c.ule(&hi)]),
                                ConstraintKind::Model { fn_name: "digit-loop" },
                                ev.addr,
                                None,
                            );
                        }
                        if let Some(so) = scan.sign_off {
                            let c = buf.byte_expr(so);
                            self.push_constraint(
                                c.equ(&SymExpr::bv(bytes[so] as u128, 8)),
                                ConstraintKind::Model { fn_name: "digit-loop" },
                                ev.addr,
                                None,
                            );
                        }
                        if scan.consumed < bytes.len() {
                            let c = buf.byte_expr(scan.consumed);
                            let lo = SymExpr::bv(b'0' as u128, 8);
                            let hi = SymExpr::bv(b'9' as u128, 8);
                            self.push_constraint(
                                or_all(vec![c.ult(&lo), c.ugt(&hi)]),
                                ConstraintKind::Model { fn_name: "digit-loop" },
                                ev.addr,
                                None,
                            );
                        }
                    }
                }
                self.sym_regs.remove(&0);
            }
            _ => {
                self.sym_regs.remove(&0);
            }
        }
    }

}

fn check_flag(
    expr: &SymExpr,
    concrete: bool,
    identity: &Model,
    trace: &mut SymbolicTrace,
) -> Option<SymExpr> {
    if expr.as_const().is_some() {
        return None;
    }
    match expr.evaluate_bool(identity) {
        Ok(v) if v == concrete => Some(expr.clone()),
        _ => {
            trace.concretizations += 1;
            None
        }
    }
}

fn shift_mask(w: Width) -> u64 {
    if w == Width::W64 {
        63
    } else {
        31
    }
}

fn dst_reg(inst: &Instruction) -> u8 {
    match &inst.dst {
        Some(Operand::Reg(r)) => *r,
        other => panic!("expected register destination, got {other:?}"),
    }
}

fn mem_ref(op: &Option<Operand>) -> MemRef {
    match op {
        Some(Operand::Mem(m)) => m.clone(),
        other => panic!("expected memory operand, got {other:?}"),
    }
}

impl Intrinsic {
    fn name_static(self) -> &'static str {
        self.name()
    }
}

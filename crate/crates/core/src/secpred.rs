//! Security predicates: null dereference, division by zero, out-of-bounds
//! access backed by a shadow heap/stack, and integer-overflow
//! source/sink analysis with signedness detection via backward slicing.
//! Also the per-session dedup bitmap and unsat-index memoization.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::expr::{and_all, or_all, Model, SymExpr, VarName};
use crate::hashutil::fnv1a64_u64s;
use crate::minivm::{Mnemonic, WatchFlag, Watchpoint};
use crate::path::{CallStack, PathPredicate};
use crate::smtlib::emit_script;
use crate::solver::{SolverSession, SolverVerdict};

pub const BITMAP_BITS: usize = 1 << 20;
/// Negative displacements up to this magnitude fold into the heuristic base.
pub const BASE_FOLD_LIMIT: u64 = 4096;

// ---------------------------------------------------------------------------
// shadow state

/// Live heap allocation bounds, maintained from heap-function events.
#[derive(Clone, Debug, Default)]
pub struct ShadowHeap {
    live: std::collections::BTreeMap<u64, u64>,
    pub total_allocs: u64,
    pub total_frees: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShadowDiag {
    FreeUnknown { base: u64 },
    DoubleFree { base: u64 },
}

impl ShadowHeap {
    pub fn insert(&mut self, base: u64, size: u64) {
        self.total_allocs += 1;
        self.live.insert(base, size);
        debug_assert!(self.check_disjoint());
    }

    pub fn remove(&mut self, base: u64) -> Option<u64> {
        self.total_frees += 1;
        self.live.remove(&base)
    }

    /// The unique live block containing the address.
    pub fn lookup(&self, addr: u64) -> Option<(u64, u64)> {
        let (base, size) = self.live.range(..=addr).next_back()?;
        if addr >= *base && addr < base + size {
            Some((*base, *size))
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn check_disjoint(&self) -> bool {
        let mut prev_end = 0u64;
        for (base, size) in &self.live {
            if *base < prev_end {
                return false;
            }
            prev_end = base + size;
        }
        true
    }
}

/// Live return-address slot addresses, innermost (lowest) last.
#[derive(Clone, Debug, Default)]
pub struct ShadowStack {
    slots: Vec<u64>,
}

impl ShadowStack {
    /// On call: drop dead entries below the new stack pointer, then push the
    /// slot holding the return address.
    pub fn on_call(&mut self, slot: u64) {
        self.slots.retain(|s| *s >= slot);
        self.slots.push(slot);
    }

    /// On ret (and any stack-pointer increase): drop entries below sp.
    pub fn pop_below(&mut self, sp: u64) {
        self.slots.retain(|s| *s >= sp);
    }

    pub fn slots(&self) -> &[u64] {
        &self.slots
    }

    /// Closest return-address location strictly above the address.
    pub fn closest_above(&self, addr: u64) -> Option<u64> {
        self.slots.iter().copied().filter(|s| *s > addr).min()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Heap,
    Stack,
    GlobalHeuristic,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Bounds {
    pub lower: Option<u64>,
    pub upper: Option<u64>,
    pub provenance: Provenance,
}

// ---------------------------------------------------------------------------
// reports

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReportKind {
    NullDeref,
    DivByZero,
    OutOfBoundsRead,
    OutOfBoundsWrite,
    WriteWhatWhere,
    IntOverflowSigned,
    IntOverflowUnsigned,
    IntOverflowBoth,
    AllocSizeOverflow,
    CopySizeOverflow,
}

impl ReportKind {
    fn code(self) -> u64 {
        match self {
            ReportKind::NullDeref => 1,
            ReportKind::DivByZero => 2,
            ReportKind::OutOfBoundsRead => 3,
            ReportKind::OutOfBoundsWrite => 4,
            ReportKind::WriteWhatWhere => 5,
            ReportKind::IntOverflowSigned => 6,
            ReportKind::IntOverflowUnsigned => 7,
            ReportKind::IntOverflowBoth => 8,
            ReportKind::AllocSizeOverflow => 9,
            ReportKind::CopySizeOverflow => 10,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignednessEvidence {
    BranchSlicing,
    StrtoFamily,
    None,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verification {
    Unverified,
    Verified,
    Refuted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: ReportKind,
    pub source_addr: u64,
    pub sink_addr: u64,
    pub signedness_evidence: SignednessEvidence,
    pub precondition_used: bool,
    #[serde(skip)]
    pub input: Vec<u8>,
    pub input_file: Option<String>,
    pub verification: Verification,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smt_file: Option<String>,
    #[serde(skip)]
    pub watchpoints: Vec<Watchpoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap_addr: Option<u64>,
}

impl ErrorReport {
    /// Stable per-site hash used to name generated inputs and SMT dumps.
    pub fn site_hash(&self) -> u64 {
        fnv1a64_u64s(&[self.kind.code(), self.source_addr, self.sink_addr])
    }
}

// ---------------------------------------------------------------------------
// dedup / memoization

pub type SiteKey = (u64, u64, u64); // (kind code, source addr, sink addr)

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DedupVerdict {
    Fresh,
    Duplicate,
}

/// Bitmap over (kind, source, sink) hashes plus the per-site smallest path
/// length at which the predicate came back unsatisfiable.
pub struct DedupState {
    bitmap: Vec<u64>,
    unsat_at: HashMap<SiteKey, usize>,
    pub duplicates_suppressed: u64,
    pub unsat_skips: u64,
}

impl Default for DedupState {
    fn default() -> Self {
        DedupState {
            bitmap: vec![0u64; BITMAP_BITS / 64],
            unsat_at: HashMap::new(),
            duplicates_suppressed: 0,
            unsat_skips: 0,
        }
    }
}

impl DedupState {
    fn bit_index(kind: ReportKind, source: u64, sink: u64) -> usize {
        (fnv1a64_u64s(&[kind.code(), source, sink]) % BITMAP_BITS as u64) as usize
    }

    pub fn is_set(&self, kind: ReportKind, source: u64, sink: u64) -> bool {
        let i = Self::bit_index(kind, source, sink);
        self.bitmap[i / 64] >> (i % 64) & 1 == 1
    }

    /// Like is_set, but counts the hit as a suppressed duplicate.
    pub fn suppress_if_set(&mut self, kind: ReportKind, source: u64, sink: u64) -> bool {
        if self.is_set(kind, source, sink) {
            self.duplicates_suppressed += 1;
            true
        } else {
            false
        }
    }

    /// Tests and sets the bitmap bit for the site.
    pub fn dedup_and_memo(&mut self, kind: ReportKind, source: u64, sink: u64) -> DedupVerdict {
        let i = Self::bit_index(kind, source, sink);
        let word = &mut self.bitmap[i / 64];
        let mask = 1u64 << (i % 64);
        if *word & mask != 0 {
            self.duplicates_suppressed += 1;
            DedupVerdict::Duplicate
        } else {
            *word |= mask;
            DedupVerdict::Fresh
        }
    }

    pub fn memo_unsat(&mut self, site: SiteKey, path_len: usize) {
        let entry = self.unsat_at.entry(site).or_insert(path_len);
        if path_len < *entry {
            *entry = path_len;
        }
    }

    /// Skip when the predicate at this site was unsatisfiable with a prefix
    /// of the current path: more constraints keep it unsatisfiable.
    pub fn should_skip(&mut self, site: SiteKey, path_len: usize) -> bool {
        if self.unsat_at.get(&site).is_some_and(|k| path_len >= *k) {
            self.unsat_skips += 1;
            true
        } else {
            false
        }
    }

    pub fn unsat_index(&self, site: SiteKey) -> Option<usize> {
        self.unsat_at.get(&site).copied()
    }
}

// ---------------------------------------------------------------------------
// symbolic flag expressions / overflow predicates

#[derive(Clone, Debug)]
pub struct SymFlags {
    pub result: SymExpr,
    pub cf: SymExpr,
    pub of: SymExpr,
    pub zf: SymExpr,
    pub sf: SymExpr,
}

fn bit_is_one(e: &SymExpr, bit: u32) -> SymExpr {
    e.extract(bit, bit).equ(&SymExpr::bv(1, 1))
}

fn carry_term(carry: &SymExpr, width: u32) -> SymExpr {
    carry.ite(&SymExpr::bv(1, width), &SymExpr::bv(0, width))
}

/// Symbolic CF/OF/ZF/SF for one arithmetic instruction over width-w operand
/// expressions. Shifts require a constant count (None otherwise).
pub fn arith_sym_flags(
    m: Mnemonic,
    w: u32,
    a: &SymExpr,
    b: &SymExpr,
    carry_in: &SymExpr,
) -> Option<SymFlags> {
    let finish = |result: SymExpr, cf: SymExpr, of: SymExpr| {
        let zf = result.equ(&SymExpr::bv(0, w));
        let sf = bit_is_one(&result, w - 1);
        Some(SymFlags { result, cf, of, zf, sf })
    };
    match m {
        Mnemonic::Add | Mnemonic::Adc => {
            let c = if m == Mnemonic::Adc {
                carry_term(carry_in, w + 1)
            } else {
                SymExpr::bv(0, w + 1)
            };
            let wide_u = a.zext(1).add(&b.zext(1)).add(&c);
            let wide_s = a.sext(1).add(&b.sext(1)).add(&c);
            let cf = bit_is_one(&wide_u, w);
            let of = bit_is_one(&wide_s, w).neq(&bit_is_one(&wide_s, w - 1));
            finish(wide_u.extract(w - 1, 0), cf, of)
        }
        Mnemonic::Sub | Mnemonic::Sbb | Mnemonic::Cmp => {
            let c = if m == Mnemonic::Sbb {
                carry_term(carry_in, w + 1)
            } else {
                SymExpr::bv(0, w + 1)
            };
            let cf = a.zext(1).ult(&b.zext(1).add(&c));
            let wide_s = a.sext(1).sub(&b.sext(1)).sub(&c);
            let of = bit_is_one(&wide_s, w).neq(&bit_is_one(&wide_s, w - 1));
            finish(a.zext(1).sub(&b.zext(1)).sub(&c).extract(w - 1, 0), cf, of)
        }
        Mnemonic::Mul | Mnemonic::Imul => {
            let wide_u = a.zext(w).mul(&b.zext(w));
            let wide_s = a.sext(w).mul(&b.sext(w));
            let cf = wide_u.extract(2 * w - 1, w).neq(&SymExpr::bv(0, w));
            let of = wide_s.neq(&wide_s.extract(w - 1, 0).sext(w));
            finish(wide_u.extract(w - 1, 0), cf, of)
        }
        Mnemonic::Neg => {
            let zero = SymExpr::bv(0, w);
            let cf = a.neq(&zero);
            let of = a.equ(&SymExpr::bv(1u128 << (w - 1), w));
            finish(a.neg(), cf, of)
        }
        Mnemonic::And | Mnemonic::Test => {
            let f = SymExpr::bool_const(false);
            finish(a.bvand(b), f.clone(), f)
        }
        Mnemonic::Or => {
            let f = SymExpr::bool_const(false);
            finish(a.bvor(b), f.clone(), f)
        }
        Mnemonic::Xor => {
            let f = SymExpr::bool_const(false);
            finish(a.bvxor(b), f.clone(), f)
        }
        Mnemonic::Shl | Mnemonic::Shr | Mnemonic::Sar => {
            let count = b.as_const()?;
            let mask = if w == 64 { 63 } else { 31 };
            let c = (count & mask) as u32;
            if c == 0 {
                return None; // flags unchanged; caller keeps previous state
            }
            let count_expr = SymExpr::bv(c as u128, w);
            let result = match m {
                Mnemonic::Shl => a.shl(&count_expr),
                Mnemonic::Shr => a.lshr(&count_expr),
                _ => a.ashr(&count_expr),
            };
            let cf = match m {
                Mnemonic::Shl => {
                    if c <= w {
                        bit_is_one(a, w - c)
                    } else {
                        SymExpr::bool_const(false)
                    }
                }
                _ => {
                    if c <= w {
                        bit_is_one(a, c - 1)
                    } else if m == Mnemonic::Sar {
                        bit_is_one(a, w - 1)
                    } else {
                        SymExpr::bool_const(false)
                    }
                }
            };
            let of = match (m, c) {
                (Mnemonic::Shl, 1) => bit_is_one(&result, w - 1).neq(&cf),
                (Mnemonic::Shr, 1) => bit_is_one(a, w - 1),
                _ => SymExpr::bool_const(false),
            };
            finish(result, cf, of)
        }
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// overflow sources

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceKind {
    Add,
    Sub,
    AdcFinal,
    SbbFinal,
    Mul,
    Imul,
    ShlSal,
    Neg,
    AddNegConst,
}

#[derive(Clone, Debug)]
pub struct OverflowSource {
    pub inst_addr: u64,
    pub kind: SourceKind,
    pub width: u32,
    pub result: SymExpr,
    pub unsigned_pred: SymExpr,
    pub signed_pred: SymExpr,
    pub lhs: SymExpr,
    pub rhs: SymExpr,
    pub carry: SymExpr,
}

/// Shift overflow predicates: unsigned when any significant bit
/// leaves the destination, signed when the shifted-out bits disagree with
/// the resulting sign.
pub fn shl_overflow_preds(a: &SymExpr, count: u32, w: u32) -> (SymExpr, SymExpr) {
    let zero_w = SymExpr::bv(0, w);
    if count == 0 {
        let f = SymExpr::bool_const(false);
        return (f.clone(), f);
    }
    if count >= w {
        let nz = a.neq(&zero_w);
        return (nz.clone(), nz);
    }
    let shifted_out = a.extract(w - 1, w - count);
    let unsigned = shifted_out.neq(&SymExpr::bv(0, count));
    let top = a.extract(w - 1, w - count - 1); // count+1 bits
    let ones = SymExpr::bv(crate::expr::mask(count + 1), count + 1);
    let signed = and_all(vec![
        top.neq(&SymExpr::bv(0, count + 1)),
        top.neq(&ones),
    ]);
    (unsigned, signed)
}

/// Builds both signedness predicates for an arithmetic instruction with at
/// least one symbolic operand, applying the source pitfalls: shift-specific
/// rules, pair-final adc/sbb only, and addition with a negative constant
/// treated as subtraction.
#[allow(clippy::too_many_arguments)]
pub fn build_overflow_source(
    inst_addr: u64,
    mnemonic: Mnemonic,
    w: u32,
    a: &SymExpr,
    b: &SymExpr,
    carry_in: &SymExpr,
    result: &SymExpr,
    pair_final: bool,
) -> Option<OverflowSource> {
    if result.as_const().is_some() {
        return None;
    }
    let mk = |kind: SourceKind, unsigned_pred: SymExpr, signed_pred: SymExpr| {
        Some(OverflowSource {
            inst_addr,
            kind,
            width: w,
            result: result.clone(),
            unsigned_pred,
            signed_pred,
            lhs: a.clone(),
            rhs: b.clone(),
            carry: carry_in.clone(),
        })
    };
    match mnemonic {
        Mnemonic::Add => {
            // addition with a negative constant is a disguised subtraction
            if let Some(c) = b.as_const() {
                let signed_c = crate::expr::to_signed(c, w);
                if signed_c < 0 {
                    let m = SymExpr::bv((-signed_c) as u128, w);
                    let flags = arith_sym_flags(Mnemonic::Sub, w, a, &m, carry_in)?;
                    return mk(SourceKind::AddNegConst, flags.cf, flags.of);
                }
            }
            let flags = arith_sym_flags(Mnemonic::Add, w, a, b, carry_in)?;
            mk(SourceKind::Add, flags.cf, flags.of)
        }
        Mnemonic::Sub => {
            let flags = arith_sym_flags(Mnemonic::Sub, w, a, b, carry_in)?;
            mk(SourceKind::Sub, flags.cf, flags.of)
        }
        Mnemonic::Adc | Mnemonic::Sbb => {
            // predicate only on the final instruction of a recognized
            // wide-arithmetic pair
            if !pair_final {
                return None;
            }
            let flags = arith_sym_flags(mnemonic, w, a, b, carry_in)?;
            let kind = if mnemonic == Mnemonic::Adc {
                SourceKind::AdcFinal
            } else {
                SourceKind::SbbFinal
            };
            mk(kind, flags.cf, flags.of)
        }
        Mnemonic::Mul => {
            let flags = arith_sym_flags(Mnemonic::Mul, w, a, b, carry_in)?;
            mk(SourceKind::Mul, flags.cf, flags.of)
        }
        Mnemonic::Imul => {
            let flags = arith_sym_flags(Mnemonic::Imul, w, a, b, carry_in)?;
            mk(SourceKind::Imul, flags.cf, flags.of)
        }
        Mnemonic::Neg => {
            let flags = arith_sym_flags(Mnemonic::Neg, w, a, b, carry_in)?;
            mk(SourceKind::Neg, flags.cf, flags.of)
        }
        Mnemonic::Shl => {
            let count = (b.as_const()? & if w == 64 { 63 } else { 31 }) as u32;
            let (u, s) = shl_overflow_preds(a, count, w);
            if u.as_const() == Some(0) && s.as_const() == Some(0) {
                return None;
            }
            mk(SourceKind::ShlSal, u, s)
        }
        _ => None,
    }
}

fn rebuild_at_width(src: &OverflowSource, new_w: u32) -> Option<(SymExpr, SymExpr)> {
    if new_w >= src.width || new_w == 0 {
        return None;
    }
    let a = src.lhs.extract(new_w - 1, 0);
    let b = src.rhs.extract(new_w - 1, 0);
    let m = match src.kind {
        SourceKind::Add | SourceKind::AddNegConst => Mnemonic::Add,
        SourceKind::Sub => Mnemonic::Sub,
        SourceKind::AdcFinal => Mnemonic::Adc,
        SourceKind::SbbFinal => Mnemonic::Sbb,
        SourceKind::Mul => Mnemonic::Mul,
        SourceKind::Imul => Mnemonic::Imul,
        SourceKind::Neg => Mnemonic::Neg,
        SourceKind::ShlSal => {
            let count = (src.rhs.as_const()? & if src.width == 64 { 63 } else { 31 }) as u32;
            let (u, s) = shl_overflow_preds(&a, count, new_w);
            return Some((u, s));
        }
    };
    if src.kind == SourceKind::AddNegConst {
        let c = src.rhs.as_const()?;
        let signed_c = crate::expr::to_signed(c, src.width);
        let mag = SymExpr::bv((-signed_c) as u128 & crate::expr::mask(new_w), new_w);
        let flags = arith_sym_flags(Mnemonic::Sub, new_w, &a, &mag, &src.carry)?;
        return Some((flags.cf, flags.of));
    }
    let flags = arith_sym_flags(m, new_w, &a, &b, &src.carry)?;
    Some((flags.cf, flags.of))
}

// ---------------------------------------------------------------------------
// heuristics

/// Sums the concrete additive parts of an address expression. Negative
/// displacements attached directly to a symbolic index term stay with the
/// index; a top-level negative constant folds into the base only when it is
/// small and every symbolic term is itself offset-free.
pub fn concrete_base_heuristic(expr: &SymExpr) -> Option<u64> {
    use crate::expr::ExprKind;
    let mut consts: Vec<i128> = Vec::new();
    let mut syms: Vec<SymExpr> = Vec::new();
    let mut stack: Vec<(SymExpr, bool)> = vec![(expr.clone(), true)];
    while let Some((e, positive)) = stack.pop() {
        if let Some(c) = e.as_const() {
            let sv = crate::expr::to_signed(c, e.width());
            consts.push(if positive { sv } else { -sv });
            continue;
        }
        match e.kind() {
            ExprKind::Add => {
                let (x, y) = (&e.children()[0], &e.children()[1]);
                // (sym + negative-const) is an index term, kept atomic
                let neg_attached = |s: &SymExpr, c: &SymExpr| {
                    s.as_const().is_none()
                        && c.as_const()
                            .is_some_and(|v| crate::expr::to_signed(v, c.width()) < 0)
                };
                if neg_attached(x, y) || neg_attached(y, x) {
                    syms.push(e.clone());
                } else {
                    stack.push((x.clone(), positive));
                    stack.push((y.clone(), positive));
                }
            }
            ExprKind::Sub => {
                let (x, y) = (&e.children()[0], &e.children()[1]);
                if x.as_const().is_none() && y.as_const().is_some() {
                    syms.push(e.clone()); // sym - const: index term
                } else {
                    stack.push((x.clone(), positive));
                    stack.push((y.clone(), !positive));
                }
            }
            _ => syms.push(e.clone()),
        }
    }
    if consts.is_empty() {
        return None;
    }
    let offset_free = |e: &SymExpr| -> bool {
        let mut stack = vec![e.clone()];
        let mut seen = HashSet::new();
        while let Some(n) = stack.pop() {
            if !seen.insert(n.id()) {
                continue;
            }
            if matches!(n.kind(), ExprKind::Add | ExprKind::Sub)
                && n.children().iter().any(|c| c.as_const().is_some())
            {
                return false;
            }
            for c in n.children() {
                stack.push(c.clone());
            }
        }
        true
    };
    let all_offset_free = syms.iter().all(offset_free);
    let mut base: i128 = 0;
    let mut any = false;
    for c in consts {
        // positive parts always sum; a negative displacement folds in only
        // when it is small and every symbolic term is itself offset-free
        if c >= 0 || ((-c) as u64 <= BASE_FOLD_LIMIT && all_offset_free) {
            base += c;
            any = true;
        }
    }
    if !any {
        return None;
    }
    Some(base as u64)
}

// ---------------------------------------------------------------------------
// engine

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PredicateSet {
    pub null_deref: bool,
    pub div_zero: bool,
    pub oob: bool,
    pub int_overflow: bool,
}

impl Default for PredicateSet {
    fn default() -> Self {
        PredicateSet { null_deref: true, div_zero: true, oob: true, int_overflow: true }
    }
}

impl PredicateSet {
    pub fn none() -> PredicateSet {
        PredicateSet { null_deref: false, div_zero: false, oob: false, int_overflow: false }
    }

    pub fn parse(list: &str) -> Option<PredicateSet> {
        let mut set = PredicateSet::none();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "null-deref" => set.null_deref = true,
                "div-zero" => set.div_zero = true,
                "oob" => set.oob = true,
                "int-overflow" => set.int_overflow = true,
                "all" => set = PredicateSet::default(),
                _ => return None,
            }
        }
        Some(set)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Signedness {
    Signed,
    Unsigned,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SinkKind {
    Branch,
    MemAddress,
    FnArg { name: String, index: usize },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SinkPrecond {
    None,
    AllocSize { concrete: u64 },
    CopySize { concrete: u64 },
}

/// Everything a predicate solve needs from the session.
pub struct QueryCtx<'a> {
    pub path: &'a PathPredicate,
    pub call_stack: &'a CallStack,
    pub solver: &'a mut SolverSession,
    pub original_input: &'a [u8],
    pub input_vars: &'a [(VarName, usize)],
    pub emit_smt: bool,
    pub smt_dumps: &'a mut Vec<(String, String)>,
}

impl QueryCtx<'_> {
    fn generate_input(&self, model: &Model) -> Vec<u8> {
        crate::concolic::generate_input(model, self.original_input, self.input_vars)
    }
}

enum SiteSolve {
    Sat { input: Vec<u8>, model: Model },
    Unsat,
    Skipped,
}

pub struct SecEngine {
    pub shadow_heap: ShadowHeap,
    pub shadow_stack: ShadowStack,
    pub dedup: DedupState,
    pub sources: Vec<OverflowSource>,
    strto_registry: HashMap<u64, bool>, // expr id -> signed?
    pub site_queries: HashMap<SiteKey, u64>,
    pub diags: Vec<ShadowDiag>,
    pub predicates: PredicateSet,
}

impl SecEngine {
    pub fn new(predicates: PredicateSet) -> SecEngine {
        SecEngine {
            shadow_heap: ShadowHeap::default(),
            shadow_stack: ShadowStack::default(),
            dedup: DedupState::default(),
            sources: Vec::new(),
            strto_registry: HashMap::new(),
            site_queries: HashMap::new(),
            diags: Vec::new(),
            predicates,
        }
    }

    pub fn register_strto(&mut self, expr: &SymExpr, signed: bool) {
        self.strto_registry.insert(expr.id(), signed);
    }

    pub fn update_shadow_alloc(&mut self, info: &crate::minivm::AllocInfo) {
        use crate::minivm::AllocInfo::*;
        match info {
            Malloc { base, size } => self.shadow_heap.insert(*base, *size),
            Calloc { base, size, .. } => self.shadow_heap.insert(*base, *size),
            Realloc { old_base, new_base, new_size, .. } => {
                self.shadow_heap.remove(*old_base);
                self.shadow_heap.insert(*new_base, *new_size);
            }
            Free { base, known, double } => {
                if !known {
                    self.diags.push(ShadowDiag::FreeUnknown { base: *base });
                } else if *double {
                    self.diags.push(ShadowDiag::DoubleFree { base: *base });
                } else {
                    self.shadow_heap.remove(*base);
                }
            }
        }
    }

    pub fn record_source(&mut self, source: OverflowSource) -> usize {
        self.sources.push(source);
        self.sources.len() - 1
    }

    /// Buffer bounds for a symbolic memory access at a concrete address.
    pub fn bounds_for(&self, concrete_addr: u64, addr_expr: Option<&SymExpr>) -> Bounds {
        if let Some((base, size)) = self.shadow_heap.lookup(concrete_addr) {
            return Bounds {
                lower: Some(base),
                upper: Some(base + size),
                provenance: Provenance::Heap,
            };
        }
        if (crate::minivm::STACK_BASE..crate::minivm::STACK_TOP).contains(&concrete_addr) {
            let upper = self.shadow_stack.closest_above(concrete_addr);
            let lower = addr_expr.and_then(concrete_base_heuristic);
            return Bounds { lower, upper, provenance: Provenance::Stack };
        }
        Bounds {
            lower: addr_expr.and_then(concrete_base_heuristic),
            upper: None,
            provenance: Provenance::GlobalHeuristic,
        }
    }

    /// Algorithm: strto-family provenance short-circuits, then backward
    /// iteration over the path predicate looking for the first live branch
    /// sharing a variable with the sink; signed and unsigned comparison
    /// families decide, ambiguous conditions are skipped.
    pub fn detect_signedness(
        &self,
        sink: &SymExpr,
        call_stack: &CallStack,
        path: &PathPredicate,
    ) -> (Signedness, SignednessEvidence) {
        let mut signed_hit = false;
        let mut unsigned_hit = false;
        let mut seen = HashSet::new();
        let mut stack = vec![sink.clone()];
        while let Some(e) = stack.pop() {
            if !seen.insert(e.id()) {
                continue;
            }
            if let Some(signed) = self.strto_registry.get(&e.id()) {
                if *signed {
                    signed_hit = true;
                } else {
                    unsigned_hit = true;
                }
            }
            for c in e.children() {
                stack.push(c.clone());
            }
        }
        match (signed_hit, unsigned_hit) {
            (true, false) => return (Signedness::Signed, SignednessEvidence::StrtoFamily),
            (false, true) => return (Signedness::Unsigned, SignednessEvidence::StrtoFamily),
            _ => {}
        }

        let vars = sink.used_variables();
        for c in path.iter().rev() {
            if c.is_tie() || !c.expr.shares_vars_with(vars) {
                continue;
            }
            if let Some((cond, _)) = c.branch_cond() {
                if call_stack.contains_site(c.call_site) {
                    if cond.is_signed() {
                        return (Signedness::Signed, SignednessEvidence::BranchSlicing);
                    }
                    if cond.is_unsigned() {
                        return (Signedness::Unsigned, SignednessEvidence::BranchSlicing);
                    }
                    // ambiguous (jz/jnz): keep walking backwards
                }
            }
        }
        (Signedness::Unknown, SignednessEvidence::None)
    }

    /// Solves one site query. `memo_on_unsat` is set only for the final
    /// (bare) predicate attempt: preliminary strong-precondition attempts
    /// must not poison the unsat memo, or the fallback would be skipped.
    fn solve_site(
        &mut self,
        q: &mut QueryCtx<'_>,
        site: SiteKey,
        assertions: &[SymExpr],
        memo_on_unsat: bool,
    ) -> SiteSolve {
        let path_len = q.path.len();
        if self.dedup.should_skip(site, path_len) {
            return SiteSolve::Skipped;
        }
        *self.site_queries.entry(site).or_insert(0) += 1;
        if q.emit_smt {
            let name = format!("{:016x}.smt2", fnv1a64_u64s(&[site.0, site.1, site.2]));
            q.smt_dumps.push((name, emit_script(assertions)));
        }
        match q.solver.solve(assertions) {
            Ok(SolverVerdict::Sat(model)) => {
                let input = q.generate_input(&model);
                SiteSolve::Sat { input, model }
            }
            Ok(SolverVerdict::Unsat) => {
                if memo_on_unsat {
                    self.dedup.memo_unsat(site, path_len);
                }
                SiteSolve::Unsat
            }
            Ok(SolverVerdict::Unknown(_)) | Err(_) => {
                if memo_on_unsat {
                    self.dedup.memo_unsat(site, path_len);
                }
                SiteSolve::Skipped
            }
        }
    }

    fn sliced(&self, q: &QueryCtx<'_>, seeds: &BTreeSet<VarName>) -> Vec<SymExpr> {
        crate::path::slice(q.path.as_slice(), seeds)
            .into_iter()
            .map(|c| c.expr.clone())
            .collect()
    }

    /// Null-dereference predicate: address equals zero, with a null-page
    /// fallback when the exact zero is unreachable.
    pub fn check_null_deref(
        &mut self,
        q: &mut QueryCtx<'_>,
        addr_expr: &SymExpr,
        site_addr: u64,
    ) -> Option<ErrorReport> {
        if !self.predicates.null_deref {
            return None;
        }
        let kind = ReportKind::NullDeref;
        if self.dedup.suppress_if_set(kind, site_addr, site_addr) {
            return None;
        }
        let site = (kind.code(), site_addr, site_addr);
        let mut assertions = self.sliced(q, addr_expr.used_variables());
        let zero = SymExpr::bv(0, 64);
        assertions.push(addr_expr.equ(&zero));
        let solved = match self.solve_site(q, site, &assertions, false) {
            SiteSolve::Sat { input, model } => Some((input, model)),
            SiteSolve::Unsat => {
                // fallback: anywhere in the unmapped null page
                let mut fb = self.sliced(q, addr_expr.used_variables());
                fb.push(addr_expr.ult(&SymExpr::bv(crate::minivm::NULL_PAGE_END as u128, 64)));
                match self.solve_site(q, site, &fb, true) {
                    SiteSolve::Sat { input, model } => Some((input, model)),
                    _ => None,
                }
            }
            SiteSolve::Skipped => None,
        };
        let (input, _model) = solved?;
        self.dedup.dedup_and_memo(kind, site_addr, site_addr);
        Some(ErrorReport {
            kind,
            source_addr: site_addr,
            sink_addr: site_addr,
            signedness_evidence: SignednessEvidence::None,
            precondition_used: false,
            input,
            input_file: None,
            verification: Verification::Unverified,
            smt_file: None,
            watchpoints: Vec::new(),
            trap_addr: None,
        })
    }

    /// Division-by-zero predicate: the divisor equals zero.
    pub fn check_div_zero(
        &mut self,
        q: &mut QueryCtx<'_>,
        divisor_expr: &SymExpr,
        site_addr: u64,
    ) -> Option<ErrorReport> {
        if !self.predicates.div_zero {
            return None;
        }
        let kind = ReportKind::DivByZero;
        if self.dedup.suppress_if_set(kind, site_addr, site_addr) {
            return None;
        }
        let site = (kind.code(), site_addr, site_addr);
        let zero = SymExpr::bv(0, divisor_expr.width());
        let mut assertions = self.sliced(q, divisor_expr.used_variables());
        assertions.push(divisor_expr.equ(&zero));
        match self.solve_site(q, site, &assertions, true) {
            SiteSolve::Sat { input, .. } => {
                self.dedup.dedup_and_memo(kind, site_addr, site_addr);
                Some(ErrorReport {
                    kind,
                    source_addr: site_addr,
                    sink_addr: site_addr,
                    signedness_evidence: SignednessEvidence::None,
                    precondition_used: false,
                    input,
                    input_file: None,
                    verification: Verification::Unverified,
                    smt_file: None,
                    watchpoints: Vec::new(),
                    trap_addr: None,
                })
            }
            _ => None,
        }
    }

    /// Out-of-bounds predicate around the detected bounds, with the strong
    /// precondition (return-address slot hit for stack writes, negative
    /// address otherwise) tried first.
    #[allow(clippy::too_many_arguments)]
    pub fn check_oob(
        &mut self,
        q: &mut QueryCtx<'_>,
        addr_expr: &SymExpr,
        concrete_addr: u64,
        is_write: bool,
        value_symbolic: bool,
        site_addr: u64,
    ) -> Option<ErrorReport> {
        if !self.predicates.oob {
            return None;
        }
        let kind = if is_write && value_symbolic {
            ReportKind::WriteWhatWhere
        } else if is_write {
            ReportKind::OutOfBoundsWrite
        } else {
            ReportKind::OutOfBoundsRead
        };
        if self.dedup.suppress_if_set(kind, site_addr, site_addr) {
            return None;
        }
        let bounds = self.bounds_for(concrete_addr, Some(addr_expr));
        let mut disjuncts = Vec::new();
        if let Some(lower) = bounds.lower {
            disjuncts.push(addr_expr.ult(&SymExpr::bv(lower as u128, 64)));
        }
        if let Some(upper) = bounds.upper {
            disjuncts.push(addr_expr.uge(&SymExpr::bv(upper as u128, 64)));
        }
        if disjuncts.is_empty() {
            return None;
        }
        let oob_pred = or_all(disjuncts);
        let site = (kind.code(), site_addr, site_addr);

        let strong = if is_write && bounds.provenance == Provenance::Stack
            && !self.shadow_stack.slots().is_empty()
        {
            or_all(
                self.shadow_stack
                    .slots()
                    .iter()
                    .map(|s| addr_expr.equ(&SymExpr::bv(*s as u128, 64)))
                    .collect(),
            )
        } else {
            bit_is_one(addr_expr, 63)
        };

        let mut seeds = addr_expr.used_variables().clone();
        seeds.extend(strong.used_variables().iter().cloned());
        let base_slice = self.sliced(q, &seeds);

        let mut strong_assert = base_slice.clone();
        strong_assert.push(oob_pred.clone());
        strong_assert.push(strong);
        let (input, precondition_used) = match self.solve_site(q, site, &strong_assert, false) {
            SiteSolve::Sat { input, .. } => (input, true),
            _ => {
                let mut plain = base_slice;
                plain.push(oob_pred);
                match self.solve_site(q, site, &plain, true) {
                    SiteSolve::Sat { input, .. } => (input, false),
                    _ => return None,
                }
            }
        };
        self.dedup.dedup_and_memo(kind, site_addr, site_addr);
        Some(ErrorReport {
            kind,
            source_addr: site_addr,
            sink_addr: site_addr,
            signedness_evidence: SignednessEvidence::None,
            precondition_used,
            input,
            input_file: None,
            verification: Verification::Unverified,
            smt_file: None,
            watchpoints: Vec::new(),
            trap_addr: None,
        })
    }

    /// Copy-size predicate: a symbolic size argument driven past the
    /// destination's upper bound.
    pub fn check_copy_size(
        &mut self,
        q: &mut QueryCtx<'_>,
        dst_concrete: u64,
        size_expr: &SymExpr,
        site_addr: u64,
    ) -> Option<ErrorReport> {
        if !self.predicates.oob {
            return None;
        }
        let kind = ReportKind::CopySizeOverflow;
        if self.dedup.suppress_if_set(kind, site_addr, site_addr) {
            return None;
        }
        let bounds = self.bounds_for(dst_concrete, None);
        let upper = bounds.upper?;
        if upper <= dst_concrete {
            return None;
        }
        let avail = upper - dst_concrete;
        let site = (kind.code(), site_addr, site_addr);
        let mut assertions = self.sliced(q, size_expr.used_variables());
        assertions.push(size_expr.ugt(&SymExpr::bv(avail as u128, 64)));
        match self.solve_site(q, site, &assertions, true) {
            SiteSolve::Sat { input, .. } => {
                self.dedup.dedup_and_memo(kind, site_addr, site_addr);
                Some(ErrorReport {
                    kind,
                    source_addr: site_addr,
                    sink_addr: site_addr,
                    signedness_evidence: SignednessEvidence::None,
                    precondition_used: false,
                    input,
                    input_file: None,
                    verification: Verification::Unverified,
                    smt_file: None,
                    watchpoints: Vec::new(),
                    trap_addr: None,
                })
            }
            _ => None,
        }
    }

    /// calloc count*elem wraparound: the 64-bit product overflows yet lands
    /// on a small non-zero allocation.
    pub fn check_alloc_count_overflow(
        &mut self,
        q: &mut QueryCtx<'_>,
        count_expr: &SymExpr,
        elem_expr: &SymExpr,
        concrete_total: u64,
        site_addr: u64,
    ) -> Option<ErrorReport> {
        if !self.predicates.int_overflow {
            return None;
        }
        let kind = ReportKind::AllocSizeOverflow;
        if self.dedup.suppress_if_set(kind, site_addr, site_addr) {
            return None;
        }
        let wide = count_expr.zext(64).mul(&elem_expr.zext(64));
        let truncated = wide.extract(63, 0);
        let wrapped = wide.extract(127, 64).neq(&SymExpr::bv(0, 64));
        let site = (kind.code(), site_addr, site_addr);
        let mut seeds = count_expr.used_variables().clone();
        seeds.extend(elem_expr.used_variables().iter().cloned());
        let mut assertions = self.sliced(q, &seeds);
        assertions.push(wrapped);
        assertions.push(truncated.neq(&SymExpr::bv(0, 64)));
        assertions.push(truncated.ult(&SymExpr::bv(concrete_total.max(1) as u128, 64)));
        match self.solve_site(q, site, &assertions, true) {
            SiteSolve::Sat { input, .. } => {
                self.dedup.dedup_and_memo(kind, site_addr, site_addr);
                Some(ErrorReport {
                    kind,
                    source_addr: site_addr,
                    sink_addr: site_addr,
                    signedness_evidence: SignednessEvidence::None,
                    precondition_used: true,
                    input,
                    input_file: None,
                    verification: Verification::Unverified,
                    smt_file: None,
                    watchpoints: Vec::new(),
                    trap_addr: None,
                })
            }
            _ => None,
        }
    }

    fn watch_for(kind: SourceKind, signed: bool, addr: u64) -> Watchpoint {
        let flag = match (kind, signed) {
            (SourceKind::ShlSal, false) => WatchFlag::ShiftU,
            (SourceKind::ShlSal, true) => WatchFlag::ShiftS,
            (SourceKind::AdcFinal | SourceKind::SbbFinal, true) => WatchFlag::LastSbbOf,
            (_, true) => WatchFlag::Of,
            (_, false) => WatchFlag::Cf,
        };
        Watchpoint { addr, flag }
    }

    /// Integer-overflow sink handling: match recorded sources inside the
    /// sink AST (including promotion/extraction rebuilds), decide
    /// signedness, then solve the predicate with the sink-specific strong
    /// precondition first.
    pub fn check_int_overflow_sink(
        &mut self,
        q: &mut QueryCtx<'_>,
        sink_expr: &SymExpr,
        _sink_kind: SinkKind,
        sink_addr: u64,
        precond: SinkPrecond,
    ) -> Vec<ErrorReport> {
        if !self.predicates.int_overflow {
            return Vec::new();
        }
        let mut reports = Vec::new();
        let candidates: Vec<(usize, u32, SymExpr, SymExpr)> = {
            let mut out = Vec::new();
            for (i, src) in self.sources.iter().enumerate() {
                if sink_expr.contains_subtree(&src.result) {
                    out.push((i, src.width, src.unsigned_pred.clone(), src.signed_pred.clone()));
                }
                // integer promotion: rebuild at every extraction width
                for (_, lo, hi) in sink_expr.find_extract_nodes(&src.result) {
                    if lo != 0 {
                        continue;
                    }
                    let new_w = hi + 1;
                    if new_w >= src.width {
                        continue;
                    }
                    if let Some((u, s)) = rebuild_at_width(src, new_w) {
                        out.push((i, new_w, u, s));
                    }
                }
            }
            out
        };

        let precond_exprs = |sink: &SymExpr| -> Vec<SymExpr> {
            match precond {
                SinkPrecond::None => Vec::new(),
                SinkPrecond::AllocSize { concrete } => vec![
                    sink.neq(&SymExpr::bv(0, sink.width())),
                    sink.ult(&SymExpr::bv(concrete as u128, sink.width())),
                ],
                SinkPrecond::CopySize { concrete } => {
                    vec![sink.ugt(&SymExpr::bv(concrete as u128, sink.width()))]
                }
            }
        };

        for (src_idx, pred_width, unsigned_pred, signed_pred) in candidates {
            let (source_addr, source_kind) = {
                let s = &self.sources[src_idx];
                (s.inst_addr, s.kind)
            };
            let (signedness, evidence) = self.detect_signedness(sink_expr, q.call_stack, q.path);

            let solve_one = |engine: &mut SecEngine,
                                 q: &mut QueryCtx<'_>,
                                 pred: &SymExpr,
                                 kind: ReportKind,
                                 extra: &[SymExpr]|
             -> Option<(Vec<u8>, bool)> {
                if engine.dedup.suppress_if_set(kind, source_addr, sink_addr) {
                    return None;
                }
                // rebuilt predicates at a smaller width are different
                // formulas at the same site; they get their own memo slot
                let site = (kind.code() | (pred_width as u64) << 8, source_addr, sink_addr);
                let mut seeds = pred.used_variables().clone();
                for e in extra {
                    seeds.extend(e.used_variables().iter().cloned());
                }
                seeds.extend(sink_expr.used_variables().iter().cloned());
                let base = engine.sliced(q, &seeds);
                let pres = precond_exprs(sink_expr);
                if !pres.is_empty() {
                    let mut strong = base.clone();
                    strong.push(pred.clone());
                    strong.extend(extra.iter().cloned());
                    strong.extend(pres);
                    if let SiteSolve::Sat { input, .. } = engine.solve_site(q, site, &strong, false)
                    {
                        return Some((input, true));
                    }
                }
                let mut plain = base;
                plain.push(pred.clone());
                plain.extend(extra.iter().cloned());
                match engine.solve_site(q, site, &plain, true) {
                    SiteSolve::Sat { input, .. } => Some((input, false)),
                    _ => None,
                }
            };

            let mut emit = |engine: &mut SecEngine,
                            kind: ReportKind,
                            input: Vec<u8>,
                            precondition_used: bool,
                            watch_signed: &[bool]| {
                engine.dedup.dedup_and_memo(kind, source_addr, sink_addr);
                let watchpoints = watch_signed
                    .iter()
                    .map(|s| Self::watch_for(source_kind, *s, source_addr))
                    .collect();
                reports.push(ErrorReport {
                    kind,
                    source_addr,
                    sink_addr,
                    signedness_evidence: evidence,
                    precondition_used,
                    input,
                    input_file: None,
                    verification: Verification::Unverified,
                    smt_file: None,
                    watchpoints,
                    trap_addr: None,
                });
            };

            match signedness {
                Signedness::Signed => {
                    if let Some((input, pre)) =
                        solve_one(self, q, &signed_pred, ReportKind::IntOverflowSigned, &[])
                    {
                        emit(self, ReportKind::IntOverflowSigned, input, pre, &[true]);
                    }
                }
                Signedness::Unsigned => {
                    if let Some((input, pre)) =
                        solve_one(self, q, &unsigned_pred, ReportKind::IntOverflowUnsigned, &[])
                    {
                        emit(self, ReportKind::IntOverflowUnsigned, input, pre, &[false]);
                    }
                }
                Signedness::Unknown => {
                    // a site already reported under any overflow kind is done
                    if self
                        .dedup
                        .suppress_if_set(ReportKind::IntOverflowBoth, source_addr, sink_addr)
                        || self
                            .dedup
                            .suppress_if_set(ReportKind::IntOverflowSigned, source_addr, sink_addr)
                        || self
                            .dedup
                            .suppress_if_set(ReportKind::IntOverflowUnsigned, source_addr, sink_addr)
                    {
                        continue;
                    }
                    // both signednesses at once first
                    if let Some((input, pre)) = solve_one(
                        self,
                        q,
                        &signed_pred,
                        ReportKind::IntOverflowBoth,
                        std::slice::from_ref(&unsigned_pred),
                    ) {
                        emit(self, ReportKind::IntOverflowBoth, input, pre, &[true, false]);
                        continue;
                    }
                    // otherwise report only when BOTH are separately
                    // satisfiable; a single-sided hit is suppressed
                    let signed_hit =
                        solve_one(self, q, &signed_pred, ReportKind::IntOverflowSigned, &[]);
                    let unsigned_hit =
                        solve_one(self, q, &unsigned_pred, ReportKind::IntOverflowUnsigned, &[]);
                    if let (Some((si, sp)), Some((ui, up))) = (signed_hit, unsigned_hit) {
                        emit(self, ReportKind::IntOverflowSigned, si, sp, &[true]);
                        emit(self, ReportKind::IntOverflowUnsigned, ui, up, &[false]);
                    }
                }
            }
        }
        reports
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::SymExpr;
    use crate::minivm::Cond;
    use crate::path::{ConstraintKind, PathPredicate};

    #[test]
    fn shadow_heap_half_open_interval() {
        let mut h = ShadowHeap::default();
        h.insert(0x4000_0000, 8);
        assert_eq!(h.lookup(0x4000_0007), Some((0x4000_0000, 8)));
        assert_eq!(h.lookup(0x4000_0008), None);
        assert_eq!(h.lookup(0x3FFF_FFFF), None);
    }

    #[test]
    fn shadow_heap_realloc_moves() {
        let mut h = ShadowHeap::default();
        h.insert(0x4000_0000, 8);
        // realloc to a new base
        h.remove(0x4000_0000);
        h.insert(0x4000_0020, 16);
        assert_eq!(h.lookup(0x4000_0000), None);
        assert_eq!(h.lookup(0x4000_002F), Some((0x4000_0020, 16)));
    }

    #[test]
    fn shadow_stack_call_ret_discipline() {
        let mut s = ShadowStack::default();
        s.on_call(0xFFFFF8); // call at sp=0x1000000 pushes slot sp-8
        assert_eq!(s.slots(), &[0xFFFFF8]);
        s.on_call(0xFFFFE0);
        assert_eq!(s.slots(), &[0xFFFFF8, 0xFFFFE0]);
        // ret restores sp above the inner slot
        s.pop_below(0xFFFFE8);
        assert_eq!(s.slots(), &[0xFFFFF8]);
        assert_eq!(s.closest_above(0xFFFF00), Some(0xFFFFF8));
    }

    #[test]
    fn base_heuristic_spec_examples() {
        let i = SymExpr::var("bh_i", 8).zext(56);
        // 0x1000 + zext(i) -> 0x1000
        let e1 = SymExpr::bv(0x1000, 64).add(&i);
        assert_eq!(concrete_base_heuristic(&e1), Some(0x1000));
        // (sp - 0x20) + zext(i) with concrete sp folds into one constant
        let sp = 0xFFFF00u64;
        let e2 = SymExpr::bv(sp as u128, 64)
            .sub(&SymExpr::bv(0x20, 64))
            .add(&i);
        assert_eq!(concrete_base_heuristic(&e2), Some(sp - 0x20));
        // 0x1000 + (zext(i) - 0x20): the -0x20 belongs to the index
        let e3 = SymExpr::bv(0x1000, 64).add(&i.sub(&SymExpr::bv(0x20, 64)));
        assert_eq!(concrete_base_heuristic(&e3), Some(0x1000));
        // no concrete part at all
        assert_eq!(concrete_base_heuristic(&i), None);
    }

    #[test]
    fn bounds_for_heap_and_global() {
        let mut eng = SecEngine::new(PredicateSet::default());
        eng.shadow_heap.insert(0x4000_0000, 8);
        let b = eng.bounds_for(0x4000_0003, None);
        assert_eq!(b.lower, Some(0x4000_0000));
        assert_eq!(b.upper, Some(0x4000_0008));
        assert_eq!(b.provenance, Provenance::Heap);

        let idx = SymExpr::var("bf_i", 8).zext(56);
        let addr = SymExpr::bv(0x1000, 64).add(&idx);
        let g = eng.bounds_for(0x1002, Some(&addr));
        assert_eq!(g.lower, Some(0x1000));
        assert_eq!(g.upper, None);
        assert_eq!(g.provenance, Provenance::GlobalHeuristic);
    }

    #[test]
    fn bounds_for_stack_uses_closest_slot() {
        let mut eng = SecEngine::new(PredicateSet::default());
        eng.shadow_stack.on_call(0xFFFFF8);
        let b = eng.bounds_for(0xFFFF10, None);
        assert_eq!(b.upper, Some(0xFFFFF8));
        assert_eq!(b.provenance, Provenance::Stack);
    }

    #[test]
    fn dedup_bitmap_behavior() {
        let mut d = DedupState::default();
        assert_eq!(
            d.dedup_and_memo(ReportKind::NullDeref, 1, 2),
            DedupVerdict::Fresh
        );
        assert_eq!(
            d.dedup_and_memo(ReportKind::NullDeref, 1, 2),
            DedupVerdict::Duplicate
        );
        // same site, different kind is fresh
        assert_eq!(
            d.dedup_and_memo(ReportKind::DivByZero, 1, 2),
            DedupVerdict::Fresh
        );
    }

    #[test]
    fn unsat_memo_skips_longer_paths() {
        let mut d = DedupState::default();
        let site = (1u64, 2u64, 3u64);
        assert!(!d.should_skip(site, 5));
        d.memo_unsat(site, 5);
        assert!(d.should_skip(site, 5));
        assert!(d.should_skip(site, 9));
        assert!(!d.should_skip(site, 4));
    }

    // --- overflow predicate oracles -------------------------------------

    fn eval_pred(pred: &SymExpr, vals: &[(&str, u64)]) -> bool {
        let mut m = Model::new();
        for (n, v) in vals {
            m.set(n, *v as u128);
        }
        pred.evaluate_bool(&m).unwrap()
    }

    #[test]
    fn add_unsigned_predicate_is_carry_bit() {
        let a = SymExpr::var("ap_a", 32);
        let b = SymExpr::var("ap_b", 32);
        let src = build_overflow_source(
            0x10,
            Mnemonic::Add,
            32,
            &a,
            &b,
            &SymExpr::bool_const(false),
            &a.add(&b),
            false,
        )
        .unwrap();
        // (zext33(a) + zext33(b))[32] == 1
        assert!(eval_pred(&src.unsigned_pred, &[("ap_a", u32::MAX as u64), ("ap_b", 1)]));
        assert!(!eval_pred(&src.unsigned_pred, &[("ap_a", 5), ("ap_b", 7)]));
    }

    #[test]
    fn shl_predicate_extracts_top_bits() {
        use crate::expr::ExprKind;
        let v = SymExpr::var("sp_v", 8);
        let (u, _s) = shl_overflow_preds(&v, 2, 8);
        // unsigned predicate is Extract(7,6)(v) != 0
        match u.kind() {
            ExprKind::Ne => {
                let ex = &u.children()[0];
                assert!(matches!(ex.kind(), ExprKind::Extract(7, 6)));
            }
            other => panic!("unexpected shape {other:?}"),
        }
    }

    #[test]
    fn shift_predicates_match_reference_exhaustively() {
        use crate::minivm::{shift_signed_overflow, shift_unsigned_overflow, Width};
        let v = SymExpr::var("sq_v", 8);
        for count in 0..=8u32 {
            let (u, s) = shl_overflow_preds(&v, count, 8);
            for value in 0..=255u64 {
                let mut m = Model::new();
                m.set("sq_v", value as u128);
                assert_eq!(
                    u.evaluate_bool(&m).unwrap(),
                    shift_unsigned_overflow(value, count, Width::W8),
                    "unsigned count={count} value={value}"
                );
                assert_eq!(
                    s.evaluate_bool(&m).unwrap(),
                    shift_signed_overflow(value, count, Width::W8),
                    "signed count={count} value={value}"
                );
            }
        }
    }

    #[test]
    fn overflow_predicates_agree_with_flag_oracle_width8() {
        use crate::minivm::{flag_semantics, Flags, Width};
        let a = SymExpr::var("fo_a", 8);
        let b = SymExpr::var("fo_b", 8);
        let fcarry = SymExpr::bool_const(false);
        for (m, kind) in [
            (Mnemonic::Add, SourceKind::Add),
            (Mnemonic::Sub, SourceKind::Sub),
            (Mnemonic::Mul, SourceKind::Mul),
            (Mnemonic::Imul, SourceKind::Imul),
        ] {
            let result = arith_sym_flags(m, 8, &a, &b, &fcarry).unwrap().result;
            let src = build_overflow_source(0x20, m, 8, &a, &b, &fcarry, &result, false).unwrap();
            assert_eq!(src.kind, kind);
            for av in 0..=255u64 {
                for bv in 0..=255u64 {
                    let (_, f) = flag_semantics(m, Width::W8, av, bv, Flags::default());
                    assert_eq!(
                        eval_pred(&src.unsigned_pred, &[("fo_a", av), ("fo_b", bv)]),
                        f.cf,
                        "{m:?} CF {av} {bv}"
                    );
                    assert_eq!(
                        eval_pred(&src.signed_pred, &[("fo_a", av), ("fo_b", bv)]),
                        f.of,
                        "{m:?} OF {av} {bv}"
                    );
                }
            }
        }
        // neg is unary
        let result = arith_sym_flags(Mnemonic::Neg, 8, &a, &b, &fcarry).unwrap().result;
        let src =
            build_overflow_source(0x24, Mnemonic::Neg, 8, &a, &b, &fcarry, &result, false).unwrap();
        for av in 0..=255u64 {
            let (_, f) = flag_semantics(Mnemonic::Neg, Width::W8, av, 0, Flags::default());
            assert_eq!(eval_pred(&src.unsigned_pred, &[("fo_a", av), ("fo_b", 0)]), f.cf);
            assert_eq!(eval_pred(&src.signed_pred, &[("fo_a", av), ("fo_b", 0)]), f.of);
        }
    }

    #[test]
    fn adc_sbb_with_carry_agree_with_flag_oracle() {
        use crate::minivm::{flag_semantics, Flags, Width};
        let a = SymExpr::var("ac_a", 8);
        let b = SymExpr::var("ac_b", 8);
        for m in [Mnemonic::Adc, Mnemonic::Sbb] {
            for cin in [false, true] {
                let carry = SymExpr::bool_const(cin);
                let flags = arith_sym_flags(m, 8, &a, &b, &carry).unwrap();
                let src = build_overflow_source(0x28, m, 8, &a, &b, &carry, &flags.result, true)
                    .unwrap();
                for av in 0..=255u64 {
                    for bv in 0..=255u64 {
                        let f_in = Flags { cf: cin, ..Flags::default() };
                        let (_, f) = flag_semantics(m, Width::W8, av, bv, f_in);
                        assert_eq!(
                            eval_pred(&src.unsigned_pred, &[("ac_a", av), ("ac_b", bv)]),
                            f.cf,
                            "{m:?} CF {av} {bv} cin={cin}"
                        );
                        assert_eq!(
                            eval_pred(&src.signed_pred, &[("ac_a", av), ("ac_b", bv)]),
                            f.of,
                            "{m:?} OF {av} {bv} cin={cin}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn unpaired_adc_produces_no_source() {
        let a = SymExpr::var("up_a", 8);
        let b = SymExpr::var("up_b", 8);
        let carry = SymExpr::bool_const(false);
        let res = a.add(&b);
        assert!(build_overflow_source(0x2C, Mnemonic::Adc, 8, &a, &b, &carry, &res, false)
            .is_none());
    }

    #[test]
    fn add_negative_constant_treated_as_subtraction() {
        use crate::minivm::{flag_semantics, Flags, Width};
        let a = SymExpr::var("an_a", 32);
        let b = SymExpr::bv(0xFFFF_FFFF, 32); // -1
        let carry = SymExpr::bool_const(false);
        let res = a.add(&b);
        let src =
            build_overflow_source(0x30, Mnemonic::Add, 32, &a, &b, &carry, &res, false).unwrap();
        assert_eq!(src.kind, SourceKind::AddNegConst);
        // predicates equal those of sub a, 1
        for av in [0u64, 1, 5, 0x8000_0000, u32::MAX as u64] {
            let (_, f) = flag_semantics(Mnemonic::Sub, Width::W32, av, 1, Flags::default());
            assert_eq!(eval_pred(&src.unsigned_pred, &[("an_a", av)]), f.cf, "av={av}");
            assert_eq!(eval_pred(&src.signed_pred, &[("an_a", av)]), f.of, "av={av}");
        }
    }

    // --- Algorithm: signedness detection ---------------------------------

    fn path_with(branches: &[(Cond, &SymExpr, Option<u64>)]) -> PathPredicate {
        let mut p = PathPredicate::new();
        for (i, (cond, expr, site)) in branches.iter().enumerate() {
            p.push(
                (*expr).clone().equ(&SymExpr::bv(0, (*expr).width())),
                ConstraintKind::Branch { cond: *cond, taken: true },
                0x1000_0000 + i as u64 * 4,
                *site,
                Some(i),
            );
        }
        p
    }

    #[test]
    fn signed_mnemonic_detected() {
        let eng = SecEngine::new(PredicateSet::default());
        let x = SymExpr::var("sd_x", 32);
        let path = path_with(&[(Cond::L, &x, None)]);
        let (s, e) = eng.detect_signedness(&x, &CallStack::new(), &path);
        assert_eq!(s, Signedness::Signed);
        assert_eq!(e, SignednessEvidence::BranchSlicing);
    }

    #[test]
    fn unsigned_mnemonic_detected() {
        let eng = SecEngine::new(PredicateSet::default());
        let x = SymExpr::var("sd_y", 32);
        let path = path_with(&[(Cond::A, &x, None)]);
        let (s, _) = eng.detect_signedness(&x, &CallStack::new(), &path);
        assert_eq!(s, Signedness::Unsigned);
    }

    #[test]
    fn ambiguous_jz_skipped_then_earlier_branch_decides() {
        let eng = SecEngine::new(PredicateSet::default());
        let x = SymExpr::var("sd_z", 32);
        // backward iteration sees jz first (skipped), then jge (signed)
        let path = path_with(&[(Cond::Ge, &x, None), (Cond::Z, &x, None)]);
        let (s, _) = eng.detect_signedness(&x, &CallStack::new(), &path);
        assert_eq!(s, Signedness::Signed);
    }

    #[test]
    fn only_ambiguous_branches_yield_unknown() {
        let eng = SecEngine::new(PredicateSet::default());
        let x = SymExpr::var("sd_w", 32);
        let path = path_with(&[(Cond::Z, &x, None), (Cond::Nz, &x, None)]);
        let (s, e) = eng.detect_signedness(&x, &CallStack::new(), &path);
        assert_eq!(s, Signedness::Unknown);
        assert_eq!(e, SignednessEvidence::None);
    }

    #[test]
    fn dead_call_site_branches_are_ignored() {
        let eng = SecEngine::new(PredicateSet::default());
        let x = SymExpr::var("sd_v", 32);
        // the signed branch was recorded in a frame that is no longer live
        let path = path_with(&[(Cond::L, &x, Some(0xDEAD))]);
        let (s, _) = eng.detect_signedness(&x, &CallStack::new(), &path);
        assert_eq!(s, Signedness::Unknown);
        // with the frame live it decides
        let mut stack = CallStack::new();
        stack.push(crate::path::CallFrame { call_site: 0xDEAD, callee: 0, ra_slot: 0xFFFFF8 });
        let (s2, _) = eng.detect_signedness(&x, &stack, &path);
        assert_eq!(s2, Signedness::Signed);
    }

    #[test]
    fn unrelated_variable_branches_are_ignored() {
        let eng = SecEngine::new(PredicateSet::default());
        let x = SymExpr::var("sd_t", 32);
        let other = SymExpr::var("sd_other", 32);
        let path = path_with(&[(Cond::L, &other, None)]);
        let (s, _) = eng.detect_signedness(&x, &CallStack::new(), &path);
        assert_eq!(s, Signedness::Unknown);
    }

    #[test]
    fn strto_provenance_short_circuits() {
        let mut eng = SecEngine::new(PredicateSet::default());
        let x = SymExpr::var("sd_s", 64);
        let derived = x.extract(31, 0).zext(32);
        eng.register_strto(&x, false); // strtoul
        // an unsigned-family short circuit beats any branch evidence
        let path = path_with(&[(Cond::L, &derived, None)]);
        let (s, e) = eng.detect_signedness(&derived, &CallStack::new(), &path);
        assert_eq!(s, Signedness::Unsigned);
        assert_eq!(e, SignednessEvidence::StrtoFamily);
    }
}

//! Immutable, hash-consed bitvector/boolean expression DAG.
//!
//! Every formula the engine builds lives here: instruction results, branch
//! conditions, library-function return models, and security predicates.
//! Nodes are interned globally, so structural equality coincides with
//! pointer identity and subtree matching is a cheap id comparison.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VarName = Arc<str>;

pub const MAX_WIDTH: u32 = 128;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Sort {
    Bv,
    Bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ExprKind {
    BvConst(u128),
    BvVar(VarName),
    Add,
    Sub,
    Mul,
    UDiv,
    And,
    Or,
    Xor,
    Not,
    Neg,
    Shl,
    LShr,
    AShr,
    Concat,
    Extract(u32, u32),
    ZeroExtend(u32),
    SignExtend(u32),
    Ite,
    Eq,
    Ne,
    Ult,
    Ule,
    Ugt,
    Uge,
    Slt,
    Sle,
    Sgt,
    Sge,
    BoolAnd,
    BoolOr,
    BoolNot,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExprError {
    #[error("width mismatch for {kind}: {detail}")]
    WidthMismatch { kind: String, detail: String },
    #[error("{kind} expects {expected} children, got {got}")]
    InvalidArity { kind: String, expected: String, got: usize },
    #[error("unsupported width {0} (must be 1..={MAX_WIDTH})")]
    UnsupportedWidth(u32),
    #[error("operand of {0} must be a bitvector")]
    NotBitvector(String),
    #[error("operand of {0} must be boolean")]
    NotBoolean(String),
    #[error("leaf kind {0} cannot be built with mk; use var/bv constructors")]
    LeafKind(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("unbound variable {0}")]
    UnboundVariable(String),
}

struct Node {
    id: u64,
    kind: ExprKind,
    width: u32,
    sort: Sort,
    children: Vec<SymExpr>,
    vars: Arc<BTreeSet<VarName>>,
}

/// A reference-counted, interned expression node. Cloning is cheap and two
/// structurally identical expressions are always the same allocation.
#[derive(Clone)]
pub struct SymExpr(Arc<Node>);

impl PartialEq for SymExpr {
    fn eq(&self, other: &Self) -> bool {
        self.0.id == other.0.id
    }
}
impl Eq for SymExpr {}

impl std::hash::Hash for SymExpr {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.id.hash(state);
    }
}

#[derive(PartialEq, Eq, Hash)]
struct InternKey {
    kind: ExprKind,
    width: u32,
    sort: Sort,
    children: Vec<u64>,
}

struct Interner {
    map: HashMap<InternKey, SymExpr>,
    next_id: u64,
}

fn interner() -> &'static Mutex<Interner> {
    static POOL: OnceLock<Mutex<Interner>> = OnceLock::new();
    POOL.get_or_init(|| {
        Mutex::new(Interner {
            map: HashMap::new(),
            next_id: 0,
        })
    })
}

fn empty_vars() -> Arc<BTreeSet<VarName>> {
    static EMPTY: OnceLock<Arc<BTreeSet<VarName>>> = OnceLock::new();
    EMPTY.get_or_init(|| Arc::new(BTreeSet::new())).clone()
}

pub fn mask(width: u32) -> u128 {
    if width >= 128 {
        u128::MAX
    } else {
        (1u128 << width) - 1
    }
}

pub fn to_signed(value: u128, width: u32) -> i128 {
    if width >= 128 {
        value as i128
    } else if (value >> (width - 1)) & 1 == 1 {
        (value | (u128::MAX << width)) as i128
    } else {
        value as i128
    }
}

fn intern(kind: ExprKind, width: u32, sort: Sort, children: Vec<SymExpr>) -> SymExpr {
    let key = InternKey {
        kind: kind.clone(),
        width,
        sort,
        children: children.iter().map(|c| c.id()).collect(),
    };
    let mut pool = interner().lock().unwrap();
    if let Some(existing) = pool.map.get(&key) {
        return existing.clone();
    }
    let vars = merge_vars(&kind, &children);
    let id = pool.next_id;
    pool.next_id += 1;
    let expr = SymExpr(Arc::new(Node {
        id,
        kind,
        width,
        sort,
        children,
        vars,
    }));
    pool.map.insert(key, expr.clone());
    expr
}

fn merge_vars(kind: &ExprKind, children: &[SymExpr]) -> Arc<BTreeSet<VarName>> {
    if let ExprKind::BvVar(name) = kind {
        let mut set = BTreeSet::new();
        set.insert(name.clone());
        return Arc::new(set);
    }
    let mut nonempty: Vec<&Arc<BTreeSet<VarName>>> = children
        .iter()
        .map(|c| &c.0.vars)
        .filter(|v| !v.is_empty())
        .collect();
    match nonempty.len() {
        0 => empty_vars(),
        1 => nonempty[0].clone(),
        _ => {
            nonempty.sort_by_key(|v| std::cmp::Reverse(v.len()));
            let biggest = nonempty[0];
            if nonempty[1..].iter().all(|v| v.is_subset(biggest)) {
                return biggest.clone();
            }
            let mut set = (**biggest).clone();
            for v in &nonempty[1..] {
                set.extend(v.iter().cloned());
            }
            Arc::new(set)
        }
    }
}

impl SymExpr {
    pub fn bv(value: u128, width: u32) -> SymExpr {
        assert!((1..=MAX_WIDTH).contains(&width), "bad const width {width}");
        intern(
            ExprKind::BvConst(value & mask(width)),
            width,
            Sort::Bv,
            Vec::new(),
        )
    }

    pub fn var(name: &str, width: u32) -> SymExpr {
        assert!((1..=MAX_WIDTH).contains(&width), "bad var width {width}");
        intern(ExprKind::BvVar(Arc::from(name)), width, Sort::Bv, Vec::new())
    }

    pub fn bool_const(value: bool) -> SymExpr {
        intern(
            ExprKind::BvConst(value as u128),
            1,
            Sort::Bool,
            Vec::new(),
        )
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn kind(&self) -> &ExprKind {
        &self.0.kind
    }

    pub fn width(&self) -> u32 {
        self.0.width
    }

    pub fn sort(&self) -> Sort {
        self.0.sort
    }

    pub fn is_bool(&self) -> bool {
        self.0.sort == Sort::Bool
    }

    pub fn children(&self) -> &[SymExpr] {
        &self.0.children
    }

    pub fn as_const(&self) -> Option<u128> {
        match self.0.kind {
            ExprKind::BvConst(v) => Some(v),
            _ => None,
        }
    }

    pub fn var_name(&self) -> Option<&VarName> {
        match &self.0.kind {
            ExprKind::BvVar(n) => Some(n),
            _ => None,
        }
    }

    /// All variable names reachable in the DAG; cached per node.
    pub fn used_variables(&self) -> &BTreeSet<VarName> {
        &self.0.vars
    }

    pub fn shares_vars_with(&self, vars: &BTreeSet<VarName>) -> bool {
        let mine = self.used_variables();
        if mine.len() <= vars.len() {
            mine.iter().any(|v| vars.contains(v))
        } else {
            vars.iter().any(|v| mine.contains(v))
        }
    }

    /// True iff `needle` occurs as a node of this DAG (identity under
    /// hash-consing).
    pub fn contains_subtree(&self, needle: &SymExpr) -> bool {
        if !needle.used_variables().is_empty()
            && !needle.used_variables().is_subset(self.used_variables())
        {
            return false;
        }
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self];
        while let Some(e) = stack.pop() {
            if e.id() == needle.id() {
                return true;
            }
            if seen.insert(e.id()) {
                stack.extend(e.children().iter());
            }
        }
        false
    }

    /// All Extract nodes in this DAG whose child subtree contains `source`,
    /// returned as (node, lo, hi) in deterministic DFS order, deduplicated
    /// by node identity.
    pub fn find_extract_nodes(&self, source: &SymExpr) -> Vec<(SymExpr, u32, u32)> {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut out = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(e) = stack.pop() {
            if !seen.insert(e.id()) {
                continue;
            }
            if let ExprKind::Extract(hi, lo) = *e.kind() {
                if e.children()[0].contains_subtree(source) {
                    out.push((e.clone(), lo, hi));
                }
            }
            for c in e.children() {
                stack.push(c.clone());
            }
        }
        out.sort_by_key(|(e, _, _)| e.id());
        out
    }

    /// Checked node constructor for operator kinds. Width and sort are
    /// derived from the children; constant folding and a few structural
    /// canonicalizations are applied before interning.
    pub fn mk(kind: ExprKind, children: Vec<SymExpr>) -> Result<SymExpr, ExprError> {
        mk_impl(kind, children)
    }

    pub fn evaluate(&self, model: &Model) -> Result<u128, EvalError> {
        let mut memo: HashMap<u64, u128> = HashMap::new();
        let mut stack: Vec<(SymExpr, bool)> = vec![(self.clone(), false)];
        while let Some((e, ready)) = stack.pop() {
            if memo.contains_key(&e.id()) {
                continue;
            }
            if ready {
                let vals: Vec<u128> = e.children().iter().map(|c| memo[&c.id()]).collect();
                let widths: Vec<u32> = e.children().iter().map(|c| c.width()).collect();
                memo.insert(e.id(), eval_op(e.kind(), e.width(), &widths, &vals));
                continue;
            }
            match e.kind() {
                ExprKind::BvConst(v) => {
                    memo.insert(e.id(), *v);
                }
                ExprKind::BvVar(name) => {
                    let v = model
                        .get(name)
                        .ok_or_else(|| EvalError::UnboundVariable(name.to_string()))?;
                    memo.insert(e.id(), v & mask(e.width()));
                }
                _ => {
                    stack.push((e.clone(), true));
                    for c in e.children() {
                        stack.push((c.clone(), false));
                    }
                }
            }
        }
        Ok(memo[&self.id()])
    }

    pub fn evaluate_bool(&self, model: &Model) -> Result<bool, EvalError> {
        Ok(self.evaluate(model)? != 0)
    }

    // --- convenience builders; these panic on illegal widths, which is a
    // programming error inside the engine. Use mk() for checked building.

    pub fn add(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Add, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn sub(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Sub, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn mul(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Mul, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn udiv(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::UDiv, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn bvand(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::And, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn bvor(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Or, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn bvxor(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Xor, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn bvnot(&self) -> SymExpr {
        Self::mk(ExprKind::Not, vec![self.clone()]).unwrap()
    }
    pub fn neg(&self) -> SymExpr {
        Self::mk(ExprKind::Neg, vec![self.clone()]).unwrap()
    }
    pub fn shl(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Shl, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn lshr(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::LShr, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn ashr(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::AShr, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn concat(&self, low: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Concat, vec![self.clone(), low.clone()]).unwrap()
    }
    pub fn extract(&self, hi: u32, lo: u32) -> SymExpr {
        Self::mk(ExprKind::Extract(hi, lo), vec![self.clone()]).unwrap()
    }
    pub fn zext(&self, extra: u32) -> SymExpr {
        if extra == 0 {
            return self.clone();
        }
        Self::mk(ExprKind::ZeroExtend(extra), vec![self.clone()]).unwrap()
    }
    pub fn sext(&self, extra: u32) -> SymExpr {
        if extra == 0 {
            return self.clone();
        }
        Self::mk(ExprKind::SignExtend(extra), vec![self.clone()]).unwrap()
    }
    pub fn zext_to(&self, width: u32) -> SymExpr {
        assert!(width >= self.width());
        self.zext(width - self.width())
    }
    pub fn sext_to(&self, width: u32) -> SymExpr {
        assert!(width >= self.width());
        self.sext(width - self.width())
    }
    pub fn ite(&self, then: &SymExpr, els: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Ite, vec![self.clone(), then.clone(), els.clone()]).unwrap()
    }
    pub fn equ(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Eq, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn neq(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Ne, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn ult(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Ult, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn ule(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Ule, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn ugt(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Ugt, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn uge(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Uge, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn slt(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Slt, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn sle(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Sle, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn sgt(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Sgt, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn sge(&self, rhs: &SymExpr) -> SymExpr {
        Self::mk(ExprKind::Sge, vec![self.clone(), rhs.clone()]).unwrap()
    }
    pub fn not_bool(&self) -> SymExpr {
        Self::mk(ExprKind::BoolNot, vec![self.clone()]).unwrap()
    }

    /// Renders the expression as a nested s-expression (iteratively, so
    /// arbitrarily deep DAGs from loops do not overflow the stack).
    pub fn to_sexpr(&self) -> String {
        enum Tok {
            Open(SymExpr),
            Text(String),
        }
        let mut out = String::new();
        let mut stack = vec![Tok::Open(self.clone())];
        while let Some(tok) = stack.pop() {
            match tok {
                Tok::Text(s) => out.push_str(&s),
                Tok::Open(e) => match e.kind() {
                    ExprKind::BvConst(v) => {
                        if e.is_bool() {
                            out.push_str(if *v != 0 { "true" } else { "false" });
                        } else {
                            out.push_str(&format!("#x{:0w$x}", v, w = (e.width() as usize).div_ceil(4)));
                        }
                    }
                    ExprKind::BvVar(n) => out.push_str(n),
                    _ => {
                        out.push('(');
                        out.push_str(&kind_symbol(e.kind()));
                        stack.push(Tok::Text(")".to_string()));
                        for c in e.children().iter().rev() {
                            stack.push(Tok::Open(c.clone()));
                            stack.push(Tok::Text(" ".to_string()));
                        }
                    }
                },
            }
        }
        out
    }
}

pub fn kind_symbol(kind: &ExprKind) -> String {
    match kind {
        ExprKind::BvConst(_) => "const".into(),
        ExprKind::BvVar(_) => "var".into(),
        ExprKind::Add => "bvadd".into(),
        ExprKind::Sub => "bvsub".into(),
        ExprKind::Mul => "bvmul".into(),
        ExprKind::UDiv => "bvudiv".into(),
        ExprKind::And => "bvand".into(),
        ExprKind::Or => "bvor".into(),
        ExprKind::Xor => "bvxor".into(),
        ExprKind::Not => "bvnot".into(),
        ExprKind::Neg => "bvneg".into(),
        ExprKind::Shl => "bvshl".into(),
        ExprKind::LShr => "bvlshr".into(),
        ExprKind::AShr => "bvashr".into(),
        ExprKind::Concat => "concat".into(),
        ExprKind::Extract(hi, lo) => format!("(_ extract {hi} {lo})"),
        ExprKind::ZeroExtend(n) => format!("(_ zero_extend {n})"),
        ExprKind::SignExtend(n) => format!("(_ sign_extend {n})"),
        ExprKind::Ite => "ite".into(),
        ExprKind::Eq => "=".into(),
        ExprKind::Ne => "distinct".into(),
        ExprKind::Ult => "bvult".into(),
        ExprKind::Ule => "bvule".into(),
        ExprKind::Ugt => "bvugt".into(),
        ExprKind::Uge => "bvuge".into(),
        ExprKind::Slt => "bvslt".into(),
        ExprKind::Sle => "bvsle".into(),
        ExprKind::Sgt => "bvsgt".into(),
        ExprKind::Sge => "bvsge".into(),
        ExprKind::BoolAnd => "and".into(),
        ExprKind::BoolOr => "or".into(),
        ExprKind::BoolNot => "not".into(),
    }
}

impl fmt::Debug for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.to_sexpr();
        if s.len() > 200 {
            write!(f, "{}… [{} chars, width {}]", &s[..200], s.len(), self.width())
        } else {
            write!(f, "{s}")
        }
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_sexpr())
    }
}

/// Conjunction helper; the empty conjunction folds to `true`.
pub fn and_all(mut exprs: Vec<SymExpr>) -> SymExpr {
    exprs.retain(|e| e.as_const() != Some(1) || !e.is_bool());
    match exprs.len() {
        0 => SymExpr::bool_const(true),
        1 => exprs.pop().unwrap(),
        _ => SymExpr::mk(ExprKind::BoolAnd, exprs).unwrap(),
    }
}

/// Disjunction helper; the empty disjunction folds to `false`.
pub fn or_all(mut exprs: Vec<SymExpr>) -> SymExpr {
    exprs.retain(|e| e.as_const() != Some(0) || !e.is_bool());
    match exprs.len() {
        0 => SymExpr::bool_const(false),
        1 => exprs.pop().unwrap(),
        _ => SymExpr::mk(ExprKind::BoolOr, exprs).unwrap(),
    }
}

/// Evaluates one operator over already-evaluated child values, following
/// SMT-LIB bitvector semantics (bvudiv by zero yields all-ones).
pub fn eval_op(kind: &ExprKind, out_width: u32, child_widths: &[u32], vals: &[u128]) -> u128 {
    let m = mask(out_width);
    match kind {
        ExprKind::BvConst(v) => *v,
        ExprKind::BvVar(_) => unreachable!("variable in eval_op"),
        ExprKind::Add => vals[0].wrapping_add(vals[1]) & m,
        ExprKind::Sub => vals[0].wrapping_sub(vals[1]) & m,
        ExprKind::Mul => vals[0].wrapping_mul(vals[1]) & m,
        ExprKind::UDiv => {
            // SMT-LIB total semantics: division by zero is all-ones
            vals[0].checked_div(vals[1]).map(|v| v & m).unwrap_or(m)
        }
        ExprKind::And => vals[0] & vals[1],
        ExprKind::Or => vals[0] | vals[1],
        ExprKind::Xor => vals[0] ^ vals[1],
        ExprKind::Not => !vals[0] & m,
        ExprKind::Neg => vals[0].wrapping_neg() & m,
        ExprKind::Shl => {
            let sh = vals[1];
            if sh >= out_width as u128 {
                0
            } else {
                (vals[0] << sh) & m
            }
        }
        ExprKind::LShr => {
            let sh = vals[1];
            if sh >= out_width as u128 {
                0
            } else {
                vals[0] >> sh
            }
        }
        ExprKind::AShr => {
            let w = child_widths[0];
            let sign = (vals[0] >> (w - 1)) & 1 == 1;
            let sh = vals[1];
            if sh >= w as u128 {
                if sign {
                    m
                } else {
                    0
                }
            } else {
                let shifted = vals[0] >> sh;
                if sign {
                    (shifted | (m << (w as u128 - sh) & m)) & m
                } else {
                    shifted
                }
            }
        }
        ExprKind::Concat => ((vals[0] << child_widths[1]) | vals[1]) & m,
        ExprKind::Extract(_, lo) => (vals[0] >> lo) & m,
        ExprKind::ZeroExtend(_) => vals[0],
        ExprKind::SignExtend(_) => {
            let w = child_widths[0];
            if (vals[0] >> (w - 1)) & 1 == 1 {
                (vals[0] | (u128::MAX << w)) & m
            } else {
                vals[0]
            }
        }
        ExprKind::Ite => {
            if vals[0] != 0 {
                vals[1]
            } else {
                vals[2]
            }
        }
        ExprKind::Eq => (vals[0] == vals[1]) as u128,
        ExprKind::Ne => (vals[0] != vals[1]) as u128,
        ExprKind::Ult => (vals[0] < vals[1]) as u128,
        ExprKind::Ule => (vals[0] <= vals[1]) as u128,
        ExprKind::Ugt => (vals[0] > vals[1]) as u128,
        ExprKind::Uge => (vals[0] >= vals[1]) as u128,
        ExprKind::Slt => {
            let w = child_widths[0];
            (to_signed(vals[0], w) < to_signed(vals[1], w)) as u128
        }
        ExprKind::Sle => {
            let w = child_widths[0];
            (to_signed(vals[0], w) <= to_signed(vals[1], w)) as u128
        }
        ExprKind::Sgt => {
            let w = child_widths[0];
            (to_signed(vals[0], w) > to_signed(vals[1], w)) as u128
        }
        ExprKind::Sge => {
            let w = child_widths[0];
            (to_signed(vals[0], w) >= to_signed(vals[1], w)) as u128
        }
        ExprKind::BoolAnd => vals.iter().all(|v| *v != 0) as u128,
        ExprKind::BoolOr => vals.iter().any(|v| *v != 0) as u128,
        ExprKind::BoolNot => (vals[0] == 0) as u128,
    }
}

fn arity_err(kind: &ExprKind, expected: &str, got: usize) -> ExprError {
    ExprError::InvalidArity {
        kind: kind_symbol(kind),
        expected: expected.to_string(),
        got,
    }
}

fn width_err(kind: &ExprKind, detail: String) -> ExprError {
    ExprError::WidthMismatch {
        kind: kind_symbol(kind),
        detail,
    }
}

fn validate(kind: &ExprKind, children: &[SymExpr]) -> Result<(u32, Sort), ExprError> {
    use ExprKind::*;
    let all_bv = |kind: &ExprKind| -> Result<(), ExprError> {
        for c in children {
            if c.is_bool() {
                return Err(ExprError::NotBitvector(kind_symbol(kind)));
            }
        }
        Ok(())
    };
    match kind {
        BvConst(_) | BvVar(_) => Err(ExprError::LeafKind(kind_symbol(kind))),
        Add | Sub | Mul | UDiv | And | Or | Xor | Shl | LShr | AShr => {
            if children.len() != 2 {
                return Err(arity_err(kind, "2", children.len()));
            }
            all_bv(kind)?;
            if children[0].width() != children[1].width() {
                return Err(width_err(
                    kind,
                    format!("{} vs {}", children[0].width(), children[1].width()),
                ));
            }
            Ok((children[0].width(), Sort::Bv))
        }
        Not | Neg => {
            if children.len() != 1 {
                return Err(arity_err(kind, "1", children.len()));
            }
            all_bv(kind)?;
            Ok((children[0].width(), Sort::Bv))
        }
        Concat => {
            if children.len() != 2 {
                return Err(arity_err(kind, "2", children.len()));
            }
            all_bv(kind)?;
            let w = children[0].width() + children[1].width();
            if w > MAX_WIDTH {
                return Err(ExprError::UnsupportedWidth(w));
            }
            Ok((w, Sort::Bv))
        }
        Extract(hi, lo) => {
            if children.len() != 1 {
                return Err(arity_err(kind, "1", children.len()));
            }
            all_bv(kind)?;
            if lo > hi || *hi >= children[0].width() {
                return Err(width_err(
                    kind,
                    format!("extract [{hi}:{lo}] from width {}", children[0].width()),
                ));
            }
            Ok((hi - lo + 1, Sort::Bv))
        }
        ZeroExtend(n) | SignExtend(n) => {
            if children.len() != 1 {
                return Err(arity_err(kind, "1", children.len()));
            }
            all_bv(kind)?;
            let w = children[0].width() + n;
            if w > MAX_WIDTH {
                return Err(ExprError::UnsupportedWidth(w));
            }
            Ok((w, Sort::Bv))
        }
        Ite => {
            if children.len() != 3 {
                return Err(arity_err(kind, "3", children.len()));
            }
            if !children[0].is_bool() {
                return Err(ExprError::NotBoolean(kind_symbol(kind)));
            }
            if children[1].sort() != children[2].sort()
                || children[1].width() != children[2].width()
            {
                return Err(width_err(
                    kind,
                    format!("{} vs {}", children[1].width(), children[2].width()),
                ));
            }
            Ok((children[1].width(), children[1].sort()))
        }
        Eq | Ne => {
            if children.len() != 2 {
                return Err(arity_err(kind, "2", children.len()));
            }
            if children[0].sort() != children[1].sort()
                || children[0].width() != children[1].width()
            {
                return Err(width_err(
                    kind,
                    format!("{} vs {}", children[0].width(), children[1].width()),
                ));
            }
            Ok((1, Sort::Bool))
        }
        Ult | Ule | Ugt | Uge | Slt | Sle | Sgt | Sge => {
            if children.len() != 2 {
                return Err(arity_err(kind, "2", children.len()));
            }
            all_bv(kind)?;
            if children[0].width() != children[1].width() {
                return Err(width_err(
                    kind,
                    format!("{} vs {}", children[0].width(), children[1].width()),
                ));
            }
            Ok((1, Sort::Bool))
        }
        BoolAnd | BoolOr => {
            if children.is_empty() {
                return Err(arity_err(kind, ">=1", 0));
            }
            for c in children {
                if !c.is_bool() {
                    return Err(ExprError::NotBoolean(kind_symbol(kind)));
                }
            }
            Ok((1, Sort::Bool))
        }
        BoolNot => {
            if children.len() != 1 {
                return Err(arity_err(kind, "1", children.len()));
            }
            if !children[0].is_bool() {
                return Err(ExprError::NotBoolean(kind_symbol(kind)));
            }
            Ok((1, Sort::Bool))
        }
    }
}

fn mk_impl(kind: ExprKind, children: Vec<SymExpr>) -> Result<SymExpr, ExprError> {
    use ExprKind::*;
    let (width, sort) = validate(&kind, &children)?;

    // Full constant fold.
    if !children.is_empty() && children.iter().all(|c| c.as_const().is_some()) {
        let vals: Vec<u128> = children.iter().map(|c| c.as_const().unwrap()).collect();
        let widths: Vec<u32> = children.iter().map(|c| c.width()).collect();
        let v = eval_op(&kind, width, &widths, &vals);
        return Ok(match sort {
            Sort::Bool => SymExpr::bool_const(v != 0),
            Sort::Bv => SymExpr::bv(v, width),
        });
    }

    // Structural folds and peepholes.
    match &kind {
        Add => {
            if children[0].as_const() == Some(0) {
                return Ok(children[1].clone());
            }
            if children[1].as_const() == Some(0) {
                return Ok(children[0].clone());
            }
        }
        Sub => {
            if children[1].as_const() == Some(0) {
                return Ok(children[0].clone());
            }
            if children[0] == children[1] {
                return Ok(SymExpr::bv(0, width));
            }
        }
        Mul => {
            for (a, b) in [(0usize, 1usize), (1, 0)] {
                match children[a].as_const() {
                    Some(0) => return Ok(SymExpr::bv(0, width)),
                    Some(1) => return Ok(children[b].clone()),
                    _ => {}
                }
            }
        }
        UDiv => {
            if children[1].as_const() == Some(1) {
                return Ok(children[0].clone());
            }
        }
        And => {
            for (a, b) in [(0usize, 1usize), (1, 0)] {
                match children[a].as_const() {
                    Some(0) => return Ok(SymExpr::bv(0, width)),
                    Some(v) if v == mask(width) => return Ok(children[b].clone()),
                    _ => {}
                }
            }
        }
        Or => {
            for (a, b) in [(0usize, 1usize), (1, 0)] {
                match children[a].as_const() {
                    Some(0) => return Ok(children[b].clone()),
                    Some(v) if v == mask(width) => return Ok(SymExpr::bv(mask(width), width)),
                    _ => {}
                }
            }
        }
        Xor => {
            for (a, b) in [(0usize, 1usize), (1, 0)] {
                if children[a].as_const() == Some(0) {
                    return Ok(children[b].clone());
                }
            }
        }
        Shl | LShr | AShr => {
            if children[1].as_const() == Some(0) {
                return Ok(children[0].clone());
            }
            // (x << c) >> c with constant c canonicalizes to an
            // extension of the truncated value, which is the AST shape
            // the promotion/truncation analyses expect.
            if let Some(c) = children[1].as_const() {
                if let (Shl, Some(c2)) = (children[0].kind(), children[0].children().get(1).and_then(|s| s.as_const())) {
                    if c == c2 && c < width as u128 && c > 0 && !matches!(kind, Shl) {
                        let inner = &children[0].children()[0];
                        let low = inner.extract(width - c as u32 - 1, 0);
                        return Ok(match kind {
                            AShr => low.sext(c as u32),
                            LShr => low.zext(c as u32),
                            _ => unreachable!(),
                        });
                    }
                }
            }
        }
        ZeroExtend(0) | SignExtend(0) => return Ok(children[0].clone()),
        Extract(hi, lo) => {
            let child = &children[0];
            if *hi == child.width() - 1 && *lo == 0 {
                return Ok(child.clone());
            }
            match child.kind() {
                ZeroExtend(_) => {
                    let inner = &child.children()[0];
                    if *hi < inner.width() {
                        return Ok(inner.extract(*hi, *lo));
                    }
                    if *lo >= inner.width() {
                        return Ok(SymExpr::bv(0, width));
                    }
                }
                SignExtend(_) => {
                    let inner = &child.children()[0];
                    if *hi < inner.width() {
                        return Ok(inner.extract(*hi, *lo));
                    }
                }
                Concat => {
                    let low_part = &child.children()[1];
                    let high_part = &child.children()[0];
                    let wl = low_part.width();
                    if *hi < wl {
                        return Ok(low_part.extract(*hi, *lo));
                    }
                    if *lo >= wl {
                        return Ok(high_part.extract(*hi - wl, *lo - wl));
                    }
                }
                _ => {}
            }
        }
        Concat => {
            // Merge adjacent extracts of the same subject so a load of a
            // stored value reproduces the original expression.
            if let (Extract(h1, l1), Extract(h2, l2)) = (children[0].kind(), children[1].kind()) {
                let (a, b) = (&children[0].children()[0], &children[1].children()[0]);
                if a == b && *l1 == h2 + 1 {
                    return Ok(a.extract(*h1, *l2));
                }
            }
        }
        Ite => {
            if let Some(c) = children[0].as_const() {
                return Ok(if c != 0 {
                    children[1].clone()
                } else {
                    children[2].clone()
                });
            }
            if children[1] == children[2] {
                return Ok(children[1].clone());
            }
        }
        Eq => {
            if children[0] == children[1] {
                return Ok(SymExpr::bool_const(true));
            }
        }
        Ne => {
            if children[0] == children[1] {
                return Ok(SymExpr::bool_const(false));
            }
        }
        Ult | Ugt | Slt | Sgt => {
            if children[0] == children[1] {
                return Ok(SymExpr::bool_const(false));
            }
        }
        Ule | Uge | Sle | Sge => {
            if children[0] == children[1] {
                return Ok(SymExpr::bool_const(true));
            }
        }
        BoolAnd => {
            let mut kept = Vec::with_capacity(children.len());
            for c in &children {
                match c.as_const() {
                    Some(0) => return Ok(SymExpr::bool_const(false)),
                    Some(_) => {}
                    None => kept.push(c.clone()),
                }
            }
            match kept.len() {
                0 => return Ok(SymExpr::bool_const(true)),
                1 => return Ok(kept.pop().unwrap()),
                n if n != children.len() => return Ok(intern(BoolAnd, 1, Sort::Bool, kept)),
                _ => {}
            }
        }
        BoolOr => {
            let mut kept = Vec::with_capacity(children.len());
            for c in &children {
                match c.as_const() {
                    Some(0) => {}
                    Some(_) => return Ok(SymExpr::bool_const(true)),
                    None => kept.push(c.clone()),
                }
            }
            match kept.len() {
                0 => return Ok(SymExpr::bool_const(false)),
                1 => return Ok(kept.pop().unwrap()),
                n if n != children.len() => return Ok(intern(BoolOr, 1, Sort::Bool, kept)),
                _ => {}
            }
        }
        BoolNot => {
            if let BoolNot = children[0].kind() {
                return Ok(children[0].children()[0].clone());
            }
        }
        _ => {}
    }

    Ok(intern(kind, width, sort, children))
}

/// A satisfying assignment: variable name to width-reduced value.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    assignments: BTreeMap<String, u128>,
}

impl Model {
    pub fn new() -> Model {
        Model::default()
    }

    pub fn get(&self, name: &str) -> Option<u128> {
        self.assignments.get(name).copied()
    }

    pub fn set(&mut self, name: &str, value: u128) {
        self.assignments.insert(name.to_string(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &u128)> {
        self.assignments.iter()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

impl FromIterator<(String, u128)> for Model {
    fn from_iter<T: IntoIterator<Item = (String, u128)>>(iter: T) -> Self {
        Model {
            assignments: iter.into_iter().collect(),
        }
    }
}

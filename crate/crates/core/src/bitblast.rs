//! Structural bit-blaster: lowers bitvector/boolean expression DAGs to CNF.
//!
//! Every wire is either a constant or a CNF literal, and constants are
//! propagated through every gate, so formulas dominated by concrete bytes
//! (the common case in concolic predicates) collapse to small clause sets.

use std::collections::{BTreeMap, HashMap};

use crate::expr::{ExprKind, SymExpr, VarName};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BLit {
    Const(bool),
    Var(i32), // nonzero DIMACS-style literal, sign = polarity
}

impl BLit {
    pub fn flip(self) -> BLit {
        match self {
            BLit::Const(b) => BLit::Const(!b),
            BLit::Var(v) => BLit::Var(-v),
        }
    }
}

#[derive(Default)]
pub struct Cnf {
    pub clauses: Vec<Vec<i32>>,
    pub n_vars: u32,
}

pub struct Blaster {
    pub cnf: Cnf,
    bits: HashMap<u64, Vec<BLit>>,
    pub var_bits: BTreeMap<VarName, (u32, Vec<i32>)>,
}

impl Blaster {
    pub fn new() -> Blaster {
        Blaster {
            cnf: Cnf::default(),
            bits: HashMap::new(),
            var_bits: BTreeMap::new(),
        }
    }

    fn fresh(&mut self) -> i32 {
        self.cnf.n_vars += 1;
        self.cnf.n_vars as i32
    }

    fn clause(&mut self, lits: &[BLit]) {
        // A clause with a true constant is satisfied; false constants drop out.
        let mut out = Vec::with_capacity(lits.len());
        for l in lits {
            match l {
                BLit::Const(true) => return,
                BLit::Const(false) => {}
                BLit::Var(v) => out.push(*v),
            }
        }
        self.cnf.clauses.push(out);
    }

    pub fn assert_lit(&mut self, l: BLit) {
        self.clause(&[l]);
    }

    fn and2(&mut self, a: BLit, b: BLit) -> BLit {
        match (a, b) {
            (BLit::Const(false), _) | (_, BLit::Const(false)) => BLit::Const(false),
            (BLit::Const(true), x) | (x, BLit::Const(true)) => x,
            (BLit::Var(x), BLit::Var(y)) if x == y => a,
            (BLit::Var(x), BLit::Var(y)) if x == -y => BLit::Const(false),
            _ => {
                let y = BLit::Var(self.fresh());
                self.clause(&[y.flip(), a]);
                self.clause(&[y.flip(), b]);
                self.clause(&[y, a.flip(), b.flip()]);
                y
            }
        }
    }

    fn or2(&mut self, a: BLit, b: BLit) -> BLit {
        self.and2(a.flip(), b.flip()).flip()
    }

    fn xor2(&mut self, a: BLit, b: BLit) -> BLit {
        match (a, b) {
            (BLit::Const(x), y) | (y, BLit::Const(x)) => {
                if x {
                    y.flip()
                } else {
                    y
                }
            }
            (BLit::Var(x), BLit::Var(y)) if x == y => BLit::Const(false),
            (BLit::Var(x), BLit::Var(y)) if x == -y => BLit::Const(true),
            _ => {
                let y = BLit::Var(self.fresh());
                self.clause(&[y.flip(), a, b]);
                self.clause(&[y.flip(), a.flip(), b.flip()]);
                self.clause(&[y, a.flip(), b]);
                self.clause(&[y, a, b.flip()]);
                y
            }
        }
    }

    fn mux(&mut self, sel: BLit, then: BLit, els: BLit) -> BLit {
        match sel {
            BLit::Const(true) => return then,
            BLit::Const(false) => return els,
            _ => {}
        }
        if then == els {
            return then;
        }
        match (then, els) {
            (BLit::Const(true), e) => self.or2(sel, e),
            (BLit::Const(false), e) => self.and2(sel.flip(), e),
            (t, BLit::Const(true)) => self.or2(sel.flip(), t),
            (t, BLit::Const(false)) => self.and2(sel, t),
            (t, e) => {
                let y = BLit::Var(self.fresh());
                self.clause(&[y.flip(), sel.flip(), t]);
                self.clause(&[y, sel.flip(), t.flip()]);
                self.clause(&[y.flip(), sel, e]);
                self.clause(&[y, sel, e.flip()]);
                y
            }
        }
    }

    fn and_many(&mut self, lits: &[BLit]) -> BLit {
        let mut acc = BLit::Const(true);
        for l in lits {
            acc = self.and2(acc, *l);
        }
        acc
    }

    fn or_many(&mut self, lits: &[BLit]) -> BLit {
        let mut acc = BLit::Const(false);
        for l in lits {
            acc = self.or2(acc, *l);
        }
        acc
    }

    fn add_bits(&mut self, a: &[BLit], b: &[BLit], carry_in: BLit) -> Vec<BLit> {
        let mut out = Vec::with_capacity(a.len());
        let mut carry = carry_in;
        for i in 0..a.len() {
            let axb = self.xor2(a[i], b[i]);
            out.push(self.xor2(axb, carry));
            let t1 = self.and2(a[i], b[i]);
            let t2 = self.and2(axb, carry);
            carry = self.or2(t1, t2);
        }
        out
    }

    fn neg_bits(&mut self, a: &[BLit]) -> Vec<BLit> {
        let inv: Vec<BLit> = a.iter().map(|l| l.flip()).collect();
        let zero = vec![BLit::Const(false); a.len()];
        self.add_bits(&inv, &zero, BLit::Const(true))
    }

    fn mul_bits(&mut self, a: &[BLit], b: &[BLit], out_width: usize) -> Vec<BLit> {
        let mut acc = vec![BLit::Const(false); out_width];
        for (i, bi) in b.iter().enumerate() {
            if i >= out_width {
                break;
            }
            if *bi == BLit::Const(false) {
                continue;
            }
            let mut row = vec![BLit::Const(false); out_width];
            for j in 0..a.len() {
                if i + j >= out_width {
                    break;
                }
                row[i + j] = self.and2(a[j], *bi);
            }
            acc = self.add_bits(&acc, &row, BLit::Const(false));
        }
        acc
    }

    /// Borrow-out of a - b, i.e. the unsigned a < b predicate.
    fn ult_bits(&mut self, a: &[BLit], b: &[BLit]) -> BLit {
        let mut borrow = BLit::Const(false);
        for i in 0..a.len() {
            let na_and_b = self.and2(a[i].flip(), b[i]);
            let eq = self.xor2(a[i], b[i]).flip();
            let keep = self.and2(eq, borrow);
            borrow = self.or2(na_and_b, keep);
        }
        borrow
    }

    fn eq_bits(&mut self, a: &[BLit], b: &[BLit]) -> BLit {
        let xnors: Vec<BLit> = (0..a.len())
            .map(|i| {
                let x = self.xor2(a[i], b[i]);
                x.flip()
            })
            .collect();
        self.and_many(&xnors)
    }

    fn slt_bits(&mut self, a: &[BLit], b: &[BLit]) -> BLit {
        // signed compare = unsigned compare with sign bits inverted
        let mut a2 = a.to_vec();
        let mut b2 = b.to_vec();
        let msb = a.len() - 1;
        a2[msb] = a2[msb].flip();
        b2[msb] = b2[msb].flip();
        self.ult_bits(&a2, &b2)
    }

    fn shift_const(a: &[BLit], amount: u128, kind: &ExprKind) -> Vec<BLit> {
        let w = a.len();
        let fill_sign = matches!(kind, ExprKind::AShr);
        let fill = if fill_sign { a[w - 1] } else { BLit::Const(false) };
        if amount as usize >= w {
            return vec![fill; w];
        }
        let s = amount as usize;
        let mut out = vec![BLit::Const(false); w];
        match kind {
            ExprKind::Shl => {
                out[s..w].copy_from_slice(&a[..w - s]);
            }
            ExprKind::LShr | ExprKind::AShr => {
                out[..w - s].copy_from_slice(&a[s..w]);
                for item in out.iter_mut().take(w).skip(w - s) {
                    *item = fill;
                }
            }
            _ => unreachable!(),
        }
        out
    }

    fn shift_dyn(&mut self, a: &[BLit], amt: &[BLit], kind: &ExprKind) -> Vec<BLit> {
        let w = a.len();
        let fill_sign = matches!(kind, ExprKind::AShr);
        // amounts >= w saturate to the fill value
        let stages = 32 - (w as u32 - 1).leading_zeros(); // ceil(log2(w)) for w > 1
        let stages = stages.max(1);
        let mut cur = a.to_vec();
        for k in 0..stages as usize {
            if k >= amt.len() {
                break;
            }
            let shifted = Self::shift_const(&cur, 1u128 << k, kind);
            cur = (0..w).map(|i| self.mux(amt[k], shifted[i], cur[i])).collect();
        }
        // if any amount bit at or above `stages` is set, or the staged amount
        // already covers >= w, the result is pure fill
        let mut high = Vec::new();
        for (k, l) in amt.iter().enumerate() {
            if k >= stages as usize {
                high.push(*l);
            }
        }
        // staged amount can reach up to 2^stages - 1 which may exceed w-1
        let max_staged = (1u128 << stages) - 1;
        let ge_w = if max_staged >= w as u128 {
            let w_bits = const_bits(w as u128, amt.len().min(stages as usize));
            let staged = &amt[..amt.len().min(stages as usize)];
            let lt = self.ult_bits(staged, &w_bits);
            lt.flip()
        } else {
            BLit::Const(false)
        };
        high.push(ge_w);
        let saturate = self.or_many(&high);
        let fill = if fill_sign { a[w - 1] } else { BLit::Const(false) };
        (0..w).map(|i| self.mux(saturate, fill, cur[i])).collect()
    }

    fn var_bits_for(&mut self, name: &VarName, width: u32) -> Vec<BLit> {
        if let Some((_, bits)) = self.var_bits.get(name) {
            return bits.iter().map(|v| BLit::Var(*v)).collect();
        }
        let bits: Vec<i32> = (0..width).map(|_| self.fresh()).collect();
        self.var_bits.insert(name.clone(), (width, bits.clone()));
        bits.into_iter().map(BLit::Var).collect()
    }

    /// Encodes the expression DAG, returning one literal per bit (LSB first);
    /// boolean nodes yield a single literal.
    pub fn encode(&mut self, root: &SymExpr) -> Vec<BLit> {
        let mut stack: Vec<(SymExpr, bool)> = vec![(root.clone(), false)];
        while let Some((e, ready)) = stack.pop() {
            if self.bits.contains_key(&e.id()) {
                continue;
            }
            if !ready {
                match e.kind() {
                    ExprKind::BvConst(v) => {
                        let bits = const_bits(*v, e.width() as usize);
                        self.bits.insert(e.id(), bits);
                    }
                    ExprKind::BvVar(name) => {
                        let bits = self.var_bits_for(name, e.width());
                        self.bits.insert(e.id(), bits);
                    }
                    _ => {
                        stack.push((e.clone(), true));
                        for c in e.children() {
                            stack.push((c.clone(), false));
                        }
                    }
                }
                continue;
            }
            let child_bits: Vec<Vec<BLit>> = e
                .children()
                .iter()
                .map(|c| self.bits[&c.id()].clone())
                .collect();
            let out = self.encode_op(&e, &child_bits);
            self.bits.insert(e.id(), out);
        }
        self.bits[&root.id()].clone()
    }

    fn encode_op(&mut self, e: &SymExpr, ch: &[Vec<BLit>]) -> Vec<BLit> {
        let w = e.width() as usize;
        match e.kind() {
            ExprKind::Add => self.add_bits(&ch[0], &ch[1], BLit::Const(false)),
            ExprKind::Sub => {
                let inv: Vec<BLit> = ch[1].iter().map(|l| l.flip()).collect();
                self.add_bits(&ch[0], &inv, BLit::Const(true))
            }
            ExprKind::Mul => self.mul_bits(&ch[0], &ch[1], w),
            ExprKind::UDiv => self.encode_udiv(&ch[0], &ch[1]),
            ExprKind::And => (0..w).map(|i| self.and2(ch[0][i], ch[1][i])).collect(),
            ExprKind::Or => (0..w).map(|i| self.or2(ch[0][i], ch[1][i])).collect(),
            ExprKind::Xor => (0..w).map(|i| self.xor2(ch[0][i], ch[1][i])).collect(),
            ExprKind::Not => ch[0].iter().map(|l| l.flip()).collect(),
            ExprKind::Neg => self.neg_bits(&ch[0]),
            ExprKind::Shl | ExprKind::LShr | ExprKind::AShr => {
                if let Some(c) = e.children()[1].as_const() {
                    Self::shift_const(&ch[0], c, e.kind())
                } else {
                    self.shift_dyn(&ch[0], &ch[1], e.kind())
                }
            }
            ExprKind::Concat => {
                let mut out = ch[1].clone();
                out.extend_from_slice(&ch[0]);
                out
            }
            ExprKind::Extract(hi, lo) => ch[0][*lo as usize..=*hi as usize].to_vec(),
            ExprKind::ZeroExtend(n) => {
                let mut out = ch[0].clone();
                out.extend(std::iter::repeat_n(BLit::Const(false), *n as usize));
                out
            }
            ExprKind::SignExtend(n) => {
                let mut out = ch[0].clone();
                let sign = *out.last().unwrap();
                out.extend(std::iter::repeat_n(sign, *n as usize));
                out
            }
            ExprKind::Ite => {
                let sel = ch[0][0];
                (0..w).map(|i| self.mux(sel, ch[1][i], ch[2][i])).collect()
            }
            ExprKind::Eq => vec![self.eq_bits(&ch[0], &ch[1])],
            ExprKind::Ne => {
                let eq = self.eq_bits(&ch[0], &ch[1]);
                vec![eq.flip()]
            }
            ExprKind::Ult => vec![self.ult_bits(&ch[0], &ch[1])],
            ExprKind::Ule => {
                let gt = self.ult_bits(&ch[1], &ch[0]);
                vec![gt.flip()]
            }
            ExprKind::Ugt => vec![self.ult_bits(&ch[1], &ch[0])],
            ExprKind::Uge => {
                let lt = self.ult_bits(&ch[0], &ch[1]);
                vec![lt.flip()]
            }
            ExprKind::Slt => vec![self.slt_bits(&ch[0], &ch[1])],
            ExprKind::Sle => {
                let gt = self.slt_bits(&ch[1], &ch[0]);
                vec![gt.flip()]
            }
            ExprKind::Sgt => vec![self.slt_bits(&ch[1], &ch[0])],
            ExprKind::Sge => {
                let lt = self.slt_bits(&ch[0], &ch[1]);
                vec![lt.flip()]
            }
            ExprKind::BoolAnd => {
                let lits: Vec<BLit> = ch.iter().map(|c| c[0]).collect();
                vec![self.and_many(&lits)]
            }
            ExprKind::BoolOr => {
                let lits: Vec<BLit> = ch.iter().map(|c| c[0]).collect();
                vec![self.or_many(&lits)]
            }
            ExprKind::BoolNot => vec![ch[0][0].flip()],
            ExprKind::BvConst(_) | ExprKind::BvVar(_) => unreachable!(),
        }
    }

    fn encode_udiv(&mut self, n: &[BLit], d: &[BLit]) -> Vec<BLit> {
        let w = n.len();
        // fresh quotient and remainder
        let q: Vec<BLit> = (0..w).map(|_| BLit::Var(self.fresh())).collect();
        let r: Vec<BLit> = (0..w).map(|_| BLit::Var(self.fresh())).collect();
        // constraints at 2w bits so q*d + r cannot wrap
        let mut q2 = q.clone();
        q2.extend(vec![BLit::Const(false); w]);
        let mut d2 = d.to_vec();
        d2.extend(vec![BLit::Const(false); w]);
        let mut r2 = r.clone();
        r2.extend(vec![BLit::Const(false); w]);
        let mut n2 = n.to_vec();
        n2.extend(vec![BLit::Const(false); w]);
        let prod = self.mul_bits(&q2, &d2, 2 * w);
        let sum = self.add_bits(&prod, &r2, BLit::Const(false));
        let recompose = self.eq_bits(&sum, &n2);
        let rem_ok = self.ult_bits(&r, d);
        let div_ok = self.and2(recompose, rem_ok);
        let zero = vec![BLit::Const(false); w];
        let d_is_zero = self.eq_bits(d, &zero);
        let ones = vec![BLit::Const(true); w];
        let q_ones = self.eq_bits(&q, &ones);
        let total = self.mux(d_is_zero, q_ones, div_ok);
        self.assert_lit(total);
        q
    }
}

impl Default for Blaster {
    fn default() -> Self {
        Self::new()
    }
}

fn const_bits(v: u128, width: usize) -> Vec<BLit> {
    (0..width).map(|i| BLit::Const((v >> i) & 1 == 1)).collect()
}

/// Result of blasting a set of assertions: CNF, declared variable bit map,
/// and whether the formula collapsed to a constant.
pub struct BlastedFormula {
    pub cnf: Cnf,
    pub var_bits: BTreeMap<VarName, (u32, Vec<i32>)>,
    pub trivially_false: bool,
}

pub fn blast(assertions: &[SymExpr]) -> BlastedFormula {
    let mut blaster = Blaster::new();
    let mut trivially_false = false;
    for a in assertions {
        let bits = blaster.encode(a);
        match bits[0] {
            BLit::Const(true) => {}
            BLit::Const(false) => {
                trivially_false = true;
            }
            lit => blaster.assert_lit(lit),
        }
    }
    BlastedFormula {
        cnf: blaster.cnf,
        var_bits: blaster.var_bits,
        trivially_false,
    }
}

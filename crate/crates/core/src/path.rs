//! Path predicate: the ordered branch/model constraints collected along one
//! concrete execution, plus transitive-closure slicing over shared
//! variables.

use std::collections::BTreeSet;

use crate::expr::{SymExpr, VarName};
use crate::minivm::Cond;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    /// A conditional branch, oriented as taken.
    Branch { cond: Cond, taken: bool },
    /// A function-model constraint (digit validity, range, terminator pin).
    Model { fn_name: &'static str },
    /// A consistency witness tying a model expression to the concrete
    /// return value. Ties are recorded but never sliced into queries: the
    /// return value they pin must stay free for branch inversion.
    Tie { fn_name: &'static str },
}

#[derive(Clone, Debug)]
pub struct PathConstraint {
    pub expr: SymExpr,
    pub kind: ConstraintKind,
    pub inst_addr: u64,
    /// Call-site address of the innermost frame when the constraint was
    /// recorded; None in the entry function.
    pub call_site: Option<u64>,
    /// Position in the VM branch trace, for Branch constraints.
    pub trace_pos: Option<usize>,
    pub index: usize,
}

impl PathConstraint {
    pub fn is_branch(&self) -> bool {
        matches!(self.kind, ConstraintKind::Branch { .. })
    }

    pub fn is_tie(&self) -> bool {
        matches!(self.kind, ConstraintKind::Tie { .. })
    }

    pub fn branch_cond(&self) -> Option<(Cond, bool)> {
        match self.kind {
            ConstraintKind::Branch { cond, taken } => Some((cond, taken)),
            _ => None,
        }
    }

    pub fn vars(&self) -> &BTreeSet<VarName> {
        self.expr.used_variables()
    }
}

#[derive(Clone, Debug, Default)]
pub struct PathPredicate {
    constraints: Vec<PathConstraint>,
}

impl PathPredicate {
    pub fn new() -> PathPredicate {
        PathPredicate::default()
    }

    pub fn push(
        &mut self,
        expr: SymExpr,
        kind: ConstraintKind,
        inst_addr: u64,
        call_site: Option<u64>,
        trace_pos: Option<usize>,
    ) -> usize {
        let index = self.constraints.len();
        self.constraints.push(PathConstraint {
            expr,
            kind,
            inst_addr,
            call_site,
            trace_pos,
            index,
        });
        index
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PathConstraint> {
        self.constraints.iter()
    }

    pub fn get(&self, index: usize) -> Option<&PathConstraint> {
        self.constraints.get(index)
    }

    pub fn as_slice(&self) -> &[PathConstraint] {
        &self.constraints
    }

    /// Number of branch constraints (the "symbolic branches" figure).
    pub fn branch_count(&self) -> usize {
        self.constraints.iter().filter(|c| c.is_branch()).count()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct CallFrame {
    pub call_site: u64,
    pub callee: u64,
    pub ra_slot: u64,
}

/// Dynamic call stack mirrored from call/ret events.
#[derive(Clone, Debug, Default)]
pub struct CallStack {
    frames: Vec<CallFrame>,
}

impl CallStack {
    pub fn new() -> CallStack {
        CallStack::default()
    }

    pub fn push(&mut self, frame: CallFrame) {
        self.frames.push(frame);
    }

    pub fn pop(&mut self) -> Option<CallFrame> {
        self.frames.pop()
    }

    pub fn innermost_site(&self) -> Option<u64> {
        self.frames.last().map(|f| f.call_site)
    }

    pub fn frames(&self) -> &[CallFrame] {
        &self.frames
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// Whether a recorded call site is live in this stack. A `None` site
    /// denotes the entry function, which is always live.
    pub fn contains_site(&self, site: Option<u64>) -> bool {
        match site {
            None => true,
            Some(addr) => self.frames.iter().any(|f| f.call_site == addr),
        }
    }
}

/// Transitive-closure slicing: start from the seed variables, repeatedly
/// select any non-tie constraint sharing a variable with the working set and
/// absorb its variables. Selected constraints come back in recording order.
pub fn slice<'a>(
    constraints: &'a [PathConstraint],
    seeds: &BTreeSet<VarName>,
) -> Vec<&'a PathConstraint> {
    let mut working: BTreeSet<VarName> = seeds.clone();
    let mut selected = vec![false; constraints.len()];
    loop {
        let mut grew = false;
        for (i, c) in constraints.iter().enumerate() {
            if selected[i] || c.is_tie() {
                continue;
            }
            if c.expr.shares_vars_with(&working) {
                selected[i] = true;
                working.extend(c.vars().iter().cloned());
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    constraints
        .iter()
        .enumerate()
        .filter(|(i, _)| selected[*i])
        .map(|(_, c)| c)
        .collect()
}

/// Convenience: sliced constraint expressions for a seed expression.
pub fn slice_exprs(constraints: &[PathConstraint], seed: &SymExpr) -> Vec<SymExpr> {
    slice(constraints, seed.used_variables())
        .into_iter()
        .map(|c| c.expr.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::SymExpr;

    fn constraint(expr: SymExpr, index: usize) -> PathConstraint {
        PathConstraint {
            expr,
            kind: ConstraintKind::Branch { cond: Cond::Z, taken: true },
            inst_addr: 0x1000_0000 + index as u64 * 4,
            call_site: None,
            trace_pos: Some(index),
            index,
        }
    }

    #[test]
    fn disjoint_seed_slices_empty() {
        let x = SymExpr::var("sl_x", 8);
        let c = constraint(x.equ(&SymExpr::bv(1, 8)), 0);
        let seeds = SymExpr::var("sl_other", 8).used_variables().clone();
        assert!(slice(&[c], &seeds).is_empty());
    }

    #[test]
    fn closure_through_shared_variable() {
        let x = SymExpr::var("sl2_x", 8);
        let y = SymExpr::var("sl2_y", 8);
        let z = SymExpr::var("sl2_z", 8);
        let w = SymExpr::var("sl2_w", 8);
        let c1 = constraint(x.add(&y).equ(&SymExpr::bv(1, 8)), 0); // x,y
        let c2 = constraint(y.add(&z).equ(&SymExpr::bv(2, 8)), 1); // y,z
        let c3 = constraint(w.equ(&SymExpr::bv(3, 8)), 2); // w
        let all = vec![c1, c2, c3];
        let seeds = x.used_variables().clone();
        let out = slice(&all, &seeds);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].index, 0);
        assert_eq!(out[1].index, 1);
    }

    #[test]
    fn slicing_is_idempotent_and_order_preserving() {
        let x = SymExpr::var("sl3_x", 8);
        let y = SymExpr::var("sl3_y", 8);
        let c1 = constraint(y.equ(&SymExpr::bv(2, 8)), 0);
        let c2 = constraint(x.add(&y).ult(&SymExpr::bv(9, 8)), 1);
        let all = vec![c1, c2];
        let seeds = x.used_variables().clone();
        let first: Vec<usize> = slice(&all, &seeds).iter().map(|c| c.index).collect();
        assert_eq!(first, vec![0, 1]);
        // slicing the sliced set again selects the same constraints
        let again: Vec<usize> = slice(&all, &seeds).iter().map(|c| c.index).collect();
        assert_eq!(first, again);
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn slice_is_a_transitive_closure(
            edges in prop::collection::vec((0usize..6, 0usize..6), 1..12),
            seed_var in 0usize..6,
        ) {
            // constraints over pairs drawn from a small variable pool
            let var = |i: usize| SymExpr::var(&format!("slp_{i}"), 8);
            let constraints: Vec<PathConstraint> = edges
                .iter()
                .enumerate()
                .map(|(i, (a, b))| constraint(var(*a).add(&var(*b)).equ(&SymExpr::bv(0, 8)), i))
                .collect();
            let seeds = var(seed_var).used_variables().clone();
            let selected = slice(&constraints, &seeds);

            // subset, order preserving
            let indices: Vec<usize> = selected.iter().map(|c| c.index).collect();
            let mut sorted = indices.clone();
            sorted.sort_unstable();
            prop_assert_eq!(&indices, &sorted);

            // closure: the working set is seeds plus everything selected;
            // no unselected constraint may share a variable with it
            let mut working = seeds.clone();
            for c in &selected {
                working.extend(c.vars().iter().cloned());
            }
            for c in &constraints {
                if !indices.contains(&c.index) {
                    prop_assert!(
                        !c.expr.shares_vars_with(&working),
                        "constraint {} outside the slice shares a variable",
                        c.index
                    );
                }
            }

            // fixpoint: slicing again selects the same constraints
            let again: Vec<usize> = slice(&constraints, &seeds).iter().map(|c| c.index).collect();
            prop_assert_eq!(indices, again);
        }
    }

    #[test]
    fn ties_are_never_sliced() {
        let x = SymExpr::var("sl4_x", 8);
        let mut tie = constraint(x.equ(&SymExpr::bv(7, 8)), 0);
        tie.kind = ConstraintKind::Tie { fn_name: "memcmp" };
        let seeds = x.used_variables().clone();
        assert!(slice(&[tie], &seeds).is_empty());
    }
}

//! SMT-LIB v2.6 script emission (logic QF_BV) and solver-response parsing.
//!
//! Variable declarations are emitted in sorted name order so that identical
//! assertion sets always produce byte-identical scripts.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::expr::{ExprKind, Model, SymExpr, VarName};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmtParseError {
    #[error("no status line in solver output")]
    MissingStatus,
    #[error("unbalanced s-expression in solver output")]
    Unbalanced,
    #[error("malformed model value: {0}")]
    BadValue(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SatStatus {
    Sat,
    Unsat,
    Unknown,
}

/// Emits a complete one-shot script: set-logic, declare-fun for every
/// variable, the assertions, check-sat, get-model, exit.
pub fn emit_script(assertions: &[SymExpr]) -> String {
    for a in assertions {
        assert!(a.is_bool(), "emit_script: assertion is not boolean-sorted");
    }
    let mut vars: BTreeMap<VarName, u32> = BTreeMap::new();
    for a in assertions {
        collect_vars(a, &mut vars);
    }
    let mut out = String::from("(set-logic QF_BV)\n");
    for (name, width) in &vars {
        out.push_str(&format!("(declare-fun {name} () (_ BitVec {width}))\n"));
    }
    for a in assertions {
        out.push_str("(assert ");
        write_term(&mut out, a);
        out.push_str(")\n");
    }
    out.push_str("(check-sat)\n(get-model)\n(exit)\n");
    out
}

fn collect_vars(root: &SymExpr, vars: &mut BTreeMap<VarName, u32>) {
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![root.clone()];
    while let Some(e) = stack.pop() {
        if !seen.insert(e.id()) {
            continue;
        }
        if let ExprKind::BvVar(name) = e.kind() {
            vars.insert(name.clone(), e.width());
        }
        for c in e.children() {
            stack.push(c.clone());
        }
    }
}

pub fn write_term(out: &mut String, root: &SymExpr) {
    enum Tok {
        Open(SymExpr),
        Close,
        Space,
    }
    let mut stack = vec![Tok::Open(root.clone())];
    while let Some(tok) = stack.pop() {
        match tok {
            Tok::Close => out.push(')'),
            Tok::Space => out.push(' '),
            Tok::Open(e) => match e.kind() {
                ExprKind::BvConst(v) => out.push_str(&const_literal(*v, e.width(), e.is_bool())),
                ExprKind::BvVar(name) => out.push_str(name),
                kind => {
                    out.push('(');
                    out.push_str(&crate::expr::kind_symbol(kind));
                    stack.push(Tok::Close);
                    for c in e.children().iter().rev() {
                        stack.push(Tok::Open(c.clone()));
                        stack.push(Tok::Space);
                    }
                }
            },
        }
    }
}

pub fn const_literal(value: u128, width: u32, boolean: bool) -> String {
    if boolean {
        return if value != 0 { "true" } else { "false" }.to_string();
    }
    if width.is_multiple_of(4) {
        format!("#x{:0w$x}", value, w = (width / 4) as usize)
    } else {
        let mut s = String::with_capacity(width as usize + 2);
        s.push_str("#b");
        for i in (0..width).rev() {
            s.push(if (value >> i) & 1 == 1 { '1' } else { '0' });
        }
        s
    }
}

#[derive(Debug, PartialEq)]
enum SExpr {
    Atom(String),
    List(Vec<SExpr>),
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '(' | ')' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(c.to_string());
            }
            ';' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                for c2 in chars.by_ref() {
                    if c2 == '\n' {
                        break;
                    }
                }
            }
            '|' => {
                // quoted symbol
                for c2 in chars.by_ref() {
                    if c2 == '|' {
                        break;
                    }
                    cur.push(c2);
                }
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

fn parse_sexprs(tokens: &[String]) -> Result<Vec<SExpr>, SmtParseError> {
    let mut stack: Vec<Vec<SExpr>> = vec![Vec::new()];
    for tok in tokens {
        match tok.as_str() {
            "(" => stack.push(Vec::new()),
            ")" => {
                let done = stack.pop().ok_or(SmtParseError::Unbalanced)?;
                stack
                    .last_mut()
                    .ok_or(SmtParseError::Unbalanced)?
                    .push(SExpr::List(done));
            }
            atom => stack
                .last_mut()
                .ok_or(SmtParseError::Unbalanced)?
                .push(SExpr::Atom(atom.to_string())),
        }
    }
    if stack.len() != 1 {
        return Err(SmtParseError::Unbalanced);
    }
    Ok(stack.pop().unwrap())
}

/// Parses solver output: a check-sat status followed, on sat, by a
/// get-model response. Accepts #b/#x literals, `(_ bvN W)` values, and
/// Bool true/false.
pub fn parse_solver_output(text: &str) -> Result<(SatStatus, Model), SmtParseError> {
    let tokens = tokenize(text);
    let mut status = None;
    let mut status_pos = 0;
    for (i, t) in tokens.iter().enumerate() {
        match t.as_str() {
            "sat" => {
                status = Some(SatStatus::Sat);
                status_pos = i;
                break;
            }
            "unsat" => {
                status = Some(SatStatus::Unsat);
                status_pos = i;
                break;
            }
            "unknown" | "timeout" => {
                status = Some(SatStatus::Unknown);
                status_pos = i;
                break;
            }
            _ => {}
        }
    }
    let status = status.ok_or(SmtParseError::MissingStatus)?;
    let mut model = Model::new();
    if status == SatStatus::Sat {
        let rest = &tokens[status_pos + 1..];
        let exprs = parse_sexprs(rest)?;
        for e in &exprs {
            collect_model(e, &mut model)?;
        }
    }
    Ok((status, model))
}

fn collect_model(e: &SExpr, model: &mut Model) -> Result<(), SmtParseError> {
    match e {
        SExpr::List(items) => {
            if items.len() >= 5 {
                if let (SExpr::Atom(head), SExpr::Atom(name)) = (&items[0], &items[1]) {
                    if head == "define-fun" {
                        let value = parse_value(items.last().unwrap())?;
                        model.set(name, value);
                        return Ok(());
                    }
                }
            }
            for item in items {
                collect_model(item, model)?;
            }
            Ok(())
        }
        SExpr::Atom(_) => Ok(()),
    }
}

fn parse_value(e: &SExpr) -> Result<u128, SmtParseError> {
    match e {
        SExpr::Atom(a) => {
            if let Some(hex) = a.strip_prefix("#x") {
                u128::from_str_radix(hex, 16).map_err(|_| SmtParseError::BadValue(a.clone()))
            } else if let Some(bin) = a.strip_prefix("#b") {
                u128::from_str_radix(bin, 2).map_err(|_| SmtParseError::BadValue(a.clone()))
            } else if a == "true" {
                Ok(1)
            } else if a == "false" {
                Ok(0)
            } else {
                Err(SmtParseError::BadValue(a.clone()))
            }
        }
        SExpr::List(items) => {
            // (_ bvN W)
            if items.len() == 3 {
                if let (SExpr::Atom(u), SExpr::Atom(bv)) = (&items[0], &items[1]) {
                    if u == "_" {
                        if let Some(num) = bv.strip_prefix("bv") {
                            return num
                                .parse::<u128>()
                                .map_err(|_| SmtParseError::BadValue(bv.clone()));
                        }
                    }
                }
            }
            Err(SmtParseError::BadValue(format!("{e:?}")))
        }
    }
}

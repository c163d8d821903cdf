//! Two-pass assembler for the MiniVM text format.
//!
//! One instruction per line, `;` comments, `.data`/`.text` sections, labels
//! as `name:`. Data directives: `.byte`, `.word16/32/64`, `.ascii`, `.zero N`.
//! Memory operands are written `[rB + rI*s + d]` with any subset present.
//! Globals are laid out from 0x1000 in declaration order, 16-byte aligned
//! with 16-byte guard gaps, so inter-global overflows trap in checked mode.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{Cond, Instruction, Intrinsic, MemRef, Mnemonic, Operand, Program, Width, GLOBALS_BASE, STACK_BASE, TEXT_BASE};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown label {name}")]
    UnknownLabel { line: usize, name: String },
    #[error("duplicate label {name}")]
    DuplicateLabel { name: String },
    #[error("no `main` entry label in .text")]
    NoEntry,
}

fn perr(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Parse { line, msg: msg.into() }
}

#[derive(Clone, Debug)]
enum RawOperand {
    Reg(u8),
    Imm(i128),
    LabelImm(String),
    Mem {
        base: Option<u8>,
        index: Option<(u8, u8)>,
        disp: i128,
        disp_label: Option<String>,
    },
}

#[derive(Clone, Debug)]
struct RawInstruction {
    line: usize,
    mnemonic: Mnemonic,
    width: Option<Width>,
    operands: Vec<RawOperand>,
    target_label: Option<String>,
    intrinsic: Option<Intrinsic>,
}

enum Section {
    Data,
    Text,
}

pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut section = Section::Text; // .text is the default section
    // data objects: (label, bytes, line)
    let mut objects: Vec<(Option<String>, Vec<u8>, usize)> = Vec::new();
    let mut raw: Vec<RawInstruction> = Vec::new();
    let mut text_labels: HashMap<String, usize> = HashMap::new();

    for (lineno, raw_line) in source.lines().enumerate() {
        let line_num = lineno + 1;
        let mut line = raw_line;
        if let Some(pos) = find_comment(line) {
            line = &line[..pos];
        }
        let mut line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == ".data" {
            section = Section::Data;
            continue;
        }
        if line == ".text" {
            section = Section::Text;
            continue;
        }

        // leading label(s)
        while let Some(colon) = label_prefix(line) {
            let (name, rest) = line.split_at(colon);
            let name = name.trim().to_string();
            line = rest[1..].trim();
            match section {
                Section::Data => {
                    if objects.iter().any(|(l, _, _)| l.as_deref() == Some(&name))
                        || text_labels.contains_key(&name)
                    {
                        return Err(AsmError::DuplicateLabel { name });
                    }
                    objects.push((Some(name), Vec::new(), line_num));
                }
                Section::Text => {
                    if text_labels.contains_key(&name)
                        || objects.iter().any(|(l, _, _)| l.as_deref() == Some(&name))
                    {
                        return Err(AsmError::DuplicateLabel { name });
                    }
                    text_labels.insert(name, raw.len());
                }
            }
            if line.is_empty() {
                break;
            }
        }
        if line.is_empty() {
            continue;
        }

        match section {
            Section::Data => {
                let bytes = parse_directive(line, line_num)?;
                if objects.is_empty() {
                    objects.push((None, Vec::new(), line_num));
                }
                objects.last_mut().unwrap().1.extend(bytes);
            }
            Section::Text => raw.push(parse_instruction(line, line_num)?),
        }
    }

    // lay out data
    let mut symbols: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut global_ranges: Vec<(u64, u64)> = Vec::new();
    let mut data_init: Vec<(u64, Vec<u8>)> = Vec::new();
    let mut cursor = GLOBALS_BASE;
    for (label, bytes, line) in &objects {
        let base = (cursor + 15) & !15;
        let size = bytes.len() as u64;
        if base + size >= STACK_BASE {
            return Err(perr(*line, "data section exceeds globals region"));
        }
        if let Some(name) = label {
            symbols.insert(name.clone(), (base, size));
        }
        global_ranges.push((base, base + size));
        if !bytes.is_empty() {
            data_init.push((base, bytes.clone()));
        }
        cursor = base + size + 16;
    }

    // instruction addresses
    let addr_of = |idx: usize| TEXT_BASE + 4 * idx as u64;
    let label_addr = |name: &str, line: usize| -> Result<u64, AsmError> {
        if let Some(idx) = text_labels.get(name) {
            return Ok(addr_of(*idx));
        }
        if let Some((base, _)) = symbols.get(name) {
            return Ok(*base);
        }
        Err(AsmError::UnknownLabel { line, name: name.to_string() })
    };

    let mut instructions = Vec::with_capacity(raw.len());
    for (idx, ri) in raw.iter().enumerate() {
        let addr = addr_of(idx);
        let resolve = |op: &RawOperand| -> Result<Operand, AsmError> {
            Ok(match op {
                RawOperand::Reg(r) => Operand::Reg(*r),
                RawOperand::Imm(v) => Operand::Imm(*v as u64),
                RawOperand::LabelImm(name) => Operand::Imm(label_addr(name, ri.line)?),
                RawOperand::Mem { base, index, disp, disp_label } => {
                    let mut d = *disp as u64;
                    if let Some(name) = disp_label {
                        d = d.wrapping_add(label_addr(name, ri.line)?);
                    }
                    Operand::Mem(MemRef { base: *base, index: *index, disp: d })
                }
            })
        };
        let mut dst = None;
        let mut src = None;
        if !ri.operands.is_empty() {
            dst = Some(resolve(&ri.operands[0])?);
        }
        if ri.operands.len() > 1 {
            src = Some(resolve(&ri.operands[1])?);
        }
        let target = match &ri.target_label {
            Some(name) => Some(label_addr(name, ri.line)?),
            None => None,
        };
        let inst = Instruction {
            addr,
            mnemonic: ri.mnemonic,
            width: ri.width.unwrap_or(Width::W64),
            dst,
            src,
            target,
            intrinsic: ri.intrinsic,
            line: ri.line,
        };
        validate(&inst, ri.width.is_some())?;
        instructions.push(inst);
    }

    let entry = *text_labels.get("main").ok_or(AsmError::NoEntry)?;
    let addr_index = instructions
        .iter()
        .enumerate()
        .map(|(i, inst)| (inst.addr, i))
        .collect();
    Ok(Program {
        instructions,
        addr_index,
        symbols,
        global_ranges,
        data_init,
        entry: addr_of(entry),
    })
}

fn find_comment(line: &str) -> Option<usize> {
    let mut in_str = false;
    let mut in_char = false;
    let mut prev_escape = false;
    for (i, c) in line.char_indices() {
        if prev_escape {
            prev_escape = false;
            continue;
        }
        match c {
            '\\' => prev_escape = true,
            '"' if !in_char => in_str = !in_str,
            '\'' if !in_str => in_char = !in_char,
            ';' if !in_str && !in_char => return Some(i),
            _ => {}
        }
    }
    None
}

fn label_prefix(line: &str) -> Option<usize> {
    let bytes = line.as_bytes();
    let mut i = 0;
    if i >= bytes.len() || !(bytes[i].is_ascii_alphabetic() || bytes[i] == b'_') {
        return None;
    }
    while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
        i += 1;
    }
    if i < bytes.len() && bytes[i] == b':' {
        Some(i)
    } else {
        None
    }
}

fn parse_directive(line: &str, line_num: usize) -> Result<Vec<u8>, AsmError> {
    let (dir, rest) = match line.find(char::is_whitespace) {
        Some(pos) => (&line[..pos], line[pos..].trim()),
        None => (line, ""),
    };
    match dir {
        ".ascii" => parse_string_literal(rest, line_num),
        ".zero" => {
            let n: usize = rest
                .parse()
                .map_err(|_| perr(line_num, format!("bad .zero count: {rest}")))?;
            Ok(vec![0u8; n])
        }
        ".byte" | ".word16" | ".word32" | ".word64" => {
            let size = match dir {
                ".byte" => 1,
                ".word16" => 2,
                ".word32" => 4,
                _ => 8,
            };
            let mut out = Vec::new();
            for piece in rest.split(',') {
                let v = parse_number(piece.trim(), line_num)?;
                out.extend_from_slice(&(v as u64).to_le_bytes()[..size]);
            }
            Ok(out)
        }
        other => Err(perr(line_num, format!("unknown directive {other}"))),
    }
}

fn parse_string_literal(s: &str, line_num: usize) -> Result<Vec<u8>, AsmError> {
    let s = s.trim();
    if !s.starts_with('"') || !s.ends_with('"') || s.len() < 2 {
        return Err(perr(line_num, "expected quoted string"));
    }
    let inner = &s[1..s.len() - 1];
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c as u8);
            continue;
        }
        match chars.next() {
            Some('n') => out.push(b'\n'),
            Some('t') => out.push(b'\t'),
            Some('r') => out.push(b'\r'),
            Some('0') => out.push(0),
            Some('\\') => out.push(b'\\'),
            Some('"') => out.push(b'"'),
            Some('x') => {
                let hi = chars.next().ok_or_else(|| perr(line_num, "bad \\x escape"))?;
                let lo = chars.next().ok_or_else(|| perr(line_num, "bad \\x escape"))?;
                let v = u8::from_str_radix(&format!("{hi}{lo}"), 16)
                    .map_err(|_| perr(line_num, "bad \\x escape"))?;
                out.push(v);
            }
            other => return Err(perr(line_num, format!("bad escape: \\{other:?}"))),
        }
    }
    Ok(out)
}

fn parse_number(s: &str, line_num: usize) -> Result<i128, AsmError> {
    let s = s.trim();
    if let Some(ch) = s.strip_prefix('\'') {
        let inner = ch
            .strip_suffix('\'')
            .ok_or_else(|| perr(line_num, "unterminated char literal"))?;
        let bytes = parse_string_literal(&format!("\"{inner}\""), line_num)?;
        if bytes.len() != 1 {
            return Err(perr(line_num, "char literal must be one byte"));
        }
        return Ok(bytes[0] as i128);
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i128::from_str_radix(hex, 16)
    } else {
        body.parse::<i128>()
    }
    .map_err(|_| perr(line_num, format!("bad number: {s}")))?;
    Ok(if neg { -value } else { value })
}

fn parse_register(s: &str) -> Option<u8> {
    let rest = s.strip_prefix('r')?;
    let n: u8 = rest.parse().ok()?;
    if n < 16 {
        Some(n)
    } else {
        None
    }
}

fn is_label_name(s: &str) -> bool {
    let bytes = s.as_bytes();
    !bytes.is_empty()
        && (bytes[0].is_ascii_alphabetic() || bytes[0] == b'_')
        && bytes.iter().all(|b| b.is_ascii_alphanumeric() || *b == b'_')
}

fn parse_operand(s: &str, line_num: usize) -> Result<RawOperand, AsmError> {
    let s = s.trim();
    if s.starts_with('[') {
        if !s.ends_with(']') {
            return Err(perr(line_num, format!("unterminated memory operand: {s}")));
        }
        return parse_mem(&s[1..s.len() - 1], line_num);
    }
    if let Some(r) = parse_register(s) {
        return Ok(RawOperand::Reg(r));
    }
    if s.starts_with('\'') || s.starts_with('-') || s.chars().next().is_some_and(|c| c.is_ascii_digit()) {
        return Ok(RawOperand::Imm(parse_number(s, line_num)?));
    }
    if is_label_name(s) {
        return Ok(RawOperand::LabelImm(s.to_string()));
    }
    Err(perr(line_num, format!("bad operand: {s}")))
}

fn parse_mem(inner: &str, line_num: usize) -> Result<RawOperand, AsmError> {
    let mut base: Option<u8> = None;
    let mut index: Option<(u8, u8)> = None;
    let mut disp: i128 = 0;
    let mut disp_label: Option<String> = None;

    // split on +/- while keeping signs
    let mut terms: Vec<(bool, String)> = Vec::new();
    let mut current = String::new();
    let mut sign = false;
    for c in inner.chars() {
        match c {
            '+' | '-' if !current.trim().is_empty() => {
                terms.push((sign, current.trim().to_string()));
                current = String::new();
                sign = c == '-';
            }
            '-' if current.trim().is_empty() => sign = !sign,
            _ => current.push(c),
        }
    }
    if !current.trim().is_empty() {
        terms.push((sign, current.trim().to_string()));
    }
    if terms.is_empty() {
        return Err(perr(line_num, "empty memory operand"));
    }

    for (negated, term) in terms {
        if let Some((reg_part, scale_part)) = term.split_once('*') {
            let reg = parse_register(reg_part.trim())
                .ok_or_else(|| perr(line_num, format!("bad index register: {term}")))?;
            let scale: u8 = scale_part
                .trim()
                .parse()
                .map_err(|_| perr(line_num, format!("bad scale: {term}")))?;
            if !matches!(scale, 1 | 2 | 4 | 8) {
                return Err(perr(line_num, format!("scale must be 1/2/4/8: {term}")));
            }
            if negated {
                return Err(perr(line_num, "negated index term is not supported"));
            }
            if index.is_some() {
                return Err(perr(line_num, "two index terms in memory operand"));
            }
            index = Some((reg, scale));
        } else if let Some(reg) = parse_register(&term) {
            if negated {
                return Err(perr(line_num, "negated register term is not supported"));
            }
            if base.is_none() {
                base = Some(reg);
            } else if index.is_none() {
                index = Some((reg, 1));
            } else {
                return Err(perr(line_num, "too many registers in memory operand"));
            }
        } else if term.starts_with('\'') || term.chars().next().is_some_and(|c| c.is_ascii_digit()) {
            let v = parse_number(&term, line_num)?;
            disp += if negated { -v } else { v };
        } else if is_label_name(&term) {
            if negated {
                return Err(perr(line_num, "negated label in memory operand"));
            }
            if disp_label.is_some() {
                return Err(perr(line_num, "two labels in memory operand"));
            }
            disp_label = Some(term);
        } else {
            return Err(perr(line_num, format!("bad memory term: {term}")));
        }
    }
    Ok(RawOperand::Mem { base, index, disp, disp_label })
}

fn parse_instruction(line: &str, line_num: usize) -> Result<RawInstruction, AsmError> {
    let (head, rest) = match line.find(char::is_whitespace) {
        Some(pos) => (&line[..pos], line[pos..].trim()),
        None => (line, ""),
    };
    let (mn_text, width) = match head.split_once('.') {
        Some((m, suffix)) => {
            let bits: u32 = suffix
                .parse()
                .map_err(|_| perr(line_num, format!("bad width suffix: {head}")))?;
            let w = Width::from_bits(bits)
                .ok_or_else(|| perr(line_num, format!("bad width suffix: {head}")))?;
            (m, Some(w))
        }
        None => (head, None),
    };

    let mnemonic = match mn_text {
        "mov" => Mnemonic::Mov,
        "load" => Mnemonic::Load,
        "store" => Mnemonic::Store,
        "lea" => Mnemonic::Lea,
        "add" => Mnemonic::Add,
        "adc" => Mnemonic::Adc,
        "sub" => Mnemonic::Sub,
        "sbb" => Mnemonic::Sbb,
        "mul" => Mnemonic::Mul,
        "imul" => Mnemonic::Imul,
        "div" => Mnemonic::Div,
        "shl" | "sal" => Mnemonic::Shl,
        "shr" => Mnemonic::Shr,
        "sar" => Mnemonic::Sar,
        "and" => Mnemonic::And,
        "or" => Mnemonic::Or,
        "xor" => Mnemonic::Xor,
        "not" => Mnemonic::Not,
        "neg" => Mnemonic::Neg,
        "cmp" => Mnemonic::Cmp,
        "test" => Mnemonic::Test,
        "push" => Mnemonic::Push,
        "pop" => Mnemonic::Pop,
        "call" => Mnemonic::Call,
        "ret" => Mnemonic::Ret,
        "jmp" => Mnemonic::Jmp,
        "jz" | "je" => Mnemonic::Jcc(Cond::Z),
        "jnz" | "jne" => Mnemonic::Jcc(Cond::Nz),
        "js" => Mnemonic::Jcc(Cond::S),
        "jns" => Mnemonic::Jcc(Cond::Ns),
        "jg" => Mnemonic::Jcc(Cond::G),
        "jge" => Mnemonic::Jcc(Cond::Ge),
        "jl" => Mnemonic::Jcc(Cond::L),
        "jle" => Mnemonic::Jcc(Cond::Le),
        "ja" => Mnemonic::Jcc(Cond::A),
        "jae" => Mnemonic::Jcc(Cond::Ae),
        "jb" => Mnemonic::Jcc(Cond::B),
        "jbe" => Mnemonic::Jcc(Cond::Be),
        "icall" => Mnemonic::Icall,
        "halt" => Mnemonic::Halt,
        other => return Err(perr(line_num, format!("unknown mnemonic: {other}"))),
    };

    let mut operands = Vec::new();
    let mut target_label = None;
    let mut intrinsic = None;

    match mnemonic {
        Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Call => {
            if !is_label_name(rest) {
                return Err(perr(line_num, format!("expected label target: {rest}")));
            }
            target_label = Some(rest.to_string());
        }
        Mnemonic::Icall => {
            intrinsic = Some(
                rest.parse::<Intrinsic>()
                    .map_err(|_| perr(line_num, format!("unknown intrinsic: {rest}")))?,
            );
        }
        Mnemonic::Ret | Mnemonic::Halt => {
            if !rest.is_empty() {
                return Err(perr(line_num, format!("{mn_text} takes no operands")));
            }
        }
        _ => {
            if !rest.is_empty() {
                for piece in split_operands(rest) {
                    operands.push(parse_operand(&piece, line_num)?);
                }
            }
        }
    }

    Ok(RawInstruction { line: line_num, mnemonic, width, operands, target_label, intrinsic })
}

fn split_operands(rest: &str) -> Vec<String> {
    // commas inside brackets or char literals do not split
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut in_char = false;
    let mut cur = String::new();
    for c in rest.chars() {
        match c {
            '[' => {
                depth += 1;
                cur.push(c);
            }
            ']' => {
                depth = depth.saturating_sub(1);
                cur.push(c);
            }
            '\'' => {
                in_char = !in_char;
                cur.push(c);
            }
            ',' if depth == 0 && !in_char => {
                out.push(cur.trim().to_string());
                cur = String::new();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn validate(inst: &Instruction, has_width: bool) -> Result<(), AsmError> {
    let line = inst.line;
    let m = inst.mnemonic;
    if m.needs_width() && !has_width {
        return Err(perr(line, format!("{m:?} requires a width suffix")));
    }
    if !m.needs_width() && has_width {
        return Err(perr(line, format!("{m:?} takes no width suffix")));
    }
    let is_reg = |op: &Option<Operand>| matches!(op, Some(Operand::Reg(_)));
    let is_reg_or_imm =
        |op: &Option<Operand>| matches!(op, Some(Operand::Reg(_)) | Some(Operand::Imm(_)));
    let is_mem = |op: &Option<Operand>| matches!(op, Some(Operand::Mem(_)));
    let none = |op: &Option<Operand>| op.is_none();
    let ok = match m {
        Mnemonic::Mov => is_reg(&inst.dst) && is_reg_or_imm(&inst.src),
        Mnemonic::Load => is_reg(&inst.dst) && is_mem(&inst.src),
        Mnemonic::Store => is_mem(&inst.dst) && is_reg_or_imm(&inst.src),
        Mnemonic::Lea => is_reg(&inst.dst) && is_mem(&inst.src),
        Mnemonic::Add
        | Mnemonic::Adc
        | Mnemonic::Sub
        | Mnemonic::Sbb
        | Mnemonic::Mul
        | Mnemonic::Imul
        | Mnemonic::Div
        | Mnemonic::Shl
        | Mnemonic::Shr
        | Mnemonic::Sar
        | Mnemonic::And
        | Mnemonic::Or
        | Mnemonic::Xor
        | Mnemonic::Cmp
        | Mnemonic::Test => is_reg(&inst.dst) && is_reg_or_imm(&inst.src),
        Mnemonic::Not | Mnemonic::Neg => is_reg(&inst.dst) && none(&inst.src),
        Mnemonic::Push => is_reg_or_imm(&inst.dst) && none(&inst.src),
        Mnemonic::Pop => is_reg(&inst.dst) && none(&inst.src),
        Mnemonic::Call | Mnemonic::Jmp | Mnemonic::Jcc(_) => inst.target.is_some(),
        Mnemonic::Ret | Mnemonic::Halt => none(&inst.dst),
        Mnemonic::Icall => inst.intrinsic.is_some(),
    };
    if !ok {
        return Err(perr(line, format!("bad operands for {m:?}")));
    }
    Ok(())
}

//! Symbolic models for C-library intrinsics: search (memchr/strchr/strlen),
//! lexicographic comparison (memcmp/strcmp/strncmp), substring search
//! (strstr), and string-to-integer conversion with validity and range
//! constraints. Each model folds the entire control flow of the library
//! function into one return-value expression over the buffer bytes.

use crate::expr::{and_all, mask, or_all, SymExpr};
#[cfg(test)]
use crate::expr::Model;
use crate::minivm::{scan_int, ScanResult};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("every scanned byte is concrete; no formula needed")]
    Skipped,
    #[error("concrete parse found no valid digits")]
    NoDigits,
}

/// How a model return value is tied to the concrete return.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TieSpec {
    Equal,
    SignClass,
}

/// A buffer as the models see it: concrete bytes plus the symbolic
/// expression (8-bit) of each byte where one exists.
#[derive(Clone, Debug)]
pub struct SymBuf {
    pub addr: u64,
    pub bytes: Vec<u8>,
    pub syms: Vec<Option<SymExpr>>,
}

impl SymBuf {
    pub fn concrete(addr: u64, bytes: &[u8]) -> SymBuf {
        SymBuf {
            addr,
            bytes: bytes.to_vec(),
            syms: vec![None; bytes.len()],
        }
    }

    pub fn byte_expr(&self, i: usize) -> SymExpr {
        match &self.syms[i] {
            Some(e) => e.clone(),
            None => SymExpr::bv(self.bytes[i] as u128, 8),
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn any_symbolic(&self, range: std::ops::Range<usize>) -> bool {
        self.syms[range].iter().any(|s| s.is_some())
    }

    /// Concrete strlen bounded by the buffer length.
    pub fn concrete_strlen(&self) -> usize {
        self.bytes.iter().position(|b| *b == 0).unwrap_or(self.bytes.len())
    }
}

#[derive(Clone, Debug)]
pub struct BuiltModel {
    pub ret64: SymExpr,
    pub constraints: Vec<SymExpr>,
    pub tie: TieSpec,
}

fn bv64(v: u64) -> SymExpr {
    SymExpr::bv(v as u128, 64)
}

fn one_or_zero64(cond: &SymExpr) -> SymExpr {
    cond.ite(&bv64(1), &bv64(0))
}

/// memchr(ptr, ch, count): null when the character is absent, otherwise the
/// pointer advanced by the number of leading non-matching bytes.
pub fn memchr_model(buf: &SymBuf, ch: &SymExpr, count: usize) -> Result<BuiltModel, ModelError> {
    assert!(count <= buf.len(), "scan bound exceeds buffer snapshot");
    if !buf.any_symbolic(0..count) && ch.as_const().is_some() {
        return Err(ModelError::Skipped);
    }
    let miss = and_all(
        (0..count)
            .map(|k| buf.byte_expr(k).neq(ch))
            .collect(),
    );
    let mut pos = bv64(0);
    for i in 0..count {
        let alive = and_all((0..=i).map(|k| buf.byte_expr(k).neq(ch)).collect());
        pos = pos.add(&one_or_zero64(&alive));
    }
    let ret = miss.ite(&bv64(0), &bv64(buf.addr).add(&pos));
    Ok(BuiltModel { ret64: ret, constraints: Vec::new(), tie: TieSpec::Equal })
}

/// strchr: memchr over length+1 bytes, where the scan dies past a null byte.
pub fn strchr_model(buf: &SymBuf, ch: &SymExpr, bound: usize) -> Result<BuiltModel, ModelError> {
    assert!(bound <= buf.len());
    if !buf.any_symbolic(0..bound) && ch.as_const().is_some() {
        return Err(ModelError::Skipped);
    }
    let zero8 = SymExpr::bv(0, 8);
    let alive = |k: usize| {
        let b = buf.byte_expr(k);
        and_all(vec![b.neq(ch), b.neq(&zero8)])
    };
    let mut found_any = Vec::new();
    for i in 0..bound {
        let mut conj = vec![buf.byte_expr(i).equ(ch)];
        for k in 0..i {
            conj.push(alive(k));
        }
        found_any.push(and_all(conj));
    }
    let miss = or_all(found_any).not_bool();
    let mut pos = bv64(0);
    for i in 0..bound {
        let run = and_all((0..=i).map(alive).collect());
        pos = pos.add(&one_or_zero64(&run));
    }
    let ret = miss.ite(&bv64(0), &bv64(buf.addr).add(&pos));
    Ok(BuiltModel { ret64: ret, constraints: Vec::new(), tie: TieSpec::Equal })
}

/// strlen(str) counts leading non-null bytes, scanning length+1 bytes.
pub fn strlen_model(buf: &SymBuf, bound: usize) -> Result<BuiltModel, ModelError> {
    assert!(bound <= buf.len());
    if !buf.any_symbolic(0..bound) {
        return Err(ModelError::Skipped);
    }
    let zero8 = SymExpr::bv(0, 8);
    let mut len = bv64(0);
    for i in 0..bound {
        let run = and_all((0..=i).map(|k| buf.byte_expr(k).neq(&zero8)).collect());
        len = len.add(&one_or_zero64(&run));
    }
    Ok(BuiltModel { ret64: len, constraints: Vec::new(), tie: TieSpec::Equal })
}

/// memcmp/strcmp/strncmp: the first differing pair dominates the sum; every
/// later summand is zeroed by its prefix-equality conjunction. Byte
/// differences are sign-extended to 32 bits before summation. In string
/// mode the equality chain also requires that no null pair was passed.
pub fn memcmp_model(
    lhs: &SymBuf,
    rhs: &SymBuf,
    count: usize,
    string_mode: bool,
) -> Result<BuiltModel, ModelError> {
    assert!(count <= lhs.len() && count <= rhs.len());
    if count == 0 || (!lhs.any_symbolic(0..count) && !rhs.any_symbolic(0..count)) {
        return Err(ModelError::Skipped);
    }
    let zero8 = SymExpr::bv(0, 8);
    let diff = |i: usize| {
        lhs.byte_expr(i)
            .sext(24)
            .sub(&rhs.byte_expr(i).sext(24))
    };
    let pair_eq_alive = |k: usize| {
        let eq = lhs.byte_expr(k).equ(&rhs.byte_expr(k));
        if string_mode {
            and_all(vec![eq, lhs.byte_expr(k).neq(&zero8)])
        } else {
            eq
        }
    };
    let one32 = SymExpr::bv(1, 32);
    let zero32 = SymExpr::bv(0, 32);
    let mut sum = diff(0);
    for i in 1..count {
        let prefix = and_all((0..i).map(pair_eq_alive).collect());
        sum = sum.add(&diff(i).mul(&prefix.ite(&one32, &zero32)));
    }
    Ok(BuiltModel { ret64: sum.sext(32), constraints: Vec::new(), tie: TieSpec::SignClass })
}

/// strstr: character search generalized to a window comparison per
/// position. Symbolic needle bytes are constrained non-null so the window
/// length stays the concrete needle length.
pub fn strstr_model(
    hay: &SymBuf,
    hay_len: usize,
    needle: &SymBuf,
    needle_len: usize,
) -> Result<BuiltModel, ModelError> {
    assert!(hay_len <= hay.len());
    if needle_len == 0 || needle_len > hay_len {
        // constant result (haystack pointer or null); nothing symbolic to say
        return Err(ModelError::Skipped);
    }
    if !hay.any_symbolic(0..hay_len) && !needle.any_symbolic(0..needle_len) {
        return Err(ModelError::Skipped);
    }
    let positions = hay_len - needle_len + 1;
    let zero8 = SymExpr::bv(0, 8);
    let window_match = |i: usize| {
        and_all(
            (0..needle_len)
                .map(|j| hay.byte_expr(i + j).equ(&needle.byte_expr(j)))
                .collect(),
        )
    };
    let alive = |k: usize| {
        and_all(vec![window_match(k).not_bool(), hay.byte_expr(k).neq(&zero8)])
    };
    let mut found_any = Vec::new();
    for i in 0..positions {
        let mut conj = vec![window_match(i)];
        for k in 0..i {
            conj.push(alive(k));
        }
        found_any.push(and_all(conj));
    }
    let miss = or_all(found_any).not_bool();
    let mut pos = bv64(0);
    for i in 0..positions {
        let run = and_all((0..=i).map(alive).collect());
        pos = pos.add(&one_or_zero64(&run));
    }
    let ret = miss.ite(&bv64(0), &bv64(hay.addr).add(&pos));
    let mut constraints = Vec::new();
    for j in 0..needle_len {
        if needle.syms[j].is_some() {
            constraints.push(needle.byte_expr(j).neq(&zero8));
        }
    }
    Ok(BuiltModel { ret64: ret, constraints, tie: TieSpec::Equal })
}

/// Return width and signedness of one strto*-family conversion.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvVariant {
    pub ret_bits: u32,
    pub unsigned: bool,
}

impl ConvVariant {
    pub fn strtol() -> ConvVariant {
        ConvVariant { ret_bits: 64, unsigned: false }
    }
    pub fn strtoul() -> ConvVariant {
        ConvVariant { ret_bits: 64, unsigned: true }
    }
    pub fn atoi() -> ConvVariant {
        ConvVariant { ret_bits: 32, unsigned: false }
    }
}

/// The symbolic string-to-integer conversion: scanned layout, per-digit
/// value expressions, double-width magnitude and signed value, validity and
/// range constraints, and the truncated register-width result.
#[derive(Clone, Debug)]
pub struct ConversionModel {
    pub scan: ScanResult,
    pub base: u32,
    pub variant: ConvVariant,
    pub digit_chars: Vec<SymExpr>,
    pub digit_values: Vec<SymExpr>,
    pub magnitude: SymExpr,
    pub value: SymExpr,
    pub result64: SymExpr,
    pub validity: Vec<SymExpr>,
    pub extra: Vec<SymExpr>,
    pub sign_expr: Option<SymExpr>,
}

impl ConversionModel {
    pub fn constraints(&self) -> Vec<SymExpr> {
        self.validity.iter().chain(self.extra.iter()).cloned().collect()
    }
}

fn is_ws_expr(c: &SymExpr) -> SymExpr {
    or_all(
        [b' ', b'\t', b'\n', 0x0b, 0x0c, b'\r']
            .iter()
            .map(|w| c.equ(&SymExpr::bv(*w as u128, 8)))
            .collect(),
    )
}

/// Eq-style digit decoding: classical digit, then lowercase, then uppercase.
fn digit_value_expr(c: &SymExpr, base: u32) -> SymExpr {
    let ch = |b: u8| SymExpr::bv(b as u128, 8);
    let digit_cond = and_all(vec![
        c.uge(&ch(b'0')),
        c.ule(&ch(b'9')),
        c.ult(&SymExpr::bv((b'0' as u32 + base) as u128 & 0xFF, 8)),
    ]);
    let digit_arm = c.sub(&ch(b'0'));
    if base <= 10 {
        return digit_cond.ite(&digit_arm, &c.sub(&ch(b'A')).add(&SymExpr::bv(10, 8)));
    }
    let lower_cond = and_all(vec![
        c.uge(&ch(b'a')),
        c.ult(&SymExpr::bv((b'a' as u32 + base - 10) as u128 & 0xFF, 8)),
    ]);
    let lower_arm = c.sub(&ch(b'a')).add(&SymExpr::bv(10, 8));
    let upper_arm = c.sub(&ch(b'A')).add(&SymExpr::bv(10, 8));
    digit_cond.ite(&digit_arm, &lower_cond.ite(&lower_arm, &upper_arm))
}

/// Eq-style per-character validity: the character must decode as a digit in
/// the effective base (letter arms only exist for bases above 10).
fn digit_validity_expr(c: &SymExpr, base: u32) -> SymExpr {
    let ch = |b: u8| SymExpr::bv(b as u128, 8);
    let mut arms = vec![and_all(vec![
        c.uge(&ch(b'0')),
        c.ule(&ch(b'9')),
        c.ult(&SymExpr::bv((b'0' as u32 + base) as u128 & 0xFF, 8)),
    ])];
    if base > 10 {
        arms.push(and_all(vec![
            c.uge(&ch(b'a')),
            c.ult(&SymExpr::bv((b'a' as u32 + base - 10) as u128 & 0xFF, 8)),
        ]));
        arms.push(and_all(vec![
            c.uge(&ch(b'A')),
            c.ult(&SymExpr::bv((b'A' as u32 + base - 10) as u128 & 0xFF, 8)),
        ]));
    }
    or_all(arms)
}

/// Builds the conversion model from the scanned buffer snapshot.
/// `base_arg` is the concrete base argument (0 means learn from prefix).
pub fn conversion_model(
    buf: &SymBuf,
    base_arg: u32,
    variant: ConvVariant,
) -> Result<ConversionModel, ModelError> {
    let scan = scan_int(&buf.bytes, base_arg).ok_or(ModelError::NoDigits)?;
    let relevant_end = (scan.consumed + 1).min(buf.len());
    if !buf.any_symbolic(0..relevant_end) {
        return Err(ModelError::Skipped);
    }
    let base = scan.effective_base;
    let w2 = variant.ret_bits * 2;
    let n = scan.digit_count();

    // magnitude must be exactly representable at double width
    let mut cap: u128 = 1;
    for _ in 0..n {
        cap = cap.checked_mul(base as u128).ok_or(ModelError::Skipped)?;
        if cap - 1 > mask(w2) {
            return Err(ModelError::Skipped);
        }
    }

    let space = SymExpr::bv(b' ' as u128, 8);
    // leading-zero-to-space alternation applies only for a learned decimal
    // base with no sign character
    let space_trick = base_arg == 0 && scan.sign_off.is_none() && base == 10;

    let mut validity = Vec::new();
    let mut extra = Vec::new();
    let mut digit_chars = Vec::new();
    let mut digit_values = Vec::new();

    for p in scan.digits_start..scan.digits_end {
        let c = buf.byte_expr(p);
        let is_last = p == scan.digits_end - 1;
        let raw_value = digit_value_expr(&c, base);
        let valid = digit_validity_expr(&c, base);
        if space_trick && !is_last {
            let sp = c.equ(&space);
            validity.push(or_all(vec![sp.clone(), valid]));
            digit_values.push(sp.ite(&SymExpr::bv(0, 8), &raw_value));
        } else {
            validity.push(valid);
            digit_values.push(raw_value);
        }
        digit_chars.push(c);
    }

    if space_trick {
        // spaces may only form a prefix: a space at position p forces a
        // space at p-1, and the first real digit must not be a zero that
        // would flip the learned base to octal (unless it is the only digit)
        for p in 1..n {
            let sp_here = digit_chars[p].equ(&space);
            let sp_prev = digit_chars[p - 1].equ(&space);
            extra.push(or_all(vec![sp_here.not_bool(), sp_prev]));
        }
        for p in 0..n {
            let is_last = p == n - 1;
            if is_last {
                continue;
            }
            let first_real = if p == 0 {
                digit_chars[p].equ(&space).not_bool()
            } else {
                and_all(vec![
                    digit_chars[p].equ(&space).not_bool(),
                    digit_chars[p - 1].equ(&space),
                ])
            };
            let nonzero = digit_chars[p].neq(&SymExpr::bv(b'0' as u128, 8));
            extra.push(or_all(vec![first_real.not_bool(), nonzero]));
        }
    } else if base_arg == 0 && base == 10 && n > 1 {
        // sign present: no space trick, but the first digit must stay
        // non-zero so the learned decimal base survives regeneration
        extra.push(digit_chars[0].neq(&SymExpr::bv(b'0' as u128, 8)));
    } else if base_arg == 0 && base == 8 {
        // keep the octal marker in place
        extra.push(digit_chars[0].equ(&SymExpr::bv(b'0' as u128, 8)));
    }

    // pin symbolic whitespace to stay whitespace, prefix bytes to stay put
    for p in 0..scan.ws_len {
        if buf.syms[p].is_some() {
            extra.push(is_ws_expr(&buf.byte_expr(p)));
        }
    }
    if scan.prefix_len > 0 {
        let pstart = scan.sign_off.map(|s| s + 1).unwrap_or(scan.ws_len);
        for p in pstart..pstart + scan.prefix_len {
            if buf.syms[p].is_some() {
                extra.push(buf.byte_expr(p).equ(&SymExpr::bv(buf.bytes[p] as u128, 8)));
            }
        }
    }

    // magnitude: sum of digit values weighted by base^k, least significant
    // digit last in scan order
    let mut magnitude = SymExpr::bv(0, w2);
    let mut weight: u128 = 1;
    for (i, dv) in digit_values.iter().enumerate().rev() {
        magnitude = magnitude.add(&dv.zext_to(w2).mul(&SymExpr::bv(weight, w2)));
        if i > 0 {
            weight *= base as u128;
        }
    }

    // sign handling
    let sign_expr = scan.sign_off.map(|off| buf.byte_expr(off));
    let plus = SymExpr::bv(b'+' as u128, 8);
    let minus = SymExpr::bv(b'-' as u128, 8);
    let value = match (&sign_expr, variant.unsigned, scan.negative) {
        (Some(s), false, _) => {
            if buf.syms[scan.sign_off.unwrap()].is_some() {
                extra.push(or_all(vec![s.equ(&plus), s.equ(&minus)]));
            }
            s.equ(&minus).ite(&magnitude.neg(), &magnitude)
        }
        (Some(s), true, negative) => {
            // unsigned variants pin the sign character to its concrete role
            if buf.syms[scan.sign_off.unwrap()].is_some() {
                extra.push(s.equ(&SymExpr::bv(buf.bytes[scan.sign_off.unwrap()] as u128, 8)));
            }
            if negative {
                magnitude.neg()
            } else {
                magnitude.clone()
            }
        }
        (None, _, _) => magnitude.clone(),
    };

    // range constraint at double width
    let bits = variant.ret_bits;
    if variant.unsigned {
        let umax = SymExpr::bv(mask(bits), w2);
        extra.push(magnitude.ule(&umax));
    } else {
        let min_val = -((1u128 << (bits - 1)) as i128);
        let min_c = SymExpr::bv((min_val as u128) & mask(w2), w2);
        let max_c = SymExpr::bv((1u128 << (bits - 1)) - 1, w2);
        extra.push(min_c.sle(&value));
        extra.push(value.sle(&max_c));
    }

    // the byte that stopped the scan must stay invalid
    if scan.consumed < buf.len() && buf.syms[scan.consumed].is_some() {
        extra.push(digit_validity_expr(&buf.byte_expr(scan.consumed), base).not_bool());
    }

    // truncate to the return width, extend back to the 64-bit register
    let low = value.extract(bits - 1, 0);
    let result64 = if bits == 64 {
        low
    } else if variant.unsigned {
        low.zext_to(64)
    } else {
        low.sext_to(64)
    };

    Ok(ConversionModel {
        scan,
        base,
        variant,
        digit_chars,
        digit_values,
        magnitude,
        value,
        result64,
        validity,
        extra,
        sign_expr,
    })
}

/// The tie constraint per the chosen relation, against the concrete return.
pub fn tie_constraint(model_ret: &SymExpr, concrete: u64, tie: TieSpec) -> SymExpr {
    match tie {
        TieSpec::Equal => model_ret.equ(&bv64(concrete)),
        TieSpec::SignClass => {
            let zero = bv64(0);
            if (concrete as i64) < 0 {
                model_ret.slt(&zero)
            } else if concrete == 0 {
                model_ret.equ(&zero)
            } else {
                model_ret.sgt(&zero)
            }
        }
    }
}

/// ite(e < 0, -1, ite(e = 0, 0, 1)) — the {−1,0,1}-normalizing wrapper used
/// when the ABI return does not equal the raw model value.
pub fn sign_class_normalizer(expr: &SymExpr) -> SymExpr {
    let zero = bv64(0);
    expr.slt(&zero)
        .ite(&bv64((-1i64) as u64), &expr.equ(&zero).ite(&zero, &bv64(1)))
}

/// Moves symbolic bytes for the data-movement group: destination bytes take
/// the source expressions unchanged for the concretely copied length.
pub fn apply_copy(sym_mem: &mut HashMap<u64, SymExpr>, dst: u64, src: u64, len: usize) {
    let moved: Vec<Option<SymExpr>> = (0..len)
        .map(|i| sym_mem.get(&(src + i as u64)).cloned())
        .collect();
    for (i, m) in moved.into_iter().enumerate() {
        match m {
            Some(e) => {
                sym_mem.insert(dst + i as u64, e);
            }
            None => {
                sym_mem.remove(&(dst + i as u64));
            }
        }
    }
}

/// Erases symbolic bytes in a range (the bytes became concrete).
pub fn erase_range(sym_mem: &mut HashMap<u64, SymExpr>, base: u64, len: usize) {
    for i in 0..len {
        sym_mem.remove(&(base + i as u64));
    }
}

/// Terminator-position constraints for strcpy-style copies, built only when
/// the scanned source had symbolic bytes: src[len] = 0 and src[k] != 0
/// before it.
pub fn strcpy_constraints(src: &SymBuf, len: usize) -> Vec<SymExpr> {
    if !src.any_symbolic(0..(len + 1).min(src.len())) {
        return Vec::new();
    }
    let zero8 = SymExpr::bv(0, 8);
    let mut out = Vec::new();
    for k in 0..len {
        out.push(src.byte_expr(k).neq(&zero8));
    }
    if len < src.len() {
        out.push(src.byte_expr(len).equ(&zero8));
    }
    out.retain(|c| c.as_const().is_none());
    out
}

/// Human-readable list of the available models, for the CLI.
pub fn model_catalog() -> Vec<(&'static str, &'static str)> {
    vec![
        ("malloc/calloc/realloc/free", "no symbolic computation; shadow heap updated"),
        ("memcpy/memmove/memset/strcpy/strncpy", "symbolic bytes moved; terminator pinned when symbolic"),
        ("print", "skipped"),
        ("memchr", "character-search return formula"),
        ("strchr", "character search with null-terminator conditions"),
        ("strlen", "character search for the terminator, returns offset"),
        ("memcmp", "first-mismatch difference sum"),
        ("strcmp/strncmp", "difference sum with null-pair guard"),
        ("strstr", "window comparison per position"),
        ("strtol/strtoll", "digit decode + double-width magnitude, signed"),
        ("strtoul/strtoull", "digit decode + double-width magnitude, unsigned"),
        ("atoi", "strtol with int-width range constraints"),
    ]
}

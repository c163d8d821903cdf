//! Library-function intrinsics: concrete implementations operating on VM
//! memory, plus the C99 strto* scanner shared with the symbolic models.
//!
//! Calling convention: arguments in r0-r5 in order, return value in r0.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::machine::{MemFault, Vm};
use super::{AllocInfo, Event, InputReadEvent, Instruction, IntrinsicEvent, VmError, Width};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intrinsic {
    Read,
    ReadNumScanfQuirk,
    Malloc,
    Calloc,
    Realloc,
    Free,
    Memcpy,
    Memmove,
    Memset,
    Strcpy,
    Strncpy,
    Strlen,
    Strchr,
    Memchr,
    Strcmp,
    Strncmp,
    Memcmp,
    Strstr,
    Strtol,
    Strtoul,
    Strtoll,
    Strtoull,
    Atoi,
    Print,
}

impl Intrinsic {
    pub const ALL: [Intrinsic; 24] = [
        Intrinsic::Read,
        Intrinsic::ReadNumScanfQuirk,
        Intrinsic::Malloc,
        Intrinsic::Calloc,
        Intrinsic::Realloc,
        Intrinsic::Free,
        Intrinsic::Memcpy,
        Intrinsic::Memmove,
        Intrinsic::Memset,
        Intrinsic::Strcpy,
        Intrinsic::Strncpy,
        Intrinsic::Strlen,
        Intrinsic::Strchr,
        Intrinsic::Memchr,
        Intrinsic::Strcmp,
        Intrinsic::Strncmp,
        Intrinsic::Memcmp,
        Intrinsic::Strstr,
        Intrinsic::Strtol,
        Intrinsic::Strtoul,
        Intrinsic::Strtoll,
        Intrinsic::Strtoull,
        Intrinsic::Atoi,
        Intrinsic::Print,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Intrinsic::Read => "read",
            Intrinsic::ReadNumScanfQuirk => "read_num_scanf_quirk",
            Intrinsic::Malloc => "malloc",
            Intrinsic::Calloc => "calloc",
            Intrinsic::Realloc => "realloc",
            Intrinsic::Free => "free",
            Intrinsic::Memcpy => "memcpy",
            Intrinsic::Memmove => "memmove",
            Intrinsic::Memset => "memset",
            Intrinsic::Strcpy => "strcpy",
            Intrinsic::Strncpy => "strncpy",
            Intrinsic::Strlen => "strlen",
            Intrinsic::Strchr => "strchr",
            Intrinsic::Memchr => "memchr",
            Intrinsic::Strcmp => "strcmp",
            Intrinsic::Strncmp => "strncmp",
            Intrinsic::Memcmp => "memcmp",
            Intrinsic::Strstr => "strstr",
            Intrinsic::Strtol => "strtol",
            Intrinsic::Strtoul => "strtoul",
            Intrinsic::Strtoll => "strtoll",
            Intrinsic::Strtoull => "strtoull",
            Intrinsic::Atoi => "atoi",
            Intrinsic::Print => "print",
        }
    }

    pub fn is_heap_fn(self) -> bool {
        matches!(
            self,
            Intrinsic::Malloc | Intrinsic::Calloc | Intrinsic::Realloc | Intrinsic::Free
        )
    }

    pub fn is_copy_fn(self) -> bool {
        matches!(
            self,
            Intrinsic::Memcpy | Intrinsic::Memmove | Intrinsic::Memset | Intrinsic::Strncpy
        )
    }

    pub fn is_strto_family(self) -> bool {
        matches!(
            self,
            Intrinsic::Strtol
                | Intrinsic::Strtoul
                | Intrinsic::Strtoll
                | Intrinsic::Strtoull
                | Intrinsic::Atoi
        )
    }
}

impl FromStr for Intrinsic {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Intrinsic::ALL
            .iter()
            .find(|i| i.name() == s)
            .copied()
            .ok_or(())
    }
}

/// Layout of one parsed integer: `[whitespaces][sign][prefix][digits]` with
/// the first invalid byte terminating the scan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanResult {
    pub ws_len: usize,
    pub sign_off: Option<usize>,
    pub negative: bool,
    pub prefix_len: usize,
    pub digits_start: usize,
    pub digits_end: usize, // exclusive
    pub effective_base: u32,
    pub magnitude: u128,
    pub overflow: bool,
    pub consumed: usize,
}

impl ScanResult {
    pub fn digit_count(&self) -> usize {
        self.digits_end - self.digits_start
    }

    /// Two's-complement signed result clamped to the type range (C strtol).
    pub fn signed_value(&self, bits: u32) -> u64 {
        let max_pos: u128 = (1u128 << (bits - 1)) - 1;
        let max_neg: u128 = 1u128 << (bits - 1);
        let wmask: u64 = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        if self.negative {
            if self.overflow || self.magnitude > max_neg {
                return (max_neg as u64) & wmask; // MIN
            }
            (self.magnitude as u64).wrapping_neg() & wmask
        } else {
            if self.overflow || self.magnitude > max_pos {
                return (max_pos as u64) & wmask; // MAX
            }
            self.magnitude as u64 & wmask
        }
    }

    /// Unsigned result with C semantics: clamp to UMAX on overflow, negate
    /// modulo 2^bits when a minus sign was scanned.
    pub fn unsigned_value(&self, bits: u32) -> u64 {
        let umax: u128 = if bits == 64 { u64::MAX as u128 } else { (1u128 << bits) - 1 };
        let wmask = umax as u64;
        if self.overflow || self.magnitude > umax {
            return wmask;
        }
        if self.negative {
            (self.magnitude as u64).wrapping_neg() & wmask
        } else {
            self.magnitude as u64 & wmask
        }
    }
}

pub fn is_scan_whitespace(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\x0b' | b'\x0c' | b'\r')
}

pub fn digit_value(b: u8) -> Option<u32> {
    match b {
        b'0'..=b'9' => Some((b - b'0') as u32),
        b'a'..=b'z' => Some((b - b'a') as u32 + 10),
        b'A'..=b'Z' => Some((b - b'A') as u32 + 10),
        _ => None,
    }
}

/// C99 strto* scan over a byte buffer. Returns None when no valid digits are
/// found (no conversion performed).
pub fn scan_int(bytes: &[u8], base: u32) -> Option<ScanResult> {
    if base != 0 && !(2..=36).contains(&base) {
        return None;
    }
    let mut pos = 0;
    while pos < bytes.len() && is_scan_whitespace(bytes[pos]) {
        pos += 1;
    }
    let ws_len = pos;
    let mut sign_off = None;
    let mut negative = false;
    if pos < bytes.len() && (bytes[pos] == b'+' || bytes[pos] == b'-') {
        sign_off = Some(pos);
        negative = bytes[pos] == b'-';
        pos += 1;
    }
    let mut effective_base = base;
    let mut prefix_len = 0;
    let has_hex_digit_after = |p: usize| {
        bytes
            .get(p)
            .and_then(|b| digit_value(*b))
            .is_some_and(|d| d < 16)
    };
    if base == 16 || base == 0 {
        if pos + 1 < bytes.len()
            && bytes[pos] == b'0'
            && (bytes[pos + 1] == b'x' || bytes[pos + 1] == b'X')
            && has_hex_digit_after(pos + 2)
        {
            effective_base = 16;
            prefix_len = 2;
            pos += 2;
        } else if base == 0 {
            if pos < bytes.len() && bytes[pos] == b'0' {
                effective_base = 8;
            } else {
                effective_base = 10;
            }
        }
    } else if base == 0 {
        effective_base = 10;
    }
    if effective_base == 0 {
        effective_base = 10;
    }

    let digits_start = pos;
    let mut magnitude: u128 = 0;
    let mut overflow = false;
    while pos < bytes.len() {
        match digit_value(bytes[pos]) {
            Some(d) if d < effective_base => {
                if magnitude > u64::MAX as u128 {
                    overflow = true;
                } else {
                    magnitude = magnitude * effective_base as u128 + d as u128;
                    if magnitude > u64::MAX as u128 {
                        overflow = true;
                    }
                }
                pos += 1;
            }
            _ => break,
        }
    }
    let digits_end = pos;
    if digits_end == digits_start {
        return None;
    }
    Some(ScanResult {
        ws_len,
        sign_off,
        negative,
        prefix_len,
        digits_start,
        digits_end,
        effective_base,
        magnitude,
        overflow,
        consumed: digits_end,
    })
}

const SCAN_LIMIT: usize = 4096;
const CSTR_LIMIT: usize = 65536;

type IntrinsicResult = Result<Event, VmError>;

impl Vm {
    pub(super) fn run_intrinsic(&mut self, inst: &Instruction, name: Intrinsic) -> IntrinsicResult {
        let addr = inst.addr;
        let args = [
            self.regs[0], self.regs[1], self.regs[2], self.regs[3], self.regs[4], self.regs[5],
        ];
        if matches!(name, Intrinsic::Read | Intrinsic::ReadNumScanfQuirk) {
            return self.intr_read(addr, args, name == Intrinsic::ReadNumScanfQuirk);
        }
        let mut reads: Vec<(u64, Vec<u8>)> = Vec::new();
        let mut writes: Vec<(u64, usize)> = Vec::new();
        let mut alloc: Option<AllocInfo> = None;

        macro_rules! trap {
            ($e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err(MemFault::Trap(kind)) => return Ok(self.raise(kind, addr)),
                    Err(MemFault::Budget) => return Err(VmError::BudgetExceeded),
                }
            };
        }

        let ret: u64 = match name {
            Intrinsic::Malloc => {
                let size = args[0];
                let base = self.heap_alloc(size);
                alloc = Some(AllocInfo::Malloc { base, size });
                base
            }
            Intrinsic::Calloc => {
                let (count, elem) = (args[0], args[1]);
                match count.checked_mul(elem) {
                    None => 0,
                    Some(total) => {
                        let base = self.heap_alloc(total);
                        trap!(self.fill_region(base, 0, total as usize));
                        writes.push((base, total as usize));
                        alloc = Some(AllocInfo::Calloc { base, count, elem, size: total });
                        base
                    }
                }
            }
            Intrinsic::Realloc => {
                let (old, size) = (args[0], args[1]);
                if old == 0 {
                    let base = self.heap_alloc(size);
                    alloc = Some(AllocInfo::Malloc { base, size });
                    base
                } else if size == 0 {
                    let (known, double) = self.heap_free(old);
                    alloc = Some(AllocInfo::Free { base: old, known, double });
                    0
                } else {
                    let old_size = self.heap_block_size(old).unwrap_or(0);
                    let base = self.heap_alloc(size);
                    let copy = old_size.min(size) as usize;
                    let bytes = trap!(self.copy_region(base, old, copy));
                    reads.push((old, bytes));
                    writes.push((base, copy));
                    self.heap_free(old);
                    alloc = Some(AllocInfo::Realloc {
                        old_base: old,
                        old_size,
                        new_base: base,
                        new_size: size,
                    });
                    base
                }
            }
            Intrinsic::Free => {
                if args[0] == 0 {
                    0
                } else {
                    let (known, double) = self.heap_free(args[0]);
                    alloc = Some(AllocInfo::Free { base: args[0], known, double });
                    0
                }
            }
            Intrinsic::Memcpy | Intrinsic::Memmove => {
                let (dst, src, n) = (args[0], args[1], args[2] as usize);
                let bytes = trap!(self.copy_region(dst, src, n));
                reads.push((src, bytes));
                writes.push((dst, n));
                dst
            }
            Intrinsic::Memset => {
                let (dst, c, n) = (args[0], args[1] as u8, args[2] as usize);
                trap!(self.fill_region(dst, c, n));
                writes.push((dst, n));
                dst
            }
            Intrinsic::Strcpy => {
                let (dst, src) = (args[0], args[1]);
                let s = trap!(self.read_cstr(src));
                reads.push((src, s.clone()));
                trap!(self.write_bytes(dst, &s, false));
                writes.push((dst, s.len()));
                dst
            }
            Intrinsic::Strncpy => {
                let (dst, src, n) = (args[0], args[1], args[2] as usize);
                let mut out = Vec::with_capacity(n);
                let mut scanned = Vec::new();
                for i in 0..n {
                    let b = trap!(self.read_bytes(src + i as u64, 1, false))[0];
                    scanned.push(b);
                    out.push(b);
                    if b == 0 {
                        break;
                    }
                }
                while out.len() < n {
                    out.push(0);
                }
                reads.push((src, scanned));
                trap!(self.write_bytes(dst, &out, false));
                writes.push((dst, n));
                dst
            }
            Intrinsic::Strlen => {
                let s = trap!(self.read_cstr(args[0]));
                reads.push((args[0], s.clone()));
                (s.len() - 1) as u64
            }
            Intrinsic::Strchr => {
                let (ptr, ch) = (args[0], args[1] as u8);
                let mut scanned = Vec::new();
                let mut found: u64 = 0;
                for i in 0..CSTR_LIMIT {
                    let b = trap!(self.read_bytes(ptr + i as u64, 1, false))[0];
                    scanned.push(b);
                    if b == ch {
                        found = ptr + i as u64;
                        break;
                    }
                    if b == 0 {
                        break;
                    }
                }
                reads.push((ptr, scanned));
                found
            }
            Intrinsic::Memchr => {
                let (ptr, ch, n) = (args[0], args[1] as u8, args[2] as usize);
                let bytes = trap!(self.read_bytes(ptr, n, false));
                let found = bytes
                    .iter()
                    .position(|b| *b == ch)
                    .map(|i| ptr + i as u64)
                    .unwrap_or(0);
                reads.push((ptr, bytes));
                found
            }
            Intrinsic::Strcmp | Intrinsic::Strncmp => {
                let (lhs, rhs) = (args[0], args[1]);
                let bound = if name == Intrinsic::Strncmp {
                    args[2] as usize
                } else {
                    CSTR_LIMIT
                };
                let mut lbytes = Vec::new();
                let mut rbytes = Vec::new();
                let mut result: i64 = 0;
                for i in 0..bound {
                    let bl = trap!(self.read_bytes(lhs + i as u64, 1, false))[0];
                    let br = trap!(self.read_bytes(rhs + i as u64, 1, false))[0];
                    lbytes.push(bl);
                    rbytes.push(br);
                    if bl != br || bl == 0 {
                        result = bl as i64 - br as i64;
                        break;
                    }
                }
                reads.push((lhs, lbytes));
                reads.push((rhs, rbytes));
                result as u64
            }
            Intrinsic::Memcmp => {
                let (lhs, rhs, n) = (args[0], args[1], args[2] as usize);
                let mut lb = Vec::new();
                let mut rb = Vec::new();
                let mut result: i64 = 0;
                for i in 0..n {
                    let bl = trap!(self.read_bytes(lhs + i as u64, 1, false))[0];
                    let br = trap!(self.read_bytes(rhs + i as u64, 1, false))[0];
                    if lb.len() < 1 << 20 {
                        lb.push(bl);
                        rb.push(br);
                    }
                    if bl != br {
                        result = bl as i64 - br as i64;
                        break;
                    }
                    if i % 64 == 63 {
                        trap!(self.budget_tick(16));
                    }
                }
                reads.push((lhs, lb));
                reads.push((rhs, rb));
                result as u64
            }
            Intrinsic::Strstr => {
                let hay = trap!(self.read_cstr(args[0]));
                let needle = trap!(self.read_cstr(args[1]));
                reads.push((args[0], hay.clone()));
                reads.push((args[1], needle.clone()));
                let h = &hay[..hay.len() - 1];
                let n = &needle[..needle.len() - 1];
                if n.is_empty() {
                    args[0]
                } else if n.len() > h.len() {
                    0
                } else {
                    (0..=h.len() - n.len())
                        .find(|i| &h[*i..*i + n.len()] == n)
                        .map(|i| args[0] + i as u64)
                        .unwrap_or(0)
                }
            }
            Intrinsic::Strtol | Intrinsic::Strtoul | Intrinsic::Strtoll | Intrinsic::Strtoull
            | Intrinsic::Atoi => {
                let str_ptr = args[0];
                let (endp, base) = if name == Intrinsic::Atoi {
                    (0u64, 10u32)
                } else {
                    (args[1], args[2] as u32)
                };
                let scanned = trap!(self.read_scan_window(str_ptr, base));
                let scan = scan_int(&scanned, base);
                let consumed = scan.as_ref().map(|s| s.consumed).unwrap_or(0);
                reads.push((str_ptr, scanned));
                if endp != 0 {
                    trap!(self.write_scalar(endp, Width::W64, str_ptr + consumed as u64));
                    writes.push((endp, 8));
                }
                match (&scan, name) {
                    (None, _) => 0,
                    (Some(s), Intrinsic::Strtol | Intrinsic::Strtoll) => s.signed_value(64),
                    (Some(s), Intrinsic::Strtoul | Intrinsic::Strtoull) => s.unsigned_value(64),
                    (Some(s), Intrinsic::Atoi) => s.signed_value(32) as i32 as i64 as u64,
                    _ => unreachable!(),
                }
            }
            Intrinsic::Print => 0,
            Intrinsic::Read | Intrinsic::ReadNumScanfQuirk => unreachable!(),
        };

        self.regs[0] = ret;
        Ok(Event::Intrinsic(IntrinsicEvent {
            addr,
            name,
            args,
            ret,
            reads,
            writes,
            alloc,
        }))
    }

    fn intr_read(&mut self, addr: u64, args: [u64; 6], quirk: bool) -> IntrinsicResult {
        let buf = args[0];
        let requested = args[1];
        let remaining = self.input.len() - self.input_cursor;
        let n = (requested as usize).min(remaining);
        let stream_start = self.input_cursor;
        let bytes = self.input[stream_start..stream_start + n].to_vec();
        match self.write_bytes(buf, &bytes, false) {
            Ok(()) => {}
            Err(MemFault::Trap(kind)) => return Ok(self.raise(kind, addr)),
            Err(MemFault::Budget) => return Err(VmError::BudgetExceeded),
        }
        self.input_cursor += n;
        let mut concrete_mask = vec![false; n];
        if quirk {
            if let Some(i) = bytes.iter().position(|b| *b == b'0') {
                concrete_mask[i] = true;
            }
        }
        self.regs[0] = n as u64;
        Ok(Event::InputRead(InputReadEvent {
            addr,
            buf,
            requested,
            bytes,
            stream_start,
            concrete_mask,
        }))
    }

    /// Reads memory the way strtol scans: byte by byte, stopping right after
    /// the first byte that cannot extend the parse.
    fn read_scan_window(&mut self, ptr: u64, base: u32) -> Result<Vec<u8>, MemFault> {
        let mut out = Vec::new();
        loop {
            if out.len() >= SCAN_LIMIT {
                return Ok(out);
            }
            let b = self.read_bytes(ptr + out.len() as u64, 1, false)?[0];
            out.push(b);
            if is_scan_whitespace(b) && count_ws(&out) == out.len() {
                continue; // still inside the leading whitespace run
            }
            match scan_int(&out, base) {
                // the whole buffer so far is consumable; more may follow
                Some(s) if s.consumed == out.len() => continue,
                // "0x" may still become a hex prefix once a digit arrives
                Some(s)
                    if (b == b'x' || b == b'X')
                        && (base == 16 || base == 0)
                        && s.consumed + 1 == out.len()
                        && s.digit_count() == 1
                        && s.magnitude == 0 =>
                {
                    continue;
                }
                Some(_) => return Ok(out),
                None => {
                    if (b == b'+' || b == b'-') && out.len() == count_ws(&out) + 1 {
                        continue; // sign scanned, digits may follow
                    }
                    return Ok(out);
                }
            }
        }
    }
}

fn count_ws(bytes: &[u8]) -> usize {
    bytes.iter().take_while(|b| is_scan_whitespace(**b)).count()
}

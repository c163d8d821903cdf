//! The register machine: fetch/execute loop, sparse memory with the fixed
//! memory map, heap bump allocator with guard gaps, and the checked-mode
//! access rules that play the role of a sanitizer build.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::*;

struct HeapBlock {
    size: u64,
    live: bool,
}

/// Why a memory helper stopped: an access fault or the instruction budget.
/// Intrinsic byte traffic charges the budget so attacker-sized copy lengths
/// terminate instead of spinning.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub(super) enum MemFault {
    Trap(TrapKind),
    Budget,
}

impl From<TrapKind> for MemFault {
    fn from(kind: TrapKind) -> MemFault {
        MemFault::Trap(kind)
    }
}

pub struct Vm {
    pub program: Arc<Program>,
    pub regs: [u64; 16],
    pub flags: Flags,
    mem: HashMap<u64, u8>,
    pc: usize,
    pub input: Vec<u8>,
    pub input_cursor: usize,
    pub mode: Mode,
    pub watchpoints: Vec<Watchpoint>,
    heap_next: u64,
    heap_blocks: BTreeMap<u64, HeapBlock>,
    /// Live return-address slot addresses, innermost last.
    ra_slots: Vec<u64>,
    pub executed: u64,
    pub branch_trace: Vec<BranchRecord>,
    halted: Option<u64>,
    trap: Option<(TrapKind, u64)>,
    prev_inst: Option<(Mnemonic, Width, Option<u8>)>,
}

impl Vm {
    pub fn new(program: Arc<Program>, input: Vec<u8>, mode: Mode, watchpoints: Vec<Watchpoint>) -> Vm {
        let mut mem = HashMap::new();
        for (base, bytes) in &program.data_init {
            for (i, b) in bytes.iter().enumerate() {
                mem.insert(base + i as u64, *b);
            }
        }
        let mut regs = [0u64; 16];
        regs[SP as usize] = STACK_TOP;
        let pc = program.addr_index[&program.entry];
        Vm {
            program,
            regs,
            flags: Flags::default(),
            mem,
            pc,
            input,
            input_cursor: 0,
            mode,
            watchpoints,
            heap_next: HEAP_BASE,
            heap_blocks: BTreeMap::new(),
            ra_slots: Vec::new(),
            executed: 0,
            branch_trace: Vec::new(),
            halted: None,
            trap: None,
            prev_inst: None,
        }
    }

    pub fn done(&self) -> bool {
        self.halted.is_some() || self.trap.is_some()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        if let Some((kind, addr)) = self.trap {
            return Some(Outcome::Trap { kind, addr });
        }
        self.halted.map(|code| Outcome::Exit { code })
    }

    pub fn run_result(&self) -> Option<RunResult> {
        self.outcome().map(|outcome| RunResult {
            outcome,
            executed: self.executed,
            branch_trace: self.branch_trace.clone(),
        })
    }

    pub fn current_addr(&self) -> u64 {
        self.program
            .instructions
            .get(self.pc)
            .map(|i| i.addr)
            .unwrap_or(0)
    }

    pub fn sp(&self) -> u64 {
        self.regs[SP as usize]
    }

    pub fn ra_slots(&self) -> &[u64] {
        &self.ra_slots
    }

    pub fn heap_block_size(&self, base: u64) -> Option<u64> {
        self.heap_blocks
            .get(&base)
            .filter(|b| b.live)
            .map(|b| b.size)
    }

    pub fn heap_lookup(&self, addr: u64) -> Option<(u64, u64)> {
        let (base, block) = self.heap_blocks.range(..=addr).next_back()?;
        if block.live && addr >= *base && addr < base + block.size {
            Some((*base, block.size))
        } else {
            None
        }
    }

    pub(super) fn heap_alloc(&mut self, size: u64) -> u64 {
        let base = (self.heap_next + 15) & !15;
        self.heap_next = base + size + 16;
        self.heap_blocks.insert(base, HeapBlock { size, live: true });
        base
    }

    /// Returns (known base, was double free).
    pub(super) fn heap_free(&mut self, base: u64) -> (bool, bool) {
        match self.heap_blocks.get_mut(&base) {
            Some(block) => {
                let double = !block.live;
                block.live = false;
                (true, double)
            }
            None => (false, false),
        }
    }

    pub(super) fn raise(&mut self, kind: TrapKind, addr: u64) -> Event {
        self.trap = Some((kind, addr));
        Event::Trap { kind, addr }
    }

    fn classify_access(&self, addr: u64, write: bool, internal: bool) -> Option<TrapKind> {
        if addr < NULL_PAGE_END {
            return Some(TrapKind::NullDeref);
        }
        if self.mode == Mode::Plain || internal {
            return None;
        }
        if (STACK_BASE..STACK_TOP).contains(&addr) {
            if write && self.ra_slots.iter().any(|s| addr >= *s && addr < *s + 8) {
                return Some(TrapKind::StackSmash);
            }
            let low = self.sp();
            let high = self.ra_slots.last().copied().unwrap_or(STACK_TOP);
            if addr >= low && addr < high {
                return None;
            }
            return Some(TrapKind::OutOfBounds);
        }
        if addr >= HEAP_BASE {
            return if self.heap_lookup(addr).is_some() {
                None
            } else {
                Some(TrapKind::OutOfBounds)
            };
        }
        if addr < STACK_BASE {
            // globals region
            let inside = self
                .program
                .global_ranges
                .iter()
                .any(|(base, end)| addr >= *base && addr < *end);
            return if inside { None } else { Some(TrapKind::OutOfBounds) };
        }
        Some(TrapKind::OutOfBounds)
    }

    /// Budget charge for long intrinsic loops that do per-byte accesses.
    pub(super) fn budget_tick(&mut self, units: u64) -> Result<(), MemFault> {
        self.executed += units;
        if self.executed >= INSTRUCTION_BUDGET {
            Err(MemFault::Budget)
        } else {
            Ok(())
        }
    }

    fn charge(&mut self, len: usize) -> Result<(), MemFault> {
        self.executed += 1 + len as u64 / 8;
        if self.executed >= INSTRUCTION_BUDGET {
            Err(MemFault::Budget)
        } else {
            Ok(())
        }
    }

    pub(super) fn read_bytes(&mut self, addr: u64, len: usize, internal: bool) -> Result<Vec<u8>, MemFault> {
        if len > 8 {
            self.charge(len)?;
        }
        let mut out = Vec::with_capacity(len.min(4096));
        for i in 0..len {
            let a = addr.wrapping_add(i as u64);
            if let Some(kind) = self.classify_access(a, false, internal) {
                return Err(MemFault::Trap(kind));
            }
            out.push(self.mem.get(&a).copied().unwrap_or(0));
        }
        Ok(out)
    }

    pub(super) fn write_bytes(&mut self, addr: u64, bytes: &[u8], internal: bool) -> Result<(), MemFault> {
        if bytes.len() > 8 {
            self.charge(bytes.len())?;
        }
        for (i, b) in bytes.iter().enumerate() {
            let a = addr.wrapping_add(i as u64);
            if let Some(kind) = self.classify_access(a, true, internal) {
                return Err(MemFault::Trap(kind));
            }
            self.mem.insert(a, *b);
        }
        Ok(())
    }

    pub fn peek_bytes(&self, addr: u64, len: usize) -> Vec<u8> {
        (0..len)
            .map(|i| self.mem.get(&addr.wrapping_add(i as u64)).copied().unwrap_or(0))
            .collect()
    }

    pub(super) fn read_scalar(&mut self, addr: u64, w: Width) -> Result<u64, MemFault> {
        let bytes = self.read_bytes(addr, w.bytes(), false)?;
        let mut v: u64 = 0;
        for (i, b) in bytes.iter().enumerate() {
            v |= (*b as u64) << (8 * i);
        }
        Ok(v)
    }

    pub(super) fn write_scalar(&mut self, addr: u64, w: Width, value: u64) -> Result<(), MemFault> {
        let bytes = value.to_le_bytes();
        self.write_bytes(addr, &bytes[..w.bytes()], false)
    }

    pub(super) fn read_cstr(&mut self, addr: u64) -> Result<Vec<u8>, MemFault> {
        let mut out = Vec::new();
        for i in 0..65536u64 {
            let b = self.read_bytes(addr + i, 1, false)?[0];
            out.push(b);
            if b == 0 {
                break;
            }
        }
        Ok(out)
    }

    /// Overlap-safe chunked copy that traps on the first violating byte and
    /// charges the budget as it goes. Returns the source bytes it copied
    /// (capped at 1 MiB for event recording).
    pub(super) fn copy_region(&mut self, dst: u64, src: u64, len: usize) -> Result<Vec<u8>, MemFault> {
        const CHUNK: usize = 4096;
        const RECORD_CAP: usize = 1 << 20;
        let backward = dst > src && (dst - src) < len as u64;
        let n_chunks = len.div_ceil(CHUNK);
        let mut recorded: Vec<(usize, Vec<u8>)> = Vec::new();
        for c in 0..n_chunks {
            let idx = if backward { n_chunks - 1 - c } else { c };
            let off = idx * CHUNK;
            let n = CHUNK.min(len - off);
            let bytes = self.read_bytes(src.wrapping_add(off as u64), n, false)?;
            self.write_bytes(dst.wrapping_add(off as u64), &bytes, false)?;
            if off < RECORD_CAP {
                recorded.push((off, bytes));
            }
        }
        recorded.sort_by_key(|(off, _)| *off);
        let mut out = Vec::new();
        for (_, bytes) in recorded {
            out.extend(bytes);
        }
        Ok(out)
    }

    /// Chunked fill with trap-on-first-violation and budget charging.
    pub(super) fn fill_region(&mut self, dst: u64, value: u8, len: usize) -> Result<(), MemFault> {
        const CHUNK: usize = 4096;
        let mut off = 0usize;
        while off < len {
            let n = CHUNK.min(len - off);
            self.write_bytes(dst.wrapping_add(off as u64), &vec![value; n], false)?;
            off += n;
        }
        Ok(())
    }

    pub fn effective_addr(&self, m: &MemRef) -> u64 {
        let mut addr = m.disp;
        if let Some(r) = m.base {
            addr = addr.wrapping_add(self.regs[r as usize]);
        }
        if let Some((r, scale)) = m.index {
            addr = addr.wrapping_add(self.regs[r as usize].wrapping_mul(scale as u64));
        }
        addr
    }

    fn operand_value(&mut self, op: &Operand, w: Width) -> Result<u64, MemFault> {
        Ok(match op {
            Operand::Reg(r) => self.regs[*r as usize] & w.mask(),
            Operand::Imm(v) => *v & w.mask(),
            Operand::Mem(m) => {
                let ea = self.effective_addr(m);
                self.read_scalar(ea, w)?
            }
        })
    }

    fn write_reg(&mut self, r: u8, w: Width, value: u64) {
        // width-W writes zero-extend into the full register
        self.regs[r as usize] = value & w.mask();
    }

    fn jump_to(&mut self, addr: u64) -> Result<(), VmError> {
        match self.program.addr_index.get(&addr) {
            Some(idx) => {
                self.pc = *idx;
                Ok(())
            }
            None => Err(VmError::InvalidOpcode(addr)),
        }
    }

    fn pop_dead_slots(&mut self) {
        let sp = self.sp();
        self.ra_slots.retain(|s| *s >= sp);
    }

    fn watch_hit(&self, inst: &Instruction, a: u64, count: u64, flags: Flags) -> bool {
        if self.mode != Mode::Checked {
            return false;
        }
        for wp in &self.watchpoints {
            if wp.addr != inst.addr {
                continue;
            }
            let hold = match wp.flag {
                WatchFlag::Cf => flags.cf,
                WatchFlag::Of => flags.of,
                WatchFlag::ShiftU => {
                    matches!(inst.mnemonic, Mnemonic::Shl)
                        && shift_unsigned_overflow(
                            a,
                            (count & if inst.width == Width::W64 { 63 } else { 31 }) as u32,
                            inst.width,
                        )
                }
                WatchFlag::ShiftS => {
                    matches!(inst.mnemonic, Mnemonic::Shl)
                        && shift_signed_overflow(
                            a,
                            (count & if inst.width == Width::W64 { 63 } else { 31 }) as u32,
                            inst.width,
                        )
                }
                WatchFlag::LastSbbOf => {
                    let cur_dst = match &inst.dst {
                        Some(Operand::Reg(r)) => Some(*r),
                        _ => None,
                    };
                    flags.of
                        && match (inst.mnemonic, self.prev_inst) {
                            (Mnemonic::Adc, Some((Mnemonic::Add, pw, pdst)))
                            | (Mnemonic::Sbb, Some((Mnemonic::Sub, pw, pdst))) => {
                                pw == inst.width && pdst != cur_dst
                            }
                            _ => false,
                        }
                }
            };
            if hold {
                return true;
            }
        }
        false
    }

    /// Executes one instruction and reports what happened.
    pub fn step(&mut self) -> Result<Event, VmError> {
        debug_assert!(!self.done(), "step on finished VM");
        if self.executed >= INSTRUCTION_BUDGET {
            return Err(VmError::BudgetExceeded);
        }
        let inst = self
            .program
            .instructions
            .get(self.pc)
            .cloned()
            .ok_or(VmError::InvalidOpcode(TEXT_BASE + 4 * self.pc as u64))?;
        self.executed += 1;
        let addr = inst.addr;
        let index = self.pc;
        self.pc += 1; // sequential default; jumps override
        let w = inst.width;

        macro_rules! trap {
            ($e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err(MemFault::Trap(kind)) => return Ok(self.raise(kind, addr)),
                    Err(MemFault::Budget) => return Err(VmError::BudgetExceeded),
                }
            };
        }

        let mut info = ExecInfo {
            addr,
            index,
            dst_pre: 0,
            src_val: 0,
            carry_in: self.flags.cf,
            eff_addr: None,
            result: None,
            flags_after: self.flags,
            sp_after: self.sp(),
            stack_slot: None,
            branch_target: None,
        };

        let set_prev = |vm: &mut Vm, inst: &Instruction| {
            let dst_reg = match &inst.dst {
                Some(Operand::Reg(r)) => Some(*r),
                _ => None,
            };
            vm.prev_inst = Some((inst.mnemonic, inst.width, dst_reg));
        };

        match inst.mnemonic {
            Mnemonic::Mov => {
                let src = inst.src.as_ref().unwrap();
                let val = trap!(self.operand_value(src, w));
                let dst = reg_of(&inst.dst);
                info.dst_pre = self.regs[dst as usize] & w.mask();
                info.src_val = val;
                info.result = Some(val);
                self.write_reg(dst, w, val);
            }
            Mnemonic::Load => {
                let m = mem_of(&inst.src);
                let ea = self.effective_addr(&m);
                info.eff_addr = Some(ea);
                let val = trap!(self.read_scalar(ea, w));
                info.src_val = val;
                info.result = Some(val);
                self.write_reg(reg_of(&inst.dst), w, val);
            }
            Mnemonic::Store => {
                let m = mem_of(&inst.dst);
                let ea = self.effective_addr(&m);
                info.eff_addr = Some(ea);
                let val = trap!(self.operand_value(inst.src.as_ref().unwrap(), w));
                info.src_val = val;
                info.result = Some(val);
                trap!(self.write_scalar(ea, w, val));
            }
            Mnemonic::Lea => {
                let m = mem_of(&inst.src);
                let ea = self.effective_addr(&m);
                info.eff_addr = Some(ea);
                info.result = Some(ea);
                self.write_reg(reg_of(&inst.dst), Width::W64, ea);
            }
            Mnemonic::Div => {
                let dst = reg_of(&inst.dst);
                let a = self.regs[dst as usize] & w.mask();
                let b = trap!(self.operand_value(inst.src.as_ref().unwrap(), w));
                info.dst_pre = a;
                info.src_val = b;
                if b == 0 {
                    return Ok(self.raise(TrapKind::DivByZero, addr));
                }
                let res = (a / b) & w.mask();
                info.result = Some(res);
                self.write_reg(dst, w, res);
                set_prev(self, &inst);
            }
            Mnemonic::Not => {
                let dst = reg_of(&inst.dst);
                let a = self.regs[dst as usize] & w.mask();
                info.dst_pre = a;
                let res = !a & w.mask();
                info.result = Some(res);
                self.write_reg(dst, w, res);
                set_prev(self, &inst);
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
            | Mnemonic::Neg => {
                let dst = reg_of(&inst.dst);
                let a = self.regs[dst as usize] & w.mask();
                let b = match inst.mnemonic {
                    Mnemonic::Neg => 0,
                    _ => trap!(self.operand_value(inst.src.as_ref().unwrap(), w)),
                };
                info.dst_pre = a;
                info.src_val = b;
                let (res, flags) = flag_semantics(inst.mnemonic, w, a, b, self.flags);
                self.flags = flags;
                info.result = Some(res);
                info.flags_after = flags;
                if !matches!(inst.mnemonic, Mnemonic::Cmp | Mnemonic::Test) {
                    self.write_reg(dst, w, res);
                }
                if self.watch_hit(&inst, a, b, flags) {
                    set_prev(self, &inst);
                    return Ok(self.raise(TrapKind::OverflowWatch, addr));
                }
                set_prev(self, &inst);
            }
            Mnemonic::Push => {
                let val = trap!(self.operand_value(inst.dst.as_ref().unwrap(), Width::W64));
                let sp = self.sp().wrapping_sub(8);
                self.regs[SP as usize] = sp;
                trap!(self.write_scalar(sp, Width::W64, val));
                info.src_val = val;
                info.stack_slot = Some(sp);
            }
            Mnemonic::Pop => {
                let sp = self.sp();
                let val = trap!(self.read_scalar(sp, Width::W64));
                self.regs[SP as usize] = sp.wrapping_add(8);
                self.write_reg(reg_of(&inst.dst), Width::W64, val);
                info.result = Some(val);
                info.stack_slot = Some(sp);
            }
            Mnemonic::Call => {
                let target = inst.target.unwrap();
                let ret_addr = TEXT_BASE + 4 * self.pc as u64;
                let sp = self.sp().wrapping_sub(8);
                self.regs[SP as usize] = sp;
                match self.write_bytes(sp, &ret_addr.to_le_bytes(), true) {
                    Ok(()) => {}
                    Err(MemFault::Trap(kind)) => return Ok(self.raise(kind, addr)),
                    Err(MemFault::Budget) => return Err(VmError::BudgetExceeded),
                }
                self.pop_dead_slots();
                self.ra_slots.push(sp);
                info.stack_slot = Some(sp);
                info.branch_target = Some(target);
                self.jump_to(target)?;
            }
            Mnemonic::Ret => {
                let sp = self.sp();
                let bytes = match self.read_bytes(sp, 8, true) {
                    Ok(b) => b,
                    Err(MemFault::Trap(kind)) => return Ok(self.raise(kind, addr)),
                    Err(MemFault::Budget) => return Err(VmError::BudgetExceeded),
                };
                let ret_addr = u64::from_le_bytes(bytes.try_into().unwrap());
                self.regs[SP as usize] = sp.wrapping_add(8);
                self.pop_dead_slots();
                info.stack_slot = Some(sp);
                info.branch_target = Some(ret_addr);
                self.jump_to(ret_addr)?;
            }
            Mnemonic::Jmp => {
                let target = inst.target.unwrap();
                info.branch_target = Some(target);
                self.jump_to(target)?;
            }
            Mnemonic::Jcc(cond) => {
                let target = inst.target.unwrap();
                let taken = cond.holds(self.flags);
                self.branch_trace.push(BranchRecord { addr, taken });
                if taken {
                    self.jump_to(target)?;
                }
                return Ok(Event::Branch { addr, cond, taken, target });
            }
            Mnemonic::Icall => {
                let name = inst.intrinsic.unwrap();
                return self.run_intrinsic(&inst, name);
            }
            Mnemonic::Halt => {
                let code = self.regs[0];
                self.halted = Some(code);
                return Ok(Event::Halt { code });
            }
        }
        info.sp_after = self.sp();
        Ok(Event::Exec(info))
    }

    /// Runs to completion, producing the run result.
    pub fn run_to_end(&mut self) -> Result<RunResult, VmError> {
        while !self.done() {
            self.step()?;
        }
        Ok(self.run_result().unwrap())
    }
}

fn reg_of(op: &Option<Operand>) -> u8 {
    match op {
        Some(Operand::Reg(r)) => *r,
        other => panic!("expected register operand, got {other:?}"),
    }
}

fn mem_of(op: &Option<Operand>) -> MemRef {
    match op {
        Some(Operand::Mem(m)) => m.clone(),
        other => panic!("expected memory operand, got {other:?}"),
    }
}

/// Assembles and runs in one call.
pub fn run_program(
    program: &Arc<Program>,
    input: &[u8],
    mode: Mode,
    watchpoints: &[Watchpoint],
) -> Result<RunResult, VmError> {
    let mut vm = Vm::new(program.clone(), input.to_vec(), mode, watchpoints.to_vec());
    vm.run_to_end()
}

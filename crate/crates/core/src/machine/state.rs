use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::isa::{Gpr, SimdValue, REGISTER_COUNT};

use super::MachineError;

/// Top of the downward-growing stack region every process starts with.
pub const STACK_TOP: u64 = 0x7fff_f000;

/// `rip` value of a process that has run off the end of its program.
pub const HALTED: usize = usize::MAX;

pub type SimdFile = [SimdValue; REGISTER_COUNT as usize];

/// One timed reload, as the attacker records it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub address: u64,
    pub cycles: u32,
}

/// Bounded stack of 64-bit slots addressed through `rsp`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stack {
    slots: Vec<Option<u64>>,
}

impl Stack {
    pub fn new(capacity: usize) -> Stack {
        Stack {
            slots: vec![None; capacity],
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Slot index for the value at `rsp`, or `None` when `rsp` is at or above
    /// the top, misaligned, or past the bottom.
    fn slot(&self, rsp: u64) -> Option<usize> {
        let depth = STACK_TOP.checked_sub(rsp)?;
        if depth == 0 || depth % 8 != 0 {
            return None;
        }
        let index = (depth / 8 - 1) as usize;
        (index < self.slots.len()).then_some(index)
    }

    fn push(&mut self, rsp: &mut u64, value: u64) -> Result<(), MachineError> {
        let next = rsp.wrapping_sub(8);
        let index = self.slot(next).ok_or(MachineError::StackOverflow)?;
        self.slots[index] = Some(value);
        *rsp = next;
        Ok(())
    }

    fn pop(&mut self, rsp: &mut u64) -> Result<u64, MachineError> {
        let index = self.slot(*rsp).ok_or(MachineError::StackUnderflow)?;
        let value = self.slots[index].ok_or(MachineError::StackUnderflow)?;
        *rsp += 8;
        Ok(value)
    }

    fn write_top(&mut self, rsp: u64, value: u64) -> Result<(), MachineError> {
        let index = self.slot(rsp).ok_or(MachineError::StackUnderflow)?;
        self.slots[index] = Some(value);
        Ok(())
    }
}

/// Per-process architectural state other than the SIMD register file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreState {
    pub gprs: [u64; REGISTER_COUNT as usize],
    pub rip: usize,
    pub stack: Stack,
    pub memory: BTreeMap<u64, u8>,
    pub timings: Vec<Timing>,
}

impl CoreState {
    pub fn new(stack_slots: usize) -> CoreState {
        let mut gprs = [0; REGISTER_COUNT as usize];
        gprs[Gpr::RSP.index()] = STACK_TOP;
        CoreState {
            gprs,
            rip: 0,
            stack: Stack::new(stack_slots),
            memory: BTreeMap::new(),
            timings: Vec::new(),
        }
    }

    pub fn gpr(&self, reg: Gpr) -> u64 {
        self.gprs[reg.index()]
    }

    pub fn set_gpr(&mut self, reg: Gpr, value: u64) {
        self.gprs[reg.index()] = value;
    }

    /// Empties the stack and rewinds `rip`, keeping registers and memory.
    pub fn restart(&mut self, entry: usize) {
        self.rip = entry;
        self.stack = Stack::new(self.stack.capacity());
        self.gprs[Gpr::RSP.index()] = STACK_TOP;
    }

    pub fn push(&mut self, value: u64) -> Result<(), MachineError> {
        let mut rsp = self.gprs[Gpr::RSP.index()];
        self.stack.push(&mut rsp, value)?;
        self.gprs[Gpr::RSP.index()] = rsp;
        Ok(())
    }

    pub fn pop(&mut self) -> Result<u64, MachineError> {
        let mut rsp = self.gprs[Gpr::RSP.index()];
        let value = self.stack.pop(&mut rsp)?;
        self.gprs[Gpr::RSP.index()] = rsp;
        Ok(value)
    }

    /// `mov [rsp], value`
    pub fn write_stack_top(&mut self, value: u64) -> Result<(), MachineError> {
        self.stack.write_top(self.gprs[Gpr::RSP.index()], value)
    }

    pub fn write_u32(&mut self, address: u64, value: u32) {
        for (i, byte) in value.to_le_bytes().into_iter().enumerate() {
            self.memory.insert(address.wrapping_add(i as u64), byte);
        }
    }

    /// Unwritten bytes read as zero.
    pub fn read_u64(&self, address: u64) -> u64 {
        let mut bytes = [0u8; 8];
        for (i, byte) in bytes.iter_mut().enumerate() {
            *byte = self
                .memory
                .get(&address.wrapping_add(i as u64))
                .copied()
                .unwrap_or(0);
        }
        u64::from_le_bytes(bytes)
    }
}

/// Everything a TSX checkpoint captures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchState {
    pub core: CoreState,
    /// The physical SIMD register file, whoever it belongs to.
    pub simd: SimdFile,
}

impl ArchState {
    pub fn new(stack_slots: usize) -> ArchState {
        ArchState {
            core: CoreState::new(stack_slots),
            simd: [SimdValue::ZERO; REGISTER_COUNT as usize],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlState {
    /// FPU disabled while set.
    pub cr0_ts: bool,
    /// Whether transient reads of a disabled FPU see the stale physical
    /// registers (`true`) or zeros (`false`).
    pub cpu_vulnerable: bool,
}

impl Default for ControlState {
    fn default() -> Self {
        ControlState {
            cr0_ts: false,
            cpu_vulnerable: true,
        }
    }
}

/// Return stack buffer. Pushing at capacity drops the oldest entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rsb {
    entries: VecDeque<usize>,
    capacity: usize,
}

impl Rsb {
    pub fn new(capacity: usize) -> Rsb {
        Rsb {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, target: usize) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(target);
    }

    pub fn pop(&mut self) -> Option<usize> {
        self.entries.pop_back()
    }

    pub fn depth(&self) -> usize {
        self.entries.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// An open RTM transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub abort_target: usize,
    pub checkpoint: Box<ArchState>,
}

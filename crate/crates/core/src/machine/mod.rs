//! Architectural interpreter with a transient-execution engine.
//!
//! A faulting instruction never retires. Before the fault surfaces, the
//! instructions after it run on a scratch copy of the registers; only the
//! cache keeps what they touched. Inside an RTM transaction the fault turns
//! into an abort instead, and a `ret` whose in-memory target disagrees with
//! the return stack buffer runs the predicted path transiently.

pub mod aes;
mod cost;
mod speculate;
mod state;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, CacheState, LatencyModel, DEFAULT_LINE_SIZE};
use crate::isa::{Instruction, MemOperand, Program, SimdReg, SimdValue};

pub use cost::CostModel;
pub use speculate::{SpeculationReport, SpeculationStop};
pub use state::{
    ArchState, ControlState, CoreState, Rsb, SimdFile, Stack, Timing, Transaction, HALTED,
    STACK_TOP,
};

/// Symbol the probe array base is bound to.
pub const PROBE_SYMBOL: &str = "mem";

/// Addresses that always page-fault.
pub const NULL_PAGE: Range<u64> = 0..0x1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MachineError {
    #[error("stack underflow")]
    StackUnderflow,
    #[error("stack overflow")]
    StackOverflow,
    #[error("rip {0} is outside the program")]
    InvalidRip(usize),
    #[error("nested transactions are not supported")]
    NestedTransaction,
    #[error("xend outside a transaction")]
    XendOutsideTransaction,
    #[error("ret with an empty return stack buffer")]
    RsbEmpty,
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("lane {lane} is outside a {width}-bit register")]
    InvalidLane { lane: u8, width: u32 },
    #[error("unsupported SIMD width {0} (expected 128, 256 or 512)")]
    InvalidWidth(u32),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// A fault the interpreter raised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultKind {
    /// Device not available, carrying the faulting instruction index.
    Nm { rip: usize },
    /// Page fault, carrying the faulting virtual address.
    Pf { address: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutcome {
    Retired,
    Fault(FaultKind),
    TsxAborted(usize),
    Yielded,
    Halted,
}

/// What `ret` does when the return stack buffer is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RsbEmptyPolicy {
    /// Predict the in-memory target, so nothing runs transiently.
    #[default]
    UseActual,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub simd_width: u32,
    pub speculation_window: usize,
    pub rsb_capacity: usize,
    pub rsb_empty_policy: RsbEmptyPolicy,
    pub stack_slots: usize,
    pub line_size: u64,
    pub latency: LatencyModel,
    pub costs: CostModel,
    /// Addresses that raise #PF. Page zero is always included.
    pub forbidden: Vec<Range<u64>>,
    pub symbols: BTreeMap<String, u64>,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            simd_width: 256,
            speculation_window: 64,
            rsb_capacity: 16,
            rsb_empty_policy: RsbEmptyPolicy::UseActual,
            stack_slots: 64,
            line_size: DEFAULT_LINE_SIZE,
            latency: LatencyModel::default(),
            costs: CostModel::default(),
            forbidden: vec![NULL_PAGE],
            symbols: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineStats {
    pub retired: u64,
    pub faults: u64,
    pub speculations: u64,
    pub transient_instructions: u64,
    pub rsb_mispredictions: u64,
    pub tsx_aborts: u64,
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub arch: ArchState,
    pub control: ControlState,
    pub rsb: Rsb,
    pub cache: CacheState,
    tsx: Option<Transaction>,
    cycles: u64,
    config: MachineConfig,
    stats: MachineStats,
    last_speculation: Option<SpeculationReport>,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Result<Machine, MachineError> {
        if !matches!(config.simd_width, 128 | 256 | 512) {
            return Err(MachineError::InvalidWidth(config.simd_width));
        }
        let cache = CacheState::new(config.line_size, config.latency)?;
        Ok(Machine {
            arch: ArchState::new(config.stack_slots),
            control: ControlState::default(),
            rsb: Rsb::new(config.rsb_capacity),
            cache,
            tsx: None,
            cycles: 0,
            stats: MachineStats::default(),
            last_speculation: None,
            config,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn costs(&self) -> &CostModel {
        &self.config.costs
    }

    pub fn cycles(&self) -> u64 {
        self.cycles
    }

    pub fn stats(&self) -> &MachineStats {
        &self.stats
    }

    pub fn simd_width(&self) -> u32 {
        self.config.simd_width
    }

    pub fn in_transaction(&self) -> bool {
        self.tsx.is_some()
    }

    pub fn transaction(&self) -> Option<&Transaction> {
        self.tsx.as_ref()
    }

    /// Report of the most recent transient run, if any.
    pub fn last_speculation(&self) -> Option<&SpeculationReport> {
        self.last_speculation.as_ref()
    }

    pub fn bind_symbol(&mut self, name: &str, address: u64) {
        self.config.symbols.insert(name.to_string(), address);
    }

    pub fn charge(&mut self, cycles: u64) {
        self.cycles += cycles;
    }

    pub fn is_forbidden(&self, address: u64) -> bool {
        address < 0x1000 || self.config.forbidden.iter().any(|r| r.contains(&address))
    }

    pub fn resolve(&self, mem: &MemOperand, gprs: &[u64; 16]) -> Result<u64, MachineError> {
        let base = match &mem.symbol {
            Some(name) => *self
                .config
                .symbols
                .get(name)
                .ok_or_else(|| MachineError::UnknownSymbol(name.clone()))?,
            None => 0,
        };
        let index = mem.index.map_or(0, |r| gprs[r.index()]);
        Ok(base.wrapping_add(index).wrapping_add(mem.disp as u64))
    }

    fn lane_count(&self) -> u8 {
        (self.config.simd_width / 64) as u8
    }

    fn check_lane(&self, lane: u8) -> Result<(), MachineError> {
        if lane < self.lane_count() {
            Ok(())
        } else {
            Err(MachineError::InvalidLane {
                lane,
                width: self.config.simd_width,
            })
        }
    }

    fn target(program: &Program, name: &str) -> Result<usize, MachineError> {
        program
            .label(name)
            .ok_or_else(|| MachineError::UndefinedLabel(name.to_string()))
    }

    fn issue_cost(&self, instruction: &Instruction) -> u64 {
        if instruction.touches_simd() {
            self.config.costs.simd
        } else {
            self.config.costs.plain
        }
    }

    fn access_cost(&self, address: u64) -> u64 {
        if self.cache.is_hot(address) {
            self.config.costs.cache_hit
        } else {
            self.config.costs.cache_miss
        }
    }

    /// Executes one instruction architecturally.
    pub fn step(&mut self, program: &Program) -> Result<StepOutcome, MachineError> {
        let rip = self.arch.core.rip;
        if rip == HALTED {
            return Ok(StepOutcome::Halted);
        }
        if rip == program.len() {
            self.arch.core.rip = HALTED;
            self.charge(self.config.costs.plain);
            return Ok(StepOutcome::Halted);
        }
        let instruction = program.get(rip).ok_or(MachineError::InvalidRip(rip))?;
        if instruction.touches_simd() && self.control.cr0_ts {
            return self.fault(program, instruction, FaultKind::Nm { rip });
        }

        use Instruction::*;
        let costs = self.config.costs;
        let mut next = rip + 1;
        let mut outcome = StepOutcome::Retired;
        match instruction {
            MovqGprFromSimd { dst, src, lane } => {
                self.check_lane(*lane)?;
                let value = self.arch.simd[src.index()].lane(*lane as usize);
                self.arch.core.set_gpr(*dst, value);
                self.charge(costs.simd);
            }
            MovSimdImm { dst, value } => {
                self.arch.simd[dst.index()] = value.truncate(self.config.simd_width);
                self.charge(costs.simd);
            }
            AndImm { dst, imm } => {
                self.arch.core.gprs[dst.index()] &= imm;
                self.charge(costs.plain);
            }
            ShlImm { dst, imm } => {
                self.arch.core.gprs[dst.index()] <<= imm;
                self.charge(costs.plain);
            }
            ShrImm { dst, imm } => {
                self.arch.core.gprs[dst.index()] >>= imm;
                self.charge(costs.plain);
            }
            StoreDword { mem, value } => {
                let address = self.resolve(mem, &self.arch.core.gprs)?;
                if self.is_forbidden(address) {
                    return self.fault(program, instruction, FaultKind::Pf { address });
                }
                self.charge(self.access_cost(address));
                self.arch.core.write_u32(address, *value);
                self.cache.touch(address);
            }
            StoreDwordAbs { addr, value } => {
                let address = *addr;
                if self.is_forbidden(address) {
                    return self.fault(program, instruction, FaultKind::Pf { address });
                }
                self.charge(self.access_cost(address));
                self.arch.core.write_u32(address, *value);
                self.cache.touch(address);
            }
            Load { dst, mem } => {
                let address = self.resolve(mem, &self.arch.core.gprs)?;
                if self.is_forbidden(address) {
                    return self.fault(program, instruction, FaultKind::Pf { address });
                }
                self.charge(self.access_cost(address));
                let value = self.arch.core.read_u64(address);
                self.arch.core.set_gpr(*dst, value);
                self.cache.touch(address);
            }
            Clflush { mem } => {
                let address = self.resolve(mem, &self.arch.core.gprs)?;
                if self.is_forbidden(address) {
                    return self.fault(program, instruction, FaultKind::Pf { address });
                }
                self.cache.flush(address);
                self.charge(costs.clflush);
            }
            ProbeTimed { dst, mem } => {
                let address = self.resolve(mem, &self.arch.core.gprs)?;
                if self.is_forbidden(address) {
                    return self.fault(program, instruction, FaultKind::Pf { address });
                }
                self.charge(self.access_cost(address));
                let cycles = self.cache.probe(address);
                let core = &mut self.arch.core;
                core.set_gpr(*dst, cycles as u64);
                core.timings.push(Timing { address, cycles });
            }
            Xbegin { abort } => {
                if self.tsx.is_some() {
                    return Err(MachineError::NestedTransaction);
                }
                let abort_target = Self::target(program, abort)?;
                let mut checkpoint = Box::new(self.arch.clone());
                checkpoint.core.rip = rip + 1;
                self.tsx = Some(Transaction {
                    abort_target,
                    checkpoint,
                });
                self.charge(costs.tsx_begin);
            }
            Xend => {
                if self.tsx.take().is_none() {
                    return Err(MachineError::XendOutsideTransaction);
                }
                self.charge(costs.plain);
            }
            Xabort { .. } => {
                self.charge(costs.plain);
                if let Some(target) = self.rollback() {
                    self.charge(costs.tsx_abort);
                    return Ok(StepOutcome::TsxAborted(target));
                }
            }
            Call { target } => {
                let target = Self::target(program, target)?;
                self.arch.core.push((rip + 1) as u64)?;
                self.rsb.push(rip + 1);
                next = target;
                self.charge(costs.plain);
            }
            Ret => return self.ret_with_rsb(program),
            Jmp { target } => {
                next = Self::target(program, target)?;
                self.charge(costs.plain);
            }
            Pause => self.charge(costs.plain),
            StoreRetAddr { target } => {
                let target = Self::target(program, target)?;
                self.arch.core.write_stack_top(target as u64)?;
                self.charge(costs.plain);
            }
            Pxor { dst, src } => {
                self.simd_binary(*dst, *src, |a, b| a ^ b);
                self.charge(costs.simd);
            }
            Aesenc { dst, src } => {
                self.simd_binary(*dst, *src, |a, b| aes::aes_round(a, b, false));
                self.charge(costs.simd);
            }
            Aesenclast { dst, src } => {
                self.simd_binary(*dst, *src, |a, b| aes::aes_round(a, b, true));
                self.charge(costs.simd);
            }
            Yield => {
                self.charge(costs.plain);
                outcome = StepOutcome::Yielded;
            }
        }
        self.arch.core.rip = next;
        self.stats.retired += 1;
        Ok(outcome)
    }

    /// Legacy-SSE semantics: the low 128 bits change, the rest is kept.
    fn simd_binary(&mut self, dst: SimdReg, src: SimdReg, op: impl Fn(u128, u128) -> u128) {
        let a = self.arch.simd[dst.index()];
        let b = self.arch.simd[src.index()].low_u128();
        self.arch.simd[dst.index()] = a.with_low_u128(op(a.low_u128(), b));
    }

    /// Transient run past the fault, then either a TSX abort or a fault
    /// reported to the caller with the architectural state untouched.
    fn fault(
        &mut self,
        program: &Program,
        instruction: &Instruction,
        kind: FaultKind,
    ) -> Result<StepOutcome, MachineError> {
        self.charge(self.issue_cost(instruction));
        self.stats.faults += 1;
        let rip = self.arch.core.rip;
        self.speculate_past(program, rip, true);
        if let Some(target) = self.rollback() {
            self.charge(self.config.costs.tsx_abort);
            return Ok(StepOutcome::TsxAborted(target));
        }
        Ok(StepOutcome::Fault(kind))
    }

    /// Restores the checkpoint of the open transaction and jumps to its
    /// abort handler. Returns the handler index, or `None` outside a
    /// transaction.
    fn rollback(&mut self) -> Option<usize> {
        let tx = self.tsx.take()?;
        self.arch = *tx.checkpoint;
        self.arch.core.rip = tx.abort_target;
        self.stats.tsx_aborts += 1;
        Some(tx.abort_target)
    }

    /// Aborts an open transaction from outside (an interrupt or preemption).
    pub fn abort_transaction(&mut self) -> Option<usize> {
        let target = self.rollback()?;
        self.charge(self.config.costs.tsx_abort);
        Some(target)
    }

    /// `ret`: the target comes from memory, the prediction from the RSB. A
    /// mismatch runs the predicted path transiently before resolving.
    fn ret_with_rsb(&mut self, program: &Program) -> Result<StepOutcome, MachineError> {
        let actual = self.arch.core.pop()? as usize;
        let costs = self.config.costs;
        match self.rsb.pop() {
            Some(predicted) if predicted != actual => {
                self.stats.rsb_mispredictions += 1;
                self.speculate_past(program, predicted, false);
                self.charge(costs.plain + costs.retpoline_resolution);
            }
            Some(_) => self.charge(costs.plain),
            None => match self.config.rsb_empty_policy {
                RsbEmptyPolicy::UseActual => self.charge(costs.plain),
                RsbEmptyPolicy::Error => {
                    self.arch.core.push(actual as u64)?;
                    return Err(MachineError::RsbEmpty);
                }
            },
        }
        self.arch.core.rip = actual;
        self.stats.retired += 1;
        Ok(StepOutcome::Retired)
    }

    /// Value a transient SIMD read observes for register `index`.
    pub fn transient_simd(&self, index: usize) -> SimdValue {
        if self.control.cr0_ts && !self.control.cpu_vulnerable {
            SimdValue::ZERO
        } else {
            self.arch.simd[index]
        }
    }
}

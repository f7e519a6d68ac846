use serde::{Deserialize, Serialize};

use crate::isa::{Instruction, Program, SimdValue, REGISTER_COUNT};

use super::{aes, CoreState, Machine, MemOperand};

/// Why a transient run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpeculationStop {
    Window,
    EndOfProgram,
    Yield,
    /// A second fault inside the window. It is never delivered.
    Fault,
    /// A `pause` reached for the second time: the capture loop spins.
    CaptureLoop,
    /// Timed probes and flushes are fenced and do not run transiently.
    Serializing,
    /// Transaction boundaries end the window; speculation never nests.
    Transaction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculationReport {
    pub start: usize,
    pub executed: usize,
    pub stop: SpeculationStop,
}

/// Register state of a transient path. Stores land in `core.memory`, which
/// doubles as a store buffer over the architectural memory.
struct Scratch {
    core: CoreState,
    simd: Option<Box<[SimdValue; REGISTER_COUNT as usize]>>,
}

impl Scratch {
    fn read_simd(&self, machine: &Machine, index: usize) -> SimdValue {
        match &self.simd {
            Some(file) => file[index],
            None => machine.transient_simd(index),
        }
    }

    fn simd_mut(&mut self, machine: &Machine) -> &mut [SimdValue; REGISTER_COUNT as usize] {
        self.simd
            .get_or_insert_with(|| Box::new(std::array::from_fn(|i| machine.transient_simd(i))))
    }

    fn read_u64(&self, machine: &Machine, address: u64) -> u64 {
        let mut bytes = [0u8; 8];
        for (i, byte) in bytes.iter_mut().enumerate() {
            let a = address.wrapping_add(i as u64);
            *byte = self
                .core
                .memory
                .get(&a)
                .or_else(|| machine.arch.core.memory.get(&a))
                .copied()
                .unwrap_or(0);
        }
        u64::from_le_bytes(bytes)
    }
}

impl Machine {
    /// Runs up to the speculation window of instructions from `start` on
    /// scratch state. Only cache lines touched along the way survive.
    ///
    /// With `at_fault` set, `start` is the faulting instruction itself: its
    /// SIMD read sees the stale physical registers and a page-faulting
    /// access is skipped rather than ending the run.
    pub fn speculate_past(
        &mut self,
        program: &Program,
        start: usize,
        at_fault: bool,
    ) -> SpeculationReport {
        let mut scratch = Scratch {
            core: CoreState {
                gprs: self.arch.core.gprs,
                rip: start,
                stack: self.arch.core.stack.clone(),
                memory: Default::default(),
                timings: Vec::new(),
            },
            simd: None,
        };
        let window = self.config.speculation_window;
        let lanes = (self.config.simd_width / 64) as u8;
        let mut pauses: Vec<usize> = Vec::new();
        let mut rip = start;
        let mut executed = 0;

        let stop = loop {
            if executed == window {
                break SpeculationStop::Window;
            }
            let Some(instruction) = program.get(rip) else {
                break SpeculationStop::EndOfProgram;
            };
            let first = executed == 0 && at_fault;
            let mut next = rip + 1;

            use Instruction::*;
            match instruction {
                MovqGprFromSimd { dst, src, lane } => {
                    if *lane >= lanes {
                        break SpeculationStop::Fault;
                    }
                    let value = scratch.read_simd(self, src.index()).lane(*lane as usize);
                    scratch.core.gprs[dst.index()] = value;
                }
                MovSimdImm { dst, value } => {
                    let width = self.config.simd_width;
                    scratch.simd_mut(self)[dst.index()] = value.truncate(width);
                }
                AndImm { dst, imm } => scratch.core.gprs[dst.index()] &= imm,
                ShlImm { dst, imm } => scratch.core.gprs[dst.index()] <<= imm,
                ShrImm { dst, imm } => scratch.core.gprs[dst.index()] >>= imm,
                StoreDword { mem, value } => {
                    match self.transient_address(mem, &scratch.core.gprs, first) {
                        Access::Ok(address) => {
                            self.cache.touch(address);
                            scratch.core.write_u32(address, *value);
                        }
                        Access::Skip => {}
                        Access::Stop => break SpeculationStop::Fault,
                    }
                }
                StoreDwordAbs { addr, value } => {
                    match self.transient_address(
                        &MemOperand::absolute(*addr),
                        &scratch.core.gprs,
                        first,
                    ) {
                        Access::Ok(address) => {
                            self.cache.touch(address);
                            scratch.core.write_u32(address, *value);
                        }
                        Access::Skip => {}
                        Access::Stop => break SpeculationStop::Fault,
                    }
                }
                Load { dst, mem } => match self.transient_address(mem, &scratch.core.gprs, first) {
                    Access::Ok(address) => {
                        self.cache.touch(address);
                        let value = scratch.read_u64(self, address);
                        scratch.core.gprs[dst.index()] = value;
                    }
                    Access::Skip => {}
                    Access::Stop => break SpeculationStop::Fault,
                },
                Clflush { .. } | ProbeTimed { .. } => break SpeculationStop::Serializing,
                Xbegin { .. } | Xend | Xabort { .. } => break SpeculationStop::Transaction,
                Call { target } => {
                    let Some(target) = program.label(target) else {
                        break SpeculationStop::Fault;
                    };
                    if scratch.core.push((rip + 1) as u64).is_err() {
                        break SpeculationStop::Fault;
                    }
                    next = target;
                }
                Ret => match scratch.core.pop() {
                    Ok(target) => next = target as usize,
                    Err(_) => break SpeculationStop::Fault,
                },
                Jmp { target } => match program.label(target) {
                    Some(target) => next = target,
                    None => break SpeculationStop::Fault,
                },
                Pause => {
                    if pauses.contains(&rip) {
                        break SpeculationStop::CaptureLoop;
                    }
                    pauses.push(rip);
                }
                StoreRetAddr { target } => {
                    let Some(target) = program.label(target) else {
                        break SpeculationStop::Fault;
                    };
                    if scratch.core.write_stack_top(target as u64).is_err() {
                        break SpeculationStop::Fault;
                    }
                }
                Pxor { dst, src } | Aesenc { dst, src } | Aesenclast { dst, src } => {
                    let a = scratch.read_simd(self, dst.index());
                    let b = scratch.read_simd(self, src.index()).low_u128();
                    let result = match instruction {
                        Pxor { .. } => a.low_u128() ^ b,
                        Aesenc { .. } => aes::aes_round(a.low_u128(), b, false),
                        _ => aes::aes_round(a.low_u128(), b, true),
                    };
                    scratch.simd_mut(self)[dst.index()] = a.with_low_u128(result);
                }
                Yield => break SpeculationStop::Yield,
            }
            executed += 1;
            rip = next;
        };

        let report = SpeculationReport {
            start,
            executed,
            stop,
        };
        self.stats.speculations += 1;
        self.stats.transient_instructions += executed as u64;
        self.last_speculation = Some(report);
        report
    }

    fn transient_address(&self, mem: &MemOperand, gprs: &[u64; 16], first: bool) -> Access {
        match self.resolve(mem, gprs) {
            Ok(address) if !self.is_forbidden(address) => Access::Ok(address),
            Ok(_) if first => Access::Skip,
            _ => Access::Stop,
        }
    }
}

enum Access {
    Ok(u64),
    Skip,
    Stop,
}

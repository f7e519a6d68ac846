//! Operating-system model.
//!
//! All processes share one modeled hardware thread. A round-robin scheduler
//! switches on yield, halt and time-slice exhaustion. FPU state follows
//! either the lazy policy, where the registers stay in place and the first
//! SIMD instruction after a switch traps with #NM, or the eager policy, where
//! they are swapped on every switch.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Gpr, Program, SimdValue, REGISTER_COUNT};
use crate::machine::{CoreState, FaultKind, Machine, MachineError, SimdFile, StepOutcome};

/// Default time slice: 1 ms at 2.6 GHz.
pub const DEFAULT_SLICE_CYCLES: u64 = 2_600_000;

/// Register that receives the faulting address on signal delivery.
pub const SIGNAL_ADDRESS_REGISTER: Gpr = Gpr::RDI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pid(pub usize);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpuMode {
    #[default]
    Lazy,
    Eager,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OsError {
    #[error("no process with pid {0}")]
    UnknownPid(Pid),
    #[error("process {0} received a page fault without a signal handler")]
    UnhandledSignal(Pid),
    #[error("#NM raised in eager mode")]
    NmInEagerMode,
    #[error("no runnable process")]
    NoRunnableProcess,
    #[error("signal handler `{label}` of process {pid} is not a label in its program")]
    UndefinedHandler { pid: Pid, label: String },
    #[error("process {pid} did not finish within {budget} cycles")]
    CycleBudgetExceeded { pid: Pid, budget: u64 },
    #[error("process {pid}: {source}")]
    Machine {
        pid: Pid,
        #[source]
        source: MachineError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessState {
    Runnable,
    Halted,
    Terminated,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessStats {
    pub cpu_cycles: u64,
    pub retired: u64,
    pub nm_light: u64,
    pub nm_full: u64,
    /// FPU register files written back to this process's save area.
    pub fpu_saves: u64,
    pub signals: u64,
    pub tsx_aborts: u64,
    pub preemptions: u64,
    pub yields: u64,
    pub rsb_mispredictions: u64,
}

#[derive(Debug, Clone)]
pub struct Process {
    pub pid: Pid,
    pub name: String,
    program: Program,
    /// Valid while the process is not running; the live copy sits in the
    /// machine otherwise.
    saved: CoreState,
    /// Valid while the process does not own the FPU, or always in eager mode.
    pub fpu_save_area: SimdFile,
    signal_handler: Option<String>,
    pub state: ProcessState,
    pub stats: ProcessStats,
}

impl Process {
    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn signal_handler(&self) -> Option<&str> {
        self.signal_handler.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Switch { to: Pid },
    Preempt,
    Yield,
    Halt,
    NmLight,
    NmFull { previous_owner: Option<Pid> },
    Signal { address: u64 },
    Terminated { address: u64 },
    TsxAbort { target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub cycle: u64,
    pub pid: Pid,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// What one scheduler step did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tick {
    pub pid: Pid,
    pub rip: usize,
    pub outcome: StepOutcome,
}

/// Result of running one process's program to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub cycles: u64,
    pub preemptions: u64,
}

#[derive(Debug, Clone)]
pub struct System {
    pub machine: Machine,
    processes: Vec<Process>,
    current: Option<Pid>,
    fpu_owner: Option<Pid>,
    mode: FpuMode,
    slice_cycles: u64,
    slice_start: u64,
    noise_region: Option<Range<u64>>,
    trace: Vec<Event>,
}

impl System {
    pub fn new(machine: Machine, mode: FpuMode, slice_cycles: u64) -> System {
        System {
            machine,
            processes: Vec::new(),
            current: None,
            fpu_owner: None,
            mode,
            slice_cycles,
            slice_start: 0,
            noise_region: None,
            trace: Vec::new(),
        }
    }

    pub fn mode(&self) -> FpuMode {
        self.mode
    }

    pub fn slice_cycles(&self) -> u64 {
        self.slice_cycles
    }

    pub fn current(&self) -> Option<Pid> {
        self.current
    }

    pub fn fpu_owner(&self) -> Option<Pid> {
        self.fpu_owner
    }

    pub fn processes(&self) -> &[Process] {
        &self.processes
    }

    pub fn trace(&self) -> &[Event] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.trace)
    }

    /// Probe lines that eviction noise applies to on signal delivery.
    pub fn set_noise_region(&mut self, region: Option<Range<u64>>) {
        self.noise_region = region;
    }

    pub fn process(&self, pid: Pid) -> Result<&Process, OsError> {
        self.processes.get(pid.0).ok_or(OsError::UnknownPid(pid))
    }

    fn process_mut(&mut self, pid: Pid) -> Result<&mut Process, OsError> {
        self.processes
            .get_mut(pid.0)
            .ok_or(OsError::UnknownPid(pid))
    }

    pub fn stats(&self, pid: Pid) -> Result<&ProcessStats, OsError> {
        Ok(&self.process(pid)?.stats)
    }

    /// Architectural core state of `pid`, wherever it currently lives.
    pub fn core(&self, pid: Pid) -> Result<&CoreState, OsError> {
        let process = self.process(pid)?;
        Ok(if self.current == Some(pid) {
            &self.machine.arch.core
        } else {
            &process.saved
        })
    }

    /// The SIMD values `pid` would read architecturally.
    pub fn simd_view(&self, pid: Pid) -> Result<SimdFile, OsError> {
        let process = self.process(pid)?;
        let live = match self.mode {
            FpuMode::Lazy => self.fpu_owner == Some(pid),
            FpuMode::Eager => self.current == Some(pid),
        };
        Ok(if live {
            self.machine.arch.simd
        } else {
            process.fpu_save_area
        })
    }

    fn record(&mut self, pid: Pid, kind: EventKind) {
        self.trace.push(Event {
            cycle: self.machine.cycles(),
            pid,
            kind,
        });
    }

    fn check_handler(pid: Pid, program: &Program, handler: Option<&str>) -> Result<(), OsError> {
        match handler {
            Some(label) if program.label(label).is_none() => Err(OsError::UndefinedHandler {
                pid,
                label: label.to_string(),
            }),
            _ => Ok(()),
        }
    }

    /// Adds a process. The first one spawned starts running.
    pub fn spawn(
        &mut self,
        name: &str,
        program: Program,
        signal_handler: Option<&str>,
        fpu_save_area: SimdFile,
    ) -> Result<Pid, OsError> {
        let pid = Pid(self.processes.len());
        Self::check_handler(pid, &program, signal_handler)?;
        let mut saved = CoreState::new(self.machine.config().stack_slots);
        saved.rip = program.entry();
        self.processes.push(Process {
            pid,
            name: name.to_string(),
            program,
            saved,
            fpu_save_area,
            signal_handler: signal_handler.map(str::to_string),
            state: ProcessState::Runnable,
            stats: ProcessStats::default(),
        });
        if self.current.is_none() {
            let process = &mut self.processes[pid.0];
            std::mem::swap(&mut self.machine.arch.core, &mut process.saved);
            match self.mode {
                FpuMode::Lazy => self.machine.control.cr0_ts = true,
                FpuMode::Eager => {
                    self.machine.arch.simd = process.fpu_save_area;
                    self.machine.control.cr0_ts = false;
                    self.fpu_owner = Some(pid);
                }
            }
            self.current = Some(pid);
            self.slice_start = self.machine.cycles();
        }
        Ok(pid)
    }

    /// Replaces the program of `pid` and makes it runnable from the start.
    /// Registers and memory are kept; the stack and timing log are reset.
    pub fn install_program(
        &mut self,
        pid: Pid,
        program: Program,
        signal_handler: Option<&str>,
    ) -> Result<(), OsError> {
        Self::check_handler(pid, &program, signal_handler)?;
        let is_current = self.current == Some(pid);
        let process = self.process_mut(pid)?;
        let entry = program.entry();
        process.program = program;
        process.signal_handler = signal_handler.map(str::to_string);
        process.state = ProcessState::Runnable;
        let core = if is_current {
            &mut self.machine.arch.core
        } else {
            &mut self.processes[pid.0].saved
        };
        core.restart(entry);
        core.timings.clear();
        Ok(())
    }

    fn next_runnable(&self, after: Pid) -> Option<Pid> {
        let n = self.processes.len();
        (1..=n)
            .map(|i| (after.0 + i) % n)
            .find(|&i| self.processes[i].state == ProcessState::Runnable)
            .map(Pid)
    }

    /// Switches the hardware thread to `next`.
    pub fn context_switch(&mut self, next: Pid) -> Result<(), OsError> {
        self.process(next)?;
        let cost = self.machine.costs().context_switch;
        let Some(prev) = self.current else {
            return Err(OsError::NoRunnableProcess);
        };
        if prev == next {
            self.machine.charge(cost);
            self.processes[prev.0].stats.cpu_cycles += cost;
            self.slice_start = self.machine.cycles();
            return Ok(());
        }
        if let Some(target) = self.machine.abort_transaction() {
            self.processes[prev.0].stats.tsx_aborts += 1;
            self.record(prev, EventKind::TsxAbort { target });
        }
        std::mem::swap(
            &mut self.machine.arch.core,
            &mut self.processes[prev.0].saved,
        );
        std::mem::swap(
            &mut self.machine.arch.core,
            &mut self.processes[next.0].saved,
        );
        match self.mode {
            FpuMode::Lazy => self.machine.control.cr0_ts = true,
            FpuMode::Eager => {
                self.processes[prev.0].fpu_save_area = self.machine.arch.simd;
                self.processes[prev.0].stats.fpu_saves += 1;
                self.machine.arch.simd = self.processes[next.0].fpu_save_area;
                self.machine.control.cr0_ts = false;
                self.fpu_owner = Some(next);
            }
        }
        self.machine.charge(cost);
        self.processes[prev.0].stats.cpu_cycles += cost;
        self.current = Some(next);
        self.slice_start = self.machine.cycles();
        self.record(prev, EventKind::Switch { to: next });
        Ok(())
    }

    /// Device-not-available handler implementing the FPU-owner protocol.
    /// The faulting instruction is retried on the next step.
    pub fn handle_nm(&mut self) -> Result<(), OsError> {
        if self.mode == FpuMode::Eager {
            return Err(OsError::NmInEagerMode);
        }
        let pid = self.current.ok_or(OsError::NoRunnableProcess)?;
        let costs = *self.machine.costs();
        self.machine.control.cr0_ts = false;
        if self.fpu_owner == Some(pid) {
            self.machine.charge(costs.nm_light);
            self.processes[pid.0].stats.nm_light += 1;
            self.record(pid, EventKind::NmLight);
            return Ok(());
        }
        let previous_owner = self.fpu_owner;
        if let Some(owner) = previous_owner {
            let area = self.machine.arch.simd;
            let owner = &mut self.processes[owner.0];
            owner.fpu_save_area = area;
            owner.stats.fpu_saves += 1;
        }
        self.machine.arch.simd = self.processes[pid.0].fpu_save_area;
        self.fpu_owner = Some(pid);
        self.machine.charge(costs.nm_full);
        self.processes[pid.0].stats.nm_full += 1;
        self.record(pid, EventKind::NmFull { previous_owner });
        Ok(())
    }

    /// Delivers a page fault at `address` to the running process as a signal.
    /// A process without a handler is terminated.
    pub fn deliver_signal(&mut self, address: u64) -> Result<(), OsError> {
        let pid = self.current.ok_or(OsError::NoRunnableProcess)?;
        let process = &self.processes[pid.0];
        let Some(handler) = process
            .signal_handler
            .as_deref()
            .and_then(|label| process.program.label(label))
        else {
            self.processes[pid.0].state = ProcessState::Terminated;
            self.record(pid, EventKind::Terminated { address });
            return Err(OsError::UnhandledSignal(pid));
        };
        let core = &mut self.machine.arch.core;
        core.rip = handler;
        core.set_gpr(SIGNAL_ADDRESS_REGISTER, address);
        let cost = self.machine.costs().page_fault_signal;
        self.machine.charge(cost);
        if let Some(region) = self.noise_region.clone() {
            self.machine.cache.apply_noise(region);
        }
        self.processes[pid.0].stats.signals += 1;
        self.record(pid, EventKind::Signal { address });
        Ok(())
    }

    /// Executes one instruction of the running process and dispatches
    /// whatever it raised. A halted or terminated current process is
    /// switched away from first.
    pub fn tick(&mut self) -> Result<Tick, OsError> {
        let mut pid = self.current.ok_or(OsError::NoRunnableProcess)?;
        if self.processes[pid.0].state != ProcessState::Runnable {
            let next = self.next_runnable(pid).ok_or(OsError::NoRunnableProcess)?;
            self.context_switch(next)?;
            pid = next;
        }
        let start = self.machine.cycles();
        let mispredictions = self.machine.stats().rsb_mispredictions;
        let rip = self.machine.arch.core.rip;
        let outcome = self
            .machine
            .step(&self.processes[pid.0].program)
            .map_err(|source| OsError::Machine { pid, source })?;

        let mut switch = false;
        match outcome {
            StepOutcome::Retired => self.processes[pid.0].stats.retired += 1,
            StepOutcome::Fault(FaultKind::Nm { .. }) => self.handle_nm()?,
            StepOutcome::Fault(FaultKind::Pf { address }) => match self.deliver_signal(address) {
                Ok(()) | Err(OsError::UnhandledSignal(_)) => {}
                Err(e) => return Err(e),
            },
            StepOutcome::TsxAborted(target) => {
                self.processes[pid.0].stats.tsx_aborts += 1;
                self.record(pid, EventKind::TsxAbort { target });
            }
            StepOutcome::Yielded => {
                self.processes[pid.0].stats.retired += 1;
                self.processes[pid.0].stats.yields += 1;
                self.record(pid, EventKind::Yield);
                switch = true;
            }
            StepOutcome::Halted => {
                self.processes[pid.0].state = ProcessState::Halted;
                self.record(pid, EventKind::Halt);
            }
        }
        let stats = &mut self.processes[pid.0].stats;
        stats.cpu_cycles += self.machine.cycles() - start;
        stats.rsb_mispredictions += self.machine.stats().rsb_mispredictions - mispredictions;

        let runnable = self.processes[pid.0].state == ProcessState::Runnable;
        if runnable && !switch && self.machine.cycles() - self.slice_start >= self.slice_cycles {
            self.processes[pid.0].stats.preemptions += 1;
            self.record(pid, EventKind::Preempt);
            switch = true;
        }
        if switch {
            let next = self.next_runnable(pid).unwrap_or(pid);
            self.context_switch(next)?;
        }
        Ok(Tick { pid, rip, outcome })
    }

    /// Runs until every process has halted or `max_cycles` have elapsed.
    /// Returns the events recorded along the way.
    pub fn run(&mut self, max_cycles: u64) -> Result<Vec<Event>, OsError> {
        let first = self.trace.len();
        let deadline = self.machine.cycles().saturating_add(max_cycles);
        while self.machine.cycles() < deadline
            && self
                .processes
                .iter()
                .any(|p| p.state == ProcessState::Runnable)
        {
            self.tick()?;
        }
        Ok(self.trace[first..].to_vec())
    }

    /// Installs `program` on `pid` and schedules normally until that process
    /// halts. It stays current afterwards, so the next program installed on
    /// it starts without a switch.
    pub fn run_to_completion(
        &mut self,
        pid: Pid,
        program: Program,
        signal_handler: Option<&str>,
        budget: u64,
    ) -> Result<RunSummary, OsError> {
        self.install_program(pid, program, signal_handler)?;
        let start = self.machine.cycles();
        let preemptions = self.processes[pid.0].stats.preemptions;
        loop {
            match self.processes[pid.0].state {
                ProcessState::Halted => break,
                ProcessState::Terminated => return Err(OsError::UnhandledSignal(pid)),
                _ => {}
            }
            if self.machine.cycles() - start > budget {
                return Err(OsError::CycleBudgetExceeded { pid, budget });
            }
            self.tick()?;
        }
        Ok(RunSummary {
            cycles: self.machine.cycles() - start,
            preemptions: self.processes[pid.0].stats.preemptions - preemptions,
        })
    }
}

/// A zeroed register file.
pub fn zeroed_fpu() -> SimdFile {
    [SimdValue::ZERO; REGISTER_COUNT as usize]
}

#[cfg(test)]
mod tests;

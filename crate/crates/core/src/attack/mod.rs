//! Leak gadgets and register-file recovery.
//!
//! Each attempt flushes the probe lines, runs one gadget that encodes a
//! group of secret bits into which probe line gets touched, and times a
//! reload of every line. The attack never sees the victim's secrets; it only
//! reads its own timing log.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{
    Gpr, Instruction, MemOperand, Program, ProgramBuilder, SimdReg, SimdValue, SimdView,
    REGISTER_COUNT,
};
use crate::machine::PROBE_SYMBOL;
use crate::os::{OsError, Pid, System};

/// Default address the probe array is mapped at.
pub const DEFAULT_PROBE_BASE: u64 = 0x10_0000;

pub const DEFAULT_CLOCK_HZ: f64 = 2.6e9;

const HANDLER_LABEL: &str = "handler";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain gadget; the #NM reaches the OS and the victim must run again.
    Basic,
    /// The gadget sits in the shadow of a page fault.
    #[serde(rename = "pf")]
    PageFault,
    /// The gadget runs inside an RTM transaction.
    Tsx,
    /// The gadget runs only on the mispredicted path of a retpoline.
    Retpoline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Basic,
        Variant::PageFault,
        Variant::Tsx,
        Variant::Retpoline,
    ];

    /// The three variants that keep the #NM away from the OS.
    pub const SUPPRESSED: [Variant; 3] = [Variant::PageFault, Variant::Tsx, Variant::Retpoline];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::PageFault => "pf",
            Variant::Tsx => "tsx",
            Variant::Retpoline => "retpoline",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Basic => "Basic",
            Variant::PageFault => "Page fault",
            Variant::Tsx => "Intel TSX",
            Variant::Retpoline => "Retpoline",
        }
    }

    pub fn signal_handler(self) -> Option<&'static str> {
        (self == Variant::PageFault).then_some(HANDLER_LABEL)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Variant, String> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(Variant::Basic),
            "pf" | "pagefault" | "page-fault" => Ok(Variant::PageFault),
            "tsx" => Ok(Variant::Tsx),
            "retpoline" => Ok(Variant::Retpoline),
            _ => Err(format!(
                "unknown variant `{s}` (expected basic, pf, tsx or retpoline)"
            )),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("bits {offset}..{} do not fit a {width}-bit register", offset + count)]
    BadBitRange { offset: u32, count: u32, width: u32 },
    #[error("bits per attempt must be 1, 2, 4 or 8 (got {0})")]
    BitsPerAttempt(u32),
    #[error("register width must be 128, 256 or 512 (got {0})")]
    Width(u32),
    #[error("SIMD register index {0} is out of range")]
    Register(u8),
    #[error(
        "probe stride {stride} must be a power of two of at least the {line_size}-byte line size"
    )]
    Stride { stride: u64, line_size: u64 },
    #[error("{lines} probe lines with stride {stride} do not fit a {region}-byte probe region")]
    ProbeRegion {
        lines: u64,
        stride: u64,
        region: u64,
    },
    #[error("repeats per group must be at least 1")]
    Repeats,
    #[error(transparent)]
    Os(#[from] OsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub variant: Variant,
    pub target_registers: Vec<u8>,
    pub register_width: u32,
    pub bits_per_attempt: u32,
    pub probe_base: u64,
    pub probe_stride: u64,
    pub probe_region: u64,
    pub repeats_per_group: u32,
    pub clock_hz: f64,
    /// Times one register may be restarted after its pass was preempted.
    pub max_restarts: u32,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            variant: Variant::Tsx,
            target_registers: (0..REGISTER_COUNT).collect(),
            register_width: 256,
            bits_per_attempt: 1,
            probe_base: DEFAULT_PROBE_BASE,
            probe_stride: 64,
            probe_region: 256 * 64,
            repeats_per_group: 1,
            clock_hz: DEFAULT_CLOCK_HZ,
            max_restarts: 4,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, line_size: u64) -> Result<(), AttackError> {
        check_bits_per_attempt(self.bits_per_attempt)?;
        if !matches!(self.register_width, 128 | 256 | 512) {
            return Err(AttackError::Width(self.register_width));
        }
        if let Some(&r) = self.target_registers.iter().find(|&&r| r >= REGISTER_COUNT) {
            return Err(AttackError::Register(r));
        }
        if !self.probe_stride.is_power_of_two() || self.probe_stride < line_size {
            return Err(AttackError::Stride {
                stride: self.probe_stride,
                line_size,
            });
        }
        let lines = 1u64 << self.bits_per_attempt;
        if lines * self.probe_stride > self.probe_region {
            return Err(AttackError::ProbeRegion {
                lines,
                stride: self.probe_stride,
                region: self.probe_region,
            });
        }
        if self.repeats_per_group == 0 {
            return Err(AttackError::Repeats);
        }
        Ok(())
    }

    pub fn groups_per_register(&self) -> u32 {
        self.register_width / self.bits_per_attempt
    }
}

fn check_bits_per_attempt(k: u32) -> Result<(), AttackError> {
    if matches!(k, 1 | 2 | 4 | 8) {
        Ok(())
    } else {
        Err(AttackError::BitsPerAttempt(k))
    }
}

fn probe_operand(disp: u64) -> MemOperand {
    MemOperand::symbol(PROBE_SYMBOL, disp as i64)
}

/// The bit-extraction payload: isolates `k` bits at `bit_offset` of register
/// `reg` and stores to the probe line they select.
fn payload(reg: u8, bit_offset: u32, k: u32, stride: u64) -> Vec<Instruction> {
    let lane = (bit_offset / 64) as u8;
    let shift = (bit_offset % 64) as u8;
    let src = SimdReg::new(reg, SimdView::for_lane(lane)).expect("register index checked");
    let mut out = vec![Instruction::MovqGprFromSimd {
        dst: Gpr::RAX,
        src,
        lane,
    }];
    if shift > 0 {
        out.push(Instruction::ShrImm {
            dst: Gpr::RAX,
            imm: shift,
        });
    }
    out.push(Instruction::AndImm {
        dst: Gpr::RAX,
        imm: (1 << k) - 1,
    });
    out.push(Instruction::ShlImm {
        dst: Gpr::RAX,
        imm: stride.trailing_zeros() as u8,
    });
    out.push(Instruction::StoreDword {
        mem: MemOperand::indexed(PROBE_SYMBOL, Gpr::RAX),
        value: 0,
    });
    out
}

/// Builds the leak gadget of `variant` for `k` bits at `bit_offset` of
/// register `reg`. For bit 0 of `xmm0` with one bit per attempt this is the
/// classic listing of each variant.
pub fn build_gadget(
    variant: Variant,
    reg: u8,
    bit_offset: u32,
    k: u32,
    stride: u64,
    width: u32,
) -> Result<Program, AttackError> {
    check_bits_per_attempt(k)?;
    if reg >= REGISTER_COUNT {
        return Err(AttackError::Register(reg));
    }
    // a group never straddles a 64-bit lane since k divides 64
    if bit_offset + k > width || !bit_offset.is_multiple_of(k) {
        return Err(AttackError::BadBitRange {
            offset: bit_offset,
            count: k,
            width,
        });
    }
    let body = payload(reg, bit_offset, k, stride);
    let mut b = ProgramBuilder::new();
    match variant {
        Variant::Basic => {
            b.extend(body);
        }
        Variant::PageFault => {
            b.push(Instruction::StoreDwordAbs { addr: 0, value: 0 });
            b.extend(body);
        }
        Variant::Tsx => {
            b.push(Instruction::Xbegin {
                abort: "abort".into(),
            });
            b.extend(body);
            b.push(Instruction::Xabort { code: 0 });
            b.label("abort");
        }
        Variant::Retpoline => {
            b.push(Instruction::Call {
                target: "set_up_target".into(),
            });
            b.extend(body);
            b.label("capture");
            b.push(Instruction::Pause);
            b.push(Instruction::Jmp {
                target: "capture".into(),
            });
            b.label("set_up_target");
            b.push(Instruction::StoreRetAddr {
                target: "destination".into(),
            });
            b.push(Instruction::Ret);
            b.label("destination");
        }
    }
    Ok(b.build().expect("gadget labels are well formed"))
}

/// One complete attempt: flush every probe line, run the gadget, then time
/// a reload of every line. The basic variant first yields so the victim can
/// take the FPU back.
pub fn attempt_program(gadget: &Program, variant: Variant, k: u32, stride: u64) -> Program {
    let lines = 1u64 << k;
    let mut b = ProgramBuilder::new();
    if variant == Variant::Basic {
        b.push(Instruction::Yield);
    }
    b.extend((0..lines).map(|i| Instruction::Clflush {
        mem: probe_operand(i * stride),
    }));
    b.append(gadget);
    if variant == Variant::PageFault {
        b.label(HANDLER_LABEL);
    }
    b.extend((0..lines).map(|i| Instruction::ProbeTimed {
        dst: Gpr::RCX,
        mem: probe_operand(i * stride),
    }));
    b.build().expect("attempt labels are well formed")
}

/// What one attempt's probes showed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reading {
    Value(u8),
    Inconclusive,
}

/// Maps the set of hot probe lines (ascending) to a reading.
///
/// Suppressed variants need exactly one hot line. The basic variant also
/// re-executes the gadget architecturally with the attacker's zeroed
/// registers, which always touches line 0, so `{0}` reads as 0 and `{0, v}`
/// as `v`.
pub fn classify(variant: Variant, hot: &[usize]) -> Reading {
    match (variant, hot) {
        (_, [v]) => Reading::Value(*v as u8),
        (Variant::Basic, [0, v]) => Reading::Value(*v as u8),
        _ => Reading::Inconclusive,
    }
}

/// Installs and runs one attempt program on `attacker`, then classifies
/// its timing log. Also returns how often the attacker was preempted.
pub fn leak_group(
    sys: &mut System,
    attacker: Pid,
    attempt: &Program,
    config: &AttackConfig,
    budget: u64,
) -> Result<(Reading, u64), AttackError> {
    let summary = sys.run_to_completion(
        attacker,
        attempt.clone(),
        config.variant.signal_handler(),
        budget,
    )?;
    let threshold = sys.machine.cache.latency().threshold_cycles;
    let hot: Vec<usize> = sys
        .core(attacker)?
        .timings
        .iter()
        .filter(|t| t.cycles < threshold)
        .map(|t| ((t.address - config.probe_base) / config.probe_stride) as usize)
        .collect();
    Ok((classify(config.variant, &hot), summary.preemptions))
}

/// Outcome of one bit group after voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupReading {
    /// `None` when no value won the vote.
    pub value: Option<u8>,
    /// Attempts that agreed with the winner.
    pub votes: u32,
    pub attempts: u32,
}

impl GroupReading {
    pub fn confidence(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.votes as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredRegister {
    pub index: u8,
    pub value: SimdValue,
    pub groups: Vec<GroupReading>,
    /// Cycles of the pass that produced `value`.
    pub cycles: u64,
    pub restarts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub variant: Variant,
    pub register_width: u32,
    pub bits_per_attempt: u32,
    pub repeats_per_group: u32,
    pub recovered: Vec<RecoveredRegister>,
    /// Attempts of the passes that produced the recovered values.
    pub attempts: u64,
    /// Attempts of passes discarded after a preemption.
    pub restarted_attempts: u64,
    pub inconclusive_groups: u64,
    pub total_cycles: u64,
    pub cycles_per_register: f64,
    /// Bytes per second at the configured clock.
    pub effective_throughput: f64,
}

impl AttackResult {
    pub fn throughput_mib_per_s(&self) -> f64 {
        self.effective_throughput / (1024.0 * 1024.0)
    }
}

/// Bytes per second leaked when one `width`-bit register costs
/// `cycles_per_register` cycles at `clock_hz`.
pub fn throughput(width: u32, clock_hz: f64, cycles_per_register: f64) -> f64 {
    (width / 8) as f64 * clock_hz / cycles_per_register
}

struct Vote {
    reading: GroupReading,
    preempted: bool,
}

/// Runs `r` attempts and takes the plurality of the conclusive readings.
/// A round without a unique winner is repeated once.
fn vote(
    sys: &mut System,
    attacker: Pid,
    attempt: &Program,
    config: &AttackConfig,
    budget: u64,
) -> Result<Vote, AttackError> {
    let r = config.repeats_per_group;
    let mut attempts = 0;
    let mut preempted = false;
    for _round in 0..2 {
        let mut tally = [0u32; 256];
        for _ in 0..r {
            let (reading, preemptions) = leak_group(sys, attacker, attempt, config, budget)?;
            attempts += 1;
            preempted |= preemptions > 0;
            if let Reading::Value(v) = reading {
                tally[v as usize] += 1;
            }
        }
        let best = *tally.iter().max().expect("non-empty tally");
        let mut winners = tally
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == best && n > 0);
        if let (Some((value, &votes)), None) = (winners.next(), winners.next()) {
            return Ok(Vote {
                reading: GroupReading {
                    value: Some(value as u8),
                    votes,
                    attempts,
                },
                preempted,
            });
        }
    }
    Ok(Vote {
        reading: GroupReading {
            value: None,
            votes: 0,
            attempts,
        },
        preempted,
    })
}

/// Recovers the configured registers of whichever process owns the FPU,
/// driving `attacker` through one attempt per bit group and vote.
///
/// A register whose pass was preempted is started over, up to
/// `max_restarts` times, so every recovered value comes from one
/// uninterrupted pass.
pub fn run_attack(
    sys: &mut System,
    attacker: Pid,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    config.validate(sys.machine.cache.line_size())?;
    let k = config.bits_per_attempt;
    let lines = 1u64 << k;
    sys.machine.bind_symbol(PROBE_SYMBOL, config.probe_base);
    sys.set_noise_region(Some(
        config.probe_base..config.probe_base + lines * config.probe_stride,
    ));
    let budget = sys.slice_cycles().saturating_mul(8).max(10_000_000);
    let start = sys.machine.cycles();

    let mut recovered = Vec::with_capacity(config.target_registers.len());
    let mut attempts = 0;
    let mut restarted_attempts = 0;
    let mut inconclusive_groups = 0;
    for &reg in &config.target_registers {
        let programs: Vec<Program> = (0..config.groups_per_register())
            .map(|g| {
                let gadget = build_gadget(
                    config.variant,
                    reg,
                    g * k,
                    k,
                    config.probe_stride,
                    config.register_width,
                )?;
                Ok(attempt_program(
                    &gadget,
                    config.variant,
                    k,
                    config.probe_stride,
                ))
            })
            .collect::<Result<_, AttackError>>()?;

        let mut restarts = 0;
        loop {
            let pass_start = sys.machine.cycles();
            let mut value = SimdValue::ZERO;
            let mut groups = Vec::with_capacity(programs.len());
            let mut pass_attempts = 0u64;
            let mut preempted = false;
            for (g, program) in programs.iter().enumerate() {
                let vote = vote(sys, attacker, program, config, budget)?;
                pass_attempts += vote.reading.attempts as u64;
                preempted |= vote.preempted;
                if let Some(v) = vote.reading.value {
                    value.set_bits(g as u32 * k, k, v as u64);
                }
                groups.push(vote.reading);
                if preempted && restarts < config.max_restarts {
                    break;
                }
            }
            if preempted && restarts < config.max_restarts {
                restarts += 1;
                restarted_attempts += pass_attempts;
                continue;
            }
            attempts += pass_attempts;
            inconclusive_groups += groups.iter().filter(|g| g.value.is_none()).count() as u64;
            recovered.push(RecoveredRegister {
                index: reg,
                value,
                groups,
                cycles: sys.machine.cycles() - pass_start,
                restarts,
            });
            break;
        }
    }

    let total_cycles = sys.machine.cycles() - start;
    let cycles_per_register = if recovered.is_empty() {
        0.0
    } else {
        recovered.iter().map(|r| r.cycles as f64).sum::<f64>() / recovered.len() as f64
    };
    let effective_throughput = if cycles_per_register > 0.0 {
        throughput(config.register_width, config.clock_hz, cycles_per_register)
    } else {
        0.0
    };
    Ok(AttackResult {
        variant: config.variant,
        register_width: config.register_width,
        bits_per_attempt: k,
        repeats_per_group: config.repeats_per_group,
        recovered,
        attempts,
        restarted_attempts,
        inconclusive_groups,
        total_cycles,
        cycles_per_register,
        effective_throughput,
    })
}

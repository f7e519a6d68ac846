//! Instruction set of the simulated core and its textual assembly dialect.
//!
//! The dialect is Intel-ordered (destination first), one instruction or
//! `label:` per line, with `;` comments. Memory operands may name the symbol
//! `mem`, which the machine binds to the probe array base at run time.

mod asm;
mod value;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use asm::{assemble, disassemble, AsmError};
pub use value::{ParseSimdError, SimdValue, MAX_SIMD_BITS};

/// Number of architectural registers in each register class.
pub const REGISTER_COUNT: u8 = 16;

const GPR_NAMES: [&str; 16] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13",
    "r14", "r15",
];

/// A 64-bit general purpose register, indexed in x86-64 encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Gpr(u8);

impl Gpr {
    pub const RAX: Gpr = Gpr(0);
    pub const RCX: Gpr = Gpr(1);
    pub const RDX: Gpr = Gpr(2);
    pub const RBX: Gpr = Gpr(3);
    pub const RSP: Gpr = Gpr(4);
    pub const RBP: Gpr = Gpr(5);
    pub const RSI: Gpr = Gpr(6);
    pub const RDI: Gpr = Gpr(7);

    pub fn new(index: u8) -> Option<Gpr> {
        (index < REGISTER_COUNT).then_some(Gpr(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        GPR_NAMES[self.0 as usize]
    }

    pub fn from_name(name: &str) -> Option<Gpr> {
        GPR_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| Gpr(i as u8))
    }
}

impl fmt::Display for Gpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Access width a SIMD register was named with (`xmm`, `ymm` or `zmm`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimdView {
    Xmm,
    Ymm,
    Zmm,
}

impl SimdView {
    pub fn bits(self) -> u32 {
        match self {
            SimdView::Xmm => 128,
            SimdView::Ymm => 256,
            SimdView::Zmm => 512,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            SimdView::Xmm => "xmm",
            SimdView::Ymm => "ymm",
            SimdView::Zmm => "zmm",
        }
    }

    /// Narrowest view that can address 64-bit lane `lane`.
    pub fn for_lane(lane: u8) -> SimdView {
        match lane {
            0..=1 => SimdView::Xmm,
            2..=3 => SimdView::Ymm,
            _ => SimdView::Zmm,
        }
    }
}

/// A SIMD register operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimdReg {
    index: u8,
    view: SimdView,
}

impl SimdReg {
    pub fn new(index: u8, view: SimdView) -> Option<SimdReg> {
        (index < REGISTER_COUNT).then_some(SimdReg { index, view })
    }

    pub fn xmm(index: u8) -> SimdReg {
        SimdReg::new(index, SimdView::Xmm).expect("xmm index out of range")
    }

    pub fn index(self) -> usize {
        self.index as usize
    }

    pub fn view(self) -> SimdView {
        self.view
    }

    pub fn from_name(name: &str) -> Option<SimdReg> {
        let lower = name.to_ascii_lowercase();
        let (view, digits) = [SimdView::Xmm, SimdView::Ymm, SimdView::Zmm]
            .into_iter()
            .find_map(|v| lower.strip_prefix(v.prefix()).map(|rest| (v, rest)))?;
        if digits.is_empty() || digits.len() > 2 || (digits.len() == 2 && digits.starts_with('0')) {
            return None;
        }
        let index: u8 = digits.parse().ok()?;
        SimdReg::new(index, view)
    }
}

impl fmt::Display for SimdReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.view.prefix(), self.index)
    }
}

/// Register class tag, used where either class may appear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Register {
    Gpr(Gpr),
    Simd(SimdReg),
}

impl Register {
    pub fn from_name(name: &str) -> Option<Register> {
        Gpr::from_name(name)
            .map(Register::Gpr)
            .or_else(|| SimdReg::from_name(name).map(Register::Simd))
    }
}

/// `[symbol + index + disp]`. Every part is optional; an operand with no
/// symbol and no index is an absolute address.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemOperand {
    pub symbol: Option<String>,
    pub index: Option<Gpr>,
    pub disp: i64,
}

impl MemOperand {
    pub fn symbol(name: &str, disp: i64) -> MemOperand {
        MemOperand {
            symbol: Some(name.to_string()),
            index: None,
            disp,
        }
    }

    pub fn indexed(name: &str, index: Gpr) -> MemOperand {
        MemOperand {
            symbol: Some(name.to_string()),
            index: Some(index),
            disp: 0,
        }
    }

    pub fn absolute(addr: u64) -> MemOperand {
        MemOperand {
            symbol: None,
            index: None,
            disp: addr as i64,
        }
    }

    pub fn is_absolute(&self) -> bool {
        self.symbol.is_none() && self.index.is_none()
    }
}

fn fmt_number(f: &mut fmt::Formatter<'_>, n: u64) -> fmt::Result {
    if n < 0x1000 {
        write!(f, "{n}")
    } else {
        write!(f, "{n:#x}")
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        let mut first = true;
        if let Some(sym) = &self.symbol {
            f.write_str(sym)?;
            first = false;
        }
        if let Some(index) = self.index {
            if !first {
                f.write_str(" + ")?;
            }
            write!(f, "{index}")?;
            first = false;
        }
        if first {
            fmt_number(f, self.disp as u64)?;
        } else if self.disp > 0 {
            f.write_str(" + ")?;
            fmt_number(f, self.disp as u64)?;
        } else if self.disp < 0 {
            f.write_str(" - ")?;
            fmt_number(f, self.disp.unsigned_abs())?;
        }
        f.write_str("]")
    }
}

/// One instruction of the simulated ISA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instruction {
    /// `movq rax, xmm0` reads the low qword; `movq rax, ymm0, 2` reads lane 2.
    MovqGprFromSimd {
        dst: Gpr,
        src: SimdReg,
        lane: u8,
    },
    /// Loads an immediate into the full configured SIMD width.
    MovSimdImm {
        dst: SimdReg,
        value: SimdValue,
    },
    AndImm {
        dst: Gpr,
        imm: u64,
    },
    ShlImm {
        dst: Gpr,
        imm: u8,
    },
    ShrImm {
        dst: Gpr,
        imm: u8,
    },
    /// `mov dword [mem + rax], imm`; the operand names a symbol or an index register.
    StoreDword {
        mem: MemOperand,
        value: u32,
    },
    /// `mov dword [addr], imm`
    StoreDwordAbs {
        addr: u64,
        value: u32,
    },
    Load {
        dst: Gpr,
        mem: MemOperand,
    },
    Clflush {
        mem: MemOperand,
    },
    /// Timed reload of one line; the latency lands in `dst` and in the
    /// process's timing record.
    ProbeTimed {
        dst: Gpr,
        mem: MemOperand,
    },
    Xbegin {
        abort: String,
    },
    Xend,
    Xabort {
        code: u8,
    },
    Call {
        target: String,
    },
    Ret,
    Jmp {
        target: String,
    },
    Pause,
    /// `mov [rsp], label`
    StoreRetAddr {
        target: String,
    },
    Pxor {
        dst: SimdReg,
        src: SimdReg,
    },
    Aesenc {
        dst: SimdReg,
        src: SimdReg,
    },
    Aesenclast {
        dst: SimdReg,
        src: SimdReg,
    },
    Yield,
}

impl Instruction {
    /// Whether the instruction needs the FPU/SIMD unit and thus raises #NM
    /// while `cr0.ts` is set.
    pub fn touches_simd(&self) -> bool {
        matches!(
            self,
            Instruction::MovqGprFromSimd { .. }
                | Instruction::MovSimdImm { .. }
                | Instruction::Pxor { .. }
                | Instruction::Aesenc { .. }
                | Instruction::Aesenclast { .. }
        )
    }

    /// Label this instruction refers to, if any.
    pub fn label_ref(&self) -> Option<&str> {
        match self {
            Instruction::Xbegin { abort } => Some(abort),
            Instruction::Call { target }
            | Instruction::Jmp { target }
            | Instruction::StoreRetAddr { target } => Some(target),
            _ => None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        match self {
            MovqGprFromSimd { dst, src, lane: 0 } => write!(f, "movq {dst}, {src}"),
            MovqGprFromSimd { dst, src, lane } => write!(f, "movq {dst}, {src}, {lane}"),
            MovSimdImm { dst, value } => write!(f, "movsimd {dst}, {value}"),
            AndImm { dst, imm } => {
                write!(f, "and {dst}, ")?;
                fmt_number(f, *imm)
            }
            ShlImm { dst, imm } => write!(f, "shl {dst}, {imm}"),
            ShrImm { dst, imm } => write!(f, "shr {dst}, {imm}"),
            StoreDword { mem, value } => write!(f, "mov dword {mem}, {value}"),
            StoreDwordAbs { addr, value } => {
                write!(f, "mov dword {}, {value}", MemOperand::absolute(*addr))
            }
            Load { dst, mem } => write!(f, "mov {dst}, {mem}"),
            Clflush { mem } => write!(f, "clflush {mem}"),
            ProbeTimed { dst, mem } => write!(f, "probe {dst}, {mem}"),
            Xbegin { abort } => write!(f, "xbegin {abort}"),
            Xend => f.write_str("xend"),
            Xabort { code: 0 } => f.write_str("xabort"),
            Xabort { code } => write!(f, "xabort {code}"),
            Call { target } => write!(f, "call {target}"),
            Ret => f.write_str("ret"),
            Jmp { target } => write!(f, "jmp {target}"),
            Pause => f.write_str("pause"),
            StoreRetAddr { target } => write!(f, "mov [rsp], {target}"),
            Pxor { dst, src } => write!(f, "pxor {dst}, {src}"),
            Aesenc { dst, src } => write!(f, "aesenc {dst}, {src}"),
            Aesenclast { dst, src } => write!(f, "aesenclast {dst}, {src}"),
            Yield => f.write_str("yield"),
        }
    }
}

/// An assembled program: instructions, resolved labels and an entry point.
///
/// A label may be bound one past the last instruction; reaching it halts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Program {
    instructions: Vec<Instruction>,
    labels: BTreeMap<String, usize>,
    entry: usize,
}

impl Program {
    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn labels(&self) -> &BTreeMap<String, usize> {
        &self.labels
    }

    pub fn entry(&self) -> usize {
        self.entry
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Instruction> {
        self.instructions.get(index)
    }

    pub fn label(&self, name: &str) -> Option<usize> {
        self.labels.get(name).copied()
    }
}

/// Incrementally builds a [`Program`], checking label references on `build`.
#[derive(Debug, Default, Clone)]
pub struct ProgramBuilder {
    instructions: Vec<Instruction>,
    labels: BTreeMap<String, usize>,
    duplicate: Option<String>,
}

impl ProgramBuilder {
    pub fn new() -> ProgramBuilder {
        ProgramBuilder::default()
    }

    pub fn push(&mut self, instruction: Instruction) -> &mut Self {
        self.instructions.push(instruction);
        self
    }

    pub fn extend<I: IntoIterator<Item = Instruction>>(&mut self, instructions: I) -> &mut Self {
        self.instructions.extend(instructions);
        self
    }

    /// Binds `name` to the position of the next pushed instruction.
    pub fn label(&mut self, name: &str) -> &mut Self {
        if self
            .labels
            .insert(name.to_string(), self.instructions.len())
            .is_some()
            && self.duplicate.is_none()
        {
            self.duplicate = Some(name.to_string());
        }
        self
    }

    /// Appends another program, prefixing none of its labels.
    pub fn append(&mut self, program: &Program) -> &mut Self {
        let base = self.instructions.len();
        for (name, index) in &program.labels {
            if self.labels.insert(name.clone(), base + index).is_some() && self.duplicate.is_none()
            {
                self.duplicate = Some(name.clone());
            }
        }
        self.instructions
            .extend(program.instructions.iter().cloned());
        self
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn build(self) -> Result<Program, AsmError> {
        if let Some(name) = self.duplicate {
            return Err(AsmError::DuplicateLabel(name));
        }
        for instruction in &self.instructions {
            if let Some(name) = instruction.label_ref() {
                if !self.labels.contains_key(name) {
                    return Err(AsmError::UndefinedLabel(name.to_string()));
                }
            }
            if let Instruction::StoreDword { mem, .. } = instruction {
                if mem.is_absolute() {
                    return Err(AsmError::BadOperand {
                        line: 0,
                        detail: format!("`{mem}` is absolute; use StoreDwordAbs"),
                    });
                }
            }
        }
        Ok(Program {
            instructions: self.instructions,
            labels: self.labels,
            entry: 0,
        })
    }
}

impl From<Vec<Instruction>> for ProgramBuilder {
    fn from(instructions: Vec<Instruction>) -> Self {
        ProgramBuilder {
            instructions,
            ..ProgramBuilder::default()
        }
    }
}

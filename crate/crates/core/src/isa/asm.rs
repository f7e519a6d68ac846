use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{Gpr, Instruction, MemOperand, Program, ProgramBuilder, SimdReg, SimdValue};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: {detail}")]
    BadOperand { line: usize, detail: String },
    #[error("label `{0}` defined more than once")]
    DuplicateLabel(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
}

/// Assembles simulator-dialect source into a [`Program`].
///
/// Accepts LF or CRLF line endings. Labels may share a line with an
/// instruction (`top: pause`).
pub fn assemble(text: &str) -> Result<Program, AsmError> {
    let mut builder = ProgramBuilder::new();
    for (number, raw) in text.lines().enumerate() {
        let line = number + 1;
        let mut rest = raw.split(';').next().unwrap_or("").trim();
        while let Some((label, tail)) = split_label(rest) {
            builder.label(label);
            rest = tail.trim();
        }
        if rest.is_empty() {
            continue;
        }
        builder.push(parse_instruction(line, rest)?);
    }
    builder.build()
}

/// Renders a program back into source that [`assemble`] maps to the same
/// instruction sequence and label bindings.
pub fn disassemble(program: &Program) -> String {
    let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (name, &index) in program.labels() {
        by_index.entry(index).or_default().push(name);
    }
    let mut out = String::new();
    for index in 0..=program.len() {
        for name in by_index.get(&index).into_iter().flatten() {
            let _ = writeln!(out, "{name}:");
        }
        if let Some(instruction) = program.get(index) {
            let _ = writeln!(out, "  {instruction}");
        }
    }
    out
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn split_label(s: &str) -> Option<(&str, &str)> {
    let (head, tail) = s.split_once(':')?;
    let head = head.trim();
    is_ident(head).then_some((head, tail))
}

struct Line<'a> {
    line: usize,
    mnemonic: String,
    operands: Vec<&'a str>,
}

impl<'a> Line<'a> {
    fn bad(&self, detail: impl Into<String>) -> AsmError {
        AsmError::BadOperand {
            line: self.line,
            detail: detail.into(),
        }
    }

    fn expect_count(&self, count: usize) -> Result<(), AsmError> {
        if self.operands.len() == count {
            Ok(())
        } else {
            Err(self.bad(format!(
                "`{}` takes {count} operand(s), got {}",
                self.mnemonic,
                self.operands.len()
            )))
        }
    }

    fn gpr(&self, i: usize) -> Result<Gpr, AsmError> {
        Gpr::from_name(self.operands[i]).ok_or_else(|| {
            self.bad(format!(
                "expected a general purpose register, got `{}`",
                self.operands[i]
            ))
        })
    }

    fn simd(&self, i: usize) -> Result<SimdReg, AsmError> {
        SimdReg::from_name(self.operands[i]).ok_or_else(|| {
            self.bad(format!(
                "expected a SIMD register, got `{}`",
                self.operands[i]
            ))
        })
    }

    fn number(&self, i: usize) -> Result<u64, AsmError> {
        parse_number(self.operands[i])
            .ok_or_else(|| self.bad(format!("expected an immediate, got `{}`", self.operands[i])))
    }

    fn label(&self, i: usize) -> Result<String, AsmError> {
        let s = self.operands[i];
        if is_ident(s) {
            Ok(s.to_string())
        } else {
            Err(self.bad(format!("expected a label, got `{s}`")))
        }
    }

    fn mem(&self, i: usize) -> Result<MemOperand, AsmError> {
        parse_mem(self.operands[i]).map_err(|detail| self.bad(detail))
    }

    fn shift(&self, i: usize) -> Result<u8, AsmError> {
        let n = self.number(i)?;
        if n < 64 {
            Ok(n as u8)
        } else {
            Err(self.bad(format!("shift count {n} out of range 0..63")))
        }
    }

    fn dword(&self, i: usize) -> Result<u32, AsmError> {
        let n = self.number(i)?;
        u32::try_from(n).map_err(|_| self.bad(format!("dword immediate {n} does not fit 32 bits")))
    }
}

fn parse_number(s: &str) -> Option<u64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16).ok()
    } else {
        s.replace('_', "").parse().ok()
    }
}

fn parse_mem(s: &str) -> Result<MemOperand, String> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| format!("expected a memory operand, got `{s}`"))?;
    let mut mem = MemOperand {
        symbol: None,
        index: None,
        disp: 0,
    };
    let mut terms = Vec::new();
    let mut sign = 1i64;
    let mut current = String::new();
    for c in inner.chars() {
        match c {
            '+' | '-' => {
                terms.push((sign, std::mem::take(&mut current)));
                sign = if c == '-' { -1 } else { 1 };
            }
            _ => current.push(c),
        }
    }
    terms.push((sign, current));
    for (index, (sign, term)) in terms.into_iter().enumerate() {
        let term = term.trim();
        if term.is_empty() {
            // a leading sign leaves an empty first term
            if index == 0 && sign == 1 {
                continue;
            }
            return Err(format!("malformed memory operand `{s}`"));
        }
        if let Some(n) = parse_number(term) {
            mem.disp = mem.disp.wrapping_add(sign.wrapping_mul(n as i64));
        } else if let Some(gpr) = Gpr::from_name(term) {
            if sign < 0 || mem.index.replace(gpr).is_some() {
                return Err(format!("unsupported register term in `{s}`"));
            }
        } else if is_ident(term) && SimdReg::from_name(term).is_none() {
            if sign < 0 || mem.symbol.replace(term.to_string()).is_some() {
                return Err(format!("unsupported symbol term in `{s}`"));
            }
        } else {
            return Err(format!("bad term `{term}` in memory operand"));
        }
    }
    Ok(mem)
}

fn strip_size<'a>(operand: &'a str, keyword: &str) -> Option<&'a str> {
    let lower = operand.get(..keyword.len())?;
    if lower.eq_ignore_ascii_case(keyword) {
        let rest = &operand[keyword.len()..];
        rest.starts_with(char::is_whitespace).then(|| rest.trim())
    } else {
        None
    }
}

fn parse_instruction(line: usize, text: &str) -> Result<Instruction, AsmError> {
    let (mnemonic, rest) = match text.split_once(char::is_whitespace) {
        Some((m, r)) => (m, r.trim()),
        None => (text, ""),
    };
    let operands = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    let l = Line {
        line,
        mnemonic: mnemonic.to_ascii_lowercase(),
        operands,
    };
    let instruction = match l.mnemonic.as_str() {
        "movq" => {
            let lane = match l.operands.len() {
                2 => 0,
                3 => {
                    let lane = l.number(2)?;
                    u8::try_from(lane)
                        .ok()
                        .filter(|&n| n < 8)
                        .ok_or_else(|| l.bad(format!("lane {lane} out of range 0..7")))?
                }
                _ => return Err(l.bad("`movq` takes 2 or 3 operands")),
            };
            Instruction::MovqGprFromSimd {
                dst: l.gpr(0)?,
                src: l.simd(1)?,
                lane,
            }
        }
        "movsimd" => {
            l.expect_count(2)?;
            let value: SimdValue = l.operands[1].parse().map_err(|e| l.bad(format!("{e}")))?;
            Instruction::MovSimdImm {
                dst: l.simd(0)?,
                value,
            }
        }
        "and" => {
            l.expect_count(2)?;
            Instruction::AndImm {
                dst: l.gpr(0)?,
                imm: l.number(1)?,
            }
        }
        "shl" => {
            l.expect_count(2)?;
            Instruction::ShlImm {
                dst: l.gpr(0)?,
                imm: l.shift(1)?,
            }
        }
        "shr" => {
            l.expect_count(2)?;
            Instruction::ShrImm {
                dst: l.gpr(0)?,
                imm: l.shift(1)?,
            }
        }
        "mov" => parse_mov(&l)?,
        "clflush" => {
            l.expect_count(1)?;
            Instruction::Clflush { mem: l.mem(0)? }
        }
        "probe" => {
            l.expect_count(2)?;
            Instruction::ProbeTimed {
                dst: l.gpr(0)?,
                mem: l.mem(1)?,
            }
        }
        "xbegin" => {
            l.expect_count(1)?;
            Instruction::Xbegin { abort: l.label(0)? }
        }
        "xend" => {
            l.expect_count(0)?;
            Instruction::Xend
        }
        "xabort" => {
            let code = match l.operands.len() {
                0 => 0,
                1 => {
                    let n = l.number(0)?;
                    u8::try_from(n).map_err(|_| l.bad(format!("abort code {n} exceeds 8 bits")))?
                }
                _ => return Err(l.bad("`xabort` takes at most one operand")),
            };
            Instruction::Xabort { code }
        }
        "call" => {
            l.expect_count(1)?;
            Instruction::Call {
                target: l.label(0)?,
            }
        }
        "jmp" => {
            l.expect_count(1)?;
            Instruction::Jmp {
                target: l.label(0)?,
            }
        }
        "ret" => {
            l.expect_count(0)?;
            Instruction::Ret
        }
        "pause" => {
            l.expect_count(0)?;
            Instruction::Pause
        }
        "yield" => {
            l.expect_count(0)?;
            Instruction::Yield
        }
        "pxor" | "aesenc" | "aesenclast" => {
            l.expect_count(2)?;
            let (dst, src) = (l.simd(0)?, l.simd(1)?);
            match l.mnemonic.as_str() {
                "pxor" => Instruction::Pxor { dst, src },
                "aesenc" => Instruction::Aesenc { dst, src },
                _ => Instruction::Aesenclast { dst, src },
            }
        }
        _ => {
            return Err(AsmError::UnknownMnemonic {
                line,
                mnemonic: mnemonic.to_string(),
            })
        }
    };
    Ok(instruction)
}

fn parse_mov(l: &Line<'_>) -> Result<Instruction, AsmError> {
    l.expect_count(2)?;
    let (dst, src) = (l.operands[0], l.operands[1]);
    if let Some(target) = strip_size(dst, "dword") {
        let mem = parse_mem(target).map_err(|d| l.bad(d))?;
        let value = l.dword(1)?;
        return Ok(if mem.is_absolute() {
            Instruction::StoreDwordAbs {
                addr: mem.disp as u64,
                value,
            }
        } else {
            Instruction::StoreDword { mem, value }
        });
    }
    if dst.starts_with('[') {
        let mem = l.mem(0)?;
        if mem.symbol.is_none() && mem.index == Some(Gpr::RSP) && mem.disp == 0 {
            return Ok(Instruction::StoreRetAddr {
                target: l.label(1)?,
            });
        }
        return Err(l.bad(format!(
            "unsupported store `mov {dst}, {src}`; use `mov dword`"
        )));
    }
    let gpr = l.gpr(0)?;
    let src = strip_size(src, "qword").unwrap_or(src);
    if src.starts_with('[') {
        return Ok(Instruction::Load {
            dst: gpr,
            mem: parse_mem(src).map_err(|d| l.bad(d))?,
        });
    }
    Err(l.bad(format!("unsupported operands `mov {dst}, {src}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::SimdView;

    const TSX_GADGET: &str = "  xbegin abort
  movq rax, xmm0
  and rax, 1
  shl rax, 6
  mov dword [mem + rax], 0
  xabort
abort:
";

    #[test]
    fn single_movq() {
        let p = assemble("movq rax, xmm0").unwrap();
        assert_eq!(
            p.instructions(),
            &[Instruction::MovqGprFromSimd {
                dst: Gpr::RAX,
                src: SimdReg::xmm(0),
                lane: 0
            }]
        );
    }

    #[test]
    fn empty_source() {
        let p = assemble("").unwrap();
        assert!(p.is_empty());
        assert!(p.labels().is_empty());
        assert_eq!(disassemble(&p), "");
    }

    #[test]
    fn tsx_listing_binds_abort_past_xabort() {
        let p = assemble(TSX_GADGET).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p.label("abort"), Some(6));
        assert_eq!(p.get(5), Some(&Instruction::Xabort { code: 0 }));
    }

    #[test]
    fn comments_crlf_and_blank_lines() {
        let p = assemble("  mov  dword [0], 0 ; causes #PF\r\n\r\n; only a comment\r\nret\r\n")
            .unwrap();
        assert_eq!(
            p.instructions(),
            &[
                Instruction::StoreDwordAbs { addr: 0, value: 0 },
                Instruction::Ret
            ]
        );
    }

    #[test]
    fn mov_forms() {
        let p = assemble(
            "mov [rsp], destination\nmov rax, [mem + 64]\nmov rcx, qword [0x2000 + rdx]\ndestination:",
        )
        .unwrap();
        assert_eq!(
            p.get(0),
            Some(&Instruction::StoreRetAddr {
                target: "destination".into()
            })
        );
        assert_eq!(
            p.get(1),
            Some(&Instruction::Load {
                dst: Gpr::RAX,
                mem: MemOperand::symbol("mem", 64)
            })
        );
        assert!(
            matches!(p.get(2), Some(Instruction::Load { mem, .. }) if mem.index == Some(Gpr::RDX) && mem.disp == 0x2000)
        );
    }

    #[test]
    fn lane_alias_and_views() {
        let p = assemble("movq rbx, ymm7, 3").unwrap();
        assert_eq!(
            p.get(0),
            Some(&Instruction::MovqGprFromSimd {
                dst: Gpr::RBX,
                src: SimdReg::new(7, SimdView::Ymm).unwrap(),
                lane: 3
            })
        );
        assert!(assemble("movq rbx, ymm7, 8").is_err());
    }

    #[test]
    fn errors_name_the_culprit() {
        assert_eq!(
            assemble("nop").unwrap_err(),
            AsmError::UnknownMnemonic {
                line: 1,
                mnemonic: "nop".into()
            }
        );
        assert!(matches!(
            assemble("pause\nshl rax, 64").unwrap_err(),
            AsmError::BadOperand { line: 2, .. }
        ));
        assert!(matches!(
            assemble("and xmm0, 1").unwrap_err(),
            AsmError::BadOperand { line: 1, .. }
        ));
        assert_eq!(
            assemble("jmp missing").unwrap_err(),
            AsmError::UndefinedLabel("missing".into())
        );
        assert_eq!(
            assemble("a:\npause\na:").unwrap_err(),
            AsmError::DuplicateLabel("a".into())
        );
        assert!(matches!(
            assemble("mov dword [mem + rax], 0x100000000").unwrap_err(),
            AsmError::BadOperand { .. }
        ));
    }

    #[test]
    fn label_on_instruction_line() {
        let p = assemble("top: pause\njmp top").unwrap();
        assert_eq!(p.label("top"), Some(0));
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn disassemble_basic_listing() {
        let source = "movq rax, xmm0\nand  rax, 1\nshl  rax, 6\nmov  dword [mem + rax], 0\n";
        let p = assemble(source).unwrap();
        let text = disassemble(&p);
        let normalize = |s: &str| -> Vec<String> {
            s.lines()
                .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
                .filter(|l| !l.is_empty())
                .collect()
        };
        assert_eq!(normalize(&text), normalize(source));
        assert_eq!(assemble(&text).unwrap(), p);
    }
}

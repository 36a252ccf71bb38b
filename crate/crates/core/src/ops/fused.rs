//! Straight-line elementwise programs produced by operator fusion.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::shape::Element;

/// Instruction count limit; keeps per-element evaluation on the stack.
pub const MAX_FUSED_INSTRS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusedArg {
    Input(usize),
    Temp(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusedInstr {
    Add(FusedArg, FusedArg),
    Mul(FusedArg, FusedArg),
    AddScalar(FusedArg, f64),
    MulScalar(FusedArg, f64),
}

/// Each instruction writes the next temporary; the last one is the result.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedProgram {
    pub num_inputs: usize,
    pub instrs: Vec<FusedInstr>,
}

impl FusedProgram {
    pub fn eval<T: Element>(&self, input: impl Fn(usize) -> T) -> T {
        let mut temps = [T::zero(); MAX_FUSED_INSTRS];
        let load = |a: FusedArg, temps: &[T]| match a {
            FusedArg::Input(i) => input(i),
            FusedArg::Temp(t) => temps[t],
        };
        for (k, instr) in self.instrs.iter().enumerate() {
            temps[k] = match *instr {
                FusedInstr::Add(a, b) => load(a, &temps) + load(b, &temps),
                FusedInstr::Mul(a, b) => load(a, &temps) * load(b, &temps),
                FusedInstr::AddScalar(a, c) => load(a, &temps) + T::from_f64(c),
                FusedInstr::MulScalar(a, c) => load(a, &temps) * T::from_f64(c),
            };
        }
        temps[self.instrs.len() - 1]
    }

    /// Compact text form, e.g. `mul:i0:i1;adds:t0:1.0`.
    pub fn encode(&self) -> String {
        let arg = |a: FusedArg| match a {
            FusedArg::Input(i) => format!("i{i}"),
            FusedArg::Temp(t) => format!("t{t}"),
        };
        let mut s = String::new();
        for (k, instr) in self.instrs.iter().enumerate() {
            if k > 0 {
                s.push(';');
            }
            let _ = match *instr {
                FusedInstr::Add(a, b) => write!(s, "add:{}:{}", arg(a), arg(b)),
                FusedInstr::Mul(a, b) => write!(s, "mul:{}:{}", arg(a), arg(b)),
                FusedInstr::AddScalar(a, c) => write!(s, "adds:{}:{:?}", arg(a), c),
                FusedInstr::MulScalar(a, c) => write!(s, "muls:{}:{:?}", arg(a), c),
            };
        }
        s
    }

    pub fn decode(num_inputs: usize, text: &str) -> Result<Self, String> {
        let mut instrs = Vec::new();
        for (k, part) in text.split(';').enumerate() {
            let fields: Vec<&str> = part.split(':').collect();
            if fields.len() != 3 {
                return Err(format!("bad instruction `{part}`"));
            }
            let arg = |s: &str| -> Result<FusedArg, String> {
                let (kind, idx) = s.split_at(1.min(s.len()));
                let idx: usize = idx.parse().map_err(|_| format!("bad operand `{s}`"))?;
                match kind {
                    "i" if idx < num_inputs => Ok(FusedArg::Input(idx)),
                    "t" if idx < k => Ok(FusedArg::Temp(idx)),
                    _ => Err(format!("bad operand `{s}`")),
                }
            };
            let scalar = |s: &str| s.parse::<f64>().map_err(|_| format!("bad scalar `{s}`"));
            instrs.push(match fields[0] {
                "add" => FusedInstr::Add(arg(fields[1])?, arg(fields[2])?),
                "mul" => FusedInstr::Mul(arg(fields[1])?, arg(fields[2])?),
                "adds" => FusedInstr::AddScalar(arg(fields[1])?, scalar(fields[2])?),
                "muls" => FusedInstr::MulScalar(arg(fields[1])?, scalar(fields[2])?),
                other => return Err(format!("unknown fused opcode `{other}`")),
            });
        }
        if instrs.is_empty() || instrs.len() > MAX_FUSED_INSTRS {
            return Err(format!("fused program length {} out of range", instrs.len()));
        }
        Ok(FusedProgram { num_inputs, instrs })
    }
}

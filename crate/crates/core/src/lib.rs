//! Deterministic simulator of lazy FPU context-switch leakage.
//!
//! An unprivileged attacker process reads another process's SIMD registers
//! through the instructions that run transiently after a device-not-available
//! fault. The crate models the pieces needed to reproduce this end to end:
//!
//! - [`isa`]: the instruction set and its assembly dialect,
//! - [`machine`]: architectural execution plus the transient engine, RTM and
//!   the return stack buffer,
//! - [`cache`]: the Flush+Reload channel,
//! - [`os`]: processes, round-robin scheduling and lazy or eager FPU switching,
//! - [`attack`]: leak gadgets and register-file recovery,
//! - [`harness`]: scenarios, the evaluation table, reports and the CLI.

pub mod attack;
pub mod cache;
pub mod harness;
pub mod isa;
pub mod machine;
pub mod os;

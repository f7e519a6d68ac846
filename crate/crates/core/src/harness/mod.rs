//! Scenarios, evaluation and reporting.
//!
//! A scenario fixes everything a run depends on: the FPU policy, the CPU's
//! vulnerability, the victim, the attack and the cost model. Running the
//! same scenario twice produces the same result bit for bit.

pub mod aesni;
pub mod cli;
mod eval;
pub mod report;
mod scenario;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::collections::BTreeMap;

use crate::attack::{
    run_attack, AttackConfig, AttackError, AttackResult, Variant, DEFAULT_PROBE_BASE,
};
use crate::cache::LatencyModel;
use crate::isa::{
    AsmError, Instruction, Program, ProgramBuilder, SimdReg, SimdValue, SimdView, REGISTER_COUNT,
};
use crate::machine::{CostModel, Machine, MachineConfig, MachineError, SimdFile, PROBE_SYMBOL};
use crate::os::{zeroed_fpu, FpuMode, OsError, Pid, System, DEFAULT_SLICE_CYCLES};

pub use aesni::Block;
pub use eval::{evaluate, DefeatCell, EvalReport, EvalRow, ScalingRow};
pub use scenario::parse_scenario;

/// Secret sets a mutating victim cycles through, one per time it runs.
pub const MUTATING_SECRET_SETS: usize = 8;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {source}")]
    Asm {
        path: String,
        #[source]
        source: AsmError,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VictimKind {
    /// Loads seeded random values into every register.
    Random { seed: u64 },
    /// Encrypts one block with AES-NI, round keys in xmm0-xmm10.
    Aesni { cipher_key: Block, plaintext: Block },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub mode: FpuMode,
    pub cpu_vulnerable: bool,
    pub variant: Variant,
    pub bits_per_attempt: u32,
    pub repeats: u32,
    pub victim: VictimKind,
    /// The victim loads a different secret set each time it runs.
    pub victim_mutates: bool,
    pub slice_cycles: u64,
    pub costs: CostModel,
    /// Eviction probability of a hot probe line during signal delivery.
    pub noise: f64,
    /// Seeds the noise generator.
    pub seed: u64,
    pub clock_hz: f64,
    pub width: u32,
    pub registers: Vec<u8>,
    /// Cycle budget of `run` with custom programs.
    pub max_cycles: u64,
    #[serde(skip)]
    pub victim_program: Option<Program>,
    #[serde(skip)]
    pub attacker_program: Option<Program>,
    pub attacker_handler: Option<String>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            mode: FpuMode::Lazy,
            cpu_vulnerable: true,
            variant: Variant::Tsx,
            bits_per_attempt: 1,
            repeats: 1,
            victim: VictimKind::Random { seed: 0 },
            victim_mutates: false,
            slice_cycles: DEFAULT_SLICE_CYCLES,
            costs: CostModel::default(),
            noise: 0.0,
            seed: 0,
            clock_hz: crate::attack::DEFAULT_CLOCK_HZ,
            width: 256,
            registers: (0..REGISTER_COUNT).collect(),
            max_cycles: 10_000_000,
            victim_program: None,
            attacker_program: None,
            attacker_handler: None,
        }
    }
}

/// A booted scenario: victim and attacker processes, the victim first.
pub struct Simulation {
    pub system: System,
    pub victim: Pid,
    pub attacker: Pid,
    /// Register file of the victim's first secret set.
    pub truth: SimdFile,
}

/// Seeded register file of `width`-bit random values.
pub fn random_secrets(seed: u64, width: u32) -> SimdFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|_| {
        let lanes: [u64; 8] = std::array::from_fn(|_| rng.gen());
        SimdValue::from_lanes(lanes).truncate(width)
    })
}

fn register_view(width: u32) -> SimdView {
    match width {
        128 => SimdView::Xmm,
        256 => SimdView::Ymm,
        _ => SimdView::Zmm,
    }
}

/// `top: load every register; yield; ...; jmp top`, one load block per set.
pub fn secret_loader(sets: &[SimdFile], width: u32) -> Program {
    let view = register_view(width);
    let mut b = ProgramBuilder::new();
    b.label("top");
    for set in sets {
        for (i, value) in set.iter().enumerate() {
            b.push(Instruction::MovSimdImm {
                dst: SimdReg::new(i as u8, view).expect("index below register count"),
                value: *value,
            });
        }
        b.push(Instruction::Yield);
    }
    b.push(Instruction::Jmp {
        target: "top".into(),
    });
    b.build().expect("loader labels are well formed")
}

fn looped(body: &Program) -> Program {
    let mut b = ProgramBuilder::new();
    b.label("top");
    b.append(body);
    b.push(Instruction::Jmp {
        target: "top".into(),
    });
    b.build().expect("loop labels are well formed")
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(ScenarioError::Invalid(format!(
                "noise {} is outside [0, 1]",
                self.noise
            )));
        }
        if self.clock_hz.is_nan() || self.clock_hz <= 0.0 {
            return Err(ScenarioError::Invalid("clock_hz must be positive".into()));
        }
        if self.slice_cycles == 0 {
            return Err(ScenarioError::Invalid(
                "slice_cycles must be positive".into(),
            ));
        }
        if self.registers.is_empty() {
            return Err(ScenarioError::Invalid("no target registers".into()));
        }
        Ok(())
    }

    /// Machine settings; `mem` is bound to the default probe base so custom
    /// programs can use the probe array too.
    pub fn machine_config(&self) -> MachineConfig {
        let mut symbols = BTreeMap::new();
        symbols.insert(PROBE_SYMBOL.to_string(), DEFAULT_PROBE_BASE);
        MachineConfig {
            symbols,
            simd_width: self.width,
            costs: self.costs,
            latency: LatencyModel {
                noise_eviction_probability: self.noise,
                seed: self.seed,
                ..LatencyModel::default()
            },
            ..MachineConfig::default()
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            variant: self.variant,
            target_registers: self.registers.clone(),
            register_width: self.width,
            bits_per_attempt: self.bits_per_attempt,
            repeats_per_group: self.repeats,
            clock_hz: self.clock_hz,
            ..AttackConfig::default()
        }
    }

    /// Victim program and the register file it establishes first.
    pub fn victim(&self) -> (Program, SimdFile) {
        if let Some(program) = &self.victim_program {
            return (program.clone(), zeroed_fpu());
        }
        match &self.victim {
            VictimKind::Random { seed } => {
                let sets: Vec<SimdFile> = if self.victim_mutates {
                    (0..MUTATING_SECRET_SETS as u64)
                        .map(|i| random_secrets(seed.wrapping_add(i), self.width))
                        .collect()
                } else {
                    vec![random_secrets(*seed, self.width)]
                };
                (secret_loader(&sets, self.width), sets[0])
            }
            VictimKind::Aesni {
                cipher_key,
                plaintext,
            } => {
                let program = looped(&aesni::make_aesni_victim(cipher_key, plaintext));
                let mut truth = zeroed_fpu();
                for (i, key) in aesni::expand_key(cipher_key).iter().enumerate() {
                    truth[i] = aesni::block_to_register(key);
                }
                truth[aesni::DATA_REGISTER as usize] =
                    aesni::block_to_register(&aesni::encrypt(cipher_key, plaintext));
                (program, truth)
            }
        }
    }

    /// Boots the victim and the attacker. The victim runs first; the
    /// attacker starts with zeroed SIMD registers.
    pub fn boot(&self) -> Result<Simulation, ScenarioError> {
        self.validate()?;
        let mut machine = Machine::new(self.machine_config())?;
        machine.control.cpu_vulnerable = self.cpu_vulnerable;
        let mut system = System::new(machine, self.mode, self.slice_cycles);
        let (program, truth) = self.victim();
        let victim = system.spawn("victim", program, None, zeroed_fpu())?;
        let attacker = system.spawn(
            "attacker",
            self.attacker_program.clone().unwrap_or_default(),
            self.attacker_handler.as_deref(),
            zeroed_fpu(),
        )?;
        Ok(Simulation {
            system,
            victim,
            attacker,
            truth,
        })
    }

    /// Boots the scenario and runs its attack.
    pub fn run_attack(&self) -> Result<AttackOutcome, ScenarioError> {
        let mut sim = self.boot()?;
        let result = run_attack(&mut sim.system, sim.attacker, &self.attack_config())?;
        let attacker = *sim.system.stats(sim.attacker)?;
        Ok(AttackOutcome::new(result, &sim.truth, attacker))
    }
}

/// An attack result next to the ground truth it is judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub result: AttackResult,
    pub truth: Vec<SimdValue>,
    pub exact: Vec<bool>,
    pub exact_registers: usize,
    pub correct_bits: u64,
    pub total_bits: u64,
    pub attacker_stats: crate::os::ProcessStats,
}

impl AttackOutcome {
    pub fn new(
        result: AttackResult,
        truth: &SimdFile,
        attacker_stats: crate::os::ProcessStats,
    ) -> Self {
        let width = result.register_width;
        let truth: Vec<SimdValue> = result
            .recovered
            .iter()
            .map(|r| truth[r.index as usize])
            .collect();
        let exact: Vec<bool> = result
            .recovered
            .iter()
            .zip(&truth)
            .map(|(r, t)| r.value == *t)
            .collect();
        let correct_bits = result
            .recovered
            .iter()
            .zip(&truth)
            .map(|(r, t)| width as u64 - r.value.xor(t).truncate(width).count_ones() as u64)
            .sum();
        AttackOutcome {
            exact_registers: exact.iter().filter(|&&e| e).count(),
            total_bits: width as u64 * result.recovered.len() as u64,
            correct_bits,
            exact,
            truth,
            result,
            attacker_stats,
        }
    }
}

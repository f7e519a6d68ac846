use serde::{Deserialize, Serialize};

use crate::attack::Variant;
use crate::isa::REGISTER_COUNT;
use crate::os::FpuMode;

use super::{AttackOutcome, Scenario, ScenarioError, VictimKind};

/// Bit groups per attempt the scaling comparison runs against one bit.
pub const MULTI_BIT: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: Variant,
    pub cycles_per_register: f64,
    pub throughput_bytes_per_sec: f64,
    pub throughput_mib_per_sec: f64,
    pub attempts: u64,
    pub restarted_attempts: u64,
    pub inconclusive_groups: u64,
    pub exact_registers: usize,
    pub registers: usize,
    /// Cycles for a snapshot of all sixteen registers.
    pub snapshot_cycles: f64,
    pub snapshot_fits_in_slice: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub variant: Variant,
    pub bits_per_attempt: u32,
    pub cycles_per_register_single_bit: f64,
    pub cycles_per_register: f64,
    /// Throughput relative to one bit per attempt.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefeatCell {
    pub mode: FpuMode,
    pub cpu_vulnerable: bool,
    pub variant: Variant,
    pub exact_registers: usize,
    pub registers: usize,
    /// Whether two victims with different secrets produced different results.
    pub leaks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clock_hz: f64,
    pub width: u32,
    pub slice_cycles: u64,
    pub bits_per_attempt: u32,
    pub rows: Vec<EvalRow>,
    pub scaling: Vec<ScalingRow>,
    pub defeat: Vec<DefeatCell>,
}

impl EvalReport {
    pub fn row(&self, variant: Variant) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn row(scenario: &Scenario, outcome: &AttackOutcome) -> EvalRow {
    let result = &outcome.result;
    let snapshot_cycles = result.cycles_per_register * REGISTER_COUNT as f64;
    EvalRow {
        variant: result.variant,
        cycles_per_register: result.cycles_per_register,
        throughput_bytes_per_sec: result.effective_throughput,
        throughput_mib_per_sec: result.throughput_mib_per_s(),
        attempts: result.attempts,
        restarted_attempts: result.restarted_attempts,
        inconclusive_groups: result.inconclusive_groups,
        exact_registers: outcome.exact_registers,
        registers: result.recovered.len(),
        snapshot_cycles,
        snapshot_fits_in_slice: snapshot_cycles <= scenario.slice_cycles as f64,
    }
}

type Job<'a, T> = Box<dyn FnOnce() -> T + Send + 'a>;

/// Runs every job on its own thread and returns the results in job order.
fn parallel<T: Send>(jobs: Vec<Job<'_, T>>) -> Vec<T> {
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|job| s.spawn(job)).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

/// The evaluation table: each suppressed variant against the random-secret
/// victim of `base`, the multi-bit speedup, and the defeat matrix over FPU
/// policy and CPU vulnerability for every variant.
pub fn evaluate(base: &Scenario) -> Result<EvalReport, ScenarioError> {
    base.validate()?;
    let victim_seed = match base.victim {
        VictimKind::Random { seed } => seed,
        VictimKind::Aesni { .. } => base.seed,
    };
    let random = Scenario {
        victim: VictimKind::Random { seed: victim_seed },
        victim_mutates: false,
        mode: FpuMode::Lazy,
        cpu_vulnerable: true,
        ..base.clone()
    };

    let mut table_jobs: Vec<Job<'_, Result<AttackOutcome, ScenarioError>>> = Vec::new();
    for variant in Variant::SUPPRESSED {
        for k in [1, MULTI_BIT] {
            let scenario = Scenario {
                variant,
                bits_per_attempt: k,
                ..random.clone()
            };
            table_jobs.push(Box::new(move || scenario.run_attack()));
        }
    }
    let mut defeat_jobs: Vec<Job<'_, Result<(AttackOutcome, AttackOutcome), ScenarioError>>> =
        Vec::new();
    let mut defeat_keys = Vec::new();
    for (mode, cpu_vulnerable) in [
        (FpuMode::Lazy, true),
        (FpuMode::Lazy, false),
        (FpuMode::Eager, true),
        (FpuMode::Eager, false),
    ] {
        for variant in Variant::ALL {
            let scenario = Scenario {
                mode,
                cpu_vulnerable,
                variant,
                bits_per_attempt: base.bits_per_attempt,
                noise: 0.0,
                ..random.clone()
            };
            defeat_keys.push((mode, cpu_vulnerable, variant));
            defeat_jobs.push(Box::new(move || {
                let other = Scenario {
                    victim: VictimKind::Random {
                        seed: victim_seed ^ 0x5eed_5eed_5eed_5eed,
                    },
                    ..scenario.clone()
                };
                Ok((scenario.run_attack()?, other.run_attack()?))
            }));
        }
    }

    let table = parallel(table_jobs)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let defeat_runs = parallel(defeat_jobs)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut scaling = Vec::new();
    for pair in table.chunks(2) {
        let (single, multi) = (&pair[0], &pair[1]);
        let chosen = if base.bits_per_attempt == MULTI_BIT {
            multi
        } else {
            single
        };
        rows.push(row(&random, chosen));
        scaling.push(ScalingRow {
            variant: single.result.variant,
            bits_per_attempt: MULTI_BIT,
            cycles_per_register_single_bit: single.result.cycles_per_register,
            cycles_per_register: multi.result.cycles_per_register,
            speedup: multi.result.effective_throughput / single.result.effective_throughput,
        });
    }
    if base.bits_per_attempt != 1 && base.bits_per_attempt != MULTI_BIT {
        rows.clear();
        for variant in Variant::SUPPRESSED {
            let scenario = Scenario {
                variant,
                ..random.clone()
            };
            rows.push(row(&scenario, &scenario.run_attack()?));
        }
    }

    let defeat = defeat_keys
        .into_iter()
        .zip(defeat_runs)
        .map(|((mode, cpu_vulnerable, variant), (a, b))| DefeatCell {
            mode,
            cpu_vulnerable,
            variant,
            exact_registers: a.exact_registers,
            registers: a.result.recovered.len(),
            leaks: a.result != b.result,
        })
        .collect();

    Ok(EvalReport {
        clock_hz: base.clock_hz,
        width: base.width,
        slice_cycles: base.slice_cycles,
        bits_per_attempt: base.bits_per_attempt,
        rows,
        scaling,
        defeat,
    })
}

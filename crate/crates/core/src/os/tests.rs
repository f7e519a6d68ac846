use proptest::prelude::*;

use super::*;
use crate::isa::{assemble, Instruction, ProgramBuilder, SimdReg};
use crate::machine::{CostModel, MachineConfig, PROBE_SYMBOL};

const MEM: u64 = 0x10_0000;

fn system(mode: FpuMode) -> System {
    let mut machine = Machine::new(MachineConfig::default()).unwrap();
    machine.bind_symbol(PROBE_SYMBOL, MEM);
    System::new(machine, mode, DEFAULT_SLICE_CYCLES)
}

fn file(seed: u64) -> SimdFile {
    std::array::from_fn(|i| SimdValue::from_lanes([seed, i as u64, seed ^ 0xff, 7, 0, 0, 0, 0]))
}

const VICTIM: &str = "top:
  movsimd ymm0, 0x1
  movsimd ymm1, 0xabcdef
  yield
  jmp top";

/// Victim owns the FPU with its secrets loaded; attacker is current.
fn victim_owns_attacker_runs(mode: FpuMode, attacker: &str) -> (System, Pid, Pid) {
    let mut sys = system(mode);
    let victim = sys
        .spawn("victim", assemble(VICTIM).unwrap(), None, zeroed_fpu())
        .unwrap();
    let attacker = sys
        .spawn(
            "attacker",
            assemble(attacker).unwrap(),
            attacker.contains("handler:").then_some("handler"),
            zeroed_fpu(),
        )
        .unwrap();
    while sys.current() != Some(attacker) {
        sys.tick().unwrap();
    }
    (sys, victim, attacker)
}

#[test]
fn lazy_switch_leaves_registers_in_place() {
    let (sys, victim, _) = victim_owns_attacker_runs(FpuMode::Lazy, "pause");
    assert_eq!(sys.fpu_owner(), Some(victim));
    assert!(sys.machine.control.cr0_ts);
    assert_eq!(sys.machine.arch.simd[1], SimdValue::from_u128(0xabcdef));
}

#[test]
fn eager_switch_restores_incoming_area() {
    let (sys, victim, attacker) = victim_owns_attacker_runs(FpuMode::Eager, "pause");
    assert_eq!(sys.fpu_owner(), Some(attacker));
    assert!(!sys.machine.control.cr0_ts);
    assert_eq!(sys.machine.arch.simd, zeroed_fpu());
    assert_eq!(
        sys.process(victim).unwrap().fpu_save_area[1],
        SimdValue::from_u128(0xabcdef)
    );
    assert_eq!(
        sys.stats(victim).unwrap().nm_full + sys.stats(victim).unwrap().nm_light,
        0
    );
}

#[test]
fn switch_to_self_only_costs_time() {
    let (mut sys, _, attacker) = victim_owns_attacker_runs(FpuMode::Lazy, "pause");
    let arch = sys.machine.arch.clone();
    let control = sys.machine.control;
    let cycles = sys.machine.cycles();
    sys.context_switch(attacker).unwrap();
    assert_eq!(sys.machine.arch, arch);
    assert_eq!(sys.machine.control, control);
    assert_eq!(
        sys.machine.cycles(),
        cycles + CostModel::default().context_switch
    );
    assert_eq!(sys.context_switch(Pid(9)), Err(OsError::UnknownPid(Pid(9))));
}

#[test]
fn nm_full_swaps_owner() {
    let (mut sys, victim, attacker) = victim_owns_attacker_runs(FpuMode::Lazy, "movq rax, xmm1");
    let tick = sys.tick().unwrap();
    assert_eq!(tick.outcome, StepOutcome::Fault(FaultKind::Nm { rip: 0 }));
    assert_eq!(sys.fpu_owner(), Some(attacker));
    assert!(!sys.machine.control.cr0_ts);
    assert_eq!(sys.machine.arch.simd, zeroed_fpu());
    assert_eq!(
        sys.process(victim).unwrap().fpu_save_area[1],
        SimdValue::from_u128(0xabcdef)
    );
    assert_eq!(sys.stats(attacker).unwrap().nm_full, 1);
    // the retry reads the attacker's own zero
    sys.tick().unwrap();
    assert_eq!(sys.machine.arch.core.gpr(Gpr::RAX), 0);
}

#[test]
fn nm_light_for_owner() {
    let mut sys = system(FpuMode::Lazy);
    let p = sys
        .spawn(
            "p",
            assemble("movsimd xmm0, 0x5\nyield\nmovq rax, xmm0").unwrap(),
            None,
            zeroed_fpu(),
        )
        .unwrap();
    sys.spawn("q", assemble("yield").unwrap(), None, zeroed_fpu())
        .unwrap();
    sys.tick().unwrap();
    sys.tick().unwrap();
    assert_eq!(sys.stats(p).unwrap().nm_full, 1);
    sys.tick().unwrap();
    sys.tick().unwrap();
    assert_eq!(sys.current(), Some(p));
    assert!(sys.machine.control.cr0_ts);
    let simd = sys.machine.arch.simd;
    sys.tick().unwrap();
    assert_eq!(sys.stats(p).unwrap().nm_light, 1);
    assert_eq!(sys.machine.arch.simd, simd);
    sys.tick().unwrap();
    assert_eq!(sys.machine.arch.core.gpr(Gpr::RAX), 5);
}

#[test]
fn handle_nm_rejected_in_eager_mode() {
    let mut sys = system(FpuMode::Eager);
    sys.spawn("p", assemble("pause").unwrap(), None, zeroed_fpu())
        .unwrap();
    assert_eq!(sys.handle_nm(), Err(OsError::NmInEagerMode));
}

const PF_LOOP: &str = "top:
  mov dword [0], 0
  movq rax, xmm1
  and rax, 1
  shl rax, 6
  mov dword [mem + rax], 0
handler:
  probe rcx, [mem + 64]
  clflush [mem + 64]
  jmp top";

#[test]
fn page_fault_signal_keeps_victim_as_owner() {
    let (mut sys, victim, attacker) = victim_owns_attacker_runs(FpuMode::Lazy, PF_LOOP);
    let tick = sys.tick().unwrap();
    assert_eq!(
        tick.outcome,
        StepOutcome::Fault(FaultKind::Pf { address: 0 })
    );
    assert_eq!(sys.machine.arch.core.rip, 5);
    assert_eq!(sys.machine.arch.core.gpr(SIGNAL_ADDRESS_REGISTER), 0);
    for _ in 0..3 {
        sys.tick().unwrap();
    }
    assert_eq!(sys.machine.arch.core.gpr(Gpr::RCX), 40);
    assert_eq!(sys.fpu_owner(), Some(victim));
    let stats = sys.stats(attacker).unwrap();
    assert_eq!((stats.signals, stats.nm_full, stats.nm_light), (1, 0, 0));
    // the handler jumps back and the loop continues
    sys.tick().unwrap();
    assert_eq!(sys.stats(attacker).unwrap().signals, 2);
}

#[test]
fn unhandled_page_fault_terminates() {
    let mut sys = system(FpuMode::Lazy);
    let a = sys
        .spawn(
            "a",
            assemble("mov dword [8], 1").unwrap(),
            None,
            zeroed_fpu(),
        )
        .unwrap();
    let b = sys
        .spawn("b", assemble("pause").unwrap(), None, zeroed_fpu())
        .unwrap();
    let trace = sys.run(1_000_000).unwrap();
    assert_eq!(sys.process(a).unwrap().state, ProcessState::Terminated);
    assert_eq!(sys.process(b).unwrap().state, ProcessState::Halted);
    assert_eq!(trace[0].kind, EventKind::Terminated { address: 8 });

    let mut sys = system(FpuMode::Lazy);
    let a = sys
        .spawn("a", assemble("pause").unwrap(), None, zeroed_fpu())
        .unwrap();
    assert_eq!(
        sys.run_to_completion(a, assemble("mov dword [8], 1").unwrap(), None, 10_000),
        Err(OsError::UnhandledSignal(a))
    );
}

#[test]
fn tsx_loop_never_reaches_the_os() {
    let attacker = "top:
  xbegin abort
  movq rax, xmm1
  and rax, 1
  shl rax, 6
  mov dword [mem + rax], 0
  xabort
abort:
  probe rcx, [mem + 64]
  clflush [mem + 64]
  jmp top";
    let (mut sys, victim, attacker) = victim_owns_attacker_runs(FpuMode::Lazy, attacker);
    let first = sys.trace().len();
    for _ in 0..500 {
        sys.tick().unwrap();
    }
    let stats = sys.stats(attacker).unwrap();
    assert_eq!(stats.nm_full + stats.nm_light, 0);
    assert_eq!(stats.tsx_aborts, 100);
    assert_eq!(sys.fpu_owner(), Some(victim));
    assert!(sys.trace()[first..]
        .iter()
        .all(|e| e.kind == EventKind::TsxAbort { target: 6 }));
    assert!(sys.machine.arch.core.timings.iter().all(|t| t.cycles == 40));
}

#[test]
fn slice_exhaustion_preempts() {
    let mut machine = Machine::new(MachineConfig::default()).unwrap();
    machine.bind_symbol(PROBE_SYMBOL, MEM);
    let mut sys = System::new(machine, FpuMode::Lazy, 10);
    let spin = assemble("top:\npause\njmp top").unwrap();
    let a = sys.spawn("a", spin.clone(), None, zeroed_fpu()).unwrap();
    let b = sys.spawn("b", spin, None, zeroed_fpu()).unwrap();
    for _ in 0..10 {
        sys.tick().unwrap();
    }
    assert_eq!(sys.current(), Some(b));
    assert_eq!(sys.stats(a).unwrap().preemptions, 1);
    assert_eq!(sys.trace()[0].kind, EventKind::Preempt);
    assert_eq!(sys.trace()[1].kind, EventKind::Switch { to: b });
}

#[test]
fn preemption_aborts_open_transaction() {
    let mut machine = Machine::new(MachineConfig::default()).unwrap();
    machine.bind_symbol(PROBE_SYMBOL, MEM);
    let mut sys = System::new(machine, FpuMode::Lazy, 100);
    let a = sys
        .spawn(
            "a",
            assemble("xbegin out\ntop:\npause\njmp top\nout:").unwrap(),
            None,
            zeroed_fpu(),
        )
        .unwrap();
    let b = sys
        .spawn("b", assemble("pause").unwrap(), None, zeroed_fpu())
        .unwrap();
    while sys.current() == Some(a) {
        sys.tick().unwrap();
    }
    assert!(!sys.machine.in_transaction());
    assert_eq!(sys.core(a).unwrap().rip, 3);
    assert_eq!(sys.stats(a).unwrap().tsx_aborts, 1);
    sys.run(1_000_000).unwrap();
    assert_eq!(sys.process(b).unwrap().state, ProcessState::Halted);
    assert_eq!(sys.process(a).unwrap().state, ProcessState::Halted);
}

#[test]
fn single_halted_process_terminates_run() {
    let mut sys = system(FpuMode::Lazy);
    sys.spawn("p", Program::default(), None, zeroed_fpu())
        .unwrap();
    let trace = sys.run(u64::MAX).unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace[0].kind, EventKind::Halt);
    assert!(sys.run(u64::MAX).unwrap().is_empty());
    assert_eq!(sys.tick(), Err(OsError::NoRunnableProcess));
}

#[test]
fn run_respects_cycle_budget() {
    let mut sys = system(FpuMode::Lazy);
    sys.spawn(
        "p",
        assemble("top:\npause\njmp top").unwrap(),
        None,
        zeroed_fpu(),
    )
    .unwrap();
    sys.run(1000).unwrap();
    assert!(sys.machine.cycles() >= 1000 && sys.machine.cycles() < 1010);
}

#[test]
fn undefined_handler_is_rejected() {
    let mut sys = system(FpuMode::Lazy);
    assert!(matches!(
        sys.spawn("p", assemble("pause").unwrap(), Some("nope"), zeroed_fpu()),
        Err(OsError::UndefinedHandler { .. })
    ));
}

#[test]
fn run_to_completion_keeps_process_current() {
    let (mut sys, _, attacker) = victim_owns_attacker_runs(FpuMode::Lazy, "pause");
    let summary = sys
        .run_to_completion(
            attacker,
            assemble("probe rax, [mem]").unwrap(),
            None,
            10_000,
        )
        .unwrap();
    assert_eq!(sys.current(), Some(attacker));
    assert_eq!(summary.preemptions, 0);
    assert_eq!(sys.core(attacker).unwrap().timings.len(), 1);
    sys.run_to_completion(attacker, assemble("pause").unwrap(), None, 10_000)
        .unwrap();
    assert!(sys.core(attacker).unwrap().timings.is_empty());
}

#[test]
fn trace_serializes() {
    let event = Event {
        cycle: 5,
        pid: Pid(1),
        kind: EventKind::NmFull {
            previous_owner: Some(Pid(0)),
        },
    };
    let json = serde_json::to_string(&event).unwrap();
    assert_eq!(
        json,
        r#"{"cycle":5,"pid":1,"event":"nm_full","previous_owner":0}"#
    );
    assert_eq!(serde_json::from_str::<Event>(&json).unwrap(), event);
}

fn simd_op() -> impl Strategy<Value = Instruction> {
    let reg = (0u8..4).prop_map(SimdReg::xmm);
    prop_oneof![
        (reg.clone(), any::<u128>()).prop_map(|(dst, v)| Instruction::MovSimdImm {
            dst,
            value: SimdValue::from_u128(v)
        }),
        (reg.clone(), reg.clone()).prop_map(|(dst, src)| Instruction::Pxor { dst, src }),
        reg.prop_map(|src| Instruction::MovqGprFromSimd {
            dst: Gpr::RAX,
            src,
            lane: 0
        }),
    ]
}

fn plain_op() -> impl Strategy<Value = Instruction> {
    prop_oneof![
        Just(Instruction::Pause),
        Just(Instruction::Yield),
        any::<u64>().prop_map(|imm| Instruction::AndImm { dst: Gpr::RBX, imm }),
    ]
}

fn looping(body: Vec<Instruction>) -> Program {
    let mut b = ProgramBuilder::new();
    b.label("top");
    b.extend(body);
    b.push(Instruction::Jmp {
        target: "top".into(),
    });
    b.build().unwrap()
}

fn process_body() -> impl Strategy<Value = Vec<Instruction>> {
    prop::collection::vec(prop_oneof![simd_op(), plain_op()], 1..12)
}

/// Reference semantics of the SIMD-writing instructions, applied to one
/// process's own register file.
fn apply(shadow: &mut SimdFile, instruction: &Instruction) {
    match instruction {
        Instruction::MovSimdImm { dst, value } => shadow[dst.index()] = value.truncate(256),
        Instruction::Pxor { dst, src } => {
            let x = shadow[dst.index()].low_u128() ^ shadow[src.index()].low_u128();
            shadow[dst.index()] = shadow[dst.index()].with_low_u128(x);
        }
        _ => {}
    }
}

fn random_system(mode: FpuMode, slice: u64, bodies: &[Vec<Instruction>], seeds: &[u64]) -> System {
    let mut machine = Machine::new(MachineConfig {
        costs: CostModel {
            context_switch: 3,
            nm_light: 2,
            nm_full: 5,
            ..CostModel::default()
        },
        ..MachineConfig::default()
    })
    .unwrap();
    machine.bind_symbol(PROBE_SYMBOL, MEM);
    let mut sys = System::new(machine, mode, slice);
    for (i, body) in bodies.iter().enumerate() {
        sys.spawn(
            &format!("p{i}"),
            looping(body.clone()),
            None,
            file(seeds[i]),
        )
        .unwrap();
    }
    sys
}

fn check_fpu_soundness(
    mode: FpuMode,
    slice: u64,
    bodies: Vec<Vec<Instruction>>,
    seeds: Vec<u64>,
) -> Result<(), TestCaseError> {
    let mut sys = random_system(mode, slice, &bodies, &seeds);
    let mut shadow: Vec<SimdFile> = seeds.iter().map(|&s| file(s)).collect();
    for _ in 0..400 {
        let tick = sys.tick().unwrap();
        if matches!(tick.outcome, StepOutcome::Retired) {
            let instruction = sys
                .process(tick.pid)
                .unwrap()
                .program()
                .get(tick.rip)
                .unwrap()
                .clone();
            apply(&mut shadow[tick.pid.0], &instruction);
        }
        let holder = match mode {
            FpuMode::Lazy => sys.fpu_owner(),
            FpuMode::Eager => sys.current(),
        };
        if let Some(holder) = holder {
            prop_assert_eq!(sys.machine.arch.simd, shadow[holder.0]);
        }
        for p in sys.processes() {
            if Some(p.pid) != holder {
                prop_assert_eq!(p.fpu_save_area, shadow[p.pid.0]);
            }
            prop_assert_eq!(sys.simd_view(p.pid).unwrap(), shadow[p.pid.0]);
        }
        if mode == FpuMode::Eager {
            prop_assert!(!sys.machine.control.cr0_ts);
        }
    }
    Ok(())
}

proptest! {
    #[test]
    fn lazy_fpu_owner_soundness(
        bodies in prop::collection::vec(process_body(), 2..4),
        seeds in prop::collection::vec(any::<u64>(), 4),
        slice in 5u64..60,
    ) {
        check_fpu_soundness(FpuMode::Lazy, slice, bodies, seeds)?;
    }

    #[test]
    fn eager_fpu_soundness(
        bodies in prop::collection::vec(process_body(), 2..4),
        seeds in prop::collection::vec(any::<u64>(), 4),
        slice in 5u64..60,
    ) {
        check_fpu_soundness(FpuMode::Eager, slice, bodies, seeds)?;
    }

    // Processes that never touch the FPU cost no save/restore work.
    #[test]
    fn lazy_mode_skips_fpu_work_for_integer_processes(
        simd_body in process_body(),
        others in prop::collection::vec(prop::collection::vec(plain_op(), 1..8), 1..3),
        slice in 5u64..60,
    ) {
        let mut bodies = vec![simd_body.clone()];
        bodies.extend(others);
        let seeds = vec![1, 2, 3, 4];
        let mut sys = random_system(FpuMode::Lazy, slice, &bodies, &seeds);
        for _ in 0..400 {
            sys.tick().unwrap();
        }
        for p in &sys.processes()[1..] {
            prop_assert_eq!(p.stats.nm_full + p.stats.nm_light + p.stats.fpu_saves, 0);
        }
        let first = &sys.processes()[0].stats;
        prop_assert_eq!(first.fpu_saves, 0);
        prop_assert!(first.nm_full <= 1);
        let uses_fpu = simd_body.iter().any(|i| i.touches_simd());
        prop_assert_eq!(first.nm_full == 1, uses_fpu);
    }
}

//! Aligned-column tables and JSON for the reports the CLI prints.

use std::fmt::Write;

use serde::Serialize;

use crate::os::{Event, EventKind, FpuMode};

use super::{AttackOutcome, EvalReport, Scenario};

/// Plain-text table: first column left-aligned, the rest right-aligned.
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Table {
        Table {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row<S: Into<String>>(&mut self, cells: impl IntoIterator<Item = S>) {
        self.rows.push(cells.into_iter().map(Into::into).collect());
    }

    pub fn render(&self) -> String {
        let columns = self.headers.len();
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate().take(columns) {
                widths[i] = widths[i].max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let rendered: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect();
            out.push_str(rendered.join("  ").trim_end());
            out.push('\n');
        };
        line(&self.headers);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&rule);
        for row in &self.rows {
            line(row);
        }
        out
    }
}

/// `359.9K` style cycle count.
pub fn format_cycles(cycles: f64) -> String {
    if cycles >= 1000.0 {
        format!("{:.1}K", cycles / 1000.0)
    } else {
        format!("{cycles:.0}")
    }
}

pub fn format_mib(bytes_per_sec: f64) -> String {
    format!("{:.2} MiB/s", bytes_per_sec / (1024.0 * 1024.0))
}

fn mode_name(mode: FpuMode) -> &'static str {
    match mode {
        FpuMode::Lazy => "lazy",
        FpuMode::Eager => "eager",
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn render_eval(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Cycles to leak one {}-bit register ({} bit(s) per attempt, {:.2} GHz, slice {} cycles)\n",
        report.width,
        report.bits_per_attempt,
        report.clock_hz / 1e9,
        report.slice_cycles
    );
    let mut table = Table::new([
        "Method",
        "Cycles",
        "Eff. Throughput",
        "Attempts",
        "Inconclusive",
        "Exact",
        "16-reg snapshot in slice",
    ]);
    for row in &report.rows {
        table.row([
            row.variant.label().to_string(),
            format_cycles(row.cycles_per_register),
            format_mib(row.throughput_bytes_per_sec),
            row.attempts.to_string(),
            row.inconclusive_groups.to_string(),
            format!("{}/{}", row.exact_registers, row.registers),
            yes_no(row.snapshot_fits_in_slice).to_string(),
        ]);
    }
    out.push_str(&table.render());

    out.push('\n');
    let mut table = Table::new([
        "Method",
        "Bits/attempt",
        "Cycles",
        "1-bit cycles",
        "Speedup",
    ]);
    for row in &report.scaling {
        table.row([
            row.variant.label().to_string(),
            row.bits_per_attempt.to_string(),
            format_cycles(row.cycles_per_register),
            format_cycles(row.cycles_per_register_single_bit),
            format!("{:.2}x", row.speedup),
        ]);
    }
    out.push_str(&table.render());

    out.push('\n');
    let mut table = Table::new(["Switching", "CPU", "Method", "Exact", "Leaks"]);
    for cell in &report.defeat {
        table.row([
            mode_name(cell.mode).to_string(),
            if cell.cpu_vulnerable {
                "vulnerable"
            } else {
                "fixed"
            }
            .to_string(),
            cell.variant.label().to_string(),
            format!("{}/{}", cell.exact_registers, cell.registers),
            yes_no(cell.leaks).to_string(),
        ]);
    }
    out.push_str(&table.render());
    out
}

pub fn render_attack(scenario: &Scenario, outcome: &AttackOutcome) -> String {
    let result = &outcome.result;
    let width = result.register_width;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} attack, {} switching, {} CPU, {} bit(s) per attempt\n",
        result.variant.label(),
        mode_name(scenario.mode),
        if scenario.cpu_vulnerable {
            "vulnerable"
        } else {
            "fixed"
        },
        result.bits_per_attempt
    );
    let mut table = Table::new(["Register", "Recovered", "Truth", "Match"]);
    for ((r, truth), exact) in result
        .recovered
        .iter()
        .zip(&outcome.truth)
        .zip(&outcome.exact)
    {
        table.row([
            format!("{}{}", register_prefix(width), r.index),
            r.value.to_hex(width),
            truth.to_hex(width),
            if *exact { "exact" } else { "differs" }.to_string(),
        ]);
    }
    out.push_str(&table.render());
    let _ = writeln!(
        out,
        "\n{}/{} exact, {}/{} bits correct",
        outcome.exact_registers,
        result.recovered.len(),
        outcome.correct_bits,
        outcome.total_bits
    );
    let _ = writeln!(
        out,
        "{} attempts ({} restarted), {} inconclusive groups, {} cycles per register, {}",
        result.attempts,
        result.restarted_attempts,
        result.inconclusive_groups,
        format_cycles(result.cycles_per_register),
        format_mib(result.effective_throughput)
    );
    let stats = &outcome.attacker_stats;
    let _ = writeln!(
        out,
        "attacker: {} #NM full, {} #NM light, {} signals, {} TSX aborts, {} RSB mispredictions",
        stats.nm_full, stats.nm_light, stats.signals, stats.tsx_aborts, stats.rsb_mispredictions
    );
    out
}

pub fn register_prefix(width: u32) -> &'static str {
    match width {
        128 => "xmm",
        256 => "ymm",
        _ => "zmm",
    }
}

fn describe(kind: &EventKind) -> String {
    match kind {
        EventKind::Switch { to } => format!("switch to {to}"),
        EventKind::Preempt => "preempted".into(),
        EventKind::Yield => "yield".into(),
        EventKind::Halt => "halt".into(),
        EventKind::NmLight => "#NM (owner, enable FPU)".into(),
        EventKind::NmFull { previous_owner } => match previous_owner {
            Some(p) => format!("#NM (save FPU of {p}, restore own)"),
            None => "#NM (restore own FPU)".into(),
        },
        EventKind::Signal { address } => format!("SIGSEGV at {address:#x}"),
        EventKind::Terminated { address } => format!("terminated by fault at {address:#x}"),
        EventKind::TsxAbort { target } => format!("transaction aborted to {target}"),
    }
}

pub fn render_trace(events: &[Event]) -> String {
    let mut table = Table::new(["Cycle", "Pid", "Event"]);
    for e in events {
        table.row([e.cycle.to_string(), e.pid.to_string(), describe(&e.kind)]);
    }
    table.render()
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

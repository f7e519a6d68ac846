//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when a scenario cannot be built or run, 2 on
//! a usage error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attack::Variant;
use crate::os::{Event, FpuMode};

use super::aesni::{self, block_hex, parse_block, register_to_block, Block, EXAMPLE_PLAINTEXT};
use super::report::{render_attack, render_eval, render_trace, to_json, Table};
use super::scenario::parse_mode;
use super::{evaluate, parse_scenario, AttackOutcome, Scenario, ScenarioError, VictimKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCENARIO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lazyfp", version, about = "Lazy FPU state leak simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file and print its event trace.
    Run {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = Output::Table)]
        output: Output,
    },
    /// Attack a victim with seeded random secrets.
    Attack(Knobs),
    /// Compare the attack variants and mitigations.
    Eval(Knobs),
    /// Recover an AES-NI key schedule and the cipher key.
    DemoAesni {
        /// Cipher key, 32 hex digits.
        #[arg(long, value_parser = parse_key)]
        key: Block,
        #[arg(long, value_parser = parse_key)]
        plaintext: Option<Block>,
        #[command(flatten)]
        knobs: Knobs,
    },
}

#[derive(Debug, Args)]
struct Knobs {
    #[arg(long, value_parser = parse_fpu_mode, default_value = "lazy")]
    mode: FpuMode,
    #[arg(long, default_value = "tsx")]
    variant: Variant,
    #[arg(long, alias = "k", default_value_t = 1)]
    bits_per_attempt: u32,
    /// Attempts per bit group, decided by majority vote.
    #[arg(long)]
    repeats: Option<u32>,
    /// Seeds the victim's secrets and the noise generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Eviction probability of a hot probe line at signal delivery.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    slice_cycles: Option<u64>,
    /// Run on a CPU that does not forward values past #NM.
    #[arg(long)]
    cpu_fixed: bool,
    #[arg(long, value_parser = ["128", "256", "512"])]
    width: Option<String>,
    #[arg(long, value_enum, default_value_t = Output::Table)]
    output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Table,
    Json,
}

fn parse_fpu_mode(s: &str) -> Result<FpuMode, String> {
    parse_mode(s).ok_or_else(|| format!("expected lazy or eager, found `{s}`"))
}

fn parse_key(s: &str) -> Result<Block, String> {
    parse_block(s).ok_or_else(|| "expected 32 hex digits".to_string())
}

impl Knobs {
    fn scenario(&self) -> Scenario {
        let mut scenario = Scenario {
            mode: self.mode,
            cpu_vulnerable: !self.cpu_fixed,
            variant: self.variant,
            bits_per_attempt: self.bits_per_attempt,
            victim: VictimKind::Random { seed: self.seed },
            noise: self.noise,
            seed: self.seed,
            ..Scenario::default()
        };
        if let Some(r) = self.repeats {
            scenario.repeats = r;
        }
        if let Some(s) = self.slice_cycles {
            scenario.slice_cycles = s;
        }
        if let Some(w) = &self.width {
            scenario.width = w.parse().expect("validated by clap");
        }
        scenario
    }
}

#[derive(Serialize)]
struct TraceReport<'a> {
    scenario: &'a Scenario,
    events: &'a [Event],
    #[serde(skip_serializing_if = "Option::is_none")]
    attack: Option<&'a AttackOutcome>,
}

#[derive(Serialize)]
struct RoundKey {
    round: usize,
    expected: String,
    recovered: String,
    exact: bool,
}

#[derive(Serialize)]
struct AesDemo<'a> {
    cipher_key: String,
    recovered_cipher_key: String,
    rounds: Vec<RoundKey>,
    ciphertext: String,
    recovered_ciphertext: String,
    schedule_recovered: bool,
    outcome: &'a AttackOutcome,
}

/// Parses `args` (program name first), runs the command and writes reports
/// to `out` and diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(rendered.as_bytes())
            } else {
                err.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_SCENARIO
        }
    }
}

fn execute(command: Command) -> Result<String, ScenarioError> {
    match command {
        Command::Run { file, output } => run_file(&file, output),
        Command::Attack(knobs) => {
            let scenario = knobs.scenario();
            let outcome = scenario.run_attack()?;
            Ok(match knobs.output {
                Output::Table => render_attack(&scenario, &outcome),
                Output::Json => to_json(&outcome),
            })
        }
        Command::Eval(knobs) => {
            let report = evaluate(&knobs.scenario())?;
            Ok(match knobs.output {
                Output::Table => render_eval(&report),
                Output::Json => to_json(&report),
            })
        }
        Command::DemoAesni {
            key,
            plaintext,
            knobs,
        } => demo_aesni(key, plaintext.unwrap_or(EXAMPLE_PLAINTEXT), &knobs),
    }
}

fn run_file(path: &Path, output: Output) -> Result<String, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let scenario = parse_scenario(&text, path.parent())?;
    let (events, outcome) = if scenario.attacker_program.is_some() {
        let mut sim = scenario.boot()?;
        (sim.system.run(scenario.max_cycles)?, None)
    } else {
        let mut sim = scenario.boot()?;
        let result =
            crate::attack::run_attack(&mut sim.system, sim.attacker, &scenario.attack_config())?;
        let stats = *sim.system.stats(sim.attacker)?;
        let events = sim.system.take_trace();
        (events, Some(AttackOutcome::new(result, &sim.truth, stats)))
    };
    Ok(match output {
        Output::Json => to_json(&TraceReport {
            scenario: &scenario,
            events: &events,
            attack: outcome.as_ref(),
        }),
        Output::Table => {
            let mut text = render_trace(&events);
            if let Some(outcome) = &outcome {
                text.push('\n');
                text.push_str(&render_attack(&scenario, outcome));
            }
            text
        }
    })
}

fn demo_aesni(key: Block, plaintext: Block, knobs: &Knobs) -> Result<String, ScenarioError> {
    let mut registers: Vec<u8> = (0..=10).collect();
    registers.push(aesni::DATA_REGISTER);
    let scenario = Scenario {
        victim: VictimKind::Aesni {
            cipher_key: key,
            plaintext,
        },
        width: 128,
        registers,
        ..knobs.scenario()
    };
    let outcome = scenario.run_attack()?;
    let schedule = aesni::expand_key(&key);
    let recovered: Vec<Block> = outcome
        .result
        .recovered
        .iter()
        .map(|r| register_to_block(&r.value))
        .collect();
    let rounds: Vec<RoundKey> = schedule
        .iter()
        .zip(&recovered)
        .enumerate()
        .map(|(round, (expected, got))| RoundKey {
            round,
            expected: block_hex(expected),
            recovered: block_hex(got),
            exact: expected == got,
        })
        .collect();
    let demo = AesDemo {
        cipher_key: block_hex(&key),
        recovered_cipher_key: block_hex(&recovered[0]),
        schedule_recovered: rounds.iter().all(|r| r.exact),
        rounds,
        ciphertext: block_hex(&aesni::encrypt(&key, &plaintext)),
        recovered_ciphertext: block_hex(&recovered[11]),
        outcome: &outcome,
    };
    if knobs.output == Output::Json {
        return Ok(to_json(&demo));
    }
    let mut table = Table::new(["Round", "Register", "Key schedule", "Recovered", "Match"]);
    for r in &demo.rounds {
        table.row([
            r.round.to_string(),
            format!("xmm{}", r.round),
            r.expected.clone(),
            r.recovered.clone(),
            if r.exact { "exact" } else { "differs" }.to_string(),
        ]);
    }
    let mut text = table.render();
    text.push_str(&format!(
        "\nciphertext (xmm{}): {} recovered {}\n",
        aesni::DATA_REGISTER,
        demo.ciphertext,
        demo.recovered_ciphertext
    ));
    text.push_str(&format!(
        "{}/11 round keys recovered\ncipher key: {}\nrecovered cipher key (xmm0): {}\n",
        demo.rounds.iter().filter(|r| r.exact).count(),
        demo.cipher_key,
        demo.recovered_cipher_key
    ));
    Ok(text)
}

//! Line-based scenario files.
//!
//! ```text
//! # comment
//! mode = lazy
//! variant = tsx
//! seed = 0x2a
//! cost.nm_full = 1100
//! ```
//!
//! Keys are the scenario fields. Integers may be decimal or `0x` hex.
//! `victim_program` and `attacker_program` name assembly files relative to
//! the scenario file.

use std::path::Path;

use crate::attack::Variant;
use crate::isa::{assemble, Program, REGISTER_COUNT};
use crate::os::FpuMode;

use super::aesni::{parse_block, EXAMPLE_PLAINTEXT};
use super::{Scenario, ScenarioError, VictimKind};

fn parse_u64(value: &str) -> Option<u64> {
    let cleaned = value.replace('_', "");
    match cleaned
        .strip_prefix("0x")
        .or_else(|| cleaned.strip_prefix("0X"))
    {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => cleaned.parse().ok(),
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

pub(super) fn parse_mode(value: &str) -> Option<FpuMode> {
    match value.to_ascii_lowercase().as_str() {
        "lazy" => Some(FpuMode::Lazy),
        "eager" => Some(FpuMode::Eager),
        _ => None,
    }
}

fn load_program(base: Option<&Path>, file: &str) -> Result<Program, ScenarioError> {
    let path = match base {
        Some(dir) => dir.join(file),
        None => Path::new(file).to_path_buf(),
    };
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(&path).map_err(|e| ScenarioError::Io {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    assemble(&text).map_err(|source| ScenarioError::Asm {
        path: shown,
        source,
    })
}

/// Parses a scenario file. Program paths resolve against `base_dir`.
pub fn parse_scenario(text: &str, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
    let mut scenario = Scenario::default();
    let mut victim_kind = String::from("random");
    let mut victim_seed = None;
    let mut cipher_key = None;
    let mut plaintext = None;

    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| ScenarioError::Parse { line, message };
        let Some((key, value)) = content.split_once('=') else {
            return Err(err(format!("expected `key = value`, found `{content}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| err(format!("`{key}` expects {what}, found `{value}`"));
        let int = || parse_u64(value).ok_or_else(|| bad("an integer"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let boolean = || parse_bool(value).ok_or_else(|| bad("true or false"));

        if let Some(field) = key.strip_prefix("cost.") {
            let cycles = int()?;
            *scenario
                .costs
                .field_mut(field)
                .ok_or_else(|| err(format!("unknown cost `{field}`")))? = cycles;
            continue;
        }
        match key {
            "mode" => scenario.mode = parse_mode(value).ok_or_else(|| bad("lazy or eager"))?,
            "cpu_vulnerable" => scenario.cpu_vulnerable = boolean()?,
            "variant" => scenario.variant = value.parse::<Variant>().map_err(err)?,
            "bits_per_attempt" | "k" => scenario.bits_per_attempt = int()? as u32,
            "repeats" => scenario.repeats = int()? as u32,
            "victim" => victim_kind = value.to_ascii_lowercase(),
            "seed" => scenario.seed = int()?,
            "victim_seed" => victim_seed = Some(int()?),
            "cipher_key" => {
                cipher_key = Some(parse_block(value).ok_or_else(|| bad("32 hex digits"))?)
            }
            "plaintext" => {
                plaintext = Some(parse_block(value).ok_or_else(|| bad("32 hex digits"))?)
            }
            "victim_mutates" => scenario.victim_mutates = boolean()?,
            "slice_cycles" => scenario.slice_cycles = int()?,
            "noise" => scenario.noise = float()?,
            "clock_hz" => scenario.clock_hz = float()?,
            "width" => {
                scenario.width = match int()? {
                    w @ (128 | 256 | 512) => w as u32,
                    _ => return Err(bad("128, 256 or 512")),
                }
            }
            "registers" => {
                scenario.registers = value
                    .split(',')
                    .map(|r| match r.trim().parse::<u8>() {
                        Ok(i) if i < REGISTER_COUNT => Ok(i),
                        _ => Err(bad("a comma-separated list of register indices")),
                    })
                    .collect::<Result<_, _>>()?;
            }
            "max_cycles" => scenario.max_cycles = int()?,
            "victim_program" => scenario.victim_program = Some(load_program(base_dir, value)?),
            "attacker_program" => scenario.attacker_program = Some(load_program(base_dir, value)?),
            "attacker_handler" => scenario.attacker_handler = Some(value.to_string()),
            _ => return Err(err(format!("unknown key `{key}`"))),
        }
    }

    scenario.victim = match victim_kind.as_str() {
        "random" => VictimKind::Random {
            seed: victim_seed.unwrap_or(scenario.seed),
        },
        "aesni" => VictimKind::Aesni {
            cipher_key: cipher_key.unwrap_or([0; 16]),
            plaintext: plaintext.unwrap_or(EXAMPLE_PLAINTEXT),
        },
        other => {
            return Err(ScenarioError::Invalid(format!(
                "unknown victim `{other}` (expected random or aesni)"
            )))
        }
    };
    scenario.validate()?;
    Ok(scenario)
}

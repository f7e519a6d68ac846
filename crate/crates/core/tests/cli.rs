use std::path::PathBuf;
use std::process::{Command, Output};

fn lazyfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lazyfp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_is_byte_identical_across_processes() {
    for name in ["tsx_lazy.scn", "pf_noisy.scn", "custom.scn"] {
        let path = scenario(name);
        let a = lazyfp(&["run", &path, "--output", "json"]);
        let b = lazyfp(&["run", &path, "--output", "json"]);
        assert_eq!(a.status.code(), Some(0), "{name}");
        assert_eq!(a.stdout, b.stdout, "{name}");
    }
}

#[test]
fn run_reports_trace_and_recovery() {
    let out = lazyfp(&["run", &scenario("tsx_lazy.scn")]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("transaction aborted"), "{text}");
    assert!(text.contains("2/2 exact"), "{text}");

    let out = lazyfp(&["run", &scenario("custom.scn"), "--output", "json"]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let events = json["events"].as_array().unwrap();
    assert!(events.iter().any(|e| e["event"] == "nm_full"));
    assert!(json.get("attack").is_none());
}

#[test]
fn aesni_scenario_recovers_the_key() {
    let out = lazyfp(&["run", &scenario("aesni.scn"), "--output", "json"]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["attack"]["exact_registers"], 2);
}

#[test]
fn eval_json_has_three_variants() {
    let out = lazyfp(&["eval", "--output", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let variants: Vec<&str> = json["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(variants, ["pf", "tsx", "retpoline"]);
    assert_eq!(json["defeat"].as_array().unwrap().len(), 16);
}

#[test]
fn exit_codes() {
    assert_eq!(lazyfp(&["--version"]).status.code(), Some(0));
    let usage = lazyfp(&["attack", "--mode", "sometimes"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("--mode"));
    assert_eq!(lazyfp(&["teleport"]).status.code(), Some(2));
    assert_eq!(lazyfp(&["run", "/no/such/file.scn"]).status.code(), Some(1));
    assert_eq!(lazyfp(&["attack", "--noise", "2"]).status.code(), Some(1));
}

#[test]
fn fixed_cpu_leaks_nothing() {
    let out = lazyfp(&[
        "attack",
        "--cpu-fixed",
        "--variant",
        "retpoline",
        "--seed",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("0/16 exact"));
}

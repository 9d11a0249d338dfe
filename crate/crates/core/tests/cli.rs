use std::path::PathBuf;
use std::process::{Command, Output};

use endoloop::RunConfig;

struct Sandbox {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Sandbox {
    fn new() -> Sandbox {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::desk();
        c.epochs_rlvr_phase1 = 1;
        c.epochs_rlvr_phase2 = 1;
        c.epochs_rlmt = 1;
        c.samples_per_category = 4;
        c.test_prompts_per_instruction = 1;
        c.diagnostic_samples = 2;
        let config = dir.path().join("tiny.json");
        std::fs::write(&config, serde_json::to_string_pretty(&c).unwrap()).unwrap();
        Sandbox { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = self.out();
        Command::new(env!("CARGO_BIN_EXE_endoloop"))
            .args(args)
            .args([
                "--config",
                self.config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--run-id",
                "t",
            ])
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        o
    }

    fn file(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.out().join("t").join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }
}

const CHAIN: [&[&str]; 9] = [
    &["gen-world"],
    &["gen-data"],
    &["train", "--stage", "rlvr"],
    &["eval-judge"],
    &["train", "--stage", "rlmt"],
    &["eval-winrate", "--opponent", "naive"],
    &["eval-winrate", "--opponent", "base"],
    &["diagnostics"],
    &["report"],
];

const OUTPUTS: [&str; 10] = [
    "world.json",
    "ckpt-rlvr.json",
    "ckpt-rlmt.json",
    "metrics-rlvr.csv",
    "metrics-rlmt.csv",
    "eval-judge.json",
    "eval-winrate-naive.json",
    "eval-winrate-base.json",
    "diagnostics.json",
    "report.json",
];

fn provenance(bytes: &[u8]) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    v["provenance"].clone()
}

#[test]
fn full_chain_succeeds_and_repeats_byte_for_byte() {
    let a = Sandbox::new();
    let b = Sandbox::new();
    for verb in CHAIN {
        a.ok(verb);
        b.ok(verb);
    }
    for f in OUTPUTS {
        assert_eq!(a.file(f), b.file(f), "{f} differs between identical runs");
    }
    let p = provenance(&a.file("eval-judge.json"));
    assert_eq!(p["seed"], 0);
    assert!(p["config_hash"].as_str().is_some_and(|h| !h.is_empty()));
    for f in ["eval-winrate-naive.json", "diagnostics.json", "report.json"] {
        assert_eq!(provenance(&a.file(f)), p, "{f}");
    }
    let report = String::from_utf8(a.file("report.txt")).unwrap();
    assert!(report.contains("published, not reproduced"));
}

#[test]
fn assertions_gate_the_exit_code() {
    let s = Sandbox::new();
    for verb in &CHAIN[..3] {
        s.ok(verb);
    }
    assert_eq!(s.run(&["eval-judge", "--assert", "min_total=0"]).status.code(), Some(0));
    assert_eq!(
        s.run(&["eval-judge", "--assert", "min_total=1.5"]).status.code(),
        Some(3)
    );
    assert_eq!(
        s.run(&["eval-judge", "--assert", "min_nonsense=1"]).status.code(),
        Some(1)
    );
    assert_eq!(s.run(&["gen-world", "--assert", "min_total=0"]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one_with_a_message() {
    let s = Sandbox::new();
    let o = s.run(&["gen-world", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("usage"));
    assert_eq!(s.run(&["train", "--stage", "sideways"]).status.code(), Some(1));
    assert_eq!(s.run(&["eval-winrate", "--opponent", "nobody"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let s = Sandbox::new();
    s.ok(&["gen-world"]);
    let o = s.run(&["train", "--stage", "rlmt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn a_run_directory_keeps_its_config() {
    let s = Sandbox::new();
    s.ok(&["gen-world"]);
    let mut c: RunConfig = serde_json::from_slice(&std::fs::read(&s.config).unwrap()).unwrap();
    c.seed = 7;
    std::fs::write(&s.config, serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(s.run(&["gen-world"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_from_the_command_line() {
    let s = Sandbox::new();
    let o = s.ok(&["gradcheck"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    let v: serde_json::Value = serde_json::from_slice(&s.file("gradcheck.json")).unwrap();
    assert!(v["provenance"].is_object());
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let o = Command::new(env!("CARGO_BIN_EXE_endoloop")).arg(flag).output().unwrap();
        assert_eq!(o.status.code(), Some(0));
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CAT_FROG: &str = r#"{
  "prompt": "a black cat on the left of a green frog",
  "prompt_len": 11,
  "entities": [{"surface": "cat", "indices": [3]}, {"surface": "frog", "indices": [10]}],
  "attributes": [["cat", "black", [2]], ["frog", "green", [9]]],
  "relations": [["cat", "left", "frog"]]
}
"#;

fn ear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ear"))
        .args(args)
        .env_remove("EAR_OUT_DIR")
        .output()
        .expect("spawn ear")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cat_frog.json"), CAT_FROG).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, text: &str) -> String {
        fs::write(self.path(name), text).unwrap();
        self.s(name)
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_run_directory() {
    let f = Fixture::new();
    let o = ear(&["generate", "--constraints", &f.s("cat_frog.json"), "--seed", "4", "--out", &f.s("run")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = fs::read_to_string(f.path("run/trace_stage1.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);
    assert!(trace.starts_with("t,mixing,missing,attr,spatial,total,alpha,grad_norm,latent_hash"));
    for name in ["config.json", "metrics.json", "manifest.json", "render_final.pgm", "maps/tok_3_t50.pgm", "maps/tok_10_t0.csv"] {
        assert!(f.path("run").join(name).exists(), "{name}");
    }
    let manifest = json(&f.path("run/manifest.json"));
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seeds"], serde_json::json!([4]));
    assert_eq!(manifest["config"]["pipeline"]["seed"], 4);
    assert_eq!(manifest["runs"][0]["exit_code"], 0);
}

#[test]
fn manifest_hash_matches_input() {
    use sha2::{Digest, Sha256};
    let f = Fixture::new();
    let o = ear(&["generate", "--constraints", &f.s("cat_frog.json"), "--out", &f.s("run")]);
    assert_eq!(code(&o), 0);
    let want: String = Sha256::digest(CAT_FROG.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(json(&f.path("run/manifest.json"))["input_hash"], want.as_str());
}

#[test]
fn same_seed_same_bytes() {
    let f = Fixture::new();
    for run in ["a", "b"] {
        let o = ear(&["generate", "--constraints", &f.s("cat_frog.json"), "--seed", "9", "--out", &f.s(run)]);
        assert_eq!(code(&o), 0);
    }
    for name in ["metrics.json", "trace_stage1.csv", "config.json", "render_final.pgm"] {
        assert_eq!(fs::read(f.path("a").join(name)).unwrap(), fs::read(f.path("b").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn malformed_constraints_exit_2_with_line() {
    let f = Fixture::new();
    let bad = f.write("bad.json", "{\n  \"prompt\": \"x\",\n  \"prompt_len\": 2,,\n}\n");
    let o = ear(&["generate", "--constraints", &bad, "--out", &f.s("run")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!f.path("run").exists());
}

#[test]
fn config_errors_exit_2() {
    let f = Fixture::new();
    let cfg = f.write("cfg.json", r#"{"pipeline": {"lambda": 3.0}}"#);
    let o = ear(&["generate", "--constraints", &f.s("cat_frog.json"), "--config", &cfg, "--out", &f.s("run")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lambda"));
    let unknown = f.write("unknown.json", r#"{"pipline": {}}"#);
    let o = ear(&["generate", "--constraints", &f.s("cat_frog.json"), "--config", &unknown, "--out", &f.s("run")]);
    assert_eq!(code(&o), 2);
    let o = ear(&["generate", "--constraints", &f.s("cat_frog.json"), "--fault", "owl=0.1", "--out", &f.s("run")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let f = Fixture::new();
    let cfg = f.write("cfg.json", r#"{"pipeline": {"seed": 5, "update_steps": 10}}"#);
    let o = ear(&["generate", "--constraints", &f.s("cat_frog.json"), "--config", &cfg, "--seed", "6", "--out", &f.s("run")]);
    assert_eq!(code(&o), 0);
    let resolved = json(&f.path("run/config.json"));
    assert_eq!(resolved["pipeline"]["seed"], 6);
    assert_eq!(resolved["pipeline"]["update_steps"], 10);
    assert_eq!(resolved["pipeline"]["alpha_start"], 20.0);
}

#[test]
fn refine_clean_scene_is_single_stage() {
    let f = Fixture::new();
    let scene = f.write(
        "bird_clock.json",
        r#"{"prompt": "a bird on the left of a clock", "prompt_len": 10,
            "entities": [{"surface": "bird", "indices": [2]}, {"surface": "clock", "indices": [8]}],
            "relations": [["bird", "left", "clock"]]}"#,
    );
    let o = ear(&["refine", "--constraints", &scene, "--verifier", "oracle", "--seed", "1", "--out", &f.s("run")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rounds = json(&f.path("run/verifier_report.json"));
    assert_eq!(rounds.as_array().unwrap().len(), 1);
    assert_eq!(rounds[0]["classification"]["faulty"], serde_json::json!([]));
    assert!(!f.path("run/trace_stage2.csv").exists());
    assert_eq!(json(&f.path("run/refinement_log.json")), serde_json::json!([]));
}

#[test]
fn refine_seeded_fault_reports_twice() {
    let f = Fixture::new();
    let cfg = f.write(
        "cfg.json",
        r#"{"pipeline": {"inner_steps": 50, "loss": {"reducer": "max-positive-part"}}}"#,
    );
    let o = ear(&[
        "refine", "--constraints", &f.s("cat_frog.json"), "--config", &cfg, "--seed", "2", "--fault", "frog=0.003",
        "--out", &f.s("run"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rounds = json(&f.path("run/verifier_report.json"));
    assert_eq!(rounds.as_array().unwrap().len(), 2);
    let before = rounds[0]["report"]["scores"]["frog"]["missing"].as_f64().unwrap();
    let after = rounds[1]["report"]["scores"]["frog"]["missing"].as_f64().unwrap();
    assert!(after < before, "{before} -> {after}");
    assert!(f.path("run/trace_stage2.csv").exists());
    let metrics = json(&f.path("run/metrics.json"));
    assert_eq!(metrics["bookkeeping_violations"], serde_json::json!([]));
}

#[test]
fn refine_with_echo_verifier_is_all_proper() {
    let f = Fixture::new();
    let verifier = format!("exec:{}", env!("CARGO_BIN_EXE_ear-echo-verifier"));
    let o = ear(&["refine", "--constraints", &f.s("cat_frog.json"), "--fault", "cat=0.003", "--verifier", &verifier, "--out", &f.s("run")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rounds = json(&f.path("run/verifier_report.json"));
    assert_eq!(rounds.as_array().unwrap().len(), 1);
    assert_eq!(rounds[0]["classification"]["faulty"], serde_json::json!([]));
    assert_eq!(rounds[0]["report"]["notes"], "external");
}

#[test]
fn failing_verifier_exits_4_after_stage_one() {
    let f = Fixture::new();
    let o = ear(&["refine", "--constraints", &f.s("cat_frog.json"), "--verifier", "exec:false", "--out", &f.s("run")]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(f.path("run/trace_stage1.csv").exists());
    assert_eq!(json(&f.path("run/manifest.json"))["runs"][0]["exit_code"], 4);
    let o = ear(&[
        "refine", "--constraints", &f.s("cat_frog.json"), "--verifier", "exec:false", "--fallback-oracle", "--out",
        &f.s("run2"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ear(&["refine", "--constraints", &f.s("cat_frog.json"), "--verifier", "smoke-signals", "--out", &f.s("run3")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_tables() {
    let f = Fixture::new();
    let o = ear(&["bench", "--suite", "builtin:spatial:0", "--out", &f.s("empty")]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&f.path("empty/metrics.json")), serde_json::json!([]));
    assert_eq!(fs::read_to_string(f.path("empty/metrics.csv")).unwrap().lines().count(), 1);

    let o = ear(&["bench", "--suite", "builtin:spatial:3", "--ablate", "spatial", "--ablate", "mixing", "--out", &f.s("two")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let labels: Vec<String> = json(&f.path("two/metrics.json"))
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(labels, ["full", "-spatial", "-mixing"]);
    let csv = fs::read_to_string(f.path("two/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let o = ear(&["bench", "--suite", "builtin:spatial:3", "--ablate", "vibes", "--out", &f.s("bad")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_suite_file_and_failures() {
    let f = Fixture::new();
    let suite = f.write(
        "suite.json",
        r#"[{"constraints": "cat_frog.json", "seed": 1, "expect": ["spatial"]},
            {"constraints": "cat_frog.json", "seed": 2, "fault": {"entity": "frog", "amplitude": 0.003}}]"#,
    );
    let o = ear(&["bench", "--suite", &suite, "--mode", "refine", "--execution", "sequential", "--out", &f.s("ok")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs = json(&f.path("ok/runs.json"));
    assert_eq!(runs[0]["records"].as_array().unwrap().len(), 2);

    // A verifier that cannot run fails every scenario.
    let o = ear(&["bench", "--suite", &suite, "--mode", "refine", "--verifier", "exec:false", "--out", &f.s("fail")]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert_eq!(json(&f.path("fail/metrics.json"))[0]["failures"], 2);
}

#[test]
fn gradcheck_exit_codes() {
    let f = Fixture::new();
    let o = ear(&["gradcheck", "--seeds", "0", "--out", &f.s("zero")]);
    assert_eq!(code(&o), 2);
    let o = ear(&["gradcheck", "--seeds", "2", "--tol", "1e-12", "--out", &f.s("tight")]);
    assert_eq!(code(&o), 1);
    let report = json(&f.path("tight/gradcheck.json"));
    assert_eq!(report["pass"], false);
    assert_eq!(report["seeds"], 2);
}

#[test]
fn gradcheck_max_reducer_passes() {
    let f = Fixture::new();
    let cfg = f.write("cfg.json", r#"{"pipeline": {"loss": {"reducer": "max-positive-part"}}}"#);
    let o = ear(&["gradcheck", "--config", &cfg, "--seeds", "50", "--out", &f.s("gc")]);
    let report = json(&f.path("gc/gradcheck.json"));
    let failing: Vec<&str> = report["losses"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|l| l["pass"] == false)
        .map(|l| l["loss"].as_str().unwrap())
        .collect();
    // The sum-of-positive-part missing term is kinked on a set the probes
    // can straddle; every other loss must pass.
    assert!(failing.iter().all(|l| *l == "missing/sum-positive-part"), "{failing:?}");
    assert_eq!(code(&o), if failing.is_empty() { 0 } else { 1 });
}

#[test]
fn validate_reports_problems() {
    let f = Fixture::new();
    let o = ear(&["validate", &f.s("cat_frog.json")]);
    assert_eq!(code(&o), 0);
    let bad = f.write(
        "bad.json",
        r#"{"prompt": "a cat", "prompt_len": 3, "entities": [{"surface": "cat", "indices": [1]}],
            "relations": [["cat", "left", "dog"]]}"#,
    );
    let o = ear(&["validate", &bad]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dog"));
}

#[test]
fn help_and_unknown_flags() {
    let o = ear(&["refine", "--help"]);
    assert_eq!(code(&o), 0);
    let help = String::from_utf8_lossy(&o.stdout);
    for flag in ["--constraints", "--config", "--seed", "--fault", "--verifier", "--fallback-oracle", "--out"] {
        assert!(help.contains(flag), "{flag}");
    }
    let o = ear(&["bench", "--help"]);
    let help = String::from_utf8_lossy(&o.stdout);
    for flag in ["--suite", "--ablate", "--mode", "--jobs", "--execution", "--verifier", "--config", "--out"] {
        assert!(help.contains(flag), "{flag}");
    }
    assert_eq!(code(&ear(&["generate", "--frobnicate"])), 2);
    assert_eq!(code(&ear(&[])), 2);
}

#[test]
fn out_dir_from_environment() {
    let f = Fixture::new();
    let o = Command::new(env!("CARGO_BIN_EXE_ear"))
        .args(["generate", "--constraints", &f.s("cat_frog.json")])
        .env("EAR_OUT_DIR", f.path("env"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(f.path("env/metrics.json").exists());
}

#[test]
fn writes_stay_inside_out_dir() {
    let f = Fixture::new();
    let before: Vec<_> = fs::read_dir(f.dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    let o = Command::new(env!("CARGO_BIN_EXE_ear"))
        .current_dir(f.dir.path())
        .args(["bench", "--suite", "builtin:fault:2", "--mode", "refine", "--out", "out"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut after: Vec<_> = fs::read_dir(f.dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    after.retain(|n| n != "out");
    assert_eq!(before.len(), after.len());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icpa_core::checkpoint::Checkpoint;
use icpa_core::report::{report_schema, RunReport};

fn icpa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icpa"))
        .args(args)
        .output()
        .expect("icpa binary runs")
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn generated(root: &Path) -> PathBuf {
    let data = root.join("data");
    let o = icpa(&["generate", "--nodes", "40", "--conflict", "0.5", "--seed", "1", "--out", &s(&data)]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["nodes.tsv", "edges.tsv", "correspondence.tsv"] {
        assert!(data.join(f).exists(), "{f}");
    }
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train".to_string(),
        "--data".into(),
        s(data),
        "--phase1-steps".into(),
        "20".into(),
        "--phase2-steps".into(),
        "20".into(),
        "--out".into(),
        s(out),
    ];
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    icpa(&refs)
}

fn shipped_schema() -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json");
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = icpa(&["generate", "--conflict", "1.5", "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("outside [0, 1]"));
    let o = icpa(&["train", "--data", &s(dir.path()), "--beta", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = icpa(&["train", "--data", &s(dir.path()), "--ablate", "gates"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = icpa(&["train", "--data", &s(&dir.path().join("absent")), "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shipped_schema_is_current() {
    assert_eq!(shipped_schema(), report_schema());
    let o = icpa(&["report", "--schema"]);
    assert!(o.status.success());
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, report_schema());
}

#[test]
fn train_writes_valid_report_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated(dir.path());
    let out = dir.path().join("run");
    let o = train(&data, &out, &["--seed", "2"]);
    assert!(o.status.success(), "{}", text(&o));

    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&shipped_schema()).unwrap();
    let errors: Vec<String> = validator.iter_errors(&raw).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let report: RunReport = serde_json::from_value(raw).unwrap();
    assert_eq!(report.seed, 2);
    assert!(report.front.is_some());
    assert!(out.join("timings.json").exists());

    let ck = out.join("checkpoints");
    Checkpoint::load(&ck.join("model.json")).unwrap().to_model().unwrap();
    Checkpoint::load(&ck.join("frozen_model.json")).unwrap().to_model().unwrap();
    Checkpoint::load(&ck.join("frozen_gate.json")).unwrap().to_gate().unwrap();
    for j in 0..2 {
        Checkpoint::load(&ck.join(format!("soo_{j}.json"))).unwrap().to_model().unwrap();
    }

    let o = icpa(&["report", &s(&out.join("report.json"))]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("front"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated(dir.path());
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "beta = 2.5\nseed = 5\nphase1_steps = 10\n").unwrap();
    let out = dir.path().join("run");
    let o = train(&data, &out, &["--config", &s(&cfg), "--seed", "9", "--ablate", "front"]);
    assert!(o.status.success(), "{}", text(&o));
    let report: RunReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config.beta, 2.5);
    assert_eq!(report.config.seed, 9);
    assert_eq!(report.config.phase1_steps, 20);
    assert!(report.phase1.is_none());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "beta = -1.0\n").unwrap();
    let o = train(&data, &out, &["--config", &s(&bad)]);
    assert!(!o.status.success());
}

#[test]
fn baseline_cache_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated(dir.path());
    let cache = dir.path().join("cache.json");
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    for out in [&first, &second] {
        let o = train(&data, out, &["--baseline-cache", &s(&cache)]);
        assert!(o.status.success(), "{}", text(&o));
    }
    assert!(cache.exists());
    assert!(!second.join("checkpoints/soo_0.json").exists());
    assert_eq!(
        fs::read(first.join("report.json")).unwrap(),
        fs::read(second.join("report.json")).unwrap()
    );
}

#[test]
fn soo_only_skips_joint_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated(dir.path());
    let out = dir.path().join("run");
    let o = train(&data, &out, &["--soo-only", "--target", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    let report: RunReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.phase1.is_none() && report.phase2.is_none());
    assert_eq!(report.target.unwrap().target, 1);
}

#[test]
fn verify_passes_and_names_corrupted_checks() {
    let o = icpa(&["verify", "--only", "huf_exact_hand_cases", "--only", "sorted_match_equals_exact_ot"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("PASS huf_exact_hand_cases"));

    let o = icpa(&["verify", "--only", "huf_exact_hand_cases", "--corrupt-huf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("FAIL huf_exact_hand_cases"));

    let o = icpa(&["verify", "--only", "no_such_check"]);
    assert_eq!(o.status.code(), Some(2));
}

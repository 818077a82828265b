use std::path::Path;
use std::process::{Command, Output};

use iclp_core::pipeline::PipelineConfig;
use serde_json::Value;

fn iclp(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_iclp"));
    cmd.args(args).env("RUST_LOG", "info").env_remove("ICLP_API_KEY");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn error_report(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().rev().find(|l| l.starts_with('{')).expect("a JSON error line");
    serde_json::from_str(last).unwrap()
}

fn small(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "out_dir": dir.join("run"),
        "corpus": { "count": 40, "test_count": 8, "procedures": 4 },
        "codec": { "K": 8, "d_h": 8, "epochs": 3, "enc_d_model": 16, "dec_d_model": 16, "enc_layers": 1, "dec_layers": 1 },
        "lm": { "layers": 1, "heads": 2, "d_model": 16, "context": 160 },
        "sft": { "epochs": 1, "batch_size": 8, "warmup_steps": 1 },
        "eval": { "max_new_tokens": 8 }
    });
    let path = dir.join("small.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn config_errors_list_every_violation() {
    let out = iclp(&["all", "--set", "codec.K=1", "--set", "lm.heads=3", "--set", "corpus.count=0"], None);
    assert_eq!(out.status.code(), Some(2));
    let report = error_report(&out);
    assert_eq!(report["error"], "config");
    assert_eq!(report["violations"].as_array().unwrap().len(), 3, "{report}");
}

#[test]
fn unknown_command_is_a_config_error() {
    let out = iclp(&["train"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_report(&out)["message"].as_str().unwrap().contains("unknown command"));
}

#[test]
fn missing_upstream_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = iclp(&["latentize"], Some(&cfg));
    assert_eq!(out.status.code(), Some(3));
    let report = error_report(&out);
    assert_eq!(report["error"], "missing_artifact");
    assert!(["gen-corpus", "train-codec"].contains(&report["run_first"].as_str().unwrap()), "{report}");
}

#[test]
fn rerun_of_train_codec_is_skipped_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    assert!(iclp(&["gen-corpus"], Some(&cfg)).status.success());
    let first = iclp(&["train-codec"], Some(&cfg));
    assert!(first.status.success());
    let second = iclp(&["train-codec"], Some(&cfg));
    assert!(second.status.success());
    let summary: Value = serde_json::from_slice(&second.stdout).unwrap();
    assert_eq!(summary["stages"][0], serde_json::json!(["train-codec", "skipped"]));
    assert!(String::from_utf8_lossy(&second.stderr).contains("train-codec: inputs unchanged, skipped"));
}

#[test]
fn override_is_reflected_in_snapshot_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let mut hashes = Vec::new();
    for k in ["32", "64"] {
        let out_dir = dir.path().join(format!("k{k}"));
        let out =
            iclp(&["gen-corpus", "--set", &format!("codec.K={k}"), "--out", out_dir.to_str().unwrap()], Some(&cfg));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let snap: Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.snapshot.json")).unwrap()).unwrap();
        assert_eq!(snap["config"]["codec"]["K"].as_u64().unwrap().to_string(), k);
        let expected = PipelineConfig::load(Some(&cfg), &[format!("codec.K={k}")]).unwrap().hash();
        assert_eq!(snap["hash"].as_str().unwrap(), expected);
        hashes.push(expected);
    }
    assert_ne!(hashes[0], hashes[1]);
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    std::fs::create_dir_all(dir.path().join("run")).unwrap();
    std::fs::write(dir.path().join("run").join(".lock"), "1").unwrap();
    let out = iclp(&["gen-corpus"], Some(&cfg));
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_report(&out)["error"], "locked");
}

#[test]
fn distill_without_credential_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = iclp(&["all", "--set", "distill.enabled=true", "--set", "corpus.count=4"], Some(&cfg));
    assert!(!out.status.success());
    let report = error_report(&out);
    assert!(report["message"].as_str().unwrap().contains("ICLP_API_KEY"), "{report}");
}

#[test]
fn print_config_shows_resolved_values() {
    let out = iclp(&["all", "--print-config", "--seed", "9", "--set", "codec.K=32"], None);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((v["seed"].as_u64(), v["codec"]["K"].as_u64()), (Some(9), Some(32)));
}

#[test]
fn distill_stage_replays_a_recorded_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/distill.v1.jsonl");
    let sets = [
        "corpus.count=2".to_string(),
        "corpus.procedures=4".to_string(),
        "distill.enabled=true".to_string(),
        "distill.model=fixture-model".to_string(),
        "distill.trajectories=3".to_string(),
        format!("distill.fixture={}", fixture.display()),
    ];
    for stage in ["gen-corpus", "distill"] {
        let mut args = vec![stage];
        for s in &sets {
            args.extend(["--set", s.as_str()]);
        }
        let out = iclp(&args, Some(&cfg));
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let text = std::fs::read_to_string(dir.path().join("run/distilled.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("arith-train-00001-t1"));
}

use std::path::{Path, PathBuf};

use iclp_core::corpus::distill::{ChatRequest, ChatTransport, DistillClient, DistillConfig, FixtureTransport};
use iclp_core::corpus::synthetic::{generate, SyntheticConfig};
use iclp_core::corpus::ReasoningSample;
use iclp_core::Error;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/distill.v1.jsonl")
}

fn config() -> DistillConfig {
    DistillConfig {
        enabled: true,
        model: "fixture-model".into(),
        trajectories: 3,
        in_flight: 2,
        fixture: Some(fixture()),
        ..Default::default()
    }
}

fn samples() -> Vec<ReasoningSample> {
    generate(&SyntheticConfig { count: 2, procedures: 4, ..Default::default() }).unwrap().0
}

#[test]
fn replayed_transcript_keeps_one_distinct_correct_trajectory() {
    let transport = config().transport().unwrap();
    let client = DistillClient::new(transport.as_ref(), config());
    let src = samples();
    let out = client.distill_corpus(&src);

    let ids: Vec<&str> = out.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["arith-train-00000", "arith-train-00000-t1", "arith-train-00001", "arith-train-00001-t1"]);
    for s in &out {
        s.validate().unwrap();
        assert_eq!(s.plans.len(), s.steps.len());
    }
    // Decomposition keeps the original calculation and drops the preamble.
    assert_eq!(out[0].steps, src[0].steps);
    assert_eq!(out[0].answer, src[0].answer);
    assert!(out[1].plans.iter().all(|p| p.starts_with("Use ")));
    assert!(out.iter().all(|s| !s.steps.iter().any(|l| l.contains("12345"))));
}

#[test]
fn recorded_temperatures_follow_the_request_kind() {
    let text = std::fs::read_to_string(fixture()).unwrap();
    let mut seen = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let prompt = v["request"]["messages"][0]["content"].as_str().unwrap();
        let t = v["request"]["temperature"].as_f64().unwrap();
        let want = if prompt.contains("For every step write") { 0.3 } else { 0.0 };
        assert_eq!(t, want, "{prompt}");
        seen += 1;
    }
    assert_eq!(seen, 16);
}

#[test]
fn unrecorded_request_is_a_transport_error() {
    let t = FixtureTransport::load(&fixture()).unwrap();
    let err = t.complete(&ChatRequest::user("fixture-model", "unrelated".into(), 0.0)).unwrap_err();
    assert!(matches!(err, Error::Transport(_)));
    // A question the transcript never saw is skipped, not fatal.
    let client = DistillClient::new(&t, config());
    let mut s = samples().remove(0);
    s.question = "Start with 5. Apply procedure P-99. What is the final value?".into();
    assert!(client.distill_corpus(&[s]).is_empty());
}

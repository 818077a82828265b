//! Plan distillation through a chat-completions endpoint.
//!
//! A worked answer is first decomposed into `Step i` lines (temperature 0),
//! then every step is summarized into a one-sentence plan (temperature 0.3).
//! Extra trajectories per question are requested one at a time; from the
//! second on, the request lists every chain of plans seen so far as
//! forbidden, and a returned chain equal to one of them is dropped locally.
//! Trajectories with a wrong final answer are filtered out.
//!
//! The transport is a trait so that tests replay recorded fixtures instead
//! of calling a live endpoint.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use iclp_substrate::checkpoint::canonical_json;
use serde::{Deserialize, Serialize};

use super::chains::{filter_correct, PlanChain, Trajectory};
use super::{has_step_prefix, ReasoningSample};
use crate::{Error, Result};

pub const API_KEY_ENV: &str = "ICLP_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: String, temperature: f64) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![ChatMessage { role: "user".into(), content: prompt }],
            temperature,
        }
    }

    /// Stable lookup key for fixtures.
    pub fn key(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("request serializes"))
    }
}

/// Sends one chat request and returns the assistant message text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

#[cfg(feature = "http")]
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: String,
}

#[cfg(feature = "http")]
impl HttpTransport {
    /// Reads the credential from `ICLP_API_KEY`.
    pub fn from_env(base_url: &str, timeout: Duration) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Auth(format!("environment variable {API_KEY_ENV} is not set")))?;
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
        Ok(Self { agent, url, api_key })
    }
}

#[cfg(feature = "http")]
impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = serde_json::to_string(request)?;
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Error::Transport(e.to_string()))?;
        match status {
            200..=299 => parse_completion(&text),
            401 | 403 => Err(Error::Auth(format!("HTTP {status}: {text}"))),
            _ => Err(Error::Transport(format!("HTTP {status}: {text}"))),
        }
    }
}

/// Extracts `choices[0].message.content` from a completion body.
pub fn parse_completion(body: &str) -> Result<String> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| Error::Parse { message: e.to_string(), raw: body.into() })?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Parse { message: "no choices[0].message.content".into(), raw: body.into() })
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub request: ChatRequest,
    pub response: String,
}

/// Replays recorded responses keyed by the canonical request.
pub struct FixtureTransport {
    entries: HashMap<String, String>,
}

impl FixtureTransport {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        Self { entries: entries.into_iter().map(|e| (e.request.key(), e.response)).collect() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str::<FixtureEntry>(&line)?);
            }
        }
        Ok(Self::new(entries))
    }
}

impl ChatTransport for FixtureTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.entries
            .get(&request.key())
            .cloned()
            .ok_or_else(|| Error::Transport(format!("no recorded response for request {}", request.key())))
    }
}

/// Forwards to another transport and appends every successful exchange to
/// a fixture file.
pub struct RecordingTransport<T> {
    inner: T,
    path: PathBuf,
    lock: Mutex<()>,
}

impl<T: ChatTransport> RecordingTransport<T> {
    pub fn new(inner: T, path: impl Into<PathBuf>) -> Self {
        Self { inner, path: path.into(), lock: Mutex::new(()) }
    }
}

impl<T: ChatTransport> ChatTransport for RecordingTransport<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let response = self.inner.complete(request)?;
        let entry = FixtureEntry { request: request.clone(), response: response.clone() };
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut f =
            OpenOptions::new().create(true).append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&self.path, e))?;
        Ok(response)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub enabled: bool,
    pub base_url: String,
    pub model: String,
    /// Used for decomposition and for generating new trajectories.
    pub answer_temperature: f64,
    /// Used for plan summarization.
    pub plan_temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
    /// Trajectories requested per question.
    pub trajectories: usize,
    /// Questions processed concurrently.
    pub in_flight: usize,
    /// Replay responses from this file instead of calling the endpoint.
    pub fixture: Option<PathBuf>,
    /// Append live exchanges to this file.
    pub record: Option<PathBuf>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            base_url: "https://api.deepseek.com/v1".into(),
            model: "deepseek-chat".into(),
            answer_temperature: 0.0,
            plan_temperature: 0.3,
            max_retries: 3,
            timeout_secs: 120,
            backoff_ms: 500,
            trajectories: 20,
            in_flight: 4,
            fixture: None,
            record: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        for (name, t) in [("answer_temperature", self.answer_temperature), ("plan_temperature", self.plan_temperature)]
        {
            if !(0.0..=2.0).contains(&t) {
                errors.push(format!("distill.{name} must be in [0, 2], got {t}"));
            }
        }
        if self.trajectories == 0 {
            errors.push("distill.trajectories must be at least 1".into());
        }
        if self.in_flight == 0 {
            errors.push("distill.in_flight must be at least 1".into());
        }
    }

    pub fn transport(&self) -> Result<Box<dyn ChatTransport>> {
        if let Some(path) = &self.fixture {
            return Ok(Box::new(FixtureTransport::load(path)?));
        }
        self.live_transport()
    }

    #[cfg(feature = "http")]
    fn live_transport(&self) -> Result<Box<dyn ChatTransport>> {
        let http = HttpTransport::from_env(&self.base_url, Duration::from_secs(self.timeout_secs))?;
        Ok(match &self.record {
            Some(path) => Box::new(RecordingTransport::new(http, path.clone())),
            None => Box::new(http),
        })
    }

    #[cfg(not(feature = "http"))]
    fn live_transport(&self) -> Result<Box<dyn ChatTransport>> {
        Err(Error::Transport("built without the `http` feature; set distill.fixture".into()))
    }
}

/// Prompt templates. `{name}` placeholders are filled by the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub version: &'static str,
    pub decompose: &'static str,
    pub summarize: &'static str,
    pub diversify: &'static str,
    pub forbidden: &'static str,
}

pub const PROMPTS_V1: Prompts = Prompts {
    version: "v1",
    decompose: include_str!("../../assets/prompts/decompose.v1.txt"),
    summarize: include_str!("../../assets/prompts/summarize.v1.txt"),
    diversify: include_str!("../../assets/prompts/diversify.v1.txt"),
    forbidden: include_str!("../../assets/prompts/forbidden.v1.txt"),
};

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn parse_error(message: impl Into<String>, raw: &str) -> Error {
    Error::Parse { message: message.into(), raw: raw.to_string() }
}

/// Lines beginning `Step i` with `i` contiguous from 1. Text before the
/// first step is ignored; lines that do not start a step continue the
/// previous one.
pub fn parse_steps(raw: &str) -> Result<Vec<String>> {
    let mut steps: Vec<String> = Vec::new();
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(n) = step_number(line) {
            if n != steps.len() + 1 {
                return Err(parse_error(format!("expected Step {}, found Step {n}", steps.len() + 1), raw));
            }
            steps.push(line.to_string());
        } else if let Some(last) = steps.last_mut() {
            last.push(' ');
            last.push_str(line);
        }
    }
    if steps.is_empty() {
        return Err(parse_error("no `Step 1` line", raw));
    }
    Ok(steps)
}

fn step_number(line: &str) -> Option<usize> {
    let rest = line.strip_prefix("Step ")?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    let n = digits.parse().ok()?;
    has_step_prefix(line, n).then_some(n)
}

/// `Plan i: sentence` lines, exactly `expected` of them, in order.
pub fn parse_plans(raw: &str, expected: usize) -> Result<Vec<String>> {
    let mut plans = Vec::new();
    for line in raw.lines().map(str::trim).filter(|l| l.starts_with("Plan ")) {
        let want = format!("Plan {}:", plans.len() + 1);
        let Some(text) = line.strip_prefix(&want) else {
            return Err(parse_error(format!("expected `{want}`"), raw));
        };
        let text = text.trim();
        if text.is_empty() {
            return Err(parse_error(format!("{want} is empty"), raw));
        }
        plans.push(text.to_string());
    }
    if plans.len() != expected {
        return Err(parse_error(format!("{} plans for {expected} steps", plans.len()), raw));
    }
    Ok(plans)
}

pub struct DistillClient<'a> {
    transport: &'a dyn ChatTransport,
    config: DistillConfig,
    prompts: Prompts,
}

impl<'a> DistillClient<'a> {
    pub fn new(transport: &'a dyn ChatTransport, config: DistillConfig) -> Self {
        Self { transport, config, prompts: PROMPTS_V1 }
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    /// Retries transport failures with exponential backoff. Authentication
    /// and parse failures are not retried.
    fn send(&self, request: &ChatRequest) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.transport.complete(request) {
                Err(Error::Transport(msg)) if attempt < self.config.max_retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("request failed ({msg}); retry {} in {delay} ms", attempt + 1);
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    pub fn decompose_request(&self, question: &str, answer: &str) -> ChatRequest {
        let prompt = fill(self.prompts.decompose, &[("question", question), ("answer", answer)]);
        ChatRequest::user(&self.config.model, prompt, self.config.answer_temperature)
    }

    pub fn summarize_request(&self, question: &str, steps: &[String]) -> ChatRequest {
        let prompt = fill(self.prompts.summarize, &[("question", question), ("steps", &steps.join("\n"))]);
        ChatRequest::user(&self.config.model, prompt, self.config.plan_temperature)
    }

    /// The first trajectory of a question carries no forbidden clause.
    pub fn trajectory_request(&self, question: &str, forbidden: &[Vec<String>]) -> ChatRequest {
        let clause = if forbidden.is_empty() {
            String::new()
        } else {
            let chains: Vec<String> = forbidden
                .iter()
                .enumerate()
                .map(|(b, chain)| {
                    let plans: Vec<String> =
                        chain.iter().enumerate().map(|(i, p)| format!("  Plan {}: {p}", i + 1)).collect();
                    format!("Chain {}:\n{}", b + 1, plans.join("\n"))
                })
                .collect();
            format!("\n{}", fill(self.prompts.forbidden, &[("chains", &chains.join("\n"))]))
        };
        let prompt = fill(self.prompts.diversify, &[("question", question), ("forbidden", &clause)]);
        ChatRequest::user(&self.config.model, prompt, self.config.answer_temperature)
    }

    pub fn decompose(&self, question: &str, answer: &str) -> Result<Vec<String>> {
        parse_steps(&self.send(&self.decompose_request(question, answer))?)
    }

    pub fn summarize(&self, question: &str, steps: &[String]) -> Result<Vec<String>> {
        if steps.is_empty() {
            return Err(Error::Precondition("cannot summarize an empty step list".into()));
        }
        parse_plans(&self.send(&self.summarize_request(question, steps))?, steps.len())
    }

    /// Up to `u` new trajectories whose plan chains differ from `prior` and
    /// from each other. Failed trajectories are skipped.
    pub fn sample_diverse_chains(&self, question: &str, prior: &[PlanChain], u: usize) -> Vec<Trajectory> {
        let mut forbidden: Vec<Vec<String>> = prior.iter().map(|c| c.plans.clone()).collect();
        let mut out = Vec::new();
        for j in 0..u {
            let attempt = self
                .send(&self.trajectory_request(question, &forbidden))
                .and_then(|raw| parse_steps(&raw))
                .and_then(|steps| Ok(Trajectory { plans: self.summarize(question, &steps)?, steps }));
            match attempt {
                Ok(t) if forbidden.contains(&t.plans) => {
                    log::info!("trajectory {} repeats an earlier chain; dropped", j + 1);
                }
                Ok(t) => {
                    forbidden.push(t.plans.clone());
                    out.push(t);
                }
                Err(e) => log::warn!("trajectory {} skipped: {e}", j + 1),
            }
        }
        out
    }

    /// Distills one sample: its own answer plus the retained extra
    /// trajectories, each as a sample.
    pub fn distill_sample(&self, sample: &ReasoningSample) -> Result<Vec<ReasoningSample>> {
        let steps = self.decompose(&sample.question, &sample.steps.join("\n"))?;
        let plans = self.summarize(&sample.question, &steps)?;
        let base = ReasoningSample { steps, plans, ..sample.clone() };
        base.validate()?;
        let prior = [PlanChain { plans: base.plans.clone(), sample_id: base.id.clone(), trajectory: 0 }];
        let extra = self.sample_diverse_chains(&sample.question, &prior, self.config.trajectories);
        let kept = filter_correct(sample.family, extra, &sample.answer);
        let mut out = vec![base];
        for (j, t) in kept.into_iter().enumerate() {
            out.push(ReasoningSample {
                id: format!("{}-t{}", sample.id, j + 1),
                steps: t.steps,
                plans: t.plans,
                ..sample.clone()
            });
        }
        Ok(out)
    }

    /// Distills every sample with at most `in_flight` questions running at
    /// once. Output order follows input order; failed questions are skipped.
    pub fn distill_corpus(&self, samples: &[ReasoningSample]) -> Vec<ReasoningSample> {
        let slots: Vec<Mutex<Option<Vec<ReasoningSample>>>> = samples.iter().map(|_| Mutex::new(None)).collect();
        let next = Mutex::new(0usize);
        std::thread::scope(|scope| {
            for _ in 0..self.config.in_flight.min(samples.len()).max(1) {
                scope.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().unwrap();
                        let i = *n;
                        *n += 1;
                        i
                    };
                    if i >= samples.len() {
                        break;
                    }
                    match self.distill_sample(&samples[i]) {
                        Ok(v) => *slots[i].lock().unwrap() = Some(v),
                        Err(e) => log::warn!("sample {} skipped: {e}", samples[i].id),
                    }
                });
            }
        });
        slots.into_iter().filter_map(|s| s.into_inner().unwrap()).flatten().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn steps_parse_and_keep_prefixes() {
        let raw = "Sure.\nStep 1: a\nStep 2: b\ncontinued\nStep 3: c";
        assert_eq!(parse_steps(raw).unwrap(), vec!["Step 1: a", "Step 2: b continued", "Step 3: c"]);
    }

    #[test]
    fn missing_step_is_a_parse_error() {
        let raw = "Step 1: a\nStep 3: c";
        match parse_steps(raw) {
            Err(Error::Parse { raw: kept, .. }) => assert_eq!(kept, raw),
            other => panic!("{other:?}"),
        }
        assert!(parse_steps("no steps here").is_err());
    }

    #[test]
    fn plan_count_must_match() {
        assert_eq!(parse_plans("Plan 1: x.\nPlan 2: y.", 2).unwrap(), vec!["x.", "y."]);
        assert!(parse_plans("Plan 1: x.", 2).is_err());
        assert!(parse_plans("Plan 2: x.", 1).is_err());
    }

    #[test]
    fn completion_body() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(parse_completion(body).unwrap(), "hi");
        assert!(matches!(parse_completion("{}"), Err(Error::Parse { .. })));
    }

    struct Flaky {
        failures: AtomicUsize,
        calls: AtomicUsize,
    }

    impl ChatTransport for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(Error::Transport("503".into()));
            }
            Ok("Plan 1: x.".into())
        }
    }

    #[test]
    fn retries_then_succeeds_or_gives_up() {
        let cfg = DistillConfig { max_retries: 2, backoff_ms: 0, ..Default::default() };
        let t = Flaky { failures: AtomicUsize::new(2), calls: AtomicUsize::new(0) };
        let c = DistillClient::new(&t, cfg.clone());
        assert_eq!(c.summarize("q", &["Step 1: a".into()]).unwrap(), vec!["x."]);
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
        let t = Flaky { failures: AtomicUsize::new(5), calls: AtomicUsize::new(0) };
        let c = DistillClient::new(&t, cfg);
        assert!(matches!(c.summarize("q", &["Step 1: a".into()]), Err(Error::Transport(_))));
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn empty_steps_rejected_before_any_call() {
        let t = Flaky { failures: AtomicUsize::new(0), calls: AtomicUsize::new(0) };
        let c = DistillClient::new(&t, DistillConfig::default());
        assert!(matches!(c.summarize("q", &[]), Err(Error::Precondition(_))));
        assert_eq!(t.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn temperatures_follow_the_call_kind() {
        let t = FixtureTransport::new([]);
        let c = DistillClient::new(&t, DistillConfig::default());
        assert_eq!(c.decompose_request("q", "a").temperature, 0.0);
        assert_eq!(c.trajectory_request("q", &[]).temperature, 0.0);
        assert_eq!(c.summarize_request("q", &[]).temperature, 0.3);
        assert_eq!(DistillConfig::default().trajectories, 20);
    }

    #[test]
    fn forbidden_clause_only_after_first_chain() {
        let t = FixtureTransport::new([]);
        let c = DistillClient::new(&t, DistillConfig::default());
        let first = &c.trajectory_request("q", &[]).messages[0].content;
        assert!(!first.contains("Do not follow"));
        let later = &c.trajectory_request("q", &[vec!["Add three.".into()]]).messages[0].content;
        assert!(later.contains("Do not follow") && later.contains("Plan 1: Add three."));
    }
}

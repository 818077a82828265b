//! Measurement: pass@1 per evaluation mode, token cost, latent-space
//! analysis and the codebook ablation grid.

pub mod ablation;
pub mod latent;
mod svg;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use iclp_substrate::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::answer::extract;
use crate::corpus::{Family, ReasoningSample};
use crate::lm::{GenerateOptions, LanguageModel};
use crate::tokenizer::{Vocabulary, BOS, EOS};
use crate::{Error, Result};

/// Which corpora a model was trained and tested on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalMode {
    /// Test split of the training corpus.
    Normal,
    /// Trained on one corpus, tested on another.
    Cross { train: String, test: String },
    /// Trained on merged corpora.
    Accumulation { sources: Vec<String> },
}

impl EvalMode {
    /// `normal`, `arith→strings`, or `arith+strings`.
    pub fn tag(&self) -> String {
        match self {
            EvalMode::Normal => "normal".into(),
            EvalMode::Cross { train, test } => format!("{train}→{test}"),
            EvalMode::Accumulation { sources } => sources.join("+"),
        }
    }
}

/// Produces an assistant continuation for a prompt.
pub trait Generator {
    fn generate(&self, prompt: &[u32]) -> Vec<u32>;
}

/// Greedy decoding with a fixed budget.
pub struct GreedyModel<'a> {
    pub model: &'a LanguageModel<f32>,
    pub max_new_tokens: usize,
}

impl Generator for GreedyModel<'_> {
    fn generate(&self, prompt: &[u32]) -> Vec<u32> {
        let opts = GenerateOptions { max_new_tokens: self.max_new_tokens, temperature: 0.0 };
        self.model.generate_ids(prompt, &opts, &mut Rng::seed_from_u64(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    pub family: Family,
    pub procedure_id: String,
    pub expected: String,
    pub extracted: Option<String>,
    pub correct: bool,
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub latent_tokens: usize,
    /// Generated ids, latent tokens included.
    pub ids: Vec<u32>,
}

impl QuestionResult {
    pub fn total_tokens(&self) -> usize {
        self.prompt_tokens + self.generated_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyAccuracy {
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_family: BTreeMap<Family, FamilyAccuracy>,
    pub seed: u64,
    /// Artifact hashes (model, codec, vocabulary, dataset, config).
    pub hashes: BTreeMap<String, String>,
}

pub fn prompt_ids(vocab: &dyn Vocabulary, question: &str) -> Vec<u32> {
    let mut p = vec![BOS];
    p.extend(vocab.base().encode(question));
    p
}

/// Base-vocabulary text of a generation: latent ids, `<eos>` and anything
/// after it removed.
pub fn answer_text(ids: &[u32], vocab: &dyn Vocabulary) -> String {
    let end = ids.iter().position(|&id| id == EOS).unwrap_or(ids.len());
    let kept: Vec<u32> = ids[..end].iter().copied().filter(|&id| !vocab.is_latent(id)).collect();
    vocab.base().decode(&kept)
}

pub fn score(sample: &ReasoningSample, ids: Vec<u32>, prompt_tokens: usize, vocab: &dyn Vocabulary) -> QuestionResult {
    let extracted = extract(sample.family, &answer_text(&ids, vocab));
    QuestionResult {
        id: sample.id.clone(),
        family: sample.family,
        procedure_id: sample.procedure_id.clone(),
        expected: sample.answer.clone(),
        correct: extracted.as_deref() == Some(sample.answer.as_str()),
        extracted,
        prompt_tokens,
        generated_tokens: ids.len(),
        latent_tokens: ids.iter().filter(|&&id| vocab.is_latent(id)).count(),
        ids,
    }
}

/// One greedy generation per question; failed extraction counts as wrong.
pub fn evaluate_pass1(
    generator: &dyn Generator,
    vocab: &dyn Vocabulary,
    testset: &[ReasoningSample],
    mode: &EvalMode,
    seed: u64,
    hashes: BTreeMap<String, String>,
) -> (EvalReport, Vec<QuestionResult>) {
    let results: Vec<QuestionResult> = testset
        .iter()
        .map(|s| {
            let prompt = prompt_ids(vocab, &s.question);
            let ids = generator.generate(&prompt);
            score(s, ids, prompt.len(), vocab)
        })
        .collect();
    (report(&results, mode, seed, hashes), results)
}

pub fn report(results: &[QuestionResult], mode: &EvalMode, seed: u64, hashes: BTreeMap<String, String>) -> EvalReport {
    let mut per_family: BTreeMap<Family, FamilyAccuracy> = BTreeMap::new();
    for r in results {
        let e = per_family.entry(r.family).or_insert(FamilyAccuracy { correct: 0, total: 0, accuracy: 0.0 });
        e.total += 1;
        e.correct += usize::from(r.correct);
    }
    for e in per_family.values_mut() {
        e.accuracy = percent(e.correct, e.total);
    }
    let correct = results.iter().filter(|r| r.correct).count();
    EvalReport {
        mode: mode.tag(),
        accuracy: percent(correct, results.len()),
        correct,
        total: results.len(),
        per_family,
        seed,
        hashes,
    }
}

fn percent(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

/// Tokens used per question, prompt included, with mean and population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCostReport {
    pub per_question: Vec<(String, usize)>,
    pub mean: f64,
    pub std: f64,
}

pub fn token_cost_report(results: &[QuestionResult]) -> TokenCostReport {
    let per_question: Vec<(String, usize)> = results.iter().map(|r| (r.id.clone(), r.total_tokens())).collect();
    let (mean, std) = mean_std(per_question.iter().map(|p| p.1 as f64));
    TokenCostReport { per_question, mean, std }
}

/// Mean and population standard deviation, two-pass.
pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub const RESULTS_HEADER: &str =
    "id,family,procedure_id,expected,extracted,correct,prompt_tokens,generated_tokens,latent_tokens,total_tokens";

/// Per-question CSV; the raw input of the token-cost protocol.
pub fn write_results_csv(path: &Path, results: &[QuestionResult]) -> Result<()> {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.family,
            r.procedure_id,
            csv_field(&r.expected),
            csv_field(r.extracted.as_deref().unwrap_or("")),
            u8::from(r.correct),
            r.prompt_tokens,
            r.generated_tokens,
            r.latent_tokens,
            r.total_tokens()
        ));
    }
    write_file(path, out.as_bytes())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// `mean,std,count` summary row.
pub fn write_token_cost_csv(path: &Path, report: &TokenCostReport) -> Result<()> {
    let body = format!("mean,std,count\n{},{},{}\n", report.mean, report.std, report.per_question.len());
    write_file(path, body.as_bytes())
}

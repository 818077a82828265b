//! In-browser view of the plan codec. Everything runs on the main thread,
//! so the page keeps corpora and codecs small.

use iclp_core::codec::stats::codebook_stats;
use iclp_core::codec::train::{exact_match_rate, train_codec};
use iclp_core::codec::{Codec, CodecConfig};
use iclp_core::corpus::synthetic::{generate, SyntheticConfig};
use iclp_core::corpus::{Family, ReasoningSample};
use iclp_core::latentize::{latentize_sample, ExtendedVocabulary};
use iclp_core::pipeline::{build_tokenizer, plan_set};
use iclp_core::tokenizer::Tokenizer;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    samples: Vec<ReasoningSample>,
    tokenizer: Tokenizer,
    plans: Vec<Vec<u32>>,
    codec: Option<Codec<f32>>,
}

#[wasm_bindgen]
impl Demo {
    /// Synthetic corpus of `count` samples from `family` ("arith" or "strings").
    #[wasm_bindgen(constructor)]
    pub fn new(family: &str, count: usize, procedures: usize, seed: u64) -> Result<Demo, JsError> {
        let family: Family = family.parse().map_err(js_err)?;
        let config = SyntheticConfig { family, count, procedures, seed, ..Default::default() };
        let (samples, _) = generate(&config).map_err(js_err)?;
        let tokenizer = build_tokenizer(&[family], samples.iter());
        let plans = plan_set(&samples, &tokenizer).map_err(js_err)?;
        Ok(Demo { samples, tokenizer, plans, codec: None })
    }

    /// Samples as a JSON array of `{id, question, steps, plans, answer}`.
    pub fn samples(&self) -> String {
        let rows: Vec<_> = self
            .samples
            .iter()
            .map(|s| json!({ "id": s.id, "question": s.question, "steps": s.steps, "plans": s.plans, "answer": s.answer }))
            .collect();
        serde_json::Value::Array(rows).to_string()
    }

    #[wasm_bindgen(getter)]
    pub fn distinct_plans(&self) -> usize {
        self.plans.len()
    }

    #[wasm_bindgen(getter)]
    pub fn vocab_size(&self) -> usize {
        self.tokenizer.len()
    }

    /// Trains a codec on the distinct plans and returns its diagnostics as JSON.
    pub fn train(&mut self, k: usize, d_h: usize, epochs: usize, seed: u64) -> Result<String, JsError> {
        let config = CodecConfig {
            k,
            d_h,
            epochs,
            enc_d_model: 32,
            dec_d_model: 32,
            enc_layers: 1,
            dec_layers: 1,
            ..CodecConfig::desk()
        };
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if !errors.is_empty() {
            return Err(JsError::new(&errors.join("; ")));
        }
        let (codec, stats) = train_codec(&self.plans, &config, self.tokenizer.len(), seed).map_err(js_err)?;
        let exact = exact_match_rate(&codec, &self.plans).map_err(js_err)?;
        let assignments: Vec<usize> = codec.plans_to_latent(&self.plans).map_err(js_err)?.concat();
        let usage = codebook_stats(&assignments, k);
        self.codec = Some(codec);
        Ok(json!({
            "initial_ce": stats.initial_ce,
            "final_ce": stats.final_ce,
            "steps": stats.steps,
            "exact_match": exact,
            "perplexity": usage.perplexity,
            "used_codes": usage.used,
            "histogram": usage.histogram,
        })
        .to_string())
    }

    /// Latent indices and greedy reconstruction of one plan sentence.
    pub fn encode_plan(&self, text: &str) -> Result<String, JsError> {
        let codec = self.trained()?;
        let text = text.trim();
        if !self.tokenizer.covers(text) {
            return Err(JsError::new("the plan uses words outside this corpus vocabulary"));
        }
        let tokens = self.tokenizer.encode(text);
        let latent = codec.plan_to_latent(&tokens).map_err(js_err)?;
        let rebuilt = self.tokenizer.decode(&codec.round_trip(&tokens).map_err(js_err)?);
        Ok(json!({ "tokens": tokens.len(), "latent": latent, "reconstruction": rebuilt, "exact": rebuilt == text })
            .to_string())
    }

    /// The assistant side of sample `index` as fine-tuning text, with each
    /// plan replaced by its latent tokens.
    pub fn latentize(&self, index: usize) -> Result<String, JsError> {
        let codec = self.trained()?;
        let sample = self.samples.get(index).ok_or_else(|| JsError::new("sample index out of range"))?;
        let vocab = ExtendedVocabulary::new(self.tokenizer.clone(), codec.config.k).map_err(js_err)?;
        let record = latentize_sample(sample, codec, &vocab, "demo").map_err(js_err)?;
        Ok(vocab.decode(&record.assistant_ids))
    }
}

impl Demo {
    fn trained(&self) -> Result<&Codec<f32>, JsError> {
        self.codec.as_ref().ok_or_else(|| JsError::new("train a codec first"))
    }
}

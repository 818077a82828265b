//! Tiny decoder-only language model over a (possibly extended) vocabulary.

mod train;

use std::path::Path;

use iclp_substrate::checkpoint::{self, CheckpointMeta};
use iclp_substrate::nn::{Linear, TransformerStack, INIT_STD};
use iclp_substrate::{Float, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use train::{eval_loss, finetune_sft, RunLog, SftConfig, StepLog};

use crate::codec::copy_params;
use crate::latentize::TrainingRecord;
use crate::tokenizer::{Vocabulary, EOS, PAD};
use crate::{Error, Result};

/// Noise added to the mean base embedding when initializing extended rows.
pub const EXTENDED_ROW_NOISE: f64 = INIT_STD * 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Longest sequence the positional table covers.
    pub context: usize,
    /// Output projection shares the token embedding.
    pub tied_head: bool,
    /// Dropout on the embedding sum during training.
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 4, d_model: 128, context: 256, tied_head: true, dropout: 0.0 }
    }
}

impl LmConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.layers == 0 {
            errors.push("lm.layers must be at least 1".into());
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            errors.push(format!(
                "lm.d_model ({}) must be a positive multiple of lm.heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.context < 2 {
            errors.push("lm.context must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!("lm.dropout must lie in [0, 1), got {}", self.dropout));
        }
    }

    /// Closed-form parameter count for a vocabulary of `vocab` tokens.
    pub fn param_count(&self, vocab: usize) -> usize {
        let d = self.d_model;
        let head = if self.tied_head { 0 } else { d * vocab + vocab };
        vocab * d + self.context * d + TransformerStack::param_count(self.layers, d) + head
    }
}

/// Decoding budget and temperature. A temperature of zero is greedy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { max_new_tokens: 160, temperature: 0.0 }
    }
}

/// Generated ids (without the prompt) and their rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub ids: Vec<u32>,
    pub text: String,
}

/// Tape handles of one completion-loss evaluation.
pub struct CompletionLoss {
    pub loss: Var,
    /// `[B*seq, V]` next-token logits, including masked positions.
    pub logits: Var,
    /// Number of loss-bearing positions.
    pub tokens: usize,
}

#[derive(Debug, Clone)]
pub struct LanguageModel<F> {
    pub config: LmConfig,
    pub vocab_size: usize,
    /// Ids at or above this are extended (latent-plan) tokens.
    pub base_vocab: usize,
    pub store: ParamStore<F>,
    tok: ParamId,
    pos: ParamId,
    stack: TransformerStack,
    head: Option<Linear>,
}

impl<F: Float> LanguageModel<F> {
    pub fn new(config: LmConfig, vocab_size: usize, base_vocab: usize, rng: &mut Rng) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if base_vocab == 0 || base_vocab > vocab_size {
            errors.push(format!("base vocabulary {base_vocab} must be in [1, {vocab_size}]"));
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut emb: Vec<F> = (0..vocab_size * d).map(|_| rng.normal(INIT_STD)).collect();
        if vocab_size > base_vocab {
            let mut mean = vec![0.0f64; d];
            for row in emb[..base_vocab * d].chunks(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v.to_f64_lossy() / base_vocab as f64;
                }
            }
            for row in emb[base_vocab * d..].chunks_mut(d) {
                for (v, &m) in row.iter_mut().zip(&mean) {
                    *v = F::lit(m + rng.normal::<f64>(EXTENDED_ROW_NOISE));
                }
            }
        }
        let tok = store.insert("lm.tok_emb", Tensor::new(vec![vocab_size, d], emb)?, true)?;
        let pos_data = (0..config.context * d).map(|_| rng.normal(INIT_STD)).collect();
        let pos = store.insert("lm.pos_emb", Tensor::new(vec![config.context, d], pos_data)?, true)?;
        let stack = TransformerStack::new(&mut store, "lm", config.layers, d, config.heads, true, rng)?;
        let head = if config.tied_head {
            None
        } else {
            Some(Linear::new(&mut store, "lm.head", d, vocab_size, true, INIT_STD, rng)?)
        };
        Ok(Self { config, vocab_size, base_vocab, store, tok, pos, stack, head })
    }

    pub fn tok_emb_id(&self) -> ParamId {
        self.tok
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Every record fits the context and uses only known ids.
    pub fn check_records(&self, records: &[TrainingRecord]) -> Result<()> {
        for r in records {
            if r.len() > self.config.context {
                return Err(Error::Precondition(format!(
                    "record {} has {} tokens, context is {}",
                    r.id,
                    r.len(),
                    self.config.context
                )));
            }
            if let Some(&bad) = r.user_ids.iter().chain(&r.assistant_ids).find(|&&id| id as usize >= self.vocab_size) {
                return Err(Error::Vocab(format!(
                    "record {} has id {bad} outside a vocabulary of {}",
                    r.id, self.vocab_size
                )));
            }
            if r.mask.len() != r.len() {
                return Err(Error::Precondition(format!("record {} has a mask of the wrong length", r.id)));
            }
        }
        Ok(())
    }

    /// Logits for padded sequences, `[B*seq, V]`.
    pub fn logits_graph(&self, g: &mut Graph<F>, seqs: &[&[u32]], dropout: Option<&mut Rng>) -> (Var, usize) {
        let b = seqs.len();
        let seq = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
        assert!(seq <= self.config.context, "sequence of {seq} exceeds context {}", self.config.context);
        let mut ids = vec![PAD as usize; b * seq];
        let mut pos = vec![0usize; b * seq];
        for (bi, s) in seqs.iter().enumerate() {
            for (t, &id) in s.iter().enumerate() {
                ids[bi * seq + t] = id as usize;
            }
            for t in 0..seq {
                pos[bi * seq + t] = t;
            }
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len().max(1)).collect();
        let tok = g.param(&self.store, self.tok);
        let x = g.gather(tok, &ids);
        let pe = g.param(&self.store, self.pos);
        let pe = g.gather(pe, &pos);
        let mut x = g.add(x, pe);
        if let (Some(rng), p) = (dropout, self.config.dropout) {
            if p > 0.0 {
                let keep = F::lit(1.0 / (1.0 - p));
                let shape = g.value(x).shape().to_vec();
                let n = shape.iter().product();
                let mask = (0..n).map(|_| if rng.uniform() < p { F::zero() } else { keep }).collect();
                let m = g.constant(Tensor::new(shape, mask).expect("mask matches input"));
                x = g.mul(x, m);
            }
        }
        let h = self.stack.forward(g, &self.store, x, b, seq, &lens);
        let logits = match &self.head {
            None => g.matmul_nt(h, tok),
            Some(head) => head.forward(g, &self.store, h),
        };
        (logits, seq)
    }

    /// Mean next-token cross-entropy over positions whose target has mask 1.
    pub fn completion_loss(
        &self,
        g: &mut Graph<F>,
        records: &[&TrainingRecord],
        dropout: Option<&mut Rng>,
    ) -> Result<CompletionLoss> {
        let full: Vec<Vec<u32>> = records.iter().map(|r| r.ids()).collect();
        let inputs: Vec<&[u32]> = full.iter().map(|ids| &ids[..ids.len().saturating_sub(1)]).collect();
        let tokens: usize = records.iter().map(|r| r.mask.iter().skip(1).filter(|&&m| m == 1).count()).sum();
        if tokens == 0 {
            return Err(Error::Precondition("batch has no loss-bearing positions".into()));
        }
        let (logits, seq) = self.logits_graph(g, &inputs, dropout);
        let (targets, weights) = completion_targets(records, seq, tokens);
        let loss = g.cross_entropy(logits, &targets, &weights);
        Ok(CompletionLoss { loss, logits, tokens })
    }

    fn next_logits(&self, h: &[F]) -> Vec<F> {
        match &self.head {
            None => {
                let tok = self.store.get(self.tok);
                (0..self.vocab_size).map(|v| h.iter().zip(tok.row(v)).map(|(&a, &b)| a * b).sum()).collect()
            }
            Some(head) => head.apply(&self.store, h),
        }
    }

    /// Autoregressive continuation of `prompt` until `<eos>` (kept in the
    /// output), the token budget, or the context limit.
    pub fn generate_ids(&self, prompt: &[u32], opts: &GenerateOptions, rng: &mut Rng) -> Vec<u32> {
        assert!(!prompt.is_empty(), "generation needs a non-empty prompt");
        let tok = self.store.get(self.tok);
        let pos = self.store.get(self.pos);
        let mut cache = self.stack.new_cache();
        let mut out = Vec::new();
        let mut h = Vec::new();
        let feed = |id: u32, p: usize, cache: &mut _| {
            let x: Vec<F> = tok.row(id as usize).iter().zip(pos.row(p)).map(|(&a, &b)| a + b).collect();
            self.stack.step_cached(&self.store, &x, cache)
        };
        for (p, &id) in prompt.iter().enumerate().take(self.config.context) {
            h = feed(id, p, &mut cache);
        }
        let mut len = prompt.len().min(self.config.context);
        while out.len() < opts.max_new_tokens {
            let next = pick(&self.next_logits(&h), opts.temperature, rng);
            out.push(next);
            if next == EOS || len >= self.config.context {
                break;
            }
            h = feed(next, len, &mut cache);
            len += 1;
        }
        out
    }

    pub fn generate(
        &self,
        vocab: &dyn Vocabulary,
        prompt: &[u32],
        opts: &GenerateOptions,
        rng: &mut Rng,
    ) -> Generation {
        let ids = self.generate_ids(prompt, opts, rng);
        let text = vocab.render_all(&ids);
        Generation { ids, text }
    }
}

/// Next-token targets and weights for rows `[B*seq]` of padded inputs. Rows
/// whose target is outside the assistant span, or padding, weigh zero.
pub fn completion_targets<F: Float>(records: &[&TrainingRecord], seq: usize, tokens: usize) -> (Vec<usize>, Vec<F>) {
    let w = F::one() / F::from_count(tokens);
    let mut targets = vec![0usize; records.len() * seq];
    let mut weights = vec![F::zero(); records.len() * seq];
    for (bi, r) in records.iter().enumerate() {
        let ids = r.ids();
        for t in 1..ids.len() {
            targets[bi * seq + t - 1] = ids[t] as usize;
            if r.mask[t] == 1 {
                weights[bi * seq + t - 1] = w;
            }
        }
    }
    (targets, weights)
}

/// Argmax (lowest id on ties) at temperature zero, otherwise a softmax draw.
fn pick<F: Float>(logits: &[F], temperature: f64, rng: &mut Rng) -> u32 {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let max = logits.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|v| ((v.to_f64_lossy() - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i as u32;
        }
    }
    (logits.len() - 1) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmManifest {
    pub lm: LmConfig,
    pub vocab_size: usize,
    pub base_vocab: usize,
}

impl LanguageModel<f32> {
    pub fn save(&self, path: &Path, vocab_hash: &str, meta: serde_json::Value) -> Result<()> {
        let config = serde_json::to_value(LmManifest {
            lm: self.config.clone(),
            vocab_size: self.vocab_size,
            base_vocab: self.base_vocab,
        })?;
        let mut m = serde_json::json!({ "vocab_hash": vocab_hash });
        if let (Some(obj), serde_json::Value::Object(extra)) = (m.as_object_mut(), meta) {
            obj.extend(extra);
        }
        checkpoint::save(path, &self.store, &CheckpointMeta { kind: "lm".into(), config, rng: None, meta: m })?;
        Ok(())
    }

    /// Loads a model and returns it with the vocabulary hash it was trained on.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (manifest, store) = checkpoint::load::<f32>(path)?;
        if manifest.kind != "lm" {
            return Err(Error::Precondition(format!(
                "{} holds a `{}` checkpoint, not a model",
                path.display(),
                manifest.kind
            )));
        }
        let lm: LmManifest = serde_json::from_value(manifest.config)?;
        let mut model = Self::new(lm.lm, lm.vocab_size, lm.base_vocab, &mut Rng::seed_from_u64(0))?;
        copy_params(&mut model.store, &store)?;
        let vocab_hash = manifest.meta.get("vocab_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        Ok((model, vocab_hash))
    }
}

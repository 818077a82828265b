//! Memory-token VQ autoencoder over plan texts.
//!
//! The encoder reads a plan followed by `L` learned memory tokens; its
//! outputs at the memory positions, projected to `d_h`, are the plan's
//! memory slots. Each slot is replaced by its nearest codebook row. The
//! causal decoder sees the `L` quantized rows, then `[RECON]`, and predicts
//! the plan tokens followed by `<eos>`.
//!
//! Loss, with `sg` the stop-gradient:
//!
//! ```text
//! ce + mean(sg[slots] - H_q)^2 + beta * mean(slots - sg[H_q])^2
//! ```
//!
//! The decoder receives `H_q` through a straight-through node, so the
//! reconstruction gradient reaches the encoder unchanged. With
//! `commitment_norm = unsquared` the last term becomes `beta` times the
//! per-plan Frobenius norm, averaged over the batch.

pub mod quantize;
pub mod stats;
pub mod train;

use std::path::Path;

use iclp_substrate::checkpoint::{self, CheckpointMeta};
use iclp_substrate::nn::{Linear, TransformerStack, INIT_STD};
use iclp_substrate::optim::AdamWConfig;
use iclp_substrate::{Float, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::merge::LatentKeyer;
use crate::tokenizer::{Tokenizer, EOS, PAD, RECON};
use crate::{Error, Result};

pub use quantize::{nearest, quantize_rows};
pub use stats::{codebook_stats, CodebookStats};
pub use train::{train_codec, EpochStats, TrainingStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommitmentNorm {
    Squared,
    Unsquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeadCodeConfig {
    pub enabled: bool,
    /// A row is dead while its usage EMA is below `threshold / K`.
    pub threshold: f64,
    /// Consecutive dead steps before a restart.
    pub patience: u32,
    pub ema_decay: f64,
}

impl Default for DeadCodeConfig {
    fn default() -> Self {
        Self { enabled: true, threshold: 0.05, patience: 40, ema_decay: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Memory tokens per plan.
    #[serde(rename = "L")]
    pub l: usize,
    /// Codebook size.
    #[serde(rename = "K")]
    pub k: usize,
    pub d_h: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_d_model: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub dec_d_model: usize,
    pub beta: f64,
    pub commitment_norm: CommitmentNorm,
    pub max_plan_tokens: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub grad_clip: Option<f64>,
    pub dead_codes: DeadCodeConfig,
}

impl Default for CodecConfig {
    /// Quantizer and schedule at full scale (L=6, K=2048,
    /// d_h=512, beta=0.3, batch 16, 2 epochs) around desk-sized transformers.
    fn default() -> Self {
        Self {
            l: 6,
            k: 2048,
            d_h: 512,
            enc_layers: 2,
            enc_heads: 4,
            enc_d_model: 64,
            dec_layers: 2,
            dec_heads: 4,
            dec_d_model: 64,
            beta: 0.3,
            commitment_norm: CommitmentNorm::Squared,
            max_plan_tokens: 32,
            batch_size: 16,
            epochs: 2,
            lr: 2e-3,
            min_lr: 1e-4,
            weight_decay: 0.0,
            warmup_steps: 20,
            grad_clip: Some(1.0),
            dead_codes: DeadCodeConfig::default(),
        }
    }
}

impl CodecConfig {
    /// The desk-scale codec used by the default pipeline.
    pub fn desk() -> Self {
        Self { k: 64, d_h: 32, epochs: 200, ..Self::default() }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errors.push(msg);
            }
        };
        need(self.l >= 1, format!("codec.L must be at least 1, got {}", self.l));
        need(self.k >= 2, format!("codec.K must be at least 2, got {}", self.k));
        need(self.d_h >= 1, format!("codec.d_h must be at least 1, got {}", self.d_h));
        need(self.beta > 0.0, format!("codec.beta must be positive, got {}", self.beta));
        need(self.max_plan_tokens >= 1, "codec.max_plan_tokens must be at least 1".into());
        need(self.batch_size >= 1, "codec.batch_size must be at least 1".into());
        need(self.lr > 0.0, "codec.lr must be positive".into());
        for (name, d, h) in [("enc", self.enc_d_model, self.enc_heads), ("dec", self.dec_d_model, self.dec_heads)] {
            need(
                h >= 1 && d >= 1 && d % h == 0,
                format!("codec.{name}_d_model ({d}) must be a positive multiple of codec.{name}_heads ({h})"),
            );
        }
    }

    pub fn optimizer(&self, total_steps: u64) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            total_steps,
            grad_clip: self.grad_clip,
            ..AdamWConfig::default()
        }
    }
}

/// How the quantizer behaves inside [`Codec::loss`].
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizerMode<F> {
    /// Nearest-row assignment with a straight-through copy to the decoder.
    Live,
    /// Finite-difference reference. The assignment is fixed, the decoder
    /// input is `slots + offsets`, and the stop-gradient inputs are the
    /// constants `sg_slots` and `sg_quantized`. Built by
    /// [`Codec::frozen_mode`] at some parameters, it has the live loss's
    /// value there and its exact derivative is the live loss's
    /// straight-through gradient.
    Frozen { indices: Vec<usize>, offsets: Tensor<F>, sg_slots: Tensor<F>, sg_quantized: Tensor<F> },
}

/// Tape handles of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub codebook_term: Var,
    pub commitment_term: Var,
    /// Encoder memory slots, `[B*L, d_h]`.
    pub slots: Var,
    /// Decoder-side quantized rows (straight-through output in live mode).
    pub quantized: Var,
    pub indices: Vec<usize>,
}

/// Quantized slots of one plan.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPlan<F> {
    /// `[L, d_h]`, row `e` equal to codebook row `indices[e]`.
    pub quantized: Tensor<F>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Codec<F> {
    pub config: CodecConfig,
    pub vocab_size: usize,
    pub store: ParamStore<F>,
    enc_tok: ParamId,
    memory: ParamId,
    enc_pos: ParamId,
    encoder: TransformerStack,
    enc_proj: Linear,
    codebook: ParamId,
    dec_in: Linear,
    dec_tok: ParamId,
    dec_pos: ParamId,
    decoder: TransformerStack,
}

fn gaussian<F: Float>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal(std)).collect()).expect("positive shape")
}

impl<F: Float> Codec<F> {
    pub fn new(config: CodecConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if vocab_size <= RECON as usize {
            errors.push(format!("vocabulary of {vocab_size} tokens lacks the reserved ids"));
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let c = &config;
        let mut store = ParamStore::new();
        let enc_tok = store.insert("enc.tok_emb", gaussian(&[vocab_size, c.enc_d_model], INIT_STD, rng), true)?;
        let memory = store.insert("enc.memory", gaussian(&[c.l, c.enc_d_model], INIT_STD, rng), true)?;
        let enc_pos =
            store.insert("enc.pos_emb", gaussian(&[c.max_plan_tokens + c.l, c.enc_d_model], INIT_STD, rng), true)?;
        let encoder = TransformerStack::new(&mut store, "enc", c.enc_layers, c.enc_d_model, c.enc_heads, false, rng)?;
        let enc_proj = Linear::new(&mut store, "enc.proj", c.enc_d_model, c.d_h, true, INIT_STD, rng)?;
        let cb_std = 1.0 / (c.d_h as f64).sqrt();
        let codebook = store.insert("codebook", gaussian(&[c.k, c.d_h], cb_std, rng), false)?;
        let dec_in = Linear::new(&mut store, "dec.in", c.d_h, c.dec_d_model, true, INIT_STD, rng)?;
        let dec_tok = store.insert("dec.tok_emb", gaussian(&[vocab_size, c.dec_d_model], INIT_STD, rng), true)?;
        let dec_pos = store.insert(
            "dec.pos_emb",
            gaussian(&[c.l + 1 + c.max_plan_tokens + 1, c.dec_d_model], INIT_STD, rng),
            true,
        )?;
        let decoder = TransformerStack::new(&mut store, "dec", c.dec_layers, c.dec_d_model, c.dec_heads, true, rng)?;
        Ok(Self {
            config,
            vocab_size,
            store,
            enc_tok,
            memory,
            enc_pos,
            encoder,
            enc_proj,
            codebook,
            dec_in,
            dec_tok,
            dec_pos,
            decoder,
        })
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<G: Float>(&self) -> Codec<G> {
        Codec {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            store: self.store.cast(),
            enc_tok: self.enc_tok,
            memory: self.memory,
            enc_pos: self.enc_pos,
            encoder: self.encoder.clone(),
            enc_proj: self.enc_proj.clone(),
            codebook: self.codebook,
            dec_in: self.dec_in.clone(),
            dec_tok: self.dec_tok,
            dec_pos: self.dec_pos,
            decoder: self.decoder.clone(),
        }
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self) -> &Tensor<F> {
        self.store.get(self.codebook)
    }

    /// Truncates to `max_plan_tokens` (with a warning); rejects empty plans.
    pub fn prepare_plan(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        if tokens.is_empty() {
            return Err(Error::Precondition("empty plan".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} outside codec vocabulary of {}", self.vocab_size)));
        }
        let max = self.config.max_plan_tokens;
        if tokens.len() > max {
            log::warn!("plan of {} tokens truncated to {max}", tokens.len());
            return Ok(tokens[..max].to_vec());
        }
        Ok(tokens.to_vec())
    }

    /// Memory slots `[B*L, d_h]` for prepared plans.
    pub fn encode_graph(&self, g: &mut Graph<F>, plans: &[Vec<u32>]) -> Var {
        let (b, l) = (plans.len(), self.config.l);
        let seq = plans.iter().map(Vec::len).max().unwrap_or(0) + l;
        let mut ids = vec![PAD as usize; b * seq];
        let mut pos = vec![0usize; b * seq];
        let mut lens = Vec::with_capacity(b);
        let mut mem_rows = Vec::with_capacity(b * l);
        for (bi, p) in plans.iter().enumerate() {
            let base = bi * seq;
            for (t, &tok) in p.iter().enumerate() {
                ids[base + t] = tok as usize;
                pos[base + t] = t;
            }
            for j in 0..l {
                let r = base + p.len() + j;
                ids[r] = self.vocab_size + j;
                pos[r] = p.len() + j;
                mem_rows.push(r);
            }
            lens.push(p.len() + l);
        }
        let tok = g.param(&self.store, self.enc_tok);
        let mem = g.param(&self.store, self.memory);
        let table = g.concat_rows(&[tok, mem]);
        let x = g.gather(table, &ids);
        let pe = g.param(&self.store, self.enc_pos);
        let pe = g.gather(pe, &pos);
        let x = g.add(x, pe);
        let h = self.encoder.forward(g, &self.store, x, b, seq, &lens);
        let m = g.gather(h, &mem_rows);
        self.enc_proj.forward(g, &self.store, m)
    }

    /// Memory slots of one plan, `[L, d_h]`.
    pub fn encode_memory_slots(&self, plan_tokens: &[u32]) -> Result<Tensor<F>> {
        let plan = self.prepare_plan(plan_tokens)?;
        let mut g = Graph::new();
        let slots = self.encode_graph(&mut g, &[plan]);
        Ok(g.value(slots).clone())
    }

    pub fn quantize_slots(&self, slots: &Tensor<F>) -> QuantizedPlan<F> {
        let d = self.config.d_h;
        let cb = self.codebook().data();
        let indices = quantize_rows(cb, slots.data(), d);
        let data = indices.iter().flat_map(|&i| cb[i * d..(i + 1) * d].iter().copied()).collect();
        QuantizedPlan { quantized: Tensor::new(vec![indices.len(), d], data).expect("non-empty"), indices }
    }

    pub fn plan_to_latent(&self, plan_tokens: &[u32]) -> Result<Vec<usize>> {
        Ok(self.quantize_slots(&self.encode_memory_slots(plan_tokens)?).indices)
    }

    /// Latent indices for many plans, `L` per plan, batched.
    pub fn plans_to_latent(&self, plans: &[Vec<u32>]) -> Result<Vec<Vec<usize>>> {
        let prepared = plans.iter().map(|p| self.prepare_plan(p)).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(plans.len());
        for chunk in prepared.chunks(64) {
            let mut g = Graph::new();
            let slots = self.encode_graph(&mut g, chunk);
            let idx = quantize_rows(self.codebook().data(), g.value(slots).data(), self.config.d_h);
            out.extend(idx.chunks(self.config.l).map(<[usize]>::to_vec));
        }
        Ok(out)
    }

    /// Indices and the offsets that make [`QuantizerMode::Frozen`] agree
    /// with the live quantizer at the current parameters.
    pub fn frozen_mode(&self, plans: &[Vec<u32>]) -> QuantizerMode<F> {
        let mut g = Graph::new();
        let slots = self.encode_graph(&mut g, plans);
        let sv = g.value(slots);
        let d = self.config.d_h;
        let cb = self.codebook().data();
        let indices = quantize_rows(cb, sv.data(), d);
        let mut offsets = sv.clone();
        let mut quantized = sv.clone();
        for (r, &i) in indices.iter().enumerate() {
            let row = &cb[i * d..(i + 1) * d];
            quantized.row_mut(r).copy_from_slice(row);
            for (o, &c) in offsets.row_mut(r).iter_mut().zip(row) {
                *o = c - *o;
            }
        }
        QuantizerMode::Frozen { indices, offsets, sg_slots: sv.clone(), sg_quantized: quantized }
    }

    /// Full codec loss on a batch of prepared plans.
    pub fn loss(&self, g: &mut Graph<F>, plans: &[Vec<u32>], mode: &QuantizerMode<F>) -> LossParts {
        let (b, l, d) = (plans.len(), self.config.l, self.config.d_h);
        let slots = self.encode_graph(g, plans);
        let indices = match mode {
            QuantizerMode::Live => quantize_rows(self.codebook().data(), g.value(slots).data(), d),
            QuantizerMode::Frozen { indices, .. } => indices.clone(),
        };
        let cb = g.param(&self.store, self.codebook);
        let hq = g.gather(cb, &indices);

        let elems = F::from_count(b * l * d);
        let sg_slots = match mode {
            QuantizerMode::Live => g.stop_gradient(slots),
            QuantizerMode::Frozen { sg_slots, .. } => g.constant(sg_slots.clone()),
        };
        let pull = g.sub(sg_slots, hq);
        let pull = g.sum_squares(pull);
        let codebook_term = g.scale(pull, F::one() / elems);

        let sg_hq = match mode {
            QuantizerMode::Live => g.stop_gradient(hq),
            QuantizerMode::Frozen { sg_quantized, .. } => g.constant(sg_quantized.clone()),
        };
        let commit = g.sub(slots, sg_hq);
        let beta = F::lit(self.config.beta);
        let commitment_term = match self.config.commitment_norm {
            CommitmentNorm::Squared => {
                let s = g.sum_squares(commit);
                g.scale(s, beta / elems)
            }
            CommitmentNorm::Unsquared => {
                let per_plan = g.group_sum_squares(commit, l);
                let norms = g.sqrt(per_plan);
                let s = g.sum(norms);
                g.scale(s, beta / F::from_count(b))
            }
        };

        let quantized = match mode {
            QuantizerMode::Live => {
                let hq_value = g.value(hq).clone();
                g.straight_through(slots, hq_value)
            }
            QuantizerMode::Frozen { offsets, .. } => {
                let c = g.constant(offsets.clone());
                g.add(slots, c)
            }
        };
        let ce = self.reconstruction_ce(g, quantized, plans);
        let partial = g.add(ce, codebook_term);
        let total = g.add(partial, commitment_term);
        LossParts { total, ce, codebook_term, commitment_term, slots, quantized, indices }
    }

    /// Mean next-token cross-entropy of each plan followed by `<eos>`,
    /// predicted from positions `[RECON], p_1 .. p_T`.
    fn reconstruction_ce(&self, g: &mut Graph<F>, quantized: Var, plans: &[Vec<u32>]) -> Var {
        let (b, l) = (plans.len(), self.config.l);
        let seq = l + 1 + plans.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD as usize; b * seq];
        let mut pos = vec![0usize; b * seq];
        let mut lens = Vec::with_capacity(b);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for (bi, p) in plans.iter().enumerate() {
            let base = bi * seq;
            for j in 0..l {
                ids[base + j] = self.vocab_size + bi * l + j;
                pos[base + j] = j;
            }
            ids[base + l] = RECON as usize;
            pos[base + l] = l;
            for (t, &tok) in p.iter().enumerate() {
                ids[base + l + 1 + t] = tok as usize;
                pos[base + l + 1 + t] = l + 1 + t;
            }
            lens.push(l + 1 + p.len());
            let w = F::one() / F::from_count((p.len() + 1) * b);
            for t in 0..=p.len() {
                rows.push(base + l + t);
                targets.push(if t < p.len() { p[t] as usize } else { EOS as usize });
                weights.push(w);
            }
        }
        let proj = self.dec_in.forward(g, &self.store, quantized);
        let tok = g.param(&self.store, self.dec_tok);
        let table = g.concat_rows(&[tok, proj]);
        let x = g.gather(table, &ids);
        let pe = g.param(&self.store, self.dec_pos);
        let pe = g.gather(pe, &pos);
        let x = g.add(x, pe);
        let h = self.decoder.forward(g, &self.store, x, b, seq, &lens);
        let h = g.gather(h, &rows);
        let logits = g.matmul_nt(h, tok);
        g.cross_entropy(logits, &targets, &weights)
    }

    /// Greedy decoding from quantized rows until `<eos>` or the length cap.
    pub fn reconstruct_greedy(&self, quantized: &QuantizedPlan<F>) -> Vec<u32> {
        let d = self.config.dec_d_model;
        let tok = self.store.get(self.dec_tok);
        let pos = self.store.get(self.dec_pos);
        let mut cache = self.decoder.new_cache();
        let with_pos = |mut x: Vec<F>, p: usize| {
            for (a, &b) in x.iter_mut().zip(pos.row(p)) {
                *a += b;
            }
            x
        };
        for j in 0..self.config.l {
            let x = self.dec_in.apply(&self.store, quantized.quantized.row(j));
            self.decoder.step_cached(&self.store, &with_pos(x, j), &mut cache);
        }
        let mut out = Vec::new();
        let mut next = RECON;
        for step in 0..=self.config.max_plan_tokens {
            let x = with_pos(tok.row(next as usize).to_vec(), self.config.l + step);
            let h = self.decoder.step_cached(&self.store, &x, &mut cache);
            let mut best = (0usize, F::neg_infinity());
            for v in 0..self.vocab_size {
                let s: F = h.iter().zip(tok.row(v)).map(|(&a, &b)| a * b).sum();
                if s > best.1 {
                    best = (v, s);
                }
            }
            debug_assert_eq!(h.len(), d);
            next = best.0 as u32;
            if next == EOS || step == self.config.max_plan_tokens {
                break;
            }
            out.push(next);
        }
        out
    }

    /// Encode, quantize and decode.
    pub fn round_trip(&self, plan_tokens: &[u32]) -> Result<Vec<u32>> {
        let slots = self.encode_memory_slots(plan_tokens)?;
        Ok(self.reconstruct_greedy(&self.quantize_slots(&slots)))
    }
}

/// Config and vocabulary recorded in a codec checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecManifest {
    pub codec: CodecConfig,
    pub vocab_size: usize,
}

impl Codec<f32> {
    pub fn save(&self, path: &Path, vocab_hash: &str, meta: serde_json::Value) -> Result<()> {
        let config = serde_json::to_value(CodecManifest { codec: self.config.clone(), vocab_size: self.vocab_size })?;
        let mut m = serde_json::json!({ "vocab_hash": vocab_hash });
        if let (Some(obj), serde_json::Value::Object(extra)) = (m.as_object_mut(), meta) {
            obj.extend(extra);
        }
        let ck = CheckpointMeta { kind: "codec".into(), config, rng: None, meta: m };
        checkpoint::save(path, &self.store, &ck)?;
        Ok(())
    }

    /// Loads a codec and returns it with the vocabulary hash it was trained on.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (manifest, store) = checkpoint::load::<f32>(path)?;
        if manifest.kind != "codec" {
            return Err(Error::Precondition(format!(
                "{} holds a `{}` checkpoint, not a codec",
                path.display(),
                manifest.kind
            )));
        }
        let cm: CodecManifest = serde_json::from_value(manifest.config)?;
        let mut codec = Codec::new(cm.codec, cm.vocab_size, &mut Rng::seed_from_u64(0))?;
        copy_params(&mut codec.store, &store)?;
        let vocab_hash = manifest.meta.get("vocab_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        Ok((codec, vocab_hash))
    }
}

/// Overwrites every parameter of `dst` with the same-named one in `src`.
pub(crate) fn copy_params<F: Float>(dst: &mut ParamStore<F>, src: &ParamStore<F>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Precondition(format!("checkpoint has {} tensors, model expects {}", src.len(), dst.len())));
    }
    let ids: Vec<ParamId> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let sid = src.id(&name)?;
        dst.set(id, src.get(sid).clone())?;
    }
    Ok(())
}

/// A codec paired with the tokenizer its plans are encoded with.
pub struct PlanEncoder<'a> {
    pub codec: &'a Codec<f32>,
    pub tokenizer: &'a Tokenizer,
}

impl LatentKeyer for PlanEncoder<'_> {
    fn plan_indices(&self, plan: &str) -> Result<Vec<usize>> {
        self.codec.plan_to_latent(&self.tokenizer.encode(plan))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use iclp_substrate::gradcheck::{check_loss, perturb};

    pub(crate) fn tiny_config() -> CodecConfig {
        CodecConfig {
            l: 2,
            k: 4,
            d_h: 8,
            enc_layers: 1,
            enc_heads: 2,
            enc_d_model: 8,
            dec_layers: 1,
            dec_heads: 2,
            dec_d_model: 8,
            max_plan_tokens: 6,
            ..CodecConfig::default()
        }
    }

    #[test]
    fn shapes_and_purity() {
        let cfg = CodecConfig { l: 6, ..tiny_config() };
        let codec = Codec::<f32>::new(cfg, 12, &mut Rng::seed_from_u64(1)).unwrap();
        let a = codec.encode_memory_slots(&[5, 6, 7]).unwrap();
        assert_eq!(a.shape(), &[6, 8]);
        assert_eq!(a, codec.encode_memory_slots(&[5, 6, 7]).unwrap());
        assert_eq!(codec.plan_to_latent(&[5, 6]).unwrap().len(), 6);
        assert!(codec.encode_memory_slots(&[]).is_err());
    }

    #[test]
    fn truncation_keeps_prefix() {
        let codec = Codec::<f32>::new(tiny_config(), 12, &mut Rng::seed_from_u64(1)).unwrap();
        let long: Vec<u32> = (5..12).chain(5..12).collect();
        assert_eq!(codec.prepare_plan(&long).unwrap(), long[..6].to_vec());
        assert_eq!(codec.encode_memory_slots(&long).unwrap(), codec.encode_memory_slots(&long[..6]).unwrap());
    }

    #[test]
    fn quantized_rows_copy_codebook_rows() {
        let codec = Codec::<f32>::new(tiny_config(), 12, &mut Rng::seed_from_u64(2)).unwrap();
        let q = codec.quantize_slots(&codec.encode_memory_slots(&[5, 9]).unwrap());
        for (e, &i) in q.indices.iter().enumerate() {
            assert_eq!(q.quantized.row(e), codec.codebook().row(i));
        }
    }

    #[test]
    fn vq_terms_vanish_on_codebook_rows() {
        let mut codec = Codec::<f64>::new(tiny_config(), 12, &mut Rng::seed_from_u64(3)).unwrap();
        let plans = vec![vec![5u32, 6], vec![7, 8, 9]];
        let mut g = Graph::new();
        let slots = codec.encode_graph(&mut g, &plans);
        let sv = g.value(slots).clone();
        // Put the first four slots into the codebook exactly.
        let cb = Tensor::new(vec![4, 8], sv.data()[..32].to_vec()).unwrap();
        let id = codec.codebook_id();
        codec.store.set(id, cb).unwrap();
        let mut g = Graph::new();
        let parts = codec.loss(&mut g, &plans, &QuantizerMode::Live);
        assert_eq!(parts.indices, vec![0, 1, 2, 3]);
        assert_eq!(g.value(parts.codebook_term).item(), 0.0);
        assert_eq!(g.value(parts.commitment_term).item(), 0.0);
        assert!(g.value(parts.ce).item() > 0.0);
    }

    #[test]
    fn straight_through_copies_gradient_exactly() {
        let codec = Codec::<f64>::new(tiny_config(), 12, &mut Rng::seed_from_u64(4)).unwrap();
        let plans = vec![vec![5u32, 6, 7], vec![8, 9]];
        let mut g = Graph::new();
        let parts = codec.loss(&mut g, &plans, &QuantizerMode::Live);
        let grads = g.backward(parts.ce).unwrap();
        let through = grads.var(parts.quantized).unwrap();
        let at_slots = grads.var(parts.slots).unwrap();
        assert_eq!(through.data(), at_slots.data());
        assert!(through.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn frozen_mode_matches_live_values_and_gradients() {
        let codec = Codec::<f64>::new(tiny_config(), 12, &mut Rng::seed_from_u64(5)).unwrap();
        let plans = vec![vec![5u32, 6, 7], vec![8, 9]];
        let mode = codec.frozen_mode(&plans);
        let mut g1 = Graph::new();
        let live = codec.loss(&mut g1, &plans, &QuantizerMode::Live);
        let mut g2 = Graph::new();
        let frozen = codec.loss(&mut g2, &plans, &mode);
        assert_eq!(live.indices, frozen.indices);
        assert!((g1.value(live.total).item() - g2.value(frozen.total).item()).abs() < 1e-12);
        let a = g1.backward(live.total).unwrap().into_params();
        let b = g2.backward(frozen.total).unwrap().into_params();
        for ((ia, ta), (ib, tb)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert!((x - y).abs() < 1e-10, "{}: {x} vs {y}", codec.store.name(*ia));
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for norm in [CommitmentNorm::Squared, CommitmentNorm::Unsquared] {
            let cfg = CodecConfig { commitment_norm: norm, ..tiny_config() };
            let mut codec = Codec::<f64>::new(cfg, 12, &mut Rng::seed_from_u64(6)).unwrap();
            perturb(&mut codec.store, 0.3, &mut Rng::seed_from_u64(60));
            let plans = vec![vec![5u32, 6, 7], vec![8, 9, 10, 11]];
            let mode = codec.frozen_mode(&plans);
            let report = check_loss(
                &codec.store,
                |g, store| {
                    let c = Codec { store: store.clone(), ..codec.clone() };
                    c.loss(g, &plans, &mode).total
                },
                1e-5,
                Some(24),
            )
            .unwrap();
            assert!(report.max_error < 1e-4, "{norm:?}: {report:?}");
        }
    }

    #[test]
    fn unused_codebook_rows_get_no_gradient() {
        let codec = Codec::<f64>::new(tiny_config(), 12, &mut Rng::seed_from_u64(7)).unwrap();
        let plans = vec![vec![5u32, 6]];
        let mut g = Graph::new();
        let parts = codec.loss(&mut g, &plans, &QuantizerMode::Live);
        let grads = g.backward(parts.total).unwrap();
        let gcb = grads.param(codec.codebook_id()).unwrap();
        for k in 0..4 {
            let used = parts.indices.contains(&k);
            assert_eq!(gcb.row(k).iter().any(|&v| v != 0.0), used, "row {k}");
        }
    }

    #[test]
    fn greedy_reconstruction_is_deterministic() {
        let codec = Codec::<f32>::new(tiny_config(), 12, &mut Rng::seed_from_u64(8)).unwrap();
        let a = codec.round_trip(&[5, 6, 7]).unwrap();
        assert_eq!(a, codec.round_trip(&[5, 6, 7]).unwrap());
        assert!(a.len() <= 6);
    }

    #[test]
    fn checkpoint_round_trip() {
        let codec = Codec::<f32>::new(tiny_config(), 12, &mut Rng::seed_from_u64(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("codec.ckpt");
        codec.save(&p, "vh", serde_json::json!({})).unwrap();
        let (back, vh) = Codec::load(&p).unwrap();
        assert_eq!(vh, "vh");
        assert_eq!(back.plan_to_latent(&[5, 6]).unwrap(), codec.plan_to_latent(&[5, 6]).unwrap());
    }

    #[test]
    fn paper_scale_config_validates() {
        let mut errors = Vec::new();
        CodecConfig::default().validate(&mut errors);
        assert!(errors.is_empty());
        let c = CodecConfig::default();
        assert_eq!((c.l, c.k, c.d_h, c.beta, c.batch_size, c.epochs), (6, 2048, 512, 0.3, 16, 2));
        let bad = CodecConfig { l: 0, k: 1, beta: 0.0, ..c };
        let mut errors = Vec::new();
        bad.validate(&mut errors);
        assert_eq!(errors.len(), 3);
    }
}

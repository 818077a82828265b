//! End-to-end codec training.

use iclp_substrate::optim::AdamW;
use iclp_substrate::{Graph, Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::{codebook_stats, Codec, CodecConfig, QuantizerMode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    /// Mean squared distance between a slot and its codebook row.
    pub mean_quant_error: f64,
    pub perplexity: f64,
    pub used_codes: usize,
    pub restarts: usize,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    /// Reconstruction cross-entropy over the corpus before the first step.
    pub initial_ce: f64,
    pub final_ce: f64,
    pub steps: u64,
    pub epochs: Vec<EpochStats>,
}

/// Re-seeds rows whose usage EMA stayed below `threshold / K` for
/// `patience` consecutive checks.
#[derive(Debug, Clone)]
pub struct DeadCodeTracker {
    ema: Vec<f64>,
    dead_for: Vec<u32>,
    threshold: f64,
    patience: u32,
    decay: f64,
}

impl DeadCodeTracker {
    pub fn new(k: usize, threshold: f64, patience: u32, decay: f64) -> Self {
        Self { ema: vec![1.0 / k as f64; k], dead_for: vec![0; k], threshold: threshold / k as f64, patience, decay }
    }

    /// Records one batch of assignments and returns the rows due for a restart.
    pub fn observe(&mut self, assignments: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.ema.len()];
        for &a in assignments {
            counts[a] += 1;
        }
        let n = assignments.len().max(1) as f64;
        let mut due = Vec::new();
        for (k, &c) in counts.iter().enumerate() {
            self.ema[k] = self.decay * self.ema[k] + (1.0 - self.decay) * c as f64 / n;
            if self.ema[k] < self.threshold {
                self.dead_for[k] += 1;
                if self.dead_for[k] >= self.patience {
                    due.push(k);
                }
            } else {
                self.dead_for[k] = 0;
            }
        }
        due
    }

    fn revived(&mut self, k: usize) {
        self.ema[k] = 1.0 / self.ema.len() as f64;
        self.dead_for[k] = 0;
    }
}

/// Copies a randomly chosen batch slot into each of `rows`. Returns the
/// number of rows changed; an empty batch changes nothing.
pub fn reset_dead_codes(codebook: &mut Tensor<f32>, rows: &[usize], batch_slots: &Tensor<f32>, rng: &mut Rng) -> usize {
    if batch_slots.is_empty() {
        return 0;
    }
    for &k in rows {
        let src = rng.below(batch_slots.rows());
        let slot = batch_slots.row(src).to_vec();
        codebook.row_mut(k).copy_from_slice(&slot);
    }
    rows.len()
}

/// Mean reconstruction cross-entropy over `plans`.
pub fn corpus_ce(codec: &Codec<f32>, plans: &[Vec<u32>]) -> f64 {
    let mut total = 0.0;
    for chunk in plans.chunks(64) {
        let mut g = Graph::new();
        let parts = codec.loss(&mut g, chunk, &QuantizerMode::Live);
        total += g.value(parts.ce).item() as f64 * chunk.len() as f64;
    }
    total / plans.len() as f64
}

/// Fraction of plans reproduced exactly by encode, quantize, greedy decode.
pub fn exact_match_rate(codec: &Codec<f32>, plans: &[Vec<u32>]) -> Result<f64> {
    let mut hits = 0;
    for p in plans {
        let p = codec.prepare_plan(p)?;
        if codec.round_trip(&p)? == p {
            hits += 1;
        }
    }
    Ok(hits as f64 / plans.len() as f64)
}

fn init_codebook(codec: &mut Codec<f32>, first_batch: &[Vec<u32>], rng: &mut Rng) {
    let mut g = Graph::new();
    let slots = codec.encode_graph(&mut g, first_batch);
    let sv = g.value(slots);
    let (k, d) = (codec.config.k, codec.config.d_h);
    let mut order: Vec<usize> = (0..sv.rows()).collect();
    rng.shuffle(&mut order);
    let std = 1.0 / (d as f64).sqrt();
    let mut data = Vec::with_capacity(k * d);
    for row in 0..k {
        match order.get(row) {
            Some(&r) => data.extend_from_slice(sv.row(r)),
            None => data.extend((0..d).map(|_| rng.normal::<f32>(std))),
        }
    }
    let id = codec.codebook_id();
    codec.store.set(id, Tensor::new(vec![k, d], data).expect("k*d values")).expect("codebook shape");
}

/// Trains a codec from scratch on tokenized plans. Deterministic in
/// `(plans, config, vocab_size, seed)`.
pub fn train_codec(
    plans: &[Vec<u32>],
    config: &CodecConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<(Codec<f32>, TrainingStats)> {
    if plans.is_empty() {
        return Err(Error::Precondition("no plans to train on".into()));
    }
    let mut distinct = plans.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        log::warn!("a single distinct plan: the codebook will collapse to one code per slot");
    }
    let mut rng = Rng::derived(seed, "codec");
    let mut codec = Codec::<f32>::new(config.clone(), vocab_size, &mut rng)?;
    let plans = plans.iter().map(|p| codec.prepare_plan(p)).collect::<Result<Vec<_>>>()?;
    let b = config.batch_size.min(plans.len());
    let steps_per_epoch = plans.len().div_ceil(b);
    let mut order: Vec<usize> = (0..plans.len()).collect();
    rng.shuffle(&mut order);
    let first: Vec<Vec<u32>> = order[..b].iter().map(|&i| plans[i].clone()).collect();
    init_codebook(&mut codec, &first, &mut rng);

    let initial_ce = corpus_ce(&codec, &plans);
    let mut opt = AdamW::new(config.optimizer((config.epochs * steps_per_epoch) as u64), &codec.store);
    let dc = &config.dead_codes;
    let mut tracker = DeadCodeTracker::new(config.k, dc.threshold, dc.patience, dc.ema_decay);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut assignments = Vec::with_capacity(plans.len() * config.l);
        let (mut loss_sum, mut ce_sum, mut qerr_sum, mut seen) = (0.0, 0.0, 0.0, 0usize);
        let (mut restarts, mut skipped) = (0, 0);
        for chunk in order.chunks(b) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| plans[i].clone()).collect();
            let mut g = Graph::new();
            let parts = codec.loss(&mut g, &batch, &QuantizerMode::Live);
            let total = g.value(parts.total).item();
            if !total.is_finite() {
                log::warn!("epoch {epoch}: non-finite codec loss, step skipped");
                skipped += 1;
                continue;
            }
            let slots = g.value(parts.slots).clone();
            let cb = codec.codebook();
            let d = config.d_h;
            let qerr: f64 = parts
                .indices
                .iter()
                .enumerate()
                .map(|(r, &k)| {
                    slots
                        .row(r)
                        .iter()
                        .zip(&cb.data()[k * d..(k + 1) * d])
                        .map(|(a, c)| ((a - c) as f64).powi(2))
                        .sum::<f64>()
                })
                .sum();
            let grads = g.backward(parts.total)?.into_params();
            match opt.step(&mut codec.store, &grads) {
                Ok(_) => {}
                Err(iclp_substrate::Error::NonFiniteGradient(name)) => {
                    log::warn!("epoch {epoch}: non-finite gradient in {name}, step skipped");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            }
            let n = batch.len() as f64;
            loss_sum += total as f64 * n;
            ce_sum += g.value(parts.ce).item() as f64 * n;
            qerr_sum += qerr / config.l as f64;
            seen += batch.len();
            assignments.extend_from_slice(&parts.indices);
            if dc.enabled {
                let due = tracker.observe(&parts.indices);
                if !due.is_empty() {
                    let id = codec.codebook_id();
                    let mut cbt = codec.store.get(id).clone();
                    restarts += reset_dead_codes(&mut cbt, &due, &slots, &mut rng);
                    codec.store.set(id, cbt)?;
                    for k in due {
                        tracker.revived(k);
                    }
                }
            }
        }
        let st = codebook_stats(&assignments, config.k);
        let denom = seen.max(1) as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / denom,
            mean_ce: ce_sum / denom,
            mean_quant_error: qerr_sum / denom,
            perplexity: st.perplexity,
            used_codes: st.used,
            restarts,
            skipped_steps: skipped,
        };
        log::debug!(
            "codec epoch {epoch}: loss {:.4} ce {:.4} qerr {:.4} ppl {:.2} restarts {restarts}",
            stats.mean_loss,
            stats.mean_ce,
            stats.mean_quant_error,
            stats.perplexity
        );
        epochs.push(stats);
    }
    let final_ce = corpus_ce(&codec, &plans);
    Ok((codec, TrainingStats { initial_ce, final_ce, steps: opt.step_count(), epochs }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracker_flags_rows_after_patience() {
        let mut t = DeadCodeTracker::new(4, 0.5, 3, 0.0);
        assert!(t.observe(&[0, 1, 2, 0]).is_empty());
        assert!(t.observe(&[0, 1, 2, 0]).is_empty());
        assert_eq!(t.observe(&[0, 1, 2, 0]), vec![3]);
    }

    #[test]
    fn no_dead_codes_leaves_codebook() {
        let mut cb = Tensor::full(&[3, 2], 1.0f32);
        let slots = Tensor::full(&[2, 2], 5.0f32);
        let before = cb.clone();
        assert_eq!(reset_dead_codes(&mut cb, &[], &slots, &mut Rng::seed_from_u64(0)), 0);
        assert_eq!(cb, before);
    }

    #[test]
    fn dead_row_becomes_a_batch_slot() {
        let mut cb = Tensor::full(&[3, 2], 1.0f32);
        let slots = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        reset_dead_codes(&mut cb, &[1], &slots, &mut Rng::seed_from_u64(0));
        assert!(cb.row(1) == slots.row(0) || cb.row(1) == slots.row(1));
        assert_eq!(cb.row(0), &[1.0, 1.0]);
    }
}

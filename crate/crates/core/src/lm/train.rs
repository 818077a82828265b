//! Supervised fine-tuning with the completion loss.

use std::io::Write;
use std::path::Path;

use iclp_substrate::optim::{AdamW, AdamWConfig};
use iclp_substrate::{Graph, Rng};
use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::latentize::TrainingRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Train only the extended embedding rows.
    pub freeze_base: bool,
    /// Evaluate every this many steps; `None` evaluates once per epoch.
    pub eval_every: Option<u64>,
    /// Invoke the checkpoint callback every this many steps.
    pub checkpoint_every: Option<u64>,
    /// Abort when eval loss exceeds this multiple of the initial eval loss
    /// for `divergence_patience` consecutive evaluations.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for SftConfig {
    /// Batch 16 and 2 epochs; the learning rate suits a small model trained from scratch.
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            lr: 3e-3,
            min_lr: 1e-4,
            warmup_steps: 30,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            freeze_base: false,
            eval_every: None,
            checkpoint_every: None,
            divergence_factor: 10.0,
            divergence_patience: 3,
        }
    }
}

impl SftConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.epochs == 0 {
            errors.push("sft.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            errors.push("sft.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            errors.push(format!("sft.lr must be positive, got {}", self.lr));
        }
        if !(self.divergence_factor > 1.0) {
            errors.push("sft.divergence_factor must exceed 1".into());
        }
    }

    fn optimizer(&self, total_steps: u64) -> AdamWConfig {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config: SftConfig,
    pub initial_eval_loss: f64,
    /// `(step, eval loss)` pairs in order.
    pub evals: Vec<(u64, f64)>,
    pub steps: Vec<StepLog>,
    pub skipped_steps: usize,
}

impl RunLog {
    pub fn final_eval_loss(&self) -> f64 {
        self.evals.last().map(|e| e.1).unwrap_or(self.initial_eval_loss)
    }

    /// `step,loss,lr,grad_norm` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss,lr,grad_norm\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{}\n", s.step, s.loss, s.lr, s.grad_norm));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Token-weighted mean completion loss.
pub fn eval_loss(model: &LanguageModel<f32>, records: &[TrainingRecord]) -> Result<f64> {
    let (mut total, mut tokens) = (0.0f64, 0usize);
    for chunk in records.chunks(32) {
        let batch: Vec<&TrainingRecord> = chunk.iter().collect();
        let mut g = Graph::new();
        let out = model.completion_loss(&mut g, &batch, None)?;
        total += g.value(out.loss).item() as f64 * out.tokens as f64;
        tokens += out.tokens;
    }
    if tokens == 0 {
        return Err(Error::Precondition("no loss-bearing positions to evaluate".into()));
    }
    Ok(total / tokens as f64)
}

/// Fine-tunes `model` in place. Deterministic in `(model, train, eval,
/// config, seed)`. `checkpoint` is called with the step count at the
/// configured cadence.
pub fn finetune_sft(
    model: &mut LanguageModel<f32>,
    train: &[TrainingRecord],
    eval: &[TrainingRecord],
    config: &SftConfig,
    seed: u64,
    mut checkpoint: Option<&mut dyn FnMut(&LanguageModel<f32>, u64) -> Result<()>>,
) -> Result<RunLog> {
    let mut errors = Vec::new();
    config.validate(&mut errors);
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    if train.is_empty() {
        return Err(Error::Precondition("no training records".into()));
    }
    model.check_records(train)?;
    model.check_records(eval)?;
    let eval_set = if eval.is_empty() { train } else { eval };
    let mut rng = Rng::derived(seed, "sft");
    let b = config.batch_size.min(train.len());
    let steps_per_epoch = train.len().div_ceil(b);
    let total = (config.epochs * steps_per_epoch) as u64;
    let mut opt = AdamW::new(config.optimizer(total), &model.store);
    let tok = model.tok_emb_id();
    let base_rows = model.base_vocab * model.config.d_model;

    let initial = eval_loss(model, eval_set)?;
    log::info!("sft: initial eval loss {initial:.4}");
    let mut log = RunLog {
        seed,
        config: config.clone(),
        initial_eval_loss: initial,
        evals: Vec::new(),
        steps: Vec::new(),
        skipped_steps: 0,
    };
    let mut over = 0usize;
    let mut evaluate = |model: &LanguageModel<f32>, step: u64, log: &mut RunLog| -> Result<()> {
        let loss = eval_loss(model, eval_set)?;
        log::info!("sft: step {step} eval loss {loss:.4}");
        log.evals.push((step, loss));
        if loss.is_finite() && loss <= config.divergence_factor * initial {
            over = 0;
        } else {
            over += 1;
            if over >= config.divergence_patience {
                return Err(Error::Diverged(format!(
                    "eval loss {loss:.4} above {}x the initial {initial:.4} for {over} evaluations",
                    config.divergence_factor
                )));
            }
        }
        Ok(())
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(b) {
            let batch: Vec<&TrainingRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let out = model.completion_loss(&mut g, &batch, Some(&mut rng))?;
            let loss = g.value(out.loss).item() as f64;
            if !loss.is_finite() {
                log::warn!("sft: epoch {epoch}: non-finite loss, step skipped");
                log.skipped_steps += 1;
                continue;
            }
            let mut grads = g.backward(out.loss)?.into_params();
            let frozen: Option<Vec<f32>> = if config.freeze_base {
                grads.retain(|(id, _)| *id == tok);
                for (_, gr) in grads.iter_mut() {
                    gr.data_mut()[..base_rows].fill(0.0);
                }
                Some(model.store.get(tok).data()[..base_rows].to_vec())
            } else {
                None
            };
            let report = match opt.step(&mut model.store, &grads) {
                Ok(r) => r,
                Err(iclp_substrate::Error::NonFiniteGradient(name)) => {
                    log::warn!("sft: epoch {epoch}: non-finite gradient in {name}, step skipped");
                    log.skipped_steps += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            if let Some(rows) = frozen {
                // Decoupled weight decay would otherwise still shrink frozen rows.
                model.store.get_mut(tok).data_mut()[..base_rows].copy_from_slice(&rows);
            }
            step += 1;
            log.steps.push(StepLog { step, loss, lr: report.lr, grad_norm: report.grad_norm });
            if config.eval_every.is_some_and(|n| step.is_multiple_of(n)) {
                evaluate(model, step, &mut log)?;
            }
            if let (Some(n), Some(cb)) = (config.checkpoint_every, checkpoint.as_mut()) {
                if step.is_multiple_of(n) {
                    cb(model, step)?;
                }
            }
        }
        if config.eval_every.is_none() {
            evaluate(model, step, &mut log)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{rec, tiny};
    use super::*;

    fn toy_records() -> Vec<TrainingRecord> {
        // Answer token depends on the latent id that precedes it.
        (0..24)
            .map(|i| {
                let lp = 10 + (i % 2) as u32;
                let ans = 5 + (i % 2) as u32;
                rec(&[2, 7 + (i % 3) as u32], &[lp, ans, 3])
            })
            .collect()
    }

    #[test]
    fn training_reduces_eval_loss_and_is_deterministic() {
        let data = toy_records();
        let cfg = SftConfig { epochs: 6, batch_size: 8, lr: 1e-2, warmup_steps: 2, ..SftConfig::default() };
        let run = |seed| {
            let mut m = LanguageModel::<f32>::new(tiny(), 12, 10, &mut Rng::seed_from_u64(seed)).unwrap();
            let log = finetune_sft(&mut m, &data, &[], &cfg, seed, None).unwrap();
            (m, log)
        };
        let (a, la) = run(1);
        let (b, lb) = run(1);
        assert_eq!(la, lb);
        for id in a.store.ids() {
            assert_eq!(a.store.get(id), b.store.get(id));
        }
        assert!(la.final_eval_loss() < la.initial_eval_loss);
        assert_eq!(la.steps.len(), 6 * 3);
        assert!(la.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    }

    #[test]
    fn frozen_base_moves_only_extended_rows_and_still_learns() {
        let data = toy_records();
        let cfg = SftConfig {
            epochs: 8,
            batch_size: 8,
            lr: 2e-2,
            warmup_steps: 0,
            freeze_base: true,
            ..SftConfig::default()
        };
        let mut m = LanguageModel::<f32>::new(tiny(), 12, 10, &mut Rng::seed_from_u64(2)).unwrap();
        let before = m.clone();
        let log = finetune_sft(&mut m, &data, &[], &cfg, 2, None).unwrap();
        assert!(log.final_eval_loss() < log.initial_eval_loss);
        let tok = m.tok_emb_id();
        for id in m.store.ids() {
            let (x, y) = (before.store.get(id), m.store.get(id));
            if id == tok {
                assert_eq!(&x.data()[..80], &y.data()[..80]);
                assert_ne!(&x.data()[80..], &y.data()[80..]);
            } else {
                assert_eq!(x, y, "{}", m.store.name(id));
            }
        }
    }

    #[test]
    fn extended_rows_get_no_gradient_without_latent_ids() {
        // Untied, so output scoring does not touch the embedding table.
        let cfg = crate::lm::LmConfig { tied_head: false, ..tiny() };
        let m = LanguageModel::<f32>::new(cfg, 12, 10, &mut Rng::seed_from_u64(3)).unwrap();
        let grad_tail = |r: &TrainingRecord| {
            let mut g = Graph::new();
            let out = m.completion_loss(&mut g, &[r], None).unwrap();
            let gr = g.backward(out.loss).unwrap();
            gr.param(m.tok_emb_id()).unwrap().data()[80..].to_vec()
        };
        assert!(grad_tail(&rec(&[2, 7], &[5, 6, 3])).iter().all(|&v| v == 0.0));
        assert!(grad_tail(&rec(&[2, 7], &[10, 6, 3])).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn divergence_aborts() {
        let data = toy_records();
        let cfg = SftConfig {
            epochs: 4,
            batch_size: 8,
            lr: 50.0,
            min_lr: 50.0,
            warmup_steps: 0,
            grad_clip: None,
            divergence_factor: 1.01,
            divergence_patience: 1,
            ..SftConfig::default()
        };
        let mut m = LanguageModel::<f32>::new(tiny(), 12, 10, &mut Rng::seed_from_u64(2)).unwrap();
        assert!(matches!(finetune_sft(&mut m, &data, &[], &cfg, 2, None), Err(Error::Diverged(_))));
    }

    #[test]
    fn checkpoint_cadence_and_csv() {
        let data = toy_records();
        let cfg = SftConfig { epochs: 2, batch_size: 8, checkpoint_every: Some(2), ..SftConfig::default() };
        let mut m = LanguageModel::<f32>::new(tiny(), 12, 10, &mut Rng::seed_from_u64(2)).unwrap();
        let mut seen = Vec::new();
        let mut cb = |_: &LanguageModel<f32>, step: u64| {
            seen.push(step);
            Ok(())
        };
        let log = finetune_sft(&mut m, &data, &[], &cfg, 2, Some(&mut cb)).unwrap();
        assert_eq!(seen, vec![2, 4, 6]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,loss,lr,grad_norm\n"));
        assert_eq!(text.lines().count(), 7);
    }
}

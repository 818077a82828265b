//! Stage orchestration over one output directory.
//!
//! Each stage hashes its config slice together with the sha256 of every
//! upstream file, and skips itself when a stamp under `.stages/` records
//! the same input hash and its outputs are unchanged on disk.

pub mod config;
mod state;

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use iclp_substrate::checkpoint;
use iclp_substrate::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::PipelineConfig;
pub use state::{artifact_hash, is_fresh, RunLock, Stamp};

use crate::codec::train::exact_match_rate;
use crate::codec::{codebook_stats, train_codec, Codec, CodecConfig};
use crate::corpus::distill::DistillClient;
use crate::corpus::merge::{merge_corpora, NamedCorpus};
use crate::corpus::synthetic::{generate, vocabulary_texts, ProcedureManifest, Split, SyntheticConfig};
use crate::corpus::{read_jsonl, write_jsonl, Family, ReasoningSample};
use crate::eval::ablation::{run_ablation_grid, write_csv as write_ablation_csv, CellResult};
use crate::eval::latent::{collect_step_encodings, pairwise_distances, project_2d, DistanceMatrix, Projection, Trace};
use crate::eval::{
    evaluate_pass1, token_cost_report, write_results_csv, write_token_cost_csv, EvalMode, EvalReport, GreedyModel,
    QuestionResult,
};
use crate::latentize::{
    latentize_sample, read_dataset, render_baseline, step_line, DatasetHeader, DatasetReader, DatasetWriter,
    ExtendedVocabulary, RecordMode, TrainingRecord, DATASET_FORMAT,
};
use crate::lm::{finetune_sft, LanguageModel};
use crate::tokenizer::{Tokenizer, Vocabulary};
use crate::{Error, Result};

pub const CORPUS: &str = "corpus.jsonl";
pub const CORPUS_TEST: &str = "corpus.test.jsonl";
pub const CROSS_TEST: &str = "cross.test.jsonl";
pub const PROCEDURES: &str = "procedures.json";
pub const DISTILLED: &str = "distilled.jsonl";
pub const TOKENIZER: &str = "tokenizer.json";
pub const CODEC: &str = "codec.ckpt";
pub const CODEC_STATS: &str = "codec.stats.json";
pub const DATASET: &str = "latent.jsonl";
pub const DATASET_TEST: &str = "latent.test.jsonl";
pub const MODEL: &str = "lm.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const CROSS_CSV: &str = "cross.csv";
pub const TOKEN_COST: &str = "token_cost.csv";
pub const GENERATIONS: &str = "generations.jsonl";
pub const ANALYSIS: &str = "analysis.json";
pub const DISTANCES_CSV: &str = "distances.csv";
pub const DISTANCES_SVG: &str = "distances.svg";
pub const PROJECTION_CSV: &str = "projection.csv";
pub const PROJECTION_SVG: &str = "projection.svg";
pub const ABLATION: &str = "ablation.csv";
pub const SNAPSHOT: &str = "config.snapshot.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenCorpus,
    Distill,
    TrainCodec,
    Latentize,
    Finetune,
    Evaluate,
    Analyze,
    Ablate,
    All,
}

impl Command {
    pub const STAGES: [Command; 8] = [
        Command::GenCorpus,
        Command::Distill,
        Command::TrainCodec,
        Command::Latentize,
        Command::Finetune,
        Command::Evaluate,
        Command::Analyze,
        Command::Ablate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Distill => "distill",
            Command::TrainCodec => "train-codec",
            Command::Latentize => "latentize",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Analyze => "analyze",
            Command::Ablate => "ablate",
            Command::All => "all",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::STAGES
            .into_iter()
            .chain([Command::All])
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown command `{s}`")]))
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub stages: Vec<(String, Outcome)>,
}

/// Runs `command` (every applicable stage for `all`) under the directory lock.
pub fn run(command: Command, config: &PipelineConfig) -> Result<RunSummary> {
    let dir = config.out_dir.clone();
    let _lock = RunLock::acquire(&dir)?;
    let ctx = Ctx { config, dir: &dir, config_hash: config.hash() };
    let snapshot = json!({ "hash": ctx.config_hash, "config": config });
    let path = dir.join(SNAPSHOT);
    std::fs::write(&path, serde_json::to_string_pretty(&snapshot)?).map_err(|e| Error::io(&path, e))?;

    let stages: Vec<Command> = match command {
        Command::All => {
            let mut s = vec![Command::GenCorpus];
            if config.distill.enabled {
                s.push(Command::Distill);
            }
            s.extend([Command::TrainCodec, Command::Latentize, Command::Finetune, Command::Evaluate]);
            if config.latent.mode == RecordMode::Latent {
                s.push(Command::Analyze);
            }
            s
        }
        c => vec![c],
    };
    let mut summary = RunSummary { out_dir: dir.clone(), config_hash: ctx.config_hash.clone(), stages: Vec::new() };
    for stage in stages {
        let outcome = match stage {
            Command::GenCorpus => ctx.gen_corpus()?,
            Command::Distill => ctx.distill()?,
            Command::TrainCodec => ctx.train_codec()?,
            Command::Latentize => ctx.latentize()?,
            Command::Finetune => ctx.finetune()?,
            Command::Evaluate => ctx.evaluate()?,
            Command::Analyze => ctx.analyze()?,
            Command::Ablate => ctx.ablate()?,
            Command::All => unreachable!("expanded above"),
        };
        summary.stages.push((stage.to_string(), outcome));
    }
    Ok(summary)
}

struct Ctx<'a> {
    config: &'a PipelineConfig,
    dir: &'a Path,
    config_hash: String,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Training corpus file and the stage that writes it.
    fn corpus_source(&self) -> (&'static str, &'static str) {
        if self.config.distill.enabled {
            (DISTILLED, "distill")
        } else {
            (CORPUS, "gen-corpus")
        }
    }

    fn latent(&self) -> bool {
        self.config.latent.mode == RecordMode::Latent
    }

    /// Skips the stage when its inputs are unchanged, otherwise runs `body`
    /// and stamps `outputs`.
    fn stage(
        &self,
        name: &str,
        slice: Value,
        upstream: &[(&str, &str)],
        outputs: &[&str],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<Outcome> {
        let mut hashes = BTreeMap::new();
        for (file, producer) in upstream {
            hashes.insert(file.to_string(), artifact_hash(self.dir, file, producer)?);
        }
        let input = state::input_hash(&slice, &hashes);
        if is_fresh(self.dir, name, &input) {
            log::info!("{name}: inputs unchanged, skipped");
            return Ok(Outcome::Skipped);
        }
        log::info!("{name}: running");
        let started = std::time::Instant::now();
        body()?;
        let outputs: Vec<String> = outputs.iter().map(|s| s.to_string()).collect();
        state::write_stamp(self.dir, name, &self.config_hash, &input, &outputs)?;
        log::info!("{name}: done in {:.1}s", started.elapsed().as_secs_f64());
        Ok(Outcome::Ran)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn gen_corpus(&self) -> Result<Outcome> {
        let c = self.config;
        let cross = c.eval.cross_family;
        let mut outputs = vec![CORPUS, CORPUS_TEST, PROCEDURES];
        if cross.is_some() {
            outputs.push(CROSS_TEST);
        }
        let slice = json!({ "seed": c.seed, "corpus": c.corpus, "cross_family": cross });
        self.stage("gen-corpus", slice, &[], &outputs, || {
            let multi = c.corpus.families.len() > 1;
            let (mut train, mut test, mut manifests) = (Vec::new(), Vec::new(), Vec::new());
            for &family in &c.corpus.families {
                let (mut tr, manifest) = generate(&self.synthetic(family, Split::Train, c.corpus.count))?;
                let (mut te, _) = generate(&self.synthetic(family, Split::Test, c.corpus.test_count))?;
                if multi {
                    for s in tr.iter_mut().chain(te.iter_mut()) {
                        s.source = Some(family.to_string());
                    }
                }
                train.extend(tr);
                test.extend(te);
                manifests.push(manifest);
            }
            write_jsonl(&self.path(CORPUS), &train)?;
            write_jsonl(&self.path(CORPUS_TEST), &test)?;
            if let Some(f) = cross {
                let (cx, manifest) = generate(&self.synthetic(f, Split::Test, c.corpus.test_count))?;
                write_jsonl(&self.path(CROSS_TEST), &cx)?;
                manifests.push(manifest);
            }
            self.write_json(PROCEDURES, &manifests)
        })
    }

    fn synthetic(&self, family: Family, split: Split, count: usize) -> SyntheticConfig {
        let c = &self.config.corpus;
        SyntheticConfig {
            family,
            count,
            procedures: c.procedures,
            seed: self.config.seed,
            split,
            heldout_percent: c.heldout_percent,
            distinct: split == Split::Test,
        }
    }

    fn distill(&self) -> Result<Outcome> {
        let c = self.config;
        if !c.distill.enabled {
            return Err(Error::Precondition("distill.enabled is false".into()));
        }
        let slice = json!({ "distill": c.distill });
        self.stage("distill", slice, &[(CORPUS, "gen-corpus")], &[DISTILLED], || {
            let samples = read_jsonl(&self.path(CORPUS))?;
            let transport = c.distill.transport()?;
            let client = DistillClient::new(transport.as_ref(), c.distill.clone());
            let out = client.distill_corpus(&samples);
            if out.is_empty() {
                return Err(Error::Corpus("distillation produced no samples".into()));
            }
            log::info!("distill: {} samples from {} questions", out.len(), samples.len());
            write_jsonl(&self.path(DISTILLED), &out)
        })
    }

    fn train_codec(&self) -> Result<Outcome> {
        let c = self.config;
        let (source, producer) = self.corpus_source();
        let slice = json!({ "seed": c.seed, "codec": c.codec, "families": c.all_families() });
        let upstream = [(source, producer), (CORPUS_TEST, "gen-corpus")];
        self.stage("train-codec", slice, &upstream, &[TOKENIZER, CODEC, CODEC_STATS], || {
            let samples = read_jsonl(&self.path(source))?;
            let test = read_jsonl(&self.path(CORPUS_TEST))?;
            let tokenizer = build_tokenizer(&c.all_families(), samples.iter().chain(&test));
            let tok_path = self.path(TOKENIZER);
            std::fs::write(&tok_path, tokenizer.to_json()).map_err(|e| Error::io(&tok_path, e))?;

            let plans = plan_set(&samples, &tokenizer)?;
            log::info!("train-codec: {} distinct plans, vocabulary {}", plans.len(), tokenizer.len());
            let (codec, stats) = train_codec(&plans, &c.codec, tokenizer.len(), c.seed)?;
            let exact = exact_match_rate(&codec, &plans)?;
            let usage = codebook_stats(&codec.plans_to_latent(&plans)?.concat(), c.codec.k);
            let corpus_hash = artifact_hash(self.dir, source, producer)?;
            let meta = json!({ "config_hash": self.config_hash, "corpus_hash": corpus_hash });
            codec.save(&self.path(CODEC), &tokenizer.hash(), meta)?;
            self.write_json(
                CODEC_STATS,
                &json!({
                    "config_hash": self.config_hash,
                    "vocab_hash": tokenizer.hash(),
                    "plans": plans.len(),
                    "exact_match": exact,
                    "perplexity": usage.perplexity,
                    "used_codes": usage.used,
                    "training": stats,
                }),
            )
        })
    }

    fn load_tokenizer(&self) -> Result<Tokenizer> {
        let path = self.path(TOKENIZER);
        if !path.is_file() {
            return Err(Error::MissingArtifact { path, stage: "train-codec".into() });
        }
        Tokenizer::from_json(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)
    }

    /// The codec and its file hash, refusing one trained on another vocabulary.
    fn load_codec(&self, tokenizer: &Tokenizer) -> Result<(Codec<f32>, String)> {
        let hash = artifact_hash(self.dir, CODEC, "train-codec")?;
        let (codec, vocab_hash) = Codec::load(&self.path(CODEC))?;
        if vocab_hash != tokenizer.hash() {
            return Err(Error::HashMismatch {
                what: "codec vocabulary".into(),
                expected: tokenizer.hash(),
                found: vocab_hash,
            });
        }
        Ok((codec, hash))
    }

    fn vocabulary(&self, tokenizer: Tokenizer) -> Result<Box<dyn Vocabulary>> {
        Ok(if self.latent() {
            Box::new(ExtendedVocabulary::new(tokenizer, self.config.codec.k)?)
        } else {
            Box::new(tokenizer)
        })
    }

    fn latentize(&self) -> Result<Outcome> {
        let c = self.config;
        let (source, producer) = self.corpus_source();
        let slice = json!({ "latent": c.latent });
        let mut upstream = vec![(source, producer), (CORPUS_TEST, "gen-corpus"), (TOKENIZER, "train-codec")];
        if self.latent() {
            upstream.push((CODEC, "train-codec"));
        }
        self.stage("latentize", slice, &upstream, &[DATASET, DATASET_TEST], || {
            let tokenizer = self.load_tokenizer()?;
            let codec = if self.latent() { Some(self.load_codec(&tokenizer)?) } else { None };
            let vocab = self.vocabulary(tokenizer.clone())?;
            let ext = codec.as_ref().map(|_| ExtendedVocabulary::new(tokenizer.clone(), c.codec.k)).transpose()?;
            let header = DatasetHeader {
                format: DATASET_FORMAT.into(),
                version: 1,
                mode: c.latent.mode,
                vocab_hash: vocab.vocab_hash(),
                vocab_size: vocab.size(),
                codec_hash: codec.as_ref().map(|(_, h)| h.clone()),
            };
            for (input, output) in [(source, DATASET), (CORPUS_TEST, DATASET_TEST)] {
                let samples = read_jsonl(&self.path(input))?;
                let mut w = DatasetWriter::create(&self.path(output), header.clone())?;
                for s in &samples {
                    let r = match (&codec, &ext) {
                        (Some((codec, hash)), Some(ext)) => latentize_sample(s, codec, ext, hash)?,
                        _ => render_baseline(s, c.latent.mode, &tokenizer)?,
                    };
                    w.write(&r)?;
                }
                w.finish()?;
            }
            Ok(())
        })
    }

    fn finetune(&self) -> Result<Outcome> {
        let c = self.config;
        let slice = json!({ "seed": c.seed, "lm": c.lm, "sft": c.sft });
        let upstream = [(DATASET, "latentize"), (DATASET_TEST, "latentize"), (TOKENIZER, "train-codec")];
        self.stage("finetune", slice, &upstream, &[MODEL, TRAIN_LOG], || {
            let tokenizer = self.load_tokenizer()?;
            let (header, train) = read_dataset(&self.path(DATASET), None)?;
            let (_, eval) = read_dataset(&self.path(DATASET_TEST), Some(&header.vocab_hash))?;
            let mut model = LanguageModel::<f32>::new(
                c.lm.clone(),
                header.vocab_size,
                tokenizer.len(),
                &mut Rng::derived(c.seed, "lm"),
            )?;
            log::info!("finetune: {} parameters, {} records", model.param_count(), train.len());
            let meta = json!({
                "config_hash": self.config_hash,
                "codec_hash": header.codec_hash,
                "dataset_hash": artifact_hash(self.dir, DATASET, "latentize")?,
                "mode": header.mode,
            });
            let partial = self.path("lm.partial.ckpt");
            let mut save_partial = |m: &LanguageModel<f32>, step: u64| -> Result<()> {
                log::info!("finetune: checkpoint at step {step}");
                m.save(&partial, &header.vocab_hash, meta.clone())
            };
            let hook: Option<&mut dyn FnMut(&LanguageModel<f32>, u64) -> Result<()>> =
                if c.sft.checkpoint_every.is_some() { Some(&mut save_partial) } else { None };
            let log = finetune_sft(&mut model, &train, &eval, &c.sft, c.seed, hook)?;
            log::info!("finetune: eval loss {:.4} -> {:.4}", log.initial_eval_loss, log.final_eval_loss());
            model.save(&self.path(MODEL), &header.vocab_hash, meta.clone())?;
            log.write_csv(&self.path(TRAIN_LOG))
        })
    }

    /// Loads the model after checking it against the dataset, codec and
    /// vocabulary currently on disk.
    fn checked_model(&self) -> Result<(LanguageModel<f32>, Box<dyn Vocabulary>, BTreeMap<String, String>)> {
        let tokenizer = self.load_tokenizer()?;
        let model_hash = artifact_hash(self.dir, MODEL, "finetune")?;
        let dataset_hash = artifact_hash(self.dir, DATASET, "latentize")?;
        let header = DatasetReader::open(&self.path(DATASET), None)?.header().clone();
        let (_, meta) = checkpoint_meta(&self.path(MODEL))?;
        let (model, vocab_hash) = LanguageModel::load(&self.path(MODEL))?;
        let vocab = self.vocabulary(tokenizer.clone())?;
        let mismatch = |what: &str, expected: &str, found: &str| -> Result<()> {
            if expected == found {
                Ok(())
            } else {
                Err(Error::HashMismatch { what: what.into(), expected: expected.into(), found: found.into() })
            }
        };
        mismatch("model vocabulary", &vocab.vocab_hash(), &vocab_hash)?;
        mismatch("model dataset", &dataset_hash, meta["dataset_hash"].as_str().unwrap_or(""))?;
        let mut hashes = BTreeMap::from([
            ("config".to_string(), self.config_hash.clone()),
            ("model".to_string(), model_hash),
            ("dataset".to_string(), dataset_hash),
            ("vocab".to_string(), vocab.vocab_hash()),
        ]);
        if self.latent() {
            let (_, codec_hash) = self.load_codec(&tokenizer)?;
            mismatch("model codec", &codec_hash, meta["codec_hash"].as_str().unwrap_or(""))?;
            mismatch("dataset codec", &codec_hash, header.codec_hash.as_deref().unwrap_or(""))?;
            hashes.insert("codec".into(), codec_hash);
        }
        Ok((model, vocab, hashes))
    }

    fn evaluate(&self) -> Result<Outcome> {
        let c = self.config;
        let slice = json!({ "seed": c.seed, "eval": c.eval, "mode": c.latent.mode });
        let mut upstream =
            vec![(MODEL, "finetune"), (DATASET, "latentize"), (TOKENIZER, "train-codec"), (CORPUS_TEST, "gen-corpus")];
        let mut outputs = vec![EVAL_JSON, EVAL_CSV, TOKEN_COST, GENERATIONS];
        if c.eval.cross_family.is_some() {
            upstream.push((CROSS_TEST, "gen-corpus"));
            outputs.push(CROSS_CSV);
        }
        if self.latent() {
            upstream.push((CODEC, "train-codec"));
        }
        self.stage("evaluate", slice, &upstream, &outputs, || {
            let (model, vocab, hashes) = self.checked_model()?;
            let generator = GreedyModel { model: &model, max_new_tokens: c.eval.max_new_tokens };
            let families: Vec<String> = c.corpus.families.iter().map(|f| f.to_string()).collect();
            let mode = if families.len() > 1 {
                EvalMode::Accumulation { sources: families.clone() }
            } else {
                EvalMode::Normal
            };
            let test = read_jsonl(&self.path(CORPUS_TEST))?;
            let (report, results) = evaluate_pass1(&generator, vocab.as_ref(), &test, &mode, c.seed, hashes.clone());
            log::info!(
                "evaluate: {} pass@1 {:.1}% ({}/{})",
                report.mode,
                report.accuracy,
                report.correct,
                report.total
            );
            let mut reports = vec![report];
            write_results_csv(&self.path(EVAL_CSV), &results)?;
            let cost = token_cost_report(&results);
            write_token_cost_csv(&self.path(TOKEN_COST), &cost)?;
            write_generations(&self.path(GENERATIONS), &results)?;
            if let Some(f) = c.eval.cross_family {
                let cross = read_jsonl(&self.path(CROSS_TEST))?;
                let mode = EvalMode::Cross { train: families.join("+"), test: f.to_string() };
                let (report, results) = evaluate_pass1(&generator, vocab.as_ref(), &cross, &mode, c.seed, hashes);
                log::info!("evaluate: {} pass@1 {:.1}%", report.mode, report.accuracy);
                write_results_csv(&self.path(CROSS_CSV), &results)?;
                reports.push(report);
            }
            self.write_json(
                EVAL_JSON,
                &EvalSummary {
                    config_hash: self.config_hash.clone(),
                    reports,
                    token_cost: TokenCostSummary { mean: cost.mean, std: cost.std, count: cost.per_question.len() },
                },
            )
        })
    }

    fn analyze(&self) -> Result<Outcome> {
        let c = self.config;
        if !self.latent() {
            return Err(Error::Precondition("analyze needs latent.mode = latent".into()));
        }
        let slice = json!({ "seed": c.seed, "analyze": c.analyze });
        let upstream = [(GENERATIONS, "evaluate"), (CODEC, "train-codec"), (TOKENIZER, "train-codec")];
        let outputs = [ANALYSIS, DISTANCES_CSV, DISTANCES_SVG, PROJECTION_CSV, PROJECTION_SVG];
        self.stage("analyze", slice, &upstream, &outputs, || {
            let tokenizer = self.load_tokenizer()?;
            let (codec, codec_hash) = self.load_codec(&tokenizer)?;
            let vocab = ExtendedVocabulary::new(tokenizer, c.codec.k)?;
            let traces = read_traces(&self.path(GENERATIONS))?;
            let set = collect_step_encodings(&traces, codec.codebook(), &vocab, c.analyze.step)?;
            // Too few encodings (an undertrained model that emits no plans)
            // yield empty reports rather than a failed run.
            let (distances, projection) = if set.vectors.len() >= 3 {
                (pairwise_distances(&set)?, project_2d(&set, c.seed, c.analyze.tsne.as_ref())?)
            } else {
                log::warn!(
                    "analyze: only {} generations contain a step-{} latent plan; reports are empty",
                    set.vectors.len(),
                    c.analyze.step
                );
                (
                    DistanceMatrix { labels: Vec::new(), ids: Vec::new(), n: 0, data: Vec::new() },
                    Projection { ids: Vec::new(), labels: Vec::new(), points: Vec::new() },
                )
            };
            let measured = distances.n >= 2;
            let (within, between) = distances.within_between();
            let (p_within, p_between) = projection.within_between();
            distances.write_csv(&self.path(DISTANCES_CSV))?;
            distances.write_svg(&self.path(DISTANCES_SVG))?;
            projection.write_csv(&self.path(PROJECTION_CSV))?;
            projection.write_svg(&self.path(PROJECTION_SVG))?;
            let (within, between, p_within, p_between) = if measured {
                (Some(within), Some(between), Some(p_within), Some(p_between))
            } else {
                (None, None, None, None)
            };
            log::info!("analyze: within {within:?} between {between:?} over {} traces", set.vectors.len());
            self.write_json(
                ANALYSIS,
                &AnalysisSummary {
                    config_hash: self.config_hash.clone(),
                    codec_hash,
                    step: c.analyze.step,
                    encoded: set.vectors.len(),
                    skipped: set.skipped,
                    within,
                    between,
                    projection_within: p_within,
                    projection_between: p_between,
                },
            )
        })
    }

    fn ablate(&self) -> Result<Outcome> {
        let c = self.config;
        let (source, producer) = self.corpus_source();
        let slice = json!({
            "seed": c.seed, "ablate": c.ablate, "codec": c.codec, "lm": c.lm, "sft": c.sft, "eval": c.eval,
        });
        let upstream = [(source, producer), (CORPUS_TEST, "gen-corpus"), (TOKENIZER, "train-codec")];
        self.stage("ablate", slice, &upstream, &[ABLATION], || {
            let tokenizer = self.load_tokenizer()?;
            let train = read_jsonl(&self.path(source))?;
            let test = read_jsonl(&self.path(CORPUS_TEST))?;
            let plans = plan_set(&train, &tokenizer)?;
            let rows = run_ablation_grid(&c.ablate.dims, &c.ablate.sizes, |d_h, k| {
                log::info!("ablate: d_h={d_h} K={k}");
                let cfg = CodecConfig { d_h, k, ..c.codec.clone() };
                ablation_cell(c, &cfg, &tokenizer, &plans, &train, &test)
            })?;
            write_ablation_csv(&self.path(ABLATION), &rows)
        })
    }
}

/// One grid cell: train a codec, latentize, fine-tune, evaluate.
fn ablation_cell(
    c: &PipelineConfig,
    codec_cfg: &CodecConfig,
    tokenizer: &Tokenizer,
    plans: &[Vec<u32>],
    train: &[ReasoningSample],
    test: &[ReasoningSample],
) -> Result<CellResult> {
    let (codec, _) = train_codec(plans, codec_cfg, tokenizer.len(), c.seed)?;
    let reconstruction = exact_match_rate(&codec, plans)?;
    let perplexity = codebook_stats(&codec.plans_to_latent(plans)?.concat(), codec_cfg.k).perplexity;
    let vocab = ExtendedVocabulary::new(tokenizer.clone(), codec_cfg.k)?;
    let tag = format!("ablate-{}x{}", codec_cfg.d_h, codec_cfg.k);
    let records = |s: &[ReasoningSample]| -> Result<Vec<TrainingRecord>> {
        s.iter().map(|x| latentize_sample(x, &codec, &vocab, &tag)).collect()
    };
    let (tr, te) = (records(train)?, records(test)?);
    let mut model =
        LanguageModel::<f32>::new(c.lm.clone(), vocab.len(), tokenizer.len(), &mut Rng::derived(c.seed, "lm"))?;
    finetune_sft(&mut model, &tr, &te, &c.sft, c.seed, None)?;
    let generator = GreedyModel { model: &model, max_new_tokens: c.eval.max_new_tokens };
    let (report, _) = evaluate_pass1(&generator, &vocab, test, &EvalMode::Normal, c.seed, BTreeMap::new());
    Ok(CellResult { reconstruction, perplexity, pass1: report.accuracy })
}

/// Tokenizer over every family's renderable text plus the corpus itself,
/// so distilled wording is covered too.
pub fn build_tokenizer<'a>(families: &[Family], samples: impl Iterator<Item = &'a ReasoningSample>) -> Tokenizer {
    let mut texts: Vec<String> = families.iter().flat_map(|&f| vocabulary_texts(f)).collect();
    for s in samples {
        texts.push(s.question.clone());
        texts.extend(s.steps.iter().map(|x| step_line(x)));
        texts.extend(s.plans.iter().map(|p| format!("{p}\n")));
    }
    Tokenizer::build(texts.iter().map(String::as_str))
}

/// Distinct tokenized plans of the plan corpus. Samples from several
/// sources are merged first, so duplicate plan chains count once.
pub fn plan_set(samples: &[ReasoningSample], tokenizer: &Tokenizer) -> Result<Vec<Vec<u32>>> {
    let mut by_source: BTreeMap<String, Vec<ReasoningSample>> = BTreeMap::new();
    for s in samples {
        let key = s.source.clone().unwrap_or_else(|| s.family.to_string());
        by_source.entry(key).or_default().push(s.clone());
    }
    let corpora: Vec<NamedCorpus> = by_source
        .into_iter()
        .map(|(name, samples)| NamedCorpus { name, tokenizer_hash: Some(tokenizer.hash()), samples })
        .collect();
    let merged = merge_corpora(&corpora, None)?;
    let mut plans: Vec<Vec<u32>> = merged.iter().flat_map(|s| s.plans.iter().map(|p| tokenizer.encode(p))).collect();
    plans.sort();
    plans.dedup();
    Ok(plans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCostSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Contents of `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub reports: Vec<EvalReport>,
    pub token_cost: TokenCostSummary,
}

/// Contents of `analysis.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub config_hash: String,
    pub codec_hash: String,
    pub step: usize,
    pub encoded: usize,
    pub skipped: usize,
    /// Mean within- and between-procedure distance; absent when fewer
    /// than three traces were encoded.
    pub within: Option<f64>,
    pub between: Option<f64>,
    pub projection_within: Option<f64>,
    pub projection_between: Option<f64>,
}

fn checkpoint_meta(path: &Path) -> Result<(String, Value)> {
    let (manifest, _) = checkpoint::load::<f32>(path)?;
    Ok((manifest.kind, manifest.meta))
}

fn write_generations(path: &Path, results: &[QuestionResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        let t = Trace { id: r.id.clone(), label: r.procedure_id.clone(), ids: r.ids.clone() };
        serde_json::to_writer(&mut w, &t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<Trace>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Procedure manifests written by `gen-corpus`.
pub fn read_procedures(path: &Path) -> Result<Vec<ProcedureManifest>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

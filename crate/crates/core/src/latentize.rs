//! Fine-tuning records in which each plan is replaced by latent-plan tokens.
//!
//! The vocabulary is extended with `K` tokens `[LP0] .. [LP{K-1}]` at ids
//! `|base| .. |base|+K`. A sample becomes a user span (`<bos>` and the
//! question) and an assistant span in which each step is preceded by the
//! `L` latent tokens of its plan and the span ends with `<eos>`. The loss
//! mask is 0 on the user span and 1 on the assistant span.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use iclp_substrate::checkpoint::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::corpus::{Family, ReasoningSample};
use crate::tokenizer::{Tokenizer, Vocabulary, BOS, EOS};
use crate::{Error, Result};

/// Base tokenizer plus `K` latent-plan tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedVocabulary {
    base: Tokenizer,
    k: usize,
}

impl ExtendedVocabulary {
    pub fn new(base: Tokenizer, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Vocab("K must be at least 1".into()));
        }
        if let Some(t) = base.tokens().iter().find(|t| t.trim_start().starts_with("[LP")) {
            return Err(Error::Vocab(format!("base token {t:?} collides with latent-plan tokens")));
        }
        Ok(Self { base, k })
    }

    pub fn base(&self) -> &Tokenizer {
        &self.base
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// First latent-plan id.
    pub fn offset(&self) -> u32 {
        self.base.len() as u32
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lp_id(&self, idx: usize) -> u32 {
        assert!(idx < self.k, "latent index {idx} outside codebook of {}", self.k);
        self.offset() + idx as u32
    }

    pub fn lp_index(&self, id: u32) -> Option<usize> {
        let i = id.checked_sub(self.offset())? as usize;
        (i < self.k).then_some(i)
    }

    pub fn is_lp(&self, id: u32) -> bool {
        self.lp_index(id).is_some()
    }

    pub fn render(&self, id: u32) -> String {
        match self.lp_index(id) {
            Some(i) => format!("[LP{i}]"),
            None => self.base.token(id).unwrap_or("<unk>").to_string(),
        }
    }

    /// Inverse of [`render`](Self::render) for latent-plan tokens.
    pub fn parse_lp(&self, token: &str) -> Option<u32> {
        let idx: usize = token.strip_prefix("[LP")?.strip_suffix(']')?.parse().ok()?;
        (idx < self.k && token == format!("[LP{idx}]")).then(|| self.lp_id(idx))
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.render(id)).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(format!("{}+LP{}", self.base.hash(), self.k).as_bytes())
    }
}

impl Vocabulary for ExtendedVocabulary {
    fn size(&self) -> usize {
        self.len()
    }

    fn base(&self) -> &Tokenizer {
        &self.base
    }

    fn render(&self, id: u32) -> String {
        ExtendedVocabulary::render(self, id)
    }

    fn vocab_hash(&self) -> String {
        self.hash()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordMode {
    Latent,
    CotOnly,
    ExplicitPlan,
}

/// One fine-tuning record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub user_ids: Vec<u32>,
    pub assistant_ids: Vec<u32>,
    /// One entry per token of `user_ids ++ assistant_ids`.
    pub mask: Vec<u8>,
    pub n: usize,
    pub family: Family,
    pub procedure_id: String,
    pub vocab_hash: String,
    pub codec_hash: Option<String>,
}

impl TrainingRecord {
    pub fn len(&self) -> usize {
        self.user_ids.len() + self.assistant_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<u32> {
        let mut v = self.user_ids.clone();
        v.extend_from_slice(&self.assistant_ids);
        v
    }
}

fn user_ids(tokenizer: &Tokenizer, question: &str) -> Vec<u32> {
    let mut v = vec![BOS];
    v.extend(tokenizer.encode(question));
    v
}

fn record(
    sample: &ReasoningSample,
    user: Vec<u32>,
    assistant: Vec<u32>,
    vocab_hash: String,
    codec_hash: Option<String>,
) -> TrainingRecord {
    let mut mask = vec![0u8; user.len()];
    mask.extend(std::iter::repeat_n(1u8, assistant.len()));
    TrainingRecord {
        id: sample.id.clone(),
        user_ids: user,
        assistant_ids: assistant,
        mask,
        n: sample.n(),
        family: sample.family,
        procedure_id: sample.procedure_id.clone(),
        vocab_hash,
        codec_hash,
    }
}

/// Step text as it appears in assistant spans.
pub fn step_line(step: &str) -> String {
    format!("{step}\n")
}

/// Rewrites a sample with latent plans. `latents[i]` are the codebook
/// indices of plan `i`, as produced by [`Codec::plan_to_latent`].
pub fn latentize_with(
    sample: &ReasoningSample,
    latents: &[Vec<usize>],
    vocab: &ExtendedVocabulary,
    codec_hash: &str,
) -> Result<TrainingRecord> {
    sample.validate()?;
    if latents.len() != sample.n() {
        return Err(Error::Precondition(format!("{} plans but {} latent spans", sample.n(), latents.len())));
    }
    let mut assistant = Vec::new();
    for (step, idx) in sample.steps.iter().zip(latents) {
        for &i in idx {
            assert!(i < vocab.k(), "latent index {i} outside codebook of {}", vocab.k());
            assistant.push(vocab.lp_id(i));
        }
        assistant.extend(vocab.base().encode(&step_line(step)));
    }
    assistant.push(EOS);
    let user = user_ids(vocab.base(), &sample.question);
    Ok(record(sample, user, assistant, vocab.hash(), Some(codec_hash.to_string())))
}

pub fn latentize_sample(
    sample: &ReasoningSample,
    codec: &Codec<f32>,
    vocab: &ExtendedVocabulary,
    codec_hash: &str,
) -> Result<TrainingRecord> {
    if codec.config.k != vocab.k() {
        return Err(Error::Vocab(format!("codec K={} but vocabulary extends by {}", codec.config.k, vocab.k())));
    }
    let plans: Vec<Vec<u32>> = sample.plans.iter().map(|p| vocab.base().encode(p)).collect();
    let latents = codec.plans_to_latent(&plans)?;
    latentize_with(sample, &latents, vocab, codec_hash)
}

/// Records without latent tokens: steps only, or plan text before each step.
pub fn render_baseline(sample: &ReasoningSample, mode: RecordMode, tokenizer: &Tokenizer) -> Result<TrainingRecord> {
    sample.validate()?;
    let mut assistant = Vec::new();
    for (plan, step) in sample.plans.iter().zip(&sample.steps) {
        match mode {
            RecordMode::CotOnly => {}
            RecordMode::ExplicitPlan => assistant.extend(tokenizer.encode(&format!("{plan}\n"))),
            RecordMode::Latent => return Err(Error::Precondition("latent records need a codec".into())),
        }
        assistant.extend(tokenizer.encode(&step_line(step)));
    }
    assistant.push(EOS);
    Ok(record(sample, user_ids(tokenizer, &sample.question), assistant, tokenizer.hash(), None))
}

/// Assistant ids with latent-plan spans removed and `<eos>` dropped.
pub fn strip_latent(ids: &[u32], vocab: &ExtendedVocabulary) -> Vec<u32> {
    ids.iter().copied().filter(|&id| !vocab.is_lp(id) && id != EOS).collect()
}

/// Maximal runs of latent-plan tokens, as codebook indices, in order.
pub fn latent_spans(ids: &[u32], vocab: &ExtendedVocabulary) -> Vec<Vec<usize>> {
    let mut spans = Vec::new();
    let mut cur = Vec::new();
    for &id in ids {
        match vocab.lp_index(id) {
            Some(i) => cur.push(i),
            None if !cur.is_empty() => spans.push(std::mem::take(&mut cur)),
            None => {}
        }
    }
    if !cur.is_empty() {
        spans.push(cur);
    }
    spans
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub mode: RecordMode,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub codec_hash: Option<String>,
}

pub const DATASET_FORMAT: &str = "iclp-sft-dataset";

pub struct DatasetWriter {
    out: BufWriter<File>,
    header: DatasetHeader,
    path: std::path::PathBuf,
}

impl DatasetWriter {
    pub fn create(path: &Path, header: DatasetHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(Self { out, header, path: path.to_path_buf() })
    }

    pub fn write(&mut self, r: &TrainingRecord) -> Result<()> {
        if r.vocab_hash != self.header.vocab_hash || r.codec_hash != self.header.codec_hash {
            return Err(Error::HashMismatch {
                what: format!("record {}", r.id),
                expected: self.header.vocab_hash.clone(),
                found: r.vocab_hash.clone(),
            });
        }
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_dataset(path: &Path, header: DatasetHeader, records: &[TrainingRecord]) -> Result<()> {
    let mut w = DatasetWriter::create(path, header)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// Streams records one line at a time.
pub struct DatasetReader {
    header: DatasetHeader,
    lines: Lines<BufReader<File>>,
    path: std::path::PathBuf,
}

impl DatasetReader {
    /// Opens a dataset, refusing it when `expected_vocab_hash` is given and
    /// differs from the file's.
    pub fn open(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Corpus(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Corpus(format!("{} is not a fine-tuning dataset", path.display())));
        }
        if let Some(want) = expected_vocab_hash {
            if want != header.vocab_hash {
                return Err(Error::HashMismatch {
                    what: format!("vocabulary of {}", path.display()),
                    expected: want.to_string(),
                    found: header.vocab_hash,
                });
            }
        }
        Ok(Self { header, lines, path: path.to_path_buf() })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

impl Iterator for DatasetReader {
    type Item = Result<TrainingRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str::<TrainingRecord>(&line).map_err(Error::from).and_then(|r| {
                if r.vocab_hash == self.header.vocab_hash {
                    Ok(r)
                } else {
                    Err(Error::HashMismatch {
                        what: format!("record {}", r.id),
                        expected: self.header.vocab_hash.clone(),
                        found: r.vocab_hash,
                    })
                }
            });
            return Some(rec);
        }
    }
}

pub fn read_dataset(path: &Path, expected_vocab_hash: Option<&str>) -> Result<(DatasetHeader, Vec<TrainingRecord>)> {
    let reader = DatasetReader::open(path, expected_vocab_hash)?;
    let header = reader.header().clone();
    Ok((header, reader.collect::<Result<Vec<_>>>()?))
}

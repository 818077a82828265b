//! Reasoning samples with per-step plans, and the corpora built from them.

pub mod answer;
pub mod chains;
pub mod distill;
pub mod merge;
pub mod synthetic;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Arith,
    Strings,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Arith => "arith",
            Family::Strings => "strings",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arith" => Ok(Family::Arith),
            "strings" => Ok(Family::Strings),
            other => Err(Error::Corpus(format!("unknown family `{other}` (expected arith or strings)"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A question, its reasoning steps, one plan per step, and the final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningSample {
    pub id: String,
    pub family: Family,
    pub procedure_id: String,
    pub question: String,
    pub steps: Vec<String>,
    pub plans: Vec<String>,
    pub answer: String,
    /// Corpus the sample came from after a merge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ReasoningSample {
    pub fn n(&self) -> usize {
        self.steps.len()
    }

    /// Structural checks: at least one step, one plan per step, and step `i`
    /// starting with `"Step i"`.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Corpus(format!("{}: no steps", self.id)));
        }
        if self.steps.len() != self.plans.len() {
            return Err(Error::Corpus(format!(
                "{}: {} steps but {} plans",
                self.id,
                self.steps.len(),
                self.plans.len()
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if !has_step_prefix(step, i + 1) {
                return Err(Error::Corpus(format!("{}: step {} lacks its `Step {}` prefix", self.id, i + 1, i + 1)));
            }
        }
        if let Some(i) = self.plans.iter().position(|p| p.trim().is_empty()) {
            return Err(Error::Corpus(format!("{}: plan {} is empty", self.id, i + 1)));
        }
        Ok(())
    }
}

/// `"Step 3: ..."` has prefix 3; `"Step 31"` does not.
pub fn has_step_prefix(text: &str, i: usize) -> bool {
    let Some(rest) = text.strip_prefix(&format!("Step {i}")) else {
        return false;
    };
    !rest.starts_with(|c: char| c.is_ascii_digit())
}

pub fn write_jsonl(path: &Path, samples: &[ReasoningSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ReasoningSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ReasoningSample =
            serde_json::from_str(&line).map_err(|e| Error::Corpus(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(s);
    }
    Ok(out)
}

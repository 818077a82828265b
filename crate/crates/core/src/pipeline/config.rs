//! Pipeline configuration: JSON merged over defaults, then dotted
//! `key=value` overrides, then strict parsing and validation.

use std::path::{Path, PathBuf};

use iclp_substrate::checkpoint::json_hash;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::CodecConfig;
use crate::corpus::distill::DistillConfig;
use crate::corpus::Family;
use crate::eval::ablation::validate_grid;
use crate::eval::latent::TsneConfig;
use crate::latentize::RecordMode;
use crate::lm::{LmConfig, SftConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// More than one family trains on the merged corpora.
    pub families: Vec<Family>,
    /// Training samples per family.
    pub count: usize,
    /// Held-out test questions per family.
    pub test_count: usize,
    pub procedures: usize,
    pub heldout_percent: u32,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { families: vec![Family::Arith], count: 2000, test_count: 200, procedures: 20, heldout_percent: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSection {
    pub mode: RecordMode,
}

impl Default for LatentSection {
    fn default() -> Self {
        Self { mode: RecordMode::Latent }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub max_new_tokens: usize,
    /// Also evaluate on this family's test split, tagged `train→test`.
    pub cross_family: Option<Family>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_new_tokens: 160, cross_family: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    /// 1-based reasoning step whose latent span is pooled.
    pub step: usize,
    pub tsne: Option<TsneConfig>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { step: 1, tsne: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub dims: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { dims: vec![16, 32], sizes: vec![32, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub distill: DistillConfig,
    pub codec: CodecConfig,
    pub latent: LatentSection,
    pub lm: LmConfig,
    pub sft: SftConfig,
    pub eval: EvalSection,
    pub analyze: AnalyzeSection,
    pub ablate: AblateSection,
}

impl Default for PipelineConfig {
    /// The desk-scale acceptance run.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusSection::default(),
            distill: DistillConfig::default(),
            codec: CodecConfig::desk(),
            latent: LatentSection::default(),
            lm: LmConfig::default(),
            sft: SftConfig { epochs: 3, ..SftConfig::default() },
            eval: EvalSection::default(),
            analyze: AnalyzeSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when it parses,
/// otherwise taken as a string. The key must name an existing field.
fn apply_override(root: &mut Value, assignment: &str) -> std::result::Result<(), String> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| format!("override `{assignment}` is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("override `{key}`: `{}` is not a section", parts[..i].join(".")))?;
        if !obj.contains_key(*part) {
            return Err(format!("override `{key}`: unknown key `{part}`"));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked above");
    }
    Err(format!("override `{assignment}` has an empty key"))
}

impl PipelineConfig {
    /// Defaults, overlaid by the file at `path` (if any), then `overrides`.
    /// Every problem found is reported together.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            merge(&mut root, serde_json::from_str(&text)?);
        }
        let mut errors: Vec<String> = overrides.iter().filter_map(|o| apply_override(&mut root, o).err()).collect();
        let config: Self = match serde_json::from_value(root) {
            Ok(c) => c,
            Err(e) => {
                errors.push(format!("config: {e}"));
                return Err(Error::Config(errors));
            }
        };
        config.validate(&mut errors);
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        let c = &self.corpus;
        if c.families.is_empty() {
            errors.push("corpus.families must name at least one family".into());
        }
        let mut fams = c.families.clone();
        fams.sort();
        fams.dedup();
        if fams.len() != c.families.len() {
            errors.push("corpus.families has duplicates".into());
        }
        if c.count == 0 {
            errors.push("corpus.count must be at least 1".into());
        }
        if c.test_count == 0 {
            errors.push("corpus.test_count must be at least 1".into());
        }
        if c.heldout_percent == 0 || c.heldout_percent >= 100 {
            errors.push(format!("corpus.heldout_percent must be in 1..=99, got {}", c.heldout_percent));
        }
        if c.procedures == 0 || c.procedures > 90 {
            errors.push(format!("corpus.procedures must be in 1..=90, got {}", c.procedures));
        }
        if self.distill.enabled {
            self.distill.validate(errors);
        }
        self.codec.validate(errors);
        self.lm.validate(errors);
        self.sft.validate(errors);
        if self.eval.max_new_tokens == 0 {
            errors.push("eval.max_new_tokens must be at least 1".into());
        }
        if let Some(f) = self.eval.cross_family {
            if c.families.contains(&f) {
                errors.push(format!("eval.cross_family `{f}` is also a training family"));
            }
        }
        if self.analyze.step == 0 {
            errors.push("analyze.step is 1-based".into());
        }
        if let Err(Error::Config(e)) = validate_grid(&self.ablate.dims, &self.ablate.sizes) {
            errors.extend(e.into_iter().map(|m| m.replace("ablation", "ablate")));
        }
        if self.out_dir.as_os_str().is_empty() {
            errors.push("out_dir must be set".into());
        }
    }

    /// Hash of everything but `out_dir`, so identical runs in different
    /// directories agree.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("out_dir");
        json_hash(&v)
    }

    /// Every family whose text the tokenizer must cover.
    pub fn all_families(&self) -> Vec<Family> {
        let mut f = self.corpus.families.clone();
        f.extend(self.eval.cross_family);
        f.sort();
        f.dedup();
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::load(None, &[]).unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.codec.k, 64);
        assert_eq!(c.sft.epochs, 3);
    }

    #[test]
    fn overrides_change_the_hash() {
        let a = PipelineConfig::load(None, &[]).unwrap();
        let b = PipelineConfig::load(None, &["codec.K=32".into(), "latent.mode=cot_only".into()]).unwrap();
        assert_eq!(b.codec.k, 32);
        assert_eq!(b.latent.mode, RecordMode::CotOnly);
        assert_ne!(a.hash(), b.hash());
        let c = PipelineConfig::load(None, &["codec.K=64".into()]).unwrap();
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn file_is_merged_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 7, "codec": {"epochs": 5}}"#).unwrap();
        let c = PipelineConfig::load(Some(&p), &[]).unwrap();
        assert_eq!((c.seed, c.codec.epochs, c.codec.k), (7, 5, 64));
    }

    #[test]
    fn every_violation_is_listed() {
        let err = PipelineConfig::load(
            None,
            &["codec.K=1".into(), "lm.heads=3".into(), "corpus.count=0".into(), "nope.x=1".into()],
        )
        .unwrap_err();
        match err {
            Error::Config(e) => {
                assert_eq!(e.len(), 4, "{e:?}");
                assert!(e.iter().any(|m| m.contains("unknown key `nope`")));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn cross_family_must_differ() {
        let mut errors = Vec::new();
        let c = PipelineConfig {
            eval: EvalSection { cross_family: Some(Family::Arith), ..Default::default() },
            ..Default::default()
        };
        c.validate(&mut errors);
        assert_eq!(errors.len(), 1);
    }
}

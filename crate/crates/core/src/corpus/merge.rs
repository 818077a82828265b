//! Merging plan corpora with duplicate removal.
//!
//! Without a codec two samples are duplicates when their plan chains are
//! textually identical. With a codec they are duplicates when every plan
//! quantizes to the same latent index vector, so textually different plans
//! that share a latent code collapse.

use std::collections::HashSet;

use super::ReasoningSample;
use crate::{Error, Result};

/// Maps a plan to its latent index vector.
pub trait LatentKeyer {
    fn plan_indices(&self, plan: &str) -> Result<Vec<usize>>;
}

pub struct NamedCorpus {
    pub name: String,
    /// Hash of the tokenizer the corpus was prepared with, when known.
    pub tokenizer_hash: Option<String>,
    pub samples: Vec<ReasoningSample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Key {
    Text(Vec<String>),
    Latent(Vec<Vec<usize>>),
}

/// Union of `corpora` in order, first occurrence kept. Samples without a
/// `source` are tagged with their corpus name.
pub fn merge_corpora(corpora: &[NamedCorpus], keyer: Option<&dyn LatentKeyer>) -> Result<Vec<ReasoningSample>> {
    let hashes: HashSet<&str> = corpora.iter().filter_map(|c| c.tokenizer_hash.as_deref()).collect();
    if hashes.len() > 1 {
        return Err(Error::Vocab(format!(
            "cannot merge corpora prepared with different tokenizers: {}",
            corpora
                .iter()
                .map(|c| format!("{}={}", c.name, c.tokenizer_hash.as_deref().unwrap_or("?")))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for corpus in corpora {
        for s in &corpus.samples {
            let key = match keyer {
                Some(k) => Key::Latent(s.plans.iter().map(|p| k.plan_indices(p)).collect::<Result<_>>()?),
                None => Key::Text(s.plans.clone()),
            };
            if seen.insert(key) {
                let mut s = s.clone();
                s.source.get_or_insert_with(|| corpus.name.clone());
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Merge of a single corpus with itself reduces to chain dedup.
pub fn dedupe_samples(samples: &[ReasoningSample]) -> Vec<ReasoningSample> {
    let mut seen = HashSet::new();
    samples.iter().filter(|s| seen.insert(s.plans.clone())).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{generate, SyntheticConfig};
    use crate::corpus::Family;

    fn corpus(name: &str, family: Family, count: usize) -> NamedCorpus {
        let cfg = SyntheticConfig { family, count, procedures: 6, ..Default::default() };
        NamedCorpus { name: name.into(), tokenizer_hash: Some("t".into()), samples: generate(&cfg).unwrap().0 }
    }

    #[test]
    fn self_merge_is_dedupe() {
        let a = corpus("a", Family::Arith, 30);
        let b = NamedCorpus { name: "a".into(), tokenizer_hash: Some("t".into()), samples: a.samples.clone() };
        let merged = merge_corpora(&[a, b], None).unwrap();
        let mut expected = dedupe_samples(&corpus("a", Family::Arith, 30).samples);
        for s in &mut expected {
            s.source = Some("a".into());
        }
        assert_eq!(merged, expected);
        assert_eq!(merged.len(), 6);
    }

    #[test]
    fn cross_family_merge_is_bounded_and_tagged() {
        let a = corpus("arith", Family::Arith, 12);
        let s = corpus("strings", Family::Strings, 12);
        let merged = merge_corpora(&[a, s], None).unwrap();
        assert!(merged.len() <= 24);
        assert!(merged.iter().any(|m| m.source.as_deref() == Some("strings")));
    }

    #[test]
    fn incompatible_tokenizers_rejected() {
        let a = corpus("a", Family::Arith, 3);
        let mut b = corpus("b", Family::Arith, 3);
        b.tokenizer_hash = Some("other".into());
        assert!(matches!(merge_corpora(&[a, b], None), Err(Error::Vocab(_))));
    }

    struct FirstWord;
    impl LatentKeyer for FirstWord {
        fn plan_indices(&self, plan: &str) -> Result<Vec<usize>> {
            Ok(vec![plan.split(' ').next().unwrap().len()])
        }
    }

    #[test]
    fn latent_key_collapses_colliding_plans() {
        let first = corpus("a", Family::Arith, 1).samples.remove(0);
        let mut other = first.clone();
        other.plans = other.plans.iter().map(|p| format!("{p}!")).collect();
        let c = NamedCorpus { name: "a".into(), tokenizer_hash: None, samples: vec![first, other] };
        assert_eq!(merge_corpora(std::slice::from_ref(&c), None).unwrap().len(), 2);
        assert_eq!(merge_corpora(std::slice::from_ref(&c), Some(&FirstWord)).unwrap().len(), 1);
    }
}

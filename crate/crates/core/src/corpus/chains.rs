//! Whole-chain uniqueness and correctness filtering.

use serde::{Deserialize, Serialize};

use super::answer;
use super::Family;

/// The ordered plans of one trajectory. Equality is exact text equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanChain {
    pub plans: Vec<String>,
    pub sample_id: String,
    pub trajectory: usize,
}

/// One sampled solution: step texts with a plan per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<String>,
    pub plans: Vec<String>,
}

/// Keeps the first occurrence of every chain, preserving order.
pub fn dedupe_chains(chains: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for c in chains {
        if !out.contains(c) {
            out.push(c.clone());
        }
    }
    out
}

/// Trajectories whose final step yields the canonical answer. An answer
/// that cannot be extracted counts as wrong.
pub fn filter_correct(family: Family, trajectories: Vec<Trajectory>, answer: &str) -> Vec<Trajectory> {
    trajectories
        .into_iter()
        .filter(|t| {
            let got = t.steps.last().and_then(|s| answer::extract(family, s));
            if got.is_none() {
                log::warn!("no extractable answer in trajectory ending {:?}", t.steps.last());
            }
            got.as_deref() == Some(answer)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dedupe_examples() {
        let a = c(&["x", "y"]);
        let b = c(&["y"]);
        assert_eq!(dedupe_chains(&[a.clone(), b.clone(), a.clone()]), vec![a.clone(), b]);
        assert!(dedupe_chains(&[]).is_empty());
        let spaced = c(&["x ", "y"]);
        assert_eq!(dedupe_chains(&[a.clone(), spaced.clone()]).len(), 2);
    }

    #[test]
    fn filter_examples() {
        let t = |last: &str| Trajectory { steps: vec![format!("Step 1: = {last}")], plans: c(&["p"]) };
        let kept = filter_correct(Family::Arith, vec![t("13"), t("14"), t("13")], "13");
        assert_eq!(kept.len(), 2);
        assert!(filter_correct(Family::Arith, vec![t("1"), t("none")], "13").is_empty());
    }

    proptest! {
        #[test]
        fn dedupe_is_idempotent_and_unique(raw in proptest::collection::vec(proptest::collection::vec("[ab]{1,2}", 1..3), 0..12)) {
            let once = dedupe_chains(&raw);
            prop_assert_eq!(dedupe_chains(&once), once.clone());
            for i in 0..once.len() {
                for j in i + 1..once.len() {
                    prop_assert_ne!(&once[i], &once[j]);
                }
            }
            // order preserved: first occurrences appear in input order
            let firsts: Vec<usize> = once.iter().map(|c| raw.iter().position(|r| r == c).unwrap()).collect();
            prop_assert!(firsts.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn filter_is_a_subset(answers in proptest::collection::vec(0u32..5, 0..10), truth in 0u32..5) {
            let ts: Vec<Trajectory> = answers.iter().map(|a| Trajectory { steps: vec![format!("Step 1: {a}")], plans: c(&["p"]) }).collect();
            let kept = filter_correct(Family::Arith, ts.clone(), &truth.to_string());
            prop_assert_eq!(kept.len(), answers.iter().filter(|&&a| a == truth).count());
            prop_assert!(kept.iter().all(|k| ts.contains(k)));
        }
    }
}

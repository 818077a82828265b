//! Codebook usage diagnostics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub histogram: Vec<u64>,
    /// `exp(entropy)` of the normalized histogram: 1 under collapse, K for
    /// uniform use.
    pub perplexity: f64,
    pub used: usize,
}

pub fn codebook_stats(assignments: &[usize], k: usize) -> CodebookStats {
    let mut histogram = vec![0u64; k];
    for &a in assignments {
        histogram[a] += 1;
    }
    CodebookStats { perplexity: perplexity(&histogram), used: histogram.iter().filter(|&&c| c > 0).count(), histogram }
}

pub fn perplexity(histogram: &[u64]) -> f64 {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let entropy: f64 = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_and_uniform() {
        assert_eq!(codebook_stats(&[3, 3, 3], 8).perplexity, 1.0);
        let all: Vec<usize> = (0..16).collect();
        let s = codebook_stats(&all, 16);
        assert!((s.perplexity - 16.0).abs() < 1e-9);
        assert_eq!(s.used, 16);
    }

    #[test]
    fn within_bounds() {
        let s = codebook_stats(&[0, 0, 1, 2, 2, 2], 4);
        assert!(s.perplexity > 1.0 && s.perplexity <= 4.0);
        assert_eq!(s.histogram, vec![2, 1, 3, 0]);
    }
}

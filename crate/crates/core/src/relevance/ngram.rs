// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small sentence-level n-gram overlap metric used to weight caption
//! words.

use std::collections::BTreeMap;

const MAX_ORDER: usize = 4;

fn counts(tokens: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut map = BTreeMap::new();
    for w in tokens.windows(n) {
        *map.entry(w).or_insert(0) += 1;
    }
    map
}

/// Clipped n-gram precision for orders `1..=min(4, |candidate|)`, combined
/// by geometric mean and scaled by a brevity penalty against the reference
/// whose length is closest to the candidate (shorter wins ties).
///
/// Returns a value in `[0, 1]`; an empty candidate or an empty reference
/// list scores 0.
pub fn ngram_eval(candidate: &[usize], references: &[Vec<usize>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let orders = candidate.len().min(MAX_ORDER);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand = counts(candidate, n);
        let mut max_ref: BTreeMap<&[usize], usize> = BTreeMap::new();
        for r in references {
            for (g, c) in counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let total: usize = cand.values().sum();
        let matched: usize = cand
            .iter()
            .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if matched == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let precision = (log_sum / orders as f64).exp();

    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (precision * bp).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_scores_one() {
        let r = vec![vec![3, 4, 5, 6, 7]];
        assert!((ngram_eval(&[3, 4, 5, 6, 7], &r) - 1.0).abs() < 1e-15);
        assert!((ngram_eval(&[3, 4], &[vec![3, 4]]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_scores_zero() {
        assert_eq!(ngram_eval(&[1, 2, 3], &[vec![4, 5, 6]]), 0.0);
        assert_eq!(ngram_eval(&[], &[vec![4, 5, 6]]), 0.0);
    }

    #[test]
    fn clipping_limits_repeats() {
        // unigram: "7 7 7" against "7 8 9": one clipped match of three
        let v = ngram_eval(&[7, 7, 7], &[vec![7, 8, 9]]);
        assert_eq!(v, 0.0, "bigram precision is zero");
        let v = ngram_eval(&[7, 7], &[vec![7, 8]]);
        assert_eq!(v, 0.0);
        let v = ngram_eval(&[7], &[vec![7, 7]]);
        // p1 = 1, bp = exp(1 - 2) since the only reference is longer
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn closest_reference_length_is_used() {
        let refs = vec![vec![1, 2, 3, 4, 5, 6], vec![1, 2, 3]];
        assert!((ngram_eval(&[1, 2, 3], &refs) - 1.0).abs() < 1e-15);
    }
}
